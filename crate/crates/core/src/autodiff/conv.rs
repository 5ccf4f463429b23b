use super::kernels::{col2im, im2col, ConvGeom, Pads};
use super::{GradSink, Graph, Op, Padding, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims4(op: &'static str, what: &str, shape: &[usize]) -> Result<[usize; 4], TensorError> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::shape(op, format!("{what} must be rank 4, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// Stride-1 2-D convolution (cross-correlation).
    ///
    /// `input` is `[N, C, H, W]`, `kernel` is `[F, C, kh, kw]`, `bias` is `[F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = dims4(OP, "input", self.shape(input))?;
        let [f, kc, kh, kw] = dims4(OP, "kernel", self.shape(kernel))?;
        if kc != c {
            return Err(TensorError::shape(OP, format!("kernel expects {kc} input channels, input has {c}")));
        }
        if self.shape(bias) != [f] {
            return Err(TensorError::shape(OP, format!("bias shape {:?}, expected [{f}]", self.shape(bias))));
        }
        let pads = match padding {
            Padding::Same => Pads::same(kh, kw),
            Padding::Valid => Pads::NONE,
        };
        if kh == 0 || kw == 0 || kh > h + pads.top + pads.bottom || kw > w + pads.left + pads.right {
            return Err(TensorError::shape(OP, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let geom = ConvGeom { channels: c, height: h, width: w, kh, kw, pads };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (plane, ckk) = (oh * ow, geom.col_rows());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * f * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        for s in 0..n {
            im2col(&x[s * c * h * w..(s + 1) * c * h * w], &geom, &mut cols);
            let o = &mut out[s * f * plane..(s + 1) * f * plane];
            for (fi, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.fill(b[fi]);
            }
            T::gemm(f, ckk, plane, T::one(), k, (ckk as isize, 1), &cols, (plane as isize, 1), T::one(), o, (plane as isize, 1));
        }
        let value = Tensor::new(&[n, f, oh, ow], out)?;
        self.push_op(OP, value, Op::Conv2d { input, kernel, bias, pads })
    }

    /// Stride-1 transposed convolution without padding: the adjoint of a
    /// valid [`Graph::conv2d`].
    ///
    /// `input` is `[N, C, H, W]`, `kernel` is `[C, F, kh, kw]`, `bias` is `[F]`;
    /// the output is `[N, F, H + kh - 1, W + kw - 1]`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "conv_transpose2d";
        let [n, c, h, w] = dims4(OP, "input", self.shape(input))?;
        let [kc, f, kh, kw] = dims4(OP, "kernel", self.shape(kernel))?;
        if kc != c {
            return Err(TensorError::shape(OP, format!("kernel expects {kc} input channels, input has {c}")));
        }
        if self.shape(bias) != [f] {
            return Err(TensorError::shape(OP, format!("bias shape {:?}, expected [{f}]", self.shape(bias))));
        }
        if kh == 0 || kw == 0 {
            return Err(TensorError::shape(OP, "empty kernel"));
        }
        let (oh, ow) = (h + kh - 1, w + kw - 1);
        let geom = ConvGeom { channels: f, height: oh, width: ow, kh, kw, pads: Pads::NONE };
        let (plane_in, fkk) = (h * w, geom.col_rows());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * f * oh * ow];
        let mut cols = vec![T::zero(); fkk * plane_in];
        for s in 0..n {
            let xs = &x[s * c * plane_in..(s + 1) * c * plane_in];
            T::gemm(fkk, c, plane_in, T::one(), k, (1, fkk as isize), xs, (plane_in as isize, 1), T::zero(), &mut cols, (plane_in as isize, 1));
            let o = &mut out[s * f * oh * ow..(s + 1) * f * oh * ow];
            for (fi, chunk) in o.chunks_mut(oh * ow).enumerate() {
                chunk.fill(b[fi]);
            }
            col2im(&cols, &geom, o);
        }
        let value = Tensor::new(&[n, f, oh, ow], out)?;
        self.push_op(OP, value, Op::ConvTranspose2d { input, kernel, bias })
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    pads: Pads,
    out_shape: &[usize],
    g: &[T],
    input: Var,
    kernel: Var,
    bias: Var,
    sink: &mut GradSink<'_, T>,
) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let geom = ConvGeom { channels: c, height: h, width: w, kh, kw, pads };
    let plane = out_shape[2] * out_shape[3];
    let ckk = geom.col_rows();
    let (want_x, want_k, want_b) = (sink.wants(input), sink.wants(kernel), sink.wants(bias));
    let mut dk = vec![T::zero(); if want_k { f * ckk } else { 0 }];
    let mut dx = vec![T::zero(); if want_x { x.numel() } else { 0 }];
    let mut db = vec![T::zero(); f];
    let mut cols = vec![T::zero(); ckk * plane];
    for s in 0..n {
        let gs = &g[s * f * plane..(s + 1) * f * plane];
        if want_k {
            im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], &geom, &mut cols);
            T::gemm(f, plane, ckk, T::one(), gs, (plane as isize, 1), &cols, (1, plane as isize), T::one(), &mut dk, (ckk as isize, 1));
        }
        if want_x {
            T::gemm(ckk, f, plane, T::one(), k.data(), (1, ckk as isize), gs, (plane as isize, 1), T::zero(), &mut cols, (plane as isize, 1));
            col2im(&cols, &geom, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
        }
        if want_b {
            for (fi, chunk) in gs.chunks(plane).enumerate() {
                db[fi] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    if want_x {
        sink.add(input, dx);
    }
    if want_k {
        sink.add(kernel, dk);
    }
    if want_b {
        sink.add(bias, db);
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    out_shape: &[usize],
    g: &[T],
    input: Var,
    kernel: Var,
    bias: Var,
    sink: &mut GradSink<'_, T>,
) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, kh, kw] = [k.shape()[1], k.shape()[2], k.shape()[3]];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let geom = ConvGeom { channels: f, height: oh, width: ow, kh, kw, pads: Pads::NONE };
    let (plane_in, fkk) = (h * w, geom.col_rows());
    let (want_x, want_k, want_b) = (sink.wants(input), sink.wants(kernel), sink.wants(bias));
    let mut dk = vec![T::zero(); if want_k { c * fkk } else { 0 }];
    let mut dx = vec![T::zero(); if want_x { x.numel() } else { 0 }];
    let mut db = vec![T::zero(); f];
    let mut gcols = vec![T::zero(); fkk * plane_in];
    for s in 0..n {
        let gs = &g[s * f * oh * ow..(s + 1) * f * oh * ow];
        if want_x || want_k {
            im2col(gs, &geom, &mut gcols);
        }
        if want_x {
            let dxs = &mut dx[s * c * plane_in..(s + 1) * c * plane_in];
            T::gemm(c, fkk, plane_in, T::one(), k.data(), (fkk as isize, 1), &gcols, (plane_in as isize, 1), T::zero(), dxs, (plane_in as isize, 1));
        }
        if want_k {
            let xs = &x.data()[s * c * plane_in..(s + 1) * c * plane_in];
            T::gemm(c, plane_in, fkk, T::one(), xs, (plane_in as isize, 1), &gcols, (1, plane_in as isize), T::one(), &mut dk, (fkk as isize, 1));
        }
        if want_b {
            for (fi, chunk) in gs.chunks(oh * ow).enumerate() {
                db[fi] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    if want_x {
        sink.add(input, dx);
    }
    if want_k {
        sink.add(kernel, dk);
    }
    if want_b {
        sink.add(bias, db);
    }
}
