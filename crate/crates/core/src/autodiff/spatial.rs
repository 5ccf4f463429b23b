use super::{GradSink, Graph, Op, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4], TensorError> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::shape(op, format!("expected [N, C, H, W], got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// Max pooling over `window x window` cells moved by `stride`.
    ///
    /// Backward sends each output gradient to the arg-max cell of its window;
    /// on ties the first cell in row-major order wins.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2d";
        let [n, c, h, w] = nchw(OP, self.shape(input))?;
        if window == 0 || stride == 0 {
            return Err(TensorError::invalid(OP, "window and stride must be positive"));
        }
        if h < window || w < window {
            return Err(TensorError::shape(OP, format!("input {h}x{w} smaller than window {window}")));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push_op(OP, value, Op::MaxPool { input, argmax })
    }

    /// Nearest-neighbour upsampling: every pixel becomes a `factor x factor` block.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        const OP: &str = "upsample_nearest";
        let [n, c, h, w] = nchw(OP, self.shape(input))?;
        if factor == 0 {
            return Err(TensorError::invalid(OP, "factor must be at least 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *v = srow[ox / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push_op(OP, value, Op::Upsample { input, factor })
    }

    /// Removes `top`/`bottom` rows and `left`/`right` columns from every map.
    pub fn crop2d(&mut self, input: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var, TensorError> {
        const OP: &str = "crop2d";
        let [n, c, h, w] = nchw(OP, self.shape(input))?;
        if top + bottom >= h || left + right >= w {
            return Err(TensorError::shape(OP, format!("cannot crop {top}+{bottom} x {left}+{right} from {h}x{w}")));
        }
        let (oh, ow) = (h - top - bottom, w - left - right);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                let start = plane * h * w + (y + top) * w + left;
                out.extend_from_slice(&x[start..start + ow]);
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push_op(OP, value, Op::Crop { input, top, left })
    }
}

pub(super) fn maxpool_backward<T: Scalar>(x: &Tensor<T>, argmax: &[usize], g: &[T], input: Var, sink: &mut GradSink<'_, T>) {
    let mut dx = vec![T::zero(); x.numel()];
    for (&idx, &gv) in argmax.iter().zip(g) {
        dx[idx] += gv;
    }
    sink.add(input, dx);
}

pub(super) fn upsample_backward<T: Scalar>(x: &Tensor<T>, factor: usize, g: &[T], input: Var, sink: &mut GradSink<'_, T>) {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); x.numel()];
    for plane in 0..s[0] * s[1] {
        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    sink.add(input, dx);
}

pub(super) fn crop_backward<T: Scalar>(
    x: &Tensor<T>,
    out_shape: &[usize],
    top: usize,
    left: usize,
    g: &[T],
    input: Var,
    sink: &mut GradSink<'_, T>,
) {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut dx = vec![T::zero(); x.numel()];
    for plane in 0..s[0] * s[1] {
        for y in 0..oh {
            let start = plane * h * w + (y + top) * w + left;
            dx[start..start + ow].copy_from_slice(&g[(plane * oh + y) * ow..(plane * oh + y + 1) * ow]);
        }
    }
    sink.add(input, dx);
}
