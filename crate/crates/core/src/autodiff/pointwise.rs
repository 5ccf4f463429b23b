use super::{GradSink, Graph, Mode, Op, Var};
use crate::error::TensorError;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x` for `x >= 0`, `exp(x) - 1` otherwise (alpha = 1).
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Elu => {
                if x >= T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative expressed through the output `y`.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Elu => {
                if y >= T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var, TensorError> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.push_op("activation", value, Op::Activation { input, kind })
    }

    /// `input @ weight + bias` with `input: [N, D]`, `weight: [D, M]`, `bias: [M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "dense";
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[n, d], &[wd, m]) = (xs, ws) else {
            return Err(TensorError::shape(OP, format!("input {xs:?} and weight {ws:?} must be rank 2")));
        };
        if wd != d || bs != [m] {
            return Err(TensorError::shape(OP, format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(n, d, m, T::one(), self.value(input).data(), (d as isize, 1), self.value(weight).data(), (m as isize, 1), T::one(), &mut out, (m as isize, 1));
        let value = Tensor::new(&[n, m], out)?;
        self.push_op(OP, value, Op::Dense { input, weight, bias })
    }

    /// Feature-axis concatenation of `[N, Da]` and `[N, Db]`.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_features";
        let (&[n, da], &[nb, db]) = (self.shape(a), self.shape(b)) else {
            return Err(TensorError::shape(OP, "operands must be rank 2"));
        };
        if n != nb {
            return Err(TensorError::shape(OP, format!("leading dims {n} and {nb} differ")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&av[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        let value = Tensor::new(&[n, da + db], out)?;
        self.push_op(OP, value, Op::Concat { a, b })
    }

    /// Multiplies every element by an independent Bernoulli(1 - p) draw in
    /// train mode, without rescaling. Eval mode, and `p == 0`, return
    /// `input` itself and draw nothing from `rng`.
    pub fn multiplicative_bernoulli_noise(&mut self, input: Var, drop_prob: f64, rng: &mut Rng, mode: Mode) -> Result<Var, TensorError> {
        const OP: &str = "multiplicative_bernoulli_noise";
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(TensorError::invalid(OP, format!("drop probability must be in [0, 1), got {drop_prob}")));
        }
        if mode == Mode::Eval || drop_prob == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel()).map(|_| if rng.bernoulli(drop_prob) { T::zero() } else { T::one() }).collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.push_op(OP, value, Op::Mask { input, mask })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push_op("reshape", value, Op::Reshape { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push_op("add", value, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push_op("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        let needs = x.requires_grad();
        self.push_node(value.with_requires_grad(needs), Op::Scale { input, factor }, None)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let total: T = x.data().iter().copied().sum();
        let needs = x.requires_grad();
        self.push_node(Tensor::scalar(total).with_requires_grad(needs), Op::Sum { input }, None)
    }
}

pub(super) fn activation_backward<T: Scalar>(kind: Activation, out: &Tensor<T>, g: &[T], input: Var, sink: &mut GradSink<'_, T>) {
    let dx = out.data().iter().zip(g).map(|(&y, &gv)| gv * kind.derivative_from_output(y)).collect();
    sink.add(input, dx);
}

pub(super) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    input: Var,
    weight: Var,
    bias: Var,
    sink: &mut GradSink<'_, T>,
) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    if sink.wants(input) {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(n, m, d, T::one(), g, (m as isize, 1), w.data(), (1, m as isize), T::zero(), &mut dx, (d as isize, 1));
        sink.add(input, dx);
    }
    if sink.wants(weight) {
        let mut dw = vec![T::zero(); d * m];
        T::gemm(d, n, m, T::one(), x.data(), (1, d as isize), g, (m as isize, 1), T::zero(), &mut dw, (m as isize, 1));
        sink.add(weight, dw);
    }
    if sink.wants(bias) {
        let mut db = vec![T::zero(); m];
        for row in g.chunks(m) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        sink.add(bias, db);
    }
}

pub(super) fn concat_backward<T: Scalar>(a_t: &Tensor<T>, b_t: &Tensor<T>, g: &[T], a: Var, b: Var, sink: &mut GradSink<'_, T>) {
    let (n, da, db) = (a_t.shape()[0], a_t.shape()[1], b_t.shape()[1]);
    let width = da + db;
    if sink.wants(a) {
        let ga = (0..n).flat_map(|i| g[i * width..i * width + da].iter().copied()).collect();
        sink.add(a, ga);
    }
    if sink.wants(b) {
        let gb = (0..n).flat_map(|i| g[i * width + da..(i + 1) * width].iter().copied()).collect();
        sink.add(b, gb);
    }
}
