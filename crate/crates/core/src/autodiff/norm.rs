use super::{GradSink, Graph, Mode, Op, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    mean: Vec<T>,
    var: Vec<T>,
    initialized: bool,
}

impl<T: Scalar> BatchNormState<T> {
    /// No statistics yet: eval mode fails until a train step has run.
    pub fn uninitialized(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    /// Running mean 0 and variance 1, usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        Self { initialized: true, ..Self::uninitialized(channels) }
    }

    pub fn from_stats(mean: Vec<T>, var: Vec<T>) -> Result<Self, TensorError> {
        if mean.len() != var.len() {
            return Err(TensorError::shape("batch_norm_state", "mean and var lengths differ"));
        }
        Ok(Self { mean, var, initialized: true })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        if !self.initialized {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var);
            self.initialized = true;
            return;
        }
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let rest = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + rest * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + rest * b;
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization over `[N, C, H, W]` with learned `gamma`/`beta`.
    ///
    /// Train mode normalizes with the biased batch statistics and folds
    /// them into `state` with momentum [`BN_MOMENTUM`]; eval mode uses
    /// `state` as is.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        const OP: &str = "batch_norm2d";
        let shape = self.shape(input).to_vec();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(TensorError::shape(OP, format!("expected [N, C, H, W], got {shape:?}")));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(TensorError::shape(OP, format!("gamma/beta/state must have {c} channels")));
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64_lossy(BN_EPS);
        let x = self.value(input).data();
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(TensorError::invalid(OP, format!("train mode needs N*H*W >= 2, got {count}")));
                }
                batch_stats(x, n, c, plane)
            }
            Mode::Eval => {
                if !state.is_initialized() {
                    return Err(TensorError::UninitializedRunningStats);
                }
                (state.mean.clone(), state.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let op = match mode {
            Mode::Train => {
                state.update(&mean, &var);
                Op::BatchNormTrain { input, gamma, beta, xhat, inv_std }
            }
            Mode::Eval => Op::BatchNormEval { input, gamma, beta, xhat, inv_std },
        };
        self.push_op(OP, value, op)
    }
}

fn batch_stats<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane).expect("count fits");
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * plane;
            acc += x[off..off + plane].iter().copied().sum::<T>();
        }
        let mu = acc / count;
        let mut sq = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * plane;
            sq += x[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    (mean, var)
}

/// Per-channel `(sum dy, sum dy * xhat)`.
fn channel_sums<T: Scalar>(shape: &[usize], xhat: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    (sum_g, sum_gx)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_train_backward<T: Scalar>(
    shape: &[usize],
    gamma_t: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    input: Var,
    gamma: Var,
    beta: Var,
    sink: &mut GradSink<'_, T>,
) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let (sum_g, sum_gx) = channel_sums(shape, xhat, g);
    if sink.wants(input) {
        let m = T::from_usize(n * plane).expect("count fits");
        let gm = gamma_t.data();
        let mut dx = vec![T::zero(); g.len()];
        for s in 0..n {
            for ch in 0..c {
                let k = gm[ch] * inv_std[ch] / m;
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                }
            }
        }
        sink.add(input, dx);
    }
    sink.add(gamma, sum_gx);
    sink.add(beta, sum_g);
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_eval_backward<T: Scalar>(
    shape: &[usize],
    gamma_t: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    input: Var,
    gamma: Var,
    beta: Var,
    sink: &mut GradSink<'_, T>,
) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let (sum_g, sum_gx) = channel_sums(shape, xhat, g);
    if sink.wants(input) {
        let gm = gamma_t.data();
        let mut dx = vec![T::zero(); g.len()];
        for s in 0..n {
            for ch in 0..c {
                let k = gm[ch] * inv_std[ch];
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = k * g[i];
                }
            }
        }
        sink.add(input, dx);
    }
    sink.add(gamma, sum_gx);
    sink.add(beta, sum_g);
}
