use super::{GradSink, Graph, Op, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean binary cross-entropy; `pred` is a probability.
    Bce,
    /// Mean squared error.
    Mse,
}

fn clamp_bounds<T: Scalar>() -> (T, T) {
    let lo = T::from_f64_lossy(BCE_CLAMP);
    (lo, T::one() - lo)
}

impl<T: Scalar> Graph<T> {
    /// Scalar loss between equally shaped `pred` and `target`.
    ///
    /// BCE differentiates only through `pred`; MSE through both sides.
    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var, TensorError> {
        const OP: &str = "loss";
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(TensorError::shape(OP, format!("pred {:?} vs target {:?}", p.shape(), t.shape())));
        }
        let count = T::from_usize(p.numel().max(1)).expect("count fits");
        let total: T = match kind {
            LossKind::Bce => {
                let (lo, hi) = clamp_bounds::<T>();
                p.data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| {
                        let pc = pv.max(lo).min(hi);
                        -(tv * pc.ln() + (T::one() - tv) * (T::one() - pc).ln())
                    })
                    .sum()
            }
            LossKind::Mse => p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum(),
        };
        let value = Tensor::scalar(total / count);
        self.push_op(OP, value, Op::Loss { pred, target, kind })
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let x = self.value(logits);
        let &[n, k] = x.shape() else {
            return Err(TensorError::shape(OP, format!("logits must be [N, K], got {:?}", x.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::shape(OP, format!("{} labels for {n} rows of {k} classes", labels.len())));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &x.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (v - max).exp() / z;
            }
            total += z.ln() + max - row[label];
        }
        let value = Tensor::scalar(total / T::from_usize(n.max(1)).expect("count fits"));
        self.push_op(OP, value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs })
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn loss_backward<T: Scalar>(
    kind: LossKind,
    p: &Tensor<T>,
    t: &Tensor<T>,
    g: T,
    pred: Var,
    target: Var,
    sink: &mut GradSink<'_, T>,
) {
    let count = T::from_usize(p.numel().max(1)).expect("count fits");
    let scale = g / count;
    match kind {
        LossKind::Bce => {
            let (lo, hi) = clamp_bounds::<T>();
            let dp = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&pv, &tv)| {
                    if pv < lo || pv > hi {
                        T::zero()
                    } else {
                        scale * (pv - tv) / (pv * (T::one() - pv))
                    }
                })
                .collect();
            sink.add(pred, dp);
        }
        LossKind::Mse => {
            let two = T::from_f64_lossy(2.0);
            let diff: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| two * scale * (a - b)).collect();
            if sink.wants(target) {
                sink.add(target, diff.iter().map(|&d| -d).collect());
            }
            sink.add(pred, diff);
        }
    }
}

pub(super) fn softmax_xent_backward<T: Scalar>(
    shape: &[usize],
    labels: &[usize],
    probs: &[T],
    g: T,
    logits: Var,
    sink: &mut GradSink<'_, T>,
) {
    let (n, k) = (shape[0], shape[1]);
    let scale = g / T::from_usize(n.max(1)).expect("count fits");
    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        dx[i * k + label] -= scale;
    }
    sink.add(logits, dx);
}
