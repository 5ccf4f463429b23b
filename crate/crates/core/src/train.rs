//! Supervised training of the base model and alternating adversarial
//! training of the full RoPAD model.
//!
//! A RoPAD run interleaves `disentangler_steps` disentangler updates with
//! `main_steps` main updates: `(D^k M^m)*`. The main batches follow the same
//! shuffled order as a base-model run with the same seed; disentangler
//! batches come from an independent stream.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Graph, LossKind, Mode, Var};
use crate::data::Dataset;
use crate::error::{ConfigError, TensorError, TrainError};
use crate::model::{Architecture, ForwardPass, RopadModel};
use crate::optim::Adam;
use crate::params::ParamId;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Prediction (BCE) weight.
    pub alpha: f64,
    /// Reconstruction (MSE) weight.
    pub beta: f64,
    /// Adversarial weight on the negated disentangler loss.
    pub gamma: f64,
    /// Disentangler updates per schedule window.
    pub disentangler_steps: usize,
    /// Main updates per schedule window.
    pub main_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// The adversarial term may contribute at most `adv_clamp * alpha` per
    /// batch; beyond that it is held constant.
    pub adv_clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            disentangler_steps: 5,
            main_steps: 1,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            precision: Precision::F32,
            adv_clamp: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let nonneg = |field, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { field, requirement: ">= 0", value: v.to_string() })
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("beta", self.beta)?;
        nonneg("gamma", self.gamma)?;
        nonneg("adv_clamp", self.adv_clamp)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::OutOfRange { field: "lr", requirement: "> 0", value: self.lr.to_string() });
        }
        for (field, v) in [("disentangler_steps", self.disentangler_steps), ("main_steps", self.main_steps)] {
            if v == 0 {
                return Err(ConfigError::OutOfRange { field, requirement: ">= 1", value: "0".into() });
            }
        }
        if self.batch_size < 2 {
            return Err(ConfigError::OutOfRange {
                field: "batch_size",
                requirement: ">= 2",
                value: self.batch_size.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Main,
    Disentangler,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Disentangler => "disentangler",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::Main => 'M',
            Phase::Disentangler => 'D',
        }
    }
}

/// Loss values of one step. Components a phase does not compute are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    /// Unweighted BCE.
    pub pred: Option<f64>,
    /// Unweighted reconstruction MSE.
    pub recon: Option<f64>,
    /// Signed contribution of the adversarial term to the total.
    pub adv: Option<f64>,
    /// Unweighted disentangler loss `L_D`.
    pub disent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub losses: LossComponents,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// One letter per step, e.g. `DDDDDMDDDDDM`.
    pub fn phase_string(&self) -> String {
        self.records.iter().map(|r| r.phase.letter()).collect()
    }

    pub fn main_records(&self) -> impl DoubleEndedIterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Main)
    }

    /// CSV with header `step,phase,loss_total,loss_pred,loss_recon,loss_adv,loss_disent,wall_ms`;
    /// components a phase does not compute are left empty.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        w.write_record(["step", "phase", "loss_total", "loss_pred", "loss_recon", "loss_adv", "loss_disent", "wall_ms"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let l = &r.losses;
            w.write_record([
                r.step.to_string(),
                r.phase.as_str().to_string(),
                l.total.to_string(),
                opt(l.pred),
                opt(l.recon),
                opt(l.adv),
                opt(l.disent),
                format!("{:.3}", r.wall_ms),
            ])?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn scalar_value<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

/// `MSE(d1(e1), e2) + MSE(d2(e2), e1)` on the pass's graph.
pub fn disentangler_loss<T: Scalar>(pass: &mut ForwardPass<'_, T>, e1: Var, e2: Var) -> Result<Var, TensorError> {
    let (e2_hat, e1_hat) = pass.disentangle(e1, e2)?;
    let a = pass.graph.loss(e2_hat, e2, LossKind::Mse)?;
    let b = pass.graph.loss(e1_hat, e1, LossKind::Mse)?;
    pass.graph.add(a, b)
}

/// Disentangler objective `L_D` on `batch`.
///
/// The pass must bind every non-disentangler parameter as a constant, which
/// blocks gradient flow into the encoder.
pub fn disentangler_objective<T: Scalar>(
    pass: &mut ForwardPass<'_, T>,
    batch: Tensor<T>,
) -> Result<(Var, LossComponents), TensorError> {
    let x = pass.input(batch)?;
    let (e1, e2) = pass.encode(x)?;
    let e2 = e2.ok_or_else(|| TensorError::invalid("disentangler_objective", "model has no e2 head"))?;
    let loss = disentangler_loss(pass, e1, e2)?;
    let v = scalar_value(&pass.graph, loss);
    Ok((loss, LossComponents { total: v, disent: Some(v), ..Default::default() }))
}

/// Main objective `alpha*BCE + beta*MSE(recon, x) - gamma*L_D`; for the base
/// model only `alpha*BCE`.
///
/// The pass must bind the disentanglers as constants. When `gamma*L_D`
/// exceeds `adv_clamp*alpha` the adversarial term is replaced by the
/// constant `-adv_clamp*alpha` and contributes no gradient.
pub fn main_objective<T: Scalar>(
    pass: &mut ForwardPass<'_, T>,
    batch: Tensor<T>,
    labels: Tensor<T>,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<(Var, LossComponents), TensorError> {
    let x = pass.input(batch)?;
    let (e1, e2) = pass.encode(x)?;
    let score = pass.predict(e1)?;
    let y = pass.graph.constant(labels);
    let bce = pass.graph.loss(score, y, LossKind::Bce)?;
    let mut parts = LossComponents { pred: Some(scalar_value(&pass.graph, bce)), ..Default::default() };
    let mut loss = pass.graph.scale(bce, T::from_f64_lossy(cfg.alpha));
    if let Some(e2) = e2 {
        let recon = pass.reconstruct(e1, e2, rng)?;
        let mse = pass.graph.loss(recon, x, LossKind::Mse)?;
        parts.recon = Some(scalar_value(&pass.graph, mse));
        let weighted = pass.graph.scale(mse, T::from_f64_lossy(cfg.beta));
        loss = pass.graph.add(loss, weighted)?;

        let ld = disentangler_loss(pass, e1, e2)?;
        let ld_value = scalar_value(&pass.graph, ld);
        parts.disent = Some(ld_value);
        let limit = cfg.adv_clamp * cfg.alpha;
        let adv = if cfg.gamma * ld_value > limit {
            pass.graph.constant(Tensor::scalar(T::from_f64_lossy(-limit)))
        } else {
            pass.graph.scale(ld, T::from_f64_lossy(-cfg.gamma))
        };
        parts.adv = Some(scalar_value(&pass.graph, adv));
        loss = pass.graph.add(loss, adv)?;
    }
    parts.total = scalar_value(&pass.graph, loss);
    Ok((loss, parts))
}

/// Endless shuffled minibatches over `0..n`, reshuffled on each pass.
struct BatchStream {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    fn new(n: usize, batch: usize, rng: Rng) -> Self {
        Self { rng, order: (0..n).collect(), pos: n, batch }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += self.batch;
        self.order[self.pos - self.batch..self.pos].to_vec()
    }
}

const ORDER_STREAM: u64 = 1;
const DISENTANGLER_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Called after every optimizer step with the step's record and the
/// updated model.
pub type Observer<'a, T> = dyn FnMut(&StepRecord, &RopadModel<T>) + 'a;

struct Trainer<'a, 'o, T> {
    cfg: &'a TrainConfig,
    data: &'a Dataset<T>,
    log: TrainLog,
    step: usize,
    observe: &'a mut Observer<'o, T>,
}

impl<T: Scalar> Trainer<'_, '_, T> {
    fn check(&self, phase: Phase, parts: &LossComponents) -> Result<(), TrainError> {
        let named = [
            ("total", Some(parts.total)),
            ("pred", parts.pred),
            ("recon", parts.recon),
            ("adv", parts.adv),
            ("disent", parts.disent),
        ];
        if let Some((component, _)) = named.iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteLoss { step: self.step, phase: phase.as_str(), component });
        }
        Ok(())
    }

    fn lift(&self, phase: Phase, e: TensorError) -> TrainError {
        match e {
            TensorError::NonFinite { op } => TrainError::NonFiniteLoss { step: self.step, phase: phase.as_str(), component: op },
            other => TrainError::Tensor(other),
        }
    }

    fn disentangler_step(
        &mut self,
        model: &mut RopadModel<T>,
        adam: &mut Adam<T>,
        ids: &[ParamId],
        indices: &[usize],
    ) -> Result<(), TrainError> {
        let start = Instant::now();
        let phase = Phase::Disentangler;
        let (x, _) = self.data.batch(indices);
        // batch statistics are used but not folded into the running stats
        let mut pass = ForwardPass::new(model, Mode::Train, |g| g.is_disentangler());
        let (loss, parts) = disentangler_objective(&mut pass, x).map_err(|e| self.lift(phase, e))?;
        self.check(phase, &parts)?;
        let (mut graph, _) = pass.into_parts();
        graph.backward(loss)?;
        model.params_mut().accumulate_grads(&graph)?;
        adam.step(model.params_mut(), ids)?;
        self.record(phase, parts, start, model);
        Ok(())
    }

    fn main_step(
        &mut self,
        model: &mut RopadModel<T>,
        adam: &mut Adam<T>,
        ids: &[ParamId],
        indices: &[usize],
        noise: &mut Rng,
    ) -> Result<(), TrainError> {
        let start = Instant::now();
        let phase = Phase::Main;
        let (x, y) = self.data.batch(indices);
        let mut pass = ForwardPass::new(model, Mode::Train, |g| !g.is_disentangler());
        let (loss, parts) = main_objective(&mut pass, x, y, noise, self.cfg).map_err(|e| self.lift(phase, e))?;
        self.check(phase, &parts)?;
        let (mut graph, bn) = pass.into_parts();
        graph.backward(loss)?;
        model.commit_bn(bn);
        model.params_mut().accumulate_grads(&graph)?;
        adam.step(model.params_mut(), ids)?;
        self.record(phase, parts, start, model);
        Ok(())
    }

    fn record(&mut self, phase: Phase, losses: LossComponents, start: Instant, model: &RopadModel<T>) {
        let rec = StepRecord { step: self.step, phase, losses, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        (self.observe)(&rec, model);
        self.log.records.push(rec);
        self.step += 1;
    }
}

fn run<T: Scalar>(
    model: &mut RopadModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    adversarial: bool,
    observe: &mut Observer<'_, T>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let n = data.len();
    if cfg.epochs > 0 && n < 2 {
        return Err(ConfigError::OutOfRange { field: "dataset", requirement: ">= 2 samples", value: n.to_string() }.into());
    }
    let batch = cfg.batch_size.min(n);
    let per_epoch = if batch == 0 { 0 } else { n / batch };

    let mut order_rng = Rng::derive(cfg.seed, ORDER_STREAM);
    let mut d_stream = BatchStream::new(n, batch, Rng::derive(cfg.seed, DISENTANGLER_STREAM));
    let mut noise = Rng::derive(cfg.seed, NOISE_STREAM);
    let main_ids = model.params().ids_where(|g| !g.is_disentangler());
    let d_ids = model.params().ids_where(|g| g.is_disentangler());
    let mut main_adam = Adam::new(cfg.lr);
    let mut d_adam = Adam::new(cfg.lr);
    let mut t = Trainer { cfg, data, log: TrainLog::default(), step: 0, observe };

    let mut main_done = 0;
    for _ in 0..cfg.epochs {
        let order = order_rng.permutation(n);
        for b in 0..per_epoch {
            if adversarial && main_done % cfg.main_steps == 0 {
                for _ in 0..cfg.disentangler_steps {
                    let idx = d_stream.next();
                    t.disentangler_step(model, &mut d_adam, &d_ids, &idx)?;
                }
            }
            t.main_step(model, &mut main_adam, &main_ids, &order[b * batch..(b + 1) * batch], &mut noise)?;
            main_done += 1;
        }
    }
    Ok(t.log)
}

/// Alternating adversarial training of a full RoPAD model.
pub fn train_ropad<T: Scalar>(
    model: &mut RopadModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    train_ropad_observed(model, data, cfg, &mut |_, _| {})
}

pub fn train_ropad_observed<T: Scalar>(
    model: &mut RopadModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    observe: &mut Observer<'_, T>,
) -> Result<TrainLog, TrainError> {
    if model.arch() != Architecture::Ropad {
        return Err(TensorError::invalid("train_ropad", "model has no UAI components").into());
    }
    run(model, data, cfg, true, observe)
}

/// Plain BCE training of the base model.
pub fn train_base<T: Scalar>(
    model: &mut RopadModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    train_base_observed(model, data, cfg, &mut |_, _| {})
}

pub fn train_base_observed<T: Scalar>(
    model: &mut RopadModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    observe: &mut Observer<'_, T>,
) -> Result<TrainLog, TrainError> {
    if model.arch() != Architecture::Base {
        return Err(TensorError::invalid("train_base", "expected the base architecture").into());
    }
    run(model, data, cfg, false, observe)
}

/// Eval-mode scores of every sample, computed in chunks of `batch`.
pub fn score_dataset<T: Scalar>(model: &RopadModel<T>, data: &Dataset<T>, batch: usize) -> Result<Vec<f64>, TensorError> {
    let mut scores = Vec::with_capacity(data.len());
    let batch = batch.max(1);
    let mut start = 0;
    while start < data.len() {
        let len = batch.min(data.len() - start);
        let s = model.score(&data.chunk(start, len))?;
        scores.extend(s.data().iter().map(|v| v.to_f64_lossy()));
        start += len;
    }
    Ok(scores)
}

/// Eval-mode `e1` and (for the full model) `e2` of every sample, as
/// `[N, D]` matrices.
pub fn embed_dataset<T: Scalar>(
    model: &mut RopadModel<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<(Tensor<f64>, Option<Tensor<f64>>), TensorError> {
    let batch = batch.max(1);
    let (mut e1, mut e2) = (Vec::new(), Vec::new());
    let mut start = 0;
    while start < data.len() {
        let len = batch.min(data.len() - start);
        let emb = model.encode(&data.chunk(start, len), Mode::Eval)?;
        e1.extend(emb.e1.to_f64_vec());
        if let Some(t) = emb.e2 {
            e2.extend(t.to_f64_vec());
        }
        start += len;
    }
    let d = model.config().embedding_dim;
    let n = data.len();
    let e2 = if model.has_decoder() { Some(Tensor::new(&[n, d], e2)?) } else { None };
    Ok((Tensor::new(&[n, d], e1)?, e2))
}

/// Fraction of samples whose score falls on the correct side of 0.5.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let correct = scores.iter().zip(labels).filter(|&(&s, &l)| (s >= 0.5) == (l == 1)).count();
    correct as f64 / scores.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ConfigError::OutOfRange { field: "batch_size", .. })));
        let bad = TrainConfig { gamma: -0.1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ConfigError::OutOfRange { field: "gamma", .. })));
        let bad = TrainConfig { disentangler_steps: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ConfigError::OutOfRange { field: "disentangler_steps", .. })));
    }

    #[test]
    fn batch_stream_covers_every_index_per_pass() {
        let mut s = BatchStream::new(10, 3, Rng::new(0));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn csv_leaves_missing_components_empty() {
        let log = TrainLog {
            records: vec![StepRecord {
                step: 0,
                phase: Phase::Disentangler,
                losses: LossComponents { total: 0.5, disent: Some(0.5), ..Default::default() },
                wall_ms: 1.0,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,phase,loss_total,loss_pred,loss_recon,loss_adv,loss_disent,wall_ms\n0,disentangler,0.5,,,,0.5,1.000\n"
        );
    }

    #[test]
    fn accuracy_uses_half_threshold() {
        assert_eq!(accuracy(&[0.9, 0.5, 0.1, 0.4], &[1, 1, 0, 1]), 0.75);
    }
}
