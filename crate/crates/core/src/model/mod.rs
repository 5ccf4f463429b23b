//! The base CNN and the full RoPAD training architecture.
//!
//! Encoder: three blocks of three (3x3 same conv, ELU, batch-norm) layers,
//! each block followed by 3x3/stride-3 max-pooling, then a 2x2 valid
//! "prediction" conv with tanh reshaped to the e1 embedding. RoPAD adds an
//! independently initialized copy of that conv producing e2, a decoder that
//! rebuilds the image from `concat(noise(e1), e2)`, and two single dense
//! disentanglers predicting each embedding from the other.
//!
//! Only e1 feeds the predictor, so dropping the e2 head, the decoder and the
//! disentanglers ([`RopadModel::prune_for_inference`]) leaves the scores
//! untouched.

pub mod checkpoint;
mod config;

pub use config::{ModelConfig, POOL, TRUNK_OUT, UPSAMPLE};

use std::collections::HashMap;

use crate::autodiff::{Activation, BatchNormState, Graph, Mode, Padding, Var};
use crate::error::{ConfigError, TensorError};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Encoder (e1 head only) + predictor.
    Base,
    /// Base plus e2 head, decoder and disentanglers.
    Ropad,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Base => "bm",
            Architecture::Ropad => "ropad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bm" => Some(Architecture::Base),
            "ropad" => Some(Architecture::Ropad),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvBn {
    conv: Layer,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Decoder {
    dense: Layer,
    deconvs: [Layer; 4],
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    blocks: Vec<Vec<ConvBn>>,
    head_e1: Layer,
    predictor: [Layer; 2],
    head_e2: Option<Layer>,
    decoder: Option<Decoder>,
    disentanglers: Option<[Layer; 2]>,
}

/// The two encoder outputs. `e2` is absent for the base model.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEmbedding<T> {
    pub e1: Tensor<T>,
    pub e2: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopadModel<T> {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore<T>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    layout: Layout,
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

struct Builder<'r, T> {
    params: ParamStore<T>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    rng: &'r mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, group: ParamGroup, out_c: usize, in_c: usize, k: usize) -> Layer {
        let w = glorot(&[out_c, in_c, k, k], in_c * k * k, out_c * k * k, self.rng);
        Layer {
            weight: self.params.add(format!("{name}.weight"), group, w),
            bias: self.params.add(format!("{name}.bias"), group, Tensor::zeros(&[out_c])),
        }
    }

    /// Kernel laid out `[in, out, k, k]`.
    fn deconv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> Layer {
        let w = glorot(&[in_c, out_c, k, k], in_c * k * k, out_c * k * k, self.rng);
        Layer {
            weight: self.params.add(format!("{name}.weight"), ParamGroup::Decoder, w),
            bias: self.params.add(format!("{name}.bias"), ParamGroup::Decoder, Tensor::zeros(&[out_c])),
        }
    }

    fn dense(&mut self, name: &str, group: ParamGroup, d_in: usize, d_out: usize) -> Layer {
        let w = glorot(&[d_in, d_out], d_in, d_out, self.rng);
        Layer {
            weight: self.params.add(format!("{name}.weight"), group, w),
            bias: self.params.add(format!("{name}.bias"), group, Tensor::zeros(&[d_out])),
        }
    }

    fn conv_bn(&mut self, name: &str, bn_name: &str, out_c: usize, in_c: usize) -> ConvBn {
        let conv = self.conv(name, ParamGroup::Encoder, out_c, in_c, 3);
        let gamma = self.params.add(format!("{bn_name}.gamma"), ParamGroup::Encoder, Tensor::full(&[out_c], T::one()));
        let beta = self.params.add(format!("{bn_name}.beta"), ParamGroup::Encoder, Tensor::zeros(&[out_c]));
        self.bn.push(BatchNormState::standard(out_c));
        self.bn_names.push(bn_name.to_string());
        ConvBn { conv, gamma, beta, bn: self.bn.len() - 1 }
    }
}

impl<T: Scalar> RopadModel<T> {
    /// Encoder with the e1 head only, plus predictor.
    pub fn build_base(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ConfigError> {
        Self::build(config, Architecture::Base, rng)
    }

    /// The full training architecture.
    pub fn build_ropad(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ConfigError> {
        Self::build(config, Architecture::Ropad, rng)
    }

    /// Prediction-path parameters are drawn first, so a base model and a
    /// RoPAD model built from equal seeds share their encoder and predictor
    /// initialization.
    pub fn build(config: &ModelConfig, arch: Architecture, rng: &mut Rng) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut b = Builder { params: ParamStore::new(), bn: Vec::new(), bn_names: Vec::new(), rng };
        let mut in_c = config.channels;
        let mut blocks = Vec::new();
        for (bi, &width) in config.block_channels.iter().enumerate() {
            let layers = (0..3)
                .map(|li| {
                    let conv_name = format!("encoder.block{}.conv{}", bi + 1, li + 1);
                    let bn_name = format!("encoder.block{}.bn{}", bi + 1, li + 1);
                    let layer = b.conv_bn(&conv_name, &bn_name, width, if li == 0 { in_c } else { width });
                    layer
                })
                .collect();
            blocks.push(layers);
            in_c = width;
        }
        let emb = config.embedding_dim;
        let head_e1 = b.conv("encoder.head_e1", ParamGroup::Encoder, emb, in_c, TRUNK_OUT);
        let predictor = [
            b.dense("predictor.hidden", ParamGroup::Predictor, emb, config.predictor_hidden),
            b.dense("predictor.out", ParamGroup::Predictor, config.predictor_hidden, 1),
        ];
        let (head_e2, decoder, disentanglers) = match arch {
            Architecture::Base => (None, None, None),
            Architecture::Ropad => {
                let head_e2 = b.conv("encoder.head_e2", ParamGroup::E2Head, emb, in_c, TRUNK_OUT);
                let dc = config.decoder_channels;
                let dense = b.dense("decoder.dense", ParamGroup::Decoder, 2 * emb, TRUNK_OUT * TRUNK_OUT * dc[0]);
                let deconvs = [
                    b.deconv("decoder.deconv1", dc[0], dc[0], 3),
                    b.deconv("decoder.deconv2", dc[0], dc[1], 3),
                    b.deconv("decoder.deconv3", dc[1], dc[2], 3),
                    b.deconv("decoder.deconv4", dc[2], dc[3], 3),
                ];
                let dis = [
                    b.dense("disentangler.d1", ParamGroup::Disentangler1, emb, emb),
                    b.dense("disentangler.d2", ParamGroup::Disentangler2, emb, emb),
                ];
                (Some(head_e2), Some(Decoder { dense, deconvs }), Some(dis))
            }
        };
        Ok(Self {
            config: config.clone(),
            arch,
            params: b.params,
            bn: b.bn,
            bn_names: b.bn_names,
            layout: Layout { blocks, head_e1, predictor, head_e2, decoder, disentanglers },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    /// `(name, state)` of every batch-norm layer, in forward order.
    pub fn bn_named(&self) -> impl Iterator<Item = (&str, &BatchNormState<T>)> {
        self.bn_names.iter().map(String::as_str).zip(&self.bn)
    }

    /// Replaces running statistics, e.g. with those produced by a train-mode
    /// [`ForwardPass`].
    pub fn commit_bn(&mut self, states: Vec<BatchNormState<T>>) {
        assert_eq!(states.len(), self.bn.len(), "batch-norm state count");
        self.bn = states;
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.decoder.is_some()
    }

    /// Runs the encoder; train mode folds batch statistics into the running
    /// statistics.
    pub fn encode(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<SplitEmbedding<T>, TensorError> {
        let mut pass = ForwardPass::new(self, mode, |_| false);
        let x = pass.input(batch.clone())?;
        let (e1, e2) = pass.encode(x)?;
        let emb = SplitEmbedding { e1: pass.graph.value(e1).clone(), e2: e2.map(|v| pass.graph.value(v).clone()) };
        let (_, bn) = pass.into_parts();
        if mode == Mode::Train {
            self.commit_bn(bn);
        }
        Ok(emb)
    }

    /// Bona fide probability per sample, shaped `[N, 1]`.
    pub fn predict_score(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let mut pass = ForwardPass::new(self, mode, |_| false);
        let x = pass.input(batch.clone())?;
        let e1 = pass.encode_e1(x)?;
        let s = pass.predict(e1)?;
        let out = pass.graph.value(s).clone();
        let (_, bn) = pass.into_parts();
        if mode == Mode::Train {
            self.commit_bn(bn);
        }
        Ok(out)
    }

    /// Eval-mode scores without mutating the model.
    pub fn score(&self, batch: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut pass = ForwardPass::new(self, Mode::Eval, |_| false);
        let x = pass.input(batch.clone())?;
        let e1 = pass.encode_e1(x)?;
        let s = pass.predict(e1)?;
        Ok(pass.graph.value(s).clone())
    }

    /// Decoder output from `concat(noise(e1), e2)`; no noise in eval mode.
    pub fn reconstruct(&mut self, batch: &Tensor<T>, rng: &mut Rng, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let mut pass = ForwardPass::new(self, mode, |_| false);
        let x = pass.input(batch.clone())?;
        let (e1, e2) = pass.encode(x)?;
        let e2 = e2.ok_or_else(|| TensorError::invalid("reconstruct", "base model has no e2 head"))?;
        let r = pass.reconstruct(e1, e2, rng)?;
        let out = pass.graph.value(r).clone();
        let (_, bn) = pass.into_parts();
        if mode == Mode::Train {
            self.commit_bn(bn);
        }
        Ok(out)
    }

    /// `(d1(e1), d2(e2))`: the estimate of e2 from e1 and of e1 from e2.
    pub fn disentangle(&self, emb: &SplitEmbedding<T>) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let e2 = emb.e2.as_ref().ok_or_else(|| TensorError::invalid("disentangle", "embedding has no e2"))?;
        let mut pass = ForwardPass::new(self, Mode::Eval, |_| false);
        let e1v = pass.graph.constant(emb.e1.clone());
        let e2v = pass.graph.constant(e2.clone());
        let (a, b) = pass.disentangle(e1v, e2v)?;
        Ok((pass.graph.value(a).clone(), pass.graph.value(b).clone()))
    }

    /// The inference model: encoder e1 path and predictor only, with values
    /// copied from `self`. Structurally identical to the base model.
    pub fn prune_for_inference(&self) -> Self {
        let mut params = ParamStore::new();
        let mut remap = HashMap::new();
        for (id, p) in self.params.iter() {
            if p.group.on_prediction_path() {
                remap.insert(id, params.add(p.name.clone(), p.group, p.tensor.clone()));
            }
        }
        let r = |id: ParamId| remap[&id];
        let rl = |l: Layer| Layer { weight: r(l.weight), bias: r(l.bias) };
        let blocks = self
            .layout
            .blocks
            .iter()
            .map(|block| {
                block
                    .iter()
                    .map(|cb| ConvBn { conv: rl(cb.conv), gamma: r(cb.gamma), beta: r(cb.beta), bn: cb.bn })
                    .collect()
            })
            .collect();
        let layout = Layout {
            blocks,
            head_e1: rl(self.layout.head_e1),
            predictor: [rl(self.layout.predictor[0]), rl(self.layout.predictor[1])],
            head_e2: None,
            decoder: None,
            disentanglers: None,
        };
        Self {
            config: self.config.clone(),
            arch: Architecture::Base,
            params,
            bn: self.bn.clone(),
            bn_names: self.bn_names.clone(),
            layout,
        }
    }
}

/// One forward computation over a model, recorded on its own [`Graph`].
///
/// Parameters are bound lazily; those whose group `trainable` rejects
/// enter as constants. Batch-norm statistics are updated on a private copy
/// which [`ForwardPass::into_parts`] hands back to the caller.
pub struct ForwardPass<'m, T> {
    pub graph: Graph<T>,
    model: &'m RopadModel<T>,
    bound: HashMap<ParamId, Var>,
    trainable: Box<dyn Fn(ParamGroup) -> bool + 'm>,
    bn: Vec<BatchNormState<T>>,
    mode: Mode,
}

impl<'m, T: Scalar> ForwardPass<'m, T> {
    pub fn new(model: &'m RopadModel<T>, mode: Mode, trainable: impl Fn(ParamGroup) -> bool + 'm) -> Self {
        Self {
            graph: Graph::new(),
            model,
            bound: HashMap::new(),
            trainable: Box::new(trainable),
            bn: model.bn.clone(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Adds an image batch after checking it matches the configured input.
    pub fn input(&mut self, batch: Tensor<T>) -> Result<Var, TensorError> {
        let [c, h, w] = self.model.config.input_shape();
        match batch.shape() {
            &[n, bc, bh, bw] if n > 0 && (bc, bh, bw) == (c, h, w) => Ok(self.graph.constant(batch)),
            other => Err(TensorError::shape("input", format!("expected [N, {c}, {h}, {w}], got {other:?}"))),
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let param = self.model.params.get(id);
        let v = self.graph.param(id, &param.tensor, (self.trainable)(param.group));
        self.bound.insert(id, v);
        v
    }

    fn conv(&mut self, x: Var, layer: Layer, padding: Padding) -> Result<Var, TensorError> {
        let (w, b) = (self.p(layer.weight), self.p(layer.bias));
        self.graph.conv2d(x, w, b, padding)
    }

    fn dense(&mut self, x: Var, layer: Layer) -> Result<Var, TensorError> {
        let (w, b) = (self.p(layer.weight), self.p(layer.bias));
        self.graph.dense(x, w, b)
    }

    /// Output of the last conv block after pooling: `[N, c3, 2, 2]`.
    pub fn trunk(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for block in &self.model.layout.blocks {
            for cb in block {
                h = self.conv(h, cb.conv, Padding::Same)?;
                h = self.graph.activation(h, Activation::Elu)?;
                let (gm, bt) = (self.p(cb.gamma), self.p(cb.beta));
                h = self.graph.batch_norm2d(h, gm, bt, &mut self.bn[cb.bn], self.mode)?;
            }
            h = self.graph.maxpool2d(h, POOL, POOL)?;
        }
        Ok(h)
    }

    fn head(&mut self, trunk: Var, layer: Layer) -> Result<Var, TensorError> {
        let c = self.conv(trunk, layer, Padding::Valid)?;
        let t = self.graph.activation(c, Activation::Tanh)?;
        let n = self.graph.shape(t)[0];
        self.graph.reshape(t, &[n, self.model.config.embedding_dim])
    }

    /// `(e1, e2)`; `e2` is `None` for the base model.
    pub fn encode(&mut self, x: Var) -> Result<(Var, Option<Var>), TensorError> {
        let trunk = self.trunk(x)?;
        let e1 = self.head(trunk, self.model.layout.head_e1)?;
        let e2 = match self.model.layout.head_e2 {
            Some(layer) => Some(self.head(trunk, layer)?),
            None => None,
        };
        Ok((e1, e2))
    }

    /// e1 alone; the e2 head is never evaluated.
    pub fn encode_e1(&mut self, x: Var) -> Result<Var, TensorError> {
        let trunk = self.trunk(x)?;
        self.head(trunk, self.model.layout.head_e1)
    }

    /// Predictor on e1: `[N, 1]` bona fide probabilities.
    pub fn predict(&mut self, e1: Var) -> Result<Var, TensorError> {
        let [hidden, out] = self.model.layout.predictor;
        let h = self.dense(e1, hidden)?;
        let h = self.graph.activation(h, Activation::Elu)?;
        let o = self.dense(h, out)?;
        self.graph.activation(o, Activation::Sigmoid)
    }

    /// Decoder on `concat(noise(e1), e2)`, returning `[N, 3, H, W]` in (0, 1).
    pub fn reconstruct(&mut self, e1: Var, e2: Var, rng: &mut Rng) -> Result<Var, TensorError> {
        let decoder = self
            .model
            .layout
            .decoder
            .clone()
            .ok_or_else(|| TensorError::invalid("reconstruct", "model has no decoder"))?;
        let noisy = self.graph.multiplicative_bernoulli_noise(e1, self.model.config.noise_drop_prob, rng, self.mode)?;
        let z = self.graph.concat_features(noisy, e2)?;
        let d0 = self.model.config.decoder_channels[0];
        let h = self.dense(z, decoder.dense)?;
        let h = self.graph.activation(h, Activation::Elu)?;
        let n = self.graph.shape(h)[0];
        let mut h = self.graph.reshape(h, &[n, d0, TRUNK_OUT, TRUNK_OUT])?;
        for (i, layer) in decoder.deconvs.iter().enumerate() {
            let (w, b) = (self.p(layer.weight), self.p(layer.bias));
            h = self.graph.conv_transpose2d(h, w, b)?;
            // 3x3 deconv grows each side by one; crop back to the input size
            h = self.graph.crop2d(h, 1, 1, 1, 1)?;
            if i < 3 {
                h = self.graph.activation(h, Activation::Elu)?;
                h = self.graph.upsample_nearest(h, UPSAMPLE)?;
            } else {
                h = self.graph.activation(h, Activation::Sigmoid)?;
            }
        }
        Ok(h)
    }

    /// `(d1(e1), d2(e2))`.
    pub fn disentangle(&mut self, e1: Var, e2: Var) -> Result<(Var, Var), TensorError> {
        let [d1, d2] = self
            .model
            .layout
            .disentanglers
            .ok_or_else(|| TensorError::invalid("disentangle", "model has no disentanglers"))?;
        Ok((self.dense(e1, d1)?, self.dense(e2, d2)?))
    }

    pub fn into_parts(self) -> (Graph<T>, Vec<BatchNormState<T>>) {
        (self.graph, self.bn)
    }
}
