use proptest::prelude::*;
use ropad_core::data::{CorrelationMode, Dataset, DatasetPlan, FactorSpec, Split};
use ropad_core::error::TrainError;
use ropad_core::model::checkpoint::{from_bytes, to_bytes};
use ropad_core::model::{ForwardPass, ModelConfig, RopadModel};
use ropad_core::optim::Adam;
use ropad_core::train::*;
use ropad_core::{config::RunConfig, Mode, ParamGroup, Rng, Scalar, Tensor};

fn small() -> ModelConfig {
    ModelConfig { block_channels: [4, 3, 2], embedding_dim: 8, predictor_hidden: 4, decoder_channels: [4, 3, 2, 3], ..Default::default() }
}

fn data<T: Scalar>(n_train: usize, seed: u64) -> Dataset<T> {
    let plan = DatasetPlan { n_train, n_dev: 4, n_test: 4, mode: CorrelationMode::Uncorrelated };
    Dataset::synthesize(&FactorSpec::default(), &plan, seed, Split::Train).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, lr: 3e-3, ..Default::default() }
}

fn ropad<T: Scalar>(seed: u64) -> RopadModel<T> {
    RopadModel::build_ropad(&small(), &mut Rng::new(seed)).unwrap()
}

fn base<T: Scalar>(seed: u64) -> RopadModel<T> {
    RopadModel::build_base(&small(), &mut Rng::new(seed)).unwrap()
}

fn losses(log: &TrainLog) -> Vec<(Phase, LossComponents)> {
    log.records.iter().map(|r| (r.phase, r.losses)).collect()
}

#[test]
fn phase_string_follows_schedule() {
    let d = data::<f32>(48, 0);
    for (k, m) in [(5, 1), (1, 1), (3, 2), (2, 4)] {
        let mut model = ropad::<f32>(1);
        let c = TrainConfig { disentangler_steps: k, main_steps: m, ..cfg(2) };
        let log = train_ropad(&mut model, &d, &c).unwrap();
        let window = format!("{}{}", "D".repeat(k), "M".repeat(m));
        let mains: usize = 2 * 48 / 8;
        let expected: String = window.repeat(mains.div_ceil(m)).chars().collect();
        // a run ends right after its last main step
        let cut = expected.char_indices().filter(|&(_, c)| c == 'M').nth(mains - 1).unwrap().0 + 1;
        assert_eq!(log.phase_string(), expected[..cut], "k={k} m={m}");
        assert!(log.records.windows(2).all(|w| w[1].step == w[0].step + 1));
    }
}

#[test]
fn phases_update_disjoint_parameters() {
    let d = data::<f32>(48, 1);
    let mut model = ropad::<f32>(2);
    let main_hash = |m: &RopadModel<f32>| m.params().hash_groups(|g| !g.is_disentangler());
    let d_hash = |m: &RopadModel<f32>| m.params().hash_groups(ParamGroup::is_disentangler);
    let mut prev = (main_hash(&model), d_hash(&model));
    let mut violations = Vec::new();
    let mut observe = |rec: &StepRecord, m: &RopadModel<f32>| {
        let now = (main_hash(m), d_hash(m));
        match rec.phase {
            Phase::Disentangler if now.0 != prev.0 || now.1 == prev.1 => violations.push(rec.step),
            Phase::Main if now.1 != prev.1 || now.0 == prev.0 => violations.push(rec.step),
            _ => {}
        }
        prev = now;
    };
    let log = train_ropad_observed(&mut model, &d, &cfg(1), &mut observe).unwrap();
    assert_eq!(log.records.len(), 36);
    assert!(violations.is_empty(), "steps {violations:?}");
}

#[test]
fn training_is_deterministic() {
    let d = data::<f32>(32, 2);
    let run = || {
        let mut model = ropad::<f32>(3);
        let log = train_ropad(&mut model, &d, &cfg(1)).unwrap();
        (losses(&log), model.params().hash_groups(|_| true), model.bn_states().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn degenerate_weights_reproduce_base_training() {
    let d = data::<f64>(32, 3);
    let c = TrainConfig { beta: 0.0, gamma: 0.0, ..cfg(2) };

    let mut full_scores = Vec::new();
    let probe = d.chunk(0, 4);
    let mut full = ropad::<f64>(4);
    let log_full = train_ropad_observed(&mut full, &d, &c, &mut |rec, m| {
        if rec.phase == Phase::Main {
            full_scores.push(m.score(&probe).unwrap());
        }
    })
    .unwrap();

    let mut base_scores = Vec::new();
    let mut bm = base::<f64>(4);
    let log_base = train_base_observed(&mut bm, &d, &c, &mut |_, m| base_scores.push(m.score(&probe).unwrap())).unwrap();

    assert_eq!(full_scores, base_scores);
    let pred = |log: &TrainLog| log.main_records().map(|r| r.losses.pred).collect::<Vec<_>>();
    assert_eq!(pred(&log_full), pred(&log_base));
    assert_eq!(full.prune_for_inference(), bm);
    assert!(log_full.main_records().all(|r| r.losses.total == r.losses.pred.unwrap()));
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let d = data::<f32>(16, 4);
    let mut m = ropad::<f32>(5);
    let before = m.clone();
    assert!(train_ropad(&mut m, &d, &cfg(0)).unwrap().records.is_empty());
    assert_eq!(m, before);
    let mut b = base::<f32>(5);
    let before = b.clone();
    assert!(train_base(&mut b, &d, &cfg(0)).unwrap().records.is_empty());
    assert_eq!(b, before);
}

#[test]
fn architecture_mismatch_is_rejected() {
    let d = data::<f32>(16, 4);
    assert!(train_ropad(&mut base::<f32>(0), &d, &cfg(1)).is_err());
    assert!(train_base(&mut ropad::<f32>(0), &d, &cfg(1)).is_err());
    let bad = TrainConfig { batch_size: 1, ..cfg(1) };
    assert!(matches!(train_base(&mut base::<f32>(0), &d, &bad), Err(TrainError::Config(_))));
}

fn grads_by_group<T: Scalar>(model: &mut RopadModel<T>, graph: &ropad_core::Graph<T>) -> Vec<(ParamGroup, bool)> {
    model.params_mut().accumulate_grads(graph).unwrap();
    model
        .params()
        .iter()
        .map(|(_, p)| (p.group, p.tensor.grad().is_some_and(|g| g.iter().any(|v| *v != T::zero()))))
        .collect()
}

#[test]
fn disentangler_objective_reaches_only_disentanglers() {
    let d = data::<f64>(8, 5);
    let mut model = ropad::<f64>(6);
    let (x, _) = d.batch(&[0, 1, 2, 3]);
    let mut pass = ForwardPass::new(&model, Mode::Train, ParamGroup::is_disentangler);
    let (loss, parts) = disentangler_objective(&mut pass, x).unwrap();
    assert!(parts.disent.unwrap() >= 0.0);
    let (mut graph, _) = pass.into_parts();
    graph.backward(loss).unwrap();
    for (group, nonzero) in grads_by_group(&mut model, &graph) {
        assert_eq!(nonzero, group.is_disentangler(), "{group:?}");
    }
}

#[test]
fn main_objective_leaves_disentanglers_alone() {
    let d = data::<f64>(8, 5);
    let mut model = ropad::<f64>(6);
    let (x, y) = d.batch(&[0, 1, 2, 3]);
    let c = TrainConfig { gamma: 1.0, beta: 1.0, ..cfg(1) };
    let mut pass = ForwardPass::new(&model, Mode::Train, |g| !g.is_disentangler());
    let (loss, _) = main_objective(&mut pass, x, y, &mut Rng::new(0), &c).unwrap();
    let (mut graph, _) = pass.into_parts();
    graph.backward(loss).unwrap();
    let grads = grads_by_group(&mut model, &graph);
    assert!(grads.iter().all(|&(g, nz)| !(g.is_disentangler() && nz)));
    for group in [ParamGroup::Encoder, ParamGroup::E2Head, ParamGroup::Predictor, ParamGroup::Decoder] {
        assert!(grads.iter().any(|&(g, nz)| g == group && nz), "{group:?}");
    }
}

fn measure_ld(model: &RopadModel<f64>, x: &Tensor<f64>) -> f64 {
    let mut pass = ForwardPass::new(model, Mode::Train, |_| false);
    disentangler_objective(&mut pass, x.clone()).unwrap().1.total
}

#[test]
fn adversarial_main_step_raises_disentangler_loss() {
    let d = data::<f64>(16, 6);
    // alpha stays 1: the clamp limit scales with it
    let c = TrainConfig { beta: 0.0, gamma: 1.0, lr: 1e-2, ..cfg(1) };
    let mut deltas = Vec::new();
    for seed in 0..20 {
        let mut model = ropad::<f64>(100 + seed);
        let (x, y) = d.batch(&(0..8).collect::<Vec<_>>());
        let before = measure_ld(&model, &x);
        let ids = model.params().ids_where(|g| !g.is_disentangler());
        let mut pass = ForwardPass::new(&model, Mode::Train, |g| !g.is_disentangler());
        let (loss, _) = main_objective(&mut pass, x.clone(), y, &mut Rng::new(seed), &c).unwrap();
        let (mut graph, bn) = pass.into_parts();
        graph.backward(loss).unwrap();
        model.commit_bn(bn);
        model.params_mut().accumulate_grads(&graph).unwrap();
        Adam::new(c.lr).step(model.params_mut(), &ids).unwrap();
        deltas.push(measure_ld(&model, &x) - before);
    }
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[10] > 0.0, "{deltas:?}");
}

#[test]
fn identity_disentanglers_on_equal_embeddings_give_zero_loss() {
    let mut model = ropad::<f64>(7);
    let copy = |m: &mut RopadModel<f64>, from: &str, to: &str| {
        let src = m.params().tensor(m.params().find(from).unwrap()).clone();
        let id = m.params().find(to).unwrap();
        *m.params_mut().tensor_mut(id) = src;
    };
    copy(&mut model, "encoder.head_e1.weight", "encoder.head_e2.weight");
    copy(&mut model, "encoder.head_e1.bias", "encoder.head_e2.bias");
    let dim = small().embedding_dim;
    for name in ["disentangler.d1", "disentangler.d2"] {
        let w = model.params().find(&format!("{name}.weight")).unwrap();
        let eye = (0..dim * dim).map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 }).collect();
        *model.params_mut().tensor_mut(w) = Tensor::new(&[dim, dim], eye).unwrap();
        let b = model.params().find(&format!("{name}.bias")).unwrap();
        model.params_mut().tensor_mut(b).data_mut().fill(0.0);
    }
    let (x, _) = data::<f64>(8, 7).batch(&[0, 1, 2]);
    assert_eq!(measure_ld(&model, &x), 0.0);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let d = data::<f32>(16, 8);
    let c = TrainConfig { lr: 1e30, ..cfg(3) };
    match train_base(&mut base::<f32>(0), &d, &c) {
        Err(TrainError::NonFiniteLoss { step, phase, .. }) => {
            assert!(step > 0);
            assert_eq!(phase, "main");
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
    let mut nan = d.clone();
    nan.images.data_mut()[5] = f32::NAN;
    assert!(matches!(train_ropad(&mut ropad::<f32>(0), &nan, &cfg(1)), Err(TrainError::NonFiniteLoss { step: 0, .. })));
}

#[test]
fn checkpoint_reload_scores_bit_exactly() {
    let d = data::<f32>(100, 9);
    let mut model = ropad::<f32>(8);
    train_ropad(&mut model, &data::<f32>(16, 9), &cfg(1)).unwrap();
    let (back, _) = from_bytes::<f32>(&to_bytes(&model, &RunConfig::default())).unwrap();
    assert_eq!(score_dataset(&back, &d, 25).unwrap(), score_dataset(&model, &d, 25).unwrap());
}

#[test]
fn train_log_csv_columns() {
    let mut model = ropad::<f32>(1);
    let log = train_ropad(&mut model, &data::<f32>(16, 1), &cfg(1)).unwrap();
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,phase,loss_total,loss_pred,loss_recon,loss_adv,loss_disent,wall_ms"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&first[..2], ["0", "disentangler"]);
    assert!(first[3].is_empty() && !first[6].is_empty());
    assert_eq!(text.lines().count(), 1 + log.records.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn disentangler_loss_is_nonnegative(seed in any::<u64>()) {
        let model = ropad::<f64>(seed);
        let x = Tensor::uniform(&[2, 3, 54, 54], 0.0, 1.0, &mut Rng::new(seed ^ 1));
        prop_assert!(measure_ld(&model, &x) >= 0.0);
    }
}
