use proptest::prelude::*;
use ropad_core::model::{Architecture, ModelConfig, RopadModel};
use ropad_core::{Mode, Rng, Tensor};

#[test]
fn every_accepted_height_closes_through_the_network() {
    let mut accepted = Vec::new();
    for h in 1..=162 {
        let cfg = ModelConfig { height: h, width: h, block_channels: [2, 2, 2], embedding_dim: 2, predictor_hidden: 2, decoder_channels: [2, 2, 2, 3], ..Default::default() };
        let Ok(mut model) = RopadModel::<f32>::build_ropad(&cfg, &mut Rng::new(0)) else {
            assert!(cfg.validate().is_err());
            continue;
        };
        accepted.push(h);
        let x = Tensor::uniform(&[1, 3, h, h], 0.0, 1.0, &mut Rng::new(1));
        let r = model.reconstruct(&x, &mut Rng::new(2), Mode::Eval).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert_eq!(model.score(&x).unwrap().shape(), &[1, 1]);
    }
    assert_eq!(accepted, [54]);
}

#[test]
fn architecture_names_round_trip() {
    for arch in [Architecture::Base, Architecture::Ropad] {
        assert_eq!(Architecture::parse(arch.name()), Some(arch));
    }
    assert_eq!(Architecture::parse("vgg"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn widths_do_not_break_shapes(b in prop::array::uniform3(1usize..6), d in prop::array::uniform3(1usize..6), hidden in 1usize..6, n in 1usize..3, seed in any::<u64>()) {
        let emb = b[2];
        let cfg = ModelConfig { block_channels: b, embedding_dim: emb, predictor_hidden: hidden, decoder_channels: [d[0], d[1], d[2], 3], ..Default::default() };
        let mut model = RopadModel::<f64>::build_ropad(&cfg, &mut Rng::new(seed)).unwrap();
        let x = Tensor::uniform(&[n, 3, 54, 54], 0.0, 1.0, &mut Rng::new(seed ^ 7));
        let e = model.encode(&x, Mode::Eval).unwrap();
        prop_assert_eq!(e.e1.shape(), &[n, emb]);
        let r = model.reconstruct(&x, &mut Rng::new(0), Mode::Train).unwrap();
        prop_assert_eq!(r.shape(), x.shape());
        let (a, c) = model.disentangle(&e).unwrap();
        prop_assert_eq!((a.shape(), c.shape()), (&[n, emb][..], &[n, emb][..]));
    }
}
