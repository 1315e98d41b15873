use iclsysid::behavior::{
    contrastive_loss, contrastive_loss_graph, cosine_similarity, encode_records, reconstruction_loss, BehaviorConfig, BehaviorModel,
    EncodedPair, LayerSelector,
};
use iclsysid::codec::{Codec, CodecConfig, TokenSequence};
use iclsysid::corpus::{build_records, Corpus, CorpusConfig, Split};
use iclsysid::error::Error;
use iclsysid::signals::{generate, Signal, SignalKind};
use proptest::prelude::*;
use tape::gradcheck::{max_relative_error, numeric_gradient};
use tape::{Graph, Tensor};

fn tiny_config() -> BehaviorConfig {
    BehaviorConfig {
        model_dim: 16,
        heads: 2,
        layers_embed: 2,
        layers_predict: 2,
        ff_mult: 2,
        max_offset: 8,
        batch_systems: 4,
        epochs: 2,
        steps_per_epoch: 3,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

fn tiny_codec() -> Codec {
    let config = CodecConfig {
        strides: vec![2, 2],
        latent_dim: 4,
        n_codebooks: 2,
        codebook_size: 8,
        channels: 4,
        ..Default::default()
    };
    let mut codec = Codec::new(config, 5).unwrap();
    codec.mark_trained();
    codec
}

fn tokens(frames: usize, dim: usize, seed: u64) -> TokenSequence {
    let latents = (0..frames * dim).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32 / 500.0) - 1.0).collect();
    TokenSequence { frames, dim, n_codebooks: 0, indices: Vec::new(), latents, original_length: frames * 4, scale: 1.0 }
}

fn trained_tiny_model() -> BehaviorModel {
    let mut m = BehaviorModel::new(tiny_config(), 4, 11).unwrap();
    m.mark_trained();
    m
}

fn small_corpus() -> Corpus {
    let cfg = CorpusConfig { n_systems: 20, length: 128, ..Default::default() };
    let (bytes, manifest) = build_records(&cfg, 3).unwrap();
    Corpus::from_parts("memory".into(), manifest, bytes).unwrap()
}

#[test]
fn cosine_similarity_basic_values() {
    let u = [0.3, -1.2, 2.0];
    assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    let v = [1.0, 0.5, -0.25];
    let scaled: Vec<f64> = u.iter().map(|x| 3.7 * x).collect();
    assert!((cosine_similarity(&scaled, &v).unwrap() - cosine_similarity(&u, &v).unwrap()).abs() < 1e-15);
    assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
    assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
}

#[test]
fn contrastive_closed_forms() {
    let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let l1 = contrastive_loss(&a, &a, 1.0).unwrap();
    assert!((l1 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l1 - 0.3133).abs() < 1e-4);
    let l2 = contrastive_loss(&a, &a, 0.5).unwrap();
    assert!((l2 - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l2 - 0.1269).abs() < 1e-4);
    let same = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    assert!((contrastive_loss(&same, &same, 0.3).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn contrastive_errors() {
    let one = vec![vec![1.0, 0.0]];
    assert!(matches!(contrastive_loss(&one, &one, 1.0), Err(Error::Parameter { .. })));
    let a = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
    let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(matches!(contrastive_loss(&a, &p, 1.0), Err(Error::Domain(_))));
    assert!(contrastive_loss(&p, &p, 0.0).is_err());
}

#[test]
fn contrastive_vanishes_for_perfect_separation() {
    let a = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    let l = contrastive_loss(&a, &a, 0.05).unwrap();
    assert!(l >= 0.0 && l < 1e-15_f64.max((-2.0f64 / 0.05).exp() * 1.01));
}

fn contrastive_value(a: &Tensor<f64>, p: &Tensor<f64>, tau: f64) -> f64 {
    let g = Graph::<f64>::new();
    let (av, pv) = (g.input(a.clone()), g.input(p.clone()));
    let l = contrastive_loss_graph(&g, av, pv, tau);
    g.value(l).item()
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let a = Tensor::new(&[3, 5], (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect());
    let p = Tensor::new(&[3, 5], (0..15).map(|i| ((i * 5 % 13) as f64 - 6.0) / 5.0).collect());
    let tau = 0.3;
    let g = Graph::<f64>::new();
    let (av, pv) = (g.input(a.clone()), g.input(p.clone()));
    let l = contrastive_loss_graph(&g, av, pv, tau);
    let grads = g.backward(l);
    let na = numeric_gradient(&a, 1e-6, |x| contrastive_value(x, &p, tau));
    let np = numeric_gradient(&p, 1e-6, |x| contrastive_value(&a, x, tau));
    assert!(max_relative_error(grads.get(av).unwrap(), &na, 1e-8) < 1e-4);
    assert!(max_relative_error(grads.get(pv).unwrap(), &np, 1e-8) < 1e-4);
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let truth = Tensor::new(&[3, 1, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect());
    let pred = Tensor::new(&[3, 1, 5], (0..15).map(|i| (i as f64 * 0.11).cos()).collect());
    let value = |x: &Tensor<f64>| {
        let ys: Vec<Signal> = truth.data().chunks(5).map(|c| Signal::new(c.to_vec()).unwrap()).collect();
        let ps: Vec<Signal> = x.data().chunks(5).map(|c| Signal::new(c.to_vec()).unwrap()).collect();
        reconstruction_loss(&ys, &ps).unwrap()
    };
    let g = Graph::<f64>::new();
    let pv = g.input(pred.clone());
    let tv = g.constant(truth.clone());
    let l = g.mse(pv, tv);
    assert!((g.value(l).item() - value(&pred)).abs() < 1e-14);
    let grads = g.backward(l);
    let num = numeric_gradient(&pred, 1e-6, value);
    assert!(max_relative_error(grads.get(pv).unwrap(), &num, 1e-8) < 1e-4);
}

#[test]
fn reconstruction_loss_examples() {
    let a = Signal::new(vec![0.5, -0.25, 1.0]).unwrap();
    assert_eq!(reconstruction_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
    let b = Signal::new(a.samples().iter().map(|v| v + 1.0).collect()).unwrap();
    assert!((reconstruction_loss(&[a.clone()], &[b.clone()]).unwrap() - 1.0).abs() < 1e-15);
    let c = Signal::new(a.samples().iter().map(|v| v + 2.0).collect()).unwrap();
    let r = reconstruction_loss(&[a.clone()], &[c]).unwrap() / reconstruction_loss(&[a.clone()], &[b]).unwrap();
    assert!((r - 4.0).abs() < 1e-12);
    let short = Signal::new(vec![0.0; 2]).unwrap();
    assert!(matches!(reconstruction_loss(&[a], &[short]), Err(Error::Dimension(_))));
}

#[test]
fn config_validation() {
    assert!(BehaviorConfig { heads: 3, ..tiny_config() }.validate().is_err());
    assert!(BehaviorConfig { temperature: 0.0, ..tiny_config() }.validate().is_err());
    assert!(BehaviorConfig { lambda: -1.0, ..tiny_config() }.validate().is_err());
    assert!(BehaviorConfig::default().validate().is_ok());
}

#[test]
fn embedding_shape_and_position_sensitivity() {
    let m = trained_tiny_model();
    for f in [1, 5, 33] {
        let z = m.embed_system(&tokens(f, 4, 1), &tokens(f, 4, 2)).unwrap();
        assert_eq!(z.z.len(), 16);
    }
    let (x, y) = (tokens(6, 4, 1), tokens(6, 4, 2));
    let mut xr = x.clone();
    let mut yr = y.clone();
    xr.latents = x.latents.chunks(4).rev().flatten().copied().collect();
    yr.latents = y.latents.chunks(4).rev().flatten().copied().collect();
    // Give the relative bias some weight so positions matter.
    let mut m = m;
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        if m.params().name(id).ends_with("rel_bias") {
            let shape = m.params().get(id).shape().to_vec();
            let n = m.params().get(id).len();
            m.params_mut().set(id, Tensor::new(&shape, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()));
        }
    }
    let a = m.embed_system(&x, &y).unwrap();
    let b = m.embed_system(&xr, &yr).unwrap();
    assert_ne!(a.z, b.z);
    assert!(matches!(m.embed_system(&x, &tokens(5, 4, 2)), Err(Error::Dimension(_))));
}

#[test]
fn embedding_and_prediction_are_batch_equivariant_and_deterministic() {
    let m = trained_tiny_model();
    let seqs: Vec<(TokenSequence, TokenSequence)> = (0..3).map(|k| (tokens(7, 4, k), tokens(7, 4, k + 10))).collect();
    let pairs: Vec<_> = seqs.iter().map(|(a, b)| (a, b)).collect();
    let z = m.embed_batch(&pairs).unwrap();
    let rev: Vec<_> = pairs.iter().rev().copied().collect();
    let zr = m.embed_batch(&rev).unwrap();
    for k in 0..3 {
        for (a, b) in z[k].z.iter().zip(&zr[2 - k].z) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    assert_eq!(z, m.embed_batch(&pairs).unwrap());
    let queries: Vec<_> = z.iter().zip(&seqs).map(|(z, s)| (z, &s.0)).collect();
    let p = m.predict_latents(&queries).unwrap();
    let qr: Vec<_> = queries.iter().rev().copied().collect();
    let pr = m.predict_latents(&qr).unwrap();
    for k in 0..3 {
        for (a, b) in p[k].latents.iter().zip(&pr[2 - k].latents) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn untrained_model_is_a_state_error() {
    let m = BehaviorModel::new(tiny_config(), 4, 1).unwrap();
    let (x, y) = (tokens(4, 4, 1), tokens(4, 4, 2));
    assert!(matches!(m.embed_system(&x, &y), Err(Error::State(_))));
}

#[test]
fn prediction_length_matches_query() {
    let codec = tiny_codec();
    let m = trained_tiny_model();
    for t in [2048, 16384] {
        let x = generate(&SignalKind::default_chirp(), t, 0).unwrap();
        let y = generate(&SignalKind::Step { amplitude: 1.0, onset: 10 }, t, 0).unwrap();
        let q = generate(&SignalKind::Ramp { amplitude: -1.0, onset: 3, rise: 100 }, t, 0).unwrap();
        let out = m.one_shot(&codec, &x, &y, &q).unwrap();
        assert_eq!(out.len(), t);
        assert_eq!(out, m.one_shot(&codec, &x, &y, &q).unwrap());
    }
    let odd = generate(&SignalKind::default_chirp(), 1001, 0).unwrap();
    assert_eq!(m.one_shot(&codec, &odd, &odd, &odd).unwrap().len(), 1001);
}

fn encoded_examples(codec: &Codec, corpus: &Corpus) -> Vec<(EncodedPair, EncodedPair)> {
    let ids = corpus.system_ids(Split::Train);
    ids.iter()
        .take(3)
        .map(|&id| {
            let recs = corpus.system_records(id).unwrap();
            let mut e = encode_records(&recs[..2], codec).unwrap();
            let q = e.pop().unwrap();
            (e.pop().unwrap(), q)
        })
        .collect()
}

#[test]
fn finetune_changes_only_the_selected_layer() {
    let codec = tiny_codec();
    let corpus = small_corpus();
    let examples = encoded_examples(&codec, &corpus);
    let m = trained_tiny_model();
    for (selector, prefix) in [
        (LayerSelector::LastPredict, "predict.layer1."),
        (LayerSelector::Embed(0), "embed.layer0."),
        (LayerSelector::Head, "head."),
    ] {
        let tuned = m.finetune_single_layer(&codec, &examples, selector, 3, 1e-2).unwrap();
        let mut changed = 0;
        for (a, b) in m.params().entries().iter().zip(tuned.params().entries()) {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if a.name.starts_with(prefix) {
                changed += usize::from(!same);
            } else {
                assert!(same, "{} changed under {selector:?}", a.name);
            }
        }
        assert!(changed > 0, "{selector:?} left its own layer untouched");
    }
    let noop = m.finetune_single_layer(&codec, &examples, LayerSelector::LastPredict, 0, 1e-2).unwrap();
    for (a, b) in m.params().entries().iter().zip(noop.params().entries()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(matches!(
        m.finetune_single_layer(&codec, &[], LayerSelector::LastPredict, 1, 1e-2),
        Err(Error::Parameter { .. })
    ));
    assert!(m.finetune_single_layer(&codec, &examples, LayerSelector::Predict(7), 1, 1e-2).is_err());
}

#[test]
fn zero_lambda_ignores_contrastive_term() {
    let codec = tiny_codec();
    let corpus = small_corpus();
    let encoded = iclsysid::behavior::encode_split(&corpus, &codec, Split::Train).unwrap();
    let run = |temperature| {
        let cfg = BehaviorConfig { lambda: 0.0, temperature, ..tiny_config() };
        let mut m = BehaviorModel::new(cfg, 4, 2).unwrap();
        let report = m.train_on(&encoded, &[], &codec, 9).unwrap();
        (m, report)
    };
    let (a, ra) = run(0.1);
    let (b, rb) = run(2.0);
    assert_eq!(ra.loss, rb.loss);
    assert!(ra.contrastive.iter().all(|&c| c == 0.0));
    for (x, y) in a.params().entries().iter().zip(b.params().entries()) {
        assert_eq!(x.value.data(), y.value.data());
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let codec = tiny_codec();
    let corpus = small_corpus();
    let encoded = iclsysid::behavior::encode_split(&corpus, &codec, Split::Train).unwrap();
    let train = || {
        let mut m = BehaviorModel::new(tiny_config(), 4, 2).unwrap();
        let r = m.train_on(&encoded, &[], &codec, 4).unwrap();
        (m, r)
    };
    let (m, r1) = train();
    let (_, r2) = train();
    assert_eq!(r1.loss, r2.loss);
    assert!(r1.loss.iter().all(|l| l.is_finite()));
    assert_eq!(r1.validation_rmse.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    m.save(&path).unwrap();
    let loaded = BehaviorModel::load(&path).unwrap();
    assert!(loaded.is_trained());
    assert_eq!(loaded.config(), m.config());
    for (a, b) in m.params().entries().iter().zip(loaded.params().entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(BehaviorModel::load(&path), Err(Error::Corrupt { .. })));
    std::fs::write(&path, b"ICLCDC01 not a behavior checkpoint at all, padded to pass the length check").unwrap();
    assert!(matches!(BehaviorModel::load(&path), Err(Error::Corrupt { .. })));
}

#[test]
fn two_stage_requires_enough_systems() {
    let codec = tiny_codec();
    let corpus = small_corpus();
    let encoded = iclsysid::behavior::encode_split(&corpus, &codec, Split::Train).unwrap();
    let mut m = BehaviorModel::new(BehaviorConfig { batch_systems: 500, ..tiny_config() }, 4, 2).unwrap();
    assert!(matches!(m.train_on(&encoded, &[], &codec, 0), Err(Error::Parameter { .. })));
}

#[test]
fn joint_training_runs_and_trains_its_own_codec() {
    let corpus = small_corpus();
    let codec_cfg = CodecConfig {
        strides: vec![2, 2],
        latent_dim: 4,
        n_codebooks: 2,
        codebook_size: 8,
        channels: 4,
        ..Default::default()
    };
    let (m, codec, report) = BehaviorModel::train_joint(tiny_config(), codec_cfg, &corpus, 1).unwrap();
    assert!(m.is_trained() && codec.is_trained());
    assert_eq!(report.steps, 6);
    assert!(report.loss.iter().all(|l| l.is_finite()));
    let recs = corpus.system_records(corpus.system_ids(Split::Test)[0]).unwrap();
    let y = m.one_shot(&codec, &recs[0].x, &recs[0].y, &recs[1].x).unwrap();
    assert_eq!(y.len(), recs[1].y.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_is_nonnegative_and_scale_invariant(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 6),
        scales in prop::collection::vec(0.1f64..10.0, 6),
        tau in 0.05f64..2.0,
    ) {
        let norm = |r: &Vec<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(rows.iter().all(|r| norm(r) > 1e-3));
        let (a, p) = rows.split_at(3);
        let l = contrastive_loss(a, p, tau).unwrap();
        prop_assert!(l >= 0.0);
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let (sa, sp) = scaled.split_at(3);
        let ls = contrastive_loss(sa, sp, tau).unwrap();
        prop_assert!((l - ls).abs() < 1e-9 * l.max(1.0));
    }
}
