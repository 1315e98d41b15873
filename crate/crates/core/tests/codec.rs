use iclsysid::codec::{frame_count, quantize_residual, Codebook, Codec, CodecConfig};
use iclsysid::error::Error;
use iclsysid::rng::prng;
use iclsysid::signals::Signal;
use rand::Rng;
use tape::gradcheck::{max_relative_error, numeric_gradient};
use tape::{Graph, ParamStore, Tensor};

#[test]
fn residual_norms_never_increase() {
    let stages: Vec<Codebook> = (0..4).map(|s| Codebook::random(64, 8, 0.5 / (s + 1) as f64, 100 + s as u64)).collect();
    let mut rng = prng(42);
    for _ in 0..10_000 {
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = quantize_residual(&stages, &v).unwrap();
        assert_eq!(q.residual_norms.len(), 5);
        for w in q.residual_norms.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", q.residual_norms);
        }
        let rebuilt: f64 = v.iter().zip(&q.quantized).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((rebuilt - q.residual_norms[4]).abs() < 1e-9);
    }
}

#[test]
fn frame_counts() {
    assert_eq!(frame_count(100, 64), 2);
    assert_eq!(frame_count(2048, 64), 32);
    assert_eq!(frame_count(16384, 64), 256);
    assert_eq!(frame_count(16384, 320), 52);
    assert_eq!(CodecConfig::paper().ratio(), 320);
    assert_eq!(CodecConfig::default().ratio(), 64);
}

fn gradcheck_config() -> CodecConfig {
    CodecConfig { strides: vec![2, 2], latent_dim: 4, n_codebooks: 0, codebook_size: 2, channels: 2, ..Default::default() }
}

fn loss_at(codec: &Codec, store: &ParamStore<f64>, x: &Tensor<f64>) -> f64 {
    let g = Graph::<f64>::new();
    let p = store.bind_frozen(&g);
    let xv = g.input(x.clone());
    let (loss, _) = codec.loss_graph(&g, &p, xv, |_| None);
    g.value(loss).item()
}

#[test]
fn tiny_codec_gradients_match_finite_differences() {
    let codec = Codec::new(gradcheck_config(), 3).unwrap();
    let store: ParamStore<f64> = codec.params().cast();
    let x = Tensor::new(&[2, 1, 16], (0..32).map(|i| (i as f64 * 0.41).sin() * 0.8).collect());

    let g = Graph::<f64>::new();
    let p = store.bind(&g);
    let xv = g.input(x.clone());
    let (loss, _) = codec.loss_graph(&g, &p, xv, |_| None);
    let mut grads = g.backward(loss);
    let analytic = p.collect_grads(&store, &mut grads);

    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let grad = grad.expect("all parameters trainable");
        let value = store.get(id).clone();
        let num = numeric_gradient(&value, 1e-5, |v| {
            let mut probe = store.clone();
            probe.set(id, v.clone());
            loss_at(&codec, &probe, &x)
        });
        let err = max_relative_error(&grad, &num, 1e-7);
        assert!(err < 1e-4, "{}: relative error {err}", store.name(id));
    }
}

fn sinusoids(n: usize, len: usize) -> Vec<Vec<f32>> {
    let mut rng = prng(8);
    (0..n)
        .map(|_| {
            let f: f64 = rng.random_range(0.002..0.03);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.3..1.0);
            (0..len).map(|t| (amp * (std::f64::consts::TAU * f * t as f64 + phase).sin()) as f32).collect()
        })
        .collect()
}

fn sanity_config() -> CodecConfig {
    CodecConfig {
        strides: vec![2, 4],
        latent_dim: 16,
        n_codebooks: 2,
        codebook_size: 64,
        channels: 8,
        batch_size: 16,
        crop: 256,
        epochs: 6,
        steps_per_epoch: 50,
        learning_rate: 2e-3,
        warmup_epochs: 1,
        ..Default::default()
    }
}

#[test]
fn autoencoder_learns_sinusoids() {
    let data = sinusoids(100, 512);
    let mut codec = Codec::new(sanity_config(), 1).unwrap();
    let report = codec.train_on(&data, 5).unwrap();
    assert!(report.reconstruction.last().unwrap() < &(report.reconstruction[0] * 0.5));
    let mut total = 0.0;
    for s in &data[..20] {
        let sig = Signal::new(s.iter().map(|&v| v as f64).collect()).unwrap();
        let r = codec.reconstruct(&sig).unwrap();
        assert_eq!(r.len(), sig.len());
        total += iclsysid::signals::rmse(&sig, &r).unwrap();
    }
    let mean = total / 20.0;
    assert!(mean < 0.1, "mean reconstruction rmse {mean}");
}

#[test]
fn training_is_deterministic() {
    let data = sinusoids(20, 256);
    let config = CodecConfig { epochs: 2, steps_per_epoch: 5, ..sanity_config() };
    let run = || {
        let mut c = Codec::new(config.clone(), 1).unwrap();
        let r = c.train_on(&data, 2).unwrap();
        (c, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.loss, rb.loss);
    assert_eq!(a.codebooks(), b.codebooks());
}

#[test]
fn encoder_rejects_unnormalized_input() {
    let mut codec = Codec::new(gradcheck_config(), 1).unwrap();
    codec.mark_trained();
    let loud = Signal::new(vec![2.0; 32]).unwrap();
    assert!(matches!(codec.encode(&loud), Err(Error::Domain(_))));
    let short = Signal::new(vec![0.1; 2]).unwrap();
    assert!(codec.encode(&short).is_err());
}

#[test]
fn scale_survives_round_trip() {
    let mut codec = Codec::new(gradcheck_config(), 1).unwrap();
    codec.mark_trained();
    let s = Signal::new((0..40).map(|i| (i as f64 * 0.3).sin() * 5.0).collect()).unwrap().normalize();
    let t = codec.encode(&s).unwrap();
    assert_eq!(t.frames, 10);
    assert_eq!(t.original_length, 40);
    let r = codec.decode(&t).unwrap();
    assert_eq!(r.len(), 40);
    assert!((r.scale() - s.scale()).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(CodecConfig { strides: vec![], ..Default::default() }.validate().is_err());
    assert!(CodecConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    assert!(CodecConfig { latent_dim: 0, ..Default::default() }.validate().is_err());
    assert!(CodecConfig::paper().validate().is_ok());
}
