mod common;

use iclsysid::rng::{derive_seed, prng};
use iclsysid::signals::{generate, KindTag, Signal, SignalKind};
use iclsysid::systems::{
    frequency_response, sample_lti, sample_lti_class, sample_nti, simulate, simulate_nti, simulate_sections,
    FilterClass, LtiConfig, NtiConfig, SystemModel, SystemSpec,
};
use proptest::prelude::*;
use rand::Rng;

fn random_input(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = prng(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn cascade_matches_expanded_difference_equation() {
    let cfg = LtiConfig::default();
    for seed in 0..100 {
        let spec = sample_lti(seed, &cfg).unwrap();
        let x = random_input(seed + 1000, 1024);
        let y = simulate_sections(&spec.sections, &x).unwrap();
        let oracle = common::expanded_filter(&spec.sections, &x);
        let err = common::max_abs_diff(&y, &oracle);
        assert!(err < 1e-9, "seed {seed} order {} {:?}: {err}", spec.order, spec.filter_class);
    }
}

#[test]
fn frequency_response_matches_expanded_polynomials() {
    let spec = sample_lti_class(3, FilterClass::Bandstop, &LtiConfig::default()).unwrap();
    let freqs = [0.0, 0.05, 0.2, 0.5];
    for (f, h) in freqs.iter().zip(frequency_response(&spec, &freqs)) {
        // Impulse response DTFT over a long horizon.
        let mut imp = vec![0.0; 8192];
        imp[0] = 1.0;
        let g = simulate_sections(&spec.sections, &imp).unwrap();
        let w = 2.0 * std::f64::consts::PI * f;
        let (re, im) = g.iter().enumerate().fold((0.0, 0.0), |(r, i), (n, v)| {
            (r + v * (w * n as f64).cos(), i - v * (w * n as f64).sin())
        });
        assert!((h.re - re).abs() < 1e-6 && (h.im - im).abs() < 1e-6, "f={f}: {h} vs {re}+{im}i");
    }
}

#[test]
fn class_masks_pass_for_sampled_specs() {
    let cfg = LtiConfig::default();
    for class in FilterClass::ALL {
        let passing = (0..1000u64)
            .filter(|&s| sample_lti_class(derive_seed(s, 9, 0), class, &cfg).map(|l| l.passes_mask()).unwrap_or(false))
            .count();
        assert!(passing >= 990, "{class:?}: {passing}/1000");
    }
}

#[test]
fn zero_input_gives_zero_output() {
    for seed in 0..20 {
        let lti = SystemSpec { system_id: 0, seed, model: SystemModel::Lti(sample_lti(seed, &LtiConfig::default()).unwrap()) };
        let nti = SystemSpec { system_id: 1, seed, model: SystemModel::Nti(sample_nti(seed, &NtiConfig::default()).unwrap()) };
        let zero = Signal::new(vec![0.0; 256]).unwrap();
        for spec in [lti, nti] {
            assert!(simulate(&spec, &zero).unwrap().samples().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn nti_outputs_respect_saturation_and_stay_bounded() {
    let cfg = NtiConfig::default();
    for seed in 0..200u64 {
        let spec = sample_nti(seed, &cfg).unwrap();
        let tag = KindTag::ALL[(seed % 6) as usize];
        let kind = SignalKind::sample(tag, 16_384, &mut prng(seed));
        let x = generate(&kind, 16_384, seed).unwrap();
        let y = simulate_nti(&spec, x.samples()).unwrap();
        assert!(y.iter().all(|v| v.abs() <= spec.saturation), "seed {seed}");
    }
}

#[test]
fn lti_outputs_stay_bounded_for_unit_peak_inputs() {
    let cfg = LtiConfig::default();
    for seed in 0..200u64 {
        let spec = sample_lti(seed, &cfg).unwrap();
        let tag = KindTag::ALL[(seed % 6) as usize];
        let kind = SignalKind::sample(tag, 16_384, &mut prng(seed));
        let x = generate(&kind, 16_384, seed).unwrap();
        let y = simulate_sections(&spec.sections, x.samples()).unwrap();
        assert!(y.iter().all(|v| v.abs() * spec.gain < 1e4), "seed {seed}");
    }
}

#[test]
fn disabled_nonlinearities_reduce_to_state_space() {
    let spec = sample_nti(11, &NtiConfig::default()).unwrap();
    let lin = spec.linear_part();
    let x = random_input(5, 512);
    let y = simulate_nti(&lin, &x).unwrap();
    // Independent state-space loop.
    let n = lin.n;
    let mut s = vec![0.0; n];
    for (t, &u) in x.iter().enumerate() {
        let next: Vec<f64> = (0..n).map(|i| (0..n).map(|j| lin.a[i * n + j] * s[j]).sum::<f64>() + lin.b[i] * u).collect();
        s = next;
        let want: f64 = lin.c.iter().zip(&s).map(|(c, v)| c * v).sum::<f64>() + lin.d * u;
        assert!((y[t] - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lti_superposition(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let spec = sample_lti(seed, &LtiConfig::default()).unwrap();
        let x1 = random_input(seed ^ 1, 256);
        let x2 = random_input(seed ^ 2, 256);
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let y1 = simulate_sections(&spec.sections, &x1).unwrap();
        let y2 = simulate_sections(&spec.sections, &x2).unwrap();
        let y = simulate_sections(&spec.sections, &mix).unwrap();
        for i in 0..y.len() {
            prop_assert!((y[i] - (a * y1[i] + b * y2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn time_invariance(seed in any::<u64>(), k in 0usize..64, lti in any::<bool>()) {
        let spec = if lti {
            SystemSpec { system_id: 0, seed, model: SystemModel::Lti(sample_lti(seed, &LtiConfig::default()).unwrap()) }
        } else {
            SystemSpec { system_id: 0, seed, model: SystemModel::Nti(sample_nti(seed, &NtiConfig::default()).unwrap()) }
        };
        let x = random_input(seed ^ 3, 256);
        let mut delayed = vec![0.0; k];
        delayed.extend_from_slice(&x);
        let y = simulate(&spec, &Signal::new(x).unwrap()).unwrap();
        let yd = simulate(&spec, &Signal::new(delayed).unwrap()).unwrap();
        prop_assert!(yd.samples()[..k].iter().all(|&v| v == 0.0));
        prop_assert_eq!(&yd.samples()[k..], y.samples());
    }
}
