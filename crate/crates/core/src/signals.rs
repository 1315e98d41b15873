//! Excitation and response signals.
//!
//! All signals use a sample rate of 1, so every frequency below is in
//! cycles per sample and must stay under the Nyquist limit of 0.5.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{prng, Prng};

/// Real-valued sequence plus the factor removed by peak normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    samples: Vec<f64>,
    scale: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        Self::with_scale(samples, 1.0)
    }

    pub fn with_scale(samples: Vec<f64>, scale: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("samples", "signal must be non-empty"));
        }
        if let Some(index) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow { index });
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::param("scale", format!("must be positive and finite, got {scale}")));
        }
        Ok(Self { samples, scale })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Divides by the peak magnitude and folds it into `scale`.
    /// The all-zero signal is returned unchanged.
    pub fn normalize(&self) -> Signal {
        let peak = self.peak();
        if peak == 0.0 {
            return self.clone();
        }
        Signal { samples: self.samples.iter().map(|x| x / peak).collect(), scale: self.scale * peak }
    }

    /// Samples multiplied back by `scale`.
    pub fn denormalized(&self) -> Vec<f64> {
        self.samples.iter().map(|x| x * self.scale).collect()
    }

    /// Little-endian: u64 count, f32 samples, f64 scale.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.samples.len() * 4);
        for &x in &self.samples {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(&self.scale.to_le_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Signal> {
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let n = u64::from_le_bytes(u) as usize;
        if n == 0 || n > (1 << 32) {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("implausible signal length {n}")));
        }
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let samples = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        r.read_exact(&mut u)?;
        let scale = f64::from_le_bytes(u);
        Signal::with_scale(samples, scale).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }
}

/// Root-mean-square difference of two equal-length signals.
pub fn rmse(a: &Signal, b: &Signal) -> Result<f64> {
    rmse_slices(a.samples(), b.samples())
}

pub fn rmse_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("rmse of lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sse / a.len() as f64).sqrt())
}

/// The six excitation families, without parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindTag {
    Step,
    Ramp,
    Chirp,
    Multisine,
    SquarePrbs,
    FilteredNoise,
}

impl KindTag {
    pub const ALL: [KindTag; 6] =
        [KindTag::Step, KindTag::Ramp, KindTag::Chirp, KindTag::Multisine, KindTag::SquarePrbs, KindTag::FilteredNoise];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<KindTag> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            KindTag::Step => "step",
            KindTag::Ramp => "ramp",
            KindTag::Chirp => "chirp",
            KindTag::Multisine => "multisine",
            KindTag::SquarePrbs => "square_prbs",
            KindTag::FilteredNoise => "filtered_noise",
        }
    }
}

/// An excitation family together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    /// `amplitude` from `onset` on, zero before.
    Step { amplitude: f64, onset: usize },
    /// Linear rise from 0 to `amplitude` over `rise` samples starting at `onset`, then hold.
    Ramp { amplitude: f64, onset: usize, rise: usize },
    /// Linear-frequency sweep from `f0` to `f1` across the whole signal, zero initial phase.
    Chirp { amplitude: f64, f0: f64, f1: f64 },
    /// Sum of `harmonics` sinusoids at multiples of `base_freq` with seeded phases.
    Multisine { base_freq: f64, harmonics: usize },
    /// Random +-1 levels held for `bit_period` samples.
    SquarePrbs { bit_period: usize },
    /// Gaussian noise through four cascaded one-pole lowpass stages at `bandwidth`.
    FilteredNoise { bandwidth: f64 },
}

impl SignalKind {
    pub fn tag(&self) -> KindTag {
        match self {
            SignalKind::Step { .. } => KindTag::Step,
            SignalKind::Ramp { .. } => KindTag::Ramp,
            SignalKind::Chirp { .. } => KindTag::Chirp,
            SignalKind::Multisine { .. } => KindTag::Multisine,
            SignalKind::SquarePrbs { .. } => KindTag::SquarePrbs,
            SignalKind::FilteredNoise { .. } => KindTag::FilteredNoise,
        }
    }

    /// Default sweep used for control prompts.
    pub fn default_chirp() -> SignalKind {
        SignalKind::Chirp { amplitude: 1.0, f0: 0.0005, f1: 0.05 }
    }

    pub fn validate(&self, length: usize) -> Result<()> {
        fn nonzero(field: &'static str, v: f64) -> Result<()> {
            if v.is_finite() && v != 0.0 {
                Ok(())
            } else {
                Err(Error::param(field, format!("must be finite and nonzero, got {v}")))
            }
        }
        match *self {
            SignalKind::Step { amplitude, onset } => {
                nonzero("amplitude", amplitude)?;
                if onset >= length {
                    return Err(Error::param("onset", format!("{onset} not within [0, {length})")));
                }
            }
            SignalKind::Ramp { amplitude, onset, rise } => {
                nonzero("amplitude", amplitude)?;
                if onset >= length {
                    return Err(Error::param("onset", format!("{onset} not within [0, {length})")));
                }
                if rise == 0 {
                    return Err(Error::param("rise", "must be at least one sample"));
                }
            }
            SignalKind::Chirp { amplitude, f0, f1 } => {
                nonzero("amplitude", amplitude)?;
                if !(f0 > 0.0 && f0 < 0.5) {
                    return Err(Error::param("f0", format!("{f0} not within (0, 0.5)")));
                }
                if !(f1 >= f0 && f1 < 0.5) {
                    return Err(Error::param("f1", format!("{f1} not within [f0, 0.5)")));
                }
            }
            SignalKind::Multisine { base_freq, harmonics } => {
                if harmonics == 0 {
                    return Err(Error::param("harmonics", "need at least one harmonic"));
                }
                if !(base_freq > 0.0 && base_freq * (harmonics as f64) < 0.5) {
                    return Err(Error::param("base_freq", format!("{base_freq} x {harmonics} harmonics exceeds Nyquist")));
                }
            }
            SignalKind::SquarePrbs { bit_period } => {
                if bit_period == 0 {
                    return Err(Error::param("bit_period", "must be at least one sample"));
                }
            }
            SignalKind::FilteredNoise { bandwidth } => {
                if !(bandwidth > 0.0 && bandwidth < 0.5) {
                    return Err(Error::param("bandwidth", format!("{bandwidth} not within (0, 0.5)")));
                }
            }
        }
        Ok(())
    }

    /// Draws parameters for `tag` from the corpus ranges.
    pub fn sample(tag: KindTag, length: usize, rng: &mut Prng) -> SignalKind {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let log_uniform = |rng: &mut Prng, lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
        let n = length.max(16);
        match tag {
            KindTag::Step => SignalKind::Step { amplitude: sign, onset: rng.random_range(n / 16..n / 2) },
            KindTag::Ramp => {
                SignalKind::Ramp { amplitude: sign, onset: rng.random_range(0..n / 4), rise: rng.random_range(n / 4..=3 * n / 4) }
            }
            KindTag::Chirp => SignalKind::Chirp {
                amplitude: sign,
                f0: log_uniform(rng, 0.0005, 0.002),
                f1: rng.random_range(0.02..0.05),
            },
            KindTag::Multisine => {
                SignalKind::Multisine { base_freq: log_uniform(rng, 0.001, 0.006), harmonics: rng.random_range(1..=6) }
            }
            KindTag::SquarePrbs => SignalKind::SquarePrbs { bit_period: rng.random_range(64..=256) },
            KindTag::FilteredNoise => SignalKind::FilteredNoise { bandwidth: log_uniform(rng, 0.004, 0.02) },
        }
    }
}

/// Deterministic, peak-normalized realization of `kind`.
pub fn generate(kind: &SignalKind, length: usize, seed: u64) -> Result<Signal> {
    if length < 2 {
        return Err(Error::param("length", format!("need at least 2 samples, got {length}")));
    }
    kind.validate(length)?;
    let mut rng = prng(seed);
    let samples: Vec<f64> = match *kind {
        SignalKind::Step { amplitude, onset } => (0..length).map(|n| if n >= onset { amplitude } else { 0.0 }).collect(),
        SignalKind::Ramp { amplitude, onset, rise } => (0..length)
            .map(|n| amplitude * ((n as f64 - onset as f64) / rise as f64).clamp(0.0, 1.0))
            .collect(),
        SignalKind::Chirp { amplitude, f0, f1 } => {
            let span = (length - 1) as f64;
            (0..length)
                .map(|n| {
                    let t = n as f64;
                    amplitude * (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * span))).sin()
                })
                .collect()
        }
        SignalKind::Multisine { base_freq, harmonics } => {
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..length)
                .map(|n| {
                    phases
                        .iter()
                        .enumerate()
                        .map(|(k, ph)| (2.0 * PI * (k + 1) as f64 * base_freq * n as f64 + ph).sin())
                        .sum()
                })
                .collect()
        }
        SignalKind::SquarePrbs { bit_period } => {
            let mut level = 0.0;
            (0..length)
                .map(|n| {
                    if n % bit_period == 0 {
                        level = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    }
                    level
                })
                .collect()
        }
        SignalKind::FilteredNoise { bandwidth } => {
            let a = (-2.0 * PI * bandwidth).exp();
            let warmup = (8.0 / (1.0 - a)).ceil() as usize;
            let mut stages = [0.0f64; 4];
            let mut out = Vec::with_capacity(length);
            for n in 0..warmup + length {
                let mut v: f64 = StandardNormal.sample(&mut rng);
                for s in stages.iter_mut() {
                    *s = a * *s + (1.0 - a) * v;
                    v = *s;
                }
                if n >= warmup {
                    out.push(v);
                }
            }
            out
        }
    };
    Ok(Signal::new(samples)?.normalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(v: &[f64]) -> Signal {
        Signal::new(v.to_vec()).unwrap()
    }

    #[test]
    fn step_and_ramp_examples() {
        let s = generate(&SignalKind::Step { amplitude: 1.0, onset: 0 }, 8, 0).unwrap();
        assert_eq!(s.samples(), &[1.0; 8]);
        let r = generate(&SignalKind::Ramp { amplitude: 1.0, onset: 0, rise: 4 }, 5, 0).unwrap();
        assert_eq!(r.samples(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn constant_frequency_chirp_is_a_sinusoid() {
        let t = 300;
        let s = generate(&SignalKind::Chirp { amplitude: 1.0, f0: 0.05, f1: 0.05 }, t, 9).unwrap();
        let direct: Vec<f64> = (0..t).map(|n| (2.0 * PI * 0.05 * n as f64).sin()).collect();
        let peak = direct.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in s.samples().iter().zip(&direct) {
            assert!((a - b / peak).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_examples() {
        let n = sig(&[2.0, -4.0]).normalize();
        assert_eq!(n.samples(), &[0.5, -1.0]);
        assert_eq!(n.scale(), 4.0);
        let z = sig(&[0.0, 0.0]).normalize();
        assert_eq!(z.samples(), &[0.0, 0.0]);
        assert_eq!(z.scale(), 1.0);
        assert_eq!(n.normalize(), n);
    }

    #[test]
    fn rmse_examples() {
        let a = sig(&[0.3, -0.2]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&sig(&[0.0, 0.0]), &sig(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(rmse(&sig(&[1.0, -1.0, 1.0, -1.0]), &sig(&[0.0; 4])).unwrap(), 1.0);
        assert!(matches!(rmse(&sig(&[1.0]), &sig(&[1.0, 2.0])), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_parameters_name_their_field() {
        let cases = [
            (SignalKind::Step { amplitude: 1.0, onset: 10 }, "onset"),
            (SignalKind::Chirp { amplitude: 1.0, f0: 0.1, f1: 0.05 }, "f1"),
            (SignalKind::Chirp { amplitude: 1.0, f0: 0.0, f1: 0.05 }, "f0"),
            (SignalKind::Chirp { amplitude: 1.0, f0: 0.1, f1: 0.5 }, "f1"),
            (SignalKind::SquarePrbs { bit_period: 0 }, "bit_period"),
            (SignalKind::FilteredNoise { bandwidth: 0.7 }, "bandwidth"),
            (SignalKind::Multisine { base_freq: 0.2, harmonics: 3 }, "base_freq"),
        ];
        for (kind, field) in cases {
            match generate(&kind, 10, 0) {
                Err(Error::Parameter { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{kind:?}: expected parameter error, got {other:?}"),
            }
        }
        assert!(generate(&SignalKind::SquarePrbs { bit_period: 4 }, 1, 0).is_err());
    }

    #[test]
    fn serialization_round_trip_uses_f32_samples() {
        let s = Signal::with_scale(vec![0.1, -1.0, 0.5], 3.5).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 3 * 4 + 8);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        let back = Signal::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.scale(), 3.5);
        assert_eq!(back.samples()[0], 0.1f32 as f64);
    }

    #[test]
    fn every_kind_peaks_at_one_for_many_seeds() {
        let mut rng = prng(3);
        for seed in 0..10_000u64 {
            let tag = KindTag::ALL[(seed % 6) as usize];
            let kind = SignalKind::sample(tag, 256, &mut rng);
            let s = generate(&kind, 256, seed).unwrap();
            assert_eq!(s.peak(), 1.0, "{kind:?} seed {seed}");
            assert!(s.samples().iter().all(|x| x.is_finite()));
        }
    }

    proptest! {
        #[test]
        fn generation_is_deterministic(seed in any::<u64>(), code in 0u8..6) {
            let tag = KindTag::from_code(code).unwrap();
            let kind = SignalKind::sample(tag, 128, &mut prng(seed));
            prop_assert_eq!(generate(&kind, 128, seed).unwrap(), generate(&kind, 128, seed).unwrap());
        }

        #[test]
        fn normalize_is_idempotent_and_invertible(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let s = Signal::new(v.clone()).unwrap();
            let n = s.normalize();
            prop_assert_eq!(n.normalize(), n.clone());
            for (orig, back) in v.iter().zip(n.denormalized()) {
                prop_assert!((orig - back).abs() <= orig.abs() * 2.0 * f64::EPSILON);
            }
        }

        #[test]
        fn rmse_is_a_metric(a in prop::collection::vec(-2f64..2.0, 8), b in prop::collection::vec(-2f64..2.0, 8)) {
            let (sa, sb) = (Signal::new(a.clone()).unwrap(), Signal::new(b.clone()).unwrap());
            let d = rmse(&sa, &sb).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, rmse(&sb, &sa).unwrap());
            prop_assert_eq!(d == 0.0, a == b);
        }
    }
}
