use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{butterworth, FilterClass, LtiSpec, NtiSpec, SystemModel, SystemSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, prng, Prng};

pub const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LtiConfig {
    /// Inclusive order range; band classes use the even orders inside it.
    pub orders: (usize, usize),
    pub classes: Vec<FilterClass>,
    /// Log-uniform range for low/high-pass cutoffs and the lower band edge.
    pub cutoff_range: (f64, f64),
    /// Ratio between upper and lower band edge.
    pub band_ratio: (f64, f64),
    pub gain_range: (f64, f64),
}

impl Default for LtiConfig {
    fn default() -> Self {
        LtiConfig {
            orders: (1, 4),
            classes: FilterClass::ALL.to_vec(),
            cutoff_range: (0.01, 0.2),
            band_ratio: (1.5, 4.0),
            gain_range: (0.5, 2.0),
        }
    }
}

impl LtiConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.orders;
        if lo < 1 || hi > 4 || lo > hi {
            return Err(Error::param("orders", format!("{:?} not within [1, 4]", self.orders)));
        }
        if self.classes.is_empty() {
            return Err(Error::param("classes", "empty"));
        }
        let (c0, c1) = self.cutoff_range;
        if !(c0 >= 0.01 && c0 <= c1 && c1 <= 0.45) {
            return Err(Error::param("cutoff_range", format!("{:?} not ordered within [0.01, 0.45]", self.cutoff_range)));
        }
        let (r0, r1) = self.band_ratio;
        if !(r0 > 1.0 && r0 <= r1) {
            return Err(Error::param("band_ratio", format!("{:?} must be ordered and > 1", self.band_ratio)));
        }
        let (g0, g1) = self.gain_range;
        if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
            return Err(Error::param("gain_range", format!("{:?} must be positive and ordered", self.gain_range)));
        }
        let band_only = self.classes.iter().all(|c| matches!(c, FilterClass::Bandpass | FilterClass::Bandstop));
        if band_only && hi < 2 {
            return Err(Error::param("orders", "band classes need order >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtiConfig {
    pub orders: Vec<usize>,
    pub pole_magnitude: (f64, f64),
    /// Pole angle bounds in radians, sampled log-uniformly.
    pub pole_angle: (f64, f64),
    pub dc_gain: (f64, f64),
    pub deadzone_max: f64,
    /// Saturation limit as a multiple of the DC gain.
    pub saturation_factor: (f64, f64),
    /// Static-friction band as a multiple of the DC gain.
    pub stiction_factor: (f64, f64),
}

impl Default for NtiConfig {
    fn default() -> Self {
        NtiConfig {
            orders: vec![3, 4],
            pole_magnitude: (0.6, 0.98),
            pole_angle: (0.01 * PI, 0.5 * PI),
            dc_gain: (0.5, 2.0),
            deadzone_max: 0.1,
            saturation_factor: (0.6, 1.5),
            stiction_factor: (0.0, 0.1),
        }
    }
}

impl NtiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() || self.orders.iter().any(|&n| !(2..=8).contains(&n)) {
            return Err(Error::param("orders", format!("{:?} must be non-empty within [2, 8]", self.orders)));
        }
        let (m0, m1) = self.pole_magnitude;
        if !(m0 > 0.0 && m0 <= m1 && m1 < 1.0) {
            return Err(Error::param("pole_magnitude", format!("{:?} not ordered within (0, 1)", self.pole_magnitude)));
        }
        let (a0, a1) = self.pole_angle;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= PI / 2.0) {
            return Err(Error::param("pole_angle", format!("{:?} not ordered within (0, pi/2]", self.pole_angle)));
        }
        let (g0, g1) = self.dc_gain;
        if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
            return Err(Error::param("dc_gain", format!("{:?} must be positive and ordered", self.dc_gain)));
        }
        if !(0.0..1.0).contains(&self.deadzone_max) {
            return Err(Error::param("deadzone_max", format!("{} not within [0, 1)", self.deadzone_max)));
        }
        let (s0, s1) = self.saturation_factor;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::param("saturation_factor", format!("{:?} must be positive and ordered", self.saturation_factor)));
        }
        let (t0, t1) = self.stiction_factor;
        if !(t0 >= 0.0 && t0 <= t1 && t1.is_finite()) {
            return Err(Error::param("stiction_factor", format!("{:?} must be non-negative and ordered", self.stiction_factor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub lti: LtiConfig,
    pub nti: NtiConfig,
}

fn uniform(rng: &mut Prng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn log_uniform(rng: &mut Prng, (lo, hi): (f64, f64)) -> f64 {
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

/// Samples a Butterworth design of the given class.
pub fn sample_lti_class(seed: u64, class: FilterClass, config: &LtiConfig) -> Result<LtiSpec> {
    config.validate()?;
    let band = matches!(class, FilterClass::Bandpass | FilterClass::Bandstop);
    let orders: Vec<usize> = (config.orders.0..=config.orders.1).filter(|o| !band || o % 2 == 0).collect();
    if orders.is_empty() {
        return Err(Error::param("orders", format!("no valid order for {class:?} in {:?}", config.orders)));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = prng(derive_seed(seed, 0x171, attempt as u64));
        let order = orders[rng.random_range(0..orders.len())];
        let cutoffs = if band {
            let lo = log_uniform(&mut rng, config.cutoff_range);
            let hi = lo * log_uniform(&mut rng, config.band_ratio);
            if hi >= 0.45 {
                continue;
            }
            vec![lo, hi]
        } else {
            vec![log_uniform(&mut rng, config.cutoff_range)]
        };
        let gain = uniform(&mut rng, config.gain_range);
        let Ok(sections) = butterworth::design(class, order, &cutoffs) else { continue };
        let spec = LtiSpec { order, filter_class: class, cutoffs, sections, gain };
        if spec.max_pole_radius() < 1.0 && spec.passes_mask() {
            return Ok(spec);
        }
    }
    Err(Error::SamplingFailure { system_id: seed, attempts: MAX_ATTEMPTS })
}

/// Samples a filter class uniformly from the configured set, then a design.
pub fn sample_lti(seed: u64, config: &LtiConfig) -> Result<LtiSpec> {
    config.validate()?;
    let mut rng = prng(derive_seed(seed, 0x170, 0));
    let mut classes = config.classes.clone();
    if config.orders.1 < 2 {
        classes.retain(|c| matches!(c, FilterClass::Lowpass | FilterClass::Highpass));
    }
    let class = classes[rng.random_range(0..classes.len())];
    sample_lti_class(seed, class, config)
}

fn modal_matrix(rng: &mut Prng, n: usize, config: &NtiConfig) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    let mut i = 0;
    while i < n {
        let r = uniform(rng, config.pole_magnitude);
        if n - i >= 2 {
            let theta = log_uniform(rng, config.pole_angle);
            let (c, s) = (r * theta.cos(), r * theta.sin());
            a[i * n + i] = c;
            a[i * n + i + 1] = -s;
            a[(i + 1) * n + i] = s;
            a[(i + 1) * n + i + 1] = c;
            i += 2;
        } else {
            a[i * n + i] = r;
            i += 1;
        }
    }
    a
}

/// Samples a stable state-space model with deadzone, stiction and saturation.
pub fn sample_nti(seed: u64, config: &NtiConfig) -> Result<NtiSpec> {
    config.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = prng(derive_seed(seed, 0x171a, attempt as u64));
        let n = config.orders[rng.random_range(0..config.orders.len())];
        let a = modal_matrix(&mut rng, n, config);
        let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut spec = NtiSpec {
            n,
            a,
            b,
            c: c.clone(),
            d: 0.0,
            deadzone_neg: 0.0,
            deadzone_pos: 0.0,
            saturation: f64::INFINITY,
            stiction: 0.0,
        };
        let Some(g0) = spec.dc_gain() else { continue };
        let scale: f64 = spec.b.iter().map(|v| v * v).sum::<f64>().sqrt() * c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !g0.is_finite() || g0.abs() < 1e-3 * scale {
            continue;
        }
        let target = uniform(&mut rng, config.dc_gain);
        c.iter_mut().for_each(|v| *v *= target / g0);
        spec.c = c;
        spec.deadzone_neg = -uniform(&mut rng, (0.0, config.deadzone_max));
        spec.deadzone_pos = uniform(&mut rng, (0.0, config.deadzone_max));
        spec.saturation = uniform(&mut rng, config.saturation_factor) * target;
        spec.stiction = uniform(&mut rng, config.stiction_factor) * target;
        if spec.spectral_radius() < 1.0 && spec.dc_gain().is_some_and(|g| g > 0.0) {
            return Ok(spec);
        }
    }
    Err(Error::SamplingFailure { system_id: seed, attempts: MAX_ATTEMPTS })
}

/// Samples one corpus system; failures carry `system_id`.
pub fn sample_system(system_id: u64, seed: u64, lti: bool, config: &SystemConfig) -> Result<SystemSpec> {
    let model = if lti {
        sample_lti(seed, &config.lti).map(SystemModel::Lti)
    } else {
        sample_nti(seed, &config.nti).map(SystemModel::Nti)
    };
    let model = model.map_err(|e| match e {
        Error::SamplingFailure { attempts, .. } => Error::SamplingFailure { system_id, attempts },
        other => other,
    })?;
    Ok(SystemSpec { system_id, seed, model })
}
