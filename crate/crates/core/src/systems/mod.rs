//! Random stable LTI and NTI systems and their simulation.
//!
//! LTI systems are digital Butterworth filters stored as cascaded biquads.
//! NTI systems wrap a stable discrete-time state-space model with a
//! deadzone on the input, a play-operator static friction on the output and
//! a symmetric saturation, applied in that order.

pub mod butterworth;
mod sample;

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::Signal;

pub use sample::{sample_lti, sample_lti_class, sample_nti, sample_system, LtiConfig, NtiConfig, SystemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterClass {
    Lowpass,
    Highpass,
    Bandpass,
    Bandstop,
}

impl FilterClass {
    pub const ALL: [FilterClass; 4] =
        [FilterClass::Lowpass, FilterClass::Highpass, FilterClass::Bandpass, FilterClass::Bandstop];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<FilterClass> {
        Self::ALL.get(code as usize).copied()
    }
}

/// `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: 0.0, a2: 0.0 };

    /// Roots of `z^2 + a1 z + a2` (a single root for first-order sections).
    pub fn poles(&self) -> Vec<Complex64> {
        if self.a2 == 0.0 {
            return vec![Complex64::new(-self.a1, 0.0)];
        }
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        vec![(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    pub fn response(&self, f: f64) -> Complex64 {
        let w = 2.0 * PI * f;
        let e1 = Complex64::from_polar(1.0, -w);
        let e2 = e1 * e1;
        (self.b0 + self.b1 * e1 + self.b2 * e2) / (1.0 + self.a1 * e1 + self.a2 * e2)
    }
}

pub(crate) fn cascade_response(sections: &[Biquad], f: f64) -> Complex64 {
    sections.iter().map(|s| s.response(f)).product()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiSpec {
    pub order: usize,
    pub filter_class: FilterClass,
    /// Design edges in cycles/sample.
    pub cutoffs: Vec<f64>,
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl LtiSpec {
    pub fn max_pole_radius(&self) -> f64 {
        self.sections.iter().flat_map(|s| s.poles()).map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Checks the class-specific magnitude mask on a 513-point grid.
    ///
    /// Pass regions must reach 0.9 of the peak gain and stop regions stay
    /// under 0.1 of it.
    pub fn passes_mask(&self) -> bool {
        let grid: Vec<f64> = (0..=512).map(|i| i as f64 / 1024.0).collect();
        let mags: Vec<f64> = frequency_response(self, &grid).iter().map(|h| h.norm()).collect();
        let peak = mags.iter().copied().fold(0.0, f64::max);
        if !(peak.is_finite() && peak > 0.0) {
            return false;
        }
        let at = |f: f64| cascade_response(&self.sections, f).norm();
        let pass = |f: f64| at(f) >= 0.9 * peak;
        let stop = |f: f64| at(f) <= 0.1 * peak;
        match self.filter_class {
            FilterClass::Lowpass => pass(0.0) && stop(0.5),
            FilterClass::Highpass => pass(0.5) && stop(0.0),
            FilterClass::Bandpass => {
                pass(butterworth::reference_frequency(FilterClass::Bandpass, &self.cutoffs)) && stop(0.0) && stop(0.5)
            }
            FilterClass::Bandstop => pass(0.0) && pass(0.5) && stop(butterworth::band_centre(&self.cutoffs)),
        }
    }
}

/// Stable discrete-time state space with input deadzone, output play
/// operator and saturation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtiSpec {
    pub n: usize,
    /// Row-major `n x n`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub deadzone_neg: f64,
    pub deadzone_pos: f64,
    /// Symmetric output limit; `f64::INFINITY` disables it.
    pub saturation: f64,
    /// Half-width of the static-friction band.
    pub stiction: f64,
}

impl NtiSpec {
    fn a_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.n, self.n, &self.a)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a_matrix().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
    }

    /// `C (I - A)^-1 B + D`.
    pub fn dc_gain(&self) -> Option<f64> {
        let n = self.n;
        let m = nalgebra::DMatrix::<f64>::identity(n, n) - self.a_matrix();
        let x = m.lu().solve(&nalgebra::DVector::from_column_slice(&self.b))?;
        Some(self.c.iter().zip(x.iter()).map(|(c, x)| c * x).sum::<f64>() + self.d)
    }

    /// Same linear part with every nonlinearity disabled.
    pub fn linear_part(&self) -> NtiSpec {
        NtiSpec { deadzone_neg: 0.0, deadzone_pos: 0.0, saturation: f64::INFINITY, stiction: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SystemModel {
    Lti(LtiSpec),
    Nti(NtiSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system_id: u64,
    pub seed: u64,
    pub model: SystemModel,
}

impl SystemSpec {
    pub fn is_lti(&self) -> bool {
        matches!(self.model, SystemModel::Lti(_))
    }

    pub fn filter_class(&self) -> Option<FilterClass> {
        match &self.model {
            SystemModel::Lti(l) => Some(l.filter_class),
            SystemModel::Nti(_) => None,
        }
    }
}

/// Magnitude-and-phase response on a grid of frequencies in `[0, 0.5]`.
pub fn frequency_response(spec: &LtiSpec, freqs: &[f64]) -> Vec<Complex64> {
    freqs.iter().map(|&f| cascade_response(&spec.sections, f)).collect()
}

/// Zero inside `[d_neg, d_pos]`, shifted toward zero outside it.
pub fn deadzone(v: f64, d_neg: f64, d_pos: f64) -> f64 {
    if v > d_pos {
        v - d_pos
    } else if v < d_neg {
        v - d_neg
    } else {
        0.0
    }
}

/// Play (backlash) operator: hold `w_prev` until `v` leaves the band of half-width `tc`.
pub fn stiction(v: f64, w_prev: f64, tc: f64) -> f64 {
    let gap = v - w_prev;
    if gap.abs() <= tc {
        w_prev
    } else {
        v - tc * gap.signum()
    }
}

/// Cascaded direct-form-II-transposed biquads from zero state.
pub fn simulate_sections(sections: &[Biquad], x: &[f64]) -> Result<Vec<f64>> {
    let mut state = vec![[0.0f64; 2]; sections.len()];
    let mut out = Vec::with_capacity(x.len());
    for (n, &u) in x.iter().enumerate() {
        let mut v = u;
        for (s, st) in sections.iter().zip(state.iter_mut()) {
            let y = s.b0 * v + st[0];
            st[0] = s.b1 * v - s.a1 * y + st[1];
            st[1] = s.b2 * v - s.a2 * y;
            v = y;
        }
        if !v.is_finite() {
            return Err(Error::NumericOverflow { index: n });
        }
        out.push(v);
    }
    Ok(out)
}

/// NTI pipeline per step: deadzone, state update, output map, stiction, saturation.
pub fn simulate_nti(spec: &NtiSpec, x: &[f64]) -> Result<Vec<f64>> {
    let n = spec.n;
    let mut state = vec![0.0f64; n];
    let mut next = vec![0.0f64; n];
    let mut w = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for (t, &u) in x.iter().enumerate() {
        let u = deadzone(u, spec.deadzone_neg, spec.deadzone_pos);
        for (i, nx) in next.iter_mut().enumerate() {
            let row = &spec.a[i * n..(i + 1) * n];
            *nx = row.iter().zip(&state).map(|(a, s)| a * s).sum::<f64>() + spec.b[i] * u;
        }
        std::mem::swap(&mut state, &mut next);
        let v = spec.c.iter().zip(&state).map(|(c, s)| c * s).sum::<f64>() + spec.d * u;
        w = stiction(v, w, spec.stiction);
        let y = w.clamp(-spec.saturation, spec.saturation);
        if !y.is_finite() || !v.is_finite() {
            return Err(Error::NumericOverflow { index: t });
        }
        out.push(y);
    }
    Ok(out)
}

/// `y = f(x)` from zero initial state. The result is not normalized.
pub fn simulate(spec: &SystemSpec, x: &Signal) -> Result<Signal> {
    let y = match &spec.model {
        SystemModel::Lti(l) => {
            let mut y = simulate_sections(&l.sections, x.samples())?;
            y.iter_mut().for_each(|v| *v *= l.gain);
            y
        }
        SystemModel::Nti(s) => simulate_nti(s, x.samples())?,
    };
    Signal::new(y)
}

// Binary record: tag byte, ids, then little-endian dimensions and f64 payload.

const TAG_LTI: u8 = 0;
const TAG_NTI: u8 = 1;

fn put_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| get_u64(r).map(f64::from_bits)).collect()
}

fn invalid(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

impl SystemSpec {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        match &self.model {
            SystemModel::Lti(l) => {
                w.write_all(&[TAG_LTI])?;
                w.write_all(&self.system_id.to_le_bytes())?;
                w.write_all(&self.seed.to_le_bytes())?;
                w.write_all(&[l.order as u8, l.filter_class.code(), l.cutoffs.len() as u8])?;
                put_f64s(w, &l.cutoffs)?;
                w.write_all(&l.gain.to_le_bytes())?;
                w.write_all(&(l.sections.len() as u32).to_le_bytes())?;
                for s in &l.sections {
                    put_f64s(w, &[s.b0, s.b1, s.b2, s.a1, s.a2])?;
                }
            }
            SystemModel::Nti(s) => {
                w.write_all(&[TAG_NTI])?;
                w.write_all(&self.system_id.to_le_bytes())?;
                w.write_all(&self.seed.to_le_bytes())?;
                w.write_all(&(s.n as u32).to_le_bytes())?;
                put_f64s(w, &s.a)?;
                put_f64s(w, &s.b)?;
                put_f64s(w, &s.c)?;
                put_f64s(w, &[s.d, s.deadzone_neg, s.deadzone_pos, s.saturation, s.stiction])?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<SystemSpec> {
        let tag = get_u8(r)?;
        let system_id = get_u64(r)?;
        let seed = get_u64(r)?;
        let model = match tag {
            TAG_LTI => {
                let order = get_u8(r)? as usize;
                let filter_class = FilterClass::from_code(get_u8(r)?).ok_or_else(|| invalid("bad filter class"))?;
                let ncut = get_u8(r)? as usize;
                let cutoffs = get_f64s(r, ncut)?;
                let gain = get_f64s(r, 1)?[0];
                let nsec = get_u32(r)? as usize;
                if nsec > 64 {
                    return Err(invalid(format!("implausible section count {nsec}")));
                }
                let sections = (0..nsec)
                    .map(|_| get_f64s(r, 5).map(|c| Biquad { b0: c[0], b1: c[1], b2: c[2], a1: c[3], a2: c[4] }))
                    .collect::<std::io::Result<_>>()?;
                SystemModel::Lti(LtiSpec { order, filter_class, cutoffs, sections, gain })
            }
            TAG_NTI => {
                let n = get_u32(r)? as usize;
                if n == 0 || n > 64 {
                    return Err(invalid(format!("implausible state dimension {n}")));
                }
                let a = get_f64s(r, n * n)?;
                let b = get_f64s(r, n)?;
                let c = get_f64s(r, n)?;
                let t = get_f64s(r, 5)?;
                SystemModel::Nti(NtiSpec {
                    n,
                    a,
                    b,
                    c,
                    d: t[0],
                    deadzone_neg: t[1],
                    deadzone_pos: t[2],
                    saturation: t[3],
                    stiction: t[4],
                })
            }
            other => return Err(invalid(format!("unknown system tag {other}"))),
        };
        Ok(SystemSpec { system_id, seed, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deadzone_examples() {
        assert_eq!(deadzone(0.05, -0.1, 0.1), 0.0);
        assert!((deadzone(0.5, -0.1, 0.1) - 0.4).abs() < 1e-15);
        assert!((deadzone(-0.3, -0.1, 0.1) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn stiction_examples() {
        assert_eq!(stiction(0.7, 0.2, 0.0), 0.7);
        assert_eq!(stiction(1.0, 0.95, 0.1), 0.95);
        assert!((stiction(1.0, 0.5, 0.1) - 0.9).abs() < 1e-15);
        assert!((stiction(0.0, 0.5, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn first_order_smoother_step_response() {
        // y[n] = 0.5 y[n-1] + 0.5 x[n]
        let s = [Biquad { b0: 0.5, b1: 0.0, b2: 0.0, a1: -0.5, a2: 0.0 }];
        let y = simulate_sections(&s, &[1.0; 6]).unwrap();
        let mut want = 0.0;
        for v in y {
            want = 0.5 * want + 0.5;
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_section_and_single_pole_response() {
        for f in [0.0, 0.1, 0.25, 0.5] {
            assert!((Biquad::IDENTITY.response(f) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let s = Biquad { b0: 0.3, b1: 0.0, b2: 0.0, a1: -0.5, a2: 0.0 };
        assert!((s.response(0.0).norm() - 0.3 / 0.5).abs() < 1e-15);
    }

    #[test]
    fn overflow_reports_time_index() {
        let unstable = [Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: -1e200, a2: 0.0 }];
        match simulate_sections(&unstable, &[1.0, 0.0, 0.0, 0.0]) {
            Err(Error::NumericOverflow { index }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nti_input_inside_deadzone_gives_zero_output() {
        let spec = NtiSpec {
            n: 1,
            a: vec![0.9],
            b: vec![1.0],
            c: vec![0.1],
            d: 0.0,
            deadzone_neg: -0.1,
            deadzone_pos: 0.1,
            saturation: 1.0,
            stiction: 0.02,
        };
        let y = simulate_nti(&spec, &[0.05; 100]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_record_round_trip() {
        let lti = SystemSpec {
            system_id: 3,
            seed: 99,
            model: SystemModel::Lti(LtiSpec {
                order: 2,
                filter_class: FilterClass::Bandpass,
                cutoffs: vec![0.1, 0.2],
                sections: butterworth::design(FilterClass::Bandpass, 2, &[0.1, 0.2]).unwrap(),
                gain: 1.0,
            }),
        };
        let nti = SystemSpec {
            system_id: 4,
            seed: 7,
            model: SystemModel::Nti(NtiSpec {
                n: 1,
                a: vec![0.5],
                b: vec![1.0],
                c: vec![0.5],
                d: 0.0,
                deadzone_neg: -0.01,
                deadzone_pos: 0.02,
                saturation: f64::INFINITY,
                stiction: 0.0,
            }),
        };
        for spec in [lti, nti] {
            let mut buf = Vec::new();
            spec.write_to(&mut buf).unwrap();
            assert_eq!(SystemSpec::read_from(&mut buf.as_slice()).unwrap(), spec);
        }
    }
}
