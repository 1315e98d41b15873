//! Digital Butterworth design: analog prototype, pre-warped bilinear
//! transform, second-order sections.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::{Biquad, FilterClass};
use crate::error::{Error, Result};

const BILINEAR_FS2: f64 = 4.0; // 2 * fs with fs = 2 (Nyquist-normalized)

fn prototype_poles(order: usize) -> Vec<Complex64> {
    let n = order as f64;
    (0..order)
        .map(|i| {
            let m = -(n - 1.0) + 2.0 * i as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n))
        })
        .collect()
}

/// Pre-warped analog frequency for a digital frequency in cycles/sample.
fn warp(f: f64) -> f64 {
    BILINEAR_FS2 * (PI * f).tan()
}

fn quadratic_roots(b: Complex64, c: Complex64) -> (Complex64, Complex64) {
    // Roots of s^2 - 2 b s + c = 0, written as b +- sqrt(b^2 - c).
    let d = (b * b - c).sqrt();
    (b + d, b - d)
}

/// Analog zeros and poles for the requested class.
fn analog_zpk(class: FilterClass, proto_order: usize, cutoffs: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let proto = prototype_poles(proto_order);
    match class {
        FilterClass::Lowpass => (vec![], proto.iter().map(|p| p * warp(cutoffs[0])).collect()),
        FilterClass::Highpass => {
            let wo = warp(cutoffs[0]);
            (vec![Complex64::new(0.0, 0.0); proto_order], proto.iter().map(|p| wo / p).collect())
        }
        FilterClass::Bandpass | FilterClass::Bandstop => {
            let (w1, w2) = (warp(cutoffs[0]), warp(cutoffs[1]));
            let wo2 = Complex64::new(w1 * w2, 0.0);
            let half_bw = (w2 - w1) / 2.0;
            let mut poles = Vec::with_capacity(2 * proto_order);
            for p in &proto {
                let centre = if class == FilterClass::Bandpass { p * half_bw } else { half_bw / p };
                let (r1, r2) = quadratic_roots(centre, wo2);
                poles.push(r1);
                poles.push(r2);
            }
            let zeros = if class == FilterClass::Bandpass {
                vec![Complex64::new(0.0, 0.0); proto_order]
            } else {
                let wo = (w1 * w2).sqrt();
                (0..proto_order).flat_map(|_| [Complex64::new(0.0, wo), Complex64::new(0.0, -wo)]).collect()
            };
            (zeros, poles)
        }
    }
}

fn bilinear(z: Complex64) -> Complex64 {
    (BILINEAR_FS2 + z) / (BILINEAR_FS2 - z)
}

/// Splits roots into conjugate pairs (one representative, imag > 0) and real roots.
fn split_roots(roots: &[Complex64]) -> (Vec<Complex64>, Vec<f64>) {
    const TOL: f64 = 1e-9;
    let mut pairs = Vec::new();
    let mut reals = Vec::new();
    for r in roots {
        if r.im.abs() <= TOL * r.norm().max(1.0) {
            reals.push(r.re);
        } else if r.im > 0.0 {
            pairs.push(*r);
        }
    }
    (pairs, reals)
}

/// Frequency (cycles/sample) at which the designed filter is normalized to unit gain.
pub(super) fn reference_frequency(class: FilterClass, cutoffs: &[f64]) -> f64 {
    match class {
        FilterClass::Lowpass | FilterClass::Bandstop => 0.0,
        FilterClass::Highpass => 0.5,
        FilterClass::Bandpass => {
            let wo = (warp(cutoffs[0]) * warp(cutoffs[1])).sqrt();
            (wo / BILINEAR_FS2).atan() / PI
        }
    }
}

/// Centre of the stop band for band-stop designs (geometric centre in the analog domain).
pub(super) fn band_centre(cutoffs: &[f64]) -> f64 {
    let wo = (warp(cutoffs[0]) * warp(cutoffs[1])).sqrt();
    (wo / BILINEAR_FS2).atan() / PI
}

/// Designs an order-`order` Butterworth filter as unit-gain second-order sections.
///
/// `order` counts poles; band filters need an even order. Cutoffs are in
/// cycles/sample: one edge for low/high-pass, two ordered edges otherwise.
pub fn design(class: FilterClass, order: usize, cutoffs: &[f64]) -> Result<Vec<Biquad>> {
    if !(1..=8).contains(&order) {
        return Err(Error::param("order", format!("{order} outside [1, 8]")));
    }
    let band = matches!(class, FilterClass::Bandpass | FilterClass::Bandstop);
    if band && order % 2 != 0 {
        return Err(Error::param("order", format!("{class:?} needs an even order, got {order}")));
    }
    let expected = if band { 2 } else { 1 };
    if cutoffs.len() != expected {
        return Err(Error::param("cutoffs", format!("{class:?} takes {expected} edge(s), got {}", cutoffs.len())));
    }
    if cutoffs.iter().any(|&f| !(f > 0.0 && f < 0.5)) {
        return Err(Error::param("cutoffs", format!("{cutoffs:?} not within (0, 0.5)")));
    }
    if band && cutoffs[0] >= cutoffs[1] {
        return Err(Error::param("cutoffs", format!("band edges not ordered: {cutoffs:?}")));
    }

    let proto_order = if band { order / 2 } else { order };
    let (za, pa) = analog_zpk(class, proto_order, cutoffs);
    let mut zeros: Vec<Complex64> = za.iter().map(|&z| bilinear(z)).collect();
    let poles: Vec<Complex64> = pa.iter().map(|&p| bilinear(p)).collect();
    // Analog zeros at infinity land on z = -1.
    zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), poles.len() - zeros.len()));

    let (pole_pairs, mut pole_reals) = split_roots(&poles);
    let (mut zero_pairs, mut zero_reals) = split_roots(&zeros);

    let mut sections = Vec::new();
    let take_nearest_real = |reals: &mut Vec<f64>, target: Complex64| -> f64 {
        let (idx, _) = reals
            .iter()
            .enumerate()
            .map(|(i, &r)| (i, (Complex64::new(r, 0.0) - target).norm()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        reals.remove(idx)
    };
    let numerator_for_pair = |zero_pairs: &mut Vec<Complex64>, zero_reals: &mut Vec<f64>, p: Complex64| -> (f64, f64) {
        if !zero_pairs.is_empty() {
            let (idx, _) = zero_pairs
                .iter()
                .enumerate()
                .map(|(i, z)| (i, (z - p).norm()))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            let z = zero_pairs.remove(idx);
            (-2.0 * z.re, z.norm_sqr())
        } else {
            let z1 = take_nearest_real(zero_reals, p);
            let z2 = take_nearest_real(zero_reals, p);
            (-(z1 + z2), z1 * z2)
        }
    };

    for p in pole_pairs {
        let (b1, b2) = numerator_for_pair(&mut zero_pairs, &mut zero_reals, p);
        sections.push(Biquad { b0: 1.0, b1, b2, a1: -2.0 * p.re, a2: p.norm_sqr() });
    }
    while pole_reals.len() >= 2 {
        let p1 = pole_reals.remove(0);
        let p2 = pole_reals.remove(0);
        let centre = Complex64::new((p1 + p2) / 2.0, 0.0);
        let (b1, b2) = numerator_for_pair(&mut zero_pairs, &mut zero_reals, centre);
        sections.push(Biquad { b0: 1.0, b1, b2, a1: -(p1 + p2), a2: p1 * p2 });
    }
    if let Some(p) = pole_reals.pop() {
        let z = take_nearest_real(&mut zero_reals, Complex64::new(p, 0.0));
        sections.push(Biquad { b0: 1.0, b1: -z, b2: 0.0, a1: -p, a2: 0.0 });
    }
    debug_assert!(zero_pairs.is_empty() && zero_reals.is_empty());

    let f_ref = reference_frequency(class, cutoffs);
    let mag = super::cascade_response(&sections, f_ref).norm();
    if !(mag.is_finite() && mag > 0.0) {
        return Err(Error::Domain(format!("degenerate design for {class:?} order {order} at {cutoffs:?}")));
    }
    let s = &mut sections[0];
    s.b0 /= mag;
    s.b1 /= mag;
    s.b2 /= mag;
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototype_poles_lie_on_left_unit_semicircle() {
        for n in 1..=4 {
            for p in prototype_poles(n) {
                assert!((p.norm() - 1.0).abs() < 1e-12);
                assert!(p.re < 0.0);
            }
        }
    }

    #[test]
    fn first_order_lowpass_matches_closed_form() {
        // Bilinear first-order Butterworth: K (1 + z^-1) / (1 - a z^-1),
        // with a = (1 - tan(pi fc)) / (1 + tan(pi fc)) and K = (1 - a) / 2.
        let fc = 0.1;
        let s = design(FilterClass::Lowpass, 1, &[fc]).unwrap();
        assert_eq!(s.len(), 1);
        let t = (PI * fc).tan();
        let a = (1.0 - t) / (1.0 + t);
        let k = (1.0 - a) / 2.0;
        let q = s[0];
        assert!((q.a1 + a).abs() < 1e-12);
        assert!((q.b0 - k).abs() < 1e-12 && (q.b1 - k).abs() < 1e-12);
        assert_eq!(q.a2, 0.0);
        assert_eq!(q.b2, 0.0);
    }

    #[test]
    fn half_power_at_cutoff() {
        // Butterworth magnitude is 1/sqrt(2) at the (pre-warped) cutoff for every order.
        for order in 1..=4 {
            let s = design(FilterClass::Lowpass, order, &[0.12]).unwrap();
            let m = super::super::cascade_response(&s, 0.12).norm();
            assert!((m - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "order {order}: {m}");
            let s = design(FilterClass::Highpass, order, &[0.12]).unwrap();
            let m = super::super::cascade_response(&s, 0.12).norm();
            assert!((m - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "hp order {order}: {m}");
        }
        for order in [2, 4] {
            for class in [FilterClass::Bandpass, FilterClass::Bandstop] {
                let s = design(class, order, &[0.05, 0.15]).unwrap();
                for edge in [0.05, 0.15] {
                    let m = super::super::cascade_response(&s, edge).norm();
                    assert!((m - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "{class:?} {order}: {m}");
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_requests() {
        assert!(design(FilterClass::Bandpass, 3, &[0.1, 0.2]).is_err());
        assert!(design(FilterClass::Bandpass, 2, &[0.2, 0.1]).is_err());
        assert!(design(FilterClass::Lowpass, 2, &[0.6]).is_err());
        assert!(design(FilterClass::Lowpass, 0, &[0.1]).is_err());
    }
}
