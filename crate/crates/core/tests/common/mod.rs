#![allow(dead_code)]

use iclsysid::systems::Biquad;

/// Multiplies the section polynomials out and runs one direct-form difference equation.
pub fn expanded_filter(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut b = vec![1.0];
    let mut a = vec![1.0];
    for s in sections {
        b = poly_mul(&b, &[s.b0, s.b1, s.b2]);
        a = poly_mul(&a, &[1.0, s.a1, s.a2]);
    }
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let mut acc = 0.0;
        for (k, bk) in b.iter().enumerate() {
            if n >= k {
                acc += bk * x[n - k];
            }
        }
        for (k, ak) in a.iter().enumerate().skip(1) {
            if n >= k {
                acc -= ak * y[n - k];
            }
        }
        y[n] = acc;
    }
    y
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
