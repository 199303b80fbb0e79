#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use ris_ors::channel_model::ChannelSet;
use ris_ors::linalg::{CMatrix, CVector};

pub fn cn<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn cn_vec<R: Rng>(rng: &mut R, n: usize) -> CVector {
    CVector::from_fn(n, |_, _| cn(rng))
}

pub fn cn_mat<R: Rng>(rng: &mut R, r: usize, c: usize) -> CMatrix {
    CMatrix::from_fn(r, c, |_, _| cn(rng))
}

/// Channels with i.i.d. CN(0, 1) entries on every link.
pub fn iid_channels<R: Rng>(rng: &mut R, t: usize, l: usize, n: usize) -> ChannelSet {
    ChannelSet::from_parts(
        t,
        [cn_vec(rng, l), cn_vec(rng, l)],
        cn_mat(rng, l, n),
        [cn_vec(rng, n), cn_vec(rng, n)],
    )
}

/// `sum conj(a_i) b_i` with explicit real arithmetic.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> (f64, f64) {
    let mut re = 0.0;
    let mut im = 0.0;
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    (re, im)
}

pub fn gain(a: &[Complex64], b: &[Complex64]) -> f64 {
    let (re, im) = inner(a, b);
    re * re + im * im
}

/// Effective channel `h_l + sum_n G_ln q_n theta_n` by explicit loops.
pub fn effective(h: &CVector, g: &CMatrix, q: &CVector, theta: &CVector) -> Vec<Complex64> {
    (0..h.len())
        .map(|l| {
            let mut re = h[l].re;
            let mut im = h[l].im;
            for n in 0..theta.len() {
                let a = g[(l, n)];
                let b = q[n];
                let ab = Complex64::new(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re);
                let t = theta[n];
                re += ab.re * t.re - ab.im * t.im;
                im += ab.re * t.im + ab.im * t.re;
            }
            Complex64::new(re, im)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn report(id: usize, pass: bool, detail: &str) {
    println!("[{}] criterion {id:2}: {detail}", if pass { "PASS" } else { "FAIL" });
}
