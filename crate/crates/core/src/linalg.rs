//! Complex vector/matrix aliases and the few dense helpers the simulator needs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// `|h^H w|^2`.
#[inline]
pub fn gain(h: &CVector, w: &CVector) -> f64 {
    h.dotc(w).norm_sqr()
}

/// Squared Euclidean norm of a complex vector.
#[inline]
pub fn energy(v: &CVector) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Unnormalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Principal square root of a Hermitian positive semidefinite matrix.
///
/// Negative eigenvalues from round-off are clipped to zero.
pub fn hermitian_sqrt(r: &CMatrix) -> CMatrix {
    let eig = r.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| Complex64::new(l.max(0.0).sqrt(), 0.0));
    let v = &eig.eigenvectors;
    v * CMatrix::from_diagonal(&roots) * v.adjoint()
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_hermitian_eigenvalue(r: &CMatrix) -> f64 {
    r.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// One circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

pub fn complex_gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, var: f64) -> CVector {
    CVector::from_fn(len, |_, _| complex_gaussian(rng, var))
}

pub fn complex_gaussian_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    var: f64,
) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| complex_gaussian(rng, var))
}

/// Uniform phases on the unit circle.
pub fn random_phases<R: Rng + ?Sized>(rng: &mut R, len: usize) -> CVector {
    CVector::from_fn(len, |_, _| {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Complex64::from_polar(1.0, phi)
    })
}

/// Largest entry-wise modulus difference.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}
