//! Scenario geometry and per-coherence-block channel generation.
//!
//! Coordinates are in meters. The BS sits at the origin with a uniform linear
//! array along the y axis, broadside towards +x. The RIS is a planar grid in the
//! y-z plane at `(bs_ris_distance, 0, 0)` facing the BS. Users are dropped
//! uniformly in a horizontal disk whose center lies `ris_user_distance` in
//! front of the RIS, on the BS-RIS axis.

use std::f64::consts::TAU;

use nalgebra::{Point3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian_matrix, complex_gaussian_vector, hermitian_sqrt, sinc, CMatrix, CVector};

/// Number of users; the ORS scheme is defined for exactly two.
pub const NUM_USERS: usize = 2;

/// Inputs for [`build_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub antennas: usize,
    pub elements: usize,
    pub ris_grid: (usize, usize),
    pub wavelength: f64,
    pub bs_ris_distance: f64,
    pub ris_user_distance: f64,
    pub user_radius: f64,
}

impl ScenarioParams {
    /// Default geometry for `antennas` BS antennas and `elements` RIS elements,
    /// laid out on the most square grid that factors `elements`.
    pub fn new(antennas: usize, elements: usize) -> Self {
        Self {
            antennas,
            elements,
            ris_grid: square_grid(elements),
            wavelength: 0.1,
            bs_ris_distance: 400.0,
            ris_user_distance: 100.0,
            user_radius: 50.0,
        }
    }
}

/// `(rows, cols)` with `rows * cols == n` and `rows` the largest divisor not above `sqrt(n)`.
pub fn square_grid(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub bs_position: Point3<f64>,
    pub ris_position: Point3<f64>,
    pub user_positions: [Point3<f64>; NUM_USERS],
    pub wavelength: f64,
    pub antennas: usize,
    pub elements: usize,
    pub bs_spacing: f64,
    pub ris_spacing: f64,
    pub ris_grid: (usize, usize),
}

impl Scenario {
    pub fn bs_element_positions(&self) -> Vec<Point3<f64>> {
        let mid = (self.antennas as f64 - 1.0) / 2.0;
        (0..self.antennas)
            .map(|l| self.bs_position + Vector3::new(0.0, (l as f64 - mid) * self.bs_spacing, 0.0))
            .collect()
    }

    /// RIS element positions in row-major order over `ris_grid`.
    pub fn ris_element_positions(&self) -> Vec<Point3<f64>> {
        let (rows, cols) = self.ris_grid;
        let rmid = (rows as f64 - 1.0) / 2.0;
        let cmid = (cols as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let off = Vector3::new(
                    0.0,
                    (c as f64 - cmid) * self.ris_spacing,
                    (r as f64 - rmid) * self.ris_spacing,
                );
                out.push(self.ris_position + off);
            }
        }
        out
    }

    pub fn bs_ris_distance(&self) -> f64 {
        (self.ris_position - self.bs_position).norm()
    }

    pub fn bs_user_distance(&self, k: usize) -> f64 {
        (self.user_positions[k] - self.bs_position).norm()
    }

    pub fn ris_user_distance(&self, k: usize) -> f64 {
        (self.user_positions[k] - self.ris_position).norm()
    }

    /// Angle of user `k` from the BS array broadside, in radians.
    pub fn bs_user_angle(&self, k: usize) -> f64 {
        let d = self.user_positions[k] - self.bs_position;
        d.y.atan2(d.x)
    }

    fn wavenumber(&self) -> f64 {
        TAU / self.wavelength
    }
}

/// Places BS, RIS and both users. Deterministic in `seed`.
pub fn build_scenario(params: &ScenarioParams, seed: u64) -> Result<Scenario> {
    if params.antennas == 0 {
        return Err(Error::Config("BS antenna count L must be at least 1".into()));
    }
    if params.elements == 0 {
        return Err(Error::Config("RIS element count N must be at least 1".into()));
    }
    let (rows, cols) = params.ris_grid;
    if rows * cols != params.elements {
        return Err(Error::Config(format!(
            "RIS grid {rows}x{cols} does not match N = {}",
            params.elements
        )));
    }
    for (name, v) in [
        ("wavelength", params.wavelength),
        ("bs_ris_distance", params.bs_ris_distance),
        ("ris_user_distance", params.ris_user_distance),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
    }
    if !(params.user_radius >= 0.0 && params.user_radius < params.ris_user_distance) {
        return Err(Error::Config(format!(
            "user_radius must lie in [0, ris_user_distance), got {}",
            params.user_radius
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = Point3::origin();
    let ris = Point3::new(params.bs_ris_distance, 0.0, 0.0);
    let center = ris + Vector3::new(-params.ris_user_distance, 0.0, 0.0);
    let mut drop_user = || {
        // area-uniform in the disk
        let r = params.user_radius * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..TAU);
        center + Vector3::new(r * phi.cos(), r * phi.sin(), 0.0)
    };
    let users = [drop_user(), drop_user()];

    Ok(Scenario {
        bs_position: bs,
        ris_position: ris,
        user_positions: users,
        wavelength: params.wavelength,
        antennas: params.antennas,
        elements: params.elements,
        bs_spacing: params.wavelength / 2.0,
        ris_spacing: params.wavelength / 8.0,
        ris_grid: params.ris_grid,
    })
}

/// Isotropic-scattering correlation over the RIS elements, `sinc(2 d / lambda)`.
pub fn spatial_correlation(scenario: &Scenario) -> CMatrix {
    let pos = scenario.ris_element_positions();
    sinc_correlation(&pos, scenario.wavelength)
}

/// `R[m, n] = sinc(2 |p_m - p_n| / lambda)` over arbitrary element positions.
pub fn sinc_correlation(positions: &[Point3<f64>], wavelength: f64) -> CMatrix {
    let n = positions.len();
    CMatrix::from_fn(n, n, |i, j| {
        let d = (positions[i] - positions[j]).norm();
        Complex64::new(sinc(2.0 * d / wavelength), 0.0)
    })
}

/// Local-scattering ULA correlation with a Gaussian angular spread around
/// `angle` (radians from broadside). `spacing` is in wavelengths.
pub fn ula_correlation(antennas: usize, spacing: f64, angle: f64, angular_std: f64) -> CMatrix {
    CMatrix::from_fn(antennas, antennas, |m, n| {
        let delta = m as f64 - n as f64;
        let phase = TAU * spacing * delta * angle.sin();
        let spread = TAU * spacing * delta * angle.cos() * angular_std;
        Complex64::from_polar((-spread * spread / 2.0).exp(), phase)
    })
}

/// Distance-based attenuation with a per-link-class exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathlossParams {
    /// Linear channel gain at 1 m.
    pub reference_gain: f64,
    pub exponent_direct: f64,
    /// Applied to each of the two reflected hops.
    pub exponent_reflected: f64,
    pub direct_los: bool,
    pub reflected_los: bool,
    /// Standard deviation of the angular spread seen by the BS array, radians.
    pub bs_angular_std: f64,
}

impl Default for PathlossParams {
    fn default() -> Self {
        Self {
            reference_gain: 1e-3,
            exponent_direct: 3.5,
            exponent_reflected: 2.2,
            direct_los: false,
            reflected_los: true,
            bs_angular_std: 10f64.to_radians(),
        }
    }
}

impl PathlossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_gain > 0.0) {
            return Err(Error::Config("pathloss reference gain must be positive".into()));
        }
        if !self.direct_los && self.exponent_direct < 2.0 {
            return Err(Error::Config("NLoS direct exponent must be at least 2".into()));
        }
        if !self.reflected_los && self.exponent_reflected < 2.0 {
            return Err(Error::Config("NLoS reflected exponent must be at least 2".into()));
        }
        if self.exponent_direct <= 0.0 || self.exponent_reflected <= 0.0 {
            return Err(Error::Config("pathloss exponents must be positive".into()));
        }
        Ok(())
    }

    pub fn direct_gain(&self, distance: f64) -> f64 {
        self.reference_gain * distance.powf(-self.exponent_direct)
    }

    pub fn reflected_gain(&self, distance: f64) -> f64 {
        self.reference_gain * distance.powf(-self.exponent_reflected)
    }

    /// Large-scale fading of user `k`: direct gain plus the product gain of
    /// its reflected path.
    pub fn large_scale_fading(&self, scenario: &Scenario, k: usize) -> f64 {
        self.direct_gain(scenario.bs_user_distance(k))
            + self.reflected_gain(scenario.bs_ris_distance())
                * self.reflected_gain(scenario.ris_user_distance(k))
    }
}

/// True channels of one coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// Block index, 1 or 2.
    pub t: usize,
    /// Direct BS-user channels, length L.
    pub direct: [CVector; NUM_USERS],
    /// BS-RIS channel, L x N.
    pub bs_ris: CMatrix,
    /// RIS-user channels, length N.
    pub ris_user: [CVector; NUM_USERS],
    /// Cascaded channels `bs_ris * diag(ris_user[k])`, L x N.
    pub cascaded: [CMatrix; NUM_USERS],
}

impl ChannelSet {
    /// Assembles a channel set, forming the cascaded channels from the parts.
    pub fn from_parts(t: usize, direct: [CVector; NUM_USERS], bs_ris: CMatrix, ris_user: [CVector; NUM_USERS]) -> Self {
        let cascaded = [cascade(&bs_ris, &ris_user[0]), cascade(&bs_ris, &ris_user[1])];
        Self {
            t,
            direct,
            bs_ris,
            ris_user,
            cascaded,
        }
    }

    pub fn antennas(&self) -> usize {
        self.direct[0].len()
    }

    pub fn elements(&self) -> usize {
        self.bs_ris.ncols()
    }

    /// `h_k + H_k theta`.
    pub fn effective(&self, k: usize, theta: &CVector) -> CVector {
        &self.direct[k] + &self.cascaded[k] * theta
    }
}

/// `U diag(q)`.
pub fn cascade(bs_ris: &CMatrix, ris_user: &CVector) -> CMatrix {
    let mut h = bs_ris.clone();
    for (mut col, q) in h.column_iter_mut().zip(ris_user.iter()) {
        col *= *q;
    }
    h
}

fn planar_response(origin: &Point3<f64>, elements: &[Point3<f64>], direction: &Vector3<f64>, k: f64, sign: f64) -> CVector {
    CVector::from_iterator(
        elements.len(),
        elements
            .iter()
            .map(|p| Complex64::from_polar(1.0, sign * k * (p - origin).dot(direction))),
    )
}

/// Draws the true channels of block `t`.
pub fn sample_channels<R: Rng + ?Sized>(
    scenario: &Scenario,
    pathloss: &PathlossParams,
    t: usize,
    rng: &mut R,
) -> Result<ChannelSet> {
    if !(1..=2).contains(&t) {
        return Err(Error::invalid(format!("block index must be 1 or 2, got {t}")));
    }
    let k0 = scenario.wavenumber();
    let bs_elems = scenario.bs_element_positions();
    let ris_elems = scenario.ris_element_positions();
    let spacing = scenario.bs_spacing / scenario.wavelength;

    let direct_for = |k: usize, rng: &mut R| -> CVector {
        let d = scenario.bs_user_distance(k);
        let amp = pathloss.direct_gain(d).sqrt();
        if pathloss.direct_los {
            let dir = (scenario.user_positions[k] - scenario.bs_position).normalize();
            let phase = Complex64::from_polar(1.0, -k0 * d);
            planar_response(&scenario.bs_position, &bs_elems, &dir, k0, 1.0) * (phase * amp)
        } else {
            let r = ula_correlation(
                scenario.antennas,
                spacing,
                scenario.bs_user_angle(k),
                pathloss.bs_angular_std,
            );
            let z = complex_gaussian_vector(rng, scenario.antennas, 1.0);
            hermitian_sqrt(&r) * z * Complex64::new(amp, 0.0)
        }
    };
    let direct = [direct_for(0, rng), direct_for(1, rng)];

    let d_br = scenario.bs_ris_distance();
    let amp_br = pathloss.reflected_gain(d_br).sqrt();
    let (bs_ris, ris_user) = if pathloss.reflected_los {
        let u = (scenario.ris_position - scenario.bs_position).normalize();
        let a_bs = planar_response(&scenario.bs_position, &bs_elems, &u, k0, 1.0);
        let a_ris = planar_response(&scenario.ris_position, &ris_elems, &u, k0, -1.0);
        let phase = Complex64::from_polar(amp_br, -k0 * d_br);
        let bs_ris = &a_bs * a_ris.transpose() * phase;
        let q = |k: usize| {
            let v = (scenario.user_positions[k] - scenario.ris_position).normalize();
            let d = scenario.ris_user_distance(k);
            let phase = Complex64::from_polar(pathloss.reflected_gain(d).sqrt(), -k0 * d);
            planar_response(&scenario.ris_position, &ris_elems, &v, k0, 1.0) * phase
        };
        (bs_ris, [q(0), q(1)])
    } else {
        let r_ris = hermitian_sqrt(&spatial_correlation(scenario));
        let r_bs = hermitian_sqrt(&ula_correlation(scenario.antennas, spacing, 0.0, pathloss.bs_angular_std));
        let z = complex_gaussian_matrix(rng, scenario.antennas, scenario.elements, 1.0);
        let bs_ris = r_bs * z * r_ris.transpose() * Complex64::new(amp_br, 0.0);
        let mut q = |k: usize| {
            let amp = pathloss.reflected_gain(scenario.ris_user_distance(k)).sqrt();
            &r_ris * complex_gaussian_vector(rng, scenario.elements, 1.0) * Complex64::new(amp, 0.0)
        };
        let q0 = q(0);
        let q1 = q(1);
        (bs_ris, [q0, q1])
    };

    Ok(ChannelSet::from_parts(t, direct, bs_ris, ris_user))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::linalg::{max_abs_diff, min_hermitian_eigenvalue};

    fn default_scenario(seed: u64) -> Scenario {
        build_scenario(&ScenarioParams::new(8, 16), seed).unwrap()
    }

    #[test]
    fn default_geometry() {
        let s = default_scenario(7);
        assert!((s.bs_ris_distance() - 400.0).abs() < 1e-12);
        let center = s.ris_position + Vector3::new(-100.0, 0.0, 0.0);
        for u in &s.user_positions {
            assert!((u - center).norm() <= 50.0 + 1e-12);
        }
    }

    #[test]
    fn smallest_grid_and_determinism() {
        let mut p = ScenarioParams::new(2, 4);
        p.ris_grid = (2, 2);
        let a = build_scenario(&p, 11).unwrap();
        let b = build_scenario(&p, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ris_element_positions().len(), 4);
        let c = build_scenario(&p, 12).unwrap();
        assert_ne!(a.user_positions, c.user_positions);
    }

    #[test]
    fn inconsistent_grid_rejected() {
        let mut p = ScenarioParams::new(2, 6);
        p.ris_grid = (2, 2);
        assert!(matches!(build_scenario(&p, 1), Err(Error::Config(_))));
        let p = ScenarioParams::new(0, 4);
        assert!(build_scenario(&p, 1).is_err());
    }

    #[test]
    fn square_grid_factors() {
        assert_eq!(square_grid(64), (8, 8));
        assert_eq!(square_grid(25), (5, 5));
        assert_eq!(square_grid(8), (2, 4));
        assert_eq!(square_grid(7), (1, 7));
        assert_eq!(square_grid(1), (1, 1));
    }

    #[test]
    fn correlation_single_and_coincident() {
        let p = Point3::new(1.0, 2.0, 3.0);
        let r1 = sinc_correlation(&[p], 0.1);
        assert_eq!(r1[(0, 0)], Complex64::new(1.0, 0.0));
        let r2 = sinc_correlation(&[p, p], 0.1);
        assert!(r2.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn correlation_eighth_wavelength() {
        let lambda = 0.1;
        let a = Point3::origin();
        let b = Point3::new(0.0, lambda / 8.0, 0.0);
        let r = sinc_correlation(&[a, b], lambda);
        // oracle: sin(pi/4) / (pi/4)
        let expected = (PI / 4.0).sin() / (PI / 4.0);
        assert!((r[(0, 1)].re - expected).abs() < 1e-14);
        assert!((expected - 0.9003).abs() < 1e-4);
    }

    #[test]
    fn correlation_is_hermitian_psd_unit_diagonal() {
        let s = default_scenario(3);
        let r = spatial_correlation(&s);
        assert!(max_abs_diff(&r, &r.adjoint()) < 1e-15);
        assert!(r.diagonal().iter().all(|d| (d.re - 1.0).abs() < 1e-15));
        assert!(min_hermitian_eigenvalue(&r) >= -1e-10);

        let u = ula_correlation(8, 0.5, 0.3, 10f64.to_radians());
        assert!(max_abs_diff(&u, &u.adjoint()) < 1e-15);
        assert!(u.diagonal().iter().all(|d| (d.re - 1.0).abs() < 1e-15));
        assert!(min_hermitian_eigenvalue(&u) >= -1e-10);
    }

    #[test]
    fn cascade_identity_exact() {
        let s = default_scenario(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [1, 2] {
            let ch = sample_channels(&s, &PathlossParams::default(), t, &mut rng).unwrap();
            for k in 0..NUM_USERS {
                for l in 0..s.antennas {
                    for n in 0..s.elements {
                        assert_eq!(ch.cascaded[k][(l, n)], ch.bs_ris[(l, n)] * ch.ris_user[k][n]);
                    }
                }
            }
            assert!(ch.direct.iter().all(|h| h.iter().all(|z| z.re.is_finite() && z.im.is_finite())));
            assert!(crate::linalg::energy(&ch.direct[0]) > 0.0);
        }
    }

    #[test]
    fn scalar_cascade() {
        let u = CMatrix::from_element(1, 1, Complex64::new(2.0, 0.0));
        let q = CVector::from_element(1, Complex64::new(0.5, 0.0));
        let h = CVector::from_element(1, Complex64::new(1.0, 0.0));
        let ch = ChannelSet::from_parts(1, [h.clone(), h], u, [q.clone(), q]);
        assert_eq!(ch.cascaded[0][(0, 0)], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn nlos_reflected_links_also_satisfy_cascade() {
        let s = default_scenario(9);
        let pl = PathlossParams {
            reflected_los: false,
            ..PathlossParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ch = sample_channels(&s, &pl, 1, &mut rng).unwrap();
        assert!(max_abs_diff(&ch.cascaded[1], &cascade(&ch.bs_ris, &ch.ris_user[1])) == 0.0);
    }

    #[test]
    fn block_index_checked() {
        let s = default_scenario(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_channels(&s, &PathlossParams::default(), 3, &mut rng).is_err());
    }
}
