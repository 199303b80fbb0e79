//! Pilot budget accounting and DFT reflection-pattern least-squares estimation.
//!
//! Uplink pilots are orthogonal in time. While a user whose cascaded channel
//! is wanted transmits, the RIS sweeps the `N + 1` columns of the scaled DFT
//! matrix (first row = direct path, remaining rows = unit-modulus element
//! states) and the BS solves a least-squares problem per antenna. A user whose
//! cascaded channel is skipped sends a single pilot with the RIS in its
//! absorbing state, which yields the direct channel only. With `K = 2` this
//! reproduces `tau_all = (N + 1) K` and `tau_half = (N / 2 + 1) K` exactly.

use num_complex::Complex64;
use rand::Rng;

use crate::channel_model::{ChannelSet, NUM_USERS};
use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian_matrix, CMatrix, CVector};
use crate::rates::Groups;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PilotMode {
    /// Direct and cascaded channels of every user.
    Full,
    /// Cascaded channel of the `G^P` user only, alternating across blocks.
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PilotBudget {
    pub mode: PilotMode,
    pub tau: usize,
    pub elements: usize,
    pub users: usize,
}

pub fn pilot_budget(elements: usize, users: usize, mode: PilotMode) -> Result<PilotBudget> {
    if elements == 0 {
        return Err(Error::invalid("pilot budget needs at least one RIS element"));
    }
    if users == 0 {
        return Err(Error::invalid("pilot budget needs at least one user"));
    }
    let tau = match mode {
        PilotMode::Full => (elements + 1) * users,
        PilotMode::Half => {
            // (N/2 + 1) K must be a whole number of symbols.
            if (elements * users) % 2 != 0 {
                return Err(Error::invalid(format!(
                    "half pilot budget (N/2 + 1) K is fractional for N = {elements}, K = {users}"
                )));
            }
            elements * users / 2 + users
        }
    };
    Ok(PilotBudget {
        mode,
        tau,
        elements,
        users,
    })
}

/// First `slots` columns of the `(N + 1)`-point unitary DFT matrix.
///
/// Row 0 multiplies the direct path; rows `1..=N` are the RIS states (after
/// scaling by `sqrt(N + 1)` they have unit modulus).
pub fn reflection_patterns(elements: usize, slots: usize) -> Result<CMatrix> {
    let size = elements + 1;
    if slots == 0 {
        return Err(Error::invalid("at least one pilot slot is required"));
    }
    if slots > size {
        return Err(Error::invalid(format!(
            "{slots} slots exceed the {size} distinct DFT reflection patterns"
        )));
    }
    let scale = 1.0 / (size as f64).sqrt();
    Ok(CMatrix::from_fn(size, slots, |m, s| {
        let phase = -std::f64::consts::TAU * (m * s) as f64 / size as f64;
        Complex64::from_polar(scale, phase)
    }))
}

/// CSI available to the BS in one block.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedCsi {
    pub t: usize,
    pub direct: [CVector; NUM_USERS],
    /// `None` for the user whose cascaded channel was not estimated.
    pub cascaded: [Option<CMatrix>; NUM_USERS],
    pub groups: Groups,
    pub tau_used: usize,
    pub noise_var_bs: f64,
    pub pilot_power: f64,
}

impl EstimatedCsi {
    /// Noise-free CSI with the knowledge mask of `mode`.
    pub fn perfect(channels: &ChannelSet, mode: PilotMode, groups: Groups) -> Self {
        let n = channels.elements();
        let tau = match mode {
            PilotMode::Full => (n + 1) * NUM_USERS,
            PilotMode::Half => n + NUM_USERS,
        };
        let cascaded = std::array::from_fn(|k| {
            (mode == PilotMode::Full || k == groups.known).then(|| channels.cascaded[k].clone())
        });
        Self {
            t: channels.t,
            direct: channels.direct.clone(),
            cascaded,
            groups,
            tau_used: tau,
            noise_var_bs: 0.0,
            pilot_power: f64::INFINITY,
        }
    }

    pub fn antennas(&self) -> usize {
        self.direct[0].len()
    }

    pub fn elements(&self) -> usize {
        self.cascaded
            .iter()
            .flatten()
            .map(|h| h.ncols())
            .next()
            .unwrap_or(0)
    }

    /// Estimated effective channel of user `k`; the reflected part is missing
    /// when the user's cascaded channel is unknown.
    pub fn effective(&self, k: usize, theta: &CVector) -> CVector {
        match &self.cascaded[k] {
            Some(h) if h.ncols() > 0 => &self.direct[k] + h * theta,
            _ => self.direct[k].clone(),
        }
    }
}

/// Free-function form of [`EstimatedCsi::effective`].
pub fn effective_estimate(csi: &EstimatedCsi, theta: &CVector, k: usize) -> CVector {
    csi.effective(k, theta)
}

fn sweep_user<R: Rng + ?Sized>(
    direct: &CVector,
    cascaded: &CMatrix,
    pilot_power: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<(CVector, CMatrix)> {
    let l = direct.len();
    let n = cascaded.ncols();
    let size = n + 1;
    let patterns = reflection_patterns(n, size)? * Complex64::new((size as f64).sqrt(), 0.0);

    // coefficients [h, H] (L x (N+1)); observations Y = sqrt(P) C Phi + Z
    let mut coeffs = CMatrix::zeros(l, size);
    coeffs.set_column(0, direct);
    coeffs.view_mut((0, 1), (l, n)).copy_from(cascaded);
    let amp = Complex64::new(pilot_power.sqrt(), 0.0);
    let mut y = &coeffs * &patterns * amp;
    if noise_var > 0.0 {
        y += complex_gaussian_matrix(rng, l, size, noise_var);
    }

    let gram = &patterns * patterns.adjoint();
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Solver("singular reflection-pattern matrix".into()))?;
    let est = y * patterns.adjoint() * gram_inv / amp;
    let h_hat = est.column(0).into_owned();
    let big_h = est.view((0, 1), (l, n)).into_owned();
    Ok((h_hat, big_h))
}

fn direct_only<R: Rng + ?Sized>(direct: &CVector, pilot_power: f64, noise_var: f64, rng: &mut R) -> CVector {
    let amp = Complex64::new(pilot_power.sqrt(), 0.0);
    let mut y = direct * amp;
    if noise_var > 0.0 {
        y += complex_gaussian_matrix(rng, direct.len(), 1, noise_var).column(0);
    }
    y / amp
}

/// Simulates the uplink pilot phase and returns the LS estimates.
pub fn estimate<R: Rng + ?Sized>(
    channels: &ChannelSet,
    budget: &PilotBudget,
    groups: Groups,
    pilot_power: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<EstimatedCsi> {
    if budget.users != NUM_USERS {
        return Err(Error::invalid("estimator supports exactly two users"));
    }
    if budget.elements != channels.elements() {
        return Err(Error::invalid(format!(
            "budget for N = {} applied to channels with N = {}",
            budget.elements,
            channels.elements()
        )));
    }
    if !(pilot_power > 0.0) || noise_var < 0.0 {
        return Err(Error::invalid("pilot power must be positive and noise variance nonnegative"));
    }
    let mut direct: [CVector; NUM_USERS] = channels.direct.clone();
    let mut cascaded: [Option<CMatrix>; NUM_USERS] = [None, None];
    let mut slots = 0;
    for k in 0..NUM_USERS {
        let wants_cascade = budget.mode == PilotMode::Full || k == groups.known;
        if wants_cascade {
            let (h, big_h) = sweep_user(&channels.direct[k], &channels.cascaded[k], pilot_power, noise_var, rng)?;
            direct[k] = h;
            cascaded[k] = Some(big_h);
            slots += channels.elements() + 1;
        } else {
            direct[k] = direct_only(&channels.direct[k], pilot_power, noise_var, rng);
            slots += 1;
        }
    }
    debug_assert_eq!(slots, budget.tau);
    Ok(EstimatedCsi {
        t: channels.t,
        direct,
        cascaded,
        groups,
        tau_used: slots,
        noise_var_bs: noise_var,
        pilot_power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{build_scenario, sample_channels, PathlossParams, ScenarioParams};
    use crate::linalg::{max_abs_diff, ONE};
    use crate::rates::assign_groups;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channels(n: usize, t: usize) -> ChannelSet {
        let s = build_scenario(&ScenarioParams::new(4, n), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        sample_channels(&s, &PathlossParams::default(), t, &mut rng).unwrap()
    }

    fn rel_err(a: &CMatrix, b: &CMatrix) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn budgets() {
        assert_eq!(pilot_budget(100, 2, PilotMode::Full).unwrap().tau, 202);
        assert_eq!(pilot_budget(100, 2, PilotMode::Half).unwrap().tau, 102);
        assert_eq!(pilot_budget(2, 2, PilotMode::Half).unwrap().tau, 4);
        assert_eq!(pilot_budget(25, 2, PilotMode::Half).unwrap().tau, 27);
        assert!(pilot_budget(3, 1, PilotMode::Half).is_err());
        assert!(pilot_budget(0, 2, PilotMode::Full).is_err());
        for n in 2..200 {
            let full = pilot_budget(n, 2, PilotMode::Full).unwrap().tau;
            let half = pilot_budget(n, 2, PilotMode::Half).unwrap().tau;
            assert!(half < full);
        }
    }

    #[test]
    fn dft_patterns_small() {
        let f = reflection_patterns(1, 2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expected = CMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(s, 0.0),
                Complex64::new(s, 0.0),
                Complex64::new(s, 0.0),
                Complex64::new(-s, 0.0),
            ],
        );
        assert!(max_abs_diff(&f, &expected) < 1e-15);
    }

    #[test]
    fn dft_patterns_unitary() {
        for n in [1usize, 4, 9, 16] {
            let f = reflection_patterns(n, n + 1).unwrap();
            let gram = f.adjoint() * &f;
            assert!(max_abs_diff(&gram, &CMatrix::identity(n + 1, n + 1)) < 1e-12);
        }
    }

    #[test]
    fn dft_patterns_truncated() {
        let f = reflection_patterns(4, 3).unwrap();
        assert_eq!(f.shape(), (5, 3));
        for m in 0..5 {
            for s in 0..3 {
                let expected = Complex64::from_polar(1.0 / 5f64.sqrt(), -std::f64::consts::TAU * (m * s) as f64 / 5.0);
                assert!((f[(m, s)] - expected).norm() < 1e-15);
                assert!((f[(m, s)].norm() - 1.0 / 5f64.sqrt()).abs() < 1e-15);
            }
        }
        assert!(reflection_patterns(4, 6).is_err());
        assert!(reflection_patterns(4, 0).is_err());
    }

    #[test]
    fn noiseless_full_is_exact() {
        let ch = channels(9, 1);
        let budget = pilot_budget(9, 2, PilotMode::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let csi = estimate(&ch, &budget, assign_groups(1), 1.0, 0.0, &mut rng).unwrap();
        for k in 0..2 {
            let h = CMatrix::from_column_slice(4, 1, ch.direct[k].as_slice());
            let hh = CMatrix::from_column_slice(4, 1, csi.direct[k].as_slice());
            assert!(rel_err(&hh, &h) < 1e-9);
            assert!(rel_err(csi.cascaded[k].as_ref().unwrap(), &ch.cascaded[k]) < 1e-9);
        }
        assert_eq!(csi.tau_used, 20);
    }

    #[test]
    fn noiseless_half_skips_unknown_cascade() {
        let ch = channels(8, 2);
        let budget = pilot_budget(8, 2, PilotMode::Half).unwrap();
        let groups = assign_groups(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let csi = estimate(&ch, &budget, groups, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(csi.tau_used, budget.tau);
        assert!(csi.cascaded[groups.unknown].is_none());
        assert!(rel_err(csi.cascaded[groups.known].as_ref().unwrap(), &ch.cascaded[groups.known]) < 1e-9);
        for k in 0..2 {
            assert!((&csi.direct[k] - &ch.direct[k]).norm() / ch.direct[k].norm() < 1e-9);
        }
    }

    #[test]
    fn effective_estimate_cases() {
        let ch = channels(4, 1);
        let groups = assign_groups(1);
        let csi = EstimatedCsi::perfect(&ch, PilotMode::Half, groups);
        let theta = CVector::from_element(4, Complex64::from_polar(1.0, 0.3));
        assert_eq!(effective_estimate(&csi, &theta, groups.unknown), ch.direct[groups.unknown]);

        let one = CVector::from_element(1, ONE);
        let scalar = EstimatedCsi {
            t: 1,
            direct: [one.clone(), one.clone()],
            cascaded: [Some(CMatrix::from_element(1, 1, Complex64::new(2.0, 0.0))), None],
            groups,
            tau_used: 3,
            noise_var_bs: 0.0,
            pilot_power: 1.0,
        };
        let flip = CVector::from_element(1, Complex64::from_polar(1.0, std::f64::consts::PI));
        let g = effective_estimate(&scalar, &flip, 0);
        assert!((g[0] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);

        let zero_casc = EstimatedCsi {
            cascaded: [Some(CMatrix::zeros(1, 1)), None],
            ..scalar
        };
        assert_eq!(effective_estimate(&zero_casc, &CVector::from_element(1, ONE), 0), one);
    }

    #[test]
    fn alternation_across_blocks() {
        let b = pilot_budget(4, 2, PilotMode::Half).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c1 = estimate(&channels(4, 1), &b, assign_groups(1), 1.0, 0.0, &mut rng).unwrap();
        let c2 = estimate(&channels(4, 2), &b, assign_groups(2), 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(c2.groups.known, c1.groups.unknown);
        assert!(c1.cascaded[1].is_none() && c2.cascaded[0].is_none());
    }

    #[test]
    fn mse_halves_when_pilot_power_doubles() {
        let ch = channels(4, 1);
        let budget = pilot_budget(4, 2, PilotMode::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut mse = |p: f64| {
            let mut acc = 0.0;
            for _ in 0..1000 {
                let csi = estimate(&ch, &budget, assign_groups(1), p, 1.0, &mut rng).unwrap();
                acc += (csi.cascaded[0].as_ref().unwrap() - &ch.cascaded[0]).norm_squared();
                acc += (&csi.direct[0] - &ch.direct[0]).norm_squared();
            }
            acc / 1000.0
        };
        let a = mse(1.0);
        let b = mse(2.0);
        assert!((a / b - 2.0).abs() < 0.2, "ratio {}", a / b);
    }
}
