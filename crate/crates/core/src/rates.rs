//! Rate algebra of the ORS scheme and the NOMA baseline.
//!
//! Users are indexed `0` and `1` (user 1 and user 2). In block `t` the user
//! whose cascaded channel is known (`G^P_t`) is user `t`; the other user is in
//! `G^N_t`.

use crate::channel_model::{ChannelSet, NUM_USERS};
use crate::error::{Error, Result};
use crate::estimation::EstimatedCsi;
use crate::linalg::{energy, gain, CVector};
use crate::sca::BlockSolution;

/// Upper clamp on the ORS ratio when the two users have equal large-scale fading.
pub const ALPHA_MAX: f64 = 10.0;

/// Group membership in one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Groups {
    /// User whose cascaded channel is estimated (`G^P`).
    pub known: usize,
    /// User whose cascaded channel is skipped (`G^N`).
    pub unknown: usize,
}

impl Groups {
    pub fn user(&self, role: Role) -> usize {
        match role {
            Role::Known => self.known,
            Role::Unknown => self.unknown,
        }
    }
}

/// `G^P_1 = {1}`, `G^P_2 = {2}`, complements for `G^N`.
pub fn assign_groups(t: usize) -> Groups {
    assert!((1..=2).contains(&t), "block index must be 1 or 2, got {t}");
    let known = t - 1;
    Groups {
        known,
        unknown: 1 - known,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Known,
    Unknown,
}

/// Transmission scheme; decides which streams exist and how they are decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Private streams for both users plus a common stream decoded first by
    /// the `G^P` user; the `G^N` user cancels it using the other block.
    RateSplitting,
    /// Private streams only; the `G^P` user decodes and cancels the `G^N`
    /// user's stream before its own.
    Noma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    PrivateP,
    PrivateN,
    Common,
}

/// One SINR expression: `|g_rx^H w_signal|^2 / (sum |g_rx^H w_i|^2 + noise)`.
#[derive(Debug, Clone, Copy)]
pub struct SinrTerm {
    pub receiver: Role,
    pub signal: Stream,
    pub interference: &'static [Stream],
}

/// A rate bounded by `log2(1 + beta)` for every listed SINR term.
#[derive(Debug, Clone, Copy)]
pub struct RateTerm {
    pub stream: Stream,
    pub sinrs: &'static [usize],
}

const RS_SINRS: [SinrTerm; 3] = [
    SinrTerm {
        receiver: Role::Known,
        signal: Stream::PrivateP,
        interference: &[Stream::PrivateN],
    },
    SinrTerm {
        receiver: Role::Known,
        signal: Stream::Common,
        interference: &[Stream::PrivateP, Stream::PrivateN],
    },
    SinrTerm {
        receiver: Role::Unknown,
        signal: Stream::PrivateN,
        interference: &[Stream::PrivateP],
    },
];

const RS_RATES: [RateTerm; 3] = [
    RateTerm {
        stream: Stream::PrivateP,
        sinrs: &[0],
    },
    RateTerm {
        stream: Stream::PrivateN,
        sinrs: &[2],
    },
    RateTerm {
        stream: Stream::Common,
        sinrs: &[1],
    },
];

const NOMA_SINRS: [SinrTerm; 3] = [
    SinrTerm {
        receiver: Role::Known,
        signal: Stream::PrivateP,
        interference: &[],
    },
    SinrTerm {
        receiver: Role::Unknown,
        signal: Stream::PrivateN,
        interference: &[Stream::PrivateP],
    },
    SinrTerm {
        receiver: Role::Known,
        signal: Stream::PrivateN,
        interference: &[Stream::PrivateP],
    },
];

const NOMA_RATES: [RateTerm; 2] = [
    RateTerm {
        stream: Stream::PrivateP,
        sinrs: &[0],
    },
    RateTerm {
        stream: Stream::PrivateN,
        sinrs: &[1, 2],
    },
];

impl Scheme {
    pub fn streams(&self) -> &'static [Stream] {
        match self {
            Scheme::RateSplitting => &[Stream::PrivateP, Stream::PrivateN, Stream::Common],
            Scheme::Noma => &[Stream::PrivateP, Stream::PrivateN],
        }
    }

    pub fn sinr_terms(&self) -> &'static [SinrTerm] {
        match self {
            Scheme::RateSplitting => &RS_SINRS,
            Scheme::Noma => &NOMA_SINRS,
        }
    }

    pub fn rate_terms(&self) -> &'static [RateTerm] {
        match self {
            Scheme::RateSplitting => &RS_RATES,
            Scheme::Noma => &NOMA_RATES,
        }
    }

    pub fn has_common(&self) -> bool {
        matches!(self, Scheme::RateSplitting)
    }

    pub fn stream_index(&self, stream: Stream) -> Option<usize> {
        self.streams().iter().position(|s| *s == stream)
    }
}

/// Beamformers of one block. `common` is the zero vector under NOMA.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub t: usize,
    /// Private beamformer of the `G^P` user.
    pub private_p: CVector,
    /// Private beamformer of the `G^N` user.
    pub private_n: CVector,
    pub common: CVector,
}

impl BeamformerSet {
    pub fn zeros(t: usize, antennas: usize) -> Self {
        Self {
            t,
            private_p: CVector::zeros(antennas),
            private_n: CVector::zeros(antennas),
            common: CVector::zeros(antennas),
        }
    }

    pub fn stream(&self, s: Stream) -> &CVector {
        match s {
            Stream::PrivateP => &self.private_p,
            Stream::PrivateN => &self.private_n,
            Stream::Common => &self.common,
        }
    }

    pub fn stream_mut(&mut self, s: Stream) -> &mut CVector {
        match s {
            Stream::PrivateP => &mut self.private_p,
            Stream::PrivateN => &mut self.private_n,
            Stream::Common => &mut self.common,
        }
    }

    pub fn total_power(&self) -> f64 {
        energy(&self.private_p) + energy(&self.private_n) + energy(&self.common)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let c = num_complex::Complex64::new(factor, 0.0);
        Self {
            t: self.t,
            private_p: &self.private_p * c,
            private_n: &self.private_n * c,
            common: &self.common * c,
        }
    }
}

/// RIS reflection coefficients of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub theta: CVector,
}

impl PhaseConfig {
    pub fn max_modulus_error(&self) -> f64 {
        self.theta.iter().map(|z| (z.norm() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Linear SINRs of the ORS streams in one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrTriple {
    pub gamma_p: f64,
    pub gamma_c: f64,
    pub gamma_n: f64,
}

fn check_noise(sigma_v2: f64) -> Result<()> {
    if sigma_v2 > 0.0 && sigma_v2.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise power must be positive, got {sigma_v2}")))
    }
}

/// ORS SINRs for effective channels `h_p` (`G^P` user) and `h_n` (`G^N` user).
pub fn compute_sinrs(h_p: &CVector, h_n: &CVector, w: &BeamformerSet, sigma_v2: f64) -> Result<SinrTriple> {
    check_noise(sigma_v2)?;
    let pp = gain(h_p, &w.private_p);
    let pn = gain(h_p, &w.private_n);
    let pc = gain(h_p, &w.common);
    let np = gain(h_n, &w.private_p);
    let nn = gain(h_n, &w.private_n);
    Ok(SinrTriple {
        gamma_p: pp / (pn + sigma_v2),
        gamma_c: pc / (pp + pn + sigma_v2),
        gamma_n: nn / (np + sigma_v2),
    })
}

/// SINRs under NOMA with SIC at the `G^P` user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NomaSinrs {
    /// `G^P` user's own stream after cancelling the `G^N` stream.
    pub gamma_p: f64,
    /// `G^N` stream at the `G^N` user.
    pub gamma_n: f64,
    /// `G^N` stream at the `G^P` user (SIC decodability).
    pub gamma_n_at_p: f64,
}

pub fn compute_noma_sinrs(h_p: &CVector, h_n: &CVector, w: &BeamformerSet, sigma_v2: f64) -> Result<NomaSinrs> {
    check_noise(sigma_v2)?;
    Ok(NomaSinrs {
        gamma_p: gain(h_p, &w.private_p) / sigma_v2,
        gamma_n: gain(h_n, &w.private_n) / (gain(h_n, &w.private_p) + sigma_v2),
        gamma_n_at_p: gain(h_p, &w.private_n) / (gain(h_p, &w.private_p) + sigma_v2),
    })
}

/// Evaluates every SINR term of `scheme`, in [`Scheme::sinr_terms`] order.
pub fn scheme_sinrs(scheme: Scheme, h_p: &CVector, h_n: &CVector, w: &BeamformerSet, noise: f64) -> Vec<f64> {
    scheme
        .sinr_terms()
        .iter()
        .map(|term| {
            let g = match term.receiver {
                Role::Known => h_p,
                Role::Unknown => h_n,
            };
            let interference: f64 = term.interference.iter().map(|s| gain(g, w.stream(*s))).sum();
            gain(g, w.stream(term.signal)) / (interference + noise)
        })
        .collect()
}

/// `B (1 - tau / T_coh)`.
pub fn downlink_bandwidth(bandwidth: f64, tau: usize, coherence: usize) -> Result<f64> {
    if tau >= coherence {
        return Err(Error::invalid(format!(
            "pilot length {tau} leaves no downlink time in a block of {coherence} symbols"
        )));
    }
    Ok(bandwidth * (1.0 - tau as f64 / coherence as f64))
}

/// Achievable rate of one stream in bit/s.
pub fn rate(sinr: f64, b_dl: f64) -> f64 {
    b_dl * (1.0 + sinr).log2()
}

/// `(R_P, R_c candidate, R_N)` met with equality.
pub fn achievable_rates(sinrs: &SinrTriple, b_dl: f64) -> Result<(f64, f64, f64)> {
    if !(b_dl > 0.0) {
        return Err(Error::invalid("downlink bandwidth must be positive"));
    }
    Ok((
        rate(sinrs.gamma_p, b_dl),
        rate(sinrs.gamma_c, b_dl),
        rate(sinrs.gamma_n, b_dl),
    ))
}

/// Per-block rate components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockRates {
    pub private_p: f64,
    pub private_n: f64,
    pub common_candidate: f64,
    pub b_dl: f64,
    pub tau: usize,
}

/// Rates over both blocks and the resulting net rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub blocks: [BlockRates; 2],
    /// `min_t R^c_t`, shared by both users.
    pub common: f64,
    pub net: f64,
}

impl RateReport {
    /// `R_t = R_P + R_N + R_c / 2`.
    pub fn block_total(&self, t: usize) -> f64 {
        let b = &self.blocks[t - 1];
        b.private_p + b.private_n + 0.5 * self.common
    }
}

/// `R_net = 1/2 sum_t (R_P + R_N + R_c / 2)` with `R_c = min_t R^c_t`.
pub fn net_rate(blocks: [BlockRates; 2]) -> RateReport {
    let common = blocks[0].common_candidate.min(blocks[1].common_candidate);
    let net = 0.5
        * blocks
            .iter()
            .map(|b| b.private_p + b.private_n + 0.5 * common)
            .sum::<f64>();
    RateReport { blocks, common, net }
}

/// ORS ratio from the users' large-scale fading, clamped to [`ALPHA_MAX`].
pub fn ors_ratio(lsf_1: f64, lsf_2: f64) -> Result<f64> {
    ors_ratio_clamped(lsf_1, lsf_2, ALPHA_MAX)
}

pub fn ors_ratio_clamped(lsf_1: f64, lsf_2: f64, alpha_max: f64) -> Result<f64> {
    if !(lsf_1 > 0.0 && lsf_2 > 0.0) {
        return Err(Error::invalid(format!(
            "large-scale fading values must be positive, got {lsf_1} and {lsf_2}"
        )));
    }
    let gamma = (lsf_1 / lsf_2).max(lsf_2 / lsf_1);
    let raw = 1.0 / ((1.0 + gamma) / (1.0 + 1.0 / gamma)).log2();
    Ok(if raw.is_finite() && raw >= 0.0 {
        raw.min(alpha_max)
    } else {
        alpha_max
    })
}

/// Rates of one block for effective channels `(g_p, g_n)` of the `G^P`/`G^N` users.
pub fn block_rates(
    scheme: Scheme,
    g_p: &CVector,
    g_n: &CVector,
    w: &BeamformerSet,
    sigma_v2: f64,
    b_dl: f64,
    tau: usize,
) -> Result<BlockRates> {
    check_noise(sigma_v2)?;
    let out = match scheme {
        Scheme::RateSplitting => {
            let s = compute_sinrs(g_p, g_n, w, sigma_v2)?;
            let (p, c, n) = achievable_rates(&s, b_dl)?;
            BlockRates {
                private_p: p,
                private_n: n,
                common_candidate: c,
                b_dl,
                tau,
            }
        }
        Scheme::Noma => {
            let s = compute_noma_sinrs(g_p, g_n, w, sigma_v2)?;
            BlockRates {
                private_p: rate(s.gamma_p, b_dl),
                private_n: rate(s.gamma_n.min(s.gamma_n_at_p), b_dl),
                common_candidate: 0.0,
                b_dl,
                tau,
            }
        }
    };
    Ok(out)
}

/// Net rate over both blocks on the true channels `h + H theta`, including
/// every reflected channel the optimizer did not know.
pub fn evaluate_true(
    solutions: [&BlockSolution; 2],
    channels: [&ChannelSet; 2],
    sigma_v2: f64,
    b_dl: [f64; 2],
) -> Result<RateReport> {
    let mut blocks = [BlockRates::default(); 2];
    for i in 0..2 {
        let sol = solutions[i];
        let theta = &sol.theta_star.theta;
        let g = |k: usize| channels[i].effective(k, theta);
        blocks[i] = block_rates(
            sol.scheme,
            &g(sol.groups.known),
            &g(sol.groups.unknown),
            &sol.w_star,
            sigma_v2,
            b_dl[i],
            sol.tau,
        )?;
    }
    Ok(net_rate(blocks))
}

/// Same as [`evaluate_true`] but on the estimated effective channels the
/// optimizer worked with.
pub fn evaluate_estimated(
    solutions: [&BlockSolution; 2],
    csi: [&EstimatedCsi; 2],
    sigma_v2: f64,
    b_dl: [f64; 2],
) -> Result<RateReport> {
    let mut blocks = [BlockRates::default(); 2];
    for i in 0..2 {
        let sol = solutions[i];
        let theta = &sol.theta_star.theta;
        let g = |k: usize| csi[i].effective(k, theta);
        blocks[i] = block_rates(
            sol.scheme,
            &g(sol.groups.known),
            &g(sol.groups.unknown),
            &sol.w_star,
            sigma_v2,
            b_dl[i],
            sol.tau,
        )?;
    }
    Ok(net_rate(blocks))
}

const _: () = assert!(NUM_USERS == 2);
