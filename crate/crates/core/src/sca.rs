//! Alternating successive convex approximation over beamformers and RIS phases.
//!
//! Each block is solved by alternating a beamforming subproblem (phases fixed)
//! and a phase subproblem (beamformers fixed). SINR constraints are replaced by
//! first-order lower bounds of `|signal|^2 / beta` around the current point and
//! rates are kept exact through `xi <= log2(1 + beta)` cone constraints.
//!
//! Internally every quantity is normalized: channels are scaled by
//! `sqrt(P_Tr / sigma_v2)` so that the noise power is one, beamformers by
//! `1 / sqrt(P_Tr)` so that the power budget is one, and rates are per Hz of
//! downlink bandwidth. Public results are converted back to watts and bit/s.

use std::fmt;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;

use crate::conic::{AffineExpr, ComplexAffine, ConicProgram, Constraint};
use crate::error::{Error, Result};
use crate::estimation::EstimatedCsi;
use crate::linalg::{energy, random_phases, CMatrix, CVector};
use crate::rates::{scheme_sinrs, BeamformerSet, Groups, PhaseConfig, Role, Scheme, Stream};

/// SINR expansion points below this are treated as a switched-off stream.
const BETA_FLOOR: f64 = 1e-10;
/// Relative floor on the per-iteration improvement used as stopping rule.
const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerParams {
    /// Transmit power budget `P_Tr` in watts.
    pub power: f64,
    /// Receiver noise power `sigma_v2` in watts.
    pub noise_var: f64,
    /// Downlink bandwidth of the block in Hz.
    pub b_dl: f64,
    /// ORS ratio enforced in block 1 (`alpha * xi_P <= xi_c`); ignored by NOMA.
    pub alpha: f64,
    /// Unit-modulus penalty weight in bit/s.
    pub kappa: f64,
    /// Stopping threshold on the objective increase, in bit/s.
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("power", self.power),
            ("noise_var", self.noise_var),
            ("b_dl", self.b_dl),
            ("kappa", self.kappa),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Slack rates (bit/s) and SINRs at a solution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlackState {
    pub xi_p: f64,
    pub xi_c: f64,
    pub xi_n: f64,
    pub beta_p: f64,
    pub beta_c: f64,
    pub beta_n: f64,
    /// NOMA only: SINR of the `G^N` stream at the `G^P` receiver.
    pub beta_sic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Beamforming,
    PhaseShift,
    Polish,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Beamforming => "beamforming",
            Phase::PhaseShift => "phase",
            Phase::Polish => "polish",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub phase: Phase,
    /// Slack objective in bit/s (penalty excluded).
    pub objective: f64,
    /// Transmit power in watts.
    pub power_used: f64,
    /// Largest violation of the original constraints at this iterate, in
    /// normalized units (power fraction, bit/s/Hz, relative SINR).
    pub max_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationCap,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolution {
    pub t: usize,
    pub scheme: Scheme,
    pub groups: Groups,
    /// Pilot symbols spent in this block.
    pub tau: usize,
    pub b_dl: f64,
    /// Beamformers in units of sqrt(W).
    pub w_star: BeamformerSet,
    pub theta_star: PhaseConfig,
    pub slack_star: SlackState,
    /// Final slack objective in bit/s.
    pub objective: f64,
    /// Slack objective after initialization and after every full iteration.
    pub objective_trace: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Non-fatal fallbacks taken while solving.
    pub flags: Vec<String>,
}

/// Normalized problem data for one block.
#[derive(Debug, Clone)]
pub struct BlockContext {
    pub scheme: Scheme,
    pub t: usize,
    pub groups: Groups,
    pub antennas: usize,
    pub elements: usize,
    direct: [CVector; 2],
    cascaded: [Option<CMatrix>; 2],
    weights: Vec<f64>,
    alpha: f64,
    carry: Option<f64>,
    kappa: f64,
    epsilon: f64,
    power: f64,
    b_dl: f64,
    tau: usize,
    max_iterations: usize,
}

fn role_index(role: Role) -> usize {
    match role {
        Role::Known => 0,
        Role::Unknown => 1,
    }
}

impl BlockContext {
    /// `carry_common` is block 1's common slack rate in bit/s; required for
    /// rate splitting in block 2.
    pub fn new(scheme: Scheme, csi: &EstimatedCsi, params: &OptimizerParams, carry_common: Option<f64>) -> Result<Self> {
        params.validate()?;
        let t = csi.t;
        if !(1..=2).contains(&t) {
            return Err(Error::invalid(format!("block index must be 1 or 2, got {t}")));
        }
        let carry = match (scheme, t, carry_common) {
            (Scheme::RateSplitting, 2, None) => {
                return Err(Error::invalid("block 2 requires the common rate carried from block 1"))
            }
            (Scheme::RateSplitting, 2, Some(c)) if !(c >= 0.0 && c.is_finite()) => {
                return Err(Error::invalid(format!("carried common rate must be nonnegative, got {c}")))
            }
            (Scheme::RateSplitting, 2, Some(c)) => Some(c / params.b_dl),
            _ => None,
        };
        let scale = Complex64::new((params.power / params.noise_var).sqrt(), 0.0);
        let groups = csi.groups;
        let users = [groups.known, groups.unknown];
        let direct = users.map(|k| &csi.direct[k] * scale);
        let cascaded = users.map(|k| csi.cascaded[k].as_ref().map(|h| h * scale));
        let weights = scheme
            .rate_terms()
            .iter()
            .map(|r| match r.stream {
                Stream::Common => {
                    if t == 1 {
                        0.5
                    } else {
                        0.0
                    }
                }
                _ => 1.0,
            })
            .collect();
        Ok(Self {
            scheme,
            t,
            groups,
            antennas: csi.antennas(),
            elements: csi.elements(),
            direct,
            cascaded,
            weights,
            alpha: if scheme == Scheme::RateSplitting && t == 1 {
                params.alpha
            } else {
                0.0
            },
            carry,
            kappa: params.kappa / params.b_dl,
            epsilon: params.epsilon / params.b_dl,
            power: params.power,
            b_dl: params.b_dl,
            tau: csi.tau_used,
            max_iterations: params.max_iterations,
        })
    }

    /// Normalized effective channel of the receiver with `role`.
    pub fn effective(&self, role: Role, theta: &CVector) -> CVector {
        let i = role_index(role);
        match &self.cascaded[i] {
            Some(h) if theta.len() > 0 => &self.direct[i] + h * theta,
            _ => self.direct[i].clone(),
        }
    }

    fn num_sinrs(&self) -> usize {
        self.scheme.sinr_terms().len()
    }

    fn num_rates(&self) -> usize {
        self.scheme.rate_terms().len()
    }

    /// Exact SINRs at a normalized point.
    pub fn sinrs(&self, w: &BeamformerSet, theta: &CVector) -> Vec<f64> {
        let gp = self.effective(Role::Known, theta);
        let gn = self.effective(Role::Unknown, theta);
        scheme_sinrs(self.scheme, &gp, &gn, w, 1.0)
    }

    fn rates_from_sinrs(&self, beta: &[f64]) -> Vec<f64> {
        self.scheme
            .rate_terms()
            .iter()
            .map(|r| r.sinrs.iter().map(|j| (1.0 + beta[*j]).log2()).fold(f64::INFINITY, f64::min))
            .collect()
    }

    /// Weighted slack objective in bit/s/Hz.
    pub fn objective(&self, xi: &[f64]) -> f64 {
        self.weights.iter().zip(xi).map(|(a, b)| a * b).sum()
    }

    fn rate_index(&self, stream: Stream) -> Option<usize> {
        self.scheme.rate_terms().iter().position(|r| r.stream == stream)
    }

    fn add_coupling(&self, prog: &mut ConicProgram, xi_off: usize) {
        if self.scheme != Scheme::RateSplitting {
            return;
        }
        let p = xi_off + self.rate_index(Stream::PrivateP).unwrap();
        let c = xi_off + self.rate_index(Stream::Common).unwrap();
        if self.t == 1 && self.alpha > 0.0 {
            let mut e = AffineExpr::term(p, self.alpha);
            e.push(c, -1.0);
            prog.push(Constraint::NonPositive(e));
        }
        if let Some(carry) = self.carry {
            prog.push(Constraint::NonPositive(AffineExpr::term(c, -1.0).offset(carry)));
        }
    }

    fn coupling_violation(&self, xi: &[f64]) -> f64 {
        if self.scheme != Scheme::RateSplitting {
            return 0.0;
        }
        let p = xi[self.rate_index(Stream::PrivateP).unwrap()];
        let c = xi[self.rate_index(Stream::Common).unwrap()];
        let mut v: f64 = 0.0;
        if self.t == 1 {
            v = v.max(self.alpha * p - c);
        }
        if let Some(carry) = self.carry {
            v = v.max(carry - c);
        }
        v.max(0.0)
    }
}

/// First-order lower bound of `|h^H w|^2 / beta` around `(w_tilde, beta_tilde)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorBound {
    pub h: CVector,
    /// `h^H w_tilde`.
    pub signal: Complex64,
    pub beta_tilde: f64,
}

impl TaylorBound {
    /// `f(w, beta) = 2 Re{w~^H h h^H w} / beta~ - |h^H w~|^2 beta / beta~^2`.
    pub fn eval(&self, w: &CVector, beta: f64) -> f64 {
        let s = self.h.dotc(w);
        2.0 * (self.signal.conj() * s).re / self.beta_tilde - self.signal.norm_sqr() * beta / self.beta_tilde.powi(2)
    }
}

pub fn taylor_signal_bound(h: &CVector, w_tilde: &CVector, beta_tilde: f64) -> Result<TaylorBound> {
    if !(beta_tilde > 0.0 && beta_tilde.is_finite()) {
        return Err(Error::invalid(format!("expansion SINR must be positive, got {beta_tilde}")));
    }
    if h.len() != w_tilde.len() {
        return Err(Error::invalid("channel and beamformer lengths differ"));
    }
    Ok(TaylorBound {
        h: h.clone(),
        signal: h.dotc(w_tilde),
        beta_tilde,
    })
}

/// Affine `h^H w` for `w` stored at `offset` as interleaved pairs.
fn inner_with_vars(h: &CVector, offset: usize) -> ComplexAffine {
    let mut out = ComplexAffine::default();
    for (l, z) in h.iter().enumerate() {
        out.re.push(offset + 2 * l, z.re);
        out.re.push(offset + 2 * l + 1, z.im);
        out.im.push(offset + 2 * l, -z.im);
        out.im.push(offset + 2 * l + 1, z.re);
    }
    out
}

/// Affine `a + c^T theta` for `theta` stored at `offset` as interleaved pairs.
fn linear_in_theta(a: Complex64, c: Option<&CVector>, offset: usize) -> ComplexAffine {
    let mut out = ComplexAffine {
        re: AffineExpr::constant(a.re),
        im: AffineExpr::constant(a.im),
    };
    if let Some(c) = c {
        for (n, z) in c.iter().enumerate() {
            out.re.push(offset + 2 * n, z.re);
            out.re.push(offset + 2 * n + 1, -z.im);
            out.im.push(offset + 2 * n, z.im);
            out.im.push(offset + 2 * n + 1, z.re);
        }
    }
    out
}

/// One SINR term in affine form: signal, interferers and expansion data.
struct SinrRow {
    signal: ComplexAffine,
    interference: Vec<ComplexAffine>,
    signal_tilde: Complex64,
    beta_tilde: f64,
}

/// Adds the slack, Taylor-SINR and log-rate constraints shared by both
/// subproblems.
fn add_rate_structure(ctx: &BlockContext, prog: &mut ConicProgram, rows: &[SinrRow], beta_off: usize, xi_off: usize) {
    for (j, row) in rows.iter().enumerate() {
        let b = beta_off + j;
        prog.push(Constraint::NonPositive(AffineExpr::term(b, -1.0)));
        let s2 = row.signal_tilde.norm_sqr();
        if !active(row.beta_tilde) || s2 == 0.0 {
            prog.push(Constraint::NonPositive(AffineExpr::var(b)));
            continue;
        }
        // With r = beta / beta~ and c = |s~|^2 / beta~ the bound divided by c
        // reads f' = 2 Re{s~* s} / |s~|^2 - r, and the constraint becomes
        // (sum |i|^2 + 1) / c <= f'.
        let c = s2 / row.beta_tilde;
        let mut f = row
            .signal
            .re
            .clone()
            .scaled(2.0 * row.signal_tilde.re / s2)
            .plus(&row.signal.im.clone().scaled(2.0 * row.signal_tilde.im / s2));
        f.push(b, -1.0);
        if row.interference.is_empty() {
            prog.push(Constraint::NonPositive(f.scaled(-1.0).offset(1.0 / c)));
        } else {
            // sum v^2 <= t  <=>  ||(2 v, t - 1)|| <= t + 1
            let t = f.offset(-1.0 / c);
            let k = 2.0 / c.sqrt();
            let mut tail = Vec::with_capacity(2 * row.interference.len() + 1);
            for i in &row.interference {
                tail.push(i.re.clone().scaled(k));
                tail.push(i.im.clone().scaled(k));
            }
            tail.push(t.clone().offset(-1.0));
            prog.push(Constraint::SecondOrderCone { head: t.offset(1.0), tail });
        }
    }
    for (r, term) in ctx.scheme.rate_terms().iter().enumerate() {
        let x = xi_off + r;
        prog.push(Constraint::NonPositive(AffineExpr::term(x, -1.0)));
        for j in term.sinrs {
            prog.push(Constraint::LogHypograph {
                rate: AffineExpr::var(x),
                argument: AffineExpr::term(beta_off + j, slack_scale(rows[*j].beta_tilde)).offset(1.0),
            });
        }
    }
    ctx.add_coupling(prog, xi_off);
    for (r, w) in ctx.weights.iter().enumerate() {
        prog.objective.push(xi_off + r, *w);
    }
}

fn active(beta_tilde: f64) -> bool {
    beta_tilde >= BETA_FLOOR
}

/// SINR slack variables are stored relative to their expansion value.
fn slack_scale(beta_tilde: f64) -> f64 {
    if active(beta_tilde) {
        beta_tilde
    } else {
        1.0
    }
}

fn check_expansion(ctx: &BlockContext, beta_tilde: &[f64]) -> Result<()> {
    if beta_tilde.len() != ctx.num_sinrs() {
        return Err(Error::invalid(format!(
            "expected {} expansion SINRs, got {}",
            ctx.num_sinrs(),
            beta_tilde.len()
        )));
    }
    if beta_tilde.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::invalid("expansion SINRs must be finite and nonnegative"));
    }
    Ok(())
}

/// Variable layout of the beamforming subproblem: streams (interleaved, `2L`
/// each, in [`Scheme::streams`] order), then SINR slacks (relative to
/// `beta_tilde`), then rate slacks.
pub fn build_beamforming_subproblem(
    ctx: &BlockContext,
    theta: &CVector,
    w_tilde: &BeamformerSet,
    beta_tilde: &[f64],
) -> Result<ConicProgram> {
    check_expansion(ctx, beta_tilde)?;
    let l = ctx.antennas;
    let streams = ctx.scheme.streams();
    let beta_off = 2 * l * streams.len();
    let xi_off = beta_off + ctx.num_sinrs();
    let mut prog = ConicProgram::new(xi_off + ctx.num_rates());

    prog.push(Constraint::SecondOrderCone {
        head: AffineExpr::constant(1.0),
        tail: (0..beta_off).map(AffineExpr::var).collect(),
    });

    let g = [ctx.effective(Role::Known, theta), ctx.effective(Role::Unknown, theta)];
    let offset = |s: Stream| 2 * l * ctx.scheme.stream_index(s).expect("stream of scheme");
    let rows: Vec<SinrRow> = ctx
        .scheme
        .sinr_terms()
        .iter()
        .zip(beta_tilde)
        .map(|(term, bt)| {
            let h = &g[role_index(term.receiver)];
            SinrRow {
                signal: inner_with_vars(h, offset(term.signal)),
                interference: term.interference.iter().map(|s| inner_with_vars(h, offset(*s))).collect(),
                signal_tilde: h.dotc(w_tilde.stream(term.signal)),
                beta_tilde: *bt,
            }
        })
        .collect();
    add_rate_structure(ctx, &mut prog, &rows, beta_off, xi_off);
    Ok(prog)
}

/// Variable layout of the phase subproblem: `theta` (interleaved, `2N`), SINR
/// slacks, rate slacks, then one penalty epigraph variable.
///
/// The objective is the slack objective minus `2 kappa |sum_j theta~_j (theta_j - theta~_j)|`.
pub fn build_phase_subproblem(
    ctx: &BlockContext,
    w: &BeamformerSet,
    theta_tilde: &CVector,
    beta_tilde: &[f64],
) -> Result<ConicProgram> {
    if !(ctx.kappa > 0.0) {
        return Err(Error::invalid("penalty weight must be positive"));
    }
    check_expansion(ctx, beta_tilde)?;
    let n = ctx.elements;
    if theta_tilde.len() != n {
        return Err(Error::invalid(format!("expected {n} phase entries, got {}", theta_tilde.len())));
    }
    let beta_off = 2 * n;
    let xi_off = beta_off + ctx.num_sinrs();
    let pen = xi_off + ctx.num_rates();
    let mut prog = ConicProgram::new(pen + 1);

    for i in 0..n {
        prog.push(Constraint::SecondOrderCone {
            head: AffineExpr::constant(1.0),
            tail: vec![AffineExpr::var(2 * i), AffineExpr::var(2 * i + 1)],
        });
    }

    // w^H (d + H theta) = w^H d + c^T theta with c_n = conj((H^H w)_n)
    let signal = |role: Role, s: Stream| -> (ComplexAffine, Complex64) {
        let i = role_index(role);
        let wv = w.stream(s);
        let a = wv.dotc(&ctx.direct[i]);
        let c = ctx.cascaded[i].as_ref().filter(|_| n > 0).map(|h| (h.adjoint() * wv).map(|z| z.conj()));
        let tilde = a + c.as_ref().map_or(Complex64::new(0.0, 0.0), |c| c.dot(theta_tilde));
        (linear_in_theta(a, c.as_ref(), 0), tilde)
    };
    let rows: Vec<SinrRow> = ctx
        .scheme
        .sinr_terms()
        .iter()
        .zip(beta_tilde)
        .map(|(term, bt)| {
            let (sig, tilde) = signal(term.receiver, term.signal);
            SinrRow {
                signal: sig,
                interference: term.interference.iter().map(|s| signal(term.receiver, *s).0).collect(),
                signal_tilde: tilde,
                beta_tilde: *bt,
            }
        })
        .collect();
    add_rate_structure(ctx, &mut prog, &rows, beta_off, xi_off);

    // p >= |sum_j theta~_j theta_j - sum_j theta~_j^2|
    let offset = theta_tilde.iter().map(|z| z * z).sum::<Complex64>();
    let lin = linear_in_theta(-offset, Some(theta_tilde), 0);
    prog.push(Constraint::SecondOrderCone {
        head: AffineExpr::var(pen),
        tail: vec![lin.re, lin.im],
    });
    prog.objective.push(pen, -2.0 * ctx.kappa);
    Ok(prog)
}

/// Divides each entry by its modulus; zero entries become `1`. Returns the
/// projected vector and whether any zero entry was replaced.
pub fn project_unit_modulus(theta: &CVector) -> (CVector, bool) {
    let mut replaced = false;
    let out = theta.map(|z| {
        let r = z.norm();
        if r > 0.0 && r.is_finite() {
            z / r
        } else {
            replaced = true;
            Complex64::new(1.0, 0.0)
        }
    });
    (out, replaced)
}

#[derive(Debug, Clone)]
struct State {
    w: BeamformerSet,
    theta: CVector,
    beta: Vec<f64>,
    xi: Vec<f64>,
}

/// Starting point in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct InitPoint {
    pub w: BeamformerSet,
    pub theta: CVector,
    pub slack: SlackState,
    /// Some target channel was zero and a uniform beamformer was used.
    pub uniform_fallback: bool,
    /// The carried common rate could not be met from this starting point.
    pub infeasible: bool,
}

fn unit_direction(h: &CVector, fallback: &mut bool) -> CVector {
    let norm = energy(h).sqrt();
    if norm > 1e-300 {
        h / Complex64::new(norm, 0.0)
    } else {
        *fallback = true;
        CVector::from_element(h.len(), Complex64::new(1.0 / (h.len() as f64).sqrt(), 0.0))
    }
}

/// MRT beamformers with the given power fraction on the common stream and
/// the rest split evenly over the private streams.
fn mrt_beams(ctx: &BlockContext, theta: &CVector, common_fraction: Option<f64>, fallback: &mut bool) -> BeamformerSet {
    let gp = unit_direction(&ctx.effective(Role::Known, theta), fallback);
    let gn = unit_direction(&ctx.effective(Role::Unknown, theta), fallback);
    let streams = ctx.scheme.streams().len() as f64;
    let (pc, pp) = match (ctx.scheme.has_common(), common_fraction) {
        (true, Some(f)) => (f, (1.0 - f) / 2.0),
        (true, None) => (1.0 / streams, 1.0 / streams),
        (false, _) => (0.0, 1.0 / streams),
    };
    let c = |x: f64| Complex64::new(x.sqrt(), 0.0);
    BeamformerSet {
        t: ctx.t,
        private_p: &gp * c(pp),
        private_n: &gn * c(pp),
        common: &gp * c(pc),
    }
}

impl BlockContext {
    fn point_at(&self, w: BeamformerSet, theta: CVector) -> State {
        let beta = self.sinrs(&w, &theta);
        let mut xi = self.rates_from_sinrs(&beta);
        if self.scheme == Scheme::RateSplitting && self.t == 1 && self.alpha > 0.0 {
            let p = self.rate_index(Stream::PrivateP).unwrap();
            let c = self.rate_index(Stream::Common).unwrap();
            xi[p] = xi[p].min(xi[c] / self.alpha);
        }
        State { w, theta, beta, xi }
    }

    fn carry_met(&self, s: &State) -> bool {
        match self.carry {
            Some(carry) => s.xi[self.rate_index(Stream::Common).unwrap()] >= carry,
            None => true,
        }
    }

    /// Initial point for a given phase vector; `None` if the carried common
    /// rate is unreachable with MRT beams.
    fn initial_state(&self, theta: CVector, fallback: &mut bool) -> Option<State> {
        let s = self.point_at(mrt_beams(self, &theta, None, fallback), theta.clone());
        if self.carry_met(&s) {
            return Some(s);
        }
        let (mut lo, mut hi) = (1.0 / 3.0, 0.999);
        let top = self.point_at(mrt_beams(self, &theta, Some(hi), fallback), theta.clone());
        if !self.carry_met(&top) {
            return None;
        }
        let mut best = top;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let s = self.point_at(mrt_beams(self, &theta, Some(mid), fallback), theta.clone());
            if self.carry_met(&s) {
                hi = mid;
                best = s;
            } else {
                lo = mid;
            }
        }
        Some(best)
    }

    fn violation(&self, s: &State) -> f64 {
        let mut v = (energy_of(&s.w) - 1.0).max(0.0);
        let exact = self.sinrs(&s.w, &s.theta);
        for (b, e) in s.beta.iter().zip(&exact) {
            v = v.max(-b).max((b - e) / e.max(1.0));
        }
        let caps = self.rates_from_sinrs(&s.beta);
        for (x, cap) in s.xi.iter().zip(&caps) {
            v = v.max(-x).max(x - cap);
        }
        for z in s.theta.iter() {
            v = v.max(z.norm() - 1.0);
        }
        v.max(self.coupling_violation(&s.xi))
    }

    fn record(&self, iter: usize, phase: Phase, s: &State) -> TraceRecord {
        TraceRecord {
            iter,
            phase,
            objective: self.objective(&s.xi) * self.b_dl,
            power_used: energy_of(&s.w) * self.power,
            max_violation: self.violation(s),
        }
    }

    fn slack(&self, s: &State) -> SlackState {
        let xi = |st: Stream| self.rate_index(st).map_or(0.0, |i| s.xi[i] * self.b_dl);
        let (beta_p, beta_c, beta_n, beta_sic) = match self.scheme {
            Scheme::RateSplitting => (s.beta[0], s.beta[1], s.beta[2], 0.0),
            Scheme::Noma => (s.beta[0], 0.0, s.beta[1], s.beta[2]),
        };
        SlackState {
            xi_p: xi(Stream::PrivateP),
            xi_c: xi(Stream::Common),
            xi_n: xi(Stream::PrivateN),
            beta_p,
            beta_c,
            beta_n,
            beta_sic,
        }
    }

    fn physical_w(&self, w: &BeamformerSet) -> BeamformerSet {
        w.scaled(self.power.sqrt())
    }

    fn solve_beamforming(&self, s: &State) -> Option<State> {
        let beta = self.sinrs(&s.w, &s.theta);
        let prog = build_beamforming_subproblem(self, &s.theta, &s.w, &beta).ok()?;
        let sol = prog.solve().ok().filter(|x| x.status.is_usable())?;
        let l = self.antennas;
        let mut w = BeamformerSet::zeros(self.t, l);
        for (i, st) in self.scheme.streams().iter().enumerate() {
            let o = 2 * l * i;
            *w.stream_mut(*st) = CVector::from_fn(l, |k, _| Complex64::new(sol.x[o + 2 * k], sol.x[o + 2 * k + 1]));
        }
        let p = energy_of(&w);
        if p > 1.0 {
            w = w.scaled(1.0 / p.sqrt());
        }
        let beta_off = 2 * l * self.scheme.streams().len();
        Some(self.decode_slacks(w, s.theta.clone(), &sol.x, beta_off, &beta))
    }

    fn solve_phases(&self, s: &State) -> Option<State> {
        let beta = self.sinrs(&s.w, &s.theta);
        let prog = build_phase_subproblem(self, &s.w, &s.theta, &beta).ok()?;
        let sol = prog.solve().ok().filter(|x| x.status.is_usable())?;
        let theta = CVector::from_fn(self.elements, |n, _| {
            let z = Complex64::new(sol.x[2 * n], sol.x[2 * n + 1]);
            let r = z.norm();
            if r > 1.0 {
                z / r
            } else {
                z
            }
        });
        Some(self.decode_slacks(s.w.clone(), theta, &sol.x, 2 * self.elements, &beta))
    }

    fn decode_slacks(&self, w: BeamformerSet, theta: CVector, x: &[f64], beta_off: usize, beta_tilde: &[f64]) -> State {
        let nb = self.num_sinrs();
        let beta = x[beta_off..beta_off + nb]
            .iter()
            .zip(beta_tilde)
            .map(|(v, bt)| v.max(0.0) * slack_scale(*bt))
            .collect();
        let xi = x[beta_off + nb..beta_off + nb + self.num_rates()]
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        State { w, theta, beta, xi }
    }
}

fn energy_of(w: &BeamformerSet) -> f64 {
    w.total_power()
}

/// MRT initialization with random phases; beamformers in physical units.
pub fn init_point<R: Rng + ?Sized>(ctx: &BlockContext, rng: &mut R) -> InitPoint {
    let theta = random_phases(rng, ctx.elements);
    let mut fallback = false;
    let (state, infeasible) = match ctx.initial_state(theta.clone(), &mut fallback) {
        Some(s) => (s, false),
        None => (ctx.point_at(mrt_beams(ctx, &theta, None, &mut fallback), theta), true),
    };
    InitPoint {
        w: ctx.physical_w(&state.w),
        theta: state.theta.clone(),
        slack: ctx.slack(&state),
        uniform_fallback: fallback,
        infeasible,
    }
}

/// ORS block solve.
pub fn solve_block<R: Rng + ?Sized>(
    csi: &EstimatedCsi,
    params: &OptimizerParams,
    carry_common: Option<f64>,
    rng: &mut R,
) -> Result<BlockSolution> {
    let ctx = BlockContext::new(Scheme::RateSplitting, csi, params, carry_common)?;
    Ok(run(&ctx, rng))
}

/// Block solve for any scheme with the shared SCA loop.
pub fn solve_scheme_block<R: Rng + ?Sized>(
    scheme: Scheme,
    csi: &EstimatedCsi,
    params: &OptimizerParams,
    carry_common: Option<f64>,
    rng: &mut R,
) -> Result<BlockSolution> {
    let ctx = BlockContext::new(scheme, csi, params, carry_common)?;
    Ok(run(&ctx, rng))
}

/// Runs the alternating loop from a random start.
pub fn run<R: Rng + ?Sized>(ctx: &BlockContext, rng: &mut R) -> BlockSolution {
    let mut flags = Vec::new();
    let mut start = None;
    let mut last_theta = CVector::zeros(ctx.elements);
    for attempt in 0..2 {
        let theta0 = random_phases(rng, ctx.elements);
        last_theta = theta0.clone();
        let mut fallback = false;
        let init = ctx.initial_state(theta0, &mut fallback);
        if fallback {
            flags.push("zero channel: uniform beamformer used at initialization".to_string());
        }
        if let Some(s0) = init {
            if let Some(s1) = ctx.solve_beamforming(&s0) {
                start = Some((s0, s1));
                break;
            }
        }
        if attempt == 0 {
            flags.push("infeasible start: restarted with fresh phases".to_string());
        }
    }
    let Some((s0, s1)) = start else {
        return infeasible_solution(ctx, last_theta, flags);
    };

    let mut trace = vec![ctx.record(0, Phase::Init, &s0)];
    let mut objective_trace = vec![ctx.objective(&s0.xi)];
    let mut current = s0;
    let mut pending = Some(s1);
    let mut status = SolveStatus::IterationCap;
    let mut iterations = 0;

    for iter in 1..=ctx.max_iterations {
        let prev = ctx.objective(&current.xi);
        let tol = RELATIVE_TOLERANCE * prev.abs().max(1e-3);
        let after_bf = match pending.take().or_else(|| ctx.solve_beamforming(&current)) {
            Some(s) if ctx.objective(&s.xi) >= prev - tol => s,
            _ => {
                flags.push(format!("iteration {iter}: beamforming step rejected"));
                status = SolveStatus::Converged;
                break;
            }
        };
        trace.push(ctx.record(iter, Phase::Beamforming, &after_bf));
        let bf_obj = ctx.objective(&after_bf.xi);
        let mut next = after_bf;
        if ctx.elements > 0 {
            match ctx.solve_phases(&next) {
                Some(s) if ctx.objective(&s.xi) >= bf_obj - tol => {
                    trace.push(ctx.record(iter, Phase::PhaseShift, &s));
                    next = s;
                }
                _ => flags.push(format!("iteration {iter}: phase step rejected")),
            }
        }
        let obj = ctx.objective(&next.xi);
        objective_trace.push(obj);
        current = next;
        iterations = iter;
        if obj - prev < ctx.epsilon.max(RELATIVE_TOLERANCE * obj.abs()) {
            status = SolveStatus::Converged;
            break;
        }
    }

    let (theta, replaced) = project_unit_modulus(&current.theta);
    if replaced {
        flags.push("zero phase entry replaced by 1".to_string());
    }
    let moved = theta.iter().zip(current.theta.iter()).any(|(a, b)| (a - b).norm() > 1e-12);
    if moved {
        let projected = State {
            theta,
            ..current.clone()
        };
        let mut fallback = false;
        let first = ctx.solve_beamforming(&projected).or_else(|| {
            let restart = ctx.initial_state(projected.theta.clone(), &mut fallback)?;
            ctx.solve_beamforming(&restart)
        });
        match first {
            Some(mut s) => {
                trace.push(ctx.record(iterations, Phase::Polish, &s));
                for _ in 1..ctx.max_iterations {
                    let prev = ctx.objective(&s.xi);
                    let Some(next) = ctx.solve_beamforming(&s) else { break };
                    let obj = ctx.objective(&next.xi);
                    if obj < prev - RELATIVE_TOLERANCE * prev.abs().max(1e-3) {
                        break;
                    }
                    trace.push(ctx.record(iterations, Phase::Polish, &next));
                    s = next;
                    if obj - prev < ctx.epsilon.max(RELATIVE_TOLERANCE * obj.abs()) {
                        break;
                    }
                }
                current = s;
            }
            None => {
                flags.push("beamforming after projection infeasible; slacks recomputed from exact rates".to_string());
                current = ctx.point_at(projected.w, projected.theta);
            }
        }
    }

    BlockSolution {
        t: ctx.t,
        scheme: ctx.scheme,
        groups: ctx.groups,
        tau: ctx.tau,
        b_dl: ctx.b_dl,
        w_star: ctx.physical_w(&current.w),
        theta_star: PhaseConfig {
            theta: current.theta.clone(),
        },
        slack_star: ctx.slack(&current),
        objective: ctx.objective(&current.xi) * ctx.b_dl,
        objective_trace: objective_trace.iter().map(|o| o * ctx.b_dl).collect(),
        trace,
        iterations,
        status,
        flags,
    }
}

fn infeasible_solution(ctx: &BlockContext, theta: CVector, flags: Vec<String>) -> BlockSolution {
    let (theta, _) = project_unit_modulus(&theta);
    BlockSolution {
        t: ctx.t,
        scheme: ctx.scheme,
        groups: ctx.groups,
        tau: ctx.tau,
        b_dl: ctx.b_dl,
        w_star: BeamformerSet::zeros(ctx.t, ctx.antennas),
        theta_star: PhaseConfig { theta },
        slack_star: SlackState::default(),
        objective: 0.0,
        objective_trace: Vec::new(),
        trace: Vec::new(),
        iterations: 0,
        status: SolveStatus::Infeasible,
        flags,
    }
}

pub const TRACE_HEADER: &str = "iter,phase,objective,power_used,max_constraint_violation";

pub fn write_trace<W: Write>(out: &mut W, records: &[TraceRecord]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{:.9},{:.3e}",
            r.iter, r.phase, r.objective, r.power_used, r.max_violation
        )?;
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_trace(&mut buf, records)
        .and_then(|_| buf.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::PilotMode;
    use crate::rates::assign_groups;
    use crate::channel_model::ChannelSet;
    use crate::linalg::{complex_gaussian_matrix, complex_gaussian_vector, gain};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> OptimizerParams {
        OptimizerParams {
            power: 1.0,
            noise_var: 1.0,
            b_dl: 1.0,
            alpha: 0.5,
            kappa: 1e-2,
            epsilon: 1e-6,
            max_iterations: 50,
        }
    }

    fn random_csi(rng: &mut ChaCha8Rng, t: usize, l: usize, n: usize, mode: PilotMode) -> EstimatedCsi {
        let direct = [complex_gaussian_vector(rng, l, 1.0), complex_gaussian_vector(rng, l, 1.0)];
        let bs_ris = complex_gaussian_matrix(rng, l, n, 1.0);
        let ris_user = [complex_gaussian_vector(rng, n, 1.0), complex_gaussian_vector(rng, n, 1.0)];
        let ch = ChannelSet::from_parts(t, direct, bs_ris, ris_user);
        EstimatedCsi::perfect(&ch, mode, assign_groups(t))
    }

    #[test]
    fn taylor_tight_at_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = complex_gaussian_vector(&mut rng, 3, 1.0);
        let w = complex_gaussian_vector(&mut rng, 3, 1.0);
        let f = taylor_signal_bound(&h, &w, 0.7).unwrap();
        let exact = gain(&h, &w) / 0.7;
        assert!((f.eval(&w, 0.7) - exact).abs() <= 1e-12 * exact);
        let doubled = &w * Complex64::new(2.0, 0.0);
        assert!((f.eval(&doubled, 0.7) - 3.0 * exact).abs() <= 1e-12 * exact);
        assert!(taylor_signal_bound(&h, &w, 0.0).is_err());
        assert!(taylor_signal_bound(&h, &w, -1.0).is_err());
    }

    #[test]
    fn projection_cases() {
        let v = CVector::from_vec(vec![Complex64::new(0.5, 0.0), Complex64::new(3.0, 4.0)]);
        let (p, replaced) = project_unit_modulus(&v);
        assert!(!replaced);
        assert_eq!(p[0], Complex64::new(1.0, 0.0));
        assert!((p[1] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
        let (q, _) = project_unit_modulus(&p);
        assert!((&q - &p).iter().all(|z| z.norm() < 1e-15));
        let (z, replaced) = project_unit_modulus(&CVector::zeros(1));
        assert!(replaced);
        assert_eq!(z[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn init_uses_full_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let csi = random_csi(&mut rng, 1, 3, 4, PilotMode::Half);
        let mut p = params();
        p.power = 7.0;
        let ctx = BlockContext::new(Scheme::RateSplitting, &csi, &p, None).unwrap();
        let init = init_point(&ctx, &mut rng);
        assert!((init.w.total_power() - 7.0).abs() < 1e-9);
        assert!(!init.uniform_fallback);
        assert!(init.theta.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn init_scalar_is_phase_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let csi = random_csi(&mut rng, 1, 1, 2, PilotMode::Half);
        let mut p = params();
        p.alpha = 0.0;
        let ctx = BlockContext::new(Scheme::RateSplitting, &csi, &p, None).unwrap();
        let init = init_point(&ctx, &mut rng);
        let gp = csi.effective(0, &init.theta);
        let gn = csi.effective(1, &init.theta);
        for (w, g) in [(&init.w.private_p, &gp), (&init.w.private_n, &gn), (&init.w.common, &gp)] {
            assert!((w[0].norm_sqr() - 1.0 / 3.0).abs() < 1e-12);
            // aligned: g^H w is real and positive
            let s = g.dotc(w);
            assert!(s.re > 0.0 && s.im.abs() < 1e-12 * s.re);
        }
        let exact = crate::rates::compute_sinrs(&gp, &gn, &init.w, 1.0).unwrap();
        assert_eq!(init.slack.beta_p, exact.gamma_p);
        assert_eq!(init.slack.beta_c, exact.gamma_c);
        assert_eq!(init.slack.beta_n, exact.gamma_n);
    }

    #[test]
    fn zero_channel_falls_back_to_uniform() {
        let ch = ChannelSet::from_parts(
            1,
            [CVector::zeros(2), CVector::zeros(2)],
            CMatrix::zeros(2, 1),
            [CVector::zeros(1), CVector::zeros(1)],
        );
        let csi = EstimatedCsi::perfect(&ch, PilotMode::Full, assign_groups(1));
        let ctx = BlockContext::new(Scheme::RateSplitting, &csi, &params(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = init_point(&ctx, &mut rng);
        assert!(init.uniform_fallback);
        assert!((init.w.total_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_two_requires_carry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let csi = random_csi(&mut rng, 2, 2, 2, PilotMode::Half);
        assert!(BlockContext::new(Scheme::RateSplitting, &csi, &params(), None).is_err());
        assert!(BlockContext::new(Scheme::RateSplitting, &csi, &params(), Some(-1.0)).is_err());
        assert!(BlockContext::new(Scheme::Noma, &csi, &params(), None).is_ok());
    }

    #[test]
    fn objective_weights_by_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c1 = random_csi(&mut rng, 1, 2, 2, PilotMode::Half);
        let c2 = random_csi(&mut rng, 2, 2, 2, PilotMode::Half);
        let ctx1 = BlockContext::new(Scheme::RateSplitting, &c1, &params(), None).unwrap();
        let ctx2 = BlockContext::new(Scheme::RateSplitting, &c2, &params(), Some(0.0)).unwrap();
        // rate slack order: private P, private N, common
        assert_eq!(ctx1.objective(&[0.0, 0.0, 1.0]), 0.5);
        assert_eq!(ctx2.objective(&[0.0, 0.0, 1.0]), 0.0);
        assert_eq!(ctx1.objective(&[1.0, 2.0, 0.0]), 3.0);
    }

    #[test]
    fn subproblem_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let csi = random_csi(&mut rng, 1, 2, 3, PilotMode::Half);
        let ctx = BlockContext::new(Scheme::RateSplitting, &csi, &params(), None).unwrap();
        let init = init_point(&ctx, &mut rng);
        let w = init.w.clone();
        let beta = ctx.sinrs(&w, &init.theta);
        let p2 = build_beamforming_subproblem(&ctx, &init.theta, &w, &beta).unwrap();
        assert_eq!(p2.num_vars, 3 * 4 + 3 + 3);
        p2.validate().unwrap();
        let p3 = build_phase_subproblem(&ctx, &w, &init.theta, &beta).unwrap();
        assert_eq!(p3.num_vars, 6 + 3 + 3 + 1);
        p3.validate().unwrap();
        assert!(build_beamforming_subproblem(&ctx, &init.theta, &w, &beta[..2]).is_err());
    }

    #[test]
    fn phase_signal_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = complex_gaussian_vector(&mut rng, 1, 1.0);
        let hm = complex_gaussian_matrix(&mut rng, 1, 1, 1.0);
        let w = complex_gaussian_vector(&mut rng, 1, 1.0);
        let a = w.dotc(&h);
        let c = (hm.adjoint() * &w).map(|z| z.conj());
        let expr = linear_in_theta(a, Some(&c), 0);
        for _ in 0..100 {
            let r: f64 = rng.gen_range(0.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let th = CVector::from_element(1, Complex64::from_polar(r, phi));
            let x = [th[0].re, th[0].im];
            let direct = gain(&(&h + &hm * &th), &w);
            assert!((expr.eval(&x).norm_sqr() - direct).abs() < 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn beam_signal_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = complex_gaussian_vector(&mut rng, 3, 1.0);
        let w = complex_gaussian_vector(&mut rng, 3, 1.0);
        let expr = inner_with_vars(&h, 2);
        let mut x = vec![0.0; 8];
        for (l, z) in w.iter().enumerate() {
            x[2 + 2 * l] = z.re;
            x[3 + 2 * l] = z.im;
        }
        assert!((expr.eval(&x) - h.dotc(&w)).norm() < 1e-14);
    }

    #[test]
    fn penalty_zero_at_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let csi = random_csi(&mut rng, 1, 2, 3, PilotMode::Half);
        let ctx = BlockContext::new(Scheme::RateSplitting, &csi, &params(), None).unwrap();
        let init = init_point(&ctx, &mut rng);
        let beta = ctx.sinrs(&init.w, &init.theta);
        let p3 = build_phase_subproblem(&ctx, &init.w, &init.theta, &beta).unwrap();
        let Constraint::SecondOrderCone { tail, .. } = p3.constraints.last().unwrap() else {
            panic!("penalty epigraph expected last");
        };
        let mut x = vec![0.0; p3.num_vars];
        for (n, z) in init.theta.iter().enumerate() {
            x[2 * n] = z.re;
            x[2 * n + 1] = z.im;
        }
        for e in tail {
            assert!(e.eval(&x).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_kappa_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let csi = random_csi(&mut rng, 1, 2, 2, PilotMode::Half);
        let mut p = params();
        p.kappa = 0.0;
        assert!(BlockContext::new(Scheme::RateSplitting, &csi, &p, None).is_err());
    }

    #[test]
    fn solve_without_ris() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let csi = random_csi(&mut rng, 1, 2, 0, PilotMode::Full);
        let sol = solve_block(&csi, &params(), None, &mut rng).unwrap();
        assert_ne!(sol.status, SolveStatus::Infeasible);
        assert!(sol.trace.iter().all(|r| r.phase != Phase::PhaseShift));
        assert!(sol.objective > 0.0);
    }

    #[test]
    fn trace_csv_format() {
        let rec = TraceRecord {
            iter: 1,
            phase: Phase::Beamforming,
            objective: 2.5,
            power_used: 10.0,
            max_violation: 0.0,
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        assert_eq!(lines.next(), Some("1,beamforming,2.500000,10.000000000,0.000e0"));
    }
}
