//! Seeded Monte Carlo driver: user drops, scheme comparison and CSV output.
//!
//! All schemes in one drop see the same scenario and true channels. Schemes
//! with the same pilot mode also share the estimation noise realization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::solve_noma_block;
use crate::channel_model::{build_scenario, sample_channels, ChannelSet, ScenarioParams};
use crate::config::{CsiMode, SchemeId, SimConfig};
use crate::error::{Error, Result};
use crate::estimation::{estimate, pilot_budget, EstimatedCsi, PilotMode};
use crate::rates::{assign_groups, downlink_bandwidth, evaluate_estimated, evaluate_true, ors_ratio_clamped, RateReport};
use crate::sca::{solve_block, write_trace_file, BlockSolution, OptimizerParams, SolveStatus};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one drop, derived from the base seed, the RIS size and the drop index.
pub fn child_seed(base_seed: u64, elements: usize, drop_index: usize) -> u64 {
    let a = splitmix64(base_seed);
    let b = splitmix64(a ^ elements as u64);
    splitmix64(b ^ (drop_index as u64).rotate_left(32))
}

/// Independent per-purpose stream derived from a drop seed.
fn purpose_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(purpose)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropResult {
    pub scheme: SchemeId,
    pub csi: CsiMode,
    pub elements: usize,
    pub drop_index: usize,
    pub seed: u64,
    /// Net rate on the true channels, bit/s.
    pub r_net: f64,
    /// Net rate predicted from the channels the optimizer saw, bit/s.
    pub xi_obj: f64,
    pub true_rates: RateReport,
    pub estimated_rates: RateReport,
    /// ORS ratio used in block 1 (zero for NOMA).
    pub alpha: f64,
    pub iterations: [usize; 2],
    pub status: DropStatus,
    pub solutions: [BlockSolution; 2],
}

struct DropChannels {
    elements: usize,
    seed: u64,
    channels: [ChannelSet; 2],
    lsf: [f64; 2],
}

fn draw_channels(config: &SimConfig, elements: usize, drop_index: usize) -> Result<DropChannels> {
    let seed = child_seed(config.base_seed, elements, drop_index);
    let mut params = ScenarioParams::new(config.antennas, elements);
    params.wavelength = config.wavelength;
    params.bs_ris_distance = config.bs_ris_distance;
    params.ris_user_distance = config.ris_user_distance;
    params.user_radius = config.user_radius;
    let scenario = build_scenario(&params, splitmix64(seed ^ 1))?;
    let mut rng = purpose_rng(seed, 2);
    let c1 = sample_channels(&scenario, &config.pathloss, 1, &mut rng)?;
    let c2 = sample_channels(&scenario, &config.pathloss, 2, &mut rng)?;
    let lsf = [0, 1].map(|k| config.pathloss.large_scale_fading(&scenario, k));
    Ok(DropChannels {
        elements,
        seed,
        channels: [c1, c2],
        lsf,
    })
}

fn mode_index(mode: PilotMode) -> u64 {
    match mode {
        PilotMode::Full => 0,
        PilotMode::Half => 1,
    }
}

fn scheme_index(s: SchemeId) -> u64 {
    match s {
        SchemeId::Ors => 0,
        SchemeId::NomaFull => 1,
        SchemeId::NomaHalf => 2,
    }
}

fn run_scheme(config: &SimConfig, drop: &DropChannels, drop_index: usize, scheme: SchemeId) -> Result<DropResult> {
    let mode = scheme.pilot_mode();
    let budget = pilot_budget(drop.elements, 2, mode)?;
    let b_dl = downlink_bandwidth(config.bandwidth, budget.tau, config.coherence)?;
    let mut csi: Vec<EstimatedCsi> = Vec::with_capacity(2);
    for t in 1..=2 {
        let ch = &drop.channels[t - 1];
        let groups = assign_groups(t);
        csi.push(match config.csi {
            CsiMode::Perfect => EstimatedCsi::perfect(ch, mode, groups),
            CsiMode::Imperfect => {
                let mut rng = purpose_rng(drop.seed, 10 + 2 * mode_index(mode) + t as u64);
                estimate(ch, &budget, groups, config.pilot_power, config.bs_noise_var, &mut rng)?
            }
        });
    }
    let alpha = match scheme {
        SchemeId::Ors => ors_ratio_clamped(drop.lsf[0], drop.lsf[1], config.alpha_max)?,
        _ => 0.0,
    };
    let params = OptimizerParams {
        power: config.power,
        noise_var: config.noise_var,
        b_dl,
        alpha,
        kappa: config.kappa,
        epsilon: config.epsilon,
        max_iterations: config.max_iterations,
    };
    let mut rng = purpose_rng(drop.seed, 100 + scheme_index(scheme));
    let (s1, s2) = match scheme {
        SchemeId::Ors => {
            let s1 = solve_block(&csi[0], &params, None, &mut rng)?;
            let s2 = solve_block(&csi[1], &params, Some(s1.slack_star.xi_c), &mut rng)?;
            (s1, s2)
        }
        SchemeId::NomaFull | SchemeId::NomaHalf => {
            let s1 = solve_noma_block(&csi[0], &params, mode, &mut rng)?;
            let s2 = solve_noma_block(&csi[1], &params, mode, &mut rng)?;
            (s1, s2)
        }
    };
    let infeasible = s1.status == SolveStatus::Infeasible || s2.status == SolveStatus::Infeasible;
    let true_rates = evaluate_true([&s1, &s2], [&drop.channels[0], &drop.channels[1]], config.noise_var, [b_dl; 2])?;
    let estimated_rates = evaluate_estimated([&s1, &s2], [&csi[0], &csi[1]], config.noise_var, [b_dl; 2])?;
    Ok(DropResult {
        scheme,
        csi: config.csi,
        elements: drop.elements,
        drop_index,
        seed: drop.seed,
        r_net: true_rates.net,
        xi_obj: estimated_rates.net,
        true_rates,
        estimated_rates,
        alpha,
        iterations: [s1.iterations, s2.iterations],
        status: if infeasible {
            DropStatus::Infeasible
        } else {
            DropStatus::Feasible
        },
        solutions: [s1, s2],
    })
}

/// Runs every configured scheme on one drop.
pub fn run_drop(config: &SimConfig, elements: usize, drop_index: usize) -> Result<Vec<DropResult>> {
    let drop = draw_channels(config, elements, drop_index)?;
    config
        .schemes
        .iter()
        .map(|s| run_scheme(config, &drop, drop_index, *s))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scheme: SchemeId,
    pub csi: CsiMode,
    pub elements: usize,
    pub drops: usize,
    pub mean_r_net: f64,
    pub se_r_net: f64,
    pub mean_obj: f64,
    pub se_obj: f64,
    pub infeasible_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// Every drop result, in (N, drop, scheme) order.
    pub drops: Vec<DropResult>,
}

impl ResultTable {
    pub fn row(&self, scheme: SchemeId, elements: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.elements == elements)
    }

    /// Per-drop results of one scheme at one RIS size, in drop order.
    pub fn drops_of(&self, scheme: SchemeId, elements: usize) -> Vec<&DropResult> {
        self.drops
            .iter()
            .filter(|d| d.scheme == scheme && d.elements == elements)
            .collect()
    }

    pub fn all_infeasible(&self) -> bool {
        !self.drops.is_empty() && self.drops.iter().all(|d| d.status == DropStatus::Infeasible)
    }
}

/// Sample mean and standard error; the standard error is zero below two samples.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn aggregate(results: &[DropResult], scheme: SchemeId, csi: CsiMode, elements: usize) -> ResultRow {
    let mine: Vec<&DropResult> = results
        .iter()
        .filter(|d| d.scheme == scheme && d.elements == elements)
        .collect();
    let ok: Vec<&&DropResult> = mine.iter().filter(|d| d.status == DropStatus::Feasible).collect();
    let (mean_r_net, se_r_net) = mean_and_se(&ok.iter().map(|d| d.r_net).collect::<Vec<_>>());
    let (mean_obj, se_obj) = mean_and_se(&ok.iter().map(|d| d.xi_obj).collect::<Vec<_>>());
    ResultRow {
        scheme,
        csi,
        elements,
        drops: mine.len(),
        mean_r_net,
        se_r_net,
        mean_obj,
        se_obj,
        infeasible_count: mine.len() - ok.len(),
    }
}

/// Runs all drops for every RIS size; drops execute in parallel and are
/// reduced in index order.
pub fn sweep(config: &SimConfig) -> Result<ResultTable> {
    config.validate()?;
    let mut drops = Vec::new();
    for &n in &config.n_list {
        let per_drop: Vec<Vec<DropResult>> = (0..config.drops)
            .into_par_iter()
            .map(|d| run_drop(config, n, d))
            .collect::<Result<_>>()?;
        drops.extend(per_drop.into_iter().flatten());
    }
    let mut rows = Vec::new();
    for &scheme in &config.schemes {
        for &n in &config.n_list {
            rows.push(aggregate(&drops, scheme, config.csi, n));
        }
    }
    rows.sort_by(|a, b| (a.scheme.name(), a.elements).cmp(&(b.scheme.name(), b.elements)));
    Ok(ResultTable { rows, drops })
}

pub const RESULTS_HEADER: &str =
    "scheme,csi,N,drops,mean_Rnet_bps,se_Rnet_bps,mean_obj_bps,se_obj_bps,infeasible_count";

pub fn write_results_to<W: Write>(table: &ResultTable, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.scheme.name(),
            r.csi.name(),
            r.elements,
            r.drops,
            r.mean_r_net,
            r.se_r_net,
            r.mean_obj,
            r.se_obj,
            r.infeasible_count
        )?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    f(&mut buf).and_then(|_| buf.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_results(table: &ResultTable, path: &Path) -> Result<()> {
    write_file(path, |w| write_results_to(table, w))
}

/// One `N<TAB>mean<TAB>se` block per scheme, blocks separated by a blank line.
pub fn write_plotdata_to<W: Write>(table: &ResultTable, out: &mut W) -> std::io::Result<()> {
    let mut first = true;
    let mut schemes: Vec<SchemeId> = table.rows.iter().map(|r| r.scheme).collect();
    schemes.dedup();
    for scheme in schemes {
        if !first {
            writeln!(out)?;
        }
        first = false;
        writeln!(out, "# {}", scheme.name())?;
        for r in table.rows.iter().filter(|r| r.scheme == scheme) {
            writeln!(out, "{}\t{:.6}\t{:.6}", r.elements, r.mean_r_net, r.se_r_net)?;
        }
    }
    Ok(())
}

pub fn write_plotdata(table: &ResultTable, path: &Path) -> Result<()> {
    write_file(path, |w| write_plotdata_to(table, w))
}

/// Writes the iteration trace of every block solve into `dir`.
pub fn write_traces(table: &ResultTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in &table.drops {
        for sol in &d.solutions {
            let name = format!("{}_N{}_drop{}_t{}.csv", d.scheme.name(), d.elements, d.drop_index, sol.t);
            write_trace_file(&dir.join(name), &sol.trace)?;
        }
    }
    Ok(())
}

/// Exact one-sided sign test of `H1: median(diff) > 0`. Ties are dropped.
/// Returns `(wins, trials, p_value)`.
pub fn sign_test(diffs: &[f64]) -> (usize, usize, f64) {
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let trials = wins + diffs.iter().filter(|d| **d < 0.0).count();
    (wins, trials, binomial_upper_tail(trials, wins))
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            total += (ln_c - ln_half_n).exp();
        }
    }
    total.min(1.0)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_and_se(&rx);
    let (my, _) = mean_and_se(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_and_repeat() {
        assert_eq!(child_seed(1, 4, 0), child_seed(1, 4, 0));
        assert_ne!(child_seed(1, 4, 0), child_seed(1, 4, 1));
        assert_ne!(child_seed(1, 4, 0), child_seed(1, 9, 0));
        assert_ne!(child_seed(1, 4, 0), child_seed(2, 4, 0));
    }

    #[test]
    fn binomial_tail_values() {
        assert_eq!(binomial_upper_tail(10, 0), 1.0);
        assert!((binomial_upper_tail(1, 1) - 0.5).abs() < 1e-15);
        assert!((binomial_upper_tail(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        // P(X >= 8 | n = 10) = (45 + 10 + 1) / 1024
        assert!((binomial_upper_tail(10, 8) - 56.0 / 1024.0).abs() < 1e-14);
        let (w, n, p) = sign_test(&[1.0, 2.0, -1.0, 0.0, 3.0]);
        assert_eq!((w, n), (3, 4));
        assert!((p - 5.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn mean_se_values() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_se(&[2.0]), (2.0, 0.0));
        assert!(mean_and_se(&[]).0.is_nan());
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut buf = Vec::new();
        write_results_to(&ResultTable::default(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{RESULTS_HEADER}\n"));
    }
}
