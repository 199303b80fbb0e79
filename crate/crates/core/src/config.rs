//! Simulation configuration: flat `key = value` text with `#` comments.
//!
//! Power levels are given in dBm and converted to watts when parsed.

use std::path::Path;
use std::str::FromStr;

use crate::channel_model::PathlossParams;
use crate::error::{Error, Result};
use crate::estimation::{pilot_budget, PilotMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchemeId {
    Ors,
    NomaFull,
    NomaHalf,
}

impl SchemeId {
    pub const ALL: [SchemeId; 3] = [SchemeId::Ors, SchemeId::NomaFull, SchemeId::NomaHalf];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeId::Ors => "ors",
            SchemeId::NomaFull => "noma_full",
            SchemeId::NomaHalf => "noma_half",
        }
    }

    pub fn pilot_mode(&self) -> PilotMode {
        match self {
            SchemeId::NomaFull => PilotMode::Full,
            SchemeId::Ors | SchemeId::NomaHalf => PilotMode::Half,
        }
    }
}

impl FromStr for SchemeId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| format!("unknown scheme '{s}' (expected ors, noma_full or noma_half)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CsiMode {
    Perfect,
    Imperfect,
}

impl CsiMode {
    pub fn name(&self) -> &'static str {
        match self {
            CsiMode::Perfect => "perfect",
            CsiMode::Imperfect => "imperfect",
        }
    }
}

impl FromStr for CsiMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perfect" => Ok(CsiMode::Perfect),
            "imperfect" => Ok(CsiMode::Imperfect),
            _ => Err(format!("unknown CSI mode '{s}' (expected perfect or imperfect)")),
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub antennas: usize,
    pub n_list: Vec<usize>,
    /// Hz.
    pub bandwidth: f64,
    /// Transmit power budget, W.
    pub power: f64,
    /// Coherence block length in symbols.
    pub coherence: usize,
    /// Downlink receiver noise, W.
    pub noise_var: f64,
    /// Uplink noise at the BS, W.
    pub bs_noise_var: f64,
    /// Uplink pilot power, W.
    pub pilot_power: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub wavelength: f64,
    pub bs_ris_distance: f64,
    pub ris_user_distance: f64,
    pub user_radius: f64,
    pub drops: usize,
    pub base_seed: u64,
    pub schemes: Vec<SchemeId>,
    pub csi: CsiMode,
    pub pathloss: PathlossParams,
    pub alpha_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            antennas: 8,
            n_list: vec![4, 9, 16, 25, 36, 64],
            bandwidth: 10e6,
            power: dbm_to_watts(40.0),
            coherence: 2000,
            noise_var: dbm_to_watts(-100.0),
            bs_noise_var: dbm_to_watts(-100.0),
            pilot_power: dbm_to_watts(30.0),
            kappa: 1e4,
            epsilon: 1.0,
            max_iterations: 50,
            wavelength: 0.1,
            bs_ris_distance: 400.0,
            ris_user_distance: 100.0,
            user_radius: 50.0,
            drops: 50,
            base_seed: 1,
            schemes: SchemeId::ALL.to_vec(),
            csi: CsiMode::Perfect,
            pathloss: PathlossParams::default(),
            alpha_max: crate::rates::ALPHA_MAX,
        }
    }
}

fn parse_value<T: FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigLine {
        line,
        message: format!("cannot parse '{value}' for key '{key}'"),
    })
}

fn parse_list<T: FromStr>(value: &str, line: usize, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(s, line, key))
        .collect()
}

impl SimConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = SimConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::ConfigLine {
                    line,
                    message: format!("expected 'key = value', got '{content}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigLine {
                    line,
                    message: format!("duplicate key '{key}'"),
                });
            }
            let f = || parse_value::<f64>(value, line, key);
            let u = || parse_value::<usize>(value, line, key);
            match key {
                "L" => cfg.antennas = u()?,
                "N_list" => cfg.n_list = parse_list(value, line, key)?,
                "B" => cfg.bandwidth = f()?,
                "P_Tr_dBm" => cfg.power = dbm_to_watts(f()?),
                "T_coh" => cfg.coherence = u()?,
                "sigma_v2_dBm" => cfg.noise_var = dbm_to_watts(f()?),
                "sigma_z2_dBm" => cfg.bs_noise_var = dbm_to_watts(f()?),
                "P_UL_dBm" => cfg.pilot_power = dbm_to_watts(f()?),
                "kappa" => cfg.kappa = f()?,
                "epsilon" => cfg.epsilon = f()?,
                "max_iterations" => cfg.max_iterations = u()?,
                "wavelength" => cfg.wavelength = f()?,
                "bs_ris_distance" => cfg.bs_ris_distance = f()?,
                "ris_user_distance" => cfg.ris_user_distance = f()?,
                "user_radius" => cfg.user_radius = f()?,
                "drops" => cfg.drops = u()?,
                "base_seed" => cfg.base_seed = parse_value(value, line, key)?,
                "schemes" => {
                    cfg.schemes = parse_list::<String>(value, line, key)?
                        .iter()
                        .map(|s| s.parse().map_err(|message| Error::ConfigLine { line, message }))
                        .collect::<Result<_>>()?
                }
                "csi" => cfg.csi = value.parse().map_err(|message| Error::ConfigLine { line, message })?,
                "reference_gain_dB" => cfg.pathloss.reference_gain = db_to_linear(f()?),
                "exponent_direct" => cfg.pathloss.exponent_direct = f()?,
                "exponent_reflected" => cfg.pathloss.exponent_reflected = f()?,
                "bs_angular_spread_deg" => cfg.pathloss.bs_angular_std = f()?.to_radians(),
                "alpha_max" => cfg.alpha_max = f()?,
                _ => {
                    return Err(Error::ConfigLine {
                        line,
                        message: format!("unknown key '{key}'"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks ranges and that every pilot budget fits in a coherence block.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.antennas == 0 {
            return bad("L must be at least 1".into());
        }
        if self.n_list.is_empty() {
            return bad("N_list must not be empty".into());
        }
        if self.n_list.contains(&0) {
            return bad("N_list entries must be at least 1".into());
        }
        for (name, v) in [
            ("B", self.bandwidth),
            ("P_Tr", self.power),
            ("sigma_v2", self.noise_var),
            ("P_UL", self.pilot_power),
            ("kappa", self.kappa),
            ("wavelength", self.wavelength),
            ("bs_ris_distance", self.bs_ris_distance),
            ("ris_user_distance", self.ris_user_distance),
            ("alpha_max", self.alpha_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.bs_noise_var >= 0.0) || !(self.epsilon >= 0.0) || !(self.user_radius >= 0.0) {
            return bad("sigma_z2, epsilon and user_radius must be nonnegative".into());
        }
        if self.user_radius >= self.ris_user_distance {
            return bad("user_radius must be smaller than ris_user_distance".into());
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if self.drops == 0 {
            return bad("drops must be at least 1".into());
        }
        if self.schemes.is_empty() {
            return bad("schemes must not be empty".into());
        }
        self.pathloss.validate().map_err(|e| Error::Config(e.to_string()))?;
        let modes: Vec<PilotMode> = self.schemes.iter().map(|s| s.pilot_mode()).collect();
        for &n in &self.n_list {
            let mut worst = None;
            for &mode in &modes {
                let budget = pilot_budget(n, 2, mode).map_err(|e| Error::Config(e.to_string()))?;
                if worst.map_or(true, |(tau, _)| budget.tau > tau) {
                    worst = Some((budget.tau, mode));
                }
            }
            if let Some((tau, mode)) = worst.filter(|(tau, _)| *tau >= self.coherence) {
                return bad(format!(
                    "pilot budget {tau} for N={n} ({mode:?} CSI) exceeds T_coh={}",
                    self.coherence
                ));
            }
        }
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SimConfig::parse_str(&text)
}
