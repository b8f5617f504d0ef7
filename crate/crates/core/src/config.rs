//! Run configuration: a TOML file plus `RWAVE_` environment overrides.
//!
//! Overrides name a key as `RWAVE_<SECTION>__<KEY>` (or `RWAVE_<KEY>` for
//! top-level keys); the value is read as a TOML literal, falling back to a
//! string. Example: `RWAVE_DIOPHANTINE__GAMMA=5e-4`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nash_moser::{DiophantineParams, NashMoserSchedule};
use crate::nonlinearity::{Nonlinearity, SpatialFunction, Term};

pub const ENV_PREFIX: &str = "RWAVE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignSetting {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySection {
    pub p: usize,
    #[serde(default = "auto_sign")]
    pub s_star: SignSetting,
    #[serde(default = "infinite")]
    pub rho: f64,
    pub terms: Vec<Term>,
}

fn auto_sign() -> SignSetting {
    SignSetting::Named("auto".into())
}

fn infinite() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSetting {
    Fixed(usize),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CutoffSection {
    /// `V₁/V₂` split index, or `"auto"`.
    pub n: SplitSetting,
    pub l0: usize,
    pub p_max: usize,
    /// `J = L + j_margin`.
    pub j_margin: usize,
}

impl Default for CutoffSection {
    fn default() -> Self {
        Self { n: SplitSetting::Named("auto".into()), l0: 8, p_max: 5, j_margin: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSection {
    pub sigma_bar: f64,
    pub s: f64,
}

impl Default for NormSection {
    fn default() -> Self {
        Self { sigma_bar: 0.1, s: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub gamma0: f64,
    pub delta0: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { gamma0: 0.02, delta0: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiophantineSection {
    pub gamma: f64,
    pub tau: f64,
}

impl Default for DiophantineSection {
    fn default() -> Self {
        Self { gamma: 1e-3, tau: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSection {
    pub q2: f64,
    pub q2_max_iter: usize,
    pub q1: f64,
    pub q1_max_iter: usize,
    pub linear: f64,
    pub newton_max: usize,
    pub neumann_max: usize,
    pub gradient: f64,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        Self { q2: 1e-13, q2_max_iter: 500, q1: 1e-11, q1_max_iter: 25, linear: 1e-13, newton_max: 12, neumann_max: 400, gradient: 1e-10 }
    }
}

/// Normalizations of the tail equation's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Q2Section {
    /// Radius of the ball `‖w‖_{σ,s} ≤ w_ball` on which the tail is solved.
    pub w_ball: f64,
    /// Multiplier on both the `w` ball and the `2R` bound on `v₁`.
    pub slack: f64,
}

impl Default for Q2Section {
    fn default() -> Self {
        Self { w_ball: 1.0, slack: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub directions: usize,
    pub max_newton: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self { directions: 8, max_newton: 80 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub deltas: Vec<f64>,
    /// Solve the grid as one continuation branch instead of independent
    /// solves started at the critical point.
    pub sequential: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { deltas: (1..=12).map(|i| 0.01 * i as f64).collect(), sequential: false }
    }
}

/// Source of `M` for the shifted Melnikov condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MelnikovSetting {
    Value(f64),
    /// `"critical"`: `M` at the critical point (δ = 0).
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CantorSection {
    pub etas: Vec<f64>,
    pub k_max: usize,
    pub samples: usize,
    pub melnikov: MelnikovSetting,
}

impl Default for CantorSection {
    fn default() -> Self {
        Self { etas: vec![0.2, 0.1, 0.05], k_max: 200, samples: 100_000, melnikov: MelnikovSetting::Named("critical".into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigcheckSection {
    pub eps: f64,
    pub k: usize,
    pub j_max: usize,
    pub a0: SpatialFunction,
}

impl Default for EigcheckSection {
    fn default() -> Self {
        Self { eps: 0.02, k: 0, j_max: 200, a0: SpatialFunction::constant(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: String,
    pub nonlinearity: NonlinearitySection,
    #[serde(default)]
    pub cutoffs: CutoffSection,
    #[serde(default)]
    pub norms: NormSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub diophantine: DiophantineSection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
    #[serde(default)]
    pub q2: Q2Section,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub cantor: CantorSection,
    #[serde(default)]
    pub eigcheck: EigcheckSection,
}

fn default_out() -> String {
    "rwave-out".into()
}

/// 1-based line of `byte` in `src`.
fn line_of(src: &str, byte: usize) -> usize {
    src[..byte.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line where `key` is assigned inside `[section]` (top level when `None`).
pub fn key_line(src: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            let name = h.trim_start_matches('[').split(']').next().unwrap_or("").trim();
            current = Some(name.to_string());
            continue;
        }
        if current.as_deref() == section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    // Dotted or inline-table forms: fall back to the section header.
    section.and_then(|s| src.lines().position(|l| l.trim() == format!("[{s}]")).map(|i| i + 1))
}

fn parse_literal(v: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

/// Applies `RWAVE_` overrides; returns the keys that were set.
fn apply_env(table: &mut toml::Table, env: &[(String, String)]) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    for (name, value) in env {
        let Some(path) = name.strip_prefix(ENV_PREFIX) else { continue };
        let parts: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if parts.iter().any(|p| p.is_empty()) || parts.len() > 2 {
            return Err(Error::Parse(format!("environment variable {name}: expected RWAVE_KEY or RWAVE_SECTION__KEY")));
        }
        let v = parse_literal(value);
        if parts.len() == 1 {
            table.insert(parts[0].clone(), v);
        } else {
            let sec = table.entry(parts[0].clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match sec {
                toml::Value::Table(t) => {
                    t.insert(parts[1].clone(), v);
                }
                _ => return Err(Error::Parse(format!("environment variable {name}: `{}` is not a section", parts[0]))),
            }
        }
        applied.push(parts.join("."));
    }
    Ok(applied)
}

impl RunConfig {
    /// Parses and validates `src`; `origin` prefixes diagnostics.
    pub fn parse(src: &str, origin: &str, env: &[(String, String)]) -> Result<Self> {
        let diag = |e: toml::de::Error| match e.span() {
            Some(sp) => Error::Parse(format!("{origin}:{}: {}", line_of(src, sp.start), e.message())),
            None => Error::Parse(format!("{origin}: {}", e.message())),
        };
        // Deserializing the file first keeps spans for type errors.
        let mut cfg: RunConfig = toml::from_str(src).map_err(diag)?;
        let mut table: toml::Table = toml::from_str(src).map_err(diag)?;
        let applied = apply_env(&mut table, env)?;
        if !applied.is_empty() {
            cfg = table.try_into().map_err(|e: toml::de::Error| Error::Parse(format!("environment override ({}): {}", applied.join(", "), e.message())))?;
        }
        cfg.validate(src, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, env: &[(String, String)]) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::parse(&src, &path.display().to_string(), env)
    }

    /// Environment variables with the override prefix.
    pub fn env_overrides() -> Vec<(String, String)> {
        std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
    }

    fn validate(&self, src: &str, origin: &str) -> Result<()> {
        let at = |section: Option<&str>, key: &str, e: Error| {
            let line = key_line(src, section, key).map(|l| format!(":{l}")).unwrap_or_default();
            match e {
                Error::Config(m) => Error::Config(format!("{origin}{line}: {m}")),
                Error::DegenerateNonlinearity(m) => Error::Config(format!("{origin}{line}: {m}")),
                other => other,
            }
        };
        let cfg_err = |section: Option<&str>, key: &str, m: String| at(section, key, Error::Config(m));
        self.nonlinearity().map_err(|e| at(Some("nonlinearity"), "terms", e))?;
        self.s_star_setting().map_err(|e| at(Some("nonlinearity"), "s_star", e))?;
        self.schedule().map_err(|e| at(Some("schedule"), "gamma0", e))?;
        self.split_n().map_err(|e| at(Some("cutoffs"), "n", e))?;
        if !(self.q2.w_ball > 0.0) || !(self.q2.slack >= 1.0) {
            return Err(cfg_err(Some("q2"), "w_ball", "w_ball must be positive and slack at least 1".into()));
        }
        if self.cutoffs.j_margin < 1 {
            return Err(cfg_err(Some("cutoffs"), "j_margin", "j_margin must be at least 1".into()));
        }
        if !(self.norms.s >= 0.5) {
            return Err(cfg_err(Some("norms"), "s", format!("s must be at least 1/2, got {}", self.norms.s)));
        }
        let t = &self.tolerances;
        for (key, v) in [("q2", t.q2), ("q1", t.q1), ("linear", t.linear), ("gradient", t.gradient)] {
            if !(v > 0.0) {
                return Err(cfg_err(Some("tolerances"), key, format!("tolerance `{key}` must be positive, got {v}")));
            }
        }
        if let Some(d) = self.sweep.deltas.iter().find(|d| !(**d >= 0.0 && **d <= self.schedule.delta0)) {
            return Err(cfg_err(Some("sweep"), "deltas", format!("δ = {d} is outside [0, δ0 = {}]", self.schedule.delta0)));
        }
        if self.sweep.deltas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(cfg_err(Some("sweep"), "deltas", "the δ grid must be strictly ascending".into()));
        }
        if self.cantor.etas.iter().any(|e| !(*e > 0.0)) || self.cantor.etas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(cfg_err(Some("cantor"), "etas", "η values must be positive and strictly decreasing".into()));
        }
        if self.cantor.k_max < 2 || self.cantor.samples == 0 {
            return Err(cfg_err(Some("cantor"), "k_max", "K_max must be at least 2 and samples positive".into()));
        }
        if let MelnikovSetting::Named(s) = &self.cantor.melnikov {
            if s != "critical" {
                return Err(cfg_err(Some("cantor"), "melnikov", format!("melnikov must be a number or \"critical\", got {s:?}")));
            }
        }
        if self.eigcheck.k >= self.eigcheck.j_max {
            return Err(cfg_err(Some("eigcheck"), "k", "eigcheck needs k < j_max".into()));
        }
        Ok(())
    }

    /// `None` when the sign is chosen automatically.
    pub fn s_star_setting(&self) -> Result<Option<f64>> {
        match &self.nonlinearity.s_star {
            SignSetting::Fixed(s) if *s == 1.0 || *s == -1.0 => Ok(Some(*s)),
            SignSetting::Named(n) if n == "auto" => Ok(None),
            other => Err(Error::Config(format!("s_star must be 1, -1 or \"auto\", got {other:?}"))),
        }
    }

    /// The nonlinearity with `s* = +1` (callers apply the chosen sign).
    pub fn nonlinearity(&self) -> Result<Nonlinearity> {
        let nl = &self.nonlinearity;
        Nonlinearity::new(nl.p, nl.terms.clone(), nl.rho, 1.0)
    }

    pub fn dioph(&self) -> Result<DiophantineParams> {
        DiophantineParams::new(self.diophantine.gamma, self.diophantine.tau)
    }

    pub fn schedule(&self) -> Result<NashMoserSchedule> {
        NashMoserSchedule::new(self.cutoffs.l0, self.norms.sigma_bar, self.schedule.gamma0, self.cutoffs.p_max, self.schedule.delta0, self.dioph()?)
    }

    /// `None` for automatic selection.
    pub fn split_n(&self) -> Result<Option<usize>> {
        let l = self.cutoffs.l0 << self.cutoffs.p_max;
        match &self.cutoffs.n {
            SplitSetting::Fixed(n) if *n >= 1 && *n <= l => Ok(Some(*n)),
            SplitSetting::Fixed(n) => Err(Error::Config(format!("N = {n} must lie in 1..={l}"))),
            SplitSetting::Named(s) if s == "auto" => Ok(None),
            SplitSetting::Named(s) => Err(Error::Config(format!("n must be an integer or \"auto\", got {s:?}"))),
        }
    }
}
