//! Configured end-to-end runs: sign choice, critical point with automatic
//! `N`, solves at given amplitudes, sweeps and Cantor estimates.

use rayon::prelude::*;
use serde::Serialize;

use crate::bifurcation::{choose_sign, find_critical_point, CriticalPoint, SearchConfig, SignChoice};
use crate::cantor::{CantorProblem, MelnikovModel};
use crate::config::{MelnikovSetting, RunConfig};
use crate::continuation::{continue_branch, solve_q1, BranchConfig, BranchPoint};
use crate::error::{Error, Result};
use crate::linearized::time_average_profile;
use crate::nash_moser::{NashMoserConfig, NashMoserSchedule};
use crate::nonlinearity::{melnikov_m_nodes, Problem};
use crate::q2::Q2Config;

/// How `s*` was fixed.
#[derive(Debug, Clone, Serialize)]
pub struct SignReport {
    pub s_star: f64,
    pub automatic: bool,
    pub choice: Option<SignChoice>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub problem: Problem,
    pub schedule: NashMoserSchedule,
    pub sign: SignReport,
}

/// Outcome at one amplitude of a sweep.
pub type SweepEntry = (f64, Result<BranchPoint>);

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        let nl = config.nonlinearity()?;
        let sign = match config.s_star_setting()? {
            Some(s) => SignReport { s_star: s, automatic: false, choice: None },
            None => {
                let c = choose_sign(nl.leading(), nl.p())?;
                SignReport { s_star: c.s_star, automatic: true, choice: Some(c) }
            }
        };
        let schedule = config.schedule()?;
        let l = schedule.l_max();
        let problem = Problem::new(nl.with_s_star(sign.s_star), l, l + config.cutoffs.j_margin);
        Ok(Self { config, problem, schedule, sign })
    }

    pub fn q2_config(&self, n: usize) -> Q2Config {
        let t = &self.config.tolerances;
        Q2Config { n, sigma: self.config.norms.sigma_bar, s: self.config.norms.s, tol: t.q2, max_iter: t.q2_max_iter, w_ball: self.config.q2.w_ball, slack: self.config.q2.slack, ..Default::default() }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            seed: self.config.seed,
            directions: self.config.search.directions,
            max_newton: self.config.search.max_newton,
            grad_tol: self.config.tolerances.gradient,
            ..Default::default()
        }
    }

    /// Critical point of the reduced functional. With automatic `N` the split
    /// index doubles from 1 until the tail contraction ratio is at most 1/2.
    pub fn critical_point(&self) -> Result<CriticalPoint> {
        let search = self.search_config();
        if let Some(n) = self.config.split_n()? {
            return find_critical_point(&self.problem, n, &self.q2_config(n), &search);
        }
        let cap = self.problem.l_max().min(self.problem.j_max());
        let mut n = 1;
        loop {
            let out = find_critical_point(&self.problem, n, &self.q2_config(n), &search);
            let retry = 2 * n <= cap;
            match out {
                Ok(cp) if cp.q2_ratio <= 0.5 || !retry => return Ok(cp),
                Ok(_) | Err(Error::ContractionFailure { .. }) | Err(Error::SearchFailure(_)) if retry => n *= 2,
                other => return other,
            }
        }
    }

    pub fn branch_config(&self, cp: &CriticalPoint) -> BranchConfig {
        let t = &self.config.tolerances;
        let q2 = Q2Config { r_bound: Some(cp.r_bound), ..self.q2_config(cp.n) };
        let mut nm = NashMoserConfig::new(self.schedule.clone(), q2);
        nm.newton_max = t.newton_max;
        nm.linear_tol = t.linear;
        nm.neumann_max = t.neumann_max;
        BranchConfig { nm, q1_tol: t.q1, q1_max: t.q1_max_iter }
    }

    /// Full solve at `δ`, started from the critical point.
    pub fn solve(&self, cp: &CriticalPoint, delta: f64) -> Result<BranchPoint> {
        if !(delta >= 0.0 && delta <= self.schedule.delta0) {
            return Err(Error::Domain(format!("δ = {delta} is outside [0, δ0 = {}]", self.schedule.delta0)));
        }
        solve_q1(&self.problem, delta, &cp.v1bar, cp, &self.branch_config(cp))
    }

    /// Independent solves over `deltas` in parallel, or one sequential
    /// continuation when the sweep is configured that way.
    pub fn sweep(&self, cp: &CriticalPoint, deltas: &[f64]) -> Vec<SweepEntry> {
        if self.config.sweep.sequential {
            let br = continue_branch(&self.problem, cp, &self.branch_config(cp), deltas);
            let mut out: Vec<SweepEntry> = br.points.into_iter().map(|p| (p.delta, Ok(p))).collect();
            for &d in &deltas[out.len()..] {
                let why = br.termination.as_ref().map_or("branch terminated".to_string(), |(at, r)| format!("branch terminated at δ = {at}: {r}"));
                out.push((d, Err(Error::Numeric(why))));
            }
            return out;
        }
        deltas.par_iter().map(|&d| (d, self.solve(cp, d))).collect()
    }

    /// `M` at the critical point.
    pub fn melnikov_at(&self, cp: &CriticalPoint) -> Result<f64> {
        let a = self.problem.du_g_grid(0.0, &cp.u0.resized(self.problem.l_max(), self.problem.j_max()))?;
        let (nodes, _) = time_average_profile(&self.problem.colloc, &a);
        Ok(melnikov_m_nodes(&self.problem.colloc, &nodes))
    }

    /// Whether the Cantor estimate needs a critical point for `M`.
    pub fn cantor_needs_critical_point(&self) -> bool {
        matches!(self.config.cantor.melnikov, MelnikovSetting::Named(_))
    }

    pub fn cantor_problem(&self, cp: Option<&CriticalPoint>) -> Result<CantorProblem> {
        let m = match (&self.config.cantor.melnikov, cp) {
            (MelnikovSetting::Value(m), _) => *m,
            (MelnikovSetting::Named(_), Some(cp)) => self.melnikov_at(cp)?,
            (MelnikovSetting::Named(_), None) => return Err(Error::Config("M from the critical point requires a solved critical point".into())),
        };
        CantorProblem::new(self.schedule.dioph, self.problem.nl.p(), self.sign.s_star, MelnikovModel::Constant(m), self.config.cantor.k_max)
    }
}
