//! Newton iteration on the nested Galerkin spaces `W^{(p)}` (time modes
//! `l ≤ L_p = L₀2^p`) with shrinking analyticity strips and first-order
//! Melnikov screening.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{apply_l_omega_sq, mode_weight, project_unchecked, sigma_s_norm, SubspaceTag, TimeFourierField};
use crate::linearized::{refresh_cache, time_average_profile, LinearizedOperator, SpectrumCache};
use crate::nonlinearity::{melnikov_m_nodes, Problem};
use crate::q2::{solve_q2, Q2Config, Q2Solution};

/// Constants of the first-order Melnikov conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiophantineParams {
    pub gamma: f64,
    pub tau: f64,
}

impl DiophantineParams {
    pub fn new(gamma: f64, tau: f64) -> Result<Self> {
        if !(tau > 1.0 && tau < 2.0) {
            return Err(Error::Config(format!("τ must lie strictly inside (1, 2), got {tau}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("γ must lie in [0, 1), got {gamma}")));
        }
        Ok(Self { gamma, tau })
    }

    /// Pairs with `k ≤ 1/(3|ε|)` satisfy the first condition automatically.
    pub fn k_gate(eps: f64) -> f64 {
        if eps == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (3.0 * eps.abs())
        }
    }

    pub fn bound(&self, k: usize, j: usize) -> f64 {
        self.gamma / ((k + j) as f64).powf(self.tau)
    }
}

/// `Σ_{p≥0} 1/(p²+1) = (1 + π coth π)/2`.
pub fn schedule_loss_sum() -> f64 {
    let pi = std::f64::consts::PI;
    0.5 * (1.0 + pi / pi.tanh())
}

/// Cutoffs, analyticity losses and Diophantine constants of the scheme.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashMoserSchedule {
    pub l0: usize,
    pub sigma_bar: f64,
    pub gamma0: f64,
    pub p_max: usize,
    pub delta0: f64,
    pub dioph: DiophantineParams,
}

impl NashMoserSchedule {
    pub fn new(l0: usize, sigma_bar: f64, gamma0: f64, p_max: usize, delta0: f64, dioph: DiophantineParams) -> Result<Self> {
        if l0 < 1 {
            return Err(Error::Config("L0 must be at least 1".into()));
        }
        if !(sigma_bar > 0.0) {
            return Err(Error::Config(format!("σ̄ must be positive, got {sigma_bar}")));
        }
        if !(gamma0 > 0.0) {
            return Err(Error::Config(format!("γ0 must be positive, got {gamma0}")));
        }
        if gamma0 * schedule_loss_sum() > 0.5 * sigma_bar {
            return Err(Error::Config(format!(
                "total analyticity loss γ0·Σ1/(p²+1) = {:.6} exceeds σ̄/2 = {:.6}",
                gamma0 * schedule_loss_sum(),
                0.5 * sigma_bar
            )));
        }
        if !(delta0 > 0.0) {
            return Err(Error::Config(format!("δ0 must be positive, got {delta0}")));
        }
        if p_max > 20 || (l0 << p_max) > 1 << 16 {
            return Err(Error::Config(format!("L0·2^p_max = {}·2^{p_max} is too large", l0)));
        }
        Ok(Self { l0, sigma_bar, gamma0, p_max, delta0, dioph })
    }

    pub fn l_p(&self, p: usize) -> usize {
        self.l0 << p
    }

    pub fn l_max(&self) -> usize {
        self.l_p(self.p_max)
    }

    pub fn gamma_p(&self, p: usize) -> f64 {
        self.gamma0 / ((p * p) as f64 + 1.0)
    }

    /// `σ_p = σ̄ − Σ_{q<p} γ_q`.
    pub fn sigma_p(&self, p: usize) -> f64 {
        self.sigma_bar - (0..p).map(|q| self.gamma_p(q)).sum::<f64>()
    }

    /// `min(1e−10, |ε| 2^{−3p/2})`.
    pub fn stage_tolerance(&self, eps: f64, p: usize) -> f64 {
        1e-10f64.min(eps.abs() * 2f64.powf(-1.5 * p as f64))
    }
}

/// A pair violating a Melnikov inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub k: usize,
    pub j: usize,
    /// 1 for `|ωk − j|`, 2 for `|ωk − j − εM/(2j)|`.
    pub condition: u8,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiophantineReport {
    pub pass: bool,
    /// Violations with `k > 1/(3|ε|)`.
    pub violations: Vec<Violation>,
    /// Violations with `k ≤ 1/(3|ε|)`, where none are expected.
    pub anomalies: Vec<Violation>,
    /// `min (value − bound)` over all checked pairs and both conditions.
    pub worst_margin: f64,
    pub k_gate: f64,
    pub warning: Option<String>,
}

/// Checks `|ωk − j| ≥ γ/(k+j)^τ` and `|ωk − j − εM/(2j)| ≥ γ/(k+j)^τ` for all
/// `k ≠ j` in `1..=L_p`.
pub fn diophantine_check(omega: f64, eps: f64, m: f64, dp: &DiophantineParams, lp: usize) -> DiophantineReport {
    let gate = DiophantineParams::k_gate(eps);
    let mut violations = Vec::new();
    let mut anomalies = Vec::new();
    let mut worst = f64::INFINITY;
    for k in 1..=lp {
        let wk = omega * k as f64;
        for j in (1..=lp).filter(|&j| j != k) {
            let b = dp.bound(k, j);
            let v1 = (wk - j as f64).abs();
            let v2 = (wk - j as f64 - eps * m / (2.0 * j as f64)).abs();
            for (cond, v) in [(1u8, v1), (2u8, v2)] {
                worst = worst.min(v - b);
                if v < b {
                    let rec = Violation { k, j, condition: cond, value: v, bound: b };
                    if k as f64 > gate {
                        violations.push(rec);
                    } else {
                        anomalies.push(rec);
                    }
                }
            }
        }
    }
    let warning = (dp.gamma == 0.0).then(|| "γ = 0 makes the Diophantine screen vacuous".to_string());
    DiophantineReport { pass: violations.is_empty() && anomalies.is_empty(), violations, anomalies, worst_margin: worst, k_gate: gate, warning }
}

/// Solver controls for a Nash-Moser run.
#[derive(Debug, Clone, PartialEq)]
pub struct NashMoserConfig {
    pub schedule: NashMoserSchedule,
    pub q2: Q2Config,
    pub s: f64,
    /// Newton steps allowed per stage.
    pub newton_max: usize,
    /// Relative residual for the inner linear solves.
    pub linear_tol: f64,
    pub neumann_max: usize,
}

impl NashMoserConfig {
    pub fn new(schedule: NashMoserSchedule, q2: Q2Config) -> Self {
        let s = q2.s;
        Self { schedule, q2, s, newton_max: 12, linear_tol: 1e-13, neumann_max: 400 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub p: usize,
    pub l_p: usize,
    pub sigma_p: f64,
    pub gamma_p: f64,
    /// Target residual: the schedule tolerance, raised to the rounding floor when needed.
    pub tolerance: f64,
    pub noise_floor: f64,
    /// Residual of the previous iterate for the stage-`p` problem.
    pub entering_residual: f64,
    pub residual: f64,
    pub newton_steps: usize,
    pub accepted: bool,
    pub melnikov_m: f64,
    pub diophantine_worst_margin: f64,
    pub diophantine_violations: usize,
    pub diophantine_anomalies: usize,
    /// `min_k α_k k^{τ−1} / γ` (≥ 1 means the small-divisor bound holds).
    pub alpha_margin: f64,
    /// `min α_kα_l / |ε|^{τ−1}` over the close pairs, when `ε ≠ 0`.
    pub product_min: Option<f64>,
    pub neumann_ratio: f64,
    pub spectrum_rebuilds: usize,
    pub q2_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NashMoserResult {
    pub delta: f64,
    pub eps: f64,
    pub omega: f64,
    #[serde(skip)]
    pub w: TimeFourierField,
    #[serde(skip)]
    pub tail: Q2Solution,
    /// All stages up to `p_max` accepted and converged.
    pub accepted: bool,
    pub rejected_stage: Option<usize>,
    pub rejection: Option<String>,
    pub stages: Vec<StageRecord>,
    /// `‖w‖_{σ̄/2,s} / |ε|`.
    pub w_norm_over_eps: Option<f64>,
    pub diophantine_warning: Option<String>,
    /// All `α_k` at the last accepted stage.
    pub alphas: Vec<f64>,
}

/// `P_p(L_ω w − ε Π_W g(δ, v₁ + w + v₂))`.
fn range_residual(pb: &Problem, delta: f64, eps: f64, v1: &TimeFourierField, w: &TimeFourierField, tail: &Q2Solution, lp: usize) -> Result<(TimeFourierField, f64)> {
    let u = v1.add(w).add(&tail.v2);
    let grid = pb.colloc.synthesize(&u);
    let (g, _) = pb.g_on_grid(delta, &grid, false)?;
    let gmax = g.max_abs();
    let g = pb.colloc.analyze(&g);
    let mut r = apply_l_omega_sq(w, 1.0 + 2.0 * eps);
    r.axpy(-eps, &g);
    Ok((project_unchecked(&r, SubspaceTag::Wp(lp)), gmax))
}

/// `‖·‖_{σ,s}` of the field with unit coefficients on `W^{(p)}`.
fn unit_norm(lp: usize, j_max: usize, sigma: f64, s: f64) -> f64 {
    let h1: f64 = (1..=j_max).map(|j| 0.5 * std::f64::consts::PI * (1.0 + (j * j) as f64)).sum();
    (0..=lp)
        .map(|l| if l == 0 { 1.0 } else { 2.0 } * mode_weight(l, sigma, s) * h1)
        .sum::<f64>()
        .sqrt()
}

/// Runs stages `p = 0..=p_max` from `w₀ = 0`.
pub fn nash_moser_run(pb: &Problem, delta: f64, v1: &TimeFourierField, cfg: &NashMoserConfig) -> Result<NashMoserResult> {
    let sch = &cfg.schedule;
    if delta.abs() > sch.delta0 {
        return Err(Error::Domain(format!("δ = {delta} exceeds δ0 = {}", sch.delta0)));
    }
    if sch.l_max() > pb.l_max() {
        return Err(Error::InvalidCutoff(format!("L_pmax = {} exceeds the field cutoff L = {}", sch.l_max(), pb.l_max())));
    }
    let eps = pb.nl.epsilon(delta);
    let omega = pb.nl.omega(delta);
    let w2m1 = 2.0 * eps;
    let dp = sch.dioph;
    let mut w = pb.zeros();
    let mut tail = solve_q2(pb, delta, v1, &w, &cfg.q2)?;
    let mut cache: Option<SpectrumCache> = None;
    let mut stages = Vec::new();
    let mut alphas = Vec::new();
    let warning = (dp.gamma == 0.0).then(|| "γ = 0 makes the Diophantine screen vacuous".to_string());

    let reject = |stages: Vec<StageRecord>, w: TimeFourierField, tail: Q2Solution, p: usize, why: String, alphas: Vec<f64>| NashMoserResult {
        delta,
        eps,
        omega,
        w,
        tail,
        accepted: false,
        rejected_stage: Some(p),
        rejection: Some(why),
        stages,
        w_norm_over_eps: None,
        diophantine_warning: warning.clone(),
        alphas,
    };

    for p in 0..=sch.p_max {
        let lp = sch.l_p(p);
        let sigma = sch.sigma_p(p);
        let norm = |u: &TimeFourierField| sigma_s_norm(u, sigma, cfg.s);
        let (a0_nodes, _) = time_average_profile(&pb.colloc, tail.du_g());
        let m = melnikov_m_nodes(&pb.colloc, &a0_nodes);
        let dio = diophantine_check(omega, eps, m, &dp, lp);
        let mut rec = StageRecord {
            p,
            l_p: lp,
            sigma_p: sigma,
            gamma_p: sch.gamma_p(p),
            tolerance: 0.0,
            noise_floor: 0.0,
            entering_residual: f64::NAN,
            residual: f64::NAN,
            newton_steps: 0,
            accepted: false,
            melnikov_m: m,
            diophantine_worst_margin: dio.worst_margin,
            diophantine_violations: dio.violations.len(),
            diophantine_anomalies: dio.anomalies.len(),
            alpha_margin: f64::NAN,
            product_min: None,
            neumann_ratio: 0.0,
            spectrum_rebuilds: 0,
            q2_ratio: tail.ratio,
        };
        if !dio.pass {
            let first = dio.violations.first().or(dio.anomalies.first()).expect("failing report has a violation");
            let why = format!(
                "Diophantine condition {} fails at (k, j) = ({}, {}): {:.3e} < {:.3e}",
                first.condition, first.k, first.j, first.value, first.bound
            );
            stages.push(rec);
            return Ok(reject(stages, w, tail, p, why, alphas));
        }

        let (mut r, mut gmax) = range_residual(pb, delta, eps, v1, &w, &tail, lp)?;
        let mut res = norm(&r);
        rec.entering_residual = res;
        let mut history = vec![res];
        let unit = unit_norm(lp, pb.j_max(), sigma, cfg.s);
        loop {
            let lw = norm(&project_unchecked(&apply_l_omega_sq(&w, 1.0 + w2m1), SubspaceTag::Wp(lp)));
            let floor = 64.0 * f64::EPSILON * (lw + eps.abs() * gmax * unit);
            rec.noise_floor = floor;
            rec.tolerance = sch.stage_tolerance(eps, p).max(floor);

            if refresh_cache(pb, tail.du_g(), eps, lp, &mut cache)? {
                rec.spectrum_rebuilds += 1;
                let c = cache.as_ref().expect("cache built");
                alphas = c.alphas(w2m1);
                let mut margin = f64::INFINITY;
                for (k, &a) in alphas.iter().enumerate().skip(1) {
                    let need = dp.gamma / (k as f64).powf(dp.tau - 1.0);
                    margin = margin.min(if need > 0.0 { a / need } else { f64::INFINITY });
                    if a < need {
                        rec.alpha_margin = margin;
                        let why = format!("small divisor α_{k} = {a:.3e} below γ/k^(τ−1) = {need:.3e}");
                        stages.push(rec);
                        return Ok(reject(stages, w, tail, p, why, alphas));
                    }
                }
                rec.alpha_margin = if rec.alpha_margin.is_nan() { margin } else { rec.alpha_margin.min(margin) };
                if eps != 0.0 {
                    let scale = eps.abs().powf(dp.tau - 1.0);
                    let mut pmin = rec.product_min.unwrap_or(f64::INFINITY);
                    for k in 1..=lp {
                        for l in 1..=lp {
                            let near = (k.max(l) as f64).powf((2.0 - dp.tau) / dp.tau);
                            if k != l && (k.abs_diff(l) as f64) <= near {
                                pmin = pmin.min(alphas[k] * alphas[l] / scale);
                            }
                        }
                    }
                    if pmin.is_finite() {
                        rec.product_min = Some(pmin);
                    }
                }
            }

            if res <= rec.tolerance {
                break;
            }
            if rec.newton_steps >= cfg.newton_max {
                return Err(Error::NonConvergence { history });
            }
            let op = LinearizedOperator::new(pb, tail.du_g(), Some(&tail), eps, cache.as_ref().expect("cache built"));
            let sol = match op.solve(&r.scale(-1.0), sigma, cfg.s, cfg.linear_tol, cfg.neumann_max) {
                Ok(sol) => sol,
                Err(Error::InversionFailure { ratio, iterations }) => {
                    rec.neumann_ratio = ratio;
                    let why = format!("linearized operator not invertible by Neumann series (ratio {ratio:.3} after {iterations} iterations)");
                    stages.push(rec);
                    return Ok(reject(stages, w, tail, p, why, alphas));
                }
                Err(e) => return Err(e),
            };
            rec.neumann_ratio = rec.neumann_ratio.max(sol.ratio);
            w.add_assign(&sol.h);
            tail = solve_q2(pb, delta, v1, &w, &cfg.q2)?;
            (r, gmax) = range_residual(pb, delta, eps, v1, &w, &tail, lp)?;
            res = norm(&r);
            rec.newton_steps += 1;
            history.push(res);
            let n = history.len();
            if n >= 4 && history[n - 1] > 0.9 * history[n - 2] && history[n - 2] > 0.9 * history[n - 3] && res > rec.tolerance {
                return Err(Error::NonConvergence { history });
            }
        }
        rec.residual = res;
        rec.accepted = true;
        rec.q2_ratio = tail.ratio;
        stages.push(rec);
    }
    let w_norm_over_eps = (eps != 0.0).then(|| sigma_s_norm(&w, 0.5 * sch.sigma_bar, cfg.s) / eps.abs());
    Ok(NashMoserResult {
        delta,
        eps,
        omega,
        w,
        tail,
        accepted: true,
        rejected_stage: None,
        rejection: None,
        stages,
        w_norm_over_eps,
        diophantine_warning: warning,
        alphas,
    })
}

/// Whether consecutive entering residuals decay like `r_{p+1} ≤ r_p^{3/2}`
/// once below `1e−2`. Pairs where `r_p^{3/2}` is under the next stage's
/// rounding floor are exempt. Returns `(checked pairs, all satisfied)`.
pub fn super_geometric(stages: &[StageRecord]) -> (usize, bool) {
    let mut checked = 0;
    let mut ok = true;
    for w in stages.windows(2) {
        let (a, b) = (w[0].entering_residual, w[1].entering_residual);
        if !(a < 1e-2) {
            continue;
        }
        let target = a.powf(1.5);
        if target <= w[1].noise_floor.max(w[1].tolerance) && b <= w[1].tolerance.max(w[1].noise_floor) {
            continue;
        }
        checked += 1;
        if b > target {
            ok = false;
        }
    }
    (checked, ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::Nonlinearity;
    use num_complex::Complex64;

    fn dp() -> DiophantineParams {
        DiophantineParams::new(1e-3, 1.5).unwrap()
    }

    fn schedule(l0: usize, p_max: usize) -> NashMoserSchedule {
        NashMoserSchedule::new(l0, 0.1, 0.02, p_max, 0.15, dp()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = schedule(4, 5);
        assert_eq!(s.l_p(3), 32);
        for p in 0..=5 {
            assert!(s.sigma_p(p) > 0.5 * s.sigma_bar);
            assert!(s.sigma_p(p + 1) < s.sigma_p(p));
        }
        assert!((schedule_loss_sum() - (0..100000u32).map(|p| 1.0 / (f64::from(p).powi(2) + 1.0)).sum::<f64>()).abs() < 1e-4);
        assert!(NashMoserSchedule::new(4, 0.1, 0.05, 3, 0.15, dp()).is_err());
        assert!(DiophantineParams::new(1e-3, 2.0).is_err());
        assert!(DiophantineParams::new(1e-3, 1.0).is_err());
        assert!(DiophantineParams::new(1.0, 1.5).is_err());
    }

    #[test]
    fn exhaustive_screen_at_small_cutoff() {
        let omega = 1.02f64.sqrt();
        let eps = 0.01;
        let rep = diophantine_check(omega, eps, 0.0, &dp(), 8);
        // Independent scan of the same pairs.
        let mut worst = f64::INFINITY;
        let mut fail = false;
        for k in 1..=8usize {
            for j in 1..=8usize {
                if j != k {
                    let d = (omega * k as f64 - j as f64).abs() - 1e-3 / ((k + j) as f64).powf(1.5);
                    worst = worst.min(d);
                    fail |= d < 0.0;
                }
            }
        }
        assert_eq!(rep.pass, !fail);
        assert!(rep.pass);
        assert!((rep.worst_margin - worst).abs() < 1e-15);
    }

    #[test]
    fn constructed_near_resonance_fails() {
        let gamma = 1e-3;
        let omega = 1.0 + gamma / 2.0;
        let eps = (omega * omega - 1.0) / 2.0;
        let rep = diophantine_check(omega, eps, 0.0, &dp(), 2048);
        assert!(!rep.pass);
        assert!(rep.violations.iter().any(|v| v.k == 2000 && v.j == 2001));
        assert!(rep.anomalies.is_empty());
    }

    #[test]
    fn zero_gamma_is_vacuous_with_warning() {
        let d = DiophantineParams::new(0.0, 1.5).unwrap();
        let rep = diophantine_check(1.0 + 1e-9, 5e-10, 0.0, &d, 64);
        assert!(rep.pass && rep.warning.is_some());
    }

    #[test]
    fn unperturbed_case_is_trivial() {
        let s = schedule(4, 2);
        let pb = Problem::new(Nonlinearity::pure_power(3), s.l_max(), s.l_max() + 16);
        let v1 = TimeFourierField::single_mode(pb.l_max(), pb.j_max(), 1, 1, Complex64::new(0.5, 0.0));
        let cfg = NashMoserConfig::new(s, Q2Config::default());
        let r = nash_moser_run(&pb, 0.0, &v1, &cfg).unwrap();
        assert!(r.accepted && r.w.is_zero());
        assert!(r.stages.iter().all(|s| s.newton_steps == 0));
    }

    #[test]
    fn cubic_run_converges_with_small_residual() {
        let s = schedule(4, 2);
        let pb = Problem::new(Nonlinearity::pure_power(3), s.l_max(), s.l_max() + 16);
        let v1 = TimeFourierField::single_mode(pb.l_max(), pb.j_max(), 1, 1, Complex64::new(0.8, 0.0));
        let cfg = NashMoserConfig::new(s.clone(), Q2Config::default());
        let r = nash_moser_run(&pb, 0.05, &v1, &cfg).unwrap();
        assert!(r.accepted, "{:?}", r.rejection);
        let last = r.stages.last().unwrap();
        assert!(last.residual <= 1e-9, "{:e}", last.residual);
        let ratio = r.w_norm_over_eps.unwrap();
        assert!(ratio > 0.0 && ratio < 10.0, "{ratio}");
        // Nesting and σ bookkeeping.
        for w in r.stages.windows(2) {
            assert!(w[1].sigma_p < w[0].sigma_p && w[1].sigma_p > 0.5 * s.sigma_bar);
        }
        let (_, ok) = super_geometric(&r.stages);
        assert!(ok, "{:?}", r.stages.iter().map(|s| s.entering_residual).collect::<Vec<_>>());
    }

    #[test]
    fn constructed_resonant_delta_is_rejected() {
        // p = 2: ω = √(1 + 2δ) = 17/16 puts (k, j) = (16, 17) on resonance.
        let delta = (289.0 / 256.0 - 1.0) / 2.0;
        let s = schedule(8, 1);
        let pb = Problem::new(Nonlinearity::pure_power(2), s.l_max(), s.l_max() + 16);
        let cfg = NashMoserConfig::new(s, Q2Config::default());
        let r = nash_moser_run(&pb, delta, &pb.zeros(), &cfg).unwrap();
        assert!(!r.accepted);
        assert_eq!(r.rejected_stage, Some(1));
        assert!(r.stages[0].accepted && !r.stages[1].accepted);
    }

    #[test]
    fn delta_beyond_delta0_is_refused() {
        let s = schedule(4, 1);
        let pb = Problem::new(Nonlinearity::pure_power(3), 8, 24);
        let cfg = NashMoserConfig::new(s, Q2Config::default());
        assert!(matches!(nash_moser_run(&pb, 0.2, &pb.zeros(), &cfg), Err(Error::Domain(_))));
    }
}
