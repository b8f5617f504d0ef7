//! The finite-dimensional equation `−Δv₁ = Π_{V₁} g(δ, x, v₁ + w̃ + v₂)` and
//! the branch `δ ↦ v₁(δ)` issuing from a critical point of `Φ̃₀`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bifurcation::{expand_step, least_squares, phase_fixed_columns, reduced_jacobian_column, reduced_real, CriticalPoint, V1Point};
use crate::error::{Error, Result};
use crate::field::{apply_l_omega, neg_delta_on_v, project_unchecked, sigma_s_norm, SubspaceTag, TimeFourierField};
use crate::linearized::{refresh_cache, LinearizedOperator, SpectrumCache};
use crate::nash_moser::{nash_moser_run, NashMoserConfig, NashMoserResult};
use crate::nonlinearity::Problem;
use crate::q2::Q2Solution;

/// Controls for solving the kernel equation along the branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    pub nm: NashMoserConfig,
    /// Target for the Euclidean norm of the reduced residual.
    pub q1_tol: f64,
    pub q1_max: usize,
}

impl BranchConfig {
    pub fn new(nm: NashMoserConfig) -> Self {
        Self { nm, q1_tol: 1e-11, q1_max: 25 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchPoint {
    pub delta: f64,
    pub omega: f64,
    pub eps: f64,
    pub v1: V1Point,
    #[serde(skip)]
    pub w: TimeFourierField,
    #[serde(skip)]
    pub v2: TimeFourierField,
    /// The range solution passed every stage's screening and converged.
    pub accepted: bool,
    pub rejected_stage: Option<usize>,
    pub rejection: Option<String>,
    pub q1_residual: f64,
    pub q1_iterations: usize,
    /// `‖ω²U_tt − U_xx + f(x,U)‖_{0,s} / ‖U‖_{0,s}` for `U = δ(v₁ + w + v₂)`.
    pub pde_residual: f64,
    /// `‖δ(v₁ + w + v₂) − δu₀‖_{σ̄/2,s}`.
    pub amplitude_deviation: f64,
    /// `‖v₁‖_{0,s+1}`.
    pub norm_v1: f64,
    /// `‖w‖_{σ̄/2,s}`.
    pub norm_w: f64,
    /// Smallest singular value of the phase-fixed Jacobian over the largest.
    pub jacobian_conditioning: f64,
    pub nondegenerate: bool,
    /// Jacobian columns where `ℒ` could not be inverted and `∂w` was dropped.
    pub jacobian_fallbacks: usize,
    pub nash_moser: NashMoserResult,
}

impl BranchPoint {
    /// `v₁ + w + v₂`.
    pub fn solution(&self) -> TimeFourierField {
        self.v1.to_field(self.w.l_max(), self.w.j_max()).add(&self.w).add(&self.v2)
    }
}

/// Relative residual of the unscaled equation at `U = δq`; at `δ = 0` the
/// kernel equation `−Δq = Π_V g(0, x, q)` is measured instead.
pub fn pde_residual(pb: &Problem, delta: f64, q: &TimeFourierField, s: f64) -> Result<f64> {
    if delta == 0.0 {
        let v = project_unchecked(q, SubspaceTag::V);
        let mut r = neg_delta_on_v(&v)?;
        r.axpy(-1.0, &project_unchecked(&pb.eval_g(0.0, &v)?, SubspaceTag::V));
        return Ok(sigma_s_norm(&r, 0.0, s) / sigma_s_norm(&v, 0.0, s));
    }
    let omega = pb.nl.omega(delta);
    let u = q.scale(delta);
    let f = pb.colloc.analyze(&pb.f_on_grid(&pb.colloc.synthesize(&u))?);
    let mut r = apply_l_omega(&u, omega).scale(-1.0);
    r.add_assign(&f);
    Ok(sigma_s_norm(&r, 0.0, s) / sigma_s_norm(&u, 0.0, s))
}

/// Reduced residual `Π_{V₁}[−Δv₁ − g(δ, v₁ + w + v₂)]` in real coordinates.
fn q1_residual(pb: &Problem, delta: f64, v1: &TimeFourierField, nm: &NashMoserResult, n: usize) -> Result<Vec<f64>> {
    let u = v1.add(&nm.w).add(&nm.tail.v2);
    let g = project_unchecked(&pb.eval_g(delta, &u)?, SubspaceTag::V1(n));
    let mut r = neg_delta_on_v(v1)?;
    r.axpy(-1.0, &g);
    Ok(reduced_real(&r, n))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Jacobian of the reduced residual with `w̃` and `v₂` differentiated
/// implicitly. Returns the matrix and the count of columns where `ℒ` could
/// not be inverted.
fn q1_jacobian(pb: &Problem, tail: &Q2Solution, eps: f64, cfg: &BranchConfig, n: usize, cache: &mut Option<SpectrumCache>) -> Result<(DMatrix<f64>, usize)> {
    let l = pb.l_max();
    let sigma = 0.5 * cfg.nm.schedule.sigma_bar;
    let mut fallbacks = 0;
    if eps != 0.0 {
        refresh_cache(pb, tail.du_g(), eps, l, cache)?;
    }
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for c in 0..2 * n {
        let mut x = vec![0.0; 2 * n];
        x[c] = 1.0;
        let e = V1Point::from_real(&x).to_field(l, pb.j_max());
        let mut h = e.clone();
        if eps != 0.0 {
            let drive = project_unchecked(&pb.multiply(tail.du_g(), &e.add(&tail.dv2_dw_apply(pb, &e)?)), SubspaceTag::W).scale(eps);
            let op = LinearizedOperator::new(pb, tail.du_g(), Some(tail), eps, cache.as_ref().expect("cache built"));
            match op.solve(&drive, sigma, cfg.nm.s, cfg.nm.linear_tol, cfg.nm.neumann_max) {
                Ok(sol) => h.add_assign(&sol.h),
                Err(Error::InversionFailure { .. }) => fallbacks += 1,
                Err(err) => return Err(err),
            }
        }
        jac.set_column(c, &DVector::from_vec(reduced_jacobian_column(pb, tail, &h, n)?));
    }
    Ok((jac, fallbacks))
}

/// Solves the kernel equation at `δ` by Gauss-Newton in the phase-fixed
/// chart, re-solving the range and tail equations at every iterate.
pub fn solve_q1(pb: &Problem, delta: f64, start: &V1Point, cp: &CriticalPoint, cfg: &BranchConfig) -> Result<BranchPoint> {
    let n = start.n();
    let l = pb.l_max();
    let eps = pb.nl.epsilon(delta);
    let mut x = start.phase_fix().to_real();
    let field_of = |x: &[f64]| V1Point::from_real(x).to_field(l, pb.j_max());
    let mut nm = nash_moser_run(pb, delta, &field_of(&x), &cfg.nm)?;
    let mut r = q1_residual(pb, delta, &field_of(&x), &nm, n)?;
    let mut history = vec![norm(&r)];
    let mut cache = None;
    let mut iterations = 0;
    let mut fallbacks = 0;
    let mut conditioning;
    loop {
        let (jac, fb) = q1_jacobian(pb, &nm.tail, eps, cfg, n, &mut cache)?;
        fallbacks = fallbacks.max(fb);
        let reduced = phase_fixed_columns(&jac);
        let sv = reduced.clone().svd(false, false).singular_values;
        conditioning = sv.min() / sv.max().max(f64::MIN_POSITIVE);
        if norm(&r) <= cfg.q1_tol {
            break;
        }
        if iterations >= cfg.q1_max {
            return Err(Error::NonConvergence { history });
        }
        let b = DVector::from_iterator(2 * n, r.iter().map(|v| -v));
        let d = expand_step(&least_squares(&reduced, &b)?);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let trial = nash_moser_run(pb, delta, &field_of(&xt), &cfg.nm).and_then(|nmt| {
                let rt = q1_residual(pb, delta, &field_of(&xt), &nmt, n)?;
                Ok((nmt, rt))
            });
            if let Ok((nmt, rt)) = trial {
                if norm(&rt) < norm(&r) || norm(&rt) <= cfg.q1_tol {
                    accepted = Some((xt, nmt, rt));
                    break;
                }
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((xt, nmt, rt)) => {
                x = xt;
                nm = nmt;
                r = rt;
                history.push(norm(&r));
            }
            None => return Err(Error::NonConvergence { history }),
        }
    }
    let v1 = V1Point { phase_fixed: true, ..V1Point::from_real(&x) };
    let v1f = field_of(&x);
    let norm_v1 = sigma_s_norm(&v1f, 0.0, cfg.nm.s + 1.0);
    if norm_v1 <= 1e-6 * cp.r_bound {
        return Err(Error::Numeric(format!("kernel Newton collapsed onto the trivial solution at δ = {delta}")));
    }
    let q = v1f.add(&nm.w).add(&nm.tail.v2);
    let s = cfg.nm.s;
    let half = 0.5 * cfg.nm.schedule.sigma_bar;
    let u0 = cp.u0.resized(l, pb.j_max());
    Ok(BranchPoint {
        delta,
        omega: nm.omega,
        eps,
        pde_residual: pde_residual(pb, delta, &q, s)?,
        amplitude_deviation: delta.abs() * sigma_s_norm(&q.sub(&u0), half, s),
        norm_v1,
        norm_w: sigma_s_norm(&nm.w, half, s),
        q1_residual: norm(&r),
        q1_iterations: iterations,
        jacobian_conditioning: conditioning,
        nondegenerate: conditioning >= 1e-8,
        jacobian_fallbacks: fallbacks,
        accepted: nm.accepted,
        rejected_stage: nm.rejected_stage,
        rejection: nm.rejection.clone(),
        w: nm.w.clone(),
        v2: nm.tail.v2.clone(),
        v1,
        nash_moser: nm,
    })
}

/// A branch computed by sequential continuation.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionBranch {
    pub points: Vec<BranchPoint>,
    /// `(δ, reason)` where the continuation stopped early.
    pub termination: Option<(f64, String)>,
}

/// Follows `δ ↦ v₁(δ)` over `deltas` (ascending) with a secant predictor.
pub fn continue_branch(pb: &Problem, cp: &CriticalPoint, cfg: &BranchConfig, deltas: &[f64]) -> SolutionBranch {
    let mut points: Vec<BranchPoint> = Vec::new();
    let mut termination = None;
    for &delta in deltas {
        let guess = match points.len() {
            0 => cp.v1bar.clone(),
            1 => points[0].v1.clone(),
            k => {
                let (a, b) = (&points[k - 2], &points[k - 1]);
                let s = (delta - b.delta) / (b.delta - a.delta);
                let amps = b.v1.amps.iter().zip(&a.v1.amps).map(|(y, x)| y + (y - x) * s).collect();
                V1Point { amps, phase_fixed: true }
            }
        };
        match solve_q1(pb, delta, &guess, cp, cfg) {
            Ok(pt) => {
                let lost = !pt.nondegenerate;
                points.push(pt);
                if lost {
                    termination = Some((delta, "loss of non-degeneracy along the branch".to_string()));
                    break;
                }
            }
            Err(e) => {
                termination = Some((delta, e.to_string()));
                break;
            }
        }
    }
    SolutionBranch { points, termination }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bifurcation::{find_critical_point, SearchConfig};
    use crate::nash_moser::{DiophantineParams, NashMoserSchedule};
    use crate::nonlinearity::Nonlinearity;
    use crate::q2::Q2Config;

    fn setup() -> (Problem, CriticalPoint, BranchConfig) {
        let sch = NashMoserSchedule::new(4, 0.1, 0.02, 2, 0.15, DiophantineParams::new(1e-3, 1.5).unwrap()).unwrap();
        let pb = Problem::new(Nonlinearity::pure_power(3), sch.l_max(), sch.l_max() + 16);
        let q2 = Q2Config { n: 2, ..Default::default() };
        let cp = find_critical_point(&pb, 2, &q2, &SearchConfig::default()).unwrap();
        let q2 = Q2Config { r_bound: Some(cp.r_bound), ..q2 };
        (pb, cp, BranchConfig::new(NashMoserConfig::new(sch, q2)))
    }

    #[test]
    fn branch_starts_at_the_critical_point_and_solves_the_equation() {
        let (pb, cp, cfg) = setup();
        let br = continue_branch(&pb, &cp, &cfg, &[0.0, 0.03, 0.06]);
        assert!(br.termination.is_none(), "{:?}", br.termination);
        let p0 = &br.points[0];
        let d: f64 = p0.v1.amps.iter().zip(&cp.v1bar.amps).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(d <= 1e-10, "{d:e}");
        for p in &br.points[1..] {
            assert!(p.accepted);
            assert!(p.pde_residual <= 1e-8, "δ = {}: {:e}", p.delta, p.pde_residual);
            assert!((p.omega * p.omega - 1.0 - 2.0 * p.delta * p.delta).abs() <= 4.0 * f64::EPSILON);
        }
        // The pure cubic depends on δ only through ε = δ², so the offset from
        // the critical point is even in δ: growth between δ² and δ⁴ on doubling.
        let off = |p: &BranchPoint| p.v1.amps.iter().zip(&p0.v1.amps).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        let ratio = off(&br.points[2]) / off(&br.points[1]);
        assert!((3.5..=17.0).contains(&ratio), "{ratio}");
    }
}
