//! The infinite-dimensional kernel equation
//! `−Δv₂ = Π_{V₂} g(δ, x, v₁ + w + v₂)`, solved by Picard iteration of
//! `𝒩(v₂) = (−Δ)^{-1} Π_{V₂} g(δ, x, v₁ + w + v₂)`.

use crate::error::{Error, Result};
use crate::field::{inv_neg_delta_on_v, project_unchecked, sigma_s_norm, SubspaceTag, TimeFourierField};
use crate::grid::GridValues;
use crate::iteration::{iterate, Controls, Failure};
use crate::nonlinearity::Problem;

/// Parameters of the kernel-tail contraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Q2Config {
    /// Split index: `V₁` holds modes `1 ≤ l ≤ N`, `V₂` the rest.
    pub n: usize,
    pub sigma: f64,
    pub s: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Radius of the admissible ball for `w` in `‖·‖_{σ,s}`.
    pub w_ball: f64,
    /// A-priori bound `R`; when set, `‖v₁‖_{0,s+1} ≤ 2R` is enforced.
    pub r_bound: Option<f64>,
    /// Multiplicative slack on both ball constraints.
    pub slack: f64,
}

impl Default for Q2Config {
    fn default() -> Self {
        Self { n: 1, sigma: 0.1, s: 1.0, tol: 1e-13, max_iter: 500, w_ball: 1.0, r_bound: None, slack: 1.0 }
    }
}

impl Q2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("σ must be positive, got {}", self.sigma)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }

    fn norm(&self, u: &TimeFourierField) -> f64 {
        sigma_s_norm(u, self.sigma, self.s)
    }
}

/// A converged kernel tail together with the data needed for its derivative.
#[derive(Debug, Clone)]
pub struct Q2Solution {
    pub v2: TimeFourierField,
    pub delta: f64,
    pub n: usize,
    /// Largest observed Picard step ratio.
    pub ratio: f64,
    pub iterations: usize,
    cfg: Q2Config,
    /// `∂_u g(δ, x, v₁ + w + v₂)` on the collocation grid.
    du_g: GridValues,
}

fn check_in(u: &TimeFourierField, tag: SubspaceTag, name: &str) -> Result<()> {
    let off = u.sub(&project_unchecked(u, tag)).max_abs_coeff();
    if off > 0.0 {
        return Err(Error::Domain(format!("{name} has content outside {tag:?} (max {off:e})")));
    }
    Ok(())
}

fn check_inputs(pb: &Problem, v1: &TimeFourierField, w: &TimeFourierField, cfg: &Q2Config) -> Result<()> {
    cfg.validate()?;
    if cfg.n > pb.l_max() {
        return Err(Error::InvalidCutoff(format!("N = {} exceeds L = {}", cfg.n, pb.l_max())));
    }
    check_in(v1, SubspaceTag::V1(cfg.n), "v1")?;
    check_in(w, SubspaceTag::W, "w")?;
    let wn = cfg.norm(w);
    if wn > cfg.w_ball * cfg.slack {
        return Err(Error::Domain(format!("‖w‖_(σ,s) = {wn:e} exceeds the ball radius {}", cfg.w_ball * cfg.slack)));
    }
    if let Some(r) = cfg.r_bound {
        let vn = sigma_s_norm(v1, 0.0, cfg.s + 1.0);
        if vn > 2.0 * r * cfg.slack {
            return Err(Error::Domain(format!("‖v1‖_(0,s+1) = {vn:e} exceeds 2R = {}", 2.0 * r * cfg.slack)));
        }
    }
    Ok(())
}

fn noise_floor(scale: f64) -> f64 {
    1024.0 * f64::EPSILON * scale
}

/// Solves for `v₂` starting from `v₂ = 0`.
pub fn solve_q2(pb: &Problem, delta: f64, v1: &TimeFourierField, w: &TimeFourierField, cfg: &Q2Config) -> Result<Q2Solution> {
    solve_q2_from(pb, delta, v1, w, cfg, pb.zeros())
}

/// Solves for `v₂` from an arbitrary start in `V₂`.
pub fn solve_q2_from(
    pb: &Problem,
    delta: f64,
    v1: &TimeFourierField,
    w: &TimeFourierField,
    cfg: &Q2Config,
    start: TimeFourierField,
) -> Result<Q2Solution> {
    check_inputs(pb, v1, w, cfg)?;
    check_in(&start, SubspaceTag::V2(cfg.n), "start")?;
    let base = v1.add(w);
    let tag = SubspaceTag::V2(cfg.n);
    let scale = cfg.norm(&base).max(cfg.norm(&start));
    let fp = iterate(
        start,
        Controls { tol: cfg.tol, max_iter: cfg.max_iter, noise: noise_floor(scale) },
        Failure::Contraction,
        |u| cfg.norm(u),
        |v2| {
            let g = pb.eval_g(delta, &base.add(v2))?;
            inv_neg_delta_on_v(&project_unchecked(&g, tag))
        },
    )?;
    let du_g = pb.du_g_grid(delta, &base.add(&fp.value))?;
    Ok(Q2Solution {
        v2: fp.value,
        delta,
        n: cfg.n,
        ratio: fp.ratio,
        iterations: fp.iterations,
        cfg: cfg.clone(),
        du_g,
    })
}

/// Doubles `N` from `cfg.n` until the Picard ratio is at most 1/2.
///
/// `v1` must lie in `V₁(cfg.n)`, hence in every larger `V₁(N)`.
pub fn solve_q2_auto(pb: &Problem, delta: f64, v1: &TimeFourierField, w: &TimeFourierField, cfg: &Q2Config) -> Result<Q2Solution> {
    let mut c = cfg.clone();
    loop {
        let out = solve_q2(pb, delta, v1, w, &c);
        match out {
            Ok(sol) if sol.ratio <= 0.5 => return Ok(sol),
            Ok(_) | Err(Error::ContractionFailure { .. }) if 2 * c.n <= pb.l_max() => c.n *= 2,
            Ok(sol) => {
                return Err(Error::ContractionFailure { ratio: sol.ratio, iterations: sol.iterations });
            }
            Err(e) => return Err(e),
        }
    }
}

impl Q2Solution {
    pub fn config(&self) -> &Q2Config {
        &self.cfg
    }

    /// `∂_u g` at the solution, on the collocation grid.
    pub fn du_g(&self) -> &GridValues {
        &self.du_g
    }

    /// Derivative of `v₂` in the direction `h`, solving
    /// `k = (−Δ)^{-1} Π_{V₂}(∂_u g · (h + k))` by Neumann iteration.
    ///
    /// `h` may be any field with no `V₂` content, so the same routine gives
    /// derivatives with respect to `w` and to `v₁`.
    pub fn dv2_dw_apply(&self, pb: &Problem, h: &TimeFourierField) -> Result<TimeFourierField> {
        if project_unchecked(h, SubspaceTag::V2(self.n)).max_abs_coeff() > 0.0 {
            return Err(Error::Domain("direction h must have no content in V2".into()));
        }
        let hn = self.cfg.norm(h);
        if hn == 0.0 {
            return Ok(pb.zeros());
        }
        let tag = SubspaceTag::V2(self.n);
        let fp = iterate(
            pb.zeros(),
            Controls { tol: self.cfg.tol * hn, max_iter: self.cfg.max_iter, noise: noise_floor(hn) },
            Failure::Contraction,
            |u| self.cfg.norm(u),
            |k| inv_neg_delta_on_v(&project_unchecked(&pb.multiply(&self.du_g, &h.add(k)), tag)),
        )?;
        Ok(fp.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::{Nonlinearity, SpatialFunction, Term};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v1_mode1(l: usize, j: usize, amp: f64) -> TimeFourierField {
        TimeFourierField::single_mode(l, j, 1, 1, Complex64::new(amp, 0.0))
    }

    fn random_in(tag: SubspaceTag, l: usize, j: usize, scale: f64, rng: &mut ChaCha8Rng) -> TimeFourierField {
        let mut u = TimeFourierField::zeros(l, j);
        for ll in 0..=l {
            for jj in 1..=j {
                if tag.contains(ll, jj) {
                    let d = (1 + ll + jj) as f64;
                    let c = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * scale / d.powi(3);
                    u.set(ll, jj, c);
                }
            }
        }
        u
    }

    fn mixed_nl() -> Nonlinearity {
        Nonlinearity::new(
            3,
            vec![
                Term { k: 3, profile: SpatialFunction::constant(1.0) },
                Term { k: 4, profile: SpatialFunction { sin: vec![0.0, 0.5], cos: vec![], poly: vec![0.0, 1.0] } },
            ],
            f64::INFINITY,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_state_gives_zero_tail() {
        let pb = Problem::new(Nonlinearity::pure_power(3), 8, 8);
        let sol = solve_q2(&pb, 0.0, &pb.zeros(), &pb.zeros(), &Q2Config::default()).unwrap();
        assert!(sol.v2.is_zero());
        let h = random_in(SubspaceTag::W, 8, 8, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(sol.dv2_dw_apply(&pb, &h).unwrap().is_zero());
        assert!(sol.dv2_dw_apply(&pb, &pb.zeros()).unwrap().is_zero());
    }

    #[test]
    fn agrees_with_newton_on_truncated_system() {
        let (l, j) = (8, 8);
        let pb = Problem::new(Nonlinearity::pure_power(3), l, j);
        let v1 = v1_mode1(l, j, 0.1);
        let cfg = Q2Config { n: 1, ..Default::default() };
        let sol = solve_q2(&pb, 0.0, &v1, &pb.zeros(), &cfg).unwrap();
        assert!(sol.v2.get(3, 3).norm() > 1e-6);
        assert!(sol.ratio < 0.5);

        // Newton on the real unknowns (Re, Im) of modes (l,l), l = 2..8.
        let modes: Vec<usize> = (2..=l).collect();
        let nu = 2 * modes.len();
        let pack = |x: &nalgebra::DVector<f64>| {
            let mut v = TimeFourierField::zeros(l, j);
            for (i, &m) in modes.iter().enumerate() {
                v.set(m, m, Complex64::new(x[2 * i], x[2 * i + 1]));
            }
            v
        };
        let resid = |x: &nalgebra::DVector<f64>| {
            let v2 = pack(x);
            let g = pb.eval_g(0.0, &v1.add(&v2)).unwrap();
            let mut r = nalgebra::DVector::zeros(nu);
            for (i, &m) in modes.iter().enumerate() {
                let c = v2.get(m, m) * (2.0 * (m * m) as f64) - g.get(m, m);
                r[2 * i] = c.re;
                r[2 * i + 1] = c.im;
            }
            r
        };
        let mut x = nalgebra::DVector::zeros(nu);
        for _ in 0..20 {
            let r = resid(&x);
            if r.norm() < 1e-15 {
                break;
            }
            let mut jac = nalgebra::DMatrix::zeros(nu, nu);
            let hstep = 1e-7;
            for c in 0..nu {
                let mut xp = x.clone();
                xp[c] += hstep;
                let mut xm = x.clone();
                xm[c] -= hstep;
                jac.set_column(c, &((resid(&xp) - resid(&xm)) / (2.0 * hstep)));
            }
            x -= jac.lu().solve(&r).unwrap();
        }
        let diff = pack(&x).sub(&sol.v2).max_abs_coeff();
        assert!(diff <= 1e-9, "diff {diff:e}");
    }

    #[test]
    fn refining_the_truncation_keeps_shared_modes() {
        let cfg = Q2Config { n: 1, tol: 1e-13, ..Default::default() };
        let coarse = Problem::new(Nonlinearity::pure_power(3), 12, 12);
        let fine = Problem::new(Nonlinearity::pure_power(3), 16, 16);
        let a = solve_q2(&coarse, 0.0, &v1_mode1(12, 12, 0.1), &coarse.zeros(), &cfg).unwrap();
        let b = solve_q2(&fine, 0.0, &v1_mode1(16, 16, 0.1), &fine.zeros(), &cfg).unwrap();
        let d = b.v2.resized(12, 12).sub(&a.v2);
        assert!(cfg.norm(&d) <= 10.0 * cfg.tol, "{:e}", cfg.norm(&d));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let (l, j) = (8, 10);
        let pb = Problem::new(mixed_nl(), l, j);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut v1 = v1_mode1(l, j, 0.3);
        v1.set(2, 2, Complex64::new(0.05, -0.1));
        let w = random_in(SubspaceTag::W, l, j, 0.05, &mut rng);
        let h = random_in(SubspaceTag::W, l, j, 0.05, &mut rng);
        let cfg = Q2Config { n: 2, ..Default::default() };
        let delta = 0.05;
        let t = 1e-5;
        let base = solve_q2(&pb, delta, &v1, &w, &cfg).unwrap();
        let mut wp = w.clone();
        wp.axpy(t, &h);
        let mut wm = w.clone();
        wm.axpy(-t, &h);
        let fd = solve_q2(&pb, delta, &v1, &wp, &cfg).unwrap().v2.sub(&solve_q2(&pb, delta, &v1, &wm, &cfg).unwrap().v2).scale(0.5 / t);
        let an = base.dv2_dw_apply(&pb, &h).unwrap();
        let rel = cfg.norm(&fd.sub(&an)) / cfg.norm(&an);
        assert!(cfg.norm(&an) > 0.0);
        assert!(rel <= 1e-5, "relative error {rel:e}");

        // one-sided difference at the stated step
        let fwd = solve_q2(&pb, delta, &v1, &wp, &cfg).unwrap().v2.sub(&base.v2).scale(1.0 / t);
        let rel = cfg.norm(&fwd.sub(&an)) / cfg.norm(&an);
        assert!(rel <= 1e-5, "forward relative error {rel:e}");
    }

    #[test]
    fn fixed_point_is_unique_in_the_ball() {
        let (l, j) = (10, 10);
        let pb = Problem::new(Nonlinearity::pure_power(3), l, j);
        let v1 = v1_mode1(l, j, 0.2);
        let cfg = Q2Config { n: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sols = Vec::new();
        for _ in 0..2 {
            let mut s0 = random_in(SubspaceTag::V2(2), l, j, 1.0, &mut rng);
            let nrm = cfg.norm(&s0);
            s0 = s0.scale(0.9 / nrm);
            sols.push(solve_q2_from(&pb, 0.0, &v1, &pb.zeros(), &cfg, s0).unwrap().v2);
        }
        let d = cfg.norm(&sols[0].sub(&sols[1]));
        assert!(d <= 2.0 * cfg.tol, "{d:e}");
    }

    #[test]
    fn tail_gains_two_time_derivatives() {
        let (l, j) = (12, 12);
        let pb = Problem::new(Nonlinearity::pure_power(3), l, j);
        let mut v1 = v1_mode1(l, j, 0.4);
        v1.set(2, 2, Complex64::new(0.0, 0.2));
        let cfg = Q2Config { n: 2, ..Default::default() };
        let sol = solve_q2(&pb, 0.0, &v1, &pb.zeros(), &cfg).unwrap();
        let g = pb.eval_g(0.0, &v1.add(&sol.v2)).unwrap();
        let pg = project_unchecked(&g, SubspaceTag::V2(2));
        let lhs = sigma_s_norm(&sol.v2, cfg.sigma, cfg.s + 2.0);
        let rhs = sigma_s_norm(&pg, cfg.sigma, cfg.s);
        assert!(lhs > 0.0 && lhs <= 0.5 * rhs * (1.0 + 1e-12), "{lhs:e} vs {rhs:e}");
    }

    #[test]
    fn tail_is_lipschitz_in_delta() {
        let (l, j) = (8, 8);
        let pb = Problem::new(mixed_nl(), l, j);
        let v1 = v1_mode1(l, j, 0.3);
        let cfg = Q2Config { n: 1, ..Default::default() };
        let v0 = solve_q2(&pb, 0.0, &v1, &pb.zeros(), &cfg).unwrap().v2;
        let q: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&d| cfg.norm(&solve_q2(&pb, d, &v1, &pb.zeros(), &cfg).unwrap().v2.sub(&v0)) / d)
            .collect();
        assert!(q[0] > 0.0);
        assert!((q[1] / q[0] - 1.0).abs() < 0.05 && (q[2] / q[1] - 1.0).abs() < 0.01, "{q:?}");
    }

    #[test]
    fn auto_split_reaches_half_ratio() {
        let (l, j) = (16, 16);
        let pb = Problem::new(Nonlinearity::pure_power(3), l, j);
        let mut v1 = v1_mode1(l, j, 1.5);
        v1.set(1, 1, Complex64::new(1.5, 0.0));
        let cfg = Q2Config { n: 1, ..Default::default() };
        let sol = solve_q2_auto(&pb, 0.0, &v1, &pb.zeros(), &cfg).unwrap();
        assert!(sol.ratio <= 0.5);
        assert!(sol.n >= 1);
    }

    #[test]
    fn rejects_inputs_outside_their_subspaces() {
        let pb = Problem::new(Nonlinearity::pure_power(3), 4, 4);
        let cfg = Q2Config { n: 1, ..Default::default() };
        let bad_v1 = TimeFourierField::single_mode(4, 4, 2, 2, Complex64::new(0.1, 0.0));
        assert!(matches!(solve_q2(&pb, 0.0, &bad_v1, &pb.zeros(), &cfg), Err(Error::Domain(_))));
        let bad_w = TimeFourierField::single_mode(4, 4, 1, 1, Complex64::new(0.1, 0.0));
        assert!(matches!(solve_q2(&pb, 0.0, &pb.zeros(), &bad_w, &cfg), Err(Error::Domain(_))));
        let big_w = TimeFourierField::single_mode(4, 4, 1, 2, Complex64::new(10.0, 0.0));
        assert!(matches!(solve_q2(&pb, 0.0, &pb.zeros(), &big_w, &cfg), Err(Error::Domain(_))));
        let cfg = Q2Config { n: 1, r_bound: Some(0.01), ..Default::default() };
        let v1 = v1_mode1(4, 4, 1.0);
        assert!(matches!(solve_q2(&pb, 0.0, &v1, &pb.zeros(), &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn large_amplitude_with_small_split_fails_to_contract() {
        let pb = Problem::new(Nonlinearity::pure_power(3), 8, 8);
        let v1 = v1_mode1(8, 8, 3.0);
        let cfg = Q2Config { n: 1, max_iter: 200, ..Default::default() };
        match solve_q2(&pb, 0.0, &v1, &pb.zeros(), &cfg) {
            Err(Error::ContractionFailure { ratio, .. }) => assert!(ratio >= 1.0),
            other => panic!("expected contraction failure, got {:?}", other.map(|s| s.ratio)),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn derivative_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (l, j) = (6, 6);
            let pb = Problem::new(Nonlinearity::pure_power(3), l, j);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v1 = v1_mode1(l, j, 0.3);
            let cfg = Q2Config { n: 1, ..Default::default() };
            let sol = solve_q2(&pb, 0.0, &v1, &pb.zeros(), &cfg).unwrap();
            let h1 = random_in(SubspaceTag::W, l, j, 0.1, &mut rng);
            let h2 = random_in(SubspaceTag::W, l, j, 0.1, &mut rng);
            let mut comb = h1.scale(a);
            comb.axpy(b, &h2);
            let lhs = sol.dv2_dw_apply(&pb, &comb).unwrap();
            let mut rhs = sol.dv2_dw_apply(&pb, &h1).unwrap().scale(a);
            rhs.axpy(b, &sol.dv2_dw_apply(&pb, &h2).unwrap());
            let scale = cfg.norm(&lhs).max(1e-30);
            prop_assert!(cfg.norm(&lhs.sub(&rhs)) <= 1e-10 * scale.max(cfg.norm(&comb)));
        }
    }
}
