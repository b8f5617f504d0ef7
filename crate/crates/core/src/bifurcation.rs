//! The zeroth-order bifurcation problem on `V₁`: the action
//! `Φ₀(v) = (1/2)∫_Ω (v_t² + v_x²) − ∫_Ω s* a_p v^{p+1}/(p+1)`, its reduction
//! `Φ̃₀(v₁) = Φ₀(v₁ + v₂(0, v₁, 0))`, and a deflated multi-start Newton search
//! for its nontrivial critical points.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{project_unchecked, sigma_s_norm, SubspaceTag, TimeFourierField};
use crate::grid::Collocation;
use crate::nonlinearity::{Problem, SpatialFunction};
use crate::q2::{solve_q2, Q2Config, Q2Solution};

/// Complex amplitudes `u_1..u_N` of `v = Σ (e^{ilt}u_l + c.c.) sin lx`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct V1Point {
    pub amps: Vec<Complex64>,
    /// Set when the time-translation orbit is fixed by `Im u₁ = 0`.
    pub phase_fixed: bool,
}

impl V1Point {
    pub fn zeros(n: usize) -> Self {
        Self { amps: vec![Complex64::new(0.0, 0.0); n], phase_fixed: false }
    }

    pub fn n(&self) -> usize {
        self.amps.len()
    }

    pub fn to_field(&self, l_max: usize, j_max: usize) -> TimeFourierField {
        let mut f = TimeFourierField::zeros(l_max, j_max);
        for (i, c) in self.amps.iter().enumerate() {
            f.set(i + 1, i + 1, *c);
        }
        f
    }

    pub fn from_field(u: &TimeFourierField, n: usize) -> Self {
        Self { amps: (1..=n).map(|l| u.get(l, l)).collect(), phase_fixed: false }
    }

    /// Real coordinates `(Re u₁, Im u₁, Re u₂, …)`.
    pub fn to_real(&self) -> Vec<f64> {
        self.amps.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_real(x: &[f64]) -> Self {
        Self { amps: x.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(), phase_fixed: false }
    }

    /// Time translation `t ↦ t + θ`: `u_l ↦ e^{ilθ} u_l`.
    pub fn rotate(&self, theta: f64) -> Self {
        Self {
            amps: self.amps.iter().enumerate().map(|(i, c)| c * Complex64::from_polar(1.0, (i + 1) as f64 * theta)).collect(),
            phase_fixed: false,
        }
    }

    /// Representative of the translation orbit with `u₁` real and nonnegative.
    pub fn phase_fix(&self) -> Self {
        match self.amps.first() {
            Some(u1) if u1.norm() > 0.0 => {
                let mut out = self.rotate(-u1.arg());
                out.amps[0].im = 0.0;
                out.phase_fixed = true;
                out
            }
            _ => self.clone(),
        }
    }

    /// Generator `i l u_l` of time translations at this point.
    pub fn translation_mode(&self) -> Vec<f64> {
        let t = Self {
            amps: self.amps.iter().enumerate().map(|(i, c)| Complex64::new(0.0, (i + 1) as f64) * c).collect(),
            phase_fixed: false,
        };
        t.to_real()
    }
}

fn check_in_v(v: &TimeFourierField) -> Result<()> {
    if v.sub(&project_unchecked(v, SubspaceTag::V)).max_abs_coeff() > 0.0 {
        return Err(Error::Domain("field has content outside V".into()));
    }
    Ok(())
}

/// `(1/2)∫_Ω (v_t² + v_x²) = 2π² Σ_l l² |u_l|²` for `v ∈ V`.
pub fn dirichlet_energy(v: &TimeFourierField) -> f64 {
    2.0 * PI * PI * (1..=v.l_max().min(v.j_max())).map(|l| (l * l) as f64 * v.get(l, l).norm_sqr()).sum::<f64>()
}

/// `Φ₀(v)` for `v ∈ V`, with `s* a_p` from the problem's leading term.
pub fn phi0(pb: &Problem, v: &TimeFourierField) -> Result<f64> {
    check_in_v(v)?;
    let p = pb.nl.p() as i32;
    let grid = pb.colloc.synthesize(v);
    let a = pb.leading_nodes();
    let mut vals = grid.clone();
    for m in 0..grid.n_x {
        let c = pb.nl.s_star() * a[m] / (p + 1) as f64;
        for n in 0..grid.n_t {
            vals.data[m * grid.n_t + n] = c * grid.at(n, m).powi(p + 1);
        }
    }
    Ok(dirichlet_energy(v) - pb.colloc.integrate(&vals))
}

/// `L²(Ω)` gradient of `Φ₀`: `−Δv − Π_V(s* a_p v^p)`.
pub fn phi0_gradient(pb: &Problem, v: &TimeFourierField) -> Result<TimeFourierField> {
    check_in_v(v)?;
    let g = project_unchecked(&pb.eval_g(0.0, v)?, SubspaceTag::V);
    let mut r = crate::field::neg_delta_on_v(v)?;
    r.axpy(-1.0, &g);
    Ok(r)
}

/// `Φ̃₀(v₁)` and the tail `v₂(0, v₁, 0)` it was evaluated with.
pub fn phi0_tilde(pb: &Problem, v1: &V1Point, q2: &Q2Config) -> Result<(f64, Q2Solution)> {
    let f = v1.to_field(pb.l_max(), pb.j_max());
    let tail = solve_q2(pb, 0.0, &f, &pb.zeros(), q2)?;
    Ok((phi0(pb, &f.add(&tail.v2))?, tail))
}

/// Gradient of `Φ̃₀` in the real coordinates of [`V1Point::to_real`].
///
/// Since `v₂` solves the tail equation, `Π_{V₂}∇Φ₀(v₁ + v₂) = 0` and the
/// chain-rule term through `∂v₂/∂v₁` drops out.
pub fn phi0_tilde_gradient(pb: &Problem, v1: &V1Point, q2: &Q2Config) -> Result<Vec<f64>> {
    let f = v1.to_field(pb.l_max(), pb.j_max());
    let tail = solve_q2(pb, 0.0, &f, &pb.zeros(), q2)?;
    let r = phi0_gradient(pb, &f.add(&tail.v2))?;
    Ok(reduced_real(&r, v1.n()).iter().map(|x| 2.0 * PI * PI * x).collect())
}

/// `(Re, Im)` of the `V₁` coefficients of `r`.
pub(crate) fn reduced_real(r: &TimeFourierField, n: usize) -> Vec<f64> {
    V1Point::from_field(r, n).to_real()
}

/// `Π_{V₁}[−Δe − Π_{V₁}(a (e + ∂v₂[e]))]` at a solved tail: the derivative of
/// the reduced gradient field in the real direction `e`.
pub(crate) fn reduced_jacobian_column(pb: &Problem, tail: &Q2Solution, e: &TimeFourierField, n: usize) -> Result<Vec<f64>> {
    let dv2 = tail.dv2_dw_apply(pb, e)?;
    let prod = pb.multiply(tail.du_g(), &e.add(&dv2));
    let mut out = crate::field::neg_delta_on_v(&project_unchecked(e, SubspaceTag::V1(n)))?;
    out.axpy(-1.0, &project_unchecked(&prod, SubspaceTag::V1(n)));
    Ok(reduced_real(&out, n))
}

/// Matrix of the reduced gradient's derivative, `2N × 2N`, at `v₁`.
fn reduced_jacobian(pb: &Problem, tail: &Q2Solution, n: usize) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for c in 0..2 * n {
        let mut x = vec![0.0; 2 * n];
        x[c] = 1.0;
        let e = V1Point::from_real(&x).to_field(pb.l_max(), pb.j_max());
        let col = reduced_jacobian_column(pb, tail, &e, n)?;
        jac.set_column(c, &DVector::from_vec(col));
    }
    Ok(jac)
}

/// Hessian of `Φ̃₀` in real coordinates (symmetrized).
pub fn phi0_tilde_hessian(pb: &Problem, v1: &V1Point, q2: &Q2Config) -> Result<DMatrix<f64>> {
    let f = v1.to_field(pb.l_max(), pb.j_max());
    let tail = solve_q2(pb, 0.0, &f, &pb.zeros(), q2)?;
    let j = reduced_jacobian(pb, &tail, v1.n())?;
    Ok((&j + j.transpose()) * (PI * PI))
}

/// Outcome of the sign selection `s* = ±1`.
#[derive(Debug, Clone, Serialize)]
pub struct SignChoice {
    pub s_star: f64,
    pub both_signs: bool,
    pub note: Option<String>,
    /// `∫_Ω a_p v^{p+1}/(p+1)` for each probe, in [`sign_probes`] order.
    pub probe_integrals: Vec<f64>,
}

/// Probe fields in `V` (as amplitude lists `u_1..u_4`): the pure modes
/// `l = 1..4`, then `e₁+e₂`, `e₁+ie₂`, `e₁−e₂`, `e₁+e₃`, `e₂+e₄`, `e₁+e₂+e₃`,
/// `e₁+2e₂`, `2e₁+e₂+ie₃`.
pub fn sign_probes() -> Vec<[Complex64; 4]> {
    let o = Complex64::new(0.0, 0.0);
    let r = |x: f64| Complex64::new(x, 0.0);
    let i = Complex64::new(0.0, 1.0);
    vec![
        [r(1.0), o, o, o],
        [o, r(1.0), o, o],
        [o, o, r(1.0), o],
        [o, o, o, r(1.0)],
        [r(1.0), r(1.0), o, o],
        [r(1.0), i, o, o],
        [r(1.0), r(-1.0), o, o],
        [r(1.0), o, r(1.0), o],
        [o, r(1.0), o, r(1.0)],
        [r(1.0), r(1.0), r(1.0), o],
        [r(1.0), r(2.0), o, o],
        [r(2.0), r(1.0), i, o],
    ]
}

/// Picks `s*` so that `∫_Ω s* a_p v^{p+1} > 0` for some probe `v ∈ V`.
pub fn choose_sign(a_p: &SpatialFunction, p: usize) -> Result<SignChoice> {
    let colloc = Collocation::new(4, 4, p + 1, a_p.max_frequency(), a_p.poly_degree());
    let a: Vec<f64> = colloc.x_nodes().iter().map(|&x| a_p.eval(x)).collect();
    let mut ints = Vec::new();
    let mut signs = (false, false);
    for probe in sign_probes() {
        let mut v = TimeFourierField::zeros(4, 4);
        for (i, c) in probe.iter().enumerate() {
            v.set(i + 1, i + 1, *c);
        }
        let grid = colloc.synthesize(&v);
        let mut vals = grid.clone();
        let mut abs = grid.clone();
        for m in 0..grid.n_x {
            for n in 0..grid.n_t {
                let y = a[m] * grid.at(n, m).powi(p as i32 + 1) / (p + 1) as f64;
                vals.data[m * grid.n_t + n] = y;
                abs.data[m * grid.n_t + n] = y.abs();
            }
        }
        let val = colloc.integrate(&vals);
        let scale = colloc.integrate(&abs);
        if val > 1e-10 * scale {
            signs.0 = true;
        } else if val < -1e-10 * scale {
            signs.1 = true;
        }
        ints.push(val);
    }
    match signs {
        (true, true) => Ok(SignChoice {
            s_star: 1.0,
            both_signs: true,
            note: Some("the integral takes both signs; s* = +1 chosen, s* = −1 is equally admissible".into()),
            probe_integrals: ints,
        }),
        (true, false) => Ok(SignChoice { s_star: 1.0, both_signs: false, note: None, probe_integrals: ints }),
        (false, true) => Ok(SignChoice { s_star: -1.0, both_signs: false, note: None, probe_integrals: ints }),
        (false, false) => Err(Error::DegenerateNonlinearity(format!(
            "∫ a_{p} v^{} vanishes on every probe in V; higher-order terms would be needed",
            p + 1
        ))),
    }
}

/// Controls of the critical-point search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub seed: u64,
    /// Random directions besides the pure `l = 1` direction.
    pub directions: usize,
    /// Seed radii as multiples of each direction's Nehari radius.
    pub radii: [f64; 3],
    pub max_newton: usize,
    /// Bound on `‖∇Φ̃₀‖` at an accepted critical point.
    pub grad_tol: f64,
    /// Hessian eigenvalues below this times the largest are counted as zero.
    pub zero_eig_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { seed: 0, directions: 8, radii: [0.5, 1.0, 2.0], max_newton: 80, grad_tol: 1e-10, zero_eig_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalPoint {
    pub v1bar: V1Point,
    /// `Φ̃₀(v̄₁)`.
    pub level: f64,
    pub hessian_eigs: Vec<f64>,
    pub nondegenerate_mod_s1: bool,
    #[serde(skip)]
    pub u0: TimeFourierField,
    pub gradient_norm: f64,
    /// `R = ‖v̄₁‖_{0,s+1}`.
    pub r_bound: f64,
    /// `max_{t∈[0,1]} Φ̃₀(t v̄₁)`.
    pub mountain_pass_level: f64,
    /// Distinct nonzero critical points found (modulo translation).
    pub roots_found: usize,
    pub q2_ratio: f64,
    pub n: usize,
}

/// `∫_Ω s* a_p d^{p+1}` and the Dirichlet energy of a direction.
fn nehari_radius(pb: &Problem, d: &V1Point) -> Result<Option<(V1Point, f64)>> {
    let f = d.to_field(pb.l_max(), pb.j_max());
    let q = dirichlet_energy(&f);
    let p = pb.nl.p();
    // Φ₀(t d) = t² Q − t^{p+1} I/(p+1) with I = (p+1)(Q − Φ₀(d)).
    let i = (p + 1) as f64 * (q - phi0(pb, &f)?);
    let (dir, i) = if i > 0.0 {
        (d.clone(), i)
    } else if p.is_multiple_of(2) && i < 0.0 {
        (V1Point { amps: d.amps.iter().map(|c| -c).collect(), phase_fixed: false }, -i)
    } else {
        return Ok(None);
    };
    if i <= 1e-12 * q {
        return Ok(None);
    }
    Ok(Some((dir, (2.0 * q / i).powf(1.0 / (p as f64 - 1.0)))))
}

/// Deterministic seed set: the pure `l = 1` direction and `directions`
/// random ones, each at the configured multiples of its Nehari radius.
pub fn seed_points(pb: &Problem, n: usize, cfg: &SearchConfig) -> Result<Vec<V1Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dirs = vec![{
        let mut d = V1Point::zeros(n);
        d.amps[0] = Complex64::new(1.0, 0.0);
        d
    }];
    for _ in 0..cfg.directions {
        let amps = (1..=n)
            .map(|l| {
                let s = 1.0 / (l * l) as f64;
                Complex64::new(2.0 * rng.random::<f64>() - 1.0, 2.0 * rng.random::<f64>() - 1.0) * s
            })
            .collect();
        dirs.push(V1Point { amps, phase_fixed: false });
    }
    let mut seeds = Vec::new();
    for d in dirs {
        if let Some((dir, t)) = nehari_radius(pb, &d)? {
            for r in cfg.radii {
                let amps = dir.amps.iter().map(|c| c * (r * t)).collect();
                seeds.push(V1Point { amps, phase_fixed: false }.phase_fix());
            }
        }
    }
    Ok(seeds)
}

/// Least-squares solve `J d = b` by SVD.
pub(crate) fn least_squares(j: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, 1e-12 * smax.max(f64::MIN_POSITIVE)).map_err(|e| Error::Numeric(format!("least squares: {e}")))
}

/// Removes the `Im u₁` column: unknowns of the phase-fixed chart.
pub(crate) fn phase_fixed_columns(j: &DMatrix<f64>) -> DMatrix<f64> {
    j.clone().remove_column(1)
}

/// Re-inserts `Im u₁ = 0`.
pub(crate) fn expand_step(d: &DVector<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.len() + 1);
    out.push(d[0]);
    out.push(0.0);
    out.extend(d.iter().skip(1));
    out
}

struct Evaluated {
    grad: Vec<f64>,
    tail: Q2Solution,
}

fn evaluate(pb: &Problem, x: &[f64], q2: &Q2Config) -> Result<Evaluated> {
    let v = V1Point::from_real(x);
    let f = v.to_field(pb.l_max(), pb.j_max());
    let tail = solve_q2(pb, 0.0, &f, &pb.zeros(), q2)?;
    let r = phi0_gradient(pb, &f.add(&tail.v2))?;
    Ok(Evaluated { grad: reduced_real(&r, v.n()), tail })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deflation factor `m(x) = 1/‖x‖² + 1` for the trivial root and the
/// directional log-derivative `∇m·d / m`.
fn deflation(x: &[f64], d: &[f64]) -> (f64, f64) {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let m = 1.0 / r2 + 1.0;
    let dot: f64 = x.iter().zip(d).map(|(a, b)| a * b).sum();
    let grad_dot = -2.0 * dot / (r2 * r2);
    (m, grad_dot / m)
}

/// Deflated, damped Gauss-Newton on the reduced gradient from one seed.
fn newton_from(pb: &Problem, seed: &V1Point, q2: &Q2Config, cfg: &SearchConfig) -> Option<Vec<f64>> {
    let mut x = seed.phase_fix().to_real();
    let n = seed.n();
    let scale = 2.0 * PI * PI;
    let mut ev = evaluate(pb, &x, q2).ok()?;
    for _ in 0..cfg.max_newton {
        let gn = norm(&ev.grad);
        if scale * gn <= cfg.grad_tol {
            return Some(x);
        }
        let jac = phase_fixed_columns(&reduced_jacobian(pb, &ev.tail, n).ok()?);
        let b = DVector::from_iterator(2 * n, ev.grad.iter().map(|v| -v));
        let d = expand_step(&least_squares(&jac, &b).ok()?);
        let (m, dlog) = deflation(&x, &d);
        let beta = if (1.0 - dlog).abs() > 1e-3 { 1.0 / (1.0 - dlog) } else { 1.0 };
        let merit = m * gn;
        let mut t = beta;
        let mut accepted = false;
        for _ in 0..30 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Ok(e) = evaluate(pb, &xt, q2) {
                let mt = deflation(&xt, &d).0 * norm(&e.grad);
                if mt < merit || scale * norm(&e.grad) <= cfg.grad_tol {
                    x = xt;
                    ev = e;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted || norm(&x) < 1e-8 {
            return None;
        }
    }
    (scale * norm(&ev.grad) <= cfg.grad_tol).then_some(x)
}

/// Finds a nontrivial critical point of `Φ̃₀` on `V₁(N)`.
pub fn find_critical_point(pb: &Problem, n: usize, q2: &Q2Config, cfg: &SearchConfig) -> Result<CriticalPoint> {
    if n < 1 || n > pb.l_max().min(pb.j_max()) {
        return Err(Error::InvalidCutoff(format!("N = {n} must lie in 1..=min(L, J)")));
    }
    let q2 = Q2Config { n, ..q2.clone() };
    let seeds = seed_points(pb, n, cfg)?;
    if seeds.is_empty() {
        return Err(Error::SearchFailure("no seed direction has a positive Nehari radius".into()));
    }
    let roots: Vec<Vec<f64>> = seeds.par_iter().filter_map(|s| newton_from(pb, s, &q2, cfg)).collect();

    // Distinct roots modulo the translation `u_l ↦ (−1)^l u_l` left by the chart.
    let mut distinct: Vec<(V1Point, f64)> = Vec::new();
    for x in roots {
        let v = V1Point::from_real(&x).phase_fix();
        let (level, _) = phi0_tilde(pb, &v, &q2)?;
        let twin = v.rotate(PI).phase_fix();
        let same = |a: &V1Point, b: &V1Point| norm(&a.to_real().iter().zip(b.to_real()).map(|(p, q)| p - q).collect::<Vec<_>>()) <= 1e-6 * (1.0 + norm(&a.to_real()));
        if !distinct.iter().any(|(w, _)| same(w, &v) || same(w, &twin)) {
            distinct.push((v, level));
        }
    }
    if distinct.is_empty() {
        return Err(Error::SearchFailure(format!(
            "no nonzero critical point found from {} seeds; try a larger N or more directions",
            seeds.len()
        )));
    }
    let roots_found = distinct.len();
    let mut classified = Vec::new();
    for (v, level) in distinct {
        let hess = phi0_tilde_hessian(pb, &v, &q2)?;
        let eig = SymmetricEigen::new(hess.clone());
        let mut eigs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigs.sort_by(f64::total_cmp);
        let emax = eigs.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        let zeros = eigs.iter().filter(|e| e.abs() <= cfg.zero_eig_tol * emax).count();
        // The translation generator must lie in the kernel.
        let t = DVector::from_vec(v.translation_mode());
        let tn = t.norm();
        let t_defect = if tn > 0.0 { (&hess * &t).norm() / (tn * emax) } else { 0.0 };
        let nondeg = zeros == 1 && t_defect <= cfg.zero_eig_tol;
        classified.push((v, level, eigs, nondeg));
    }
    classified.sort_by(|a, b| (!a.3).cmp(&!b.3).then(a.1.total_cmp(&b.1)));
    let (v, level, eigs, nondeg) = classified.swap_remove(0);

    let f = v.to_field(pb.l_max(), pb.j_max());
    let tail = solve_q2(pb, 0.0, &f, &pb.zeros(), &q2)?;
    let u0 = f.add(&tail.v2);
    let grad = phi0_tilde_gradient(pb, &v, &q2)?;
    let mut mp = f64::NEG_INFINITY;
    for i in 0..=50 {
        let t = i as f64 / 50.0;
        let vt = V1Point { amps: v.amps.iter().map(|c| c * t).collect(), phase_fixed: false };
        mp = mp.max(phi0_tilde(pb, &vt, &q2)?.0);
    }
    Ok(CriticalPoint {
        level,
        hessian_eigs: eigs,
        nondegenerate_mod_s1: nondeg,
        gradient_norm: norm(&grad),
        r_bound: sigma_s_norm(&f, 0.0, q2.s + 1.0),
        mountain_pass_level: mp,
        roots_found,
        q2_ratio: tail.ratio,
        n,
        u0,
        v1bar: V1Point { phase_fixed: true, ..v },
    })
}
