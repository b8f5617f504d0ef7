//! Analytic nonlinearity `f(x,u) = Σ_{k≥p} a_k(x) u^k` and its rescaled form
//! `g(δ,x,u) = s* f(x,δu)/δ^p`, evaluated pseudospectrally on fields.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{SpaceProfile, TimeFourierField};
use crate::grid::{Collocation, GridValues};

/// Coefficient profile `a(x) = Σ s_i sin(ix) + Σ c_i cos(ix) + Σ q_i x^i`.
///
/// `sin[0]` multiplies `sin(x)`; `cos[0]` and `poly[0]` are constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialFunction {
    #[serde(default)]
    pub sin: Vec<f64>,
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub poly: Vec<f64>,
}

impl SpatialFunction {
    pub fn constant(c: f64) -> Self {
        Self { poly: vec![c], ..Default::default() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let s: f64 = self.sin.iter().enumerate().map(|(i, c)| c * ((i + 1) as f64 * x).sin()).sum();
        let c: f64 = self.cos.iter().enumerate().map(|(i, c)| c * (i as f64 * x).cos()).sum();
        let p = self.poly.iter().rev().fold(0.0, |acc, q| acc * x + q);
        s + c + p
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let s: f64 = self
            .sin
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = (i + 1) as f64;
                c * f * (f * x).cos()
            })
            .sum();
        let c: f64 = self
            .cos
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = i as f64;
                -c * f * (f * x).sin()
            })
            .sum();
        let p = self
            .poly
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, q)| acc * x + i as f64 * q);
        s + c + p
    }

    pub fn max_frequency(&self) -> usize {
        self.sin.len().max(self.cos.len().saturating_sub(1))
    }

    pub fn poly_degree(&self) -> usize {
        self.poly.len().saturating_sub(1)
    }

    pub fn is_zero(&self) -> bool {
        self.sin.iter().chain(&self.cos).chain(&self.poly).all(|c| *c == 0.0)
    }

    /// `(1/π)∫₀^π a(x) dx` in closed form.
    pub fn mean(&self) -> f64 {
        let s: f64 = self.sin.iter().enumerate().map(|(i, c)| if i % 2 == 0 { 2.0 * c / (i + 1) as f64 } else { 0.0 }).sum();
        let c = self.cos.first().copied().unwrap_or(0.0) * PI;
        let p: f64 = self.poly.iter().enumerate().map(|(i, q)| q * PI.powi(i as i32 + 1) / (i + 1) as f64).sum();
        (s + c + p) / PI
    }

    /// Full H¹(0,π) norm `(∫ a'² + a²)^{1/2}` by Gauss-Legendre quadrature.
    pub fn h1_norm(&self) -> f64 {
        let c = Collocation::new(1, 1, 1, 2 * self.max_frequency(), 2 * self.poly_degree() + 64);
        let vals: Vec<f64> = c
            .x_nodes()
            .iter()
            .map(|&x| self.eval(x).powi(2) + self.derivative(x).powi(2))
            .collect();
        c.integrate_x(&vals).sqrt()
    }

    /// Sine projection `c_j = (2/π)∫ a(x) sin(jx) dx`, `j = 1..J`.
    pub fn sine_profile(&self, j_max: usize) -> SpaceProfile {
        let c = Collocation::new(1, j_max, 1, self.max_frequency(), self.poly_degree());
        let vals: Vec<f64> = c.x_nodes().iter().map(|&x| self.eval(x)).collect();
        let coeffs = (1..=j_max)
            .map(|j| {
                let prod: Vec<f64> =
                    vals.iter().zip(c.x_nodes()).map(|(v, x)| v * (j as f64 * x).sin()).collect();
                2.0 / PI * c.integrate_x(&prod)
            })
            .collect();
        SpaceProfile::from_coeffs(coeffs)
    }
}

/// Degree-`k` term `a_k(x) u^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub k: usize,
    #[serde(flatten)]
    pub profile: SpatialFunction,
}

/// Analytic data of the nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    p: usize,
    terms: Vec<Term>,
    rho: f64,
    s_star: f64,
}

/// Bound on `Σ ‖a_k‖_{H¹} (ρ/2)^k` accepted at construction.
pub const SERIES_BOUND: f64 = 1e12;

/// Terms whose contribution falls below this are dropped.
pub const SERIES_TRUNCATION: f64 = 1e-16;

impl Nonlinearity {
    pub fn new(p: usize, mut terms: Vec<Term>, rho: f64, s_star: f64) -> Result<Self> {
        if p < 2 {
            return Err(Error::Config(format!("order p must be at least 2, got {p}")));
        }
        if !(rho > 0.0) {
            return Err(Error::Config(format!("radius rho must be positive, got {rho}")));
        }
        if s_star != 1.0 && s_star != -1.0 {
            return Err(Error::Config(format!("s_star must be ±1, got {s_star}")));
        }
        terms.sort_by_key(|t| t.k);
        if let Some(t) = terms.iter().find(|t| t.k < p) {
            return Err(Error::Config(format!("term of degree {} is below the order p = {p}", t.k)));
        }
        for w in terms.windows(2) {
            if w[0].k == w[1].k {
                return Err(Error::Config(format!("duplicate term of degree {}", w[0].k)));
            }
        }
        let leading_zero = terms.iter().find(|t| t.k == p).is_none_or(|t| t.profile.is_zero());
        if leading_zero {
            return Err(Error::DegenerateNonlinearity(format!(
                "leading coefficient a_{p} is identically zero"
            )));
        }
        let r = if rho.is_finite() { 0.5 * rho } else { 1.0 };
        let series: f64 = terms.iter().map(|t| t.profile.h1_norm() * r.powi(t.k as i32)).sum();
        if !series.is_finite() || series > SERIES_BOUND {
            return Err(Error::Config(format!(
                "Σ ‖a_k‖_H¹ r^k = {series:e} at r = ρ/2 exceeds the bound {SERIES_BOUND:e}"
            )));
        }
        Ok(Self { p, terms, rho, s_star })
    }

    /// `f(x,u) = u^p`.
    pub fn pure_power(p: usize) -> Self {
        Self::new(p, vec![Term { k: p, profile: SpatialFunction::constant(1.0) }], f64::INFINITY, 1.0)
            .expect("valid pure power")
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn s_star(&self) -> f64 {
        self.s_star
    }

    pub fn with_s_star(&self, s_star: f64) -> Self {
        Self { s_star, ..self.clone() }
    }

    pub fn k_max(&self) -> usize {
        self.terms.last().map_or(self.p, |t| t.k)
    }

    pub fn leading(&self) -> &SpatialFunction {
        &self.terms[0].profile
    }

    /// `ε = s* δ^{p−1}`.
    pub fn epsilon(&self, delta: f64) -> f64 {
        self.s_star * delta.powi(self.p as i32 - 1)
    }

    /// `ω = (1 + 2ε)^{1/2}`.
    pub fn omega(&self, delta: f64) -> f64 {
        (1.0 + 2.0 * self.epsilon(delta)).sqrt()
    }

    /// Sine projections of the coefficients.
    pub fn coeffs(&self, j_max: usize) -> Vec<(usize, SpaceProfile)> {
        self.terms.iter().map(|t| (t.k, t.profile.sine_profile(j_max))).collect()
    }

    fn max_frequency(&self) -> usize {
        self.terms.iter().map(|t| t.profile.max_frequency()).max().unwrap_or(0)
    }

    fn poly_degree(&self) -> usize {
        self.terms.iter().map(|t| t.profile.poly_degree()).max().unwrap_or(0)
    }
}

/// A nonlinearity bound to a truncation `(L, J)` and its collocation grid.
#[derive(Debug, Clone)]
pub struct Problem {
    pub nl: Nonlinearity,
    pub colloc: Collocation,
    /// `(k, a_k(x_m), ‖a_k‖_{H¹})` at the spatial nodes.
    nodes: Vec<(usize, Vec<f64>, f64)>,
}

impl Problem {
    pub fn new(nl: Nonlinearity, l_max: usize, j_max: usize) -> Self {
        let colloc = Collocation::new(l_max, j_max, nl.k_max(), nl.max_frequency(), nl.poly_degree());
        Self::with_collocation(nl, colloc)
    }

    pub fn with_collocation(nl: Nonlinearity, colloc: Collocation) -> Self {
        let nodes = nl
            .terms
            .iter()
            .map(|t| {
                let v = colloc.x_nodes().iter().map(|&x| t.profile.eval(x)).collect();
                (t.k, v, t.profile.h1_norm())
            })
            .collect();
        Self { nl, colloc, nodes }
    }

    /// The same problem on a grid twice as fine in each direction.
    pub fn refined(&self) -> Self {
        Self::with_collocation(self.nl.clone(), self.colloc.refined())
    }

    /// The same problem with a different sign `s*`.
    pub fn with_s_star(&self, s_star: f64) -> Self {
        Self { nl: self.nl.with_s_star(s_star), colloc: self.colloc.clone(), nodes: self.nodes.clone() }
    }

    pub fn l_max(&self) -> usize {
        self.colloc.l_max()
    }

    pub fn j_max(&self) -> usize {
        self.colloc.j_max()
    }

    pub fn zeros(&self) -> TimeFourierField {
        TimeFourierField::zeros(self.l_max(), self.j_max())
    }

    /// Values `a_p(x_m)` of the leading coefficient.
    pub fn leading_nodes(&self) -> &[f64] {
        &self.nodes[0].1
    }

    /// Terms retained at amplitude `δ · max|u|`.
    fn active_terms(&self, delta: f64, u_max: f64) -> usize {
        if delta == 0.0 {
            return 1;
        }
        let p = self.nl.p as i32;
        let base = 2.0 * delta * u_max;
        self.nodes
            .iter()
            .position(|(k, _, h1)| *k as i32 > p && h1 * base.powi(*k as i32 - p) < SERIES_TRUNCATION)
            .unwrap_or(self.nodes.len())
    }

    fn check_radius(&self, delta: f64, u: &GridValues) -> Result<()> {
        let amp = delta.abs() * u.max_abs();
        if amp >= self.nl.rho {
            return Err(Error::AmplitudeOutOfRange { max_amplitude: amp, rho: self.nl.rho });
        }
        Ok(())
    }

    /// `g(δ, x, u)` and, when `with_derivative`, `∂_u g` at grid values of `u`.
    pub fn g_on_grid(&self, delta: f64, u: &GridValues, with_derivative: bool) -> Result<(GridValues, Option<GridValues>)> {
        self.check_radius(delta, u)?;
        let active = &self.nodes[..self.active_terms(delta, u.max_abs())];
        let p = self.nl.p as i32;
        let s = self.nl.s_star;
        let weights: Vec<f64> = active.iter().map(|(k, _, _)| s * delta.powi(*k as i32 - p)).collect();
        let nt = u.n_t;
        let mut g = GridValues::zeros(nt, u.n_x);
        let mut dg = with_derivative.then(|| GridValues::zeros(nt, u.n_x));
        for m in 0..u.n_x {
            let col = u.column(m);
            for n in 0..nt {
                let v = col[n];
                let (mut acc, mut dacc) = (0.0, 0.0);
                for ((k, a, _), w) in active.iter().zip(&weights) {
                    let c = w * a[m];
                    let vk1 = v.powi(*k as i32 - 1);
                    acc += c * vk1 * v;
                    dacc += c * *k as f64 * vk1;
                }
                g.data[m * nt + n] = acc;
                if let Some(d) = dg.as_mut() {
                    d.data[m * nt + n] = dacc;
                }
            }
        }
        Ok((g, dg))
    }

    /// Unscaled `f(x, U)` at grid values of `U`.
    pub fn f_on_grid(&self, u: &GridValues) -> Result<GridValues> {
        self.check_radius(1.0, u)?;
        let nt = u.n_t;
        let mut out = GridValues::zeros(nt, u.n_x);
        for m in 0..u.n_x {
            for n in 0..nt {
                let v = u.data[m * nt + n];
                out.data[m * nt + n] = self.nodes.iter().map(|(k, a, _)| a[m] * v.powi(*k as i32)).sum();
            }
        }
        Ok(out)
    }

    /// `Π_{(L,J)} g(δ, x, u)`.
    pub fn eval_g(&self, delta: f64, u: &TimeFourierField) -> Result<TimeFourierField> {
        let grid = self.colloc.synthesize(u);
        let (g, _) = self.g_on_grid(delta, &grid, false)?;
        Ok(self.colloc.analyze(&g))
    }

    /// `Π_{(L,J)} ∂_u g(δ, x, u)`.
    pub fn eval_du_g(&self, delta: f64, u: &TimeFourierField) -> Result<TimeFourierField> {
        let grid = self.colloc.synthesize(u);
        let (_, dg) = self.g_on_grid(delta, &grid, true)?;
        Ok(self.colloc.analyze(&dg.expect("derivative requested")))
    }

    /// Grid values of `∂_u g(δ, x, u)` for use as a multiplier.
    pub fn du_g_grid(&self, delta: f64, u: &TimeFourierField) -> Result<GridValues> {
        let grid = self.colloc.synthesize(u);
        Ok(self.g_on_grid(delta, &grid, true)?.1.expect("derivative requested"))
    }

    /// `Π_{(L,J)} (a · h)` for a multiplier `a` given on the grid.
    pub fn multiply(&self, a: &GridValues, h: &TimeFourierField) -> TimeFourierField {
        let hg = self.colloc.synthesize(h);
        self.colloc.analyze(&a.mul(&hg))
    }
}

/// Splits a coefficient field into its time average and the oscillating rest.
pub fn time_average_coeff(a: &TimeFourierField) -> (SpaceProfile, TimeFourierField) {
    let a0 = SpaceProfile::from_coeffs(a.mode(0).iter().map(|c| c.re).collect());
    let mut abar = a.clone();
    abar.mode_mut(0).iter_mut().for_each(|c| *c = num_complex::Complex64::new(0.0, 0.0));
    (a0, abar)
}

/// Time average and oscillating part of grid values.
pub fn time_average_grid(colloc: &Collocation, a: &GridValues) -> (Vec<f64>, GridValues) {
    let a0 = colloc.time_average(a);
    let mut abar = a.clone();
    for (m, mean) in a0.iter().enumerate() {
        abar.data[m * a.n_t..(m + 1) * a.n_t].iter_mut().for_each(|v| *v -= mean);
    }
    (a0, abar)
}

/// Spatial mean `(1/π)∫ a₀ dx` of a sine series: `(1/π) Σ_{j odd} 2c_j/j`.
pub fn melnikov_m(a0: &SpaceProfile) -> f64 {
    a0.coeffs
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 2 == 0)
        .map(|(i, c)| 2.0 * c / (i + 1) as f64)
        .sum::<f64>()
        / PI
}

/// Spatial mean of `a₀` given at the quadrature nodes.
pub fn melnikov_m_nodes(colloc: &Collocation, a0: &[f64]) -> f64 {
    colloc.integrate_x(a0) / PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn spatial_function_derivative_and_norm() {
        let f = SpatialFunction { sin: vec![0.0, 1.0], cos: vec![0.5, 0.0, 2.0], poly: vec![0.0, 1.0, -0.3] };
        let (x, h) = (0.7, 1e-6);
        let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
        assert!((fd - f.derivative(x)).abs() < 1e-8);
        // ‖1‖²_H¹ = π
        assert!((SpatialFunction::constant(1.0).h1_norm() - PI.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn rejects_vanishing_leading_coefficient() {
        let r = Nonlinearity::new(3, vec![Term { k: 3, profile: SpatialFunction::constant(0.0) }], 1.0, 1.0);
        assert!(matches!(r, Err(Error::DegenerateNonlinearity(_))));
        let r = Nonlinearity::new(3, vec![Term { k: 2, profile: SpatialFunction::constant(1.0) }], 1.0, 1.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let pb = Problem::new(Nonlinearity::pure_power(3), 4, 8);
        assert!(pb.eval_g(0.0, &pb.zeros()).unwrap().max_abs_coeff() == 0.0);
        assert!(pb.eval_du_g(0.1, &pb.zeros()).unwrap().max_abs_coeff() == 0.0);
    }

    #[test]
    fn cube_of_sin_t_sin_x() {
        // u = sin t sin x: coefficient at (1,1) is -i/2.
        let pb = Problem::new(Nonlinearity::pure_power(3), 4, 8);
        let mut u = pb.zeros();
        u.set(1, 1, Complex64::new(0.0, -0.5));
        let g = pb.eval_g(0.0, &u).unwrap();
        // sin³t sin³x = (3 sin t − sin 3t)(3 sin x − sin 3x)/16
        let expect = |l: usize, j: usize| -> Complex64 {
            let tl = match l {
                1 => 3.0,
                3 => -1.0,
                _ => 0.0,
            };
            let xj = match j {
                1 => 3.0,
                3 => -1.0,
                _ => 0.0,
            };
            // sin(lt) = (e^{ilt} − e^{−ilt})/(2i) → coefficient −i/2 at +l
            Complex64::new(0.0, -0.5) * tl * xj / 16.0
        };
        for l in 0..=4 {
            for j in 1..=8 {
                assert!((g.get(l, j) - expect(l, j)).norm() < 1e-14, "({l},{j})");
            }
        }
    }

    #[test]
    fn derivative_of_cube_at_unit_constant() {
        let pb = Problem::new(Nonlinearity::pure_power(3), 2, 4);
        let grid = pb.colloc.from_x_fn(|_| 1.0);
        let (_, dg) = pb.g_on_grid(0.0, &grid, true).unwrap();
        assert!(dg.unwrap().data.iter().all(|v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn higher_terms_vanish_at_delta_zero() {
        let nl = Nonlinearity::new(
            3,
            vec![
                Term { k: 3, profile: SpatialFunction::constant(1.0) },
                Term { k: 5, profile: SpatialFunction::constant(7.0) },
            ],
            f64::INFINITY,
            1.0,
        )
        .unwrap();
        let pb = Problem::new(nl, 3, 6);
        let u = TimeFourierField::single_mode(3, 6, 1, 1, c(0.4));
        let g0 = pb.eval_g(0.0, &u).unwrap();
        let cube = Problem::new(Nonlinearity::pure_power(3), 3, 6);
        assert!(g0.sub(&cube.eval_g(0.0, &u).unwrap()).max_abs_coeff() < 1e-15);
    }

    #[test]
    fn radius_violation_is_reported() {
        let nl = Nonlinearity::new(2, vec![Term { k: 2, profile: SpatialFunction::constant(1.0) }], 0.1, 1.0).unwrap();
        let pb = Problem::new(nl, 2, 4);
        let u = TimeFourierField::single_mode(2, 4, 1, 1, c(1.0));
        match pb.eval_g(0.5, &u) {
            Err(Error::AmplitudeOutOfRange { max_amplitude, .. }) => assert!(max_amplitude > 0.1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn time_average_split() {
        let mut a = TimeFourierField::zeros(2, 3);
        a.set(0, 1, c(1.0));
        let (a0, abar) = time_average_coeff(&a);
        assert_eq!(a0.coeffs, vec![1.0, 0.0, 0.0]);
        assert!(abar.is_zero());

        // a = cos t sin x
        let a = TimeFourierField::single_mode(2, 3, 1, 1, c(0.5));
        let (a0, abar) = time_average_coeff(&a);
        assert!(a0.coeffs.iter().all(|v| *v == 0.0));
        assert_eq!(abar, a);

        // a = 1 + cos t on the grid
        let col = Collocation::new(2, 3, 1, 0, 0);
        let g = col.from_fn(|t, _| 1.0 + t.cos());
        let (m, bar) = time_average_grid(&col, &g);
        assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!((bar.at(0, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn melnikov_mean_examples() {
        let j = 400;
        let one = SpatialFunction::constant(1.0).sine_profile(j);
        assert!((melnikov_m(&one) - 1.0).abs() <= 4.0 / (PI * j as f64));
        let mut s = SpaceProfile::zeros(4);
        s.coeffs[0] = 1.0;
        assert!((melnikov_m(&s) - 2.0 / PI).abs() < 1e-15);
        let mut s = SpaceProfile::zeros(4);
        s.coeffs[1] = 1.0;
        assert_eq!(melnikov_m(&s), 0.0);
    }

    #[test]
    fn mean_matches_quadrature() {
        let a = SpatialFunction { sin: vec![1.0, 0.5, -0.3], cos: vec![0.2, 1.0], poly: vec![0.1, -0.4, 0.05] };
        let c = Collocation::new(1, 1, 1, 8, 8);
        let vals: Vec<f64> = c.x_nodes().iter().map(|&x| a.eval(x)).collect();
        assert!((a.mean() - c.integrate_x(&vals) / PI).abs() <= 1e-14);
        assert!((SpatialFunction { sin: vec![1.0], ..Default::default() }.mean() - 2.0 / PI).abs() <= 1e-15);
    }
}
