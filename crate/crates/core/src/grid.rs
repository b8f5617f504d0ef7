//! Collocation grid for pointwise (pseudospectral) products.
//!
//! Time uses `n_t` equispaced samples and FFTs; space uses Gauss-Legendre
//! nodes on (0,π). Projections back onto `sin(jx)` are quadratures, so
//! polynomial or cosine coefficient profiles are integrated exactly up to
//! quadrature precision instead of being folded onto the sine basis.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::field::TimeFourierField;

/// Real values on the collocation grid; index `m * n_t + n` for `(t_n, x_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValues {
    pub n_t: usize,
    pub n_x: usize,
    pub data: Vec<f64>,
}

impl GridValues {
    pub fn zeros(n_t: usize, n_x: usize) -> Self {
        Self { n_t, n_x, data: vec![0.0; n_t * n_x] }
    }

    #[inline]
    pub fn at(&self, n: usize, m: usize) -> f64 {
        self.data[m * self.n_t + n]
    }

    pub fn column(&self, m: usize) -> &[f64] {
        &self.data[m * self.n_t..(m + 1) * self.n_t]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { n_t: self.n_t, n_x: self.n_x, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!((self.n_t, self.n_x), (other.n_t, other.n_x));
        Self {
            n_t: self.n_t,
            n_x: self.n_x,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }
}

/// Grid and transforms for fields of shape `(L, J)`.
#[derive(Clone)]
pub struct Collocation {
    l_max: usize,
    j_max: usize,
    n_t: usize,
    n_x: usize,
    x: Vec<f64>,
    wx: Vec<f64>,
    /// `sin(j x_m)`, row-major `m * J + (j - 1)`.
    sin_table: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Collocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Collocation")
            .field("l_max", &self.l_max)
            .field("j_max", &self.j_max)
            .field("n_t", &self.n_t)
            .field("n_x", &self.n_x)
            .finish()
    }
}

/// Smallest 5-smooth integer ≥ n.
fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl Collocation {
    /// Grid resolving products of total polynomial degree `degree + 1` in
    /// fields of shape `(L, J)`, with coefficient profiles of extra spatial
    /// frequency `extra_freq` and polynomial degree `poly_degree`.
    pub fn new(l_max: usize, j_max: usize, degree: usize, extra_freq: usize, poly_degree: usize) -> Self {
        let n_t = smooth_size((degree + 1) * l_max + 1).max(4);
        let freq = (degree + 1) * j_max + extra_freq;
        let n_x = (1.1 * freq as f64).ceil() as usize + poly_degree / 2 + 24;
        Self::with_sizes(l_max, j_max, n_t, n_x)
    }

    pub fn with_sizes(l_max: usize, j_max: usize, n_t: usize, n_x: usize) -> Self {
        assert!(n_t > 2 * l_max, "time grid too coarse for L = {l_max}");
        let rule = GaussLegendre::new(NonZeroUsize::new(n_x).expect("n_x > 0"));
        let (x, wx): (Vec<f64>, Vec<f64>) = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(node, w)| (0.5 * PI * (node + 1.0), 0.5 * PI * w))
            .unzip();
        let mut sin_table = vec![0.0; n_x * j_max];
        for (m, xm) in x.iter().enumerate() {
            for j in 1..=j_max {
                sin_table[m * j_max + j - 1] = (j as f64 * xm).sin();
            }
        }
        let mut planner = FftPlanner::new();
        Self {
            l_max,
            j_max,
            n_t,
            n_x,
            x,
            wx,
            sin_table,
            fwd: planner.plan_fft_forward(n_t),
            inv: planner.plan_fft_inverse(n_t),
        }
    }

    /// Same cutoffs with both grid dimensions doubled.
    pub fn refined(&self) -> Self {
        Self::with_sizes(self.l_max, self.j_max, 2 * self.n_t, 2 * self.n_x)
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn x_nodes(&self) -> &[f64] {
        &self.x
    }

    pub fn x_weights(&self) -> &[f64] {
        &self.wx
    }

    pub fn t_node(&self, n: usize) -> f64 {
        2.0 * PI * n as f64 / self.n_t as f64
    }

    pub fn zeros(&self) -> GridValues {
        GridValues::zeros(self.n_t, self.n_x)
    }

    /// Values of a function of `x` replicated over all time samples.
    pub fn from_x_fn(&self, f: impl Fn(f64) -> f64) -> GridValues {
        let mut g = self.zeros();
        for (m, &xm) in self.x.iter().enumerate() {
            let v = f(xm);
            g.data[m * self.n_t..(m + 1) * self.n_t].fill(v);
        }
        g
    }

    pub fn from_fn(&self, f: impl Fn(f64, f64) -> f64) -> GridValues {
        let mut g = self.zeros();
        for (m, &xm) in self.x.iter().enumerate() {
            for n in 0..self.n_t {
                g.data[m * self.n_t + n] = f(self.t_node(n), xm);
            }
        }
        g
    }

    fn check(&self, u: &TimeFourierField) {
        assert_eq!(
            u.shape(),
            (self.l_max, self.j_max),
            "field shape does not match the collocation grid"
        );
    }

    /// Coefficients to grid values.
    pub fn synthesize(&self, u: &TimeFourierField) -> GridValues {
        self.check(u);
        let (nt, jm, lm) = (self.n_t, self.j_max, self.l_max);
        let mut data = vec![0.0; nt * self.n_x];
        data.par_chunks_mut(nt).enumerate().for_each(|(m, col)| {
            let srow = &self.sin_table[m * jm..(m + 1) * jm];
            let mut buf = vec![Complex64::new(0.0, 0.0); nt];
            for l in 0..=lm {
                let p: Complex64 = u.mode(l).iter().zip(srow).map(|(c, s)| c * s).sum();
                if l == 0 {
                    buf[0] = Complex64::new(p.re, 0.0);
                } else {
                    buf[l] = p;
                    buf[nt - l] = p.conj();
                }
            }
            self.inv.process(&mut buf);
            for (o, b) in col.iter_mut().zip(&buf) {
                *o = b.re;
            }
        });
        GridValues { n_t: nt, n_x: self.n_x, data }
    }

    /// Galerkin projection of grid values onto the `(L, J)` modes.
    pub fn analyze(&self, g: &GridValues) -> TimeFourierField {
        assert_eq!((g.n_t, g.n_x), (self.n_t, self.n_x));
        let (nt, lm) = (self.n_t, self.l_max);
        // Time coefficients per node, scaled by the quadrature weight.
        let modes: Vec<Vec<Complex64>> = (0..self.n_x)
            .into_par_iter()
            .map(|m| {
                let mut buf: Vec<Complex64> =
                    g.column(m).iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.fwd.process(&mut buf);
                let scale = self.wx[m] * 2.0 / (PI * nt as f64);
                buf[..=lm].iter().map(|c| c * scale).collect()
            })
            .collect();
        let mut out = TimeFourierField::zeros(self.l_max, self.j_max);
        let jm = self.j_max;
        out.as_mut_slice()
            .par_chunks_mut(jm)
            .enumerate()
            .for_each(|(l, row)| {
                for (m, hm) in modes.iter().enumerate() {
                    let h = hm[l];
                    let srow = &self.sin_table[m * jm..(m + 1) * jm];
                    for (c, s) in row.iter_mut().zip(srow) {
                        *c += h * s;
                    }
                }
                if l == 0 {
                    row.iter_mut().for_each(|c| c.im = 0.0);
                }
            });
        out
    }

    /// `∫_Ω g dx dt`.
    pub fn integrate(&self, g: &GridValues) -> f64 {
        let dt = 2.0 * PI / self.n_t as f64;
        (0..self.n_x)
            .map(|m| self.wx[m] * g.column(m).iter().sum::<f64>())
            .sum::<f64>()
            * dt
    }

    /// Time average at each spatial node.
    pub fn time_average(&self, g: &GridValues) -> Vec<f64> {
        (0..self.n_x)
            .map(|m| g.column(m).iter().sum::<f64>() / self.n_t as f64)
            .collect()
    }

    /// `∫_0^π f dx` for values at the spatial nodes.
    pub fn integrate_x(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.wx).map(|(a, w)| a * w).sum()
    }

    /// `(2/π)∫ f(x) sin(jx) sin(j'x) dx` for `j, j' = 1..J`, row-major.
    pub fn multiplication_matrix(&self, f: &[f64]) -> Vec<f64> {
        let jm = self.j_max;
        let mut out = vec![0.0; jm * jm];
        for m in 0..self.n_x {
            let w = 2.0 / PI * self.wx[m] * f[m];
            if w == 0.0 {
                continue;
            }
            let srow = &self.sin_table[m * jm..(m + 1) * jm];
            for a in 0..jm {
                let wa = w * srow[a];
                for b in a..jm {
                    out[a * jm + b] += wa * srow[b];
                }
            }
        }
        for a in 0..jm {
            for b in 0..a {
                out[a * jm + b] = out[b * jm + a];
            }
        }
        out
    }
}
