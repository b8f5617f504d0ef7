//! Space-time fields on (0,2π) × (0,π).
//!
//! A field is stored by its time-Fourier modes `u_l(x)`, `l = 0..=L`, each a
//! complex sine series `Σ_{j=1}^{J} c_{l,j} sin(jx)`. Negative modes are implied
//! by the reality condition `u_{-l} = conj(u_l)`, and `u_0` is real.
//!
//! The kernel of the linear wave operator at ω = 1 is spanned by the diagonal
//! coefficients `(l, l)`, `l ≥ 1`; this is the space `V`. Everything else is
//! its complement `W`. All projectors act coefficient-wise.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real spatial profile in H¹₀(0,π), stored as sine coefficients `c_1..c_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceProfile {
    pub coeffs: Vec<f64>,
}

impl SpaceProfile {
    pub fn zeros(j_max: usize) -> Self {
        Self { coeffs: vec![0.0; j_max] }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn j_max(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient of `sin(jx)`, `j ≥ 1`.
    pub fn coeff(&self, j: usize) -> f64 {
        self.coeffs[j - 1]
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * ((i + 1) as f64 * x).sin())
            .sum()
    }

    /// `∫ (y'² + y²) dx = (π/2) Σ (1 + j²) c_j²`.
    pub fn h1_norm_sq(&self) -> f64 {
        complex_free_h1(self.coeffs.iter().map(|c| c * c))
    }

    pub fn h1_norm(&self) -> f64 {
        self.h1_norm_sq().sqrt()
    }
}

fn complex_free_h1(sq: impl Iterator<Item = f64>) -> f64 {
    0.5 * PI
        * sq
            .enumerate()
            .map(|(i, c2)| {
                let j = (i + 1) as f64;
                (1.0 + j * j) * c2
            })
            .sum::<f64>()
}

fn h1_norm_sq_complex(coeffs: &[Complex64]) -> f64 {
    complex_free_h1(coeffs.iter().map(|c| c.norm_sqr()))
}

/// Subspaces of the truncated field space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceTag {
    /// Kernel of the wave operator: coefficients `(l, l)`, `l ≥ 1`.
    V,
    /// Complement of `V`.
    W,
    /// `V` restricted to `1 ≤ l ≤ N`.
    V1(usize),
    /// `V` restricted to `l ≥ N + 1`.
    V2(usize),
    /// `W` restricted to `l ≤ L_p`.
    Wp(usize),
    /// `W` restricted to `l > L_p`.
    WpPerp(usize),
}

impl SubspaceTag {
    pub fn contains(&self, l: usize, j: usize) -> bool {
        let in_v = l >= 1 && j == l;
        match *self {
            SubspaceTag::V => in_v,
            SubspaceTag::W => !in_v,
            SubspaceTag::V1(n) => in_v && l <= n,
            SubspaceTag::V2(n) => in_v && l > n,
            SubspaceTag::Wp(lp) => !in_v && l <= lp,
            SubspaceTag::WpPerp(lp) => !in_v && l > lp,
        }
    }

    fn cutoff(&self) -> Option<usize> {
        match *self {
            SubspaceTag::V | SubspaceTag::W => None,
            SubspaceTag::V1(n) | SubspaceTag::V2(n) => Some(n),
            SubspaceTag::Wp(lp) | SubspaceTag::WpPerp(lp) => Some(lp),
        }
    }
}

/// A real 2π-periodic-in-time field with values in H¹₀(0,π).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFourierField {
    l_max: usize,
    j_max: usize,
    data: Vec<Complex64>,
    measured: Option<(f64, f64)>,
}

impl TimeFourierField {
    pub fn zeros(l_max: usize, j_max: usize) -> Self {
        assert!(j_max >= 1, "spatial cutoff must be at least 1");
        Self {
            l_max,
            j_max,
            data: vec![Complex64::new(0.0, 0.0); (l_max + 1) * j_max],
            measured: None,
        }
    }

    /// Field with a single coefficient at `(l, j)` (plus its conjugate at `-l`).
    pub fn single_mode(l_max: usize, j_max: usize, l: usize, j: usize, c: Complex64) -> Self {
        let mut f = Self::zeros(l_max, j_max);
        f.set(l, j, c);
        f
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.l_max, self.j_max)
    }

    /// Norm metadata `(σ, s)` recorded by the last [`TimeFourierField::measure`].
    pub fn measured_in(&self) -> Option<(f64, f64)> {
        self.measured
    }

    #[inline]
    fn idx(&self, l: usize, j: usize) -> usize {
        debug_assert!(l <= self.l_max && j >= 1 && j <= self.j_max);
        l * self.j_max + (j - 1)
    }

    #[inline]
    pub fn get(&self, l: usize, j: usize) -> Complex64 {
        self.data[self.idx(l, j)]
    }

    /// Sets the coefficient at `(l, j)`. Mode 0 is forced real.
    #[inline]
    pub fn set(&mut self, l: usize, j: usize, c: Complex64) {
        let i = self.idx(l, j);
        self.data[i] = if l == 0 { Complex64::new(c.re, 0.0) } else { c };
    }

    pub fn mode(&self, l: usize) -> &[Complex64] {
        &self.data[l * self.j_max..(l + 1) * self.j_max]
    }

    pub fn mode_mut(&mut self, l: usize) -> &mut [Complex64] {
        let j = self.j_max;
        &mut self.data[l * j..(l + 1) * j]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Mode-0 imaginary parts are zeroed.
    pub fn enforce_reality(&mut self) {
        for c in self.mode_mut(0) {
            c.im = 0.0;
        }
    }

    /// Records the norm in `X_{σ,s}` and remembers `(σ, s)`.
    pub fn measure(&mut self, sigma: f64, s: f64) -> f64 {
        self.measured = Some((sigma, s));
        sigma_s_norm(self, sigma, s)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn check_shape(&self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "field shapes differ");
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_shape(other);
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out.measured = None;
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.axpy(1.0, other);
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        self.check_shape(other);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
        self.measured = None;
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|c| *c *= alpha);
        out.measured = None;
        out
    }

    /// Copy with a different cutoff; modes outside the new box are dropped,
    /// new modes are zero.
    pub fn resized(&self, l_max: usize, j_max: usize) -> Self {
        let mut out = Self::zeros(l_max, j_max);
        for l in 0..=l_max.min(self.l_max) {
            for j in 1..=j_max.min(self.j_max) {
                out.set(l, j, self.get(l, j));
            }
        }
        out
    }

    /// Real L²(Ω) pairing `∫_Ω u h dx dt` of two real fields.
    pub fn l2_pairing(&self, other: &Self) -> f64 {
        self.check_shape(other);
        let mut acc = 0.0;
        for l in 0..=self.l_max {
            let w = if l == 0 { 1.0 } else { 2.0 };
            let s: f64 = self
                .mode(l)
                .iter()
                .zip(other.mode(l))
                .map(|(a, b)| (a * b.conj()).re)
                .sum();
            acc += w * s;
        }
        PI * PI * acc
    }

    /// Field rotated in time, `u(t + θ, x)`.
    pub fn time_shift(&self, theta: f64) -> Self {
        let mut out = self.clone();
        for l in 1..=self.l_max {
            let rot = Complex64::from_polar(1.0, l as f64 * theta);
            out.mode_mut(l).iter_mut().for_each(|c| *c *= rot);
        }
        out.measured = None;
        out
    }

    /// Time derivative `∂_t u`.
    pub fn time_derivative(&self) -> Self {
        let mut out = self.clone();
        for l in 0..=self.l_max {
            let f = Complex64::new(0.0, l as f64);
            out.mode_mut(l).iter_mut().for_each(|c| *c *= f);
        }
        out.measured = None;
        out
    }

    /// Point evaluation `u(t, x)`.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let sines: Vec<f64> = (1..=self.j_max).map(|j| (j as f64 * x).sin()).collect();
        let mut acc = 0.0;
        for l in 0..=self.l_max {
            let prof: Complex64 = self.mode(l).iter().zip(&sines).map(|(c, s)| c * s).sum();
            if l == 0 {
                acc += prof.re;
            } else {
                acc += 2.0 * (prof * Complex64::from_polar(1.0, l as f64 * t)).re;
            }
        }
        acc
    }

    pub fn to_json(&self) -> FieldJson {
        let (sigma, s) = match self.measured {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        FieldJson {
            sigma,
            s,
            l_max: self.l_max,
            j_max: self.j_max,
            modes: (0..=self.l_max)
                .map(|l| ModeJson {
                    l,
                    re: self.mode(l).iter().map(|c| c.re).collect(),
                    im: self.mode(l).iter().map(|c| c.im).collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(js: &FieldJson) -> Result<Self> {
        if js.j_max == 0 {
            return Err(Error::InvalidCutoff("J must be at least 1".into()));
        }
        let mut f = Self::zeros(js.l_max, js.j_max);
        for m in &js.modes {
            if m.l > js.l_max || m.re.len() != js.j_max || m.im.len() != js.j_max {
                return Err(Error::InvalidCutoff(format!(
                    "mode l = {} does not fit the declared cutoffs (L = {}, J = {})",
                    m.l, js.l_max, js.j_max
                )));
            }
            for j in 1..=js.j_max {
                f.set(m.l, j, Complex64::new(m.re[j - 1], m.im[j - 1]));
            }
        }
        if let (Some(a), Some(b)) = (js.sigma, js.s) {
            f.measured = Some((a, b));
        }
        Ok(f)
    }
}

/// On-disk form of a field. Modes ascend in `l`, coefficients ascend in `j`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FieldJson {
    pub sigma: Option<f64>,
    pub s: Option<f64>,
    #[serde(rename = "L")]
    pub l_max: usize,
    #[serde(rename = "J")]
    pub j_max: usize,
    pub modes: Vec<ModeJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModeJson {
    pub l: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

/// Weight `e^{2σ|l|}(|l|^{2s} + 1)` of mode `l`; `|0|^{2s}` is taken as 0.
pub fn mode_weight(l: usize, sigma: f64, s: f64) -> f64 {
    let lf = l as f64;
    let poly = if l == 0 { 1.0 } else { lf.powf(2.0 * s) + 1.0 };
    (2.0 * sigma * lf).exp() * poly
}

/// `‖u‖_{σ,s} = (Σ_{l∈Z} e^{2σ|l|}(|l|^{2s}+1)‖u_l‖²_{H¹})^{1/2}`.
pub fn sigma_s_norm(u: &TimeFourierField, sigma: f64, s: f64) -> f64 {
    let mut acc = 0.0;
    for l in 0..=u.l_max() {
        let mult = if l == 0 { 1.0 } else { 2.0 };
        acc += mult * mode_weight(l, sigma, s) * h1_norm_sq_complex(u.mode(l));
    }
    acc.sqrt()
}

/// Coefficient-wise projection onto a subspace.
pub fn project(u: &TimeFourierField, tag: SubspaceTag) -> Result<TimeFourierField> {
    if let Some(c) = tag.cutoff() {
        if c > u.l_max() {
            return Err(Error::InvalidCutoff(format!(
                "{tag:?} exceeds the field's time cutoff L = {}",
                u.l_max()
            )));
        }
    }
    Ok(project_unchecked(u, tag))
}

pub(crate) fn project_unchecked(u: &TimeFourierField, tag: SubspaceTag) -> TimeFourierField {
    let mut out = u.clone();
    out.measured = None;
    let j_max = u.j_max();
    for l in 0..=u.l_max() {
        let m = out.mode_mut(l);
        for j in 1..=j_max {
            if !tag.contains(l, j) {
                m[j - 1] = Complex64::new(0.0, 0.0);
            }
        }
    }
    out
}

fn ensure_in_v(v: &TimeFourierField) -> Result<()> {
    for l in 0..=v.l_max() {
        for j in 1..=v.j_max() {
            if !SubspaceTag::V.contains(l, j) && v.get(l, j) != Complex64::new(0.0, 0.0) {
                return Err(Error::Domain(format!(
                    "field has content at (l, j) = ({l}, {j}) outside V"
                )));
            }
        }
    }
    Ok(())
}

/// `−Δ = −∂_tt − ∂_xx` on `V`; mode `(l, l)` is multiplied by `2l²`.
pub fn neg_delta_on_v(v: &TimeFourierField) -> Result<TimeFourierField> {
    ensure_in_v(v)?;
    let mut out = v.clone();
    out.measured = None;
    for l in 1..=v.l_max().min(v.j_max()) {
        let i = out.idx(l, l);
        out.data[i] *= 2.0 * (l * l) as f64;
    }
    Ok(out)
}

/// `(−Δ)^{-1}` on `V`; mode `(l, l)` is divided by `2l²`.
pub fn inv_neg_delta_on_v(v: &TimeFourierField) -> Result<TimeFourierField> {
    ensure_in_v(v)?;
    let mut out = v.clone();
    out.measured = None;
    for l in 1..=v.l_max().min(v.j_max()) {
        let i = out.idx(l, l);
        out.data[i] /= 2.0 * (l * l) as f64;
    }
    Ok(out)
}

/// `L_ω = −ω²∂_tt + ∂_xx`; coefficient `(l, j)` is multiplied by `ω²l² − j²`.
pub fn apply_l_omega(w: &TimeFourierField, omega: f64) -> TimeFourierField {
    apply_l_omega_sq(w, omega * omega)
}

pub(crate) fn apply_l_omega_sq(w: &TimeFourierField, omega_sq: f64) -> TimeFourierField {
    let mut out = w.clone();
    out.measured = None;
    for l in 0..=w.l_max() {
        let lw = omega_sq * (l * l) as f64;
        for (i, c) in out.mode_mut(l).iter_mut().enumerate() {
            let j = (i + 1) as f64;
            *c *= lw - j * j;
        }
    }
    out
}
