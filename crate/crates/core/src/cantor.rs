//! Density of the admissible amplitude set near `δ = 0`: the exact union of
//! the δ-intervals excluded by the first-order Melnikov conditions along
//! `ω(δ) = √(1 + 2s*δ^{p−1})`, and a sampled estimate from direct checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nash_moser::DiophantineParams;

/// The Melnikov constant `M` along the branch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum MelnikovModel {
    Constant(f64),
    /// Linear interpolation between solved branch samples (ascending δ),
    /// held constant outside the sampled range.
    Piecewise { deltas: Vec<f64>, values: Vec<f64> },
}

impl MelnikovModel {
    pub fn piecewise(deltas: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if deltas.is_empty() || deltas.len() != values.len() {
            return Err(Error::Config("piecewise M needs matching, nonempty δ and M lists".into()));
        }
        if deltas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("piecewise M samples must have strictly ascending δ".into()));
        }
        Ok(Self::Piecewise { deltas, values })
    }

    pub fn eval(&self, delta: f64) -> f64 {
        match self {
            Self::Constant(m) => *m,
            Self::Piecewise { deltas, values } => {
                let i = deltas.partition_point(|&d| d <= delta);
                if i == 0 {
                    values[0]
                } else if i == deltas.len() {
                    values[i - 1]
                } else {
                    let t = (delta - deltas[i - 1]) / (deltas[i] - deltas[i - 1]);
                    values[i - 1] + t * (values[i] - values[i - 1])
                }
            }
        }
    }

    fn max_abs(&self) -> f64 {
        match self {
            Self::Constant(m) => m.abs(),
            Self::Piecewise { values, .. } => values.iter().fold(0.0, |a, v| a.max(v.abs())),
        }
    }
}

/// Everything that fixes the excluded set except `η`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CantorProblem {
    pub dioph: DiophantineParams,
    pub p: usize,
    pub s_star: f64,
    pub melnikov: MelnikovModel,
    /// Pairs `k ≠ j` with `k, j ≤ K_max` are enumerated.
    pub k_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedInterval {
    pub lo: f64,
    pub hi: f64,
    pub k: usize,
    pub j: usize,
    /// 1 for `|ωk − j|`, 2 for the `εM/(2j)`-shifted condition.
    pub condition: u8,
    /// Part of the interval has `k ≤ 1/(3|ε|)`, where no exclusion is expected.
    pub gated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CantorEstimate {
    pub eta: f64,
    pub density_sampled: f64,
    pub sampled_std_error: f64,
    pub density_interval: f64,
    /// `1 − Σ(length bounds)/η` before merging.
    pub density_lower_bound: f64,
    /// `density_interval` recomputed with `2K_max`.
    pub density_interval_doubled: f64,
    pub n_samples: usize,
    pub k_max: usize,
    pub excluded_intervals: Vec<ExcludedInterval>,
    pub merged: Vec<(f64, f64)>,
    pub gated_intervals: usize,
    pub warning: Option<String>,
}

impl CantorProblem {
    pub fn new(dioph: DiophantineParams, p: usize, s_star: f64, melnikov: MelnikovModel, k_max: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::Config(format!("p must be at least 2, got {p}")));
        }
        if s_star.abs() != 1.0 {
            return Err(Error::Config(format!("s* must be ±1, got {s_star}")));
        }
        if k_max < 2 {
            return Err(Error::Config("K_max must be at least 2".into()));
        }
        Ok(Self { dioph, p, s_star, melnikov, k_max })
    }

    pub fn eps(&self, delta: f64) -> f64 {
        self.s_star * delta.powi(self.p as i32 - 1)
    }

    pub fn omega(&self, delta: f64) -> f64 {
        (1.0 + 2.0 * self.eps(delta)).sqrt()
    }

    /// Inverse of `ω(δ)` on `δ ≥ 0`.
    fn delta_of_omega(&self, omega: f64) -> f64 {
        let e = self.s_star * (omega * omega - 1.0) / 2.0;
        if e <= 0.0 {
            0.0
        } else {
            e.powf(1.0 / (self.p as f64 - 1.0))
        }
    }

    fn domega_ddelta(&self, delta: f64) -> f64 {
        let pm1 = self.p as f64 - 1.0;
        (self.s_star * pm1 * delta.powf(pm1 - 1.0) / self.omega(delta)).abs()
    }

    fn check_eta(&self, eta: f64) -> Result<()> {
        if !(eta > 0.0) || 2.0 * eta.powi(self.p as i32 - 1) >= 1.0 && self.s_star < 0.0 {
            return Err(Error::Domain(format!("η = {eta} outside the range where ω(δ) is real and monotone")));
        }
        Ok(())
    }

    fn shift(&self, delta: f64, j: usize) -> f64 {
        self.eps(delta) * self.melnikov.eval(delta) / (2.0 * j as f64)
    }

    /// `δ ≤ δ_gate(k)` exactly when `k ≤ 1/(3|ε(δ)|)`.
    fn gate_delta(&self, k: usize) -> f64 {
        (1.0 / (3.0 * k as f64)).powf(1.0 / (self.p as f64 - 1.0))
    }

    /// Whether `δ` satisfies both conditions for every pair up to `K_max`.
    pub fn is_admissible(&self, delta: f64) -> bool {
        let w = self.omega(delta);
        let reach = (self.eps(delta).abs() * self.melnikov.max_abs() / 2.0).ceil() as i64 + 2;
        (1..=self.k_max).all(|k| {
            let c = (w * k as f64).round() as i64;
            ((c - reach).max(1)..=(c + reach).min(self.k_max as i64)).all(|j| {
                let j = j as usize;
                if j == k {
                    return true;
                }
                let b = self.dioph.bound(k, j);
                let h = w * k as f64 - j as f64;
                h.abs() >= b && (h - self.shift(delta, j)).abs() >= b
            })
        })
    }

    fn pair_intervals(&self, k: usize, j: usize, eta: f64, out: &mut Vec<ExcludedInterval>) {
        let b = self.dioph.bound(k, j);
        if b == 0.0 {
            return;
        }
        let (w0, w1) = (self.omega(0.0), self.omega(eta));
        let (wlo, whi) = (w0.min(w1), w0.max(w1));
        let gated = |lo: f64| lo < self.gate_delta(k);
        // First condition: ω ∈ ((j − b)/k, (j + b)/k), inverted monotonically.
        let (a, c) = ((j as f64 - b) / k as f64, (j as f64 + b) / k as f64);
        if c > wlo && a < whi {
            let (da, dc) = (self.delta_of_omega(a.max(wlo)), self.delta_of_omega(c.min(whi)));
            let (lo, hi) = (da.min(dc).max(0.0), da.max(dc).min(eta));
            if hi > lo {
                out.push(ExcludedInterval { lo, hi, k, j, condition: 1, gated: gated(lo) });
            }
        }
        // Second condition: |h(δ)| < b with h = ωk − j − εM/(2j), located by
        // bracketing the roots of h ∓ b on a δ-window and bisecting.
        let smax = self.eps(eta).abs() * self.melnikov.max_abs() / (2.0 * j as f64);
        let (a, c) = ((j as f64 - b - smax) / k as f64, (j as f64 + b + smax) / k as f64);
        if !(c > wlo && a < whi) {
            return;
        }
        let (da, dc) = (self.delta_of_omega(a.max(wlo)), self.delta_of_omega(c.min(whi)));
        let (lo, hi) = (da.min(dc).max(0.0), da.max(dc).min(eta));
        if !(hi > lo) {
            return;
        }
        let h = |d: f64| self.omega(d) * k as f64 - j as f64 - self.shift(d, j);
        let samples = 64;
        let grid: Vec<f64> = (0..=samples).map(|i| lo + (hi - lo) * i as f64 / samples as f64).collect();
        let mut cuts = vec![lo, hi];
        for target in [b, -b] {
            for w in grid.windows(2) {
                let (fa, fb) = (h(w[0]) - target, h(w[1]) - target);
                if fa == 0.0 {
                    cuts.push(w[0]);
                } else if fa * fb < 0.0 {
                    cuts.push(bisect(|d| h(d) - target, w[0], w[1]));
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut cur: Option<(f64, f64)> = None;
        for w in cuts.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            let inside = h(0.5 * (w[0] + w[1])).abs() < b;
            cur = match (cur, inside) {
                (Some((s, _)), true) => Some((s, w[1])),
                (None, true) => Some((w[0], w[1])),
                (Some((s, e)), false) => {
                    out.push(ExcludedInterval { lo: s, hi: e, k, j, condition: 2, gated: gated(s) });
                    None
                }
                (None, false) => None,
            };
        }
        if let Some((s, e)) = cur {
            out.push(ExcludedInterval { lo: s, hi: e, k, j, condition: 2, gated: gated(s) });
        }
    }

    /// All excluded intervals in `(0, η)`, sorted by left endpoint.
    pub fn excluded_intervals_exact(&self, eta: f64) -> Result<Vec<ExcludedInterval>> {
        self.check_eta(eta)?;
        let mut all: Vec<ExcludedInterval> = (1..=self.k_max)
            .into_par_iter()
            .flat_map_iter(|k| {
                let mut out = Vec::new();
                for j in (1..=self.k_max).filter(|&j| j != k) {
                    self.pair_intervals(k, j, eta, &mut out);
                }
                out
            })
            .collect();
        all.sort_by(|a, b| a.lo.total_cmp(&b.lo).then(a.k.cmp(&b.k)).then(a.j.cmp(&b.j)).then(a.condition.cmp(&b.condition)));
        Ok(all)
    }

    /// Mean-value bound on each interval's length: the ω-length of the first
    /// condition over `min ω′` on the interval, the measured length otherwise.
    fn length_bound(&self, iv: &ExcludedInterval) -> f64 {
        if iv.condition == 1 {
            let slope = self.domega_ddelta(iv.lo).min(self.domega_ddelta(iv.hi));
            if slope > 0.0 {
                return (2.0 * self.dioph.bound(iv.k, iv.j) / iv.k as f64 / slope).max(iv.hi - iv.lo);
            }
        }
        iv.hi - iv.lo
    }

    /// Stratified uniform sample of `(0, η)` with seeded jitter.
    pub fn sampled_density(&self, eta: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
        self.check_eta(eta)?;
        if n == 0 {
            return Err(Error::Config("the sample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<f64> = (0..n).map(|i| eta * (i as f64 + rng.random::<f64>()) / n as f64).collect();
        let good = points.par_iter().filter(|&&d| self.is_admissible(d)).count();
        let d = good as f64 / n as f64;
        Ok((d, (d * (1.0 - d) / n as f64).sqrt()))
    }

    pub fn estimate(&self, eta: f64, n: usize, seed: u64) -> Result<CantorEstimate> {
        let ivs = self.excluded_intervals_exact(eta)?;
        let merged = merge(&ivs);
        let density_interval = 1.0 - merged.iter().map(|(a, b)| b - a).sum::<f64>() / eta;
        let bound_sum: f64 = ivs.iter().map(|iv| self.length_bound(iv)).sum();
        let doubled = Self { k_max: 2 * self.k_max, ..self.clone() };
        let d2 = density_of(&merge(&doubled.excluded_intervals_exact(eta)?), eta);
        let (density_sampled, se) = self.sampled_density(eta, n, seed)?;
        let warning = ((d2 - density_interval).abs() > 1e-3).then(|| {
            format!("density moves by {:.2e} from K_max = {} to {}: raise K_max", (d2 - density_interval).abs(), self.k_max, 2 * self.k_max)
        });
        Ok(CantorEstimate {
            eta,
            density_sampled,
            sampled_std_error: se,
            density_interval,
            density_lower_bound: 1.0 - bound_sum / eta,
            density_interval_doubled: d2,
            n_samples: n,
            k_max: self.k_max,
            gated_intervals: ivs.iter().filter(|iv| iv.gated).count(),
            excluded_intervals: ivs,
            merged,
            warning,
        })
    }

    /// Estimates for a strictly decreasing list of `η`.
    pub fn density_curve(&self, etas: &[f64], n: usize, seed: u64) -> Result<Vec<CantorEstimate>> {
        if etas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Config("the η list must be strictly decreasing".into()));
        }
        etas.iter().map(|&eta| self.estimate(eta, n, seed)).collect()
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if (f(m) < 0.0) == (fa < 0.0) {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Sorted union of the intervals.
pub fn merge(ivs: &[ExcludedInterval]) -> Vec<(f64, f64)> {
    let mut spans: Vec<(f64, f64)> = ivs.iter().map(|iv| (iv.lo, iv.hi)).collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in spans {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn density_of(merged: &[(f64, f64)], eta: f64) -> f64 {
    1.0 - merged.iter().map(|(a, b)| b - a).sum::<f64>() / eta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nash_moser::diophantine_check;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn problem(gamma: f64, tau: f64, m: f64, k_max: usize) -> CantorProblem {
        CantorProblem::new(DiophantineParams::new(gamma, tau).unwrap(), 3, 1.0, MelnikovModel::Constant(m), k_max).unwrap()
    }

    #[test]
    fn zero_gamma_excludes_nothing() {
        let cp = problem(0.0, 1.5, 0.7, 40);
        let est = cp.estimate(0.1, 1000, 1).unwrap();
        assert!(est.excluded_intervals.is_empty());
        assert_eq!(est.density_interval, 1.0);
        assert_eq!(est.density_sampled, 1.0);
    }

    #[test]
    fn diagonal_pairs_never_appear() {
        let cp = problem(1e-3, 1.5, 0.0, 60);
        let ivs = cp.excluded_intervals_exact(0.2).unwrap();
        assert!(!ivs.is_empty());
        assert!(ivs.iter().all(|iv| iv.k != iv.j && iv.lo < iv.hi && iv.lo >= 0.0 && iv.hi <= 0.2));
        let merged = merge(&ivs);
        assert!(merged.windows(2).all(|w| w[0].1 < w[1].0));
    }

    #[test]
    fn first_condition_intervals_match_the_closed_form() {
        let cp = problem(1e-3, 1.5, 0.0, 30);
        for iv in cp.excluded_intervals_exact(0.2).unwrap().iter().filter(|iv| iv.condition == 1) {
            let b = cp.dioph.bound(iv.k, iv.j);
            for d in [iv.lo, iv.hi] {
                if d > 0.0 && d < 0.2 {
                    let v = (cp.omega(d) * iv.k as f64 - iv.j as f64).abs();
                    assert!((v - b).abs() <= 1e-12, "{iv:?}");
                }
            }
            let mid = 0.5 * (iv.lo + iv.hi);
            assert!((cp.omega(mid) * iv.k as f64 - iv.j as f64).abs() < b);
        }
    }

    #[test]
    fn sampling_agrees_with_the_interval_union() {
        let cp = problem(1e-3, 1.5, 0.0, 150);
        let n = 100_000;
        let est = cp.estimate(0.1, n, 7).unwrap();
        assert!((est.density_sampled - est.density_interval).abs() <= 2.0 / (n as f64).sqrt(), "{} vs {}", est.density_sampled, est.density_interval);
        assert!(est.density_interval >= est.density_lower_bound - 1e-15);
        assert!(est.density_interval < 1.0);
    }

    #[test]
    fn shifted_condition_is_sampled_consistently() {
        let cp = problem(2e-3, 1.5, 3.0, 80);
        let ivs = cp.excluded_intervals_exact(0.2).unwrap();
        assert!(ivs.iter().any(|iv| iv.condition == 2));
        let merged = merge(&ivs);
        let inside = |d: f64| merged.iter().any(|&(a, b)| d > a && d < b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let d = 0.2 * rng.random::<f64>();
            assert_eq!(cp.is_admissible(d), !inside(d), "δ = {d}");
        }
    }

    #[test]
    fn smaller_gamma_never_lowers_density() {
        let a = problem(1e-3, 1.5, 0.0, 100).estimate(0.2, 1000, 1).unwrap();
        let b = problem(5e-4, 1.5, 0.0, 100).estimate(0.2, 1000, 1).unwrap();
        assert!(b.density_interval >= a.density_interval);
    }

    #[test]
    fn larger_tau_shrinks_high_order_exclusions() {
        let ex = |tau: f64| {
            let cp = problem(1e-3, tau, 0.0, 100);
            let ivs: Vec<_> = cp.excluded_intervals_exact(0.2).unwrap().into_iter().filter(|iv| iv.k + iv.j > 40).collect();
            merge(&ivs).iter().map(|(a, b)| b - a).sum::<f64>()
        };
        assert!(ex(1.99) < ex(1.1));
    }

    #[test]
    fn density_curve_requires_decreasing_eta() {
        let cp = problem(1e-3, 1.5, 0.0, 20);
        assert!(cp.density_curve(&[0.1, 0.2], 10, 1).is_err());
        assert_eq!(cp.density_curve(&[0.2, 0.1, 0.05], 100, 1).unwrap().len(), 3);
    }

    #[test]
    fn piecewise_model_interpolates() {
        let m = MelnikovModel::piecewise(vec![0.0, 0.1], vec![1.0, 3.0]).unwrap();
        assert_eq!(m.eval(0.05), 2.0);
        assert_eq!(m.eval(-1.0), 1.0);
        assert_eq!(m.eval(1.0), 3.0);
        assert!(MelnikovModel::piecewise(vec![0.1, 0.0], vec![1.0, 2.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn screened_amplitudes_are_never_excluded(d in 0.001f64..0.2, m in -2.0f64..2.0) {
            let cp = problem(1e-3, 1.5, m, 64);
            let eps = cp.eps(d);
            let rep = diophantine_check(cp.omega(d), eps, m, &cp.dioph, 32);
            let merged = merge(&cp.excluded_intervals_exact(0.2).unwrap());
            let inside = merged.iter().any(|&(a, b)| d > a && d < b);
            if rep.pass {
                prop_assert!(!inside);
            }
            prop_assert_eq!(cp.is_admissible(d), !inside);
        }
    }
}
