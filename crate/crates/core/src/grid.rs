//! Uniform state/action grids, truncated-Gaussian process noise and
//! discount-factor utilities.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use crate::error::{config, Result};

/// Uniform cell-centred discretisation of a scalar state interval and a
/// scalar action interval.
///
/// Index `n_states` is reserved for the absorbing violation state that
/// collects all probability mass leaving `[state_lo, state_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub state_lo: f64,
    pub state_hi: f64,
    pub n_states: usize,
    pub action_lo: f64,
    pub action_hi: f64,
    pub n_actions: usize,
}

impl Grid {
    pub fn new(
        state_lo: f64,
        state_hi: f64,
        n_states: usize,
        action_lo: f64,
        action_hi: f64,
        n_actions: usize,
    ) -> Result<Self> {
        if !(state_lo.is_finite() && state_hi.is_finite() && state_lo < state_hi) {
            return config(format!("state bounds must satisfy lo < hi, got [{state_lo}, {state_hi}]"));
        }
        if !(action_lo.is_finite() && action_hi.is_finite() && action_lo < action_hi) {
            return config(format!(
                "action bounds must satisfy lo < hi, got [{action_lo}, {action_hi}]"
            ));
        }
        if n_states < 2 {
            return config(format!("n_states must be at least 2, got {n_states}"));
        }
        if n_actions < 2 {
            return config(format!("n_actions must be at least 2, got {n_actions}"));
        }
        Ok(Self { state_lo, state_hi, n_states, action_lo, action_hi, n_actions })
    }

    pub fn state_width(&self) -> f64 {
        (self.state_hi - self.state_lo) / self.n_states as f64
    }

    pub fn action_width(&self) -> f64 {
        (self.action_hi - self.action_lo) / self.n_actions as f64
    }

    /// Centre of state cell `i`.
    pub fn state(&self, i: usize) -> f64 {
        self.state_lo + (i as f64 + 0.5) * self.state_width()
    }

    /// Centre of action cell `j`.
    pub fn action(&self, j: usize) -> f64 {
        self.action_lo + (j as f64 + 0.5) * self.action_width()
    }

    /// Lower edge of state cell `i`; `state_edge(n_states)` is `state_hi`.
    pub fn state_edge(&self, i: usize) -> f64 {
        if i == self.n_states {
            self.state_hi
        } else {
            self.state_lo + i as f64 * self.state_width()
        }
    }

    pub fn states(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_states).map(|i| self.state(i))
    }

    pub fn actions(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_actions).map(|j| self.action(j))
    }

    /// Index of the absorbing violation state.
    pub fn violation(&self) -> usize {
        self.n_states
    }

    pub fn contains_state(&self, x: f64) -> bool {
        x >= self.state_lo && x <= self.state_hi
    }

    /// Cell containing `x`, or `None` outside `[state_lo, state_hi]`.
    /// The upper bound belongs to the last cell.
    pub fn locate_state(&self, x: f64) -> Option<usize> {
        if !self.contains_state(x) {
            return None;
        }
        let k = ((x - self.state_lo) / self.state_width()).floor() as usize;
        Some(k.min(self.n_states - 1))
    }

    /// Action cell whose centre is nearest to `u` (ties to the lower index).
    pub fn nearest_action(&self, u: f64) -> usize {
        let t = (u - self.action_lo) / self.action_width() - 0.5;
        let j = if t <= 0.0 { 0 } else { (t + 0.5 - 1e-12).floor().max(0.0) as usize };
        j.min(self.n_actions - 1)
    }

    /// Fractional coordinate of `x` relative to the cell centres:
    /// `x = state(k) + frac * state_width()`.
    pub(crate) fn center_coordinate(&self, x: f64) -> f64 {
        (x - self.state_lo) / self.state_width() - 0.5
    }
}

/// Zero-mean Gaussian noise truncated to `[support_lo, support_hi]`.
///
/// `std_dev == 0` denotes the degenerate (deterministic) limit: a point mass
/// at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub std_dev: f64,
    pub support_lo: f64,
    pub support_hi: f64,
}

impl NoiseSpec {
    pub fn new(std_dev: f64, support_lo: f64, support_hi: f64) -> Result<Self> {
        if !(std_dev.is_finite() && std_dev >= 0.0) {
            return config(format!("std_dev must be finite and nonnegative, got {std_dev}"));
        }
        if !(support_lo.is_finite() && support_hi.is_finite()) {
            return config("noise support must be finite");
        }
        if !(support_lo <= 0.0 && 0.0 <= support_hi) {
            return config(format!(
                "noise support must contain zero, got [{support_lo}, {support_hi}]"
            ));
        }
        if std_dev > 0.0 && support_lo == support_hi {
            return config("noise support is a single point but std_dev > 0");
        }
        Ok(Self { std_dev, support_lo, support_hi })
    }

    pub fn deterministic() -> Self {
        Self { std_dev: 0.0, support_lo: 0.0, support_hi: 0.0 }
    }

    pub fn is_deterministic(&self) -> bool {
        self.std_dev == 0.0
    }

    fn z(&self) -> f64 {
        norm_mass(self.support_lo / self.std_dev, self.support_hi / self.std_dev)
    }

    /// Probability that the noise falls in `[a, b]`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        let lo = a.max(self.support_lo);
        let hi = b.min(self.support_hi);
        if self.is_deterministic() {
            return if lo <= 0.0 && 0.0 <= hi && a <= b { 1.0 } else { 0.0 };
        }
        if hi <= lo {
            return 0.0;
        }
        norm_mass(lo / self.std_dev, hi / self.std_dev) / self.z()
    }

    /// Cumulative distribution function of the truncated noise.
    pub fn cdf(&self, w: f64) -> f64 {
        if w < self.support_lo {
            0.0
        } else if w >= self.support_hi {
            1.0
        } else {
            self.mass(self.support_lo, w)
        }
    }

    /// Density of the truncated noise (zero outside the support). The
    /// degenerate case has no density and returns 0 everywhere.
    pub fn pdf(&self, w: f64) -> f64 {
        if self.is_deterministic() || w < self.support_lo || w > self.support_hi {
            return 0.0;
        }
        let x = w / self.std_dev;
        std_normal_pdf(x) / (self.std_dev * self.z())
    }

    pub fn mean(&self) -> f64 {
        if self.is_deterministic() {
            return 0.0;
        }
        let (a, b) = (self.support_lo / self.std_dev, self.support_hi / self.std_dev);
        self.std_dev * (std_normal_pdf(a) - std_normal_pdf(b)) / self.z()
    }

    pub fn variance(&self) -> f64 {
        if self.is_deterministic() {
            return 0.0;
        }
        let (a, b) = (self.support_lo / self.std_dev, self.support_hi / self.std_dev);
        let z = self.z();
        let m = (std_normal_pdf(a) - std_normal_pdf(b)) / z;
        let t = (a * std_normal_pdf(a) - b * std_normal_pdf(b)) / z;
        self.std_dev * self.std_dev * (1.0 + t - m * m)
    }

    /// Inverse CDF restricted to `[Phi(lo/sigma), Phi(hi/sigma)]`; exact
    /// and free of rejection loops.
    pub fn quantile(&self, u: f64) -> f64 {
        if self.is_deterministic() {
            return 0.0;
        }
        let u = u.clamp(0.0, 1.0);
        let (a, b) = (self.support_lo / self.std_dev, self.support_hi / self.std_dev);
        // Work in whichever tail keeps the cumulative values away from 1.
        let x = if a + b <= 0.0 {
            let pa = std_normal_cdf(a);
            let pb = std_normal_cdf(b);
            std_normal_quantile(pa + u * (pb - pa))
        } else {
            let qa = std_normal_cdf(-a);
            let qb = std_normal_cdf(-b);
            -std_normal_quantile(qa - u * (qa - qb))
        };
        (x * self.std_dev).clamp(self.support_lo, self.support_hi)
    }
}

/// Affine mean dynamics `s_next = state_coeff * s + action_coeff * a + offset`
/// (before noise).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDrift {
    pub state_coeff: f64,
    pub action_coeff: f64,
    pub offset: f64,
}

impl AffineDrift {
    /// `s + a`.
    pub fn additive() -> Self {
        Self { state_coeff: 1.0, action_coeff: 1.0, offset: 0.0 }
    }

    pub fn apply(&self, s: f64, a: f64) -> f64 {
        self.state_coeff * s + self.action_coeff * a + self.offset
    }
}

impl Default for AffineDrift {
    fn default() -> Self {
        Self::additive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountSpec {
    pub gamma: f64,
}

impl DiscountSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return config(format!("discount factor must lie in (0, 1], got {gamma}"));
        }
        Ok(Self { gamma })
    }

    /// Truncation length `T` with `gamma^T <= 10^-digits`.
    pub fn truncation_horizon(&self, digits: f64) -> usize {
        if self.gamma >= 1.0 {
            return usize::MAX;
        }
        (-digits * std::f64::consts::LN_10 / self.gamma.ln()).ceil() as usize
    }
}

/// Discount factor equivalent to a per-step survival probability such that
/// the process survives `n_steps` steps with probability `survival_prob`.
pub fn lifetime_to_gamma(n_steps: u64, survival_prob: f64) -> Result<DiscountSpec> {
    if n_steps == 0 {
        return config("n_steps must be at least 1");
    }
    if !(survival_prob > 0.0 && survival_prob < 1.0) {
        return config(format!("survival probability must lie in (0, 1), got {survival_prob}"));
    }
    DiscountSpec::new(survival_prob.powf(1.0 / n_steps as f64))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `Phi(b) - Phi(a)` evaluated in the tail that avoids cancellation.
fn norm_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        0.5 * (libm::erfc(a * FRAC_1_SQRT_2) - libm::erfc(b * FRAC_1_SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * FRAC_1_SQRT_2) - libm::erfc(-a * FRAC_1_SQRT_2))
    } else {
        0.5 * (libm::erf(b * FRAC_1_SQRT_2) - libm::erf(a * FRAC_1_SQRT_2))
    }
}

/// Standard normal quantile: Acklam's rational approximation polished by
/// Halley steps against `erfc`.
pub(crate) fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let e = 0.5 * libm::erfc(-x / SQRT_2) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_spacing() {
        let g = Grid::new(0.0, 1.0, 201, -0.25, 0.25, 101).unwrap();
        assert!((g.state_width() - 1.0 / 201.0).abs() < 1e-15);
        assert!((g.state_width() - 0.004975).abs() < 1e-6);
        assert!(g.action(50).abs() < 1e-15);
        assert!((g.state(100) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_cell_grid_centres() {
        let g = Grid::new(0.0, 1.0, 2, -1.0, 1.0, 2).unwrap();
        assert_eq!(g.states().collect::<Vec<_>>(), vec![0.25, 0.75]);
        assert_eq!(g.actions().collect::<Vec<_>>(), vec![-0.5, 0.5]);
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(Grid::new(1.0, 0.0, 10, -1.0, 1.0, 3).is_err());
        assert!(Grid::new(0.0, 1.0, 1, -1.0, 1.0, 3).is_err());
        assert!(Grid::new(0.0, 1.0, 10, 1.0, 1.0, 3).is_err());
        assert!(Grid::new(0.0, 1.0, 10, -1.0, 1.0, 1).is_err());
        assert!(Grid::new(0.0, f64::NAN, 10, -1.0, 1.0, 3).is_err());
    }

    #[test]
    fn locate_and_nearest() {
        let g = Grid::new(0.0, 1.0, 4, -1.0, 1.0, 5).unwrap();
        assert_eq!(g.locate_state(0.0), Some(0));
        assert_eq!(g.locate_state(0.26), Some(1));
        assert_eq!(g.locate_state(1.0), Some(3));
        assert_eq!(g.locate_state(1.0001), None);
        assert_eq!(g.nearest_action(0.0), 2);
        assert_eq!(g.nearest_action(-5.0), 0);
        assert_eq!(g.nearest_action(0.79), 4);
    }

    #[test]
    fn lifetime_discount_matches_reported_value() {
        let d = lifetime_to_gamma(175_200, 0.7).unwrap();
        assert!((d.gamma - 0.999997964186182).abs() < 1e-12);
        assert_eq!(lifetime_to_gamma(1, 0.5).unwrap().gamma, 0.5);
        for p in [0.1, 0.9] {
            let g = lifetime_to_gamma(10, p).unwrap().gamma;
            assert!((g.powi(10) - p).abs() < 1e-14);
        }
        assert!(lifetime_to_gamma(10, 1.0).is_err());
        assert!(lifetime_to_gamma(10, 0.0).is_err());
        assert!(lifetime_to_gamma(0, 0.5).is_err());
    }

    #[test]
    fn truncation_horizon_default() {
        assert_eq!(DiscountSpec::new(0.99).unwrap().truncation_horizon(6.0), 1375);
    }

    #[test]
    fn noise_normalisation_and_moments() {
        let n = NoiseSpec::new(0.05, -0.05, 0.05).unwrap();
        assert!((n.mass(-1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(n.mean().abs() < 1e-15);
        // midpoint rule oracle for the variance
        let m = 200_000;
        let h = 0.1 / m as f64;
        let var: f64 = (0..m)
            .map(|k| {
                let w = -0.05 + (k as f64 + 0.5) * h;
                w * w * n.pdf(w) * h
            })
            .sum();
        assert!((var - n.variance()).abs() < 1e-10);

        let skew = NoiseSpec::new(0.1, -0.05, 0.25).unwrap();
        let mean: f64 = (0..m)
            .map(|k| {
                let w = -0.05 + (k as f64 + 0.5) * (0.3 / m as f64);
                w * skew.pdf(w) * (0.3 / m as f64)
            })
            .sum();
        assert!((mean - skew.mean()).abs() < 1e-10);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let n = NoiseSpec::new(0.1, -0.25, 0.25).unwrap();
        for &u in &[1e-9, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-12] {
            let w = n.quantile(u);
            assert!((n.cdf(w) - u).abs() < 1e-12, "u={u} w={w}");
        }
        assert!(std_normal_quantile(0.975) - 1.959963984540054 < 1e-14);
    }

    #[test]
    fn invalid_noise_rejected() {
        assert!(NoiseSpec::new(-0.1, -1.0, 1.0).is_err());
        assert!(NoiseSpec::new(0.1, 0.1, 1.0).is_err());
        assert!(NoiseSpec::new(0.1, 0.0, 0.0).is_err());
        assert!(NoiseSpec::new(0.0, 0.0, 0.0).is_ok());
    }
}
