//! Row-stochastic transition kernels over grid cells plus the absorbing
//! violation state.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{AffineDrift, Grid, NoiseSpec};

/// Sparse kernel row: `probs[k]` is the probability of landing in cell
/// `first + k`; `violation` is the mass leaving the state interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub first: usize,
    pub probs: Vec<f64>,
    pub violation: f64,
}

impl Row {
    /// Successor cells with their probabilities (violation excluded).
    pub fn cells(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().enumerate().map(move |(k, &p)| (self.first + k, p))
    }

    pub fn last(&self) -> usize {
        self.first + self.probs.len().saturating_sub(1)
    }

    /// `sum_k p_k values[k]` over grid cells, ignoring violation mass.
    pub fn dot(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(&values[self.first..]).map(|(p, v)| p * v).sum()
    }

    fn trimmed(first: usize, probs: Vec<f64>, violation: f64) -> Self {
        let lead = probs.iter().take_while(|&&p| p == 0.0).count();
        if lead == probs.len() {
            return Self { first: 0, probs: Vec::new(), violation };
        }
        let trail = probs.iter().rev().take_while(|&&p| p == 0.0).count();
        let probs = probs[lead..probs.len() - trail].to_vec();
        Self { first: first + lead, probs, violation }
    }
}

#[derive(Debug, Clone)]
pub struct TransitionKernel {
    grid: Grid,
    rows: Vec<Row>,
    source: Option<(AffineDrift, NoiseSpec)>,
}

// Interval endpoints within this distance of the noise support are snapped
// onto it, so that centre arithmetic never creates spurious 1e-17 masses.
const SNAP: f64 = 1e-12;

/// Discretise `s+ = drift(s, a) + w` on the grid by integrating the
/// truncated-Gaussian density exactly over every cell.
pub fn build_kernel(grid: &Grid, drift: AffineDrift, noise: NoiseSpec) -> TransitionKernel {
    let n_a = grid.n_actions;
    let rows = (0..grid.n_states * n_a)
        .into_par_iter()
        .map(|idx| {
            let mean = drift.apply(grid.state(idx / n_a), grid.action(idx % n_a));
            kernel_row(grid, mean, &noise)
        })
        .collect();
    TransitionKernel { grid: *grid, rows, source: Some((drift, noise)) }
}

fn kernel_row(grid: &Grid, mean: f64, noise: &NoiseSpec) -> Row {
    if noise.is_deterministic() {
        return match grid.locate_state(mean) {
            Some(k) => Row { first: k, probs: vec![1.0], violation: 0.0 },
            None => Row { first: 0, probs: Vec::new(), violation: 1.0 },
        };
    }
    let scale = SNAP * (1.0 + grid.state_hi.abs().max(grid.state_lo.abs()));
    let offset = |x: f64| {
        let w = x - mean;
        if (w - noise.support_lo).abs() <= scale {
            noise.support_lo
        } else if (w - noise.support_hi).abs() <= scale {
            noise.support_hi
        } else {
            w
        }
    };
    let reach_lo = mean + noise.support_lo;
    let reach_hi = mean + noise.support_hi;
    let lower_violation = noise.mass(f64::NEG_INFINITY, offset(grid.state_lo));
    let upper_violation = noise.mass(offset(grid.state_hi), f64::INFINITY);
    if reach_hi <= grid.state_lo || reach_lo >= grid.state_hi {
        return Row { first: 0, probs: Vec::new(), violation: 1.0 };
    }
    let first = grid.locate_state(reach_lo.max(grid.state_lo)).unwrap_or(0);
    let last = grid.locate_state(reach_hi.min(grid.state_hi)).unwrap_or(grid.n_states - 1);
    let cdf: Vec<f64> = (first..=last + 1).map(|e| noise.cdf(offset(grid.state_edge(e)))).collect();
    let probs: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    let total: f64 = probs.iter().sum::<f64>() + lower_violation + upper_violation;
    let probs = probs.into_iter().map(|p| p / total).collect();
    Row::trimmed(first, probs, (lower_violation + upper_violation) / total)
}

impl TransitionKernel {
    /// Builds a kernel from dense rows of length `n_states + 1` (last entry
    /// is the violation state), one per `(state, action)` in state-major
    /// order.
    pub fn from_dense(grid: &Grid, dense: &[Vec<f64>]) -> Result<Self> {
        if dense.len() != grid.n_states * grid.n_actions {
            return Err(Error::Data(format!(
                "expected {} kernel rows, got {}",
                grid.n_states * grid.n_actions,
                dense.len()
            )));
        }
        let mut rows = Vec::with_capacity(dense.len());
        for (idx, r) in dense.iter().enumerate() {
            if r.len() != grid.n_states + 1 {
                return Err(Error::Data(format!("kernel row {idx} has length {}", r.len())));
            }
            if r.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Data(format!("kernel row {idx} has a negative or non-finite entry")));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Data(format!("kernel row {idx} sums to {sum}")));
            }
            rows.push(Row::trimmed(0, r[..grid.n_states].to_vec(), r[grid.n_states]));
        }
        Ok(Self { grid: *grid, rows, source: None })
    }

    /// Deterministic kernel sending `(i, j)` to `successor(i, j)`
    /// (`None` = violation).
    pub fn from_successors(grid: &Grid, successor: impl Fn(usize, usize) -> Option<usize>) -> Self {
        let rows = (0..grid.n_states * grid.n_actions)
            .map(|idx| match successor(idx / grid.n_actions, idx % grid.n_actions) {
                Some(k) => Row { first: k, probs: vec![1.0], violation: 0.0 },
                None => Row { first: 0, probs: Vec::new(), violation: 1.0 },
            })
            .collect();
        Self { grid: *grid, rows, source: None }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.grid.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.grid.n_actions
    }

    /// Drift and noise the kernel was discretised from, when known.
    pub fn source(&self) -> Option<&(AffineDrift, NoiseSpec)> {
        self.source.as_ref()
    }

    pub fn row(&self, s: usize, a: usize) -> &Row {
        &self.rows[s * self.grid.n_actions + a]
    }

    /// `P(sp | s, a)`; the violation state (index `n_states`) is absorbing.
    pub fn prob(&self, s: usize, a: usize, sp: usize) -> f64 {
        let v = self.grid.violation();
        if s == v {
            return if sp == v { 1.0 } else { 0.0 };
        }
        let row = self.row(s, a);
        if sp == v {
            row.violation
        } else if sp >= row.first && sp <= row.last() && !row.probs.is_empty() {
            row.probs[sp - row.first]
        } else {
            0.0
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.violation == 1.0 || (r.probs.len() == 1 && r.violation == 0.0))
    }

    /// Continuous transition density at `x` for `(s, a)`: the truncated
    /// Gaussian density when the kernel was built from a drift/noise pair,
    /// otherwise the piecewise-constant cell density.
    pub fn density(&self, s: usize, a: usize, x: f64) -> f64 {
        match &self.source {
            Some((drift, noise)) if !noise.is_deterministic() => {
                noise.pdf(x - drift.apply(self.grid.state(s), self.grid.action(a)))
            }
            _ => match self.grid.locate_state(x) {
                Some(k) => self.prob(s, a, k) / self.grid.state_width(),
                None => 0.0,
            },
        }
    }

    /// Draw the successor of `(s, a)` by inverse CDF over the cumulative row
    /// (grid cells in index order, then violation) at uniform `u`.
    pub fn sample_with_uniform(&self, s: usize, a: usize, u: f64) -> usize {
        let v = self.grid.violation();
        if s == v {
            return v;
        }
        let row = self.row(s, a);
        let mut cum = 0.0;
        for (k, p) in row.cells() {
            cum += p;
            if u < cum {
                return k;
            }
        }
        if row.violation > 0.0 || row.probs.is_empty() {
            v
        } else {
            // round-off left u above the final cumulative sum
            row.last()
        }
    }

    /// Streams the kernel as `s_idx,a_idx,sp_idx,prob` rows with 17
    /// significant digits, nonzero entries only.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,a_idx,sp_idx,prob")?;
        let v = self.grid.violation();
        for s in 0..self.grid.n_states {
            for a in 0..self.grid.n_actions {
                let row = self.row(s, a);
                for (k, p) in row.cells().filter(|&(_, p)| p > 0.0) {
                    writeln!(out, "{s},{a},{k},{p:.16e}")?;
                }
                if row.violation > 0.0 {
                    writeln!(out, "{s},{a},{v},{:.16e}", row.violation)?;
                }
            }
        }
        for a in 0..self.grid.n_actions {
            writeln!(out, "{v},{a},{v},{:.16e}", 1.0)?;
        }
        Ok(())
    }
}

/// Samples the successor of `(s, a)` using one uniform draw from `rng`.
pub fn sample_transition<R: Rng + ?Sized>(
    kernel: &TransitionKernel,
    s: usize,
    a: usize,
    rng: &mut R,
) -> usize {
    kernel.sample_with_uniform(s, a, rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn energy_kernel(noise: NoiseSpec) -> (Grid, TransitionKernel) {
        let g = Grid::new(0.0, 1.0, 201, -0.25, 0.25, 101).unwrap();
        let k = build_kernel(&g, AffineDrift::additive(), noise);
        (g, k)
    }

    #[test]
    fn rows_are_stochastic_and_nonnegative() {
        for noise in [
            NoiseSpec::new(0.05, -0.05, 0.05).unwrap(),
            NoiseSpec::new(0.1, -0.25, 0.25).unwrap(),
            NoiseSpec::deterministic(),
        ] {
            let (g, k) = energy_kernel(noise);
            for s in 0..g.n_states {
                for a in 0..g.n_actions {
                    let r = k.row(s, a);
                    let sum: f64 = r.probs.iter().sum::<f64>() + r.violation;
                    assert!((sum - 1.0).abs() <= 1e-12, "row ({s},{a}) sums to {sum}");
                    assert!(r.probs.iter().all(|&p| p >= 0.0) && r.violation >= 0.0);
                }
            }
            for a in 0..g.n_actions {
                assert_eq!(k.prob(g.violation(), a, g.violation()), 1.0);
                assert_eq!(k.prob(g.violation(), a, 3), 0.0);
            }
        }
    }

    #[test]
    fn degenerate_noise_hits_containing_cell() {
        let (g, k) = energy_kernel(NoiseSpec::deterministic());
        let (s, a) = (37, 80);
        let cell = g.locate_state(g.state(s) + g.action(a)).unwrap();
        assert_eq!(k.prob(s, a, cell), 1.0);
        // tiny but nonzero noise concentrates in the same cell
        let (_, k2) = energy_kernel(NoiseSpec::new(1e-9, -1e-9, 1e-9).unwrap());
        assert!(k2.prob(s, a, cell) > 1.0 - 1e-9);
        assert!(k.is_deterministic());
    }

    #[test]
    fn interior_support_has_no_violation_mass() {
        let (g, k) = energy_kernel(NoiseSpec::new(0.05, -0.05, 0.05).unwrap());
        assert_eq!(k.row(100, 50).violation, 0.0);
        assert!((g.state(100) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn boundary_violation_matches_quadrature() {
        // wide support so that the row straddles the upper bound
        let noise = NoiseSpec::new(0.1, -0.25, 0.25).unwrap();
        let (g, k) = energy_kernel(noise);
        let (s, a) = (199, 100);
        let mean = g.state(s) + g.action(a);
        // composite Simpson quadrature of the truncated density over the
        // out-of-range part of the support
        let lo = 1.0 - mean;
        let hi = noise.support_hi;
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let mut acc = noise.pdf(lo) + noise.pdf(hi);
        for i in 1..n {
            let w = lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * noise.pdf(w);
        }
        let oracle = acc * h / 3.0;
        assert!((k.row(s, a).violation - oracle).abs() < 1e-12);
        assert!(oracle > 0.5 && oracle < 1.0);
    }

    #[test]
    fn expectation_consistency_and_refinement() {
        let noise = NoiseSpec::new(0.05, -0.05, 0.05).unwrap();
        let (g, k) = energy_kernel(noise);
        let mean_of = |g: &Grid, k: &TransitionKernel, s: f64, a: f64| {
            let i = g.locate_state(s).unwrap();
            let j = g.nearest_action(a);
            k.row(i, j).cells().map(|(c, p)| p * g.state(c)).sum::<f64>() - g.state(i) - g.action(j)
        };
        for s in (40..160).step_by(7) {
            for a in (0..101).step_by(10) {
                if k.row(s, a).violation > 0.0 {
                    continue;
                }
                let m: f64 = k.row(s, a).cells().map(|(c, p)| p * g.state(c)).sum();
                assert!((m - g.state(s) - g.action(a)).abs() < g.state_width());
            }
        }
        let g2 = Grid::new(0.0, 1.0, 402, -0.25, 0.25, 101).unwrap();
        let k2 = build_kernel(&g2, AffineDrift::additive(), noise);
        for &(s, a) in &[(0.3, 0.0), (0.5, 0.1), (0.62, -0.2)] {
            let bias_coarse = mean_of(&g, &k, s, a);
            let bias_fine = mean_of(&g2, &k2, s, a);
            assert!((bias_coarse - bias_fine).abs() < 0.5 * g.state_width());
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (_, k) = energy_kernel(NoiseSpec::new(0.05, -0.05, 0.05).unwrap());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_transition(&k, 100, 50, &mut rng)
        };
        assert_eq!(draw(42), draw(42));
        let (_, det) = energy_kernel(NoiseSpec::deterministic());
        let target = det.row(100, 10).first;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_transition(&det, 100, 10, &mut rng), target);
        }
    }

    #[test]
    fn dense_constructor_validates() {
        let g = Grid::new(0.0, 1.0, 2, 0.0, 1.0, 2).unwrap();
        let ok = vec![vec![0.5, 0.5, 0.0]; 4];
        assert!(TransitionKernel::from_dense(&g, &ok).is_ok());
        let mut bad = ok.clone();
        bad[1] = vec![0.5, 0.6, 0.0];
        assert!(TransitionKernel::from_dense(&g, &bad).is_err());
        bad[1] = vec![-0.1, 1.1, 0.0];
        assert!(TransitionKernel::from_dense(&g, &bad).is_err());
    }

    #[test]
    fn csv_export_uses_seventeen_digits() {
        let g = Grid::new(0.0, 1.0, 2, 0.0, 1.0, 2).unwrap();
        let k = TransitionKernel::from_dense(&g, &vec![vec![0.25, 0.75, 0.0]; 4]).unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s_idx,a_idx,sp_idx,prob\n0,0,0,2.5000000000000000e-1\n"));
        assert!(text.contains("2,1,2,1.0000000000000000e0"));
    }
}
