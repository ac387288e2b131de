//! Per-state and per-state-action tables shared by the MDP solvers and the
//! MPC engine, with masked-infinite entries stored as `None`.

use std::io::{self, Write};

use crate::grid::Grid;

/// Relative tolerance under which two action values count as tied; ties go
/// to the lowest action index in every solver.
pub const TIE_TOLERANCE: f64 = 1e-13;

/// Interpolation weights below this are snapped to the nearer node, so a
/// point sitting on a cell centre never picks up a masked neighbour.
const SNAP_WEIGHT: f64 = 1e-9;

/// Lowest index whose value lies within the tie tolerance of the minimum,
/// together with the exact minimum.
pub fn argmin_lowest<I>(values: I) -> Option<(usize, f64)>
where
    I: IntoIterator<Item = Option<f64>>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let min = iter.clone().flatten().reduce(f64::min)?;
    let thresh = min + TIE_TOLERANCE * min.abs().max(1.0);
    let idx = iter.enumerate().find(|(_, v)| v.is_some_and(|v| v <= thresh)).map(|(j, _)| j)?;
    Some((idx, min))
}

/// Linear interpolation of a masked nodal table at `x`, with nodes at the
/// grid's cell centres. Constant beyond the outermost centres, masked
/// outside `[state_lo, state_hi]` and wherever a neighbour with nonzero
/// weight is masked.
pub fn interpolate(grid: &Grid, values: &[Option<f64>], x: f64) -> Option<f64> {
    interpolate_with(grid, x, |k| values[k])
}

/// [`interpolate`] over nodal values produced on demand by `node`.
pub fn interpolate_with(grid: &Grid, x: f64, node: impl Fn(usize) -> Option<f64>) -> Option<f64> {
    if !grid.contains_state(x) {
        return None;
    }
    let n = grid.n_states;
    let t = grid.center_coordinate(x);
    if t <= 0.0 {
        return node(0);
    }
    if t >= (n - 1) as f64 {
        return node(n - 1);
    }
    let k = t.floor() as usize;
    let w = t - k as f64;
    if w < SNAP_WEIGHT {
        return node(k);
    }
    if w > 1.0 - SNAP_WEIGHT {
        return node(k + 1);
    }
    let (a, b) = (node(k)?, node(k + 1)?);
    Some(a + w * (b - a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<Option<f64>>,
}

impl ValueTable {
    pub fn new(values: Vec<Option<f64>>) -> Self {
        Self { values }
    }

    pub fn zeros(n_states: usize) -> Self {
        Self { values: vec![Some(0.0); n_states] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: usize) -> Option<f64> {
        self.values.get(s).copied().flatten()
    }

    pub fn is_finite(&self, s: usize) -> bool {
        self.get(s).is_some()
    }

    pub fn finite_count(&self) -> usize {
        self.values.iter().flatten().count()
    }

    pub fn interpolate(&self, grid: &Grid, x: f64) -> Option<f64> {
        interpolate(grid, &self.values, x)
    }

    /// Dense copy with masked entries replaced by `fill`.
    pub fn dense(&self, fill: f64) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(fill)).collect()
    }

    /// Sup-norm difference over states finite in both tables.
    pub fn max_abs_diff(&self, other: &ValueTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0, f64::max)
    }

    pub fn same_mask(&self, other: &ValueTable) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.is_some() == b.is_some())
    }

    pub fn write_csv<W: Write>(&self, grid: &Grid, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,s_center,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i},{},{}", grid.state(i), fmt_ext(*v))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<Option<f64>>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<Option<f64>>) -> Self {
        assert_eq!(values.len(), n_states * n_actions, "QTable shape mismatch");
        Self { n_states, n_actions, values }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[Option<f64>] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn entries(&self) -> &[Option<f64>] {
        &self.values
    }

    /// Greedy value and policy with lowest-index tie-breaking.
    pub fn greedy(&self) -> (ValueTable, PolicyTable) {
        let (v, p) = (0..self.n_states)
            .map(|s| match argmin_lowest(self.row(s).iter().copied()) {
                Some((a, m)) => (Some(m), Some(a)),
                None => (None, None),
            })
            .unzip();
        (ValueTable::new(v), PolicyTable::new(p))
    }

    /// Range (max - min) of the finite entries.
    pub fn finite_range(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo.is_finite() { hi - lo } else { 0.0 }
    }

    pub fn write_csv<W: Write>(&self, grid: &Grid, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,a_idx,s_center,a_center,value")?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                writeln!(out, "{s},{a},{},{},{}", grid.state(s), grid.action(a), fmt_ext(self.get(s, a)))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTable {
    pub actions: Vec<Option<usize>>,
}

impl PolicyTable {
    pub fn new(actions: Vec<Option<usize>>) -> Self {
        Self { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, s: usize) -> Option<usize> {
        self.actions.get(s).copied().flatten()
    }

    pub fn defined_count(&self) -> usize {
        self.actions.iter().flatten().count()
    }

    /// Number of states where both policies are defined and disagree.
    pub fn disagreements(&self, other: &PolicyTable) -> usize {
        self.actions
            .iter()
            .zip(&other.actions)
            .filter(|(a, b)| matches!((a, b), (Some(x), Some(y)) if x != y))
            .count()
    }

    pub fn write_csv<W: Write>(&self, grid: &Grid, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,s_center,a_idx,a_center")?;
        for (i, a) in self.actions.iter().enumerate() {
            match a {
                Some(a) => writeln!(out, "{i},{},{a},{}", grid.state(i), grid.action(*a))?,
                None => writeln!(out, "{i},{},inf,inf", grid.state(i))?,
            }
        }
        Ok(())
    }
}

/// Probability mass over grid cells; the final entry is the violation state.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionTable {
    pub mass: Vec<f64>,
}

impl DistributionTable {
    pub fn new(mass: Vec<f64>) -> Self {
        Self { mass }
    }

    /// Point mass at `s` over `n_states` cells plus violation.
    pub fn point(n_states: usize, s: usize) -> Self {
        let mut mass = vec![0.0; n_states + 1];
        mass[s] = 1.0;
        Self { mass }
    }

    pub fn n_states(&self) -> usize {
        self.mass.len() - 1
    }

    pub fn violation_mass(&self) -> f64 {
        *self.mass.last().unwrap_or(&0.0)
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_variation(&self, other: &DistributionTable) -> f64 {
        0.5 * self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Mass on cells whose centre lies within `radius` of `x`.
    pub fn mass_near(&self, grid: &Grid, x: f64, radius: f64) -> f64 {
        (0..grid.n_states).filter(|&i| (grid.state(i) - x).abs() <= radius).map(|i| self.mass[i]).sum()
    }

    pub fn max_cell_mass(&self) -> f64 {
        self.mass[..self.n_states()].iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self, grid: &Grid) -> f64 {
        (0..grid.n_states).map(|i| self.mass[i] * grid.state(i)).sum::<f64>()
            / (1.0 - self.violation_mass())
    }

    pub fn write_csv<W: Write>(&self, grid: &Grid, mut out: W) -> io::Result<()> {
        writeln!(out, "s_idx,s_center,value")?;
        for i in 0..grid.n_states {
            writeln!(out, "{i},{},{}", grid.state(i), self.mass[i])?;
        }
        Ok(())
    }
}

/// Formats an extended real, writing the masked infinity as `inf`.
pub fn fmt_ext(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "inf".to_string(),
    }
}
