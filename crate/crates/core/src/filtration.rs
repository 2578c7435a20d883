//! Finite filtered probability spaces generated by martingale increments.
//!
//! A [`ProbabilityTree`] is built from one [`IncrementDistribution`] per step.
//! Nodes at time `t` are the outcome sequences `(k_0, ..., k_{t-1})`, stored
//! densely in lexicographic order, so a node is addressed by its index in
//! that order. The children of node `i` at time `t` are
//! `i * b_t + k` for `k < b_t`, where `b_t` is the branch count of step `t`.
//!
//! All conditional expectations are exact weighted sums over children.

use std::fmt;
use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance for the moment identities of a single increment distribution.
pub const MOMENT_TOL: f64 = 1e-12;

/// Tolerance for derived-process checks (martingale, orthogonality).
pub const PROCESS_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiltrationError {
    #[error("support has {points} points but {probs} probabilities")]
    LengthMismatch { points: usize, probs: usize },
    #[error("increment distribution has empty support")]
    EmptySupport,
    #[error("support point {index} has dimension {found}, expected {expected}")]
    PointDimension {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid increment distribution: {0}")]
    InvalidIncrements(ValidationReport),
    #[error("a tree needs at least one step")]
    EmptyHorizon,
    #[error("step {step} has dimension {found}, expected {expected}")]
    StepDimension {
        step: usize,
        found: usize,
        expected: usize,
    },
    #[error("process is not defined at time {t} (domain {lo}..={hi})")]
    OutsideDomain { t: usize, lo: usize, hi: usize },
    #[error("time {t} is outside 0..{horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },
    #[error("expected per-node shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("time {t} has {found} node values, expected {expected}")]
    NodeCount {
        t: usize,
        found: usize,
        expected: usize,
    },
}

/// One violated moment condition with its numeric residual.
#[derive(Debug, Clone, PartialEq)]
pub enum MomentViolation {
    NonPositiveProbability { index: usize, value: f64 },
    ProbabilitySum { sum: f64 },
    Mean { component: usize, value: f64 },
    SecondMoment { row: usize, col: usize, value: f64, expected: f64 },
}

impl fmt::Display for MomentViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentViolation::NonPositiveProbability { index, value } => {
                write!(f, "probability {index} = {value} is not positive")
            }
            MomentViolation::ProbabilitySum { sum } => {
                write!(f, "probabilities sum to {sum} ≠ 1")
            }
            MomentViolation::Mean { component, value } => {
                write!(f, "mean[{component}] = {value} ≠ 0")
            }
            MomentViolation::SecondMoment {
                row,
                col,
                value,
                expected,
            } => write!(f, "second moment[{row},{col}] = {value} ≠ {expected}"),
        }
    }
}

/// Outcome of [`validate_increments`]: empty means every condition holds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<MomentViolation>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "pass");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks the support of a candidate increment distribution against
/// `P > 0`, `ΣP = 1`, `E[ΔW] = 0` and `E[ΔW ΔW*] = I`.
pub fn validate_increments(
    points: &[DVector<f64>],
    probs: &[f64],
) -> Result<ValidationReport, FiltrationError> {
    if points.len() != probs.len() {
        return Err(FiltrationError::LengthMismatch {
            points: points.len(),
            probs: probs.len(),
        });
    }
    if points.is_empty() {
        return Err(FiltrationError::EmptySupport);
    }
    let d = points[0].len();
    for (index, p) in points.iter().enumerate() {
        if p.len() != d || d == 0 {
            return Err(FiltrationError::PointDimension {
                index,
                found: p.len(),
                expected: d.max(1),
            });
        }
    }

    let mut violations = Vec::new();
    for (index, &value) in probs.iter().enumerate() {
        if value.is_nan() || value <= 0.0 {
            violations.push(MomentViolation::NonPositiveProbability { index, value });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > MOMENT_TOL {
        violations.push(MomentViolation::ProbabilitySum { sum });
    }
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (p, &w) in points.iter().zip(probs) {
        mean.axpy(w, p, 1.0);
        second += p * p.transpose() * w;
    }
    for (component, &value) in mean.iter().enumerate() {
        if value.abs() > MOMENT_TOL {
            violations.push(MomentViolation::Mean { component, value });
        }
    }
    for row in 0..d {
        for col in 0..d {
            let expected = if row == col { 1.0 } else { 0.0 };
            let value = second[(row, col)];
            if (value - expected).abs() > MOMENT_TOL {
                violations.push(MomentViolation::SecondMoment {
                    row,
                    col,
                    value,
                    expected,
                });
            }
        }
    }
    Ok(ValidationReport { violations })
}

/// Finite-support law of one martingale increment `ΔW_t` in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementDistribution {
    points: Vec<DVector<f64>>,
    probs: Vec<f64>,
}

impl IncrementDistribution {
    pub fn new(points: Vec<DVector<f64>>, probs: Vec<f64>) -> Result<Self, FiltrationError> {
        let report = validate_increments(&points, &probs)?;
        if !report.is_pass() {
            return Err(FiltrationError::InvalidIncrements(report));
        }
        Ok(Self { points, probs })
    }

    /// Scalar increments, one support point per probability.
    pub fn scalar(points: &[f64], probs: &[f64]) -> Result<Self, FiltrationError> {
        Self::new(
            points.iter().map(|&p| DVector::from_element(1, p)).collect(),
            probs.to_vec(),
        )
    }

    /// `±1` with probability ½ each.
    pub fn rademacher() -> Self {
        Self::scalar(&[-1.0, 1.0], &[0.5, 0.5]).expect("rademacher moments")
    }

    /// Points `-a, 0, a` with probabilities `p, 1 - 2p, p`, where `a = sqrt(1 / 2p)`.
    pub fn trinomial(p: f64) -> Result<Self, FiltrationError> {
        let a = (1.0 / (2.0 * p)).sqrt();
        Self::scalar(&[-a, 0.0, a], &[p, 1.0 - 2.0 * p, p])
    }

    /// Vertices of an equilateral triangle of radius `sqrt 2`, equally likely:
    /// the smallest support carrying a two-dimensional increment.
    pub fn triangle2d() -> Self {
        let r = std::f64::consts::SQRT_2;
        let points = (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                DVector::from_vec(vec![r * a.cos(), r * a.sin()])
            })
            .collect::<Vec<_>>();
        let probs = vec![1.0 / 3.0; 3];
        Self::new(points, probs).expect("triangle moments")
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn branches(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// The dense tree of all outcome paths up to the horizon.
#[derive(Debug, Clone)]
pub struct ProbabilityTree {
    steps: Vec<IncrementDistribution>,
    node_counts: Vec<usize>,
    node_probs: Vec<Vec<f64>>,
}

impl ProbabilityTree {
    pub fn new(steps: Vec<IncrementDistribution>) -> Result<Self, FiltrationError> {
        if steps.is_empty() {
            return Err(FiltrationError::EmptyHorizon);
        }
        let d = steps[0].dim();
        for (step, s) in steps.iter().enumerate() {
            if s.dim() != d {
                return Err(FiltrationError::StepDimension {
                    step,
                    found: s.dim(),
                    expected: d,
                });
            }
        }
        let mut node_counts = vec![1usize];
        let mut node_probs = vec![vec![1.0]];
        for s in &steps {
            let prev = node_probs.last().expect("root");
            let mut next = Vec::with_capacity(prev.len() * s.branches());
            for &p in prev {
                next.extend(s.probs().iter().map(|&q| p * q));
            }
            node_counts.push(next.len());
            node_probs.push(next);
        }
        Ok(Self {
            steps,
            node_counts,
            node_probs,
        })
    }

    /// The same distribution at every step.
    pub fn uniform(dist: IncrementDistribution, horizon: usize) -> Result<Self, FiltrationError> {
        Self::new(vec![dist; horizon])
    }

    pub fn rademacher(horizon: usize) -> Self {
        Self::uniform(IncrementDistribution::rademacher(), horizon).expect("horizon >= 1")
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].dim()
    }

    pub fn step(&self, t: usize) -> &IncrementDistribution {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[IncrementDistribution] {
        &self.steps
    }

    pub fn branches(&self, t: usize) -> usize {
        self.steps[t].branches()
    }

    pub fn node_count(&self, t: usize) -> usize {
        self.node_counts[t]
    }

    /// Total number of nodes over the times in `range`.
    pub fn node_total(&self, range: RangeInclusive<usize>) -> usize {
        range.map(|t| self.node_counts[t]).sum()
    }

    pub fn node_probability(&self, t: usize, node: usize) -> f64 {
        self.node_probs[t][node]
    }

    pub fn node_probabilities(&self, t: usize) -> &[f64] {
        &self.node_probs[t]
    }

    pub fn child(&self, t: usize, node: usize, k: usize) -> usize {
        node * self.branches(t) + k
    }

    /// Parent at time `t` of `node` at time `t + 1`.
    pub fn parent(&self, t: usize, node: usize) -> usize {
        node / self.branches(t)
    }

    /// The increment `ΔW_t` realised on the way into `node` at time `t + 1`.
    pub fn increment_into(&self, t: usize, node: usize) -> &DVector<f64> {
        let step = &self.steps[t];
        &step.points()[node % step.branches()]
    }

    /// Scalar increment into `node` at time `t + 1` (first component).
    pub fn scalar_increment_into(&self, t: usize, node: usize) -> f64 {
        self.increment_into(t, node)[0]
    }

    /// Outcome indices `(k_0, ..., k_{t-1})` of a node.
    pub fn node_path(&self, t: usize, mut node: usize) -> Vec<usize> {
        let mut path = vec![0; t];
        for s in (0..t).rev() {
            let b = self.branches(s);
            path[s] = node % b;
            node /= b;
        }
        path
    }

    /// Dot-separated outcome indices, `"root"` at time 0.
    pub fn path_label(&self, t: usize, node: usize) -> String {
        if t == 0 {
            return "root".to_string();
        }
        self.node_path(t, node)
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(".")
    }

    /// `W_t` at a node, with `W_0 = 0`.
    pub fn w_at(&self, t: usize, node: usize) -> DVector<f64> {
        let mut w = DVector::zeros(self.dim());
        for (s, &k) in self.node_path(t, node).iter().enumerate() {
            w += &self.steps[s].points()[k];
        }
        w
    }

    /// `E[x_{t+1} | F_t]` for a time-`t+1` slice of vectors.
    pub fn cond_mean(&self, t: usize, next: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let step = &self.steps[t];
        let b = step.branches();
        (0..self.node_count(t))
            .map(|node| {
                let mut acc = DVector::zeros(next[node * b].len());
                for (k, &p) in step.probs().iter().enumerate() {
                    acc.axpy(p, &next[node * b + k], 1.0);
                }
                acc
            })
            .collect()
    }

    /// `E[x_{t+1} ΔW_t* | F_t]` for a time-`t+1` slice of vectors; `n × d` per node.
    pub fn cond_covariation(&self, t: usize, next: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        let step = &self.steps[t];
        let b = step.branches();
        (0..self.node_count(t))
            .map(|node| {
                let mut acc = DMatrix::zeros(next[node * b].len(), step.dim());
                for (k, (&p, w)) in step.probs().iter().zip(step.points()).enumerate() {
                    acc += &next[node * b + k] * w.transpose() * p;
                }
                acc
            })
            .collect()
    }

    /// `E[x_{t+1} ΔW_t | F_t]` for scalar noise.
    pub fn cond_scalar_covariation(&self, t: usize, next: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let step = &self.steps[t];
        let b = step.branches();
        (0..self.node_count(t))
            .map(|node| {
                let mut acc = DVector::zeros(next[node * b].len());
                for (k, (&p, w)) in step.probs().iter().zip(step.points()).enumerate() {
                    acc.axpy(p * w[0], &next[node * b + k], 1.0);
                }
                acc
            })
            .collect()
    }

    /// `E[|v|^2]` summed over one time slice, weighted by node probability.
    pub fn expected_sq_norm(&self, t: usize, slice: &[DVector<f64>]) -> f64 {
        slice
            .iter()
            .zip(self.node_probabilities(t))
            .map(|(v, p)| p * v.norm_squared())
            .sum()
    }

    fn check_time(&self, t: usize) -> Result<(), FiltrationError> {
        if t > self.horizon() {
            return Err(FiltrationError::TimeOutOfRange {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }
}

/// A matrix-valued value per node, for every time in a contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    rows: usize,
    cols: usize,
    t_lo: usize,
    values: Vec<Vec<DMatrix<f64>>>,
}

impl AdaptedProcess {
    pub fn zeros(
        tree: &ProbabilityTree,
        shape: (usize, usize),
        domain: RangeInclusive<usize>,
    ) -> Self {
        Self::from_fn(tree, shape, domain, |_, _| DMatrix::zeros(shape.0, shape.1))
    }

    /// Fills every node by `f(t, node)`; panics if `f` returns the wrong shape.
    pub fn from_fn(
        tree: &ProbabilityTree,
        shape: (usize, usize),
        domain: RangeInclusive<usize>,
        mut f: impl FnMut(usize, usize) -> DMatrix<f64>,
    ) -> Self {
        let t_lo = *domain.start();
        let values = domain
            .map(|t| {
                (0..tree.node_count(t))
                    .map(|node| {
                        let v = f(t, node);
                        assert_eq!(v.shape(), shape, "value shape at t={t}, node={node}");
                        v
                    })
                    .collect()
            })
            .collect();
        Self {
            rows: shape.0,
            cols: shape.1,
            t_lo,
            values,
        }
    }

    /// Column-vector process from per-time slices starting at `t_lo`.
    pub fn from_vectors(
        tree: &ProbabilityTree,
        rows: usize,
        t_lo: usize,
        slices: Vec<Vec<DVector<f64>>>,
    ) -> Result<Self, FiltrationError> {
        let mut values = Vec::with_capacity(slices.len());
        for (i, slice) in slices.into_iter().enumerate() {
            let t = t_lo + i;
            tree.check_time(t)?;
            if slice.len() != tree.node_count(t) {
                return Err(FiltrationError::NodeCount {
                    t,
                    found: slice.len(),
                    expected: tree.node_count(t),
                });
            }
            let mut row = Vec::with_capacity(slice.len());
            for v in slice {
                if v.len() != rows {
                    return Err(FiltrationError::ShapeMismatch {
                        expected: (rows, 1),
                        found: (v.len(), 1),
                    });
                }
                row.push(DMatrix::from_column_slice(rows, 1, v.as_slice()));
            }
            values.push(row);
        }
        Ok(Self {
            rows,
            cols: 1,
            t_lo,
            values,
        })
    }

    /// Matrix-valued process from per-time slices starting at `t_lo`.
    pub fn from_matrices(
        tree: &ProbabilityTree,
        shape: (usize, usize),
        t_lo: usize,
        slices: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self, FiltrationError> {
        for (i, slice) in slices.iter().enumerate() {
            let t = t_lo + i;
            tree.check_time(t)?;
            if slice.len() != tree.node_count(t) {
                return Err(FiltrationError::NodeCount {
                    t,
                    found: slice.len(),
                    expected: tree.node_count(t),
                });
            }
            if let Some(v) = slice.iter().find(|v| v.shape() != shape) {
                return Err(FiltrationError::ShapeMismatch {
                    expected: shape,
                    found: v.shape(),
                });
            }
        }
        Ok(Self {
            rows: shape.0,
            cols: shape.1,
            t_lo,
            values: slices,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn domain(&self) -> RangeInclusive<usize> {
        self.t_lo..=self.t_hi()
    }

    pub fn t_lo(&self) -> usize {
        self.t_lo
    }

    pub fn t_hi(&self) -> usize {
        self.t_lo + self.values.len() - 1
    }

    pub fn covers(&self, t: usize) -> bool {
        t >= self.t_lo && t <= self.t_hi()
    }

    fn require(&self, t: usize) -> Result<(), FiltrationError> {
        if self.covers(t) {
            Ok(())
        } else {
            Err(FiltrationError::OutsideDomain {
                t,
                lo: self.t_lo,
                hi: self.t_hi(),
            })
        }
    }

    pub fn at(&self, t: usize, node: usize) -> &DMatrix<f64> {
        &self.values[t - self.t_lo][node]
    }

    pub fn at_mut(&mut self, t: usize, node: usize) -> &mut DMatrix<f64> {
        &mut self.values[t - self.t_lo][node]
    }

    pub fn slice(&self, t: usize) -> &[DMatrix<f64>] {
        &self.values[t - self.t_lo]
    }

    /// The value at a node as a column vector (column 0).
    pub fn vector_at(&self, t: usize, node: usize) -> DVector<f64> {
        self.at(t, node).column(0).into_owned()
    }

    /// A time slice of a column-vector process.
    pub fn vector_slice(&self, t: usize) -> Vec<DVector<f64>> {
        self.slice(t)
            .iter()
            .map(|m| m.column(0).into_owned())
            .collect()
    }

    /// Largest absolute entry over all nodes and times.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|m| m.amax())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entrywise difference over the common domain.
    pub fn sup_distance(&self, other: &AdaptedProcess) -> f64 {
        let lo = self.t_lo.max(other.t_lo);
        let hi = self.t_hi().min(other.t_hi());
        let mut worst = 0.0f64;
        for t in lo..=hi {
            for (a, b) in self.slice(t).iter().zip(other.slice(t)) {
                worst = worst.max((a - b).amax());
            }
        }
        worst
    }

    pub fn map(&self, mut f: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        let values: Vec<Vec<DMatrix<f64>>> = self
            .values
            .iter()
            .map(|slice| slice.iter().map(&mut f).collect())
            .collect();
        let (rows, cols) = values
            .first()
            .and_then(|s| s.first())
            .map(|m| m.shape())
            .unwrap_or((self.rows, self.cols));
        Self {
            rows,
            cols,
            t_lo: self.t_lo,
            values,
        }
    }
}

/// Boolean verdict plus the worst residual behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Check {
    pub holds: bool,
    pub max_residual: f64,
}

impl Check {
    fn from_residual(max_residual: f64, tol: f64) -> Self {
        Self {
            holds: max_residual <= tol,
            max_residual,
        }
    }
}

fn check_tree_time(tree: &ProbabilityTree, t: usize) -> Result<(), FiltrationError> {
    if t >= tree.horizon() {
        return Err(FiltrationError::TimeOutOfRange {
            t,
            horizon: tree.horizon(),
        });
    }
    Ok(())
}

/// `E[x_{t+1} | F_t]` as a process on the single time `t`.
pub fn conditional_expectation(
    tree: &ProbabilityTree,
    x: &AdaptedProcess,
    t: usize,
) -> Result<AdaptedProcess, FiltrationError> {
    check_tree_time(tree, t)?;
    x.require(t + 1)?;
    let step = tree.step(t);
    let b = step.branches();
    let next = x.slice(t + 1);
    let slice = (0..tree.node_count(t))
        .map(|node| {
            let mut acc = DMatrix::zeros(x.rows, x.cols);
            for (k, &p) in step.probs().iter().enumerate() {
                acc += &next[node * b + k] * p;
            }
            acc
        })
        .collect();
    AdaptedProcess::from_matrices(tree, x.shape(), t, vec![slice])
}

/// `E[x_{t+1} ΔW_t* | F_t]` for a column-vector process; shape `(n, d)`.
pub fn conditional_increment_covariation(
    tree: &ProbabilityTree,
    x: &AdaptedProcess,
    t: usize,
) -> Result<AdaptedProcess, FiltrationError> {
    check_tree_time(tree, t)?;
    x.require(t + 1)?;
    if x.cols != 1 {
        return Err(FiltrationError::ShapeMismatch {
            expected: (x.rows, 1),
            found: x.shape(),
        });
    }
    let slice = tree.cond_covariation(t, &x.vector_slice(t + 1));
    AdaptedProcess::from_matrices(tree, (x.rows, tree.dim()), t, vec![slice])
}

/// Whether `E[x_{t+1} | F_t] = x_t` at every node, within [`PROCESS_TOL`].
pub fn is_martingale(tree: &ProbabilityTree, x: &AdaptedProcess) -> Result<Check, FiltrationError> {
    martingale_check(tree, x, PROCESS_TOL)
}

pub fn martingale_check(
    tree: &ProbabilityTree,
    x: &AdaptedProcess,
    tol: f64,
) -> Result<Check, FiltrationError> {
    x.require(0)?;
    x.require(tree.horizon())?;
    let mut worst = 0.0f64;
    for t in 0..tree.horizon() {
        let mean = conditional_expectation(tree, x, t)?;
        for (node, m) in mean.slice(t).iter().enumerate() {
            worst = worst.max((m - x.at(t, node)).amax());
        }
    }
    Ok(Check::from_residual(worst, tol))
}

/// Whether `E[ΔN_t ΔW_t* | F_t] = 0` for every `t` in `times` and every node.
pub fn is_strongly_orthogonal(
    tree: &ProbabilityTree,
    n_proc: &AdaptedProcess,
    times: RangeInclusive<usize>,
) -> Result<Check, FiltrationError> {
    orthogonality_check(tree, n_proc, times, PROCESS_TOL)
}

pub fn orthogonality_check(
    tree: &ProbabilityTree,
    n_proc: &AdaptedProcess,
    times: RangeInclusive<usize>,
    tol: f64,
) -> Result<Check, FiltrationError> {
    let mut worst = 0.0f64;
    for t in times {
        check_tree_time(tree, t)?;
        n_proc.require(t)?;
        n_proc.require(t + 1)?;
        let b = tree.branches(t);
        let increments: Vec<DVector<f64>> = (0..tree.node_count(t + 1))
            .map(|child| {
                let parent = child / b;
                (n_proc.at(t + 1, child) - n_proc.at(t, parent))
                    .column(0)
                    .into_owned()
            })
            .collect();
        for cov in tree.cond_covariation(t, &increments) {
            worst = worst.max(cov.amax());
        }
    }
    Ok(Check::from_residual(worst, tol))
}
