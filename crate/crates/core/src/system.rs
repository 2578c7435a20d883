//! Coupled forward-backward systems driven by scalar noise, and the
//! solution quadruple `(X, Y, Z, N)` shared by every FBSΔE solver.
//!
//! The system is
//!
//! ```text
//! X_{t+1} - X_t = b(t, X_t, Y_t, Z_t) + σ(t, X_t, Y_t, Z_t) ΔW_t
//! Y_{t+1} - Y_t = -f(t+1, X_{t+1}, Y_{t+1}, Z_{t+1}) + Z_t ΔW_t + ΔN_t
//! X_0 = x0,  Y_T = h(X_T)
//! ```
//!
//! with `f(T, ·)` independent of `z`; solvers pass a zero `z` at `t = T`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::filtration::{
    martingale_check, orthogonality_check, AdaptedProcess, FiltrationError, ProbabilityTree,
};

/// Vectors indexed by `[time offset][node]`.
pub type Slices = Vec<Vec<DVector<f64>>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("FBSΔE solvers need scalar noise, tree has dimension {0}")]
    NoiseDimension(usize),
    #[error("non-finite {what} at t={t}, node {node}")]
    NonFinite {
        what: &'static str,
        t: usize,
        node: String,
    },
    #[error(transparent)]
    Filtration(#[from] FiltrationError),
}

/// Coefficients of a coupled FBSΔE with `m`-dimensional forward state and
/// `n`-dimensional backward state. `node` is the index of the node at the
/// time argument of each call.
pub trait FbsdeSystem {
    fn state_dim(&self) -> usize;
    fn backward_dim(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;
    /// `b(t, ·)` for `t` in `0..T`.
    fn drift(
        &self,
        t: usize,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64>;
    /// `σ(t, ·)` for `t` in `0..T`.
    fn diffusion(
        &self,
        t: usize,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64>;
    /// `f(t, ·)` for `t` in `1..=T`.
    fn generator(
        &self,
        t: usize,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64>;
    /// `h(x)` at a leaf.
    fn terminal(&self, node: usize, x: &DVector<f64>) -> DVector<f64>;
}

pub(crate) fn require_scalar_noise(tree: &ProbabilityTree) -> Result<(), SystemError> {
    if tree.dim() != 1 {
        return Err(SystemError::NoiseDimension(tree.dim()));
    }
    Ok(())
}

/// `(X, Y, Z)` without the orthogonal martingale; `x`, `y` cover `0..=T`,
/// `z` covers `0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub x: Slices,
    pub y: Slices,
    pub z: Slices,
}

impl Triple {
    pub fn zeros(tree: &ProbabilityTree, m: usize, n: usize) -> Self {
        let horizon = tree.horizon();
        let slab = |len: usize, upto: usize| -> Slices {
            (0..=upto)
                .map(|t| vec![DVector::zeros(len); tree.node_count(t)])
                .collect()
        };
        Self {
            x: slab(m, horizon),
            y: slab(n, horizon),
            z: slab(n, horizon - 1),
        }
    }

    /// `E[Σ_{t<T} (|x̂_t|² + |ŷ_t|² + |ẑ_t|²) + |x̂_T|² + |ŷ_T|²]`.
    pub fn weighted_sq_distance(&self, other: &Triple, tree: &ProbabilityTree) -> f64 {
        let horizon = tree.horizon();
        let mut total = 0.0;
        for t in 0..=horizon {
            let probs = tree.node_probabilities(t);
            for (node, &p) in probs.iter().enumerate() {
                let mut sq = (&self.x[t][node] - &other.x[t][node]).norm_squared()
                    + (&self.y[t][node] - &other.y[t][node]).norm_squared();
                if t < horizon {
                    sq += (&self.z[t][node] - &other.z[t][node]).norm_squared();
                }
                total += p * sq;
            }
        }
        total
    }

    pub fn sup_distance(&self, other: &Triple) -> f64 {
        let sup = |a: &Slices, b: &Slices| {
            a.iter()
                .flatten()
                .zip(b.iter().flatten())
                .map(|(u, v)| (u - v).amax())
                .fold(0.0, f64::max)
        };
        sup(&self.x, &other.x)
            .max(sup(&self.y, &other.y))
            .max(sup(&self.z, &other.z))
    }

    pub fn is_finite(&self) -> bool {
        [&self.x, &self.y, &self.z]
            .iter()
            .flat_map(|s| s.iter().flatten())
            .all(|v| v.iter().all(|e| e.is_finite()))
    }
}

/// Worst pathwise residual of each defining relation, max-abs over nodes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualReport {
    pub forward: f64,
    pub backward: f64,
    pub initial: f64,
    pub terminal: f64,
    pub martingale: f64,
    pub orthogonality: f64,
}

impl ResidualReport {
    /// Largest of the equation residuals (forward, backward, initial, terminal).
    pub fn equations(&self) -> f64 {
        self.forward
            .max(self.backward)
            .max(self.initial)
            .max(self.terminal)
    }

    pub fn max(&self) -> f64 {
        self.equations()
            .max(self.martingale)
            .max(self.orthogonality)
    }
}

/// The quadruple `(X, Y, Z, N)` with its residual diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution {
    pub x: AdaptedProcess,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub n: AdaptedProcess,
    pub residuals: ResidualReport,
}

impl FbsdeSolution {
    /// Builds the quadruple from `(X, Y, Z)`: `N` is the part of the backward
    /// increment not explained by the generator and `Z ΔW`, starting from 0.
    pub fn assemble(
        system: &dyn FbsdeSystem,
        tree: &ProbabilityTree,
        triple: &Triple,
    ) -> Result<Self, SystemError> {
        require_scalar_noise(tree)?;
        let horizon = tree.horizon();
        let (m, n) = (system.state_dim(), system.backward_dim());
        let mut n_slices: Slices = vec![vec![DVector::zeros(n)]];
        for t in 0..horizon {
            let lambda = projection_target(system, tree, triple, t);
            let mut next = Vec::with_capacity(tree.node_count(t + 1));
            for (child, lam) in lambda.iter().enumerate() {
                let parent = tree.parent(t, child);
                let dw = tree.scalar_increment_into(t, child);
                let dn = lam - &triple.y[t][parent] - &triple.z[t][parent] * dw;
                next.push(&n_slices[t][parent] + dn);
            }
            n_slices.push(next);
        }
        let x = AdaptedProcess::from_vectors(tree, m, 0, triple.x.clone())?;
        let y = AdaptedProcess::from_vectors(tree, n, 0, triple.y.clone())?;
        let z = AdaptedProcess::from_vectors(tree, n, 0, triple.z.clone())?;
        let n_proc = AdaptedProcess::from_vectors(tree, n, 0, n_slices)?;
        let mut sol = Self {
            x,
            y,
            z,
            n: n_proc,
            residuals: ResidualReport::default(),
        };
        check_finite(tree, &sol)?;
        sol.residuals = residual_report(system, tree, &sol)?;
        Ok(sol)
    }

    pub fn triple(&self, tree: &ProbabilityTree) -> Triple {
        let horizon = tree.horizon();
        Triple {
            x: (0..=horizon).map(|t| self.x.vector_slice(t)).collect(),
            y: (0..=horizon).map(|t| self.y.vector_slice(t)).collect(),
            z: (0..horizon).map(|t| self.z.vector_slice(t)).collect(),
        }
    }

    /// Largest entrywise difference across all four processes.
    pub fn sup_distance(&self, other: &FbsdeSolution) -> f64 {
        self.x
            .sup_distance(&other.x)
            .max(self.y.sup_distance(&other.y))
            .max(self.z.sup_distance(&other.z))
            .max(self.n.sup_distance(&other.n))
    }
}

fn check_finite(tree: &ProbabilityTree, sol: &FbsdeSolution) -> Result<(), SystemError> {
    for (what, p) in [("X", &sol.x), ("Y", &sol.y), ("Z", &sol.z), ("N", &sol.n)] {
        for t in p.domain() {
            for (node, v) in p.slice(t).iter().enumerate() {
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(SystemError::NonFinite {
                        what,
                        t,
                        node: tree.path_label(t, node),
                    });
                }
            }
        }
    }
    Ok(())
}

/// `Y_{t+1} + f(t+1, X_{t+1}, Y_{t+1}, Z_{t+1})` at every node of time `t + 1`.
pub(crate) fn projection_target(
    system: &dyn FbsdeSystem,
    tree: &ProbabilityTree,
    triple: &Triple,
    t: usize,
) -> Vec<DVector<f64>> {
    let n = system.backward_dim();
    let horizon = tree.horizon();
    let zero_z = DVector::zeros(n);
    (0..tree.node_count(t + 1))
        .map(|node| {
            let x = &triple.x[t + 1][node];
            let y = &triple.y[t + 1][node];
            let z = if t + 1 < horizon {
                &triple.z[t + 1][node]
            } else {
                &zero_z
            };
            y + system.generator(t + 1, node, x, y, z)
        })
        .collect()
}

/// Pathwise residuals of all four equations plus the martingale and
/// orthogonality defects of `N`.
pub fn residual_report(
    system: &dyn FbsdeSystem,
    tree: &ProbabilityTree,
    sol: &FbsdeSolution,
) -> Result<ResidualReport, SystemError> {
    require_scalar_noise(tree)?;
    let horizon = tree.horizon();
    let n = system.backward_dim();
    let zero_z = DVector::zeros(n);
    let mut report = ResidualReport {
        initial: (sol.x.vector_at(0, 0) - system.initial_state()).amax(),
        ..ResidualReport::default()
    };
    for t in 0..horizon {
        for child in 0..tree.node_count(t + 1) {
            let parent = tree.parent(t, child);
            let dw = tree.scalar_increment_into(t, child);
            let (x0, y0, z0) = (
                sol.x.vector_at(t, parent),
                sol.y.vector_at(t, parent),
                sol.z.vector_at(t, parent),
            );
            let (x1, y1) = (sol.x.vector_at(t + 1, child), sol.y.vector_at(t + 1, child));
            let b = system.drift(t, parent, &x0, &y0, &z0);
            let s = system.diffusion(t, parent, &x0, &y0, &z0);
            let fwd = &x1 - &x0 - b - s * dw;
            report.forward = report.forward.max(fwd.amax());

            let z1 = if t + 1 < horizon {
                sol.z.vector_at(t + 1, child)
            } else {
                zero_z.clone()
            };
            let f = system.generator(t + 1, child, &x1, &y1, &z1);
            let dn = sol.n.vector_at(t + 1, child) - sol.n.vector_at(t, parent);
            let bwd = &y1 - &y0 + f - &z0 * dw - dn;
            report.backward = report.backward.max(bwd.amax());
        }
    }
    for leaf in 0..tree.node_count(horizon) {
        let x = sol.x.vector_at(horizon, leaf);
        let h = system.terminal(leaf, &x);
        report.terminal = report
            .terminal
            .max((sol.y.vector_at(horizon, leaf) - h).amax());
    }
    report.initial = report.initial.max(sol.n.vector_at(0, 0).amax());
    report.martingale = martingale_check(tree, &sol.n, f64::INFINITY)?.max_residual;
    report.orthogonality =
        orthogonality_check(tree, &sol.n, 0..=horizon - 1, f64::INFINITY)?.max_residual;
    Ok(report)
}

/// Both sides of the summation-by-parts identity for two solutions:
///
/// `E⟨GX̂_T, Ŷ_T⟩ = E⟨GX̂_0, Ŷ_0⟩ + E Σ_t [⟨GX̂_{t+1}, -f̂(t+1)⟩ + ⟨Gσ̂(t), Ẑ_t⟩ + ⟨Gb̂(t), Ŷ_t⟩]`
///
/// where hats are differences between the two solutions and the coefficient
/// differences are evaluated along each solution with its own system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
}

impl DualityReport {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

pub fn duality_identity(
    tree: &ProbabilityTree,
    g: &DMatrix<f64>,
    first: (&dyn FbsdeSystem, &FbsdeSolution),
    second: (&dyn FbsdeSystem, &FbsdeSolution),
) -> DualityReport {
    let horizon = tree.horizon();
    let (sys1, s1) = first;
    let (sys2, s2) = second;
    let n = sys1.backward_dim();
    let zero_z = DVector::zeros(n);
    let at = |s: &FbsdeSolution, t: usize, node: usize| {
        (
            s.x.vector_at(t, node),
            s.y.vector_at(t, node),
            if t < horizon {
                s.z.vector_at(t, node)
            } else {
                zero_z.clone()
            },
        )
    };
    let pairing = |t: usize| -> f64 {
        tree.node_probabilities(t)
            .iter()
            .enumerate()
            .map(|(node, p)| {
                let (x1, y1, _) = at(s1, t, node);
                let (x2, y2, _) = at(s2, t, node);
                p * (g * (x1 - x2)).dot(&(y1 - y2))
            })
            .sum()
    };
    let lhs = pairing(horizon);
    let mut rhs = pairing(0);
    for t in 0..horizon {
        for (node, p) in tree.node_probabilities(t).iter().enumerate() {
            let (x1, y1, z1) = at(s1, t, node);
            let (x2, y2, z2) = at(s2, t, node);
            let b_hat = sys1.drift(t, node, &x1, &y1, &z1) - sys2.drift(t, node, &x2, &y2, &z2);
            let s_hat =
                sys1.diffusion(t, node, &x1, &y1, &z1) - sys2.diffusion(t, node, &x2, &y2, &z2);
            rhs += p * ((g * s_hat).dot(&(&z1 - &z2)) + (g * b_hat).dot(&(&y1 - &y2)));
        }
        for (node, p) in tree.node_probabilities(t + 1).iter().enumerate() {
            let (x1, y1, z1) = at(s1, t + 1, node);
            let (x2, y2, z2) = at(s2, t + 1, node);
            let f_hat = sys1.generator(t + 1, node, &x1, &y1, &z1)
                - sys2.generator(t + 1, node, &x2, &y2, &z2);
            rhs -= p * (g * (x1 - x2)).dot(&f_hat);
        }
    }
    DualityReport { lhs, rhs }
}
