//! Brute-force reference solver. The whole FBSΔE becomes one square
//! algebraic system in the unknowns `X_1..X_T`, `Y_0..Y_T`, `Z_0..Z_{T-1}` at
//! every node, with the orthogonal martingale eliminated through the
//! projection equations
//!
//! ```text
//! Y_t = E[Y_{t+1} + f(t+1, ·) | F_t],   Z_t = E[(Y_{t+1} + f(t+1, ·)) ΔW_t | F_t]
//! ```
//!
//! and solved by damped Newton iteration with a finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::system::{
    projection_target, require_scalar_noise, FbsdeSolution, FbsdeSystem, SystemError, Triple,
};
use crate::filtration::ProbabilityTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("OracleFailed: {reason} after {} Newton steps (last residual {last:.3e})", trace.steps.len())]
    OracleFailed {
        reason: String,
        last: f64,
        trace: NewtonTrace,
    },
    #[error("start vector has length {found}, system has {expected} unknowns")]
    StartLength { expected: usize, found: usize },
    #[error(transparent)]
    System(#[from] SystemError),
}

/// The unknown layout and residual map of one FBSΔE on one tree.
pub struct ResidualSystem<'a> {
    system: &'a dyn FbsdeSystem,
    tree: &'a ProbabilityTree,
    x_off: Vec<usize>,
    y_off: Vec<usize>,
    z_off: Vec<usize>,
    len: usize,
}

impl<'a> ResidualSystem<'a> {
    pub fn new(system: &'a dyn FbsdeSystem, tree: &'a ProbabilityTree) -> Result<Self, SystemError> {
        require_scalar_noise(tree)?;
        let (m, n) = (system.state_dim(), system.backward_dim());
        let horizon = tree.horizon();
        let mut cursor = 0;
        let mut x_off = vec![usize::MAX; horizon + 1];
        for (t, off) in x_off.iter_mut().enumerate().skip(1) {
            *off = cursor;
            cursor += m * tree.node_count(t);
        }
        let mut y_off = vec![0; horizon + 1];
        for (t, off) in y_off.iter_mut().enumerate() {
            *off = cursor;
            cursor += n * tree.node_count(t);
        }
        let mut z_off = vec![0; horizon];
        for (t, off) in z_off.iter_mut().enumerate() {
            *off = cursor;
            cursor += n * tree.node_count(t);
        }
        Ok(Self {
            system,
            tree,
            x_off,
            y_off,
            z_off,
            len: cursor,
        })
    }

    /// Number of unknowns, equal to the number of residual equations.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn unpack(&self, v: &DVector<f64>) -> Triple {
        let (m, n) = (self.system.state_dim(), self.system.backward_dim());
        let tree = self.tree;
        let horizon = tree.horizon();
        let mut triple = Triple::zeros(tree, m, n);
        triple.x[0][0] = self.system.initial_state();
        for t in 1..=horizon {
            for node in 0..tree.node_count(t) {
                triple.x[t][node] = v.rows(self.x_off[t] + node * m, m).into();
            }
        }
        for t in 0..=horizon {
            for node in 0..tree.node_count(t) {
                triple.y[t][node] = v.rows(self.y_off[t] + node * n, n).into();
            }
        }
        for t in 0..horizon {
            for node in 0..tree.node_count(t) {
                triple.z[t][node] = v.rows(self.z_off[t] + node * n, n).into();
            }
        }
        triple
    }

    pub fn pack(&self, triple: &Triple) -> DVector<f64> {
        let (m, n) = (self.system.state_dim(), self.system.backward_dim());
        let horizon = self.tree.horizon();
        let mut v = DVector::zeros(self.len);
        for t in 1..=horizon {
            for (node, x) in triple.x[t].iter().enumerate() {
                v.rows_mut(self.x_off[t] + node * m, m).copy_from(x);
            }
        }
        for t in 0..=horizon {
            for (node, y) in triple.y[t].iter().enumerate() {
                v.rows_mut(self.y_off[t] + node * n, n).copy_from(y);
            }
        }
        for t in 0..horizon {
            for (node, z) in triple.z[t].iter().enumerate() {
                v.rows_mut(self.z_off[t] + node * n, n).copy_from(z);
            }
        }
        v
    }

    /// Residual blocks share the unknown layout: forward equations sit in the
    /// `X` slots, `Y` projections and the terminal condition in the `Y`
    /// slots, `Z` projections in the `Z` slots.
    pub fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        let (m, n) = (self.system.state_dim(), self.system.backward_dim());
        let tree = self.tree;
        let sys = self.system;
        let horizon = tree.horizon();
        let tr = self.unpack(v);
        let mut out = DVector::zeros(self.len);
        for t in 0..horizon {
            for child in 0..tree.node_count(t + 1) {
                let parent = tree.parent(t, child);
                let dw = tree.scalar_increment_into(t, child);
                let (x, y, z) = (&tr.x[t][parent], &tr.y[t][parent], &tr.z[t][parent]);
                let r = &tr.x[t + 1][child]
                    - x
                    - sys.drift(t, parent, x, y, z)
                    - sys.diffusion(t, parent, x, y, z) * dw;
                out.rows_mut(self.x_off[t + 1] + child * m, m).copy_from(&r);
            }
            let lambda = projection_target(sys, tree, &tr, t);
            let mean = tree.cond_mean(t, &lambda);
            let cov = tree.cond_scalar_covariation(t, &lambda);
            for node in 0..tree.node_count(t) {
                out.rows_mut(self.y_off[t] + node * n, n)
                    .copy_from(&(&tr.y[t][node] - &mean[node]));
                out.rows_mut(self.z_off[t] + node * n, n)
                    .copy_from(&(&tr.z[t][node] - &cov[node]));
            }
        }
        for leaf in 0..tree.node_count(horizon) {
            let r = &tr.y[horizon][leaf] - sys.terminal(leaf, &tr.x[horizon][leaf]);
            out.rows_mut(self.y_off[horizon] + leaf * n, n).copy_from(&r);
        }
        out
    }

    /// Forward differences with step `rel_step · max(1, |v_i|)`.
    pub fn jacobian(&self, v: &DVector<f64>, rel_step: f64) -> DMatrix<f64> {
        let f0 = self.eval(v);
        let mut jac = DMatrix::zeros(self.len, self.len);
        let mut probe = v.clone();
        for i in 0..self.len {
            let h = rel_step * v[i].abs().max(1.0);
            probe[i] = v[i] + h;
            let col = (self.eval(&probe) - &f0) / h;
            jac.set_column(i, &col);
            probe[i] = v[i];
        }
        jac
    }

    /// Central differences with step `rel_step · max(1, |v_i|)`.
    pub fn central_jacobian(&self, v: &DVector<f64>, rel_step: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.len, self.len);
        let mut probe = v.clone();
        for i in 0..self.len {
            let h = rel_step * v[i].abs().max(1.0);
            probe[i] = v[i] + h;
            let up = self.eval(&probe);
            probe[i] = v[i] - h;
            let down = self.eval(&probe);
            jac.set_column(i, &((up - down) / (2.0 * h)));
            probe[i] = v[i];
        }
        jac
    }

    /// Columns `F(e_i) - F(0)`: the exact Jacobian when `F` is affine.
    pub fn affine_jacobian(&self) -> DMatrix<f64> {
        let zero = DVector::zeros(self.len);
        let f0 = self.eval(&zero);
        let mut jac = DMatrix::zeros(self.len, self.len);
        let mut probe = zero;
        for i in 0..self.len {
            probe[i] = 1.0;
            jac.set_column(i, &(self.eval(&probe) - &f0));
            probe[i] = 0.0;
        }
        jac
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub armijo: f64,
    pub min_step: f64,
    pub fd_step: f64,
    pub central: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50,
            armijo: 1e-4,
            min_step: 1e-10,
            fd_step: 1e-7,
            central: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStep {
    pub residual_inf: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NewtonTrace {
    pub initial_residual: f64,
    pub steps: Vec<NewtonStep>,
}

pub fn solve_global_newton(
    rs: &ResidualSystem<'_>,
    start: DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<(DVector<f64>, NewtonTrace), OracleError> {
    if start.len() != rs.len() {
        return Err(OracleError::StartLength {
            expected: rs.len(),
            found: start.len(),
        });
    }
    let mut v = start;
    let mut f = rs.eval(&v);
    let mut trace = NewtonTrace {
        initial_residual: f.amax(),
        steps: Vec::new(),
    };
    let fail = |reason: &str, last: f64, trace: NewtonTrace| OracleError::OracleFailed {
        reason: reason.to_string(),
        last,
        trace,
    };
    loop {
        let res = f.amax();
        if !res.is_finite() {
            return Err(fail("non-finite residual", res, trace));
        }
        if res <= cfg.tol {
            return Ok((v, trace));
        }
        if trace.steps.len() >= cfg.max_iters {
            return Err(fail("iteration cap reached", res, trace));
        }
        let jac = if cfg.central {
            rs.central_jacobian(&v, cfg.fd_step)
        } else {
            rs.jacobian(&v, cfg.fd_step)
        };
        let Some(dir) = jac.lu().solve(&(-&f)) else {
            return Err(fail("singular Jacobian", res, trace));
        };
        let phi = 0.5 * f.norm_squared();
        let mut step = 1.0;
        loop {
            let cand = &v + &dir * step;
            let fc = rs.eval(&cand);
            let phi_c = 0.5 * fc.norm_squared();
            if phi_c.is_finite() && phi_c <= (1.0 - 2.0 * cfg.armijo * step) * phi {
                v = cand;
                f = fc;
                break;
            }
            step *= 0.5;
            if step < cfg.min_step {
                return Err(fail("line search stalled", res, trace));
            }
        }
        trace.steps.push(NewtonStep {
            residual_inf: f.amax(),
            step,
        });
    }
}

/// Runs Newton from `start` (zero when `None`) and assembles the quadruple.
pub fn solve_oracle(
    system: &dyn FbsdeSystem,
    tree: &ProbabilityTree,
    start: Option<&Triple>,
    cfg: &NewtonConfig,
) -> Result<(FbsdeSolution, NewtonTrace), OracleError> {
    let rs = ResidualSystem::new(system, tree)?;
    let v0 = start.map_or_else(|| DVector::zeros(rs.len()), |s| rs.pack(s));
    let (v, trace) = solve_global_newton(&rs, v0, cfg)?;
    let sol = FbsdeSolution::assemble(system, tree, &rs.unpack(&v))?;
    Ok((sol, trace))
}
