//! Backward stochastic difference equations
//!
//! ```text
//! Y_{t+1} - Y_t = -f(t+1, Y_{t+1}, Z_{t+1}) + Z_t ΔW_t + ΔN_t,   Y_T = η
//! ```
//!
//! solved exactly by the backward projection recursion: with
//! `λ_{t+1} = Y_{t+1} + f(t+1, Y_{t+1}, Z_{t+1})`, the solution is
//! `Y_t = E[λ_{t+1} | F_t]`, `Z_t = E[λ_{t+1} ΔW_t* | F_t]`, and `ΔN_t` is
//! what remains of `λ_{t+1} - Y_t` after removing `Z_t ΔW_t`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{self, Bindings, Expr};
use crate::filtration::{
    martingale_check, orthogonality_check, AdaptedProcess, FiltrationError, ProbabilityTree,
};

pub type GeneratorFn =
    dyn Fn(usize, usize, &DVector<f64>, &DMatrix<f64>) -> DVector<f64> + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsdeError {
    #[error("generator is declared to depend on z at the terminal time")]
    TerminalDependsOnZ,
    #[error("generator has noise dimension {generator}, tree has {tree}")]
    NoiseDimension { generator: usize, tree: usize },
    #[error("terminal value must be an ({expected}, 1) process at T, found {found:?}")]
    TerminalShape {
        expected: usize,
        found: (usize, usize),
    },
    #[error("terminal value does not cover the horizon T={0}")]
    TerminalTime(usize),
    #[error("non-finite value at t={t}, node {node}")]
    NonFinite { t: usize, node: String },
    #[error(transparent)]
    Filtration(#[from] FiltrationError),
}

/// The driver `f(t, y, z)` with `t` in `1..=T`, `y ∈ R^n`, `z ∈ R^{n×d}`.
#[derive(Clone)]
pub struct Generator {
    pub n: usize,
    pub d: usize,
    eval: Arc<GeneratorFn>,
    pub terminal_z_independent: bool,
    pub lipschitz_c1: Option<f64>,
    pub lipschitz_c2: Option<f64>,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("terminal_z_independent", &self.terminal_z_independent)
            .field("lipschitz_c1", &self.lipschitz_c1)
            .field("lipschitz_c2", &self.lipschitz_c2)
            .finish_non_exhaustive()
    }
}

impl Generator {
    pub fn new(
        n: usize,
        d: usize,
        eval: impl Fn(usize, usize, &DVector<f64>, &DMatrix<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        Self {
            n,
            d,
            eval: Arc::new(eval),
            terminal_z_independent: true,
            lipschitz_c1: None,
            lipschitz_c2: None,
        }
    }

    pub fn zero(n: usize, d: usize) -> Self {
        Self::new(n, d, move |_, _, _, _| DVector::zeros(n))
    }

    /// One DSL expression per component, over `t`, `y1..yn` and `z` entries.
    /// Evaluation errors surface as NaN, which [`solve_bsde`] reports.
    pub fn from_dsl(exprs: Vec<Expr>, d: usize) -> Self {
        let n = exprs.len();
        Self::new(n, d, move |t, _node, y, z| {
            let zt = z.transpose();
            let b = Bindings {
                t: t as f64,
                x: &[],
                y: y.as_slice(),
                z: zt.as_slice(),
                z_cols: z.ncols(),
            };
            dsl::eval_vector(&exprs, &b).unwrap_or_else(|_| DVector::from_element(n, f64::NAN))
        })
    }

    /// Parses one expression per component with `m = 0`.
    pub fn parse(texts: &[&str], d: usize) -> Result<Self, dsl::ParseError> {
        let dims = dsl::Dims {
            m: 0,
            n: texts.len(),
            d,
        };
        let exprs = texts
            .iter()
            .map(|s| dsl::parse_expr(s, dims))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_dsl(exprs, d))
    }

    pub fn with_lipschitz(mut self, c1: f64, c2: f64) -> Self {
        self.lipschitz_c1 = Some(c1);
        self.lipschitz_c2 = Some(c2);
        self
    }

    pub fn with_terminal_z_independent(mut self, flag: bool) -> Self {
        self.terminal_z_independent = flag;
        self
    }

    pub fn eval(&self, t: usize, node: usize, y: &DVector<f64>, z: &DMatrix<f64>) -> DVector<f64> {
        (self.eval)(t, node, y, z)
    }

    /// Largest `|f(T, y, z₁) - f(T, y, z₂)|` over random leaves and pairs.
    pub fn terminal_z_spread(&self, tree: &ProbabilityTree, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = tree.horizon();
        let leaves = tree.node_count(horizon);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let node = rng.gen_range(0..leaves);
            let y = DVector::from_fn(self.n, |_, _| rng.gen_range(-5.0..5.0));
            let z1 = DMatrix::from_fn(self.n, self.d, |_, _| rng.gen_range(-5.0..5.0));
            let z2 = DMatrix::from_fn(self.n, self.d, |_, _| rng.gen_range(-5.0..5.0));
            let gap = (self.eval(horizon, node, &y, &z1) - self.eval(horizon, node, &y, &z2)).amax();
            worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
        }
        worst
    }

    /// Sampled Lipschitz quotients in `y` (with `z` fixed) and in `z` (with
    /// `y` fixed) over the box `[-radius, radius]`. A lower bound for the
    /// true constants, never a certificate.
    pub fn lipschitz_diagnostic(
        &self,
        tree: &ProbabilityTree,
        samples: usize,
        seed: u64,
        radius: f64,
    ) -> LipschitzDiagnostic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = tree.horizon();
        let mut c1 = 0.0f64;
        let mut c2 = 0.0f64;
        let draw = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-radius..radius))
        };
        for _ in 0..samples {
            let t = rng.gen_range(1..=horizon);
            let node = rng.gen_range(0..tree.node_count(t));
            let y1: DVector<f64> = draw(self.n, 1, &mut rng).column(0).into();
            let y2: DVector<f64> = draw(self.n, 1, &mut rng).column(0).into();
            let z1 = draw(self.n, self.d, &mut rng);
            let z2 = draw(self.n, self.d, &mut rng);
            let dy = (&y1 - &y2).norm();
            if dy > 0.0 {
                let df = (self.eval(t, node, &y1, &z1) - self.eval(t, node, &y2, &z1)).norm();
                c1 = c1.max(df / dy);
            }
            let dz = (&z1 - &z2).norm();
            if dz > 0.0 && t < horizon {
                let df = (self.eval(t, node, &y1, &z1) - self.eval(t, node, &y1, &z2)).norm();
                c2 = c2.max(df / dz);
            }
        }
        LipschitzDiagnostic {
            sampled_c1: c1,
            sampled_c2: c2,
            declared_c1: self.lipschitz_c1,
            declared_c2: self.lipschitz_c2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzDiagnostic {
    pub sampled_c1: f64,
    pub sampled_c2: f64,
    pub declared_c1: Option<f64>,
    pub declared_c2: Option<f64>,
}

impl LipschitzDiagnostic {
    /// False when a sampled quotient exceeds a declared constant.
    pub fn consistent(&self) -> bool {
        let ok = |sampled: f64, declared: Option<f64>| declared.is_none_or(|c| sampled <= c * (1.0 + 1e-12));
        ok(self.sampled_c1, self.declared_c1) && ok(self.sampled_c2, self.declared_c2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    /// `(n, 1)` on `[0, T]`.
    pub y: AdaptedProcess,
    /// `(n, d)` on `[0, T-1]`.
    pub z: AdaptedProcess,
    /// `(n, 1)` on `[0, T]`, starting at zero.
    pub n: AdaptedProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BsdeResiduals {
    pub equation: f64,
    pub terminal: f64,
    pub initial_n: f64,
    pub martingale: f64,
    pub orthogonality: f64,
}

impl BsdeResiduals {
    pub fn max(&self) -> f64 {
        self.equation
            .max(self.terminal)
            .max(self.initial_n)
            .max(self.martingale)
            .max(self.orthogonality)
    }
}

/// Second-moment totals of a solution. The `y` total is reported both with
/// and without the terminal time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyDiagnostics {
    pub y_before_terminal: f64,
    pub y_through_terminal: f64,
    pub z: f64,
    pub n_terminal: f64,
}

fn z_at_next(
    gen: &Generator,
    z_slices: &[Vec<DMatrix<f64>>],
    t_next: usize,
    horizon: usize,
    node: usize,
) -> DMatrix<f64> {
    if t_next < horizon {
        z_slices[t_next][node].clone()
    } else {
        DMatrix::zeros(gen.n, gen.d)
    }
}

pub fn solve_bsde(
    tree: &ProbabilityTree,
    gen: &Generator,
    eta: &AdaptedProcess,
) -> Result<BsdeSolution, BsdeError> {
    if !gen.terminal_z_independent {
        return Err(BsdeError::TerminalDependsOnZ);
    }
    if gen.d != tree.dim() {
        return Err(BsdeError::NoiseDimension {
            generator: gen.d,
            tree: tree.dim(),
        });
    }
    let horizon = tree.horizon();
    if eta.shape() != (gen.n, 1) {
        return Err(BsdeError::TerminalShape {
            expected: gen.n,
            found: eta.shape(),
        });
    }
    if !eta.covers(horizon) {
        return Err(BsdeError::TerminalTime(horizon));
    }

    let mut y: Vec<Vec<DVector<f64>>> = vec![Vec::new(); horizon + 1];
    let mut z: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); horizon];
    let mut dn: Vec<Vec<DVector<f64>>> = vec![Vec::new(); horizon];
    y[horizon] = eta.vector_slice(horizon);

    for t in (0..horizon).rev() {
        let lambda: Vec<DVector<f64>> = (0..tree.node_count(t + 1))
            .map(|node| {
                let yn = &y[t + 1][node];
                let zn = z_at_next(gen, &z, t + 1, horizon, node);
                yn + gen.eval(t + 1, node, yn, &zn)
            })
            .collect();
        for (node, lam) in lambda.iter().enumerate() {
            if lam.iter().any(|v| !v.is_finite()) {
                return Err(BsdeError::NonFinite {
                    t: t + 1,
                    node: tree.path_label(t + 1, node),
                });
            }
        }
        y[t] = tree.cond_mean(t, &lambda);
        z[t] = tree.cond_covariation(t, &lambda);
        dn[t] = lambda
            .iter()
            .enumerate()
            .map(|(child, lam)| {
                let parent = tree.parent(t, child);
                lam - &y[t][parent] - &z[t][parent] * tree.increment_into(t, child)
            })
            .collect();
    }

    let mut n_slices = vec![vec![DVector::zeros(gen.n)]];
    for t in 0..horizon {
        let next = dn[t]
            .iter()
            .enumerate()
            .map(|(child, d)| &n_slices[t][tree.parent(t, child)] + d)
            .collect();
        n_slices.push(next);
    }

    Ok(BsdeSolution {
        y: AdaptedProcess::from_vectors(tree, gen.n, 0, y)?,
        z: AdaptedProcess::from_matrices(tree, (gen.n, gen.d), 0, z)?,
        n: AdaptedProcess::from_vectors(tree, gen.n, 0, n_slices)?,
    })
}

impl BsdeSolution {
    /// Pathwise residual of the defining equation and terminal condition,
    /// plus the martingale and orthogonality defects of `N`.
    pub fn residuals(
        &self,
        tree: &ProbabilityTree,
        gen: &Generator,
        eta: &AdaptedProcess,
    ) -> Result<BsdeResiduals, BsdeError> {
        let horizon = tree.horizon();
        let z_slices: Vec<Vec<DMatrix<f64>>> =
            (0..horizon).map(|t| self.z.slice(t).to_vec()).collect();
        let mut equation = 0.0f64;
        for t in 0..horizon {
            for child in 0..tree.node_count(t + 1) {
                let parent = tree.parent(t, child);
                let y1 = self.y.vector_at(t + 1, child);
                let z1 = z_at_next(gen, &z_slices, t + 1, horizon, child);
                let f = gen.eval(t + 1, child, &y1, &z1);
                let dn = self.n.vector_at(t + 1, child) - self.n.vector_at(t, parent);
                let r = &y1 - self.y.vector_at(t, parent) + f
                    - self.z.at(t, parent) * tree.increment_into(t, child)
                    - dn;
                equation = equation.max(r.amax());
            }
        }
        let terminal = (0..tree.node_count(horizon))
            .map(|leaf| (self.y.vector_at(horizon, leaf) - eta.vector_at(horizon, leaf)).amax())
            .fold(0.0, f64::max);
        Ok(BsdeResiduals {
            equation,
            terminal,
            initial_n: self.n.vector_at(0, 0).amax(),
            martingale: martingale_check(tree, &self.n, f64::INFINITY)?.max_residual,
            orthogonality: orthogonality_check(tree, &self.n, 0..=horizon - 1, f64::INFINITY)?
                .max_residual,
        })
    }

    pub fn energy(&self, tree: &ProbabilityTree) -> EnergyDiagnostics {
        let horizon = tree.horizon();
        let y_sq: Vec<f64> = (0..=horizon)
            .map(|t| tree.expected_sq_norm(t, &self.y.vector_slice(t)))
            .collect();
        let z: f64 = (0..horizon)
            .map(|t| {
                self.z
                    .slice(t)
                    .iter()
                    .zip(tree.node_probabilities(t))
                    .map(|(m, p)| p * m.norm_squared())
                    .sum::<f64>()
            })
            .sum();
        EnergyDiagnostics {
            y_before_terminal: y_sq[..horizon].iter().sum(),
            y_through_terminal: y_sq.iter().sum(),
            z,
            n_terminal: tree.expected_sq_norm(horizon, &self.n.vector_slice(horizon)),
        }
    }

    /// Largest entrywise difference across `Y`, `Z` and `N`.
    pub fn sup_distance(&self, other: &BsdeSolution) -> f64 {
        self.y
            .sup_distance(&other.y)
            .max(self.z.sup_distance(&other.z))
            .max(self.n.sup_distance(&other.n))
    }
}
