//! Coupled nonlinear FBSΔEs solved by continuation in a homotopy parameter.
//!
//! A [`NonlinearModel`] carries `b`, `σ`, `f`, `h`, a full-rank `G` and the
//! monotonicity constants `β₁`, `β₂`. The blended family
//!
//! ```text
//! b^α = α b + (1-α) β₂ (-G* y)      σ^α = α σ + (1-α) β₂ (-G* z)
//! f^α = α f + (1-α) β₁ G x          h^α = α h + (1-α) G x
//! ```
//!
//! is linear at `α = 0` and equals the model at `α = 1`. [`solve_continuation`]
//! walks `α` from 0 to 1. Each step from a solved level `α₀` to `α₀ + δ` is a
//! fixed-point iteration whose every evaluation solves a level-`α₀` system
//! with extra forcing terms; that inner solve is itself either the linear
//! anchor (at level 0) or another fixed-point iteration from a lower solved
//! level.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{self, Bindings, Expr};
use crate::filtration::{AdaptedProcess, FiltrationError, ProbabilityTree};
use crate::linear::{
    HomogeneousCoefficients, InhomogeneousTerms, LinearError, PreparedLinear, SINGULAR_TOL,
};
use crate::system::{residual_report, FbsdeSolution, FbsdeSystem, Slices, SystemError, Triple};

pub type CoefficientFn =
    dyn Fn(usize, usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type TerminalFn = dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NonlinearError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("α = {0} lies outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("invalid continuation config: {0}")]
    InvalidConfig(String),
    #[error("ContinuationFailed at α = {alpha} (step fell below {delta_min}): {reason}")]
    ContinuationFailed {
        alpha: f64,
        delta_min: f64,
        reason: String,
        trace: Box<ContinuationTrace>,
    },
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Filtration(#[from] FiltrationError),
}

/// A nonlinear FBSΔE with scalar noise. `b` and `σ` are called for `t` in
/// `0..T`, `f` for `t` in `1..=T` (with a zero `z` at `T`), `h` at leaves.
#[derive(Clone)]
pub struct NonlinearModel {
    pub m: usize,
    pub n: usize,
    b: Arc<CoefficientFn>,
    sigma: Arc<CoefficientFn>,
    f: Arc<CoefficientFn>,
    h: Arc<TerminalFn>,
    pub g: DMatrix<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub lipschitz_c: Option<f64>,
    pub x0: DVector<f64>,
}

impl fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("m", &self.m)
            .field("n", &self.n)
            .field("g", &self.g)
            .field("beta1", &self.beta1)
            .field("beta2", &self.beta2)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

/// DSL sources for the four coefficient maps, one expression per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelExprs {
    pub b: Vec<Expr>,
    pub sigma: Vec<Expr>,
    pub f: Vec<Expr>,
    pub h: Vec<Expr>,
}

fn dsl_fn(exprs: Vec<Expr>) -> Arc<CoefficientFn> {
    let len = exprs.len();
    Arc::new(move |t, _node, x, y, z| {
        let b = Bindings::new(t as f64, x.as_slice(), y.as_slice(), z.as_slice());
        dsl::eval_vector(&exprs, &b).unwrap_or_else(|_| DVector::from_element(len, f64::NAN))
    })
}

impl NonlinearModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: DMatrix<f64>,
        beta1: f64,
        beta2: f64,
        x0: DVector<f64>,
        b: impl Fn(usize, usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        sigma: impl Fn(usize, usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        f: impl Fn(usize, usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        h: impl Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        let (n, m) = g.shape();
        Self {
            m,
            n,
            b: Arc::new(b),
            sigma: Arc::new(sigma),
            f: Arc::new(f),
            h: Arc::new(h),
            g,
            beta1,
            beta2,
            lipschitz_c: None,
            x0,
        }
    }

    /// Builds the model from DSL expressions. `h` may mention only `x`.
    pub fn from_exprs(
        exprs: ModelExprs,
        g: DMatrix<f64>,
        beta1: f64,
        beta2: f64,
        x0: DVector<f64>,
    ) -> Result<Self, NonlinearError> {
        let (n, m) = g.shape();
        let check = |what: &str, list: &[Expr], len: usize| {
            if list.len() != len {
                return Err(NonlinearError::InvalidModel(format!(
                    "{what} needs {len} expressions, found {}",
                    list.len()
                )));
            }
            Ok(())
        };
        check("b", &exprs.b, m)?;
        check("sigma", &exprs.sigma, m)?;
        check("f", &exprs.f, n)?;
        check("h", &exprs.h, n)?;
        let h_fn = dsl_fn(exprs.h);
        let empty = DVector::zeros(n);
        Ok(Self {
            m,
            n,
            b: dsl_fn(exprs.b),
            sigma: dsl_fn(exprs.sigma),
            f: dsl_fn(exprs.f),
            h: Arc::new(move |node, x| h_fn(0, node, x, &empty, &empty)),
            g,
            beta1,
            beta2,
            lipschitz_c: None,
            x0,
        })
    }

    /// Parses expression strings against dimensions `(m, n)` taken from `G`.
    #[allow(clippy::too_many_arguments)]
    pub fn parse(
        b: &[&str],
        sigma: &[&str],
        f: &[&str],
        h: &[&str],
        g: DMatrix<f64>,
        beta1: f64,
        beta2: f64,
        x0: DVector<f64>,
    ) -> Result<Self, NonlinearError> {
        let dims = dsl::Dims::new(g.ncols(), g.nrows());
        let parse = |list: &[&str]| {
            list.iter()
                .map(|s| dsl::parse_expr(s, dims))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| NonlinearError::InvalidModel(e.to_string()))
        };
        let exprs = ModelExprs {
            b: parse(b)?,
            sigma: parse(sigma)?,
            f: parse(f)?,
            h: parse(h)?,
        };
        if exprs
            .h
            .iter()
            .any(|e| e.mentions(&|v| matches!(v, dsl::Var::Y(_) | dsl::Var::Z(..))))
        {
            return Err(NonlinearError::InvalidModel(
                "h may depend on t and x only".to_string(),
            ));
        }
        Self::from_exprs(exprs, g, beta1, beta2, x0)
    }

    /// The anchor system itself, with constant forcing `(b0, σ0, f0, h0)`.
    pub fn anchor(
        g: DMatrix<f64>,
        beta1: f64,
        beta2: f64,
        x0: DVector<f64>,
        forcing: [DVector<f64>; 4],
    ) -> Self {
        let [b0, s0, f0, h0] = forcing;
        let gt = g.transpose();
        let (gt1, gt2, g1, g2) = (gt.clone(), gt, g.clone(), g.clone());
        Self::new(
            g,
            beta1,
            beta2,
            x0,
            move |_, _, _, y, _| &b0 - &gt1 * y * beta2,
            move |_, _, _, _, z| &s0 - &gt2 * z * beta2,
            move |_, _, x, _, _| &f0 + &g1 * x * beta1,
            move |_, x| &h0 + &g2 * x,
        )
    }

    pub fn with_lipschitz(mut self, c: f64) -> Self {
        self.lipschitz_c = Some(c);
        self
    }

    pub fn validate(&self) -> Result<(), NonlinearError> {
        let bad = |msg: String| Err(NonlinearError::InvalidModel(msg));
        if self.g.shape() != (self.n, self.m) {
            return bad(format!("G must be {}x{}", self.n, self.m));
        }
        if self.x0.len() != self.m {
            return bad(format!("x0 must have length {}", self.m));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        if !(b1 >= 0.0 && b2 >= 0.0 && b1 + b2 > 0.0) {
            return bad(format!(
                "need β₁, β₂ ≥ 0 with β₁ + β₂ > 0, found ({b1}, {b2})"
            ));
        }
        if self.n > self.m && b1 <= 0.0 {
            return bad("β₁ must be positive when n > m".to_string());
        }
        if self.m > self.n && b2 <= 0.0 {
            return bad("β₂ must be positive when m > n".to_string());
        }
        let rank = self
            .g
            .singular_values()
            .iter()
            .filter(|s| **s > SINGULAR_TOL)
            .count();
        if rank != self.m.min(self.n) {
            return bad(format!("G has rank {rank}, expected {}", self.m.min(self.n)));
        }
        Ok(())
    }

    pub fn b(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        (self.b)(t, node, x, y, z)
    }

    pub fn sigma(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        (self.sigma)(t, node, x, y, z)
    }

    pub fn f(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, node, x, y, z)
    }

    pub fn h(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(node, x)
    }

    /// Largest `|f(T, x, y, z₁) - f(T, x, y, z₂)|` over random samples.
    pub fn terminal_z_spread(&self, tree: &ProbabilityTree, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = tree.horizon();
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let node = rng.gen_range(0..tree.node_count(horizon));
            let x = random_vec(&mut rng, self.m, 5.0);
            let y = random_vec(&mut rng, self.n, 5.0);
            let z1 = random_vec(&mut rng, self.n, 5.0);
            let z2 = random_vec(&mut rng, self.n, 5.0);
            let gap = (self.f(horizon, node, &x, &y, &z1) - self.f(horizon, node, &x, &y, &z2)).amax();
            worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
        }
        worst
    }
}

impl FbsdeSystem for NonlinearModel {
    fn state_dim(&self) -> usize {
        self.m
    }
    fn backward_dim(&self) -> usize {
        self.n
    }
    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }
    fn drift(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.b(t, node, x, y, z)
    }
    fn diffusion(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.sigma(t, node, x, y, z)
    }
    fn generator(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.f(t, node, x, y, z)
    }
    fn terminal(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        self.h(node, x)
    }
}

/// The model blended with its linear anchor at weight `alpha`.
#[derive(Debug, Clone)]
pub struct Blended<'a> {
    pub model: &'a NonlinearModel,
    pub alpha: f64,
}

pub fn homotopy_coefficients(model: &NonlinearModel, alpha: f64) -> Result<Blended<'_>, NonlinearError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NonlinearError::AlphaOutOfRange(alpha));
    }
    Ok(Blended { model, alpha })
}

impl FbsdeSystem for Blended<'_> {
    fn state_dim(&self) -> usize {
        self.model.m
    }
    fn backward_dim(&self) -> usize {
        self.model.n
    }
    fn initial_state(&self) -> DVector<f64> {
        self.model.x0.clone()
    }
    fn drift(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let md = self.model;
        let a = self.alpha;
        md.b(t, node, x, y, z) * a - md.g.tr_mul(y) * ((1.0 - a) * md.beta2)
    }
    fn diffusion(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let md = self.model;
        let a = self.alpha;
        md.sigma(t, node, x, y, z) * a - md.g.tr_mul(z) * ((1.0 - a) * md.beta2)
    }
    fn generator(&self, t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let md = self.model;
        let a = self.alpha;
        md.f(t, node, x, y, z) * a + &md.g * x * ((1.0 - a) * md.beta1)
    }
    fn terminal(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        let md = self.model;
        let a = self.alpha;
        md.h(node, x) * a + &md.g * x * (1.0 - a)
    }
}

/// Starting iterate of each stage's fixed-point loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmStart {
    Zero,
    /// The `α = 0` solution.
    Anchor,
    /// The solution of the last completed stage.
    #[default]
    PreviousStage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationConfig {
    pub delta_init: f64,
    pub delta_min: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub inner_recursion_depth_cap: usize,
    pub warm_start: WarmStart,
    /// Sample pairs for the monotonicity check that tags the run; 0 skips it.
    pub monotone_samples: usize,
    pub seed: u64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            delta_init: 0.5,
            delta_min: 1.0 / 1024.0,
            picard_tol: 1e-11,
            picard_max_iters: 200,
            inner_recursion_depth_cap: 8,
            warm_start: WarmStart::PreviousStage,
            monotone_samples: 2000,
            seed: 0,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<(), NonlinearError> {
        if !(0.0 < self.delta_min && self.delta_min <= self.delta_init && self.delta_init <= 1.0) {
            return Err(NonlinearError::InvalidConfig(format!(
                "need 0 < delta_min ≤ delta_init ≤ 1, found {} and {}",
                self.delta_min, self.delta_init
            )));
        }
        if self.picard_tol.is_nan() || self.picard_tol <= 0.0 || self.picard_max_iters == 0 || self.inner_recursion_depth_cap == 0 {
            return Err(NonlinearError::InvalidConfig(
                "picard_tol, picard_max_iters and inner_recursion_depth_cap must be positive"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub alpha: f64,
    pub delta: f64,
    pub iterations: usize,
    /// Weighted distances between successive iterates.
    pub distances: Vec<f64>,
    /// Largest equation residual of the level-`alpha` system along the stage solution.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedStep {
    pub from_alpha: f64,
    pub delta: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssumptionStatus {
    NotChecked,
    Holds { samples: usize },
    Violated { worst_slack: f64 },
}

impl AssumptionStatus {
    pub fn tag(&self) -> &'static str {
        match self {
            AssumptionStatus::Holds { .. } => "assumption-sampled",
            _ => "assumption-unverified",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationTrace {
    /// Stage 0 (the linear anchor) first, then one record per accepted step.
    pub stages: Vec<StageRecord>,
    pub rejected: Vec<RejectedStep>,
    pub linear_solves: usize,
    pub assumption: AssumptionStatus,
}

impl ContinuationTrace {
    pub fn alphas(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.alpha).collect()
    }
}

/// Extra node-dependent terms added to `b`, `σ`, `f` (`f` indexed by `t-1`) and `h`.
#[derive(Debug, Clone)]
struct Forcing {
    b: Slices,
    sigma: Slices,
    f: Slices,
    h: Vec<DVector<f64>>,
}

impl Forcing {
    fn zeros(tree: &ProbabilityTree, m: usize, n: usize) -> Self {
        let horizon = tree.horizon();
        let slab = |len: usize, times: std::ops::Range<usize>| -> Slices {
            times
                .map(|t| vec![DVector::zeros(len); tree.node_count(t)])
                .collect()
        };
        Self {
            b: slab(m, 0..horizon),
            sigma: slab(m, 0..horizon),
            f: slab(n, 1..horizon + 1),
            h: vec![DVector::zeros(n); tree.node_count(horizon)],
        }
    }

    fn add_scaled(&self, other: &Forcing, s: f64) -> Forcing {
        let mix = |a: &Slices, b: &Slices| -> Slices {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| u + v * s).collect())
                .collect()
        };
        Forcing {
            b: mix(&self.b, &other.b),
            sigma: mix(&self.sigma, &other.sigma),
            f: mix(&self.f, &other.f),
            h: self.h.iter().zip(&other.h).map(|(u, v)| u + v * s).collect(),
        }
    }
}

/// Solves blended levels with forcing; keeps the accepted stage solutions.
struct Engine<'a> {
    model: &'a NonlinearModel,
    tree: &'a ProbabilityTree,
    anchor: PreparedLinear,
    cfg: ContinuationConfig,
    /// Accepted levels with their solutions, increasing in `α`.
    levels: Vec<(f64, Triple)>,
    /// Largest homotopy gap an inner solve is allowed to bridge directly.
    reach: f64,
    linear_solves: usize,
}

#[derive(Debug)]
struct PicardOutcome {
    solution: Triple,
    distances: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn linear(&mut self, forcing: &Forcing) -> Result<Triple, NonlinearError> {
        let tree = self.tree;
        let (m, n) = (self.model.m, self.model.n);
        let horizon = tree.horizon();
        let neg_f: Slices = forcing
            .f
            .iter()
            .map(|row| row.iter().map(|v| -v).collect())
            .collect();
        let inhom = InhomogeneousTerms {
            d: AdaptedProcess::from_vectors(tree, m, 0, forcing.b.clone())?,
            d_bar: AdaptedProcess::from_vectors(tree, m, 0, forcing.sigma.clone())?,
            d_hat: AdaptedProcess::from_vectors(tree, n, 1, neg_f)?,
            g: AdaptedProcess::from_vectors(tree, n, horizon, vec![forcing.h.clone()])?,
            x0: self.model.x0.clone(),
        };
        self.linear_solves += 1;
        Ok(self.anchor.solve(tree, &inhom))
    }

    /// `(b + β₂G*y, σ + β₂G*z, f - β₁Gx, h - Gx)` along `u`: the derivative of
    /// the blended coefficients in `α`.
    fn nonlinear_part(&self, u: &Triple) -> Forcing {
        let md = self.model;
        let tree = self.tree;
        let horizon = tree.horizon();
        let zero_z = DVector::zeros(md.n);
        let mut out = Forcing::zeros(tree, md.m, md.n);
        for t in 0..horizon {
            for node in 0..tree.node_count(t) {
                let (x, y, z) = (&u.x[t][node], &u.y[t][node], &u.z[t][node]);
                out.b[t][node] = md.b(t, node, x, y, z) + md.g.tr_mul(y) * md.beta2;
                out.sigma[t][node] = md.sigma(t, node, x, y, z) + md.g.tr_mul(z) * md.beta2;
            }
        }
        for t in 1..=horizon {
            for node in 0..tree.node_count(t) {
                let (x, y) = (&u.x[t][node], &u.y[t][node]);
                let z = if t < horizon { &u.z[t][node] } else { &zero_z };
                out.f[t - 1][node] = md.f(t, node, x, y, z) - &md.g * x * md.beta1;
            }
        }
        for (leaf, h) in out.h.iter_mut().enumerate() {
            let x = &u.x[horizon][leaf];
            *h = md.h(leaf, x) - &md.g * x;
        }
        out
    }

    /// Solves level `alpha` with extra `forcing`, starting the iteration at `warm`.
    fn solve_level(
        &mut self,
        alpha: f64,
        forcing: &Forcing,
        warm: &Triple,
        depth: usize,
    ) -> Result<Triple, String> {
        if alpha == 0.0 {
            return self.linear(forcing).map_err(|e| e.to_string());
        }
        if depth > self.cfg.inner_recursion_depth_cap {
            return Err(format!(
                "inner recursion deeper than {}",
                self.cfg.inner_recursion_depth_cap
            ));
        }
        loop {
            let below: Vec<f64> = self
                .levels
                .iter()
                .map(|(a, _)| *a)
                .filter(|a| *a < alpha)
                .collect();
            let nearest = *below.last().expect("level 0 is always present");
            let base = below
                .iter()
                .copied()
                .find(|a| alpha - a <= self.reach + 1e-15)
                .unwrap_or(nearest);
            let tol = 0.25 * self.cfg.picard_tol;
            match self.picard(alpha, base, forcing, warm.clone(), depth, tol) {
                Ok(out) => return Ok(out.solution),
                Err(_) if base < nearest => {
                    self.reach = 0.5 * (alpha - base);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Iterates `u ↦ solve(base, forcing + (alpha - base)·nonlinear_part(u))`.
    fn picard(
        &mut self,
        alpha: f64,
        base: f64,
        forcing: &Forcing,
        start: Triple,
        depth: usize,
        tol: f64,
    ) -> Result<PicardOutcome, String> {
        let gap = alpha - base;
        let mut u = start;
        let mut distances: Vec<f64> = Vec::new();
        let mut rising = 0;
        for _ in 0..self.cfg.picard_max_iters {
            let total = forcing.add_scaled(&self.nonlinear_part(&u), gap);
            let next = self.solve_level(base, &total, &u, depth + 1)?;
            if !next.is_finite() {
                return Err(format!("non-finite iterate at α = {alpha}"));
            }
            let dist = next.weighted_sq_distance(&u, self.tree).sqrt();
            u = next;
            if let Some(&prev) = distances.last() {
                rising = if dist >= prev { rising + 1 } else { 0 };
            }
            distances.push(dist);
            if dist < tol {
                return Ok(PicardOutcome {
                    solution: u,
                    distances,
                });
            }
            if rising >= 3 || dist > 1e6 * distances[0].max(tol) {
                return Err(format!(
                    "fixed-point iteration from α = {base} to {alpha} is not contracting"
                ));
            }
        }
        Err(format!(
            "fixed-point iteration from α = {base} to {alpha} did not converge in {} steps",
            self.cfg.picard_max_iters
        ))
    }
}

fn stage_residual(model: &NonlinearModel, tree: &ProbabilityTree, alpha: f64, u: &Triple) -> f64 {
    let blended = Blended { model, alpha };
    FbsdeSolution::assemble(&blended, tree, u)
        .map(|s| s.residuals.equations())
        .unwrap_or(f64::INFINITY)
}

/// Runs the continuation from `α = 0` to `α = 1` and validates the result
/// against the original system.
pub fn solve_continuation(
    model: &NonlinearModel,
    tree: &ProbabilityTree,
    cfg: &ContinuationConfig,
) -> Result<(FbsdeSolution, ContinuationTrace), NonlinearError> {
    model.validate()?;
    cfg.validate()?;
    crate::system::require_scalar_noise(tree)?;
    let horizon = tree.horizon();
    let assumption = if cfg.monotone_samples == 0 {
        AssumptionStatus::NotChecked
    } else {
        let report = check_monotone(model, tree, cfg.monotone_samples, cfg.seed, &MonotoneConfig::default());
        if report.holds() {
            AssumptionStatus::Holds {
                samples: cfg.monotone_samples,
            }
        } else {
            AssumptionStatus::Violated {
                worst_slack: report.worst_slack,
            }
        }
    };

    let anchor = PreparedLinear::new(
        HomogeneousCoefficients::anchor(horizon, model.g.clone(), model.beta1, model.beta2),
        tree,
    )?;
    let mut engine = Engine {
        model,
        tree,
        anchor,
        cfg: *cfg,
        levels: Vec::new(),
        reach: 1.0,
        linear_solves: 0,
    };
    let zero = Forcing::zeros(tree, model.m, model.n);
    let base_solution = engine.linear(&zero)?;
    let mut trace = ContinuationTrace {
        stages: vec![StageRecord {
            alpha: 0.0,
            delta: 0.0,
            iterations: 0,
            distances: Vec::new(),
            residual: stage_residual(model, tree, 0.0, &base_solution),
        }],
        rejected: Vec::new(),
        linear_solves: 0,
        assumption,
    };
    engine.levels.push((0.0, base_solution));

    let mut alpha = 0.0f64;
    let mut delta = cfg.delta_init;
    while alpha < 1.0 {
        let target = if alpha + delta >= 1.0 - 1e-12 { 1.0 } else { alpha + delta };
        let start = match cfg.warm_start {
            WarmStart::Zero => Triple::zeros(tree, model.m, model.n),
            WarmStart::Anchor => engine.levels[0].1.clone(),
            WarmStart::PreviousStage => engine.levels.last().expect("nonempty").1.clone(),
        };
        match engine.picard(target, alpha, &zero, start, 0, cfg.picard_tol) {
            Ok(out) => {
                trace.stages.push(StageRecord {
                    alpha: target,
                    delta: target - alpha,
                    iterations: out.distances.len(),
                    residual: stage_residual(model, tree, target, &out.solution),
                    distances: out.distances,
                });
                engine.levels.push((target, out.solution));
                alpha = target;
            }
            Err(reason) => {
                trace.rejected.push(RejectedStep {
                    from_alpha: alpha,
                    delta: target - alpha,
                    reason: reason.clone(),
                });
                delta *= 0.5;
                if delta < cfg.delta_min {
                    trace.linear_solves = engine.linear_solves;
                    return Err(NonlinearError::ContinuationFailed {
                        alpha,
                        delta_min: cfg.delta_min,
                        reason,
                        trace: Box::new(trace),
                    });
                }
            }
        }
    }
    trace.linear_solves = engine.linear_solves;
    let (_, last) = engine.levels.pop().expect("α = 1 reached");
    let sol = FbsdeSolution::assemble(model, tree, &last)?;
    Ok((sol, trace))
}

/// Box and tolerance for [`check_monotone`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotoneConfig {
    pub radius: f64,
    pub tol: f64,
}

impl Default for MonotoneConfig {
    fn default() -> Self {
        Self {
            radius: 5.0,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotoneCondition {
    /// `t` in `1..T`: all of `A = (-G*f; Gb; Gσ)` against `λ = (x, y, z)`.
    Interior,
    /// `t = T`: `f` against `x`.
    FinalTime,
    /// `t = 0`: `b`, `σ` against `y`, `z`.
    InitialTime,
    /// `⟨h(x) - h(x'), G(x - x')⟩ ≥ 0`.
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotoneViolation {
    pub condition: MonotoneCondition,
    pub t: usize,
    pub node: usize,
    pub slack: f64,
}

/// Slack is the amount by which an inequality holds; negative means violated.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub samples: usize,
    pub tol: f64,
    /// Smallest slack over every sampled inequality, scaled by `1 + |Δλ|²`.
    pub worst_slack: f64,
    pub worst: Option<MonotoneViolation>,
    /// Smallest and largest slack per condition (coefficient conditions only).
    pub coefficient_slack_range: (f64, f64),
    pub violations: usize,
}

impl MonotoneReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, radius: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-radius..=radius))
}

/// Samples pairs `(λ, λ')` uniformly in the box and tests the monotone
/// inequalities at random times and nodes, plus the terminal condition at a
/// random leaf for every pair. Sampling can refute the conditions, never prove them.
pub fn check_monotone(
    model: &NonlinearModel,
    tree: &ProbabilityTree,
    samples: usize,
    seed: u64,
    cfg: &MonotoneConfig,
) -> MonotoneReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = tree.horizon();
    let (m, n) = (model.m, model.n);
    let g = &model.g;
    let zero_z = DVector::zeros(n);
    let mut report = MonotoneReport {
        samples,
        tol: cfg.tol,
        worst_slack: f64::INFINITY,
        worst: None,
        coefficient_slack_range: (f64::INFINITY, f64::NEG_INFINITY),
        violations: 0,
    };
    let record = |report: &mut MonotoneReport, condition, t, node, slack: f64, scale: f64| {
        let scaled = slack / (1.0 + scale);
        if condition != MonotoneCondition::Terminal {
            let (lo, hi) = report.coefficient_slack_range;
            report.coefficient_slack_range = (lo.min(scaled), hi.max(scaled));
        }
        if scaled.is_nan() || scaled < -cfg.tol {
            report.violations += 1;
        }
        if scaled.is_nan() || scaled < report.worst_slack {
            report.worst_slack = if scaled.is_nan() { f64::NEG_INFINITY } else { scaled };
            report.worst = Some(MonotoneViolation {
                condition,
                t,
                node,
                slack: scaled,
            });
        }
    };
    for _ in 0..samples {
        let t = rng.gen_range(0..=horizon);
        let node = rng.gen_range(0..tree.node_count(t));
        let (x1, x2) = (random_vec(&mut rng, m, cfg.radius), random_vec(&mut rng, m, cfg.radius));
        let (y1, y2) = (random_vec(&mut rng, n, cfg.radius), random_vec(&mut rng, n, cfg.radius));
        let (z1, z2) = (random_vec(&mut rng, n, cfg.radius), random_vec(&mut rng, n, cfg.radius));
        let (dx, dy, dz) = (&x1 - &x2, &y1 - &y2, &z1 - &z2);
        let scale = dx.norm_squared() + dy.norm_squared() + dz.norm_squared();
        let gdx = (g * &dx).norm_squared();
        let gtdy = g.tr_mul(&dy).norm_squared();
        let gtdz = g.tr_mul(&dz).norm_squared();
        let pair_b = || {
            let db = model.b(t, node, &x1, &y1, &z1) - model.b(t, node, &x2, &y2, &z2);
            let ds = model.sigma(t, node, &x1, &y1, &z1) - model.sigma(t, node, &x2, &y2, &z2);
            (g * db).dot(&dy) + (g * ds).dot(&dz)
        };
        if t == 0 {
            let lhs = pair_b();
            let slack = -(lhs + model.beta2 * (gtdy + gtdz));
            record(&mut report, MonotoneCondition::InitialTime, t, node, slack, scale);
        } else if t == horizon {
            let df = model.f(t, node, &x1, &y1, &zero_z) - model.f(t, node, &x2, &y2, &zero_z);
            let lhs = -g.tr_mul(&df).dot(&dx);
            let slack = -(lhs + model.beta1 * gdx);
            record(&mut report, MonotoneCondition::FinalTime, t, node, slack, scale);
        } else {
            let df = model.f(t, node, &x1, &y1, &z1) - model.f(t, node, &x2, &y2, &z2);
            let lhs = -g.tr_mul(&df).dot(&dx) + pair_b();
            let slack = -(lhs + model.beta1 * gdx + model.beta2 * (gtdy + gtdz));
            record(&mut report, MonotoneCondition::Interior, t, node, slack, scale);
        }
        let leaf = rng.gen_range(0..tree.node_count(horizon));
        let dh = model.h(leaf, &x1) - model.h(leaf, &x2);
        let slack = dh.dot(&(g * &dx));
        record(&mut report, MonotoneCondition::Terminal, horizon, leaf, slack, dx.norm_squared());
    }
    report
}

/// Residuals of the original (`α = 1`) system along `sol`.
pub fn model_residuals(
    model: &NonlinearModel,
    tree: &ProbabilityTree,
    sol: &FbsdeSolution,
) -> Result<crate::system::ResidualReport, NonlinearError> {
    Ok(residual_report(model, tree, sol)?)
}
