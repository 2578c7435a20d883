//! Linear FBSΔEs with scalar noise:
//!
//! ```text
//! ΔX_t = A_t X_t + B_t Y_t + C_t Z_t + D_t + (Ā_t X_t + B̄_t Y_t + C̄_t Z_t + D̄_t) ΔW_t
//! ΔY_t = Â_{t+1} X_{t+1} + B̂_{t+1} Y_{t+1} + Ĉ_{t+1} Z_{t+1} + D̂_{t+1} + Z_t ΔW_t + ΔN_t
//! X_0 = x0,  Y_T = G X_T + g
//! ```
//!
//! The homogeneous coefficients are deterministic matrices; `D`, `D̄`, `D̂`
//! and `g` may vary by node. The solver decouples the system with the
//! backward Riccati pair `(P_t, p_t)` so that `Y_T = P_T X_T + p_T` and, for
//! earlier times, `Y_t = P_{t+1} E[X_{t+1}|F_t] + E[p_{t+1}|F_t]`.

use nalgebra::{DMatrix, DVector, LU};
use thiserror::Error;

use crate::filtration::{AdaptedProcess, FiltrationError, ProbabilityTree};
use crate::system::{FbsdeSolution, FbsdeSystem, ResidualReport, SystemError, Triple};

/// `Γ_t` counts as singular when its smallest singular value is at or below this.
pub const SINGULAR_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearError {
    #[error("linear FBSΔEs need scalar noise, tree has dimension {0}")]
    NoiseDimension(usize),
    #[error("{what} has {found} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what} at t={t} is {found:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        t: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("Ĉ_T must vanish, found entry {0}")]
    TerminalCHat(f64),
    #[error("G has rank {rank}, expected {expected}")]
    RankDeficientG { rank: usize, expected: usize },
    #[error("{what} must be an ({rows}, 1) process covering t={from}..={to}")]
    Inhomogeneous {
        what: &'static str,
        rows: usize,
        from: usize,
        to: usize,
    },
    #[error("x0 has length {found}, expected {expected}")]
    InitialState { expected: usize, found: usize },
    #[error("horizon {coefficients} of the coefficients differs from tree horizon {tree}")]
    Horizon { coefficients: usize, tree: usize },
    #[error("NotSolvable at t={t} (min singular value {min_singular_value:.1e})")]
    NotSolvable {
        t: usize,
        min_singular_value: f64,
        partial: Box<RiccatiSequence>,
    },
    #[error(transparent)]
    Filtration(#[from] FiltrationError),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// Deterministic coefficients. `a..c_bar` are indexed by `t` in `0..T`;
/// `a_hat`, `b_hat`, `c_hat` are indexed by `t - 1` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousCoefficients {
    pub m: usize,
    pub n: usize,
    pub a: Vec<DMatrix<f64>>,
    pub a_bar: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub b_bar: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub c_bar: Vec<DMatrix<f64>>,
    pub a_hat: Vec<DMatrix<f64>>,
    pub b_hat: Vec<DMatrix<f64>>,
    pub c_hat: Vec<DMatrix<f64>>,
    pub g: DMatrix<f64>,
}

type ShapeCheck<'a> = (&'static str, &'a Vec<DMatrix<f64>>, (usize, usize), usize);

impl HomogeneousCoefficients {
    /// Every coefficient zero except `G`.
    pub fn zeros(m: usize, n: usize, horizon: usize, g: DMatrix<f64>) -> Self {
        let rep = |r: usize, c: usize| vec![DMatrix::zeros(r, c); horizon];
        Self {
            m,
            n,
            a: rep(m, m),
            a_bar: rep(m, m),
            b: rep(m, n),
            b_bar: rep(m, n),
            c: rep(m, n),
            c_bar: rep(m, n),
            a_hat: rep(n, m),
            b_hat: rep(n, n),
            c_hat: rep(n, n),
            g,
        }
    }

    /// The anchor system `B = C̄ = -β₂ G*`, `Â = -β₁ G`, everything else zero.
    pub fn anchor(horizon: usize, g: DMatrix<f64>, beta1: f64, beta2: f64) -> Self {
        let (n, m) = g.shape();
        let mut h = Self::zeros(m, n, horizon, g.clone());
        let gt = g.transpose() * (-beta2);
        h.b = vec![gt.clone(); horizon];
        h.c_bar = vec![gt; horizon];
        h.a_hat = vec![g * (-beta1); horizon];
        h
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn a_hat_at(&self, t: usize) -> &DMatrix<f64> {
        &self.a_hat[t - 1]
    }

    pub fn b_hat_at(&self, t: usize) -> &DMatrix<f64> {
        &self.b_hat[t - 1]
    }

    pub fn c_hat_at(&self, t: usize) -> &DMatrix<f64> {
        &self.c_hat[t - 1]
    }

    pub fn validate(&self) -> Result<(), LinearError> {
        let (m, n, horizon) = (self.m, self.n, self.horizon());
        let forward: [ShapeCheck<'_>; 9] = [
            ("A", &self.a, (m, m), 0),
            ("Ā", &self.a_bar, (m, m), 0),
            ("B", &self.b, (m, n), 0),
            ("B̄", &self.b_bar, (m, n), 0),
            ("C", &self.c, (m, n), 0),
            ("C̄", &self.c_bar, (m, n), 0),
            ("Â", &self.a_hat, (n, m), 1),
            ("B̂", &self.b_hat, (n, n), 1),
            ("Ĉ", &self.c_hat, (n, n), 1),
        ];
        for (what, list, shape, offset) in forward {
            if list.len() != horizon {
                return Err(LinearError::Length {
                    what,
                    expected: horizon,
                    found: list.len(),
                });
            }
            for (i, mat) in list.iter().enumerate() {
                if mat.shape() != shape {
                    return Err(LinearError::Shape {
                        what,
                        t: i + offset,
                        expected: shape,
                        found: mat.shape(),
                    });
                }
            }
        }
        if self.g.shape() != (n, m) {
            return Err(LinearError::Shape {
                what: "G",
                t: horizon,
                expected: (n, m),
                found: self.g.shape(),
            });
        }
        if let Some(&v) = self.c_hat_at(horizon).iter().find(|v| **v != 0.0) {
            return Err(LinearError::TerminalCHat(v));
        }
        let rank = self
            .g
            .singular_values()
            .iter()
            .filter(|s| **s > SINGULAR_TOL)
            .count();
        if rank != m.min(n) {
            return Err(LinearError::RankDeficientG {
                rank,
                expected: m.min(n),
            });
        }
        Ok(())
    }
}

/// Node-dependent terms: `D`, `D̄` on `[0, T-1]`, `D̂` on `[1, T]`, `g` at `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct InhomogeneousTerms {
    pub d: AdaptedProcess,
    pub d_bar: AdaptedProcess,
    pub d_hat: AdaptedProcess,
    pub g: AdaptedProcess,
    pub x0: DVector<f64>,
}

impl InhomogeneousTerms {
    pub fn zeros(tree: &ProbabilityTree, m: usize, n: usize) -> Self {
        let horizon = tree.horizon();
        Self {
            d: AdaptedProcess::zeros(tree, (m, 1), 0..=horizon - 1),
            d_bar: AdaptedProcess::zeros(tree, (m, 1), 0..=horizon - 1),
            d_hat: AdaptedProcess::zeros(tree, (n, 1), 1..=horizon),
            g: AdaptedProcess::zeros(tree, (n, 1), horizon..=horizon),
            x0: DVector::zeros(m),
        }
    }

    fn validate(&self, m: usize, n: usize, horizon: usize) -> Result<(), LinearError> {
        let checks: [(&'static str, &AdaptedProcess, usize, usize, usize); 4] = [
            ("D", &self.d, m, 0, horizon - 1),
            ("D̄", &self.d_bar, m, 0, horizon - 1),
            ("D̂", &self.d_hat, n, 1, horizon),
            ("g", &self.g, n, horizon, horizon),
        ];
        for (what, p, rows, from, to) in checks {
            if p.shape() != (rows, 1) || !p.covers(from) || !p.covers(to) {
                return Err(LinearError::Inhomogeneous {
                    what,
                    rows,
                    from,
                    to,
                });
            }
        }
        if self.x0.len() != m {
            return Err(LinearError::InitialState {
                expected: m,
                found: self.x0.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    pub hom: HomogeneousCoefficients,
    pub inhom: InhomogeneousTerms,
}

impl LinearCoefficients {
    pub fn validate(&self, tree: &ProbabilityTree) -> Result<(), LinearError> {
        if tree.dim() != 1 {
            return Err(LinearError::NoiseDimension(tree.dim()));
        }
        if self.hom.horizon() != tree.horizon() {
            return Err(LinearError::Horizon {
                coefficients: self.hom.horizon(),
                tree: tree.horizon(),
            });
        }
        self.hom.validate()?;
        self.inhom
            .validate(self.hom.m, self.hom.n, tree.horizon())
    }
}

impl FbsdeSystem for LinearCoefficients {
    fn state_dim(&self) -> usize {
        self.hom.m
    }

    fn backward_dim(&self) -> usize {
        self.hom.n
    }

    fn initial_state(&self) -> DVector<f64> {
        self.inhom.x0.clone()
    }

    fn drift(
        &self,
        t: usize,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        let h = &self.hom;
        &h.a[t] * x + &h.b[t] * y + &h.c[t] * z + self.inhom.d.vector_at(t, node)
    }

    fn diffusion(
        &self,
        t: usize,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        let h = &self.hom;
        &h.a_bar[t] * x + &h.b_bar[t] * y + &h.c_bar[t] * z + self.inhom.d_bar.vector_at(t, node)
    }

    fn generator(
        &self,
        t: usize,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
    ) -> DVector<f64> {
        let h = &self.hom;
        -(h.a_hat_at(t) * x + h.b_hat_at(t) * y + h.c_hat_at(t) * z
            + self.inhom.d_hat.vector_at(t, node))
    }

    fn terminal(&self, node: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.hom.g * x + self.inhom.g.vector_at(self.hom.horizon(), node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaReport {
    pub t: usize,
    pub gamma: DMatrix<f64>,
    pub min_singular_value: f64,
    pub invertible: bool,
}

/// Output of the backward Riccati pass. Entries below a failing `Γ_t` are
/// absent.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSequence {
    /// `P_t` at index `t`, present for `t` in `1..=T` once computed.
    pub p_matrix: Vec<Option<DMatrix<f64>>>,
    /// `p_t` at index `t`, one vector per node; empty until computed.
    pub p_offset: Vec<Vec<DVector<f64>>>,
    /// Sorted by `t`.
    pub gamma_reports: Vec<GammaReport>,
    /// Largest gap between `P_t` from the proof's `(G_t, H_t)` route and the
    /// closed display `-Â_t + ((I-B̂_t)P_{t+1}, -Ĉ_t P_{t+1}) Γ_t⁻¹ (I+A_t; Ā_t)`.
    pub display_gap: f64,
    pub failure: Option<usize>,
}

impl RiccatiSequence {
    pub fn p_at(&self, t: usize) -> &DMatrix<f64> {
        self.p_matrix[t]
            .as_ref()
            .expect("P_t is only available above a failing Γ")
    }

    pub fn gamma_at(&self, t: usize) -> Option<&GammaReport> {
        self.gamma_reports.iter().find(|r| r.t == t)
    }
}

/// Per-`t` verdict of the `Γ_t` criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvabilityReport {
    /// `(t, smallest singular value of Γ_t, invertible)` for `t = T-1` down to
    /// the first failure.
    pub entries: Vec<(usize, f64, bool)>,
    pub solvable: bool,
}

fn gamma(h: &HomogeneousCoefficients, t: usize, p_next: &DMatrix<f64>) -> DMatrix<f64> {
    let m = h.m;
    let mut g = DMatrix::identity(2 * m, 2 * m);
    let blocks = [
        (0, 0, &h.b[t]),
        (0, m, &h.c[t]),
        (m, 0, &h.b_bar[t]),
        (m, m, &h.c_bar[t]),
    ];
    for (r, c, coef) in blocks {
        let prod = coef * p_next;
        let mut view = g.view_mut((r, c), (m, m));
        view -= prod;
    }
    g
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    out
}

fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

struct MatrixPass {
    p_matrix: Vec<Option<DMatrix<f64>>>,
    gammas: Vec<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>>,
    reports: Vec<GammaReport>,
    display_gap: f64,
    failure: Option<(usize, f64)>,
}

/// The deterministic half of the recursion: `P_t` and `Γ_t`. Reads only the
/// homogeneous coefficients.
fn matrix_pass(h: &HomogeneousCoefficients, tol: f64) -> MatrixPass {
    let horizon = h.horizon();
    let (m, n) = (h.m, h.n);
    let eye_n = DMatrix::<f64>::identity(n, n);
    let mut p_matrix: Vec<Option<DMatrix<f64>>> = vec![None; horizon + 1];
    p_matrix[horizon] =
        Some(-h.a_hat_at(horizon) + (&eye_n - h.b_hat_at(horizon)) * &h.g);
    let mut gammas = vec![None; horizon];
    let mut reports = Vec::new();
    let mut display_gap = 0.0f64;
    let mut failure = None;

    for t in (0..horizon).rev() {
        let p_next = p_matrix[t + 1].clone().expect("computed above");
        let gm = gamma(h, t, &p_next);
        let sv = min_singular_value(&gm);
        let invertible = sv > tol;
        reports.push(GammaReport {
            t,
            gamma: gm.clone(),
            min_singular_value: sv,
            invertible,
        });
        if !invertible {
            failure = Some((t, sv));
            break;
        }
        let lu = gm.clone().lu();
        if t >= 1 {
            let ia = stack(&(DMatrix::identity(m, m) + &h.a[t]), &h.a_bar[t]);
            let k = lu.solve(&ia).expect("Γ_t is invertible");
            let g_t = &p_next * k.rows(0, m);
            let h_t = &p_next * k.rows(m, m);
            let i_bh = &eye_n - h.b_hat_at(t);
            let p_t = -h.a_hat_at(t) + &i_bh * g_t - h.c_hat_at(t) * h_t;

            let mut row = DMatrix::zeros(n, 2 * m);
            row.view_mut((0, 0), (n, m)).copy_from(&(&i_bh * &p_next));
            row.view_mut((0, m), (n, m))
                .copy_from(&(-(h.c_hat_at(t) * &p_next)));
            let inv = gm.try_inverse().expect("Γ_t is invertible");
            let display = -h.a_hat_at(t) + row * inv * ia;
            let scale = p_t.amax().max(1.0);
            display_gap = display_gap.max((&display - &p_t).amax() / scale);
            p_matrix[t] = Some(p_t);
        }
        gammas[t] = Some(lu);
    }
    reports.reverse();
    MatrixPass {
        p_matrix,
        gammas,
        reports,
        display_gap,
        failure,
    }
}

/// The `Γ_t` verdict for every `t`; independent of `D`, `D̄`, `D̂`, `g`, `x0`
/// because it never sees them.
pub fn check_solvability(
    hom: &HomogeneousCoefficients,
    tree: &ProbabilityTree,
) -> Result<SolvabilityReport, LinearError> {
    check_solvability_with(hom, tree, SINGULAR_TOL)
}

pub fn check_solvability_with(
    hom: &HomogeneousCoefficients,
    tree: &ProbabilityTree,
    tol: f64,
) -> Result<SolvabilityReport, LinearError> {
    if tree.dim() != 1 {
        return Err(LinearError::NoiseDimension(tree.dim()));
    }
    if hom.horizon() != tree.horizon() {
        return Err(LinearError::Horizon {
            coefficients: hom.horizon(),
            tree: tree.horizon(),
        });
    }
    hom.validate()?;
    let pass = matrix_pass(hom, tol);
    let mut entries: Vec<(usize, f64, bool)> = pass
        .reports
        .iter()
        .map(|r| (r.t, r.min_singular_value, r.invertible))
        .collect();
    entries.reverse();
    Ok(SolvabilityReport {
        solvable: pass.failure.is_none(),
        entries,
    })
}

pub fn riccati_backward(
    coeffs: &LinearCoefficients,
    tree: &ProbabilityTree,
) -> Result<RiccatiSequence, LinearError> {
    riccati_backward_with(coeffs, tree, SINGULAR_TOL).map(|(seq, _)| seq)
}

type GammaFactors = Vec<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>>;

/// `p_t` for every `t` above the first failing `Γ_t`.
fn offset_pass(
    h: &HomogeneousCoefficients,
    inhom: &InhomogeneousTerms,
    tree: &ProbabilityTree,
    pass: &MatrixPass,
) -> Vec<Vec<DVector<f64>>> {
    let horizon = tree.horizon();
    let (m, n) = (h.m, h.n);
    let eye_n = DMatrix::<f64>::identity(n, n);
    let mut p_offset: Vec<Vec<DVector<f64>>> = vec![Vec::new(); horizon + 1];
    let i_bh_t = &eye_n - h.b_hat_at(horizon);
    p_offset[horizon] = (0..tree.node_count(horizon))
        .map(|leaf| {
            &i_bh_t * inhom.g.vector_at(horizon, leaf) - inhom.d_hat.vector_at(horizon, leaf)
        })
        .collect();

    let lowest = pass.failure.map_or(1, |(t, _)| t + 1).max(1);
    for t in (lowest..horizon).rev() {
        let lu = pass.gammas[t].as_ref().expect("Γ_t is invertible");
        let p_next = pass.p_matrix[t + 1].as_ref().expect("computed above");
        let e_p = tree.cond_mean(t, &p_offset[t + 1]);
        let e_pw = tree.cond_scalar_covariation(t, &p_offset[t + 1]);
        let i_bh = &eye_n - h.b_hat_at(t);
        let slice = (0..tree.node_count(t))
            .map(|node| {
                let rhs = stack_vec(
                    &(&h.b[t] * &e_p[node] + &h.c[t] * &e_pw[node] + inhom.d.vector_at(t, node)),
                    &(&h.b_bar[t] * &e_p[node]
                        + &h.c_bar[t] * &e_pw[node]
                        + inhom.d_bar.vector_at(t, node)),
                );
                let w = lu.solve(&rhs).expect("Γ_t is invertible");
                let g_t = &e_p[node] + p_next * w.rows(0, m);
                let h_t = &e_pw[node] + p_next * w.rows(m, m);
                &i_bh * g_t - h.c_hat_at(t) * h_t - inhom.d_hat.vector_at(t, node)
            })
            .collect();
        p_offset[t] = slice;
    }
    p_offset
}

fn riccati_backward_with(
    coeffs: &LinearCoefficients,
    tree: &ProbabilityTree,
    tol: f64,
) -> Result<(RiccatiSequence, GammaFactors), LinearError> {
    coeffs.validate(tree)?;
    let pass = matrix_pass(&coeffs.hom, tol);
    let p_offset = offset_pass(&coeffs.hom, &coeffs.inhom, tree, &pass);
    let seq = RiccatiSequence {
        p_matrix: pass.p_matrix,
        p_offset,
        gamma_reports: pass.reports,
        display_gap: pass.display_gap,
        failure: pass.failure.map(|(t, _)| t),
    };
    if let Some((t, sv)) = pass.failure {
        return Err(LinearError::NotSolvable {
            t,
            min_singular_value: sv,
            partial: Box::new(seq),
        });
    }
    Ok((seq, pass.gammas))
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(top.len() + bottom.len());
    out.rows_mut(0, top.len()).copy_from(top);
    out.rows_mut(top.len(), bottom.len()).copy_from(bottom);
    out
}

/// Right-hand side of the `2m` system at one node:
/// `(I+A; Ā) X_t + (B; B̄) E[p_{t+1}|F_t] + (C; C̄) E[p_{t+1}ΔW_t|F_t] + (D; D̄)`.
fn forward_rhs(
    h: &HomogeneousCoefficients,
    inhom: &InhomogeneousTerms,
    t: usize,
    node: usize,
    x: &DVector<f64>,
    e_p: &DVector<f64>,
    e_pw: &DVector<f64>,
) -> DVector<f64> {
    stack_vec(
        &(x + &h.a[t] * x + &h.b[t] * e_p + &h.c[t] * e_pw + inhom.d.vector_at(t, node)),
        &(&h.a_bar[t] * x + &h.b_bar[t] * e_p + &h.c_bar[t] * e_pw + inhom.d_bar.vector_at(t, node)),
    )
}

/// Solves the system through the decoupling field: a `2m` linear solve per
/// node gives `E[X_{t+1}|F_t]` and `E[X_{t+1}ΔW_t|F_t]`, from which `X_{t+1}`,
/// `Y_t` and `Z_t` follow; `N` is recovered from the backward equation.
pub fn solve_linear(
    coeffs: &LinearCoefficients,
    tree: &ProbabilityTree,
) -> Result<FbsdeSolution, LinearError> {
    solve_linear_with(coeffs, tree, SINGULAR_TOL).map(|(sol, _)| sol)
}

/// As [`solve_linear`], also returning the Riccati sequence used.
pub fn solve_linear_with(
    coeffs: &LinearCoefficients,
    tree: &ProbabilityTree,
    tol: f64,
) -> Result<(FbsdeSolution, RiccatiSequence), LinearError> {
    let (seq, gammas) = riccati_backward_with(coeffs, tree, tol)?;
    let triple = decoupled_forward(
        &coeffs.hom,
        &coeffs.inhom,
        tree,
        &seq.p_matrix,
        &seq.p_offset,
        &gammas,
    );
    let sol = FbsdeSolution::assemble(coeffs, tree, &triple)?;
    Ok((sol, seq))
}

fn decoupled_forward(
    h: &HomogeneousCoefficients,
    inhom: &InhomogeneousTerms,
    tree: &ProbabilityTree,
    p_matrix: &[Option<DMatrix<f64>>],
    p_offset: &[Vec<DVector<f64>>],
    gammas: &GammaFactors,
) -> Triple {
    let horizon = tree.horizon();
    let m = h.m;
    let mut triple = Triple::zeros(tree, m, h.n);
    triple.x[0][0] = inhom.x0.clone();
    for t in 0..horizon {
        let lu = gammas[t].as_ref().expect("solvable");
        let p_next = p_matrix[t + 1].as_ref().expect("solvable");
        let e_p = tree.cond_mean(t, &p_offset[t + 1]);
        let e_pw = tree.cond_scalar_covariation(t, &p_offset[t + 1]);
        let b = tree.branches(t);
        for node in 0..tree.node_count(t) {
            let rhs = forward_rhs(h, inhom, t, node, &triple.x[t][node], &e_p[node], &e_pw[node]);
            let uv = lu.solve(&rhs).expect("Γ_t is invertible");
            let u: DVector<f64> = uv.rows(0, m).into();
            let v: DVector<f64> = uv.rows(m, m).into();
            triple.y[t][node] = p_next * &u + &e_p[node];
            triple.z[t][node] = p_next * &v + &e_pw[node];
            for k in 0..b {
                let child = node * b + k;
                let dw = tree.scalar_increment_into(t, child);
                triple.x[t + 1][child] = &u + &v * dw;
            }
        }
    }
    for leaf in 0..tree.node_count(horizon) {
        triple.y[horizon][leaf] =
            &h.g * &triple.x[horizon][leaf] + inhom.g.vector_at(horizon, leaf);
    }
    triple
}

/// Homogeneous coefficients with their `Γ_t` factorizations computed once,
/// ready to solve against many inhomogeneous terms.
pub(crate) struct PreparedLinear {
    hom: HomogeneousCoefficients,
    pass: MatrixPass,
}

impl PreparedLinear {
    pub(crate) fn new(
        hom: HomogeneousCoefficients,
        tree: &ProbabilityTree,
    ) -> Result<Self, LinearError> {
        let report = check_solvability(&hom, tree)?;
        let pass = matrix_pass(&hom, SINGULAR_TOL);
        if let Some((t, sv)) = pass.failure {
            debug_assert!(!report.solvable);
            let seq = RiccatiSequence {
                p_matrix: pass.p_matrix,
                p_offset: Vec::new(),
                gamma_reports: pass.reports,
                display_gap: pass.display_gap,
                failure: Some(t),
            };
            return Err(LinearError::NotSolvable {
                t,
                min_singular_value: sv,
                partial: Box::new(seq),
            });
        }
        Ok(Self { hom, pass })
    }

    pub(crate) fn solve(&self, tree: &ProbabilityTree, inhom: &InhomogeneousTerms) -> Triple {
        let p_offset = offset_pass(&self.hom, inhom, tree, &self.pass);
        decoupled_forward(
            &self.hom,
            inhom,
            tree,
            &self.pass.p_matrix,
            &p_offset,
            &self.pass.gammas,
        )
    }
}

/// Pathwise residuals of the linear system along `sol`.
pub fn linear_residual(
    coeffs: &LinearCoefficients,
    tree: &ProbabilityTree,
    sol: &FbsdeSolution,
) -> Result<ResidualReport, LinearError> {
    Ok(crate::system::residual_report(coeffs, tree, sol)?)
}

/// Worst residual of the `2m` algebraic system when `(u, v)` are taken as
/// `E[X_{t+1}|F_t]` and `E[X_{t+1}ΔW_t|F_t]` from `sol`.
pub fn algebraic_residual(
    coeffs: &LinearCoefficients,
    tree: &ProbabilityTree,
    seq: &RiccatiSequence,
    sol: &FbsdeSolution,
) -> f64 {
    let m = coeffs.hom.m;
    let mut worst = 0.0f64;
    for t in 0..tree.horizon() {
        let gm = &seq.gamma_at(t).expect("solvable").gamma;
        let xs = sol.x.vector_slice(t + 1);
        let u = tree.cond_mean(t, &xs);
        let v = tree.cond_scalar_covariation(t, &xs);
        let e_p = tree.cond_mean(t, &seq.p_offset[t + 1]);
        let e_pw = tree.cond_scalar_covariation(t, &seq.p_offset[t + 1]);
        for node in 0..tree.node_count(t) {
            let x = sol.x.vector_at(t, node);
            let lhs = gm * stack_vec(&u[node], &v[node]);
            let rhs = forward_rhs(&coeffs.hom, &coeffs.inhom, t, node, &x, &e_p[node], &e_pw[node]);
            debug_assert_eq!(lhs.len(), 2 * m);
            worst = worst.max((lhs - rhs).amax());
        }
    }
    worst
}

/// Worst defect of `Y_t = P_{t+1}E[X_{t+1}|F_t] + E[p_{t+1}|F_t]` and
/// `Z_t = P_{t+1}E[X_{t+1}ΔW_t|F_t] + E[p_{t+1}ΔW_t|F_t]`.
pub fn decoupling_residual(tree: &ProbabilityTree, seq: &RiccatiSequence, sol: &FbsdeSolution) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..tree.horizon() {
        let p_next = seq.p_at(t + 1);
        let xs = sol.x.vector_slice(t + 1);
        let u = tree.cond_mean(t, &xs);
        let v = tree.cond_scalar_covariation(t, &xs);
        let e_p = tree.cond_mean(t, &seq.p_offset[t + 1]);
        let e_pw = tree.cond_scalar_covariation(t, &seq.p_offset[t + 1]);
        for node in 0..tree.node_count(t) {
            let dy = sol.y.vector_at(t, node) - (p_next * &u[node] + &e_p[node]);
            let dz = sol.z.vector_at(t, node) - (p_next * &v[node] + &e_pw[node]);
            worst = worst.max(dy.amax()).max(dz.amax());
        }
    }
    worst
}
