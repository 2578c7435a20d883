//! Independent checks used by the integration tests. Everything here is
//! computed from tree primitives (branch probabilities and increment points)
//! and the model callbacks, without going through the solvers' own
//! residual code.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use fbsdelta::bsde::{BsdeSolution, Generator};
use fbsdelta::filtration::{AdaptedProcess, ProbabilityTree};
use fbsdelta::linear::{InhomogeneousTerms, LinearCoefficients};
use fbsdelta::nonlinear::NonlinearModel;
use fbsdelta::system::FbsdeSolution;

pub type Coefficient<'a> = dyn Fn(usize, usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + 'a;

/// `(child index, branch probability, increment)` for each successor of a node.
pub fn children(tree: &ProbabilityTree, t: usize, node: usize) -> Vec<(usize, f64, DVector<f64>)> {
    let step = tree.step(t);
    let b = step.branches();
    (0..b)
        .map(|k| (node * b + k, step.probs()[k], step.points()[k].clone()))
        .collect()
}

/// Largest violation of `N_0 = 0`, `E[ΔN | F_t] = 0` and `E[ΔN ΔW* | F_t] = 0`.
pub fn martingale_defect(tree: &ProbabilityTree, n: &AdaptedProcess) -> f64 {
    let mut worst = n.at(0, 0).amax();
    for t in 0..tree.horizon() {
        for node in 0..tree.node_count(t) {
            let here = n.at(t, node);
            let mut mean = DMatrix::zeros(here.nrows(), 1);
            let mut cov = DMatrix::zeros(here.nrows(), tree.dim());
            for (child, p, dw) in children(tree, t, node) {
                let dn = n.at(t + 1, child) - here;
                mean += &dn * p;
                cov += &dn * dw.transpose() * p;
            }
            worst = worst.max(mean.amax()).max(cov.amax());
        }
    }
    worst
}

fn col(p: &AdaptedProcess, t: usize, node: usize) -> DVector<f64> {
    p.at(t, node).column(0).into_owned()
}

/// Pathwise residual of `Y_{t+1} - Y_t = -f(t+1, Y_{t+1}, Z_{t+1}) + Z_t ΔW_t + ΔN_t`
/// with `Y_T = η` and `Z_T` taken as zero, plus the martingale conditions on `N`.
pub fn bsde_defect(
    tree: &ProbabilityTree,
    gen: &Generator,
    eta: &AdaptedProcess,
    sol: &BsdeSolution,
) -> f64 {
    let horizon = tree.horizon();
    let zero_z = DMatrix::zeros(gen.n, gen.d);
    let mut worst = 0.0f64;
    for node in 0..tree.node_count(horizon) {
        worst = worst.max((sol.y.at(horizon, node) - eta.at(horizon, node)).amax());
    }
    for t in 0..horizon {
        for node in 0..tree.node_count(t) {
            let y = col(&sol.y, t, node);
            let z = sol.z.at(t, node);
            for (child, _, dw) in children(tree, t, node) {
                let y1 = col(&sol.y, t + 1, child);
                let z1 = if t + 1 < horizon { sol.z.at(t + 1, child).clone() } else { zero_z.clone() };
                let dn = col(&sol.n, t + 1, child) - col(&sol.n, t, node);
                let f = gen.eval(t + 1, child, &y1, &z1);
                let r = &y1 - &y + f - z * &dw - dn;
                worst = worst.max(r.amax());
            }
        }
    }
    worst.max(martingale_defect(tree, &sol.n))
}

/// Pathwise residual of a coupled system given by its coefficient callbacks.
/// `gen` is the driver with `ΔY = -gen(t+1, λ_{t+1}) + Z ΔW + ΔN`.
pub fn coupled_defect(
    tree: &ProbabilityTree,
    sol: &FbsdeSolution,
    x0: &DVector<f64>,
    drift: &Coefficient<'_>,
    diffusion: &Coefficient<'_>,
    gen: &Coefficient<'_>,
    terminal: &dyn Fn(usize, &DVector<f64>) -> DVector<f64>,
) -> f64 {
    let horizon = tree.horizon();
    let n = sol.y.shape().0;
    let z_at = |t: usize, node: usize| {
        if t < horizon {
            col(&sol.z, t, node)
        } else {
            DVector::zeros(n)
        }
    };
    let mut worst = (col(&sol.x, 0, 0) - x0).amax();
    for node in 0..tree.node_count(horizon) {
        let x = col(&sol.x, horizon, node);
        worst = worst.max((col(&sol.y, horizon, node) - terminal(node, &x)).amax());
    }
    for t in 0..horizon {
        for node in 0..tree.node_count(t) {
            let (x, y, z) = (col(&sol.x, t, node), col(&sol.y, t, node), z_at(t, node));
            let b = drift(t, node, &x, &y, &z);
            let s = diffusion(t, node, &x, &y, &z);
            for (child, _, dw) in children(tree, t, node) {
                let dw = dw[0];
                let x1 = col(&sol.x, t + 1, child);
                let y1 = col(&sol.y, t + 1, child);
                let z1 = z_at(t + 1, child);
                let fwd = &x1 - &x - &b - &s * dw;
                let dn = col(&sol.n, t + 1, child) - col(&sol.n, t, node);
                let bwd = &y1 - &y + gen(t + 1, child, &x1, &y1, &z1) - &z * dw - dn;
                worst = worst.max(fwd.amax()).max(bwd.amax());
            }
        }
    }
    worst.max(martingale_defect(tree, &sol.n))
}

pub fn linear_defect(coeffs: &LinearCoefficients, tree: &ProbabilityTree, sol: &FbsdeSolution) -> f64 {
    let h = &coeffs.hom;
    let inh = &coeffs.inhom;
    let drift = |t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| {
        &h.a[t] * x + &h.b[t] * y + &h.c[t] * z + col(&inh.d, t, node)
    };
    let diffusion = |t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| {
        &h.a_bar[t] * x + &h.b_bar[t] * y + &h.c_bar[t] * z + col(&inh.d_bar, t, node)
    };
    let gen = |t: usize, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| {
        -(&h.a_hat[t - 1] * x + &h.b_hat[t - 1] * y + &h.c_hat[t - 1] * z + col(&inh.d_hat, t, node))
    };
    let horizon = tree.horizon();
    let terminal = |node: usize, x: &DVector<f64>| &h.g * x + col(&inh.g, horizon, node);
    coupled_defect(tree, sol, &inh.x0, &drift, &diffusion, &gen, &terminal)
}

pub fn nonlinear_defect(model: &NonlinearModel, tree: &ProbabilityTree, sol: &FbsdeSolution) -> f64 {
    let drift = |t, node, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| model.b(t, node, x, y, z);
    let diffusion = |t, node, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| model.sigma(t, node, x, y, z);
    let gen = |t, node, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| model.f(t, node, x, y, z);
    let terminal = |node, x: &DVector<f64>| model.h(node, x);
    coupled_defect(tree, sol, &model.x0, &drift, &diffusion, &gen, &terminal)
}

/// Both sides of `E⟨GX̂_T, Ŷ_T⟩ = E[Σ⟨GX̂_{t+1}, -f̂(t+1)⟩ + Σ⟨Gσ̂_t, Ẑ_t⟩ + Σ⟨Gb̂_t, Ŷ_t⟩]`
/// for two models sharing `G` and `x0`, hats denoting differences.
pub fn duality_sides(
    tree: &ProbabilityTree,
    g: &DMatrix<f64>,
    (m1, s1): (&NonlinearModel, &FbsdeSolution),
    (m2, s2): (&NonlinearModel, &FbsdeSolution),
) -> (f64, f64) {
    let horizon = tree.horizon();
    let n = g.nrows();
    let state = |s: &FbsdeSolution, t: usize, node: usize| {
        let z = if t < horizon { col(&s.z, t, node) } else { DVector::zeros(n) };
        (col(&s.x, t, node), col(&s.y, t, node), z)
    };
    let mut lhs = 0.0;
    for (node, p) in tree.node_probabilities(horizon).iter().enumerate() {
        let (x1, y1, _) = state(s1, horizon, node);
        let (x2, y2, _) = state(s2, horizon, node);
        lhs += p * (g * (x1 - x2)).dot(&(y1 - y2));
    }
    let mut rhs = 0.0;
    for t in 0..horizon {
        for (node, p) in tree.node_probabilities(t).iter().enumerate() {
            let (x1, y1, z1) = state(s1, t, node);
            let (x2, y2, z2) = state(s2, t, node);
            let b = m1.b(t, node, &x1, &y1, &z1) - m2.b(t, node, &x2, &y2, &z2);
            let s = m1.sigma(t, node, &x1, &y1, &z1) - m2.sigma(t, node, &x2, &y2, &z2);
            rhs += p * ((g * b).dot(&(y1 - y2)) + (g * s).dot(&(z1 - z2)));
        }
        for (node, p) in tree.node_probabilities(t + 1).iter().enumerate() {
            let (x1, y1, z1) = state(s1, t + 1, node);
            let (x2, y2, z2) = state(s2, t + 1, node);
            let f = m1.f(t + 1, node, &x1, &y1, &z1) - m2.f(t + 1, node, &x2, &y2, &z2);
            rhs -= p * (g * (x1 - x2)).dot(&f);
        }
    }
    (lhs, rhs)
}

fn combine(tree: &ProbabilityTree, a: &AdaptedProcess, b: &AdaptedProcess, ca: f64, cb: f64) -> AdaptedProcess {
    AdaptedProcess::from_fn(tree, a.shape(), a.domain(), |t, node| a.at(t, node) * ca + b.at(t, node) * cb)
}

/// `ca·a + cb·b` for every inhomogeneous term.
pub fn combine_inhom(
    tree: &ProbabilityTree,
    a: &InhomogeneousTerms,
    b: &InhomogeneousTerms,
    ca: f64,
    cb: f64,
) -> InhomogeneousTerms {
    InhomogeneousTerms {
        d: combine(tree, &a.d, &b.d, ca, cb),
        d_bar: combine(tree, &a.d_bar, &b.d_bar, ca, cb),
        d_hat: combine(tree, &a.d_hat, &b.d_hat, ca, cb),
        g: combine(tree, &a.g, &b.g, ca, cb),
        x0: &a.x0 * ca + &b.x0 * cb,
    }
}

/// `P_T = (1 + β₁)G`, then `P_t = β₁G + P_{t+1}(I + β₂G*P_{t+1})⁻¹` down to `t = 0`.
pub fn closed_anchor_recursion(g: &DMatrix<f64>, beta1: f64, beta2: f64, horizon: usize) -> Vec<DMatrix<f64>> {
    let m = g.ncols();
    let mut p = vec![DMatrix::zeros(g.nrows(), m); horizon + 1];
    p[horizon] = g * (1.0 + beta1);
    for t in (0..horizon).rev() {
        let inner = DMatrix::identity(m, m) + g.transpose() * &p[t + 1] * beta2;
        let inv = inner.try_inverse().expect("anchor recursion stays invertible");
        p[t] = g * beta1 + &p[t + 1] * inv;
    }
    p
}
