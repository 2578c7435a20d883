//! Browser bindings. Each exported function takes plain numbers from the page
//! and returns a JSON string; the `*_json` functions hold the logic and are
//! tested natively.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use fbsdelta::bsde::{solve_bsde, Generator};
use fbsdelta::filtration::{AdaptedProcess, IncrementDistribution, ProbabilityTree};
use fbsdelta::linear::{
    solve_linear_with, HomogeneousCoefficients, InhomogeneousTerms, LinearCoefficients,
    LinearError, RiccatiSequence, SINGULAR_TOL,
};
use fbsdelta::nonlinear::{solve_continuation, ContinuationConfig, NonlinearModel};
use fbsdelta::oracle::{solve_oracle, NewtonConfig};

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn error(msg: impl ToString) -> Value {
    json!({ "ok": false, "error": msg.to_string() })
}

fn clamp_horizon(h: u32, max: u32) -> usize {
    h.clamp(1, max) as usize
}

fn gamma_rows(seq: &RiccatiSequence) -> Vec<Value> {
    seq.gamma_reports
        .iter()
        .map(|g| json!({ "t": g.t, "min_singular_value": g.min_singular_value, "invertible": g.invertible }))
        .collect()
}

fn p_rows(seq: &RiccatiSequence) -> Vec<Value> {
    seq.p_matrix
        .iter()
        .enumerate()
        .filter_map(|(t, p)| p.as_ref().map(|p| json!({ "t": t, "p": p[(0, 0)] })))
        .collect()
}

/// Scalar linear system with constant coefficients: the `Γ_t` table, the
/// `P_t` sequence and `Y_0`, or the time at which `Γ_t` becomes singular.
pub fn riccati_json(horizon: u32, g: f64, b: f64, c_bar: f64, a_hat: f64, b_hat: f64) -> Value {
    let horizon = clamp_horizon(horizon, 12);
    let tree = ProbabilityTree::rademacher(horizon);
    let mut hom = HomogeneousCoefficients::zeros(1, 1, horizon, scalar(g));
    hom.b = vec![scalar(b); horizon];
    hom.c_bar = vec![scalar(c_bar); horizon];
    hom.a_hat = vec![scalar(a_hat); horizon];
    hom.b_hat = vec![scalar(b_hat); horizon];
    let mut inhom = InhomogeneousTerms::zeros(&tree, 1, 1);
    inhom.x0[0] = 1.0;
    inhom.d_bar = AdaptedProcess::from_fn(&tree, (1, 1), 0..=horizon - 1, |_, _| scalar(0.2));
    let coeffs = LinearCoefficients { hom, inhom };
    match solve_linear_with(&coeffs, &tree, SINGULAR_TOL) {
        Ok((sol, seq)) => json!({
            "ok": true,
            "gamma": gamma_rows(&seq),
            "p": p_rows(&seq),
            "y0": sol.y.at(0, 0)[0],
            "residual": sol.residuals.max(),
        }),
        Err(LinearError::NotSolvable { t, min_singular_value, partial }) => json!({
            "ok": false,
            "error": format!("NotSolvable at t={t} (min singular value {min_singular_value:.1e})"),
            "gamma": gamma_rows(&partial),
            "p": p_rows(&partial),
        }),
        Err(e) => error(e),
    }
}

/// `η = (ΔW_{T-1})²` with a zero generator on a trinomial tree with outer
/// probability `p` and on a Rademacher tree: the orthogonal part `N_T` per leaf.
pub fn completeness_json(p: f64, horizon: u32) -> Value {
    let horizon = clamp_horizon(horizon, 6);
    let trinomial = match IncrementDistribution::trinomial(p) {
        Ok(d) => d,
        Err(e) => return error(e),
    };
    let mut out = json!({ "ok": true });
    for (key, dist) in [("trinomial", trinomial), ("rademacher", IncrementDistribution::rademacher())] {
        let tree = ProbabilityTree::uniform(dist, horizon).expect("valid law");
        let eta = AdaptedProcess::from_fn(&tree, (1, 1), horizon..=horizon, |t, node| {
            let dw = tree.scalar_increment_into(t - 1, node);
            scalar(dw * dw)
        });
        let sol = match solve_bsde(&tree, &Generator::zero(1, 1), &eta) {
            Ok(s) => s,
            Err(e) => return error(e),
        };
        let leaves: Vec<Value> = (0..tree.node_count(horizon))
            .map(|node| {
                json!({
                    "path": tree.path_label(horizon, node),
                    "n": sol.n.at(horizon, node)[0],
                    "y": sol.y.at(horizon, node)[0],
                })
            })
            .collect();
        out[key] = json!({ "sup_n": sol.n.sup_norm(), "y0": sol.y.at(0, 0)[0], "leaves": leaves });
    }
    out
}

/// Scalar anchor of strength `kappa` plus monotone tanh terms of strength
/// `eps`, solved by continuation and compared with global Newton.
pub fn continuation_json(kappa: f64, eps: f64, horizon: u32, delta_init: f64) -> Value {
    let horizon = clamp_horizon(horizon, 5);
    let tree = ProbabilityTree::rademacher(horizon);
    let k = format!("({kappa:?})");
    let e = format!("({eps:?})");
    let model = NonlinearModel::parse(
        &[&format!("0.1 - {e}*tanh(y1) - {k}*y1")],
        &[&format!("0.05 - {e}*tanh(z1) - {k}*z1")],
        &[&format!("0.3 + 0.1*t + {e}*tanh(x1) + {k}*x1")],
        &[&format!("0.2 + {e}*tanh(x1) + x1")],
        scalar(1.0),
        kappa,
        kappa,
        DVector::from_element(1, 0.5),
    );
    let model = match model {
        Ok(m) => m,
        Err(e) => return error(e),
    };
    let cfg = ContinuationConfig { delta_init, monotone_samples: 2000, ..ContinuationConfig::default() };
    let (sol, trace) = match solve_continuation(&model, &tree, &cfg) {
        Ok(v) => v,
        Err(e) => return error(e),
    };
    let oracle_gap = solve_oracle(&model, &tree, None, &NewtonConfig::default())
        .map(|(o, _)| sol.sup_distance(&o))
        .ok();
    let stages: Vec<Value> = trace
        .stages
        .iter()
        .map(|s| json!({ "alpha": s.alpha, "delta": s.delta, "iterations": s.iterations, "distances": s.distances, "residual": s.residual }))
        .collect();
    json!({
        "ok": true,
        "stages": stages,
        "rejected": trace.rejected.len(),
        "linear_solves": trace.linear_solves,
        "assumption": trace.assumption.tag(),
        "y0": sol.y.at(0, 0)[0],
        "residual": sol.residuals.max(),
        "oracle_gap": oracle_gap,
    })
}

#[wasm_bindgen]
pub fn riccati(horizon: u32, g: f64, b: f64, c_bar: f64, a_hat: f64, b_hat: f64) -> String {
    riccati_json(horizon, g, b, c_bar, a_hat, b_hat).to_string()
}

#[wasm_bindgen]
pub fn completeness(p: f64, horizon: u32) -> String {
    completeness_json(p, horizon).to_string()
}

#[wasm_bindgen]
pub fn continuation(kappa: f64, eps: f64, horizon: u32, delta_init: f64) -> String {
    continuation_json(kappa, eps, horizon, delta_init).to_string()
}
