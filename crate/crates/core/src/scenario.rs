//! JSON scenario files (schema version 1).
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "kind": "linear",
//!   "tree": { "horizon": 3, "steps": "rademacher" },
//!   "model": { ... },
//!   "solver": { "delta_init": 0.5 }
//! }
//! ```
//!
//! `tree.steps` is one step law used at every time or a list with one law
//! per step. A law is `"rademacher"`, `"trinomial(p)"`, `"skewed_binary(p)"`,
//! `"triangle2d"`, or `{"points": [...], "probs": [...]}` where points are
//! numbers (scalar noise) or arrays.
//!
//! Matrices are row lists (`[[1, 0], [0, 1]]`), a bare number for `1×1`, or a
//! list of matrices with one entry per time. Processes are a constant
//! vector, `{"table": [[[...], ...], ...]}` indexed by time then node, or
//! `{"path_expr": [...]}` with one DSL expression per component where `x1..xd`
//! bind to `W_t` and `y1..yd` to the increment that led into the node (zero
//! at the root).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::Generator;
use crate::dsl::{self, Bindings, Dims};
use crate::filtration::{AdaptedProcess, IncrementDistribution, ProbabilityTree};
use crate::instances::{refs, skewed_binary};
use crate::linear::{HomogeneousCoefficients, InhomogeneousTerms, LinearCoefficients};
use crate::nonlinear::{ContinuationConfig, MonotoneConfig, NonlinearModel, WarmStart};
use crate::oracle::NewtonConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation failed: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(flatten)]
    pub payload: Payload,
    pub tree: TreeSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "lowercase")]
pub enum Payload {
    Bsde(BsdeSpec),
    Linear(Box<LinearSpec>),
    Nonlinear(NonlinearSpec),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Bsde(_) => "bsde",
            Payload::Linear(_) => "linear",
            Payload::Nonlinear(_) => "nonlinear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub horizon: usize,
    pub steps: StepsSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsSpec {
    Each(Vec<StepSpec>),
    Uniform(StepSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Named(String),
    Explicit { points: Vec<PointSpec>, probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Single(Vec<Vec<f64>>),
    PerTime(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProcessSpec {
    Constant(Vec<f64>),
    Table { table: Vec<Vec<Vec<f64>>> },
    PathExpr { path_expr: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSpec {
    pub n: usize,
    /// One expression per component over `t`, `y` and `z`.
    pub generator: Vec<String>,
    pub terminal: ProcessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub m: usize,
    pub n: usize,
    #[serde(rename = "G")]
    pub g: MatrixSpec,
    #[serde(rename = "A", default)]
    pub a: Option<MatrixSpec>,
    #[serde(rename = "A_bar", default)]
    pub a_bar: Option<MatrixSpec>,
    #[serde(rename = "B", default)]
    pub b: Option<MatrixSpec>,
    #[serde(rename = "B_bar", default)]
    pub b_bar: Option<MatrixSpec>,
    #[serde(rename = "C", default)]
    pub c: Option<MatrixSpec>,
    #[serde(rename = "C_bar", default)]
    pub c_bar: Option<MatrixSpec>,
    #[serde(rename = "A_hat", default)]
    pub a_hat: Option<MatrixSpec>,
    #[serde(rename = "B_hat", default)]
    pub b_hat: Option<MatrixSpec>,
    #[serde(rename = "C_hat", default)]
    pub c_hat: Option<MatrixSpec>,
    #[serde(rename = "D", default)]
    pub d: Option<ProcessSpec>,
    #[serde(rename = "D_bar", default)]
    pub d_bar: Option<ProcessSpec>,
    #[serde(rename = "D_hat", default)]
    pub d_hat: Option<ProcessSpec>,
    #[serde(default)]
    pub g_offset: Option<ProcessSpec>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSpec {
    pub m: usize,
    pub n: usize,
    pub b: Vec<String>,
    pub sigma: Vec<String>,
    pub f: Vec<String>,
    pub h: Vec<String>,
    #[serde(rename = "G")]
    pub g: MatrixSpec,
    pub beta1: f64,
    pub beta2: f64,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub delta_init: f64,
    pub delta_min: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    pub inner_recursion_depth_cap: usize,
    pub warm_start: String,
    pub monotone_samples: usize,
    pub monotone_radius: f64,
    pub seed: u64,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let c = ContinuationConfig::default();
        let n = NewtonConfig::default();
        Self {
            delta_init: c.delta_init,
            delta_min: c.delta_min,
            picard_tol: c.picard_tol,
            picard_max_iters: c.picard_max_iters,
            inner_recursion_depth_cap: c.inner_recursion_depth_cap,
            warm_start: "previous_stage".to_string(),
            monotone_samples: 10_000,
            monotone_radius: MonotoneConfig::default().radius,
            seed: 0,
            newton_tol: n.tol,
            newton_max_iters: n.max_iters,
        }
    }
}

impl SolverSpec {
    pub fn continuation(&self) -> Result<ContinuationConfig, ScenarioError> {
        let warm_start = match self.warm_start.as_str() {
            "zero" => WarmStart::Zero,
            "anchor" => WarmStart::Anchor,
            "previous_stage" => WarmStart::PreviousStage,
            other => return Err(invalid(format!("unknown warm_start '{other}'"))),
        };
        let cfg = ContinuationConfig {
            delta_init: self.delta_init,
            delta_min: self.delta_min,
            picard_tol: self.picard_tol,
            picard_max_iters: self.picard_max_iters,
            inner_recursion_depth_cap: self.inner_recursion_depth_cap,
            warm_start,
            monotone_samples: self.monotone_samples,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            tol: self.newton_tol,
            max_iters: self.newton_max_iters,
            ..NewtonConfig::default()
        }
    }

    pub fn monotone(&self) -> MonotoneConfig {
        MonotoneConfig {
            radius: self.monotone_radius,
            ..MonotoneConfig::default()
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if sc.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Parse(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                sc.schema_version
            )));
        }
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn build_tree(&self) -> Result<ProbabilityTree, ScenarioError> {
        let spec = &self.tree;
        if spec.horizon == 0 {
            return Err(invalid("tree.horizon must be at least 1"));
        }
        let steps = match &spec.steps {
            StepsSpec::Uniform(s) => vec![s.clone(); spec.horizon],
            StepsSpec::Each(list) => {
                if list.len() != spec.horizon {
                    return Err(invalid(format!(
                        "tree.steps lists {} laws for horizon {}",
                        list.len(),
                        spec.horizon
                    )));
                }
                list.clone()
            }
        };
        let dists = steps
            .iter()
            .enumerate()
            .map(|(t, s)| build_step(s).map_err(|e| invalid(format!("tree step {t}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        ProbabilityTree::new(dists).map_err(|e| invalid(e.to_string()))
    }

    pub fn bsde(&self, tree: &ProbabilityTree) -> Result<(Generator, AdaptedProcess), ScenarioError> {
        let Payload::Bsde(spec) = &self.payload else {
            return Err(self.wrong_kind("bsde"));
        };
        if spec.generator.len() != spec.n {
            return Err(invalid(format!(
                "generator has {} components, n = {}",
                spec.generator.len(),
                spec.n
            )));
        }
        let dims = Dims {
            m: 0,
            n: spec.n,
            d: tree.dim(),
        };
        let exprs = spec
            .generator
            .iter()
            .map(|s| dsl::parse_expr(s, dims).map_err(|e| invalid(format!("generator '{s}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut gen = Generator::from_dsl(exprs, tree.dim());
        let spread = gen.terminal_z_spread(tree, 256, 0);
        gen = gen.with_terminal_z_independent(spread <= 1e-12);
        if let Some([c1, c2]) = spec.lipschitz {
            gen = gen.with_lipschitz(c1, c2);
        }
        let horizon = tree.horizon();
        let eta = build_process(&spec.terminal, tree, spec.n, horizon, horizon, "terminal")?;
        Ok((gen, eta))
    }

    pub fn linear(&self, tree: &ProbabilityTree) -> Result<LinearCoefficients, ScenarioError> {
        let Payload::Linear(spec) = &self.payload else {
            return Err(self.wrong_kind("linear"));
        };
        let (m, n, horizon) = (spec.m, spec.n, tree.horizon());
        let g = single_matrix(&spec.g, n, m, "G")?;
        let mut hom = HomogeneousCoefficients::zeros(m, n, horizon, g);
        let fill = |slot: &mut Vec<DMatrix<f64>>, spec: &Option<MatrixSpec>, rows, cols, what| {
            if let Some(s) = spec {
                *slot = per_time(s, horizon, rows, cols, what)?;
            }
            Ok::<(), ScenarioError>(())
        };
        fill(&mut hom.a, &spec.a, m, m, "A")?;
        fill(&mut hom.a_bar, &spec.a_bar, m, m, "A_bar")?;
        fill(&mut hom.b, &spec.b, m, n, "B")?;
        fill(&mut hom.b_bar, &spec.b_bar, m, n, "B_bar")?;
        fill(&mut hom.c, &spec.c, m, n, "C")?;
        fill(&mut hom.c_bar, &spec.c_bar, m, n, "C_bar")?;
        fill(&mut hom.a_hat, &spec.a_hat, n, m, "A_hat")?;
        fill(&mut hom.b_hat, &spec.b_hat, n, n, "B_hat")?;
        fill(&mut hom.c_hat, &spec.c_hat, n, n, "C_hat")?;
        let mut inhom = InhomogeneousTerms::zeros(tree, m, n);
        if let Some(p) = &spec.d {
            inhom.d = build_process(p, tree, m, 0, horizon - 1, "D")?;
        }
        if let Some(p) = &spec.d_bar {
            inhom.d_bar = build_process(p, tree, m, 0, horizon - 1, "D_bar")?;
        }
        if let Some(p) = &spec.d_hat {
            inhom.d_hat = build_process(p, tree, n, 1, horizon, "D_hat")?;
        }
        if let Some(p) = &spec.g_offset {
            inhom.g = build_process(p, tree, n, horizon, horizon, "g_offset")?;
        }
        inhom.x0 = vector(&spec.x0, m, "x0")?;
        let coeffs = LinearCoefficients { hom, inhom };
        coeffs.validate(tree).map_err(|e| invalid(e.to_string()))?;
        Ok(coeffs)
    }

    pub fn nonlinear(&self) -> Result<NonlinearModel, ScenarioError> {
        let Payload::Nonlinear(spec) = &self.payload else {
            return Err(self.wrong_kind("nonlinear"));
        };
        let g = single_matrix(&spec.g, spec.n, spec.m, "G")?;
        let mut model = NonlinearModel::parse(
            &refs(&spec.b),
            &refs(&spec.sigma),
            &refs(&spec.f),
            &refs(&spec.h),
            g,
            spec.beta1,
            spec.beta2,
            vector(&spec.x0, spec.m, "x0")?,
        )
        .map_err(|e| invalid(e.to_string()))?;
        if let Some(c) = spec.lipschitz_c {
            model = model.with_lipschitz(c);
        }
        model.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(model)
    }

    fn wrong_kind(&self, wanted: &str) -> ScenarioError {
        invalid(format!(
            "scenario kind is '{}', expected '{wanted}'",
            self.payload.kind()
        ))
    }
}

fn parse_param(name: &str, prefix: &str) -> Option<Result<f64, String>> {
    let inner = name.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
    Some(
        inner
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("bad parameter in '{name}'")),
    )
}

fn build_step(spec: &StepSpec) -> Result<IncrementDistribution, String> {
    match spec {
        StepSpec::Named(name) => {
            let name = name.trim();
            match name {
                "rademacher" => return Ok(IncrementDistribution::rademacher()),
                "triangle2d" => return Ok(IncrementDistribution::triangle2d()),
                _ => {}
            }
            if let Some(p) = parse_param(name, "trinomial") {
                let p = p?;
                return IncrementDistribution::trinomial(p).map_err(|e| e.to_string());
            }
            if let Some(p) = parse_param(name, "skewed_binary") {
                let p = p?;
                if !(p > 0.0 && p < 1.0) {
                    return Err(format!("skewed_binary needs p in (0, 1), found {p}"));
                }
                return Ok(skewed_binary(p));
            }
            Err(format!("unknown step law '{name}'"))
        }
        StepSpec::Explicit { points, probs } => {
            let pts = points
                .iter()
                .map(|p| match p {
                    PointSpec::Scalar(v) => DVector::from_element(1, *v),
                    PointSpec::Vector(v) => DVector::from_vec(v.clone()),
                })
                .collect();
            IncrementDistribution::new(pts, probs.clone()).map_err(|e| e.to_string())
        }
    }
}

fn from_rows(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(invalid(format!("{what} must be {r}x{c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn single_matrix(spec: &MatrixSpec, r: usize, c: usize, what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    match spec {
        MatrixSpec::Scalar(v) if r == 1 && c == 1 => Ok(DMatrix::from_element(1, 1, *v)),
        MatrixSpec::Single(rows) => from_rows(rows, r, c, what),
        _ => Err(invalid(format!("{what} must be a single {r}x{c} matrix"))),
    }
}

fn per_time(
    spec: &MatrixSpec,
    horizon: usize,
    r: usize,
    c: usize,
    what: &str,
) -> Result<Vec<DMatrix<f64>>, ScenarioError> {
    match spec {
        MatrixSpec::PerTime(list) => {
            if list.len() != horizon {
                return Err(invalid(format!(
                    "{what} lists {} matrices, expected {horizon}",
                    list.len()
                )));
            }
            list.iter().map(|rows| from_rows(rows, r, c, what)).collect()
        }
        other => Ok(vec![single_matrix(other, r, c, what)?; horizon]),
    }
}

fn vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>, ScenarioError> {
    if v.len() != len {
        return Err(invalid(format!("{what} must have length {len}")));
    }
    Ok(DVector::from_column_slice(v))
}

fn build_process(
    spec: &ProcessSpec,
    tree: &ProbabilityTree,
    rows: usize,
    from: usize,
    to: usize,
    what: &str,
) -> Result<AdaptedProcess, ScenarioError> {
    match spec {
        ProcessSpec::Constant(v) => {
            let v = vector(v, rows, what)?;
            Ok(AdaptedProcess::from_fn(tree, (rows, 1), from..=to, |_, _| {
                DMatrix::from_column_slice(rows, 1, v.as_slice())
            }))
        }
        ProcessSpec::Table { table } => {
            if table.len() != to - from + 1 {
                return Err(invalid(format!(
                    "{what} table needs {} time slices",
                    to - from + 1
                )));
            }
            let slices = table
                .iter()
                .enumerate()
                .map(|(k, slice)| {
                    let t = from + k;
                    if slice.len() != tree.node_count(t) {
                        return Err(invalid(format!(
                            "{what} table at t={t} needs {} nodes",
                            tree.node_count(t)
                        )));
                    }
                    slice.iter().map(|v| vector(v, rows, what)).collect()
                })
                .collect::<Result<Vec<Vec<DVector<f64>>>, _>>()?;
            AdaptedProcess::from_vectors(tree, rows, from, slices).map_err(|e| invalid(e.to_string()))
        }
        ProcessSpec::PathExpr { path_expr } => {
            if path_expr.len() != rows {
                return Err(invalid(format!("{what} needs {rows} expressions")));
            }
            let d = tree.dim();
            let dims = Dims { m: d, n: d, d: 1 };
            let exprs = path_expr
                .iter()
                .map(|s| dsl::parse_expr(s, dims).map_err(|e| invalid(format!("{what} '{s}': {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let mut failure = None;
            let proc = AdaptedProcess::from_fn(tree, (rows, 1), from..=to, |t, node| {
                let w = tree.w_at(t, node);
                let last = if t == 0 {
                    DVector::zeros(d)
                } else {
                    tree.increment_into(t - 1, node).clone()
                };
                let zeros = vec![0.0; d];
                let b = Bindings::new(t as f64, w.as_slice(), last.as_slice(), &zeros);
                match dsl::eval_vector(&exprs, &b) {
                    Ok(v) => DMatrix::from_column_slice(rows, 1, v.as_slice()),
                    Err(e) => {
                        failure.get_or_insert_with(|| format!("{what} at t={t}: {e}"));
                        DMatrix::zeros(rows, 1)
                    }
                }
            });
            match failure {
                Some(msg) => Err(invalid(msg)),
                None => Ok(proc),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"{
        "schema_version": 1,
        "kind": "linear",
        "tree": {"horizon": 2, "steps": "trinomial(0.25)"},
        "model": {
            "m": 1, "n": 1, "G": 1,
            "g_offset": {"path_expr": ["y1^2"]},
            "x0": [3]
        }
    }"#;

    #[test]
    fn linear_scenario_builds_the_square_increment_offset() {
        let sc = Scenario::from_json(LINEAR).unwrap();
        let tree = sc.build_tree().unwrap();
        let coeffs = sc.linear(&tree).unwrap();
        let a = 2f64.sqrt();
        assert_eq!(coeffs.inhom.g.at(2, 0)[0], (-a) * (-a));
        assert_eq!(coeffs.inhom.g.at(2, 1)[0], 0.0);
        assert_eq!(coeffs.inhom.x0[0], 3.0);
    }

    #[test]
    fn round_trip_preserves_the_scenario() {
        let sc = Scenario::from_json(LINEAR).unwrap();
        assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc);
    }

    #[test]
    fn per_step_laws_and_explicit_points() {
        let text = r#"{
            "schema_version": 1, "kind": "bsde",
            "tree": {"horizon": 2, "steps": ["rademacher", {"points": [-2, 0.5], "probs": [0.2, 0.8]}]},
            "model": {"n": 1, "generator": ["0.5*y1"], "terminal": {"path_expr": ["x1"]}}
        }"#;
        let sc = Scenario::from_json(text).unwrap();
        let tree = sc.build_tree().unwrap();
        assert_eq!(tree.branches(1), 2);
        let (_, eta) = sc.bsde(&tree).unwrap();
        assert_eq!(eta.at(2, 0)[0], -3.0);
    }

    #[test]
    fn bad_moments_and_wrong_kind_are_validation_errors() {
        let text = r#"{
            "schema_version": 1, "kind": "bsde",
            "tree": {"horizon": 1, "steps": {"points": [-1, 1], "probs": [0.3, 0.7]}},
            "model": {"n": 1, "generator": ["0"], "terminal": [1]}
        }"#;
        let sc = Scenario::from_json(text).unwrap();
        assert!(matches!(sc.build_tree(), Err(ScenarioError::Invalid(_))));
        let sc = Scenario::from_json(LINEAR).unwrap();
        assert!(matches!(sc.nonlinear(), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn malformed_json_and_versions_are_parse_errors() {
        assert!(matches!(Scenario::from_json("{"), Err(ScenarioError::Parse(_))));
        let v2 = LINEAR.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(Scenario::from_json(&v2), Err(ScenarioError::Parse(_))));
        let missing = LINEAR.replace("\"x0\": [3]", "\"y0\": [3]");
        assert!(matches!(Scenario::from_json(&missing), Err(ScenarioError::Parse(_))));
    }
}
