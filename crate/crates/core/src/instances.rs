//! Seeded random instances for property tests, the acceptance suite and the
//! browser demo.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bsde::Generator;
use crate::dsl::{self, Dims};
use crate::filtration::{AdaptedProcess, IncrementDistribution, ProbabilityTree};
use crate::linear::{
    check_solvability, HomogeneousCoefficients, InhomogeneousTerms, LinearCoefficients,
};
use crate::nonlinear::NonlinearModel;

/// Two-point law with `P(ΔW = -sqrt(q/p)) = p`, mean 0 and variance 1.
pub fn skewed_binary(p: f64) -> IncrementDistribution {
    let q = 1.0 - p;
    IncrementDistribution::scalar(&[-(q / p).sqrt(), (p / q).sqrt()], &[p, q])
        .expect("two-point law has unit variance")
}

/// Per-step laws drawn from one family: scalar binary (`branching = 2`),
/// scalar trinomial (`branching = 3`, `d = 1`) or the planar triangle
/// (`branching = 3`, `d = 2`).
pub fn random_tree<R: Rng>(rng: &mut R, horizon: usize, branching: usize, d: usize) -> ProbabilityTree {
    let steps = (0..horizon)
        .map(|_| match (branching, d) {
            (2, 1) => {
                if rng.gen_bool(0.5) {
                    IncrementDistribution::rademacher()
                } else {
                    skewed_binary(rng.gen_range(0.2..0.8))
                }
            }
            (3, 1) => IncrementDistribution::trinomial(rng.gen_range(0.05..0.45))
                .expect("p in (0, 1/2)"),
            (3, 2) => IncrementDistribution::triangle2d(),
            _ => panic!("no family with branching {branching} and dimension {d}"),
        })
        .collect();
    ProbabilityTree::new(steps).expect("families satisfy the moment conditions")
}

fn num(v: f64) -> String {
    format!("({v:?})")
}

/// A random Lipschitz expression in `y` and `z`; every `z` term is gated by
/// `min(T - t, 1)`, so the value at `t = T` ignores `z`.
pub fn lipschitz_expr<R: Rng>(rng: &mut R, n: usize, d: usize, horizon: usize) -> String {
    let funcs = ["sin", "cos", "tanh", ""];
    let gate = format!("min({horizon} - t, 1)");
    let terms = rng.gen_range(1..=3);
    let mut parts = vec![format!("{}*t", num(rng.gen_range(-0.2..0.2)))];
    for _ in 0..terms {
        let mut arg = Vec::new();
        for j in 1..=n {
            if rng.gen_bool(0.7) {
                arg.push(format!("{}*y{j}", num(rng.gen_range(-1.0..1.0))));
            }
        }
        let mut zarg = Vec::new();
        for i in 1..=n {
            for l in 1..=d {
                if rng.gen_bool(0.5) {
                    let var = if d == 1 { format!("z{i}") } else { format!("z{i}_{l}") };
                    zarg.push(format!("{}*{var}", num(rng.gen_range(-1.0..1.0))));
                }
            }
        }
        if !zarg.is_empty() {
            arg.push(format!("{gate}*({})", zarg.join(" + ")));
        }
        arg.push(num(rng.gen_range(-1.0..1.0)));
        let func = funcs.choose(rng).expect("nonempty");
        parts.push(format!(
            "{}*{func}({})",
            num(rng.gen_range(-0.5..0.5)),
            arg.join(" + ")
        ));
    }
    parts.join(" + ")
}

/// A random BSΔE: generator expressions, the generator, and a terminal value.
pub struct BsdeInstance {
    pub tree: ProbabilityTree,
    pub exprs: Vec<String>,
    pub generator: Generator,
    pub eta: AdaptedProcess,
}

pub fn random_bsde<R: Rng>(rng: &mut R, tree: ProbabilityTree, n: usize) -> BsdeInstance {
    let horizon = tree.horizon();
    let d = tree.dim();
    let exprs: Vec<String> = (0..n).map(|_| lipschitz_expr(rng, n, d, horizon)).collect();
    let dims = Dims { m: 0, n, d };
    let parsed = exprs
        .iter()
        .map(|s| dsl::parse_expr(s, dims).expect("generated expressions parse"))
        .collect();
    let generator = Generator::from_dsl(parsed, d);
    let eta = AdaptedProcess::from_fn(&tree, (n, 1), horizon..=horizon, |_, _| {
        DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-2.0..2.0))
    });
    BsdeInstance {
        tree,
        exprs,
        generator,
        eta,
    }
}

/// A matrix with entries uniform in `[-r, r]`.
pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-r..=r))
}

/// A random `n × m` matrix of full rank, well away from rank deficiency.
pub fn full_rank_g<R: Rng>(rng: &mut R, n: usize, m: usize) -> DMatrix<f64> {
    loop {
        let g = uniform_matrix(rng, n, m, 1.5);
        if g.singular_values().min() > 0.2 {
            return g;
        }
    }
}

pub fn random_homogeneous<R: Rng>(
    rng: &mut R,
    m: usize,
    n: usize,
    horizon: usize,
    r: f64,
) -> HomogeneousCoefficients {
    let mut h = HomogeneousCoefficients::zeros(m, n, horizon, full_rank_g(rng, n, m));
    for t in 0..horizon {
        h.a[t] = uniform_matrix(rng, m, m, r);
        h.a_bar[t] = uniform_matrix(rng, m, m, r);
        h.b[t] = uniform_matrix(rng, m, n, r);
        h.b_bar[t] = uniform_matrix(rng, m, n, r);
        h.c[t] = uniform_matrix(rng, m, n, r);
        h.c_bar[t] = uniform_matrix(rng, m, n, r);
        h.a_hat[t] = uniform_matrix(rng, n, m, r);
        h.b_hat[t] = uniform_matrix(rng, n, n, r);
        h.c_hat[t] = if t + 1 == horizon {
            DMatrix::zeros(n, n)
        } else {
            uniform_matrix(rng, n, n, r)
        };
    }
    h
}

/// Node-dependent inhomogeneous terms with entries uniform in `[-r, r]`.
pub fn random_inhomogeneous<R: Rng>(
    rng: &mut R,
    tree: &ProbabilityTree,
    m: usize,
    n: usize,
    r: f64,
) -> InhomogeneousTerms {
    let horizon = tree.horizon();
    let mut draw = |rows: usize, from: usize, to: usize| {
        AdaptedProcess::from_fn(tree, (rows, 1), from..=to, |_, _| uniform_matrix(rng, rows, 1, r))
    };
    let d = draw(m, 0, horizon - 1);
    let d_bar = draw(m, 0, horizon - 1);
    let d_hat = draw(n, 1, horizon);
    let g = draw(n, horizon, horizon);
    let x0 = DVector::from_fn(m, |_, _| rng.gen_range(-r..=r));
    InhomogeneousTerms {
        d,
        d_bar,
        d_hat,
        g,
        x0,
    }
}

/// A random coupled linear instance whose every `Γ_t` has smallest singular
/// value at least `margin`.
pub fn random_solvable_linear<R: Rng>(
    rng: &mut R,
    tree: &ProbabilityTree,
    m: usize,
    n: usize,
    r: f64,
    margin: f64,
) -> LinearCoefficients {
    loop {
        let hom = random_homogeneous(rng, m, n, tree.horizon(), r);
        let report = check_solvability(&hom, tree).expect("well-formed coefficients");
        if report.solvable && report.entries.iter().all(|(_, sv, _)| *sv >= margin) {
            let inhom = random_inhomogeneous(rng, tree, m, n, 1.0);
            return LinearCoefficients { hom, inhom };
        }
    }
}

/// A model that is the anchor of strength `kappa` plus monotone tanh terms of
/// strength `eps`, with random constant forcing. It satisfies the monotone
/// conditions with `β₁ = β₂ = kappa`.
#[derive(Debug, Clone)]
pub struct MonotoneInstance {
    pub b: Vec<String>,
    pub sigma: Vec<String>,
    pub f: Vec<String>,
    pub h: Vec<String>,
    pub g: DMatrix<f64>,
    pub kappa: f64,
    pub x0: DVector<f64>,
}

pub(crate) fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

impl MonotoneInstance {
    pub fn model(&self) -> NonlinearModel {
        NonlinearModel::parse(
            &refs(&self.b),
            &refs(&self.sigma),
            &refs(&self.f),
            &refs(&self.h),
            self.g.clone(),
            self.kappa,
            self.kappa,
            self.x0.clone(),
        )
        .expect("generated expressions parse")
    }
}

fn linear_form(coefs: impl Iterator<Item = f64>, var: &str) -> String {
    coefs
        .enumerate()
        .map(|(j, c)| format!("{}*{var}{}", num(c), j + 1))
        .collect::<Vec<_>>()
        .join(" + ")
}

pub fn random_monotone<R: Rng>(rng: &mut R, m: usize, n: usize, kappa: f64, eps: f64) -> MonotoneInstance {
    let g = full_rank_g(rng, n, m);
    let row = |i: usize, var: &str| linear_form(g.row(i).iter().copied(), var);
    let col = |j: usize, var: &str| linear_form(g.column(j).iter().copied(), var);
    let mut c = || num(rng.gen_range(-0.5..0.5));
    let b = (0..m)
        .map(|j| {
            let gy = col(j, "y");
            format!("{} - {}*tanh({gy}) - {}*({gy})", c(), num(eps), num(kappa))
        })
        .collect();
    let sigma = (0..m)
        .map(|j| {
            let gz = col(j, "z");
            format!("{} - {}*tanh({gz}) - {}*({gz})", c(), num(eps), num(kappa))
        })
        .collect();
    let f = (0..n)
        .map(|i| {
            let gx = row(i, "x");
            format!("{} + {}*t + {}*tanh({gx}) + {}*({gx})", c(), c(), num(eps), num(kappa))
        })
        .collect();
    let h = (0..n)
        .map(|i| {
            let gx = row(i, "x");
            format!("{} + {}*tanh({gx}) + {gx}", c(), num(eps))
        })
        .collect();
    let x0 = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    MonotoneInstance {
        b,
        sigma,
        f,
        h,
        g,
        kappa,
        x0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::validate_increments;
    use crate::nonlinear::{check_monotone, MonotoneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skewed_binary_has_unit_moments() {
        let dist = skewed_binary(0.3);
        assert!(validate_increments(dist.points(), dist.probs()).unwrap().is_pass());
    }

    #[test]
    fn generated_expressions_ignore_z_at_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [1, 2] {
            let tree = random_tree(&mut rng, 3, 3, d);
            let inst = random_bsde(&mut rng, tree, 2);
            assert!(inst.generator.terminal_z_spread(&inst.tree, 50, 1) <= 1e-12);
        }
    }

    #[test]
    fn monotone_instances_pass_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tree = ProbabilityTree::rademacher(3);
        for (m, n) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            let inst = random_monotone(&mut rng, m, n, 1.0, 0.2);
            let report = check_monotone(&inst.model(), &tree, 2000, 3, &MonotoneConfig::default());
            assert!(report.holds(), "{report:?}");
        }
    }
}
