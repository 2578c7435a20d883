use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fbsdelta::filtration::ProbabilityTree;
use fbsdelta::instances::random_solvable_linear;
use fbsdelta::linear::{HomogeneousCoefficients, InhomogeneousTerms, LinearCoefficients};
use fbsdelta::oracle::{solve_global_newton, solve_oracle, NewtonConfig, OracleError, ResidualSystem};

#[test]
fn unknown_count_follows_the_layout() {
    // X_1..X_T, Y_0..Y_T and Z_0..Z_{T-1} over every node.
    let tree = ProbabilityTree::rademacher(3);
    let coeffs = LinearCoefficients {
        hom: HomogeneousCoefficients::zeros(2, 1, 3, DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
        inhom: InhomogeneousTerms::zeros(&tree, 2, 1),
    };
    let rs = ResidualSystem::new(&coeffs, &tree).unwrap();
    assert_eq!(rs.len(), 2 * 14 + 15 + 7);
}

#[test]
fn affine_systems_converge_in_one_full_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tree = ProbabilityTree::rademacher(3);
    let coeffs = random_solvable_linear(&mut rng, &tree, 2, 2, 0.5, 1e-2);
    let (sol, trace) = solve_oracle(&coeffs, &tree, None, &NewtonConfig::default()).unwrap();
    assert!(trace.steps.len() <= 2, "{trace:?}");
    assert_eq!(trace.steps[0].step, 1.0);
    assert!(sol.residuals.equations() <= 1e-10);
}

#[test]
fn central_differences_agree_with_forward_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tree = ProbabilityTree::rademacher(2);
    let coeffs = random_solvable_linear(&mut rng, &tree, 1, 2, 0.5, 1e-2);
    let rs = ResidualSystem::new(&coeffs, &tree).unwrap();
    let v = nalgebra::DVector::from_fn(rs.len(), |i, _| (i as f64).sin());
    let exact = rs.affine_jacobian();
    assert!((rs.central_jacobian(&v, 1e-5) - &exact).amax() < 1e-8);
    assert!((rs.jacobian(&v, 1e-7) - &exact).amax() < 1e-6);
}

#[test]
fn wrong_start_length_is_rejected() {
    let tree = ProbabilityTree::rademacher(1);
    let coeffs = LinearCoefficients {
        hom: HomogeneousCoefficients::zeros(1, 1, 1, DMatrix::from_element(1, 1, 1.0)),
        inhom: InhomogeneousTerms::zeros(&tree, 1, 1),
    };
    let rs = ResidualSystem::new(&coeffs, &tree).unwrap();
    let err = solve_global_newton(&rs, nalgebra::DVector::zeros(1), &NewtonConfig::default()).unwrap_err();
    assert!(matches!(err, OracleError::StartLength { found: 1, .. }));
}

#[test]
fn singular_affine_system_reports_failure() {
    let tree = ProbabilityTree::rademacher(2);
    let mut hom = HomogeneousCoefficients::zeros(1, 1, 2, DMatrix::from_element(1, 1, 1.0));
    hom.b[1] = DMatrix::from_element(1, 1, 1.0);
    let mut inhom = InhomogeneousTerms::zeros(&tree, 1, 1);
    inhom.d.at_mut(1, 0)[0] = 1.0;
    let coeffs = LinearCoefficients { hom, inhom };
    let result = solve_oracle(&coeffs, &tree, None, &NewtonConfig::default());
    assert!(matches!(result, Err(OracleError::OracleFailed { .. })), "{result:?}");
}
