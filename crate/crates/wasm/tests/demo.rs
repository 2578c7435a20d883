use fbsdelta_wasm::{completeness_json, continuation_json, riccati_json};

#[test]
fn riccati_reports_the_singular_time() {
    // With only B = 1 and G = 1 the last step has Γ = diag(0, 1).
    let v = riccati_json(3, 1.0, 1.0, 0.0, 0.0, 0.0);
    assert_eq!(v["ok"], false);
    assert_eq!(v["error"], "NotSolvable at t=2 (min singular value 0.0e0)");
    let v = riccati_json(3, 1.0, 0.3, 0.2, -0.5, 0.1);
    assert_eq!(v["ok"], true);
    assert_eq!(v["gamma"].as_array().unwrap().len(), 3);
    assert!(v["residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn completeness_separates_the_two_trees() {
    let v = completeness_json(0.25, 2);
    assert!(v["trinomial"]["sup_n"].as_f64().unwrap() >= 0.1);
    assert!(v["rademacher"]["sup_n"].as_f64().unwrap() <= 1e-12);
    assert_eq!(v["trinomial"]["leaves"].as_array().unwrap().len(), 9);
    assert_eq!(completeness_json(0.7, 2)["ok"], false);
}

#[test]
fn continuation_trace_reaches_one() {
    let v = continuation_json(1.0, 0.2, 3, 0.5);
    assert_eq!(v["ok"], true);
    let stages = v["stages"].as_array().unwrap();
    assert_eq!(stages.last().unwrap()["alpha"], 1.0);
    assert!(v["oracle_gap"].as_f64().unwrap() < 1e-6);
    assert_eq!(v["assumption"], "assumption-sampled");
}
