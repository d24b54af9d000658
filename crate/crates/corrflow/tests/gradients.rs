//! Exhaustive finite-difference coverage: every registered op over 100
//! random seeds at small dims, in f64 at h = 1e-5, plus the attention
//! block and the end-to-end tiny model at reduced seed counts.

use corrflow::check;

#[test]
fn every_op_matches_central_differences_over_100_seeds() {
    let results = check::gradcheck_ops(100, 1e-5, 1e-4).unwrap();
    for r in &results {
        assert!(r.passed(), "{}", r.line());
    }
    assert!(results.len() >= 30, "expected full op coverage, got {}", results.len());
}

#[test]
fn attention_block_gradients() {
    let r = check::gradcheck_block(5, 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{}", r.line());
}

#[test]
fn end_to_end_loss_gradients() {
    let r = check::gradcheck_end_to_end(5, 1e-5, 1e-3).unwrap();
    assert!(r.passed(), "{}", r.line());
}
