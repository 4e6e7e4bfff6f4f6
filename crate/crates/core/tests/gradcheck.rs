use nib_core::verify::{gradient_checks, op_cases, GRAD_TOL};

#[test]
fn every_op_matches_central_differences_on_twenty_seeds() {
    let checks = gradient_checks(20).unwrap();
    assert_eq!(checks.len(), op_cases().len());
    for c in &checks {
        assert_eq!(c.seeds, 20);
        assert!(c.passed(), "{} worst rel err {:e}", c.op, c.worst_rel_err);
        assert!(c.worst_rel_err <= GRAD_TOL);
    }
}
