//! Pathwise reverse-KL gradients against common-random-number central
//! differences of the sample loss.

mod support;

#[test]
fn pathwise_gradient_matches_finite_differences() {
    let cases = support::gradient_suite(20240601, 20);
    for (i, c) in cases.iter().enumerate() {
        assert!(c.loss_mismatch < 1e-10, "case {i} ({}): loss mismatch {:e}", c.kind, c.loss_mismatch);
        assert!(
            c.worst_rel < support::REL_TOL,
            "case {i} ({}) coord {}: relative error {:e}",
            c.kind,
            c.worst_coord,
            c.worst_rel
        );
    }
}

#[test]
fn suite_covers_required_task_kinds() {
    let kinds: Vec<&str> = support::gradient_suite(1, 4).iter().map(|c| c.kind).collect();
    assert_eq!(kinds, ["joint", "rotated-marginal", "noised-joint", "noised-rotated-marginal"]);
}
