mod common;

#[test]
fn total_loss_gradient_matches_central_differences() {
    let report = common::oracles::gradient_check(8, 1e-4, 3);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
    // Kink crossings must stay rare or the check is vacuous.
    assert!(report.kinks * 100 <= report.params, "{report:?}");
    assert_eq!(report.checked + report.kinks, report.params);
}
