use mmdsfi::corpus::{run_case, CaseKind, Corpus};

#[test]
fn manifest_loads_and_has_enough_cases() {
    let c = Corpus::load_default().unwrap();
    assert!(c.of_kind(CaseKind::Benign).count() >= 25);
    assert!(c.of_kind(CaseKind::Adversarial).count() >= 15);
    assert!(c.of_kind(CaseKind::Attack).count() >= 3);
}

#[test]
fn every_case_meets_its_expectation() {
    let c = Corpus::load_default().unwrap();
    let failed: Vec<_> = c
        .cases
        .iter()
        .map(run_case)
        .filter(|r| !r.passed)
        .map(|r| format!("{}: expected {} observed {}", r.name, r.expected, r.observed))
        .collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}
