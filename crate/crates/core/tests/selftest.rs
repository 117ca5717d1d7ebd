use cagan_al::selftest::run_selftest;

#[test]
fn every_closed_form_check_passes() {
    let results = run_selftest();
    for r in &results {
        println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
