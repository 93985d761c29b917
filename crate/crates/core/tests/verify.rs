use dpmem_core::verify::{run, Suite, VerifyReport, VERIFY_SCHEMA};

#[test]
fn every_suite_is_green() {
    let r = run(Suite::All).unwrap();
    assert!(r.pass, "{}", r.summary());
    assert_eq!(r.schema, VERIFY_SCHEMA);
    assert_eq!(r.suites, Suite::LEAVES);
    for s in Suite::LEAVES {
        assert!(r.checks.iter().any(|c| c.suite == s), "{s} ran no checks");
    }
    let back: VerifyReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.summary().lines().count(), r.checks.len());
}
