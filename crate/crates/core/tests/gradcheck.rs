use dmri::gradcheck::{run_all, suites, LAYER_TOLERANCE, PIPELINE_TOLERANCE};

#[test]
fn every_suite_passes_its_tolerance() {
    let results = run_all(3);
    assert_eq!(results.len(), suites().len());
    for r in &results {
        assert!(r.passed, "{r}");
        assert!(r.tolerance == LAYER_TOLERANCE || r.tolerance == PIPELINE_TOLERANCE);
        assert!(r.coordinates > 0);
    }
}
