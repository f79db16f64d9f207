use sarfusion::gradsuite::{full_suite, model_suite};
use sarnn::gradcheck::TOLERANCE;

#[test]
fn encoder_and_head_gradients_match_finite_differences() {
    let suite = model_suite().unwrap();
    assert!(suite.len() >= 9);
    for (name, report) in &suite {
        assert!(report.checked > 0, "{name} checked nothing");
        assert!(report.passes(TOLERANCE), "{name}: {report:?}");
    }
}

#[test]
fn full_suite_extends_the_layer_suite() {
    let full = full_suite().unwrap();
    let names: Vec<&str> = full.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["msgc block", "channel attention", "encoder", "fusion model relu"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(full.iter().all(|(_, r)| r.passes(TOLERANCE)));
}
