use cqnet::verify::{nonexpansive_suite, run_all, Level, VerifyOptions};

#[test]
fn fast_suite_passes_and_is_reproducible() {
    let opts = VerifyOptions::new(Level::Fast, 3);
    let a = run_all(&opts).unwrap();
    assert!(a.passed(), "{}", a.render());
    assert_eq!(a, run_all(&opts).unwrap());
    assert_eq!(a.render(), run_all(&opts).unwrap().render());
}

#[test]
fn mis_scaled_stepsize_is_reported_with_a_pair() {
    let mut opts = VerifyOptions::new(Level::Fast, 3);
    opts.step_scale_override = Some(4.0);
    let checks = nonexpansive_suite(&opts).unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert_eq!(failed.len(), 1);
    let msg = failed[0].failure.as_deref().unwrap();
    assert!(msg.contains("d1 = [") && msg.contains("d2 = ["), "{msg}");
}
