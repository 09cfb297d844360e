use bbh_demo::{kl_summary, ToyRun};

#[test]
fn explorer_reports_the_closed_form_and_a_spread() {
    let s = kl_summary(1.0, 1.0, 500, 500, 40, 3).unwrap();
    assert_eq!(s.analytical, 0.5);
    assert!((s.mean - 0.5).abs() < 0.1, "{s:?}");
    assert!(s.std > 0.0 && s.min <= s.mean && s.mean <= s.max);
    assert!(kl_summary(0.0, -1.0, 5, 5, 1, 0).is_err());
    assert!(kl_summary(0.0, 1.0, 1, 5, 1, 0).is_err());
}

#[test]
fn toy_run_draws_a_band_and_histograms() {
    let run = ToyRun::fit("bbb", 200, 0).unwrap();
    let svg = run.chart(30).unwrap();
    assert!(svg.starts_with("<?xml") && svg.contains("<polygon"));
    assert!(run.std_ratio(30).unwrap() > 0.0);
    let h = run.weight_histogram("layer0.kernel", 3, 200, 16).unwrap();
    assert_eq!(h.counts.len(), 16);
    assert_eq!(h.counts.iter().sum::<usize>(), 200);
    assert!(h.lo < h.hi);
    assert!(run.weight_histogram("layer9.kernel", 0, 200, 16).is_err());
    assert!(ToyRun::fit("gradient_descent", 10, 0).is_err());
}
