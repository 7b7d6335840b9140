use pipemerge::sim::speedup;

const DEVICES: [usize; 8] = [1, 2, 3, 4, 5, 6, 7, 8];

fn check(times: [f64; 8], expected: [f64; 8]) {
    for ((n, t), want) in DEVICES.iter().zip(times).zip(expected) {
        let s = speedup(times[0], t).unwrap();
        let rounded = (s * 100.0).round() / 100.0;
        assert!((rounded - want).abs() <= 0.01, "n={n}: {rounded} vs {want}");
    }
}

#[test]
fn ad_vs_nc_training_times() {
    check(
        [55.0, 22.0, 20.0, 15.0, 13.0, 11.0, 8.0, 7.0],
        [1.0, 2.5, 2.75, 3.67, 4.23, 5.0, 6.88, 7.86],
    );
}

#[test]
fn smci_vs_pmci_training_times() {
    check(
        [29.0, 11.0, 9.0, 7.0, 6.0, 5.0, 4.0, 3.0],
        [1.0, 2.64, 3.22, 4.14, 4.83, 5.8, 7.25, 9.67],
    );
}
