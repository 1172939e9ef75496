use protodisent::evaluation::{SweepCell, SweepResult};
use protodisent::report::{render_report, sweep_table};

/// Reference severe-subset WER for the unaugmented recognizer.
const WM_ZERO: [(&str, f64); 4] = [("F01", 0.4161), ("M01", 0.3101), ("M02", 0.3866), ("M04", 0.5244)];

#[test]
fn unaugmented_row_renders_verbatim() {
    let result = SweepResult {
        ratios: vec![0.0],
        speakers: WM_ZERO.iter().map(|(s, _)| s.to_string()).collect(),
        cells: WM_ZERO
            .iter()
            .map(|&(s, wer)| SweepCell {
                ratio: 0.0,
                speaker: s.to_string(),
                wer,
                per: 0.0,
                n_real: 0,
                n_synthetic: 0,
            })
            .collect(),
    };
    let table = sweep_table(&result, "WM");
    let (fixed, tsv) = render_report(&[table]);
    assert_eq!(tsv.lines().nth(1), Some("Training Setting\tF01\tM01\tM02\tM04"));
    assert_eq!(tsv.lines().nth(2), Some("WM + 0%\t0.4161\t0.3101\t0.3866\t0.5244"));
    assert_eq!(fixed.lines().nth(2), Some("WM + 0%           0.4161  0.3101  0.3866  0.5244"));
}
