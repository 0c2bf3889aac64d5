use std::collections::BTreeSet;
use std::fmt::Write as _;

use csipred::train_eval::{ExperimentRecord, TrainHistory};

/// Whitespace-separated blocks, one per `(l, delta)` pair, separated by two
/// blank lines (gnuplot `index`). Rows are SNR values, columns models;
/// missing or unsupported cells are `NaN`.
pub fn nmse_table(records: &[ExperimentRecord]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for r in records {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for r in records {
        if !pairs.contains(&(r.l, r.delta)) {
            pairs.push((r.l, r.delta));
        }
    }
    let snrs: BTreeSet<i64> = records.iter().map(|r| (r.snr_db * 1000.0).round() as i64).collect();
    let mut out = String::new();
    for (bi, &(l, delta)) in pairs.iter().enumerate() {
        if bi > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# l={l} delta={delta}");
        let _ = writeln!(out, "snr_db {}", models.join(" "));
        for &s in &snrs {
            let snr = s as f64 / 1000.0;
            let _ = write!(out, "{snr}");
            for m in &models {
                let v = records
                    .iter()
                    .find(|r| r.model == *m && r.l == l && r.delta == delta && (r.snr_db * 1000.0).round() as i64 == s)
                    .and_then(|r| r.score.value())
                    .map_or_else(|| "NaN".to_string(), |v| v.to_string());
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn history_table(h: &TrainHistory) -> String {
    let mut out = String::from("# epoch train_loss val_nmse\n");
    for (e, (t, v)) in h.train_loss.iter().zip(&h.val_nmse).enumerate() {
        let _ = writeln!(out, "{e} {t} {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use csipred::train_eval::Score;

    fn rec(model: &str, snr: f64, l: usize, score: Score) -> ExperimentRecord {
        ExperimentRecord {
            model: model.into(),
            snr_db: snr,
            l,
            delta: 2,
            score,
            seed: 0,
            runtime_s: 0.0,
            checkpoint: None,
        }
    }

    #[test]
    fn table_layout() {
        let recs = vec![
            rec("a", 0.0, 8, Score::Nmse(0.5)),
            rec("b", 0.0, 8, Score::Unsupported(String::new())),
            rec("a", 10.0, 8, Score::Nmse(0.25)),
            rec("a", 0.0, 4, Score::Nmse(0.125)),
        ];
        let t = nmse_table(&recs);
        let blocks: Vec<&str> = t.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0], "# l=8 delta=2\nsnr_db a b\n0 0.5 NaN\n10 0.25 NaN");
        assert!(blocks[1].contains("0 0.125 NaN"));
    }
}
