//! Text tables for experiment results: fixed-width for reading, tab-separated
//! for tools. Rates print with four decimals; absent cells print as a dash.

use serde::{Deserialize, Serialize};

use crate::evaluation::{SimilarityTable, SubstitutionResult, SweepResult, TrainingData};

pub const ABSENT: &str = "\u{2014}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    /// Header of the label column.
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => ABSENT.to_string(),
    }
}

fn width(s: &str) -> usize {
    s.chars().count()
}

fn pad_right(s: &str, w: usize) -> String {
    format!("{s}{}", " ".repeat(w.saturating_sub(width(s))))
}

fn pad_left(s: &str, w: usize) -> String {
    format!("{}{s}", " ".repeat(w.saturating_sub(width(s))))
}

impl Table {
    pub fn new(title: impl Into<String>, row_header: impl Into<String>, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            row_header: row_header.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) {
        self.rows.push((label.into(), values));
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let mut out = vec![std::iter::once(self.row_header.clone()).chain(self.columns.iter().cloned()).collect()];
        for (label, values) in &self.rows {
            let mut row = vec![label.clone()];
            row.extend((0..self.columns.len()).map(|i| format_value(values.get(i).copied().flatten())));
            out.push(row);
        }
        out
    }

    /// Title line, header and rows; label column left-aligned, values
    /// right-aligned, two spaces between columns.
    pub fn to_fixed_width(&self) -> String {
        let cells = self.cells();
        let n = self.columns.len() + 1;
        let widths: Vec<usize> = (0..n).map(|c| cells.iter().map(|r| width(&r[c])).max().unwrap_or(0)).collect();
        let mut out = format!("{}\n", self.title);
        for row in &cells {
            let mut line = pad_right(&row[0], widths[0]);
            for c in 1..n {
                line.push_str("  ");
                line.push_str(&pad_left(&row[c], widths[c]));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// Header and rows joined by tabs, no title.
    pub fn to_tsv(&self) -> String {
        self.cells().iter().map(|r| r.join("\t") + "\n").collect()
    }
}

/// Both renderings of a set of tables, separated by blank lines.
pub fn render_report(tables: &[Table]) -> (String, String) {
    let fixed = tables.iter().map(Table::to_fixed_width).collect::<Vec<_>>().join("\n");
    let tsv = tables
        .iter()
        .map(|t| format!("# {}\n{}", t.title, t.to_tsv()))
        .collect::<Vec<_>>()
        .join("\n");
    (fixed, tsv)
}

/// `"{prefix} + {percent}%"`.
pub fn ratio_label(prefix: &str, ratio: f64) -> String {
    format!("{prefix} + {}%", (ratio * 100.0).round() as i64)
}

/// Held-out speaker WER for every augmentation ratio.
pub fn sweep_table(result: &SweepResult, prefix: &str) -> Table {
    let mut t = Table::new(
        "WER by synthetic augmentation ratio",
        "Training Setting",
        result.speakers.clone(),
    );
    for (i, &r) in result.ratios.iter().enumerate() {
        let values = result.speakers.iter().map(|s| result.cell(i, s).map(|c| c.wer)).collect();
        t.push(ratio_label(prefix, r), values);
    }
    t
}

/// One line per sweep cell.
pub fn sweep_records(result: &SweepResult) -> String {
    let mut out = String::from("ratio\tspeaker\twer\tper\tn_real\tn_synthetic\n");
    for c in &result.cells {
        out.push_str(&format!(
            "{:.2}\t{}\t{:.4}\t{:.4}\t{}\t{}\n",
            c.ratio, c.speaker, c.wer, c.per, c.n_real, c.n_synthetic
        ));
    }
    out
}

pub fn similarity_table(table: &SimilarityTable) -> Table {
    let mut t = Table::new("Speaker similarity (mean cosine)", "Method", table.speakers.clone());
    for row in &table.rows {
        t.push(row.method.clone(), table.speakers.iter().map(|s| row.get(s)).collect());
    }
    t
}

/// WER and PER tables with a trailing speaker-mean column.
pub fn substitution_tables(result: &SubstitutionResult) -> [Table; 2] {
    let mut columns = result.speakers.clone();
    columns.push("Mean".into());
    let build = |title: &str, pick: fn(&crate::evaluation::SubstitutionCell) -> f64| {
        let mut t = Table::new(title, "Training data", columns.clone());
        for data in TrainingData::ALL {
            let mut values: Vec<Option<f64>> = result
                .speakers
                .iter()
                .map(|s| result.cells.iter().find(|c| c.data == data && &c.speaker == s).map(pick))
                .collect();
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            values.push((!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64));
            t.push(data.as_str(), values);
        }
        t
    };
    [build("WER by training data", |c| c.wer), build("PER by training data", |c| c.per)]
}

pub fn substitution_records(result: &SubstitutionResult) -> String {
    let mut out = String::from("data\tspeaker\twer\tper\n");
    for c in &result.cells {
        out.push_str(&format!("{}\t{}\t{:.4}\t{:.4}\n", c.data.as_str(), c.speaker, c.wer, c.per));
    }
    out
}
