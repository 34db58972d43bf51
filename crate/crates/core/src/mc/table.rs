//! Table rendering: one row per (regime, scenario, cell), one column per method.

use super::{McGroup, McReport, McRow};
use crate::dgp::{ErrorKind, FactorRegime};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Mse,
    Bias,
    Coverage,
    MeanSe,
    TrimmedMse,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mse, Metric::Coverage, Metric::Bias, Metric::MeanSe, Metric::TrimmedMse];

    pub fn slug(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Bias => "bias",
            Metric::Coverage => "coverage",
            Metric::MeanSe => "mean_se",
            Metric::TrimmedMse => "trimmed_mse",
        }
    }

    fn value(self, row: &McRow) -> (f64, Option<f64>) {
        match self {
            Metric::Mse => (row.mse, Some(row.mse_mcse)),
            Metric::Bias => (row.bias, None),
            Metric::Coverage => (100.0 * row.coverage, Some(100.0 * row.coverage_mcse)),
            Metric::MeanSe => (row.mean_se, None),
            Metric::TrimmedMse => (row.trimmed_mse, None),
        }
    }

    /// Table-style rendering: three decimals, or a two-decimal percentage.
    fn format(self, v: f64) -> String {
        match self {
            Metric::Coverage => format!("{v:.2}"),
            _ => format!("{v:.3}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
        }
    }
}

fn regime_label(r: FactorRegime) -> &'static str {
    match r {
        FactorRegime::Stationary => "stationary",
        FactorRegime::LogTrend => "log-trend",
    }
}

fn errors_label(e: ErrorKind) -> String {
    match e {
        ErrorKind::Iid => "iid".into(),
        ErrorKind::Ar1 { phi } => format!("ar1({phi})"),
    }
}

fn key_cells(g: &McGroup) -> [String; 4] {
    [regime_label(g.regime).to_string(), g.scenario.cov.to_string(), errors_label(g.scenario.errors), g.cell.label()]
}

/// Renders one metric of `report`. CSV output adds a Monte Carlo standard
/// error column per method for MSE and coverage.
pub fn emit_table(report: &McReport, metric: Metric, format: TableFormat) -> String {
    let methods: Vec<_> = report.config.methods.clone();
    let with_mcse = format == TableFormat::Csv && matches!(metric, Metric::Mse | Metric::Coverage);
    let mut header: Vec<String> = ["regime", "se", "errors", "(K,T)"].iter().map(|s| s.to_string()).collect();
    header.extend(methods.iter().map(|m| m.label().to_string()));
    if with_mcse {
        header.extend(methods.iter().map(|m| format!("{}_mcse", m.label())));
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for g in &report.groups {
        let mut cells: Vec<String> = key_cells(g).to_vec();
        let vals: Vec<(f64, Option<f64>)> =
            methods.iter().map(|m| g.row(*m).map_or((f64::NAN, None), |r| metric.value(r))).collect();
        for (v, _) in &vals {
            let s = metric.format(*v);
            cells.push(if format == TableFormat::Markdown && metric == Metric::Coverage { format!("{s}%") } else { s });
        }
        if with_mcse {
            cells.extend(vals.iter().map(|(_, e)| format!("{:.4}", e.unwrap_or(f64::NAN))));
        }
        rows.push(cells);
    }
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).expect("in-memory write");
            for r in &rows {
                w.write_record(r).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
        }
        TableFormat::Markdown => {
            let mut out = format!("| {} |\n", header.join(" | "));
            out.push_str(&format!("|{}\n", header.iter().enumerate().map(|(i, _)| if i < 4 { "---|" } else { "---:|" }).collect::<String>()));
            for r in &rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
            out
        }
    }
}

/// Splits a Markdown table into header and body cells (percent signs kept).
pub fn parse_markdown(doc: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = doc.lines().filter(|l| l.trim_start().starts_with('|'));
    let split = |l: &str| -> Vec<String> {
        l.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
    };
    let header = lines.next().map(split).unwrap_or_default();
    let body = lines.skip(1).map(split).collect();
    (header, body)
}
