//! Plain-text and JSON accuracy tables. Average rows are always recomputed
//! from the rows as unweighted means.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, macro_mean, EvaluationReport, MetricsError};
use crate::predictions::AlignedPredictions;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report has no rows")]
    Empty,
    #[error("row `{row}` lacks `{field}`, required by layout {layout}")]
    MissingField {
        row: String,
        field: &'static str,
        layout: Layout,
    },
    #[error("unknown layout `{0}` (expected table1, table2 or table3)")]
    UnknownLayout(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("predictions carry no labels")]
    Unlabeled,
    #[error("model `{0}` not in the prediction dump")]
    UnknownModel(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// One row per model: class-averaged top-1, top-1 and top-2.
    Table1,
    /// One row per object: top-1, voting, state count and test-set size.
    Table2,
    /// One row per object: top-1, top-2 and top-3.
    Table3,
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::Table1 => "table1",
            Layout::Table2 => "table2",
            Layout::Table3 => "table3",
        })
    }
}

impl FromStr for Layout {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table1" => Ok(Layout::Table1),
            "table2" => Ok(Layout::Table2),
            "table3" => Ok(Layout::Table3),
            other => Err(ReportError::UnknownLayout(other.to_string())),
        }
    }
}

/// One table row. Accuracies are percentages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(alias = "object", alias = "model")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voting: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_count: Option<usize>,
}

impl ReportRow {
    pub fn from_report(label: &str, report: &EvaluationReport) -> Self {
        let pct = |k: usize| report.topk.get(&k).map(|v| v * 100.0);
        ReportRow {
            label: label.to_string(),
            macro_top1: Some(report.macro_accuracy * 100.0),
            top1: pct(1),
            top2: pct(2),
            top3: pct(3),
            voting: None,
            states: Some(report.class_names.len()),
            test_count: Some(report.sample_count),
        }
    }
}

pub fn parse_rows(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rows(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Column {
    MacroTop1,
    Top1,
    Top2,
    Top3,
    Voting,
    States,
    TestCount,
}

impl Column {
    fn header(self) -> &'static str {
        match self {
            Column::MacroTop1 => "Top 1 (class avg)",
            Column::Top1 => "Top 1",
            Column::Top2 => "Top 2",
            Column::Top3 => "Top 3",
            Column::Voting => "Voting",
            Column::States => "States",
            Column::TestCount => "Test Set",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Column::MacroTop1 => "macro_top1",
            Column::Top1 => "top1",
            Column::Top2 => "top2",
            Column::Top3 => "top3",
            Column::Voting => "voting",
            Column::States => "states",
            Column::TestCount => "test_count",
        }
    }

    fn is_percent(self) -> bool {
        !matches!(self, Column::States | Column::TestCount)
    }

    fn value(self, row: &ReportRow) -> Option<f64> {
        match self {
            Column::MacroTop1 => row.macro_top1,
            Column::Top1 => row.top1,
            Column::Top2 => row.top2,
            Column::Top3 => row.top3,
            Column::Voting => row.voting,
            Column::States => row.states.map(|v| v as f64),
            Column::TestCount => row.test_count.map(|v| v as f64),
        }
    }
}

impl Layout {
    fn columns(self) -> &'static [Column] {
        match self {
            Layout::Table1 => &[Column::MacroTop1, Column::Top1, Column::Top2],
            Layout::Table2 => &[Column::Top1, Column::Voting, Column::States, Column::TestCount],
            Layout::Table3 => &[Column::Top1, Column::Top2, Column::Top3],
        }
    }

    fn label_header(self) -> &'static str {
        match self {
            Layout::Table1 => "Model",
            _ => "Object",
        }
    }

    fn has_average(self) -> bool {
        !matches!(self, Layout::Table1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedRow {
    pub label: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedTable {
    pub layout: Layout,
    pub columns: Vec<String>,
    pub rows: Vec<RenderedRow>,
    /// Unweighted column means; absent for per-model layouts.
    pub average: Option<BTreeMap<String, f64>>,
    #[serde(skip)]
    text: String,
}

impl RenderedTable {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Average of one column, by key (`top1`, `voting`, ...).
    pub fn average_of(&self, key: &str) -> Option<f64> {
        self.average.as_ref().and_then(|a| a.get(key).copied())
    }
}

fn fmt_cell(col: Column, v: f64) -> String {
    if col.is_percent() {
        format!("{v:.1}%")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

/// Renders rows under `layout`. Every column of the layout must be present
/// in every row.
pub fn render_rows(rows: &[ReportRow], layout: Layout) -> Result<RenderedTable, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let cols = layout.columns();
    let mut rendered = Vec::with_capacity(rows.len());
    for row in rows {
        let mut values = BTreeMap::new();
        for &c in cols {
            let v = c.value(row).ok_or_else(|| ReportError::MissingField {
                row: row.label.clone(),
                field: c.key(),
                layout,
            })?;
            values.insert(c.key().to_string(), v);
        }
        rendered.push(RenderedRow {
            label: row.label.clone(),
            values,
        });
    }
    let average = layout.has_average().then(|| {
        cols.iter()
            .map(|c| {
                (
                    c.key().to_string(),
                    macro_mean(rendered.iter().map(|r| r.values[c.key()])),
                )
            })
            .collect::<BTreeMap<_, _>>()
    });

    let mut grid: Vec<Vec<String>> = Vec::new();
    grid.push(
        std::iter::once(layout.label_header().to_string())
            .chain(cols.iter().map(|c| c.header().to_string()))
            .collect(),
    );
    for r in &rendered {
        grid.push(
            std::iter::once(r.label.clone())
                .chain(cols.iter().map(|c| fmt_cell(*c, r.values[c.key()])))
                .collect(),
        );
    }
    if let Some(avg) = &average {
        grid.push(
            std::iter::once("average".to_string())
                .chain(cols.iter().map(|c| fmt_cell(*c, avg[c.key()])))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..=cols.len())
        .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, r) in grid.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                if j == 0 {
                    format!("{cell:<w$}", w = widths[j])
                } else {
                    format!("{cell:>w$}", w = widths[j])
                }
            })
            .collect();
        writeln!(text, "{}", line.join("  ").trim_end()).unwrap();
        let is_last_body = average.is_some() && i + 2 == grid.len();
        if i == 0 || is_last_body {
            writeln!(text, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * cols.len())).unwrap();
        }
    }
    Ok(RenderedTable {
        layout,
        columns: cols.iter().map(|c| c.header().to_string()).collect(),
        rows: rendered,
        average,
        text,
    })
}

/// Single-row table for one evaluation report.
pub fn render_report(report: &EvaluationReport, label: &str, layout: Layout) -> Result<RenderedTable, ReportError> {
    if report.sample_count == 0 {
        return Err(ReportError::Empty);
    }
    render_rows(&[ReportRow::from_report(label, report)], layout)
}

/// One row per object for `model_id`, with `voting_id` (if any) filling the
/// voting column. Samples without an object are grouped under `all`.
pub fn object_rows(
    preds: &AlignedPredictions,
    class_names: &[String],
    model_id: &str,
    voting_id: Option<&str>,
) -> Result<Vec<ReportRow>, ReportError> {
    let labels = preds.labels.as_ref().ok_or(ReportError::Unlabeled)?;
    let main = preds
        .model(model_id)
        .ok_or_else(|| ReportError::UnknownModel(model_id.to_string()))?;
    let voting = match voting_id {
        Some(v) => Some(preds.model(v).ok_or_else(|| ReportError::UnknownModel(v.to_string()))?),
        None => None,
    };
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, o) in preds.objects.iter().enumerate() {
        let name = o.clone().unwrap_or_else(|| "all".to_string());
        match groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((name, vec![i])),
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (name, idx) in groups {
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let sub = main.select(ndarray::Axis(0), &idx);
        let report = evaluate(sub.view(), &y, class_names)?;
        let mut row = ReportRow::from_report(&name, &report);
        if let Some(v) = voting {
            let vr = evaluate(v.select(ndarray::Axis(0), &idx).view(), &y, class_names)?;
            row.voting = Some(vr.topk[&1] * 100.0);
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_an_error() {
        assert!(matches!(render_rows(&[], Layout::Table3), Err(ReportError::Empty)));
    }

    #[test]
    fn missing_column_named() {
        let rows = parse_rows(r#"{"object":"egg","top1":50,"top2":60}"#).unwrap();
        match render_rows(&rows, Layout::Table3) {
            Err(ReportError::MissingField { field, .. }) => assert_eq!(field, "top3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn text_has_average_row() {
        let rows = parse_rows("{\"object\":\"a\",\"top1\":50,\"top2\":70,\"top3\":90}\n{\"object\":\"b\",\"top1\":100,\"top2\":100,\"top3\":100}\n").unwrap();
        let t = render_rows(&rows, Layout::Table3).unwrap();
        assert_eq!(t.average_of("top1"), Some(75.0));
        assert!(t.text().lines().last().unwrap().starts_with("average"));
        assert!(t.text().contains("85.0%"));
        let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(json["average"]["top3"], 95.0);
        assert_eq!("table2".parse::<Layout>().unwrap(), Layout::Table2);
        assert!("table9".parse::<Layout>().is_err());
    }
}
