use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

/// Name of the error metric carried by every table.
pub const METRIC: &str = "frame error rate";

/// One experiment cell aggregated over seeds. Error rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub id: String,
    pub kind: String,
    pub method: String,
    pub band: String,
    pub layers: String,
    pub pct: f64,
    /// Seeds that completed.
    pub seeds: usize,
    pub in_domain_fer_mean: Option<f64>,
    pub in_domain_fer_std: Option<f64>,
    pub out_of_domain_fer_mean: Option<f64>,
    pub out_of_domain_fer_std: Option<f64>,
    pub failed: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.failed > 0)
    }

    pub fn row(&self, id: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let n = values.len();
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    Some((mean, std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Text,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "text" | "txt" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => input_err(format!("unknown report format '{other}' (csv, text, json)")),
        }
    }
}

pub fn report(table: &ResultTable, format: Format) -> Result<String> {
    if table.rows.is_empty() {
        return input_err("cannot render an empty result table");
    }
    match format {
        Format::Csv => to_csv(table),
        Format::Json => Ok(serde_json::to_string_pretty(table)? + "\n"),
        Format::Text => Ok(to_text(table)),
    }
}

fn to_csv(table: &ResultTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn pct_cell(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:6.2} ± {:5.2}", 100.0 * m, 100.0 * s),
        _ => "      n/a      ".to_string(),
    }
}

fn to_text(table: &ResultTable) -> String {
    let idw = table.rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(2);
    let mut out = String::new();
    let _ = writeln!(out, "metric: {METRIC} (%), mean ± std over seeds");
    let _ = writeln!(
        out,
        "{:idw$}  {:6}  {:5}  {:7}  {:>6}  {:>5}  {:15}  {:15}",
        "id", "method", "band", "layers", "pct", "seeds", "in-domain", "out-of-domain"
    );
    for r in &table.rows {
        let _ = write!(
            out,
            "{:idw$}  {:6}  {:5}  {:7}  {:6.2}  {:>5}  {}  {}",
            r.id,
            r.method,
            r.band,
            r.layers,
            r.pct,
            r.seeds,
            pct_cell(r.in_domain_fer_mean, r.in_domain_fer_std),
            pct_cell(r.out_of_domain_fer_mean, r.out_of_domain_fer_std),
        );
        if r.failed > 0 {
            let _ = write!(out, "  FAILED x{}: {}", r.failed, r.error);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str) -> ResultRow {
        ResultRow {
            id: id.into(),
            kind: "prune".into(),
            method: "MI".into(),
            band: "hypo".into(),
            layers: "1".into(),
            pct: 2.0,
            seeds: 3,
            in_domain_fer_mean: Some(0.123456789),
            in_domain_fer_std: Some(0.01),
            out_of_domain_fer_mean: Some(1.0 / 3.0),
            out_of_domain_fer_std: Some(0.0),
            failed: 0,
            error: String::new(),
        }
    }

    #[test]
    fn single_row_csv_has_header_and_one_line() {
        let t = ResultTable { rows: vec![row("a")] };
        let csv = report(&t, Format::Csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("id,kind,method"));
    }

    #[test]
    fn csv_round_trip() {
        let mut failed = row("b");
        failed.in_domain_fer_mean = None;
        failed.in_domain_fer_std = None;
        failed.failed = 1;
        failed.error = "seed 2: diverged, \"badly\"".into();
        let t = ResultTable { rows: vec![row("a"), failed] };
        let back = ResultTable::from_csv(&report(&t, Format::Csv).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(report(&ResultTable::default(), Format::Text).is_err());
    }

    #[test]
    fn unknown_format() {
        assert!("xml".parse::<Format>().is_err());
        assert_eq!("TXT".parse::<Format>().unwrap(), Format::Text);
    }

    #[test]
    fn text_names_the_metric() {
        let t = ResultTable { rows: vec![row("a")] };
        let text = report(&t, Format::Text).unwrap();
        assert!(text.contains(METRIC));
        assert!(text.contains("12.35 ±  1.00"));
    }

    #[test]
    fn std_matches_two_pass() {
        let v = [0.21, 0.19, 0.25];
        let m = v.iter().sum::<f64>() / 3.0;
        let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 2.0).sqrt();
        let (mean, std) = mean_std(&v).unwrap();
        assert!((mean - m).abs() < 1e-15 && (std - s).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), Some((0.4, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }
}
