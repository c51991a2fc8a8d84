//! CSV and JSON emission for reports, curves and heatmaps.
//!
//! Floats are written with `{:.16e}` (17 significant digits) so every value
//! parses back to the identical `f64`. Booleans are `true`/`false`; absent
//! heatmap cells are empty.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ConceptStrategyHeatmap, CoverageCurve, CoveragePoint, EvalReport};
use crate::error::{Error, Result};
use crate::strategy::{StrategyId, NUM_STRATEGIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown output format '{other}'"))),
        }
    }

    /// Picks the format from a `.csv` / `.json` extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(path.extension().and_then(|e| e.to_str()).unwrap_or(""))
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_cell<V: std::str::FromStr>(row: &csv::StringRecord, i: usize, what: &str) -> Result<V> {
    let raw = row.get(i).ok_or_else(|| Error::Parse(format!("{what}: missing column {i}")))?;
    raw.parse()
        .map_err(|_| Error::Parse(format!("{what}: bad value '{raw}' in column {i}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Header row plus data rows, each exactly `header.len()` cells wide.
fn write_table(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        debug_assert_eq!(r.len(), header.len());
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

fn read_table(text: &str, expected: &[String], what: &str) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse(format!("{what}: unexpected header {:?}", header)));
    }
    r.records().map(|rec| rec.map_err(csv_err)).collect()
}

fn owned(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Types with a stable CSV layout and a JSON form.
pub trait Emit: Serialize + DeserializeOwned + Sized {
    fn csv_columns(&self) -> Vec<String>;
    fn to_csv(&self) -> Result<String>;
    fn from_csv(text: &str) -> Result<Self>;

    fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(format!("json: {e}")))
    }

    fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("json: {e}")))
    }

    fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    fn parse(text: &str, format: OutputFormat) -> Result<Self> {
        match format {
            OutputFormat::Csv => Self::from_csv(text),
            OutputFormat::Json => Self::from_json(text),
        }
    }
}

/// Writes `item` to `path` in the given format.
pub fn emit<E: Emit>(item: &E, path: impl AsRef<Path>, format: OutputFormat) -> Result<()> {
    fs::write(path, item.render(format)?)?;
    Ok(())
}

const REPORT_COLUMNS: [&str; 12] = [
    "lambda",
    "rho",
    "seed",
    "n",
    "system_accuracy",
    "ai_accuracy",
    "expert_accuracy",
    "concept_accuracy",
    "participation_ratio",
    "count_ai_only",
    "count_ai_human",
    "count_defer",
];

impl Emit for EvalReport {
    fn csv_columns(&self) -> Vec<String> {
        owned(&REPORT_COLUMNS)
    }

    fn to_csv(&self) -> Result<String> {
        let mut row = vec![
            fmt_f64(self.lambda),
            fmt_f64(self.rho),
            self.seed.to_string(),
            self.n.to_string(),
        ];
        for v in [
            self.system_accuracy,
            self.ai_accuracy,
            self.expert_accuracy,
            self.concept_accuracy,
            self.participation_ratio,
        ] {
            row.push(fmt_f64(v));
        }
        row.extend(self.strategy_counts.iter().map(usize::to_string));
        write_table(&self.csv_columns(), &[row])
    }

    fn from_csv(text: &str) -> Result<Self> {
        let rows = read_table(text, &owned(&REPORT_COLUMNS), "report")?;
        let [row] = rows.as_slice() else {
            return Err(Error::Parse(format!("report: expected one data row, found {}", rows.len())));
        };
        let f = |i| parse_cell::<f64>(row, i, "report");
        Ok(Self {
            lambda: f(0)?,
            rho: f(1)?,
            seed: parse_cell(row, 2, "report")?,
            n: parse_cell(row, 3, "report")?,
            system_accuracy: f(4)?,
            ai_accuracy: f(5)?,
            expert_accuracy: f(6)?,
            concept_accuracy: f(7)?,
            participation_ratio: f(8)?,
            strategy_counts: [
                parse_cell(row, 9, "report")?,
                parse_cell(row, 10, "report")?,
                parse_cell(row, 11, "report")?,
            ],
        })
    }
}

const CURVE_COLUMNS: [&str; 11] = [
    "lambda",
    "rho",
    "seed",
    "defer_only",
    "participation_ratio",
    "system_accuracy",
    "ai_accuracy",
    "expert_accuracy",
    "count_ai_only",
    "count_ai_human",
    "count_defer",
];

impl Emit for CoverageCurve {
    fn csv_columns(&self) -> Vec<String> {
        owned(&CURVE_COLUMNS)
    }

    fn to_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .points()
            .iter()
            .map(|p| {
                let mut row = vec![
                    fmt_f64(p.lambda),
                    fmt_f64(self.rho),
                    self.seed.to_string(),
                    self.defer_only.to_string(),
                    fmt_f64(p.participation_ratio),
                    fmt_f64(p.system_accuracy),
                    fmt_f64(p.ai_accuracy),
                    fmt_f64(p.expert_accuracy),
                ];
                row.extend(p.strategy_counts.iter().map(usize::to_string));
                row
            })
            .collect();
        write_table(&self.csv_columns(), &rows)
    }

    /// Run-level columns must agree across rows. An empty table cannot
    /// carry them and is rejected.
    fn from_csv(text: &str) -> Result<Self> {
        let rows = read_table(text, &owned(&CURVE_COLUMNS), "curve")?;
        let first = rows
            .first()
            .ok_or_else(|| Error::Parse("curve: no data rows".into()))?;
        let rho: f64 = parse_cell(first, 1, "curve")?;
        let seed: u64 = parse_cell(first, 2, "curve")?;
        let defer_only: bool = parse_cell(first, 3, "curve")?;
        let mut points = Vec::with_capacity(rows.len());
        for row in &rows {
            let same = parse_cell::<f64>(row, 1, "curve")?.to_bits() == rho.to_bits()
                && parse_cell::<u64>(row, 2, "curve")? == seed
                && parse_cell::<bool>(row, 3, "curve")? == defer_only;
            if !same {
                return Err(Error::Parse("curve: rows disagree on rho, seed or defer_only".into()));
            }
            let f = |i| parse_cell::<f64>(row, i, "curve");
            points.push(CoveragePoint {
                lambda: f(0)?,
                participation_ratio: f(4)?,
                system_accuracy: f(5)?,
                ai_accuracy: f(6)?,
                expert_accuracy: f(7)?,
                strategy_counts: [
                    parse_cell(row, 8, "curve")?,
                    parse_cell(row, 9, "curve")?,
                    parse_cell(row, 10, "curve")?,
                ],
            });
        }
        CoverageCurve::new(rho, seed, defer_only, points).map_err(|e| Error::Parse(format!("curve: {e}")))
    }
}

/// One row per strategy: `strategy`, `present`, then `concept_00..`.
impl Emit for ConceptStrategyHeatmap {
    fn csv_columns(&self) -> Vec<String> {
        let mut cols = owned(&["strategy", "present"]);
        cols.extend((0..self.num_concepts).map(|j| format!("concept_{j:02}")));
        cols
    }

    fn to_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = StrategyId::ALL
            .iter()
            .map(|&s| {
                let mut row = vec![s.name().to_string()];
                match self.row(s) {
                    Some(vals) => {
                        row.push("true".into());
                        row.extend(vals.iter().map(|&v| fmt_f64(v)));
                    }
                    None => {
                        row.push("false".into());
                        row.extend(std::iter::repeat_n(String::new(), self.num_concepts));
                    }
                }
                row
            })
            .collect();
        write_table(&self.csv_columns(), &rows)
    }

    fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let width = r.headers().map_err(csv_err)?.len();
        let num_concepts = width
            .checked_sub(2)
            .ok_or_else(|| Error::Parse("heatmap: too few columns".into()))?;
        let expected = ConceptStrategyHeatmap {
            rows: [None, None, None],
            num_concepts,
        }
        .csv_columns();
        let records = read_table(text, &expected, "heatmap")?;
        if records.len() != NUM_STRATEGIES {
            return Err(Error::Parse(format!("heatmap: expected 3 rows, found {}", records.len())));
        }
        let mut rows: [Option<Vec<f64>>; NUM_STRATEGIES] = [None, None, None];
        for (rec, &s) in records.iter().zip(StrategyId::ALL.iter()) {
            if rec.get(0) != Some(s.name()) {
                return Err(Error::Parse(format!("heatmap: expected row '{}'", s.name())));
            }
            if parse_cell::<bool>(rec, 1, "heatmap")? {
                rows[s.index()] = Some(
                    (0..num_concepts)
                        .map(|j| parse_cell(rec, j + 2, "heatmap"))
                        .collect::<Result<_>>()?,
                );
            }
        }
        Ok(Self { rows, num_concepts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            lambda: 0.1,
            rho: 0.3,
            seed: 7,
            n: 3,
            system_accuracy: 2.0 / 3.0,
            ai_accuracy: 1.0 / 3.0,
            expert_accuracy: 1.0,
            concept_accuracy: 0.123_456_789_012_345_68,
            participation_ratio: 2.0 / 3.0,
            strategy_counts: [1, 1, 1],
        }
    }

    fn curve() -> CoverageCurve {
        let p = |lambda: f64, pr: f64| CoveragePoint {
            lambda,
            participation_ratio: pr,
            system_accuracy: 1.0 / 7.0,
            ai_accuracy: std::f64::consts::PI / 4.0,
            expert_accuracy: 0.7,
            strategy_counts: [3, 2, 5],
        };
        CoverageCurve::new(0.3, 11, true, vec![p(0.0, 0.9), p(0.1, 0.5), p(10.0, 1e-300)]).unwrap()
    }

    fn heatmap() -> ConceptStrategyHeatmap {
        ConceptStrategyHeatmap {
            rows: [Some(vec![0.1, 1.0 / 3.0]), None, Some(vec![0.0, 1.0])],
            num_concepts: 2,
        }
    }

    fn round_trip<E: Emit + PartialEq + std::fmt::Debug>(item: &E) {
        for format in [OutputFormat::Csv, OutputFormat::Json] {
            let text = item.render(format).unwrap();
            assert_eq!(&E::parse(&text, format).unwrap(), item, "{format:?}");
        }
    }

    #[test]
    fn values_round_trip_exactly() {
        round_trip(&report());
        round_trip(&curve());
        round_trip(&heatmap());
        // 407/450 fails the default serde_json float parser by one ulp.
        round_trip(&EvalReport {
            concept_accuracy: 407.0 / 450.0,
            ..report()
        });
    }

    #[test]
    fn every_row_has_one_cell_per_column() {
        let check = |text: String, cols: usize| {
            for line in text.lines() {
                assert_eq!(line.split(',').count(), cols, "{line}");
            }
        };
        check(report().to_csv().unwrap(), report().csv_columns().len());
        check(curve().to_csv().unwrap(), curve().csv_columns().len());
        check(heatmap().to_csv().unwrap(), 4);
        assert_eq!(report().csv_columns().len(), 12);
        assert_eq!(curve().to_csv().unwrap().lines().count(), 4);
    }

    #[test]
    fn floats_use_seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.0), "0.0000000000000000e0");
        let line = report().to_csv().unwrap();
        assert!(line.lines().nth(1).unwrap().starts_with("1.0000000000000001e-1,"));
    }

    #[test]
    fn json_has_the_documented_fields() {
        let v: serde_json::Value = serde_json::from_str(&report().to_json().unwrap()).unwrap();
        let obj = v.as_object().unwrap();
        for key in [
            "lambda",
            "rho",
            "seed",
            "n",
            "system_accuracy",
            "ai_accuracy",
            "expert_accuracy",
            "concept_accuracy",
            "participation_ratio",
            "strategy_counts",
        ] {
            assert!(obj.contains_key(key), "{key}");
        }
        assert_eq!(obj.len(), 10);
        let c: serde_json::Value = serde_json::from_str(&curve().to_json().unwrap()).unwrap();
        assert_eq!(c["points"].as_array().unwrap().len(), 3);
        let h: serde_json::Value = serde_json::from_str(&heatmap().to_json().unwrap()).unwrap();
        assert!(h["rows"][1].is_null());
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(EvalReport::from_csv("lambda,rho\n1,2\n").is_err());
        let mut text = curve().to_csv().unwrap();
        text = text.replacen("1.0000000000000000e1", "0.0000000000000000e0", 1);
        assert!(CoverageCurve::from_csv(&text).is_err());
        assert!(matches!(EvalReport::from_json("{}"), Err(Error::Parse(_))));
    }

    #[test]
    fn files_are_written_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let format = OutputFormat::from_path(&path).unwrap();
        emit(&curve(), &path, format).unwrap();
        let back = CoverageCurve::parse(&fs::read_to_string(&path).unwrap(), format).unwrap();
        assert_eq!(back, curve());
        assert!(emit(&curve(), dir.path().join("missing/x.csv"), format).is_err());
        assert!(OutputFormat::from_path(Path::new("x.txt")).is_err());
    }
}
