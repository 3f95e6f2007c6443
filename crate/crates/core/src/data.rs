//! Calibration/test dataset ingestion and nonconformity scoring.
//!
//! Files are CSV with a header row or a JSON array of objects. Columns named
//! `y`, `y_set`, `score`, `pred` and `group` are reserved; every other CSV
//! column is a feature. Weak labels are written as pipe-delimited candidate
//! lists (`y_set = 1|2|3`). A `score` column bypasses scoring entirely, and
//! a `pred` column holds the deployed model's prediction for the row so that
//! absolute-residual scores can be computed without the model itself.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};

const RESERVED: [&str; 5] = ["y", "y_set", "score", "pred", "group"];

/// A fitted model's prediction at a feature vector.
pub type Predictor<'a> = &'a dyn Fn(&[f64]) -> f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Strong(f64),
    /// Finite, nonempty set of candidate labels.
    Weak(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub label: Option<Label>,
    /// Pre-computed nonconformity score.
    pub score: Option<f64>,
    /// Model prediction at `x`.
    pub pred: Option<f64>,
    /// Subpopulation label for partition families.
    pub group: Option<String>,
}

impl LabeledPoint {
    pub fn strong(x: Vec<f64>, y: f64) -> Self {
        LabeledPoint { x, label: Some(Label::Strong(y)), score: None, pred: None, group: None }
    }

    pub fn weak(x: Vec<f64>, w: Vec<f64>) -> Self {
        LabeledPoint { x, label: Some(Label::Weak(w)), score: None, pred: None, group: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Calibration,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub index: usize,
    /// Higher means worse model error.
    pub score: f64,
    pub origin: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Guess from the file extension; anything other than `.json` is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub role: Role,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(points: Vec<LabeledPoint>, role: Role) -> Result<Self> {
        let dim = points.first().map(|p| p.x.len()).unwrap_or(0);
        let feature_names = (0..dim).map(|j| format!("x{j}")).collect();
        Self::with_names(points, role, feature_names)
    }

    pub fn with_names(points: Vec<LabeledPoint>, role: Role, feature_names: Vec<String>) -> Result<Self> {
        if points.is_empty() {
            return precondition("dataset is empty");
        }
        for (row, p) in points.iter().enumerate() {
            if p.x.len() != feature_names.len() {
                return Err(Error::MalformedInput {
                    row: row + 1,
                    message: format!("expected {} features, found {}", feature_names.len(), p.x.len()),
                });
            }
            if let Some(Label::Weak(w)) = &p.label {
                if w.is_empty() {
                    return Err(Error::MalformedInput { row: row + 1, message: "empty weak label set".into() });
                }
            }
            if p.label.is_none() && p.score.is_none() {
                return Err(Error::MalformedInput {
                    row: row + 1,
                    message: "row has neither a label (`y`/`y_set`) nor a `score`".into(),
                });
            }
        }
        Ok(Dataset { points, role, feature_names })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.x.clone()).collect()
    }

    /// Group labels, if every row carries one.
    pub fn groups(&self) -> Option<Vec<String>> {
        self.points.iter().map(|p| p.group.clone()).collect()
    }

    /// Nonconformity scores for every row, in row order.
    ///
    /// A row's `score` column wins; otherwise the absolute residual (or the
    /// weak-label min-score) is computed against `predict` when given, or
    /// against the row's `pred` column.
    pub fn scores(&self, predict: Option<Predictor<'_>>) -> Result<Vec<ScoreSample>> {
        self.points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let score = match (p.score, &p.label) {
                    (Some(s), _) => s,
                    (None, Some(label)) => {
                        let prediction = match (predict, p.pred) {
                            (Some(f), _) => f(&p.x),
                            (None, Some(v)) => v,
                            (None, None) => {
                                return Err(Error::MalformedInput {
                                    row: index + 1,
                                    message: "no `score`, `pred` or predictor available".into(),
                                })
                            }
                        };
                        let residual = |_: &[f64], y: f64| residual_score_value(y, prediction);
                        match label {
                            Label::Strong(y) => residual(&p.x, *y)?,
                            Label::Weak(w) => min_score(&p.x, w, residual)?,
                        }
                    }
                    (None, None) => unreachable!("validated at construction"),
                };
                if !score.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score at row {}", index + 1)));
                }
                Ok(ScoreSample { index, score, origin: self.role })
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.feature_names.clone();
        header.extend(RESERVED.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.x.iter().map(|v| format_f64(*v)).collect();
            match &p.label {
                Some(Label::Strong(y)) => {
                    rec.push(format_f64(*y));
                    rec.push(String::new());
                }
                Some(Label::Weak(ws)) => {
                    rec.push(String::new());
                    rec.push(ws.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join("|"));
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
            rec.push(p.score.map(format_f64).unwrap_or_default());
            rec.push(p.pred.map(format_f64).unwrap_or_default());
            rec.push(p.group.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<JsonRow> = self
            .points
            .iter()
            .map(|p| {
                let (y, y_set) = match &p.label {
                    Some(Label::Strong(y)) => (Some(*y), None),
                    Some(Label::Weak(w)) => (None, Some(w.clone())),
                    None => (None, None),
                };
                JsonRow { x: p.x.clone(), y, y_set: y_set.map(YSet::List), score: p.score, pred: p.pred, group: p.group.clone() }
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }
}

/// `format!("{}")` prints the shortest representation that round-trips.
fn format_f64(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    #[serde(default)]
    x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_set: Option<YSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum YSet {
    List(Vec<f64>),
    Delimited(String),
}

pub fn load_dataset(path: &Path, format: Format, role: Role) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_dataset(&text, format, role)
}

pub fn parse_dataset(text: &str, format: Format, role: Role) -> Result<Dataset> {
    match format {
        Format::Csv => parse_csv(text, role),
        Format::Json => parse_json(text, role),
    }
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::MalformedInput {
        row,
        message: format!("column `{column}`: cannot parse `{cell}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::MalformedInput { row, message: format!("column `{column}`: non-finite value") });
    }
    Ok(v)
}

fn parse_weak_set(cell: &str, row: usize) -> Result<Vec<f64>> {
    let set = cell
        .split('|')
        .map(|c| parse_number(c, row, "y_set"))
        .collect::<Result<Vec<_>>>()?;
    if set.is_empty() {
        return Err(Error::MalformedInput { row, message: "empty weak label set".into() });
    }
    Ok(set)
}

fn label_from(y: Option<f64>, y_set: Option<Vec<f64>>, row: usize) -> Result<Option<Label>> {
    match (y, y_set) {
        (Some(_), Some(_)) => Err(Error::MalformedInput { row, message: "row has both `y` and `y_set`".into() }),
        (Some(y), None) => Ok(Some(Label::Strong(y))),
        (None, Some(w)) => Ok(Some(Label::Weak(w))),
        (None, None) => Ok(None),
    }
}

fn parse_csv(text: &str, role: Role) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::MalformedInput { row: 0, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::MalformedInput { row: 0, message: "missing header".into() });
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let (y_col, set_col, score_col, pred_col, group_col) = (col("y"), col("y_set"), col("score"), col("pred"), col("group"));
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&j| !RESERVED.contains(&header[j].as_str())).collect();
    let feature_names = feature_cols.iter().map(|&j| header[j].clone()).collect();

    let mut points = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::MalformedInput { row, message: e.to_string() })?;
        let cell = |j: Option<usize>| j.and_then(|j| rec.get(j)).filter(|c| !c.is_empty());
        let x = feature_cols
            .iter()
            .map(|&j| parse_number(rec.get(j).unwrap_or(""), row, &header[j]))
            .collect::<Result<Vec<_>>>()?;
        let y = cell(y_col).map(|c| parse_number(c, row, "y")).transpose()?;
        let y_set = cell(set_col).map(|c| parse_weak_set(c, row)).transpose()?;
        let score = cell(score_col).map(|c| parse_number(c, row, "score")).transpose()?;
        let pred = cell(pred_col).map(|c| parse_number(c, row, "pred")).transpose()?;
        let group = cell(group_col).map(str::to_string);
        points.push(LabeledPoint { x, label: label_from(y, y_set, row)?, score, pred, group });
    }
    Dataset::with_names(points, role, feature_names)
}

fn parse_json(text: &str, role: Role) -> Result<Dataset> {
    let rows: Vec<JsonRow> = serde_json::from_str(text).map_err(|e| Error::MalformedInput { row: e.line(), message: e.to_string() })?;
    let mut points = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let row = i + 1;
        let y_set = match r.y_set {
            None => None,
            Some(YSet::List(v)) if v.is_empty() => {
                return Err(Error::MalformedInput { row, message: "empty weak label set".into() })
            }
            Some(YSet::List(v)) => Some(v),
            Some(YSet::Delimited(s)) => Some(parse_weak_set(&s, row)?),
        };
        points.push(LabeledPoint { x: r.x, label: label_from(r.y, y_set, row)?, score: r.score, pred: r.pred, group: r.group });
    }
    Dataset::new(points, role)
}

/// Absolute residual `|y - predict(x)|`.
pub fn residual_score(x: &[f64], y: f64, predict: impl Fn(&[f64]) -> f64) -> Result<f64> {
    residual_score_value(y, predict(x))
}

fn residual_score_value(y: f64, prediction: f64) -> Result<f64> {
    if !prediction.is_finite() {
        return Err(Error::Numeric(format!("non-finite prediction {prediction}")));
    }
    Ok((y - prediction).abs())
}

/// Most optimistic score over a weak label set: `min_{y in w} score_fn(x, y)`.
pub fn min_score(x: &[f64], w: &[f64], score_fn: impl Fn(&[f64], f64) -> Result<f64>) -> Result<f64> {
    if w.is_empty() {
        return precondition("weak label set is empty");
    }
    let mut best = f64::INFINITY;
    for &y in w {
        let s = score_fn(x, y)?;
        if s < best {
            best = s;
        }
    }
    Ok(best)
}
