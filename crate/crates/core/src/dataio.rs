//! CSV ingestion, preprocessing, and the on-disk formats for PU datasets,
//! test sets, and models.
//!
//! Continuous columns are min-max scaled to `[-1, 1]` (a constant column maps
//! to 0); categorical columns are one-hot expanded in place, one column per
//! value in first-seen order. A schema file lists one `name:kind` line per CSV
//! column, where kind is `continuous`, `categorical`, `label` (values `0`/`1`)
//! or `label=<positive value>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::glm;
use crate::types::{LabeledDataset, LinearModel, PuDataset};

pub const PU_MAGIC: &str = "sarpu-pu-v1";
pub const TEST_MAGIC: &str = "sarpu-test-v1";
pub const MODEL_MAGIC: &str = "sarpu-model-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnKind {
    Continuous,
    Categorical,
    /// `None` means the column already holds `0`/`1`.
    Label(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, kind) = line
                .rsplit_once(':')
                .ok_or_else(|| Error::parse(i + 1, format!("expected name:kind, got {line:?}")))?;
            let kind = match kind.trim() {
                "continuous" => ColumnKind::Continuous,
                "categorical" => ColumnKind::Categorical,
                "label" => ColumnKind::Label(None),
                k => match k.strip_prefix("label=") {
                    Some(pos) => ColumnKind::Label(Some(pos.to_string())),
                    None => return Err(Error::parse(i + 1, format!("unknown column kind {k:?}"))),
                },
            };
            columns.push((name.trim().to_string(), kind));
        }
        let labels = columns
            .iter()
            .filter(|(_, k)| matches!(k, ColumnKind::Label(_)))
            .count();
        if labels != 1 {
            return Err(Error::InvalidArgument(format!(
                "schema must have exactly one label column, found {labels}"
            )));
        }
        Ok(Self { columns })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn label_index(&self) -> usize {
        self.columns
            .iter()
            .position(|(_, k)| matches!(k, ColumnKind::Label(_)))
            .expect("validated at parse time")
    }
}

/// Raw string cells with the schema they follow.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub schema: Schema,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read(path: &Path, schema: &Schema) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let expected: Vec<&str> = schema.columns.iter().map(|(n, _)| n.as_str()).collect();
        if header != expected {
            return Err(Error::InvalidArgument(format!(
                "CSV header {header:?} does not match schema columns {expected:?}"
            )));
        }
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self {
            schema: schema.clone(),
            rows,
        })
    }

    pub fn labels(&self) -> Result<Vec<u8>> {
        let j = self.schema.label_index();
        let ColumnKind::Label(pos) = &self.schema.columns[j].1 else {
            unreachable!()
        };
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| match pos {
                Some(p) => Ok(u8::from(&row[j] == p)),
                None => match row[j].as_str() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    v => Err(Error::parse(i + 2, format!("label {v:?} is not 0 or 1"))),
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnTransform {
    Continuous { min: f64, max: f64 },
    Categorical { levels: Vec<String> },
}

/// Per-column preprocessing fitted on training rows and reusable on others.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    /// Source CSV column index and its transform, in output order.
    pub transforms: Vec<(usize, ColumnTransform)>,
}

fn parse_cell(value: &str, line: usize) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(line, format!("cannot parse {value:?} as a number")))
}

fn scale(value: f64, min: f64, max: f64) -> f64 {
    if max > min {
        2.0 * (value - min) / (max - min) - 1.0
    } else {
        0.0
    }
}

impl Preprocessor {
    /// Fit scaling ranges and category levels on the rows listed in `rows`.
    pub fn fit(table: &RawTable, rows: &[usize]) -> Result<Self> {
        let mut transforms = Vec::new();
        for (j, (_, kind)) in table.schema.columns.iter().enumerate() {
            match kind {
                ColumnKind::Label(_) => {}
                ColumnKind::Continuous => {
                    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                    for &i in rows {
                        let v = parse_cell(&table.rows[i][j], i + 2)?;
                        min = min.min(v);
                        max = max.max(v);
                    }
                    transforms.push((j, ColumnTransform::Continuous { min, max }));
                }
                ColumnKind::Categorical => {
                    let mut levels: Vec<String> = Vec::new();
                    for &i in rows {
                        let v = &table.rows[i][j];
                        if !levels.contains(v) {
                            levels.push(v.clone());
                        }
                    }
                    transforms.push((j, ColumnTransform::Categorical { levels }));
                }
            }
        }
        Ok(Self { transforms })
    }

    pub fn output_width(&self) -> usize {
        self.transforms
            .iter()
            .map(|(_, t)| match t {
                ColumnTransform::Continuous { .. } => 1,
                ColumnTransform::Categorical { levels } => levels.len(),
            })
            .sum()
    }

    /// Transform the listed rows. Returns the features and the number of
    /// categorical cells whose value was not seen during fitting.
    pub fn transform(&self, table: &RawTable, rows: &[usize]) -> Result<(Array2<f64>, usize)> {
        let mut out = Array2::zeros((rows.len(), self.output_width()));
        let mut unknown = 0;
        for (r, &i) in rows.iter().enumerate() {
            let mut col = 0;
            for (j, t) in &self.transforms {
                let cell = &table.rows[i][*j];
                match t {
                    ColumnTransform::Continuous { min, max } => {
                        out[[r, col]] = scale(parse_cell(cell, i + 2)?, *min, *max);
                        col += 1;
                    }
                    ColumnTransform::Categorical { levels } => {
                        match levels.iter().position(|l| l == cell) {
                            Some(k) => out[[r, col + k]] = 1.0,
                            None => unknown += 1,
                        }
                        col += levels.len();
                    }
                }
            }
        }
        if unknown > 0 {
            log::warn!("{unknown} categorical values were unseen during fitting and map to all zeros");
        }
        Ok((out, unknown))
    }

    /// Map a scaled value of output column `col` back to its original units.
    /// Returns `None` for one-hot columns.
    pub fn inverse_scale(&self, col: usize, value: f64) -> Option<f64> {
        let mut start = 0;
        for (_, t) in &self.transforms {
            match t {
                ColumnTransform::Continuous { min, max } => {
                    if start == col {
                        return Some(if max > min {
                            (value + 1.0) / 2.0 * (max - min) + min
                        } else {
                            *min
                        });
                    }
                    start += 1;
                }
                ColumnTransform::Categorical { levels } => {
                    if col < start + levels.len() {
                        return None;
                    }
                    start += levels.len();
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub data: LabeledDataset,
    pub preprocessor: Preprocessor,
    pub unknown_categories: usize,
}

/// Load a CSV and preprocess it with statistics fitted on all of its rows.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<LoadedCsv> {
    let table = RawTable::read(path, schema)?;
    let rows: Vec<usize> = (0..table.rows.len()).collect();
    load_csv_with(&table, &rows, &rows)
}

/// Fit on `fit_rows` of `table` and transform `rows`.
pub fn load_csv_with(table: &RawTable, fit_rows: &[usize], rows: &[usize]) -> Result<LoadedCsv> {
    let preprocessor = Preprocessor::fit(table, fit_rows)?;
    let (features, unknown_categories) = preprocessor.transform(table, rows)?;
    let labels = table.labels()?;
    let classes = rows.iter().map(|&i| labels[i]).collect();
    Ok(LoadedCsv {
        data: LabeledDataset::new(features, classes)?,
        preprocessor,
        unknown_categories,
    })
}

/// Min-max scale every column of `features` to `[-1, 1]`. Returns the scaled
/// matrix and the `(min, max)` of each column.
pub fn min_max_scale(features: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<(f64, f64)>) {
    let ranges: Vec<(f64, f64)> = features
        .columns()
        .into_iter()
        .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
        .collect();
    let scaled = Array2::from_shape_fn(features.raw_dim(), |(i, j)| {
        scale(features[[i, j]], ranges[j].0, ranges[j].1)
    });
    (scaled, ranges)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_table(
    magic: &str,
    features: ArrayView2<'_, f64>,
    propensity_attrs: &[usize],
    int_columns: &[(&str, &[u8])],
    float_columns: &[(&str, &[f64])],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{magic}");
    let idx: Vec<String> = propensity_attrs.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(out, "propensity_attrs\t{}", idx.join(","));
    let mut header: Vec<String> = (0..features.ncols()).map(|j| format!("x{j}")).collect();
    header.extend(int_columns.iter().map(|(n, _)| n.to_string()));
    header.extend(float_columns.iter().map(|(n, _)| n.to_string()));
    let _ = writeln!(out, "{}", header.join("\t"));
    for (i, row) in features.rows().into_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        cells.extend(int_columns.iter().map(|(_, c)| c[i].to_string()));
        cells.extend(float_columns.iter().map(|(_, c)| fmt_f64(c[i])));
        let _ = writeln!(out, "{}", cells.join("\t"));
    }
    out
}

struct ParsedTable {
    features: Array2<f64>,
    propensity_attrs: Vec<usize>,
    extra: HashMap<String, Vec<f64>>,
}

fn read_table(text: &str, magic: &str, allowed: &[&str]) -> Result<ParsedTable> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, m)) if m == magic => {}
        Some((_, m)) => {
            return Err(Error::VersionMismatch(format!("expected {magic:?}, found {m:?}")));
        }
        None => return Err(Error::VersionMismatch("empty file".into())),
    }
    let (n, attrs_line) = lines.next().ok_or_else(|| Error::parse(2, "missing propensity_attrs line"))?;
    let attrs = attrs_line
        .strip_prefix("propensity_attrs\t")
        .or_else(|| (attrs_line == "propensity_attrs").then_some(""))
        .ok_or_else(|| Error::parse(n + 1, "expected propensity_attrs line"))?;
    let propensity_attrs = attrs
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::parse(n + 1, format!("bad index {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let (n, header_line) = lines.next().ok_or_else(|| Error::parse(3, "missing header"))?;
    let header: Vec<&str> = header_line.split('\t').collect();
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    for (j, h) in header[..d].iter().enumerate() {
        if *h != format!("x{j}") {
            return Err(Error::parse(n + 1, format!("unexpected feature column {h:?}")));
        }
    }
    let extras: Vec<&str> = header[d..].to_vec();
    for name in &extras {
        if !allowed.contains(name) {
            return Err(Error::parse(n + 1, format!("unexpected column {name:?}")));
        }
    }
    let mut values = Vec::new();
    let mut extra: HashMap<String, Vec<f64>> = extras.iter().map(|e| (e.to_string(), Vec::new())).collect();
    let mut rows = 0;
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(Error::parse(
                n + 1,
                format!("expected {} fields, found {}", header.len(), cells.len()),
            ));
        }
        for (k, cell) in cells.iter().enumerate() {
            let v = cell
                .parse::<f64>()
                .map_err(|_| Error::parse(n + 1, format!("bad number {cell:?}")))?;
            if k < d {
                values.push(v);
            } else {
                extra.get_mut(extras[k - d]).expect("declared column").push(v);
            }
        }
        rows += 1;
    }
    let features = Array2::from_shape_vec((rows, d), values).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(ParsedTable {
        features,
        propensity_attrs,
        extra,
    })
}

fn to_binary(values: &[f64], column: &str) -> Result<Vec<u8>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(Error::parse(i + 4, format!("column {column} holds non-binary value {v}"))),
        })
        .collect()
}

pub fn pu_to_text(pu: &PuDataset) -> String {
    let mut ints: Vec<(&str, &[u8])> = vec![("s", pu.observed())];
    if let Some(y) = pu.hidden_classes() {
        ints.push(("y", y));
    }
    let floats: Vec<(&str, &[f64])> = pu.true_propensity().map(|e| ("e", e)).into_iter().collect();
    write_table(PU_MAGIC, pu.features(), pu.propensity_attr_indices(), &ints, &floats)
}

pub fn pu_from_text(text: &str) -> Result<PuDataset> {
    let mut t = read_table(text, PU_MAGIC, &["s", "y", "e"])?;
    let s = t
        .extra
        .remove("s")
        .ok_or_else(|| Error::MissingData("PU file has no s column".into()))?;
    let mut pu = PuDataset::new(t.features, to_binary(&s, "s")?)?;
    if let Some(y) = t.extra.remove("y") {
        pu = pu.with_hidden_classes(to_binary(&y, "y")?)?;
    }
    if let Some(e) = t.extra.remove("e") {
        pu = pu.with_true_propensity(e)?;
    }
    Ok(pu.with_propensity_attrs(t.propensity_attrs))
}

pub fn save_pu(path: &Path, pu: &PuDataset) -> Result<()> {
    fs::write(path, pu_to_text(pu))?;
    Ok(())
}

pub fn load_pu(path: &Path) -> Result<PuDataset> {
    pu_from_text(&fs::read_to_string(path)?)
}

/// A supervised test set, optionally with the true propensity of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub data: LabeledDataset,
    pub propensity: Option<Vec<f64>>,
    pub propensity_attrs: Vec<usize>,
}

pub fn test_to_text(test: &TestSet) -> String {
    let ints: Vec<(&str, &[u8])> = vec![("y", test.data.classes())];
    let floats: Vec<(&str, &[f64])> = test.propensity.as_deref().map(|e| ("e", e)).into_iter().collect();
    write_table(TEST_MAGIC, test.data.features(), &test.propensity_attrs, &ints, &floats)
}

pub fn test_from_text(text: &str) -> Result<TestSet> {
    let mut t = read_table(text, TEST_MAGIC, &["y", "e"])?;
    let y = t
        .extra
        .remove("y")
        .ok_or_else(|| Error::MissingData("test file has no y column".into()))?;
    Ok(TestSet {
        data: LabeledDataset::new(t.features, to_binary(&y, "y")?)?,
        propensity: t.extra.remove("e"),
        propensity_attrs: t.propensity_attrs,
    })
}

pub fn save_test(path: &Path, test: &TestSet) -> Result<()> {
    fs::write(path, test_to_text(test))?;
    Ok(())
}

pub fn load_test(path: &Path) -> Result<TestSet> {
    test_from_text(&fs::read_to_string(path)?)
}

/// A linear model plus the feature columns it reads (`None`: all columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: LinearModel,
    pub columns: Option<Vec<usize>>,
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_MAGIC}\n");
        if let Some(cols) = &self.columns {
            let cols: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "columns\t{}", cols.join(","));
        }
        out.push_str(&glm::model_to_text(&self.model));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = match text.split_once('\n') {
            Some((MODEL_MAGIC, rest)) => rest,
            _ => {
                let first = text.lines().next().unwrap_or("");
                return Err(Error::VersionMismatch(format!("expected {MODEL_MAGIC:?}, found {first:?}")));
            }
        };
        let (columns, body) = match body.strip_prefix("columns\t") {
            Some(rest) => {
                let (line, rest) = rest.split_once('\n').unwrap_or((rest, ""));
                let cols = line
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| Error::parse(2, format!("bad column {s:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                (Some(cols), rest)
            }
            None => (None, body),
        };
        Ok(Self {
            model: glm::model_from_text(body)?,
            columns,
        })
    }

    /// Feature matrix this model reads from `features`.
    pub fn select(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match &self.columns {
            None => Ok(features.to_owned()),
            Some(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= features.ncols()) {
                    return Err(Error::DimensionMismatch {
                        expected: bad + 1,
                        found: features.ncols(),
                    });
                }
                Ok(features.select(ndarray::Axis(1), cols))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
