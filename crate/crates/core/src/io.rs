//! File formats: dataset directories, header-less matrix CSVs and full-precision JSON.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, SubjectDataset};
use crate::error::{CocregError, Result};

/// Serializes a `DVector` as a plain JSON array.
pub mod serde_dvector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serializes a `DMatrix` as an array of rows.
pub mod serde_dmatrix {
    use nalgebra::DMatrix;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        s.collect_seq(rows)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::matrix_from_rows(&rows).map_err(D::Error::custom)
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// JSON formatter writing floats in shortest round-trip form and non-finite values as `null`.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if value.is_finite() {
            write!(writer, "{:?}", value)
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = to_json_string(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    CocregError::Validation(format!("{}: row {}: cannot parse `{f}`", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CocregError::Validation(format!("{}: empty matrix file", path.display())));
    }
    matrix_from_rows(&rows).map_err(|e| CocregError::Validation(format!("{}: {e}", path.display())))
}

fn format_float(x: f64) -> String {
    format!("{:?}", x)
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in m.row_iter() {
        wtr.write_record(r.iter().map(|x| format_float(*x)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a table with a header row; float cells use full precision, `None` becomes `NA`.
pub fn write_table_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(row.iter().map(Cell::render))?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(Option<f64>),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(Some(x)) if x.is_finite() => format_float(*x),
            Cell::Float(_) => "NA".into(),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(Some(x))
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

/// `manifest.json`: subject directories, relative to the dataset root, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads a dataset directory into a validated cohort.
pub fn read_dataset(root: &Path) -> Result<Cohort> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CocregError::Validation(format!("missing {}", manifest_path.display())));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for name in &manifest.subjects {
        let dir = root.join(name);
        let x = read_matrix_csv(&dir.join("X.csv"))?;
        let y = read_matrix_csv(&dir.join("Y.csv"))?;
        let w = read_matrix_csv(&dir.join("w.csv"))?;
        if w.nrows() != 1 {
            return Err(CocregError::Validation(format!(
                "{}: w.csv must contain a single row",
                dir.display()
            )));
        }
        let w = DVector::from_iterator(w.ncols(), w.row(0).iter().copied());
        subjects.push(SubjectDataset::new(name.clone(), x, y, w)?);
    }
    Cohort::new(subjects)
}

/// Writes a cohort in the dataset-directory layout; subject directories are named by subject id.
pub fn write_dataset(root: &Path, cohort: &Cohort) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut names = Vec::new();
    for s in cohort.subjects() {
        let dir: PathBuf = root.join(&s.subject_id);
        fs::create_dir_all(&dir)?;
        write_matrix_csv(&dir.join("X.csv"), &s.x)?;
        write_matrix_csv(&dir.join("Y.csv"), &s.y)?;
        write_matrix_csv(&dir.join("w.csv"), &DMatrix::from_row_slice(1, s.w.len(), s.w.as_slice()))?;
        names.push(s.subject_id.clone());
    }
    write_json(&root.join(MANIFEST_FILE), &Manifest { subjects: names })
}

/// Writes rows of floats to a gzip-compressed CSV with a header.
pub fn write_gz_csv(path: &Path, header: &[String], rows: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path)?;
    let gz = flate2::write::GzEncoder::new(BufWriter::new(file), flate2::Compression::default());
    let mut wtr = csv::Writer::from_writer(gz);
    wtr.write_record(header)?;
    for r in rows.row_iter() {
        wtr.write_record(r.iter().map(|x| format_float(*x)))?;
    }
    let gz = wtr.into_inner().map_err(|e| CocregError::Io(e.into_error()))?;
    gz.finish()?.flush()?;
    Ok(())
}
