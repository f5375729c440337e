//! File formats for FC matrices, parcellations and cohort manifests.
//!
//! * FC matrix: plain CSV (`R` rows of `R` comma-separated values) or binary:
//!   the 8-byte magic `FCMAT001`, `R` as little-endian `u32`, then `R*R`
//!   little-endian `f64` values in row-major order.
//! * Parcellation: one `region_index,network_id` line per region, zero-based,
//!   in matrix order.
//! * Cohort manifest: CSV with header `subject_id,fc_path,age,sex,<targets...>`.
//!   Relative `fc_path`s resolve against the manifest's directory.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Cohort, Confounds, FcMatrix, Parcellation, Subject};
use crate::error::{Error, Result};

pub const FC_MAGIC: &[u8; 8] = b"FCMAT001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FcFormat {
    Csv,
    #[default]
    Binary,
}

impl FcFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FcFormat::Csv => "csv",
            FcFormat::Binary => "fcmat",
        }
    }
}

impl std::str::FromStr for FcFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FcFormat::Csv),
            "binary" | "bin" => Ok(FcFormat::Binary),
            _ => Err(Error::Config(format!("unknown FC format `{s}` (expected csv|binary)"))),
        }
    }
}

pub fn encode_fc_binary(fc: &FcMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + fc.as_slice().len() * 8);
    out.extend_from_slice(FC_MAGIC);
    out.extend_from_slice(&(fc.size() as u32).to_le_bytes());
    for v in fc.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fc_binary(bytes: &[u8]) -> Result<FcMatrix> {
    if bytes.len() < 12 || &bytes[..8] != FC_MAGIC {
        return Err(Error::Corrupt("missing FCMAT001 header".into()));
    }
    let r = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != r * r * 8 {
        return Err(Error::Corrupt(format!(
            "binary FC of size {r} needs {} payload bytes, found {}",
            r * r * 8,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FcMatrix::new(r, values)
}

pub fn parse_fc_csv(text: &str) -> Result<FcMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {i}: cannot parse `{f}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    FcMatrix::from_rows(&rows)
}

pub fn format_fc_csv(fc: &FcMatrix) -> String {
    let r = fc.size();
    let mut out = String::with_capacity(r * r * 8);
    for i in 0..r {
        let line: Vec<String> = fc.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Reads either FC format, detected by the binary magic.
pub fn read_fc(path: &Path) -> Result<FcMatrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FC_MAGIC) {
        return decode_fc_binary(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{}: not UTF-8 CSV", path.display())))?;
    parse_fc_csv(&text)
}

pub fn write_fc(path: &Path, fc: &FcMatrix, format: FcFormat) -> Result<()> {
    let bytes = match format {
        FcFormat::Csv => format_fc_csv(fc).into_bytes(),
        FcFormat::Binary => encode_fc_binary(fc),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_parcellation(path: &Path) -> Result<Parcellation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_parcellation(&text)
}

pub fn parse_parcellation(text: &str) -> Result<Parcellation> {
    let mut assignment = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split([',', '\t', ' ', ';']).filter(|f| !f.is_empty());
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(Error::Data(format!("parcellation line {}: expected two fields", lineno + 1)));
        };
        let (Ok(region), Ok(net)) = (a.parse::<usize>(), b.parse::<usize>()) else {
            if assignment.is_empty() {
                // Header line.
                continue;
            }
            return Err(Error::Data(format!("parcellation line {}: non-integer field", lineno + 1)));
        };
        if region != assignment.len() {
            return Err(Error::Data(format!(
                "parcellation line {}: region {region} out of order (expected {})",
                lineno + 1,
                assignment.len()
            )));
        }
        assignment.push(net);
    }
    Parcellation::new(assignment)
}

pub fn format_parcellation(parc: &Parcellation) -> String {
    parc.assignment()
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i},{n}\n"))
        .collect()
}

pub fn write_parcellation(path: &Path, parc: &Parcellation) -> Result<()> {
    fs::write(path, format_parcellation(parc)).map_err(|e| Error::io(path, e))
}

/// Reads a cohort manifest and every FC file it references.
pub fn read_cohort(manifest: &Path) -> Result<Cohort> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let expected = ["subject_id", "fc_path", "age", "sex"];
    if headers.len() < 4 || headers.iter().take(4).ne(expected.iter().copied()) {
        return Err(Error::Data(format!(
            "{}: manifest header must start with subject_id,fc_path,age,sex",
            manifest.display()
        )));
    }
    let target_names: Vec<String> = headers.iter().skip(4).map(str::to_owned).collect();
    let mut subjects = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "manifest row {}: column `{}` is not a number: `{}`",
                    row + 1,
                    &headers[i],
                    field(i)
                ))
            })
        };
        let sex = match field(3) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!("manifest row {}: sex must be 0 or 1, got `{other}`", row + 1)))
            }
        };
        let fc_path = resolve(&base, field(1));
        let fc = read_fc(&fc_path)?;
        let targets = (4..headers.len()).map(num).collect::<Result<Vec<_>>>()?;
        subjects.push(Subject {
            id: field(0).to_owned(),
            fc,
            confounds: Confounds { age: num(2)?, sex },
            targets,
        });
    }
    Cohort::new(target_names, subjects)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes `dir/cohort.csv` plus one FC file per subject under `dir/fc/`.
/// Returns the manifest path.
pub fn write_cohort(dir: &Path, cohort: &Cohort, format: FcFormat) -> Result<PathBuf> {
    let fc_dir = dir.join("fc");
    fs::create_dir_all(&fc_dir).map_err(|e| Error::io(&fc_dir, e))?;
    let manifest = dir.join("cohort.csv");
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["subject_id".to_owned(), "fc_path".into(), "age".into(), "sex".into()];
    header.extend(cohort.target_names().iter().cloned());
    w.write_record(&header)?;
    for s in cohort.subjects() {
        let rel = format!("fc/{}.{}", s.id, format.extension());
        write_fc(&dir.join(&rel), &s.fc, format)?;
        let mut rec = vec![s.id.clone(), rel, s.confounds.age.to_string(), s.confounds.sex.to_string()];
        rec.extend(s.targets.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(&manifest, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
