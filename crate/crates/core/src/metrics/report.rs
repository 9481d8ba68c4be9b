use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Teacher-to-student parameter ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionRatio {
    pub value: f64,
    pub label: String,
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

pub fn compression_ratio(teacher: usize, student: usize) -> Result<CompressionRatio> {
    if student == 0 || teacher == 0 {
        return Err(Error::Contract(format!(
            "parameter counts must be positive (teacher {teacher}, student {student})"
        )));
    }
    let value = teacher as f64 / student as f64;
    Ok(CompressionRatio {
        value,
        label: format!("{}:1", value.round() as u64),
    })
}

pub const REPORT_HEADER: [&str; 8] = ["model_id", "d", "params", "is_mean", "is_std", "fid", "vol", "ratio"];

/// One evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub model_id: String,
    pub d: usize,
    pub params: usize,
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    pub fid: Option<f64>,
    pub vol: f64,
    pub ratio: String,
    #[serde(skip)]
    pub vol_ratio: Option<f64>,
}

#[derive(Serialize)]
struct VolRatioRow<'a> {
    model_id: &'a str,
    vol: f64,
    vol_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io("<csv>", e),
        other => Error::Metric(format!("csv encoding: {other:?}")),
    }
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl MetricsReport {
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        let present = [row.is_mean, row.is_std, row.fid, Some(row.vol), row.vol_ratio];
        if present.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metric(format!("non-finite metric for {}", row.model_id)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = writer();
        w.write_record(REPORT_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        finish(w)
    }

    /// Student-to-teacher VoL ratios, one row per model that has one.
    pub fn vol_ratio_csv(&self) -> Result<String> {
        let mut w = writer();
        w.write_record(["model_id", "vol", "vol_ratio"]).map_err(csv_err)?;
        for r in &self.rows {
            if let Some(vol_ratio) = r.vol_ratio {
                w.serialize(VolRatioRow {
                    model_id: &r.model_id,
                    vol: r.vol,
                    vol_ratio,
                })
                .map_err(csv_err)?;
            }
        }
        finish(w)
    }

    pub fn write(&self, report: &Path, vol_ratios: &Path) -> Result<()> {
        std::fs::write(report, self.to_csv()?).map_err(|e| Error::io(report, e))?;
        std::fs::write(vol_ratios, self.vol_ratio_csv()?).map_err(|e| Error::io(vol_ratios, e))
    }
}
