//! Point datasets and their CSV form.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Array2<f64>,
    pub split: Split,
}

impl Dataset {
    pub fn new(points: Array2<f64>, split: Split) -> Self {
        Self { points, split }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_points_csv(path, self.points.view())
    }

    pub fn read_csv(path: &Path, split: Split) -> Result<Self> {
        Ok(Self::new(read_points_csv(path)?, split))
    }
}

/// Header `x0,x1,...`, one row per point.
pub fn write_points_csv(path: &Path, points: ArrayView2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..points.ncols()).map(|j| format!("x{j}")))?;
    for row in points.axis_iter(Axis(0)) {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len();
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != dim {
            return Err(Error::Schema(format!("{}: ragged row {}", path.display(), rows + 1)));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("{}: bad number {field:?}", path.display())))?;
            flat.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), flat).map_err(|e| Error::Schema(e.to_string()))
}

/// Sidecar for a sample dump CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub steps: usize,
    pub count: usize,
    pub dim: usize,
    pub model_hash: String,
}

/// Writes `points` to `csv_path` and the metadata next to it as `<stem>.json`.
pub fn write_sample_dump(csv_path: &Path, points: ArrayView2<f64>, meta: &SampleMeta) -> Result<()> {
    write_points_csv(csv_path, points)?;
    crate::io::write_json(&csv_path.with_extension("json"), meta)
}
