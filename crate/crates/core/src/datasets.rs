//! Synthetic fragmented-hypercube generation and CSV point-cloud ingestion.
//!
//! The generator draws the source cloud uniformly from `[−1, 1]^d` and pushes
//! an independent uniform sample through `P(y) = y + 2·sign(y)` applied to
//! the first `k*` coordinates, so the optimal displacement lives in a
//! `k*`-dimensional subspace. All randomness comes from a counter-based
//! ChaCha stream seeded explicitly, and matrices are filled column by column
//! (one point at a time), so a seed reproduces the same instance everywhere.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{PrwError, Result};
use crate::transport::PrwInstance;

/// Parameters of a fragmented-hypercube instance.
#[derive(Debug, Clone, Copy)]
pub struct HypercubeSpec {
    /// Points per measure.
    pub n: usize,
    /// Ambient dimension.
    pub d: usize,
    /// Number of fragmented coordinates; also the default projection rank.
    pub k_star: usize,
    pub seed: u64,
}

impl HypercubeSpec {
    pub fn new(n: usize, d: usize, k_star: usize, seed: u64) -> Result<Self> {
        if n < 1 {
            return Err(PrwError::InvalidArgument("need n >= 1".into()));
        }
        if k_star < 1 || k_star > d {
            return Err(PrwError::InvalidArgument(format!(
                "need 1 <= k_star <= d, got k_star={k_star}, d={d}"
            )));
        }
        Ok(Self { n, d, k_star, seed })
    }
}

/// Generates the instance: X uniform on the cube, Y an independent uniform
/// sample with `2·sign(y_j)` added to coordinates `j < k*` (`sign(0) = 0`),
/// uniform weights, and projection rank `k*`.
pub fn fragmented_hypercube(spec: &HypercubeSpec) -> Result<PrwInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = DMatrix::<f64>::zeros(spec.d, spec.n);
    for j in 0..spec.n {
        for i in 0..spec.d {
            x[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let mut y = DMatrix::<f64>::zeros(spec.d, spec.n);
    for j in 0..spec.n {
        for i in 0..spec.d {
            let v: f64 = rng.random_range(-1.0..1.0);
            y[(i, j)] = if i < spec.k_star {
                v + 2.0 * sign(v)
            } else {
                v
            };
        }
    }
    let w = DVector::from_element(spec.n, 1.0 / spec.n as f64);
    PrwInstance::new(x, y, w.clone(), w, spec.k_star)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loads an instance from CSV point clouds (one point per row, `d` numeric
/// columns, optional header row). Weight files hold one positive value per
/// row and are renormalized to the simplex; absent weights are uniform.
pub fn load_pointclouds(
    path_x: &Path,
    path_y: &Path,
    weights_x: Option<&Path>,
    weights_y: Option<&Path>,
    k: usize,
) -> Result<PrwInstance> {
    let x = read_points_csv(path_x)?;
    let y = read_points_csv(path_y)?;
    if x.nrows() != y.nrows() {
        return Err(PrwError::ShapeMismatch(format!(
            "{} has dimension {} but {} has dimension {}",
            path_x.display(),
            x.nrows(),
            path_y.display(),
            y.nrows()
        )));
    }
    let r = match weights_x {
        Some(p) => read_weights_csv(p, x.ncols())?,
        None => DVector::from_element(x.ncols(), 1.0 / x.ncols() as f64),
    };
    let c = match weights_y {
        Some(p) => read_weights_csv(p, y.ncols())?,
        None => DVector::from_element(y.ncols(), 1.0 / y.ncols() as f64),
    };
    PrwInstance::new(x, y, r, c, k)
}

/// Reads a point cloud stored one point per row into a d×n matrix (points
/// as columns). A non-numeric first row is treated as a header.
pub fn read_points_csv(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_numeric_rows(path)?;
    if rows.is_empty() {
        return Err(PrwError::Parse {
            path: path.display().to_string(),
            row: 0,
            message: "no data rows".into(),
        });
    }
    let d = rows[0].len();
    for (idx, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(PrwError::Parse {
                path: path.display().to_string(),
                row: idx + 1,
                message: format!("expected {d} columns, found {}", row.len()),
            });
        }
    }
    let n = rows.len();
    let mut m = DMatrix::<f64>::zeros(d, n);
    for (j, row) in rows.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn read_weights_csv(path: &Path, expected: usize) -> Result<DVector<f64>> {
    let rows = read_numeric_rows(path)?;
    if rows.len() != expected {
        return Err(PrwError::Parse {
            path: path.display().to_string(),
            row: rows.len(),
            message: format!("expected {expected} weight rows, found {}", rows.len()),
        });
    }
    let mut w = DVector::zeros(expected);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 1 {
            return Err(PrwError::Parse {
                path: path.display().to_string(),
                row: i + 1,
                message: format!("expected one value per row, found {}", row.len()),
            });
        }
        if !(row[0].is_finite() && row[0] > 0.0) {
            return Err(PrwError::Parse {
                path: path.display().to_string(),
                row: i + 1,
                message: format!("weights must be strictly positive, found {}", row[0]),
            });
        }
        w[i] = row[0];
    }
    Ok(w)
}

fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_error(path, e))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        let mut bad_col = None;
        for (col, field) in record.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(v) => row.push(v),
                Err(_) => {
                    bad_col = Some(col);
                    break;
                }
            }
        }
        match bad_col {
            None => rows.push(row),
            Some(col) => {
                // A non-numeric first row is an optional header.
                if idx == 0 && rows.is_empty() {
                    continue;
                }
                return Err(PrwError::Parse {
                    path: path.display().to_string(),
                    row: idx + 1,
                    message: format!(
                        "column {} is not numeric: {:?}",
                        col + 1,
                        record.get(col).unwrap_or("")
                    ),
                });
            }
        }
    }
    Ok(rows)
}

fn io_error(path: &Path, e: csv::Error) -> PrwError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PrwError::Io {
            path: path.display().to_string(),
            source: io,
        },
        other => PrwError::Parse {
            path: path.display().to_string(),
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Writes a point cloud (points as columns) one point per row.
pub fn write_points_csv(path: &Path, points: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    for j in 0..points.ncols() {
        let row: Vec<String> = (0..points.nrows())
            .map(|i| format!("{:?}", points[(i, j)]))
            .collect();
        writer.write_record(&row).map_err(|e| io_error(path, e))?;
    }
    writer
        .flush()
        .map_err(|e| PrwError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

/// Writes a weight vector one value per row.
pub fn write_weights_csv(path: &Path, weights: &DVector<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    for i in 0..weights.len() {
        writer
            .write_record([format!("{:?}", weights[i])])
            .map_err(|e| io_error(path, e))?;
    }
    writer
        .flush()
        .map_err(|e| PrwError::Io {
            path: path.display().to_string(),
            source: e,
        })
}
