//! Constraint oracles: closed-form membership predicates over R^d.
//!
//! Specs serialize as JSON objects with a `kind` discriminator, e.g.
//!
//! ```json
//! {"kind": "checkerboard", "extent": 2.0, "cell": 1.0}
//! {"kind": "disc", "center": [0.0, 0.0], "radius": 1.0, "inside": true}
//! {"kind": "complement", "of": {"kind": "half_space", "normal": [1.0, 0.0], "offset": 0.0}}
//! ```
//!
//! All regions are closed: boundary points are positive.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// Cells of side `cell` tiling `[-extent, extent]^2`; a cell is positive
    /// when the floor indices of its corner sum to an even number.
    Checkerboard { extent: f64, cell: f64 },
    /// Axis-aligned box `lower <= x <= upper`.
    IntervalBox { lower: Vec<f64>, upper: Vec<f64> },
    /// `|x - center| <= radius` when `inside`, otherwise `>= radius`.
    Disc { center: Vec<f64>, radius: f64, inside: bool },
    /// Union of closed simple polygons in the plane.
    PolygonUnion { polygons: Vec<Vec<[f64; 2]>> },
    /// `normal . x <= offset`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// Negation. The boundary of the complement is its own, so the closed
    /// convention does not survive this combinator on measure-zero sets.
    Complement { of: Box<OracleSpec> },
    Intersection { of: Vec<OracleSpec> },
    Union { of: Vec<OracleSpec> },
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self::checkerboard()
    }
}

fn dims_agree(parts: &[OracleSpec]) -> Result<Option<usize>> {
    let mut dim = None;
    for p in parts {
        if let Some(d) = p.dim()? {
            match dim {
                None => dim = Some(d),
                Some(e) if e != d => {
                    return Err(Error::Config(format!("combined oracles disagree on dimension: {e} vs {d}")))
                }
                _ => {}
            }
        }
    }
    Ok(dim)
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let scale = (b[0] - a[0]).abs() + (b[1] - a[1]).abs();
    if cross.abs() > 1e-12 * scale.max(1.0) {
        return false;
    }
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

impl OracleSpec {
    /// Unit cells on `[-2, 2]^2`.
    pub fn checkerboard() -> Self {
        OracleSpec::Checkerboard { extent: 2.0, cell: 1.0 }
    }

    pub fn complement(self) -> Self {
        OracleSpec::Complement { of: Box::new(self) }
    }

    /// Required input dimension; `None` when any dimension is accepted.
    pub fn dim(&self) -> Result<Option<usize>> {
        Ok(match self {
            OracleSpec::Checkerboard { .. } | OracleSpec::PolygonUnion { .. } => Some(2),
            OracleSpec::IntervalBox { lower, .. } => Some(lower.len()),
            OracleSpec::Disc { center, .. } => Some(center.len()),
            OracleSpec::HalfSpace { normal, .. } => Some(normal.len()),
            OracleSpec::Complement { of } => of.dim()?,
            OracleSpec::Intersection { of } | OracleSpec::Union { of } => dims_agree(of)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OracleSpec::Checkerboard { extent, cell } => {
                if !(*cell > 0.0 && *extent > 0.0 && extent.is_finite()) {
                    return Err(Error::Config("checkerboard needs positive extent and cell size".into()));
                }
                let per_axis = 2.0 * extent / cell;
                if (per_axis - per_axis.round()).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "checkerboard extent {extent} is not a whole number of {cell}-cells per side"
                    )));
                }
            }
            OracleSpec::IntervalBox { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::Config("box bounds must be nonempty and equally long".into()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::Config("box needs lower <= upper in every dimension".into()));
                }
            }
            OracleSpec::Disc { center, radius, .. } => {
                if center.is_empty() || !(*radius >= 0.0) {
                    return Err(Error::Config("disc needs a center and a nonnegative radius".into()));
                }
            }
            OracleSpec::PolygonUnion { polygons } => {
                if polygons.iter().any(|p| p.len() < 3) {
                    return Err(Error::Config("every polygon needs at least 3 vertices".into()));
                }
            }
            OracleSpec::HalfSpace { normal, .. } => {
                if normal.is_empty() {
                    return Err(Error::Config("half-space needs a normal".into()));
                }
            }
            OracleSpec::Complement { of } => of.validate()?,
            OracleSpec::Intersection { of } | OracleSpec::Union { of } => {
                if of.is_empty() {
                    return Err(Error::Config("combinator needs at least one operand".into()));
                }
                for p in of {
                    p.validate()?;
                }
            }
        }
        self.dim().map(|_| ())
    }

    /// Membership of `x` in the region.
    pub fn evaluate(&self, x: &[f64]) -> Result<bool> {
        if let Some(d) = self.dim()? {
            if d != x.len() {
                return Err(Error::Config(format!("oracle expects dimension {d}, got {}", x.len())));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("oracle input must be finite, got {x:?}")));
        }
        Ok(self.contains(x))
    }

    /// `1` inside the region, `0` outside.
    pub fn label(&self, x: &[f64]) -> Result<u8> {
        self.evaluate(x).map(u8::from)
    }

    fn contains(&self, x: &[f64]) -> bool {
        match self {
            OracleSpec::Checkerboard { extent, cell } => {
                if x.iter().any(|v| v.abs() > *extent) {
                    return false;
                }
                // a point on a cell edge belongs to every adjacent cell
                let choices: Vec<Vec<i64>> = x
                    .iter()
                    .map(|&v| {
                        let u = v / cell;
                        let f = u.floor();
                        let mut c = vec![f as i64];
                        if u == f {
                            c.push(f as i64 - 1);
                        }
                        let max_index = (extent / cell).round() as i64 - 1;
                        let min_index = -(extent / cell).round() as i64;
                        c.retain(|&k| k >= min_index && k <= max_index);
                        c
                    })
                    .collect();
                choices[0].iter().any(|&a| choices[1].iter().any(|&b| (a + b).rem_euclid(2) == 0))
            }
            OracleSpec::IntervalBox { lower, upper } => {
                x.iter().zip(lower.iter().zip(upper)).all(|(v, (l, u))| v >= l && v <= u)
            }
            OracleSpec::Disc { center, radius, inside } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if *inside {
                    r2 <= radius * radius
                } else {
                    r2 >= radius * radius
                }
            }
            OracleSpec::PolygonUnion { polygons } => polygons.iter().any(|p| in_polygon([x[0], x[1]], p)),
            OracleSpec::HalfSpace { normal, offset } => {
                x.iter().zip(normal).map(|(a, b)| a * b).sum::<f64>() <= *offset
            }
            OracleSpec::Complement { of } => !of.contains(x),
            OracleSpec::Intersection { of } => of.iter().all(|p| p.contains(x)),
            OracleSpec::Union { of } => of.iter().any(|p| p.contains(x)),
        }
    }

    /// Labels every row of `points`.
    pub fn evaluate_batch(&self, points: ArrayView2<f64>) -> Result<Vec<bool>> {
        let rows: Vec<_> = points.rows().into_iter().collect();
        rows.par_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.evaluate(s),
                None => self.evaluate(&r.to_vec()),
            })
            .collect()
    }
}

/// Lower corners of the positive checkerboard cells.
fn positive_cells(extent: f64, cell: f64) -> Vec<[f64; 2]> {
    let k = (extent / cell).round() as i64;
    let mut out = Vec::new();
    for i in -k..k {
        for j in -k..k {
            if (i + j).rem_euclid(2) == 0 {
                out.push([i as f64 * cell, j as f64 * cell]);
            }
        }
    }
    out
}

/// `n` points uniform over the positive cells of a checkerboard oracle.
pub fn make_checkerboard_dataset(spec: &OracleSpec, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let OracleSpec::Checkerboard { extent, cell } = *spec else {
        return Err(Error::Config("checkerboard data needs a checkerboard oracle".into()));
    };
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let cells = positive_cells(extent, cell);
    let mut rng = rng_from(seed);
    let mut pts = Array2::zeros((n, 2));
    for mut row in pts.rows_mut() {
        let c = cells[rng.random_range(0..cells.len())];
        row[0] = c[0] + cell * rng.random::<f64>();
        row[1] = c[1] + cell * rng.random::<f64>();
    }
    Ok(Dataset::new(pts, split))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfractionRate {
    pub rate: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Fraction of samples outside the region, with binomial standard error.
pub fn infraction_rate(samples: ArrayView2<f64>, oracle: &OracleSpec) -> Result<InfractionRate> {
    if samples.nrows() == 0 {
        return Err(Error::Contract("infraction rate needs at least one sample".into()));
    }
    let labels = oracle.evaluate_batch(samples)?;
    let n = labels.len();
    let bad = labels.iter().filter(|&&ok| !ok).count();
    let rate = bad as f64 / n as f64;
    Ok(InfractionRate {
        rate,
        stderr: (rate * (1.0 - rate) / n as f64).sqrt(),
        count: n,
    })
}
