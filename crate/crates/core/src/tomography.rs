//! Cross-borehole acquisition geometry and the straight-ray travel-time operator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{Field, Grid};
use crate::io::{self, Provenance};
use crate::linalg::DenseMatrix;
use crate::rng::{fill_standard_normal, RngStream};

/// A point in the image plane: horizontal position and depth, both in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub depth: f64,
}

impl Point {
    pub fn new(x: f64, depth: f64) -> Self {
        Point { x, depth }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.depth - other.depth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub n_sources: usize,
    pub n_receivers: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub separation: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_sources: 9,
            n_receivers: 9,
            depth_min: 0.5,
            depth_max: 4.5,
            separation: 3.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    pub source_x: f64,
    pub receiver_x: f64,
    pub source_depths: Vec<f64>,
    pub receiver_depths: Vec<f64>,
}

impl AcquisitionGeometry {
    pub fn n_rays(&self) -> usize {
        self.source_depths.len() * self.receiver_depths.len()
    }

    /// Ray endpoints, source-major.
    pub fn rays(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.source_depths.iter().flat_map(move |&sd| {
            self.receiver_depths
                .iter()
                .map(move |&rd| (Point::new(self.source_x, sd), Point::new(self.receiver_x, rd)))
        })
    }
}

fn spaced_depths(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::InvalidConfig("need at least one source and receiver".into())),
        1 => Ok(vec![0.5 * (lo + hi)]),
        _ if !(hi > lo) => Err(Error::InvalidConfig(format!(
            "{n} depths need depth_max > depth_min (got {lo}..{hi})"
        ))),
        _ => Ok((0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()),
    }
}

/// Sources and receivers on two vertical boreholes `separation` apart,
/// centered horizontally on the grid.
pub fn build_geometry(grid: &Grid, cfg: &GeometryConfig) -> Result<AcquisitionGeometry> {
    grid.validate()?;
    let width = grid.width();
    if !(cfg.separation > 0.0) || cfg.separation > width * (1.0 + 1e-12) {
        return Err(Error::Geometry(format!(
            "borehole separation {} m does not fit a grid {width} m wide",
            cfg.separation
        )));
    }
    if cfg.depth_min < 0.0 || cfg.depth_max > grid.depth() * (1.0 + 1e-12) || cfg.depth_max < cfg.depth_min {
        return Err(Error::Geometry(format!(
            "depth range {}..{} m outside the grid depth {} m",
            cfg.depth_min,
            cfg.depth_max,
            grid.depth()
        )));
    }
    let source_x = 0.5 * (width - cfg.separation);
    Ok(AcquisitionGeometry {
        source_x,
        receiver_x: source_x + cfg.separation,
        source_depths: spaced_depths(cfg.n_sources, cfg.depth_min, cfg.depth_max)?,
        receiver_depths: spaced_depths(cfg.n_receivers, cfg.depth_min, cfg.depth_max)?,
    })
}

/// One row of the operator: `(cell index, path length in meters)`.
pub type RaySegments = Vec<(u32, f64)>;

fn inside(grid: &Grid, p: &Point) -> bool {
    let tol = 1e-12 * grid.cell_size;
    p.x >= -tol && p.x <= grid.width() + tol && p.depth >= -tol && p.depth <= grid.depth() + tol
}

/// Cells straddling a coordinate. A coordinate on an interior grid line
/// returns both neighbours.
fn cells_at(coord: f64, cell: f64, n: usize) -> (usize, Option<usize>) {
    let s = coord / cell;
    let k = s.round();
    if (s - k).abs() < 1e-9 && k > 0.0 && (k as usize) < n {
        let k = k as usize;
        (k - 1, Some(k))
    } else {
        ((s.floor().max(0.0) as usize).min(n - 1), None)
    }
}

/// Exact per-cell path lengths of the straight segment `p0 → p1`.
///
/// All grid-line crossings are collected as segment parameters, sorted, and
/// each sub-segment is assigned to the cell containing its midpoint.
/// Zero-length pieces go nowhere. A ray running exactly along a grid line
/// splits its length evenly between the two cells sharing that line.
pub fn trace_ray(grid: &Grid, p0: Point, p1: Point) -> Result<RaySegments> {
    if !inside(grid, &p0) || !inside(grid, &p1) {
        return Err(Error::Geometry(format!(
            "ray endpoint outside grid: ({}, {}) -> ({}, {})",
            p0.x, p0.depth, p1.x, p1.depth
        )));
    }
    let len = p0.distance(&p1);
    if len == 0.0 {
        return Ok(Vec::new());
    }
    let cs = grid.cell_size;
    let (dx, dz) = (p1.x - p0.x, p1.depth - p0.depth);
    let mut ts = vec![0.0, 1.0];
    let mut crossings = |a: f64, d: f64, n: usize| {
        if d == 0.0 {
            return;
        }
        for k in 1..n {
            let t = (k as f64 * cs - a) / d;
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
    };
    crossings(p0.x, dx, grid.n_cols);
    crossings(p0.depth, dz, grid.n_rows);
    ts.sort_by(f64::total_cmp);

    let mut row: RaySegments = Vec::new();
    let mut push = |cell: usize, l: f64| {
        let cell = cell as u32;
        match row.iter_mut().find(|(c, _)| *c == cell) {
            Some(entry) => entry.1 += l,
            None => row.push((cell, l)),
        }
    };
    for w in ts.windows(2) {
        let piece = (w[1] - w[0]) * len;
        if piece <= 1e-12 * cs {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let (xm, zm) = (p0.x + tm * dx, p0.depth + tm * dz);
        // only an axis-parallel ray can run along a grid line
        let (c0, c1) = match cells_at(xm, cs, grid.n_cols) {
            (c, Some(c1)) if dx == 0.0 => (c, Some(c1)),
            (c, Some(_)) => (c + 1, None),
            other => other,
        };
        let (r0, r1) = match cells_at(zm, cs, grid.n_rows) {
            (r, Some(r1)) if dz == 0.0 => (r, Some(r1)),
            (r, Some(_)) => (r + 1, None),
            other => other,
        };
        let cols: Vec<usize> = std::iter::once(c0).chain(c1).collect();
        let rows: Vec<usize> = std::iter::once(r0).chain(r1).collect();
        let share = piece / (cols.len() * rows.len()) as f64;
        for &r in &rows {
            for &c in &cols {
                push(r * grid.n_cols + c, share);
            }
        }
    }
    Ok(row)
}

/// Sparse linear operator from slowness (ns/m) to travel times (ns).
#[derive(Clone, Debug, PartialEq)]
pub struct RayMatrix {
    pub n_rays: usize,
    pub n_cells: usize,
    pub rows: Vec<RaySegments>,
}

pub fn assemble_matrix(grid: &Grid, geom: &AcquisitionGeometry) -> Result<RayMatrix> {
    let rows = geom
        .rays()
        .map(|(s, r)| trace_ray(grid, s, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(RayMatrix {
        n_rays: rows.len(),
        n_cells: grid.n_cells(),
        rows,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct RayMatrixHeader {
    n_rays: usize,
    n_cells: usize,
    nnz: usize,
    /// Layout of the binary payload.
    record: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

const RAY_RECORD: &str = "ray_offset:u32le,cell_index:u32le,length:f64le";

impl RayMatrix {
    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(_, l)| l).sum()).collect()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.n_rays, self.n_cells);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, l) in row {
                a.set(i, c as usize, l);
            }
        }
        a
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cells {
            return Err(Error::DimensionMismatch(format!(
                "field of {} cells for an operator over {} cells",
                x.len(),
                self.n_cells
            )));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.iter().map(|&(c, l)| l * x[c as usize]).sum())
            .collect())
    }

    /// Applies the operator to every row of `x` (`n × cells` → `n × rays`).
    pub fn apply_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = Vec::with_capacity(x.rows() * self.n_rays);
        for r in x.row_iter() {
            out.extend(self.apply(r)?);
        }
        Ok(DenseMatrix::from_raw(x.rows(), self.n_rays, out))
    }

    /// Writes `<stem>.json` (header) and `<stem>.bin` (packed 16-byte records).
    pub fn save(&self, stem: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.nnz() * 16);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, l) in row {
                bytes.extend_from_slice(&(i as u32).to_le_bytes());
                bytes.extend_from_slice(&c.to_le_bytes());
                bytes.extend_from_slice(&l.to_le_bytes());
            }
        }
        io::write_bytes(&io::bin_path(stem), &bytes)?;
        io::write_json(
            &io::sidecar_path(stem),
            &RayMatrixHeader {
                n_rays: self.n_rays,
                n_cells: self.n_cells,
                nnz: self.nnz(),
                record: RAY_RECORD.into(),
                provenance: provenance.cloned(),
            },
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: RayMatrixHeader = io::read_json(&io::sidecar_path(stem))?;
        let path = io::bin_path(stem);
        let bytes = io::read_bytes(&path)?;
        if header.record != RAY_RECORD || bytes.len() != header.nnz * 16 {
            return Err(Error::format(&path, "ray matrix payload does not match its header"));
        }
        let mut rows = vec![Vec::new(); header.n_rays];
        for rec in bytes.chunks_exact(16) {
            let ray = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
            let cell = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
            let l = f64::from_le_bytes(rec[8..16].try_into().expect("8 bytes"));
            if ray >= header.n_rays || cell as usize >= header.n_cells {
                return Err(Error::format(&path, "record index out of range"));
            }
            rows[ray].push((cell, l));
        }
        Ok(RayMatrix {
            n_rays: header.n_rays,
            n_cells: header.n_cells,
            rows,
        })
    }
}

/// Travel times (ns), one per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct TravelTimes {
    pub values: Vec<f64>,
}

pub fn forward(a: &RayMatrix, x: &Field) -> Result<TravelTimes> {
    Ok(TravelTimes {
        values: a.apply(&x.values)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    GaussianIid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// ns
    pub std: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            kind: NoiseKind::GaussianIid,
            std: 0.5,
        }
    }
}

pub fn add_noise(y: &TravelTimes, noise: &NoiseModel, rng: RngStream) -> Result<TravelTimes> {
    if !(noise.std >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise std {} < 0", noise.std)));
    }
    let mut u = vec![0.0; y.values.len()];
    fill_standard_normal(&mut rng.rng(), &mut u);
    Ok(TravelTimes {
        values: y
            .values
            .iter()
            .zip(&u)
            .map(|(v, e)| v + noise.std * e)
            .collect(),
    })
}
