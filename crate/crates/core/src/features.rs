//! Fixed-schema feature vectors for slice crops.
//!
//! The built-in extractor produces the 24-dimensional `classical-v1`
//! schema (shape, moment, intensity, edge and radial descriptors). Vectors
//! from external extractors enter through the feature CSV format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::perturb::dilate;
use crate::quality::Quality;
use crate::volume::{Grid2, SliceCrop, CROP_SIZE};

pub const CLASSICAL_SCHEMA: &str = "classical-v1";
pub const CLASSICAL_DIM: usize = 24;
pub const RESNET_SCHEMA: &str = "resnet152-gap-v1";
pub const RESNET_DIM: usize = 2048;

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Width in pixels of the band on each side of the boundary used for the
/// edge-strength features.
const BOUNDARY_BAND: usize = 2;

/// Names of the `classical-v1` dimensions, in order.
pub const CLASSICAL_NAMES: [&str; CLASSICAL_DIM] = [
    "area",
    "perimeter",
    "circularity",
    "centroid_dx",
    "centroid_dy",
    "hu1",
    "hu2",
    "hu3",
    "hu4",
    "hu5",
    "hu6",
    "hu7",
    "intensity_mean",
    "intensity_std",
    "intensity_p10",
    "intensity_p50",
    "intensity_p90",
    "edge_grad_mean",
    "edge_grad_std",
    "radial_mean",
    "radial_std",
    "radial_min",
    "radial_max",
    "area_fraction",
];

/// Known schemas and their dimensions.
pub fn schema_dim(schema_id: &str) -> Option<usize> {
    match schema_id {
        CLASSICAL_SCHEMA => Some(CLASSICAL_DIM),
        RESNET_SCHEMA => Some(RESNET_DIM),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub schema_id: String,
    pub values: Vec<f64>,
    pub case_id: String,
    pub organ: String,
    pub slice: i64,
    pub label: Option<Quality>,
}

impl FeatureVector {
    pub fn new(schema_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let v = FeatureVector {
            schema_id: schema_id.into(),
            values,
            case_id: String::new(),
            organ: String::new(),
            slice: -1,
            label: None,
        };
        v.validate(false)?;
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Finite values; dimension must match the registry for known schemas.
    /// With `strict`, unknown schemas are rejected.
    pub fn validate(&self, strict: bool) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(QaError::Format(format!(
                "non-finite feature value at index {i} ({}/{}/{})",
                self.case_id, self.organ, self.slice
            )));
        }
        match schema_dim(&self.schema_id) {
            Some(d) if d != self.values.len() => Err(QaError::Format(format!(
                "schema `{}` expects {d} values, got {}",
                self.schema_id,
                self.values.len()
            ))),
            None if strict => Err(QaError::Format(format!(
                "unknown feature schema `{}`",
                self.schema_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Per-dimension mean and (floored) sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(QaError::Format(
                "standardization mean/std length mismatch".into(),
            ));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.std.iter().any(|s| !(s.is_finite() && *s >= STD_FLOOR))
        {
            return Err(QaError::Format("invalid standardization values".into()));
        }
        Ok(())
    }

    /// `(x - mean) / std` on a raw slice.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(QaError::SchemaMismatch {
                expected: format!("{} dimensions", self.dim()),
                found: format!("{} dimensions", x.len()),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

fn check_same_schema(vectors: &[FeatureVector]) -> Result<()> {
    let first = &vectors[0];
    for v in vectors {
        if v.schema_id != first.schema_id || v.dim() != first.dim() {
            return Err(QaError::SchemaMismatch {
                expected: format!("{} (D={})", first.schema_id, first.dim()),
                found: format!("{} (D={})", v.schema_id, v.dim()),
            });
        }
    }
    Ok(())
}

pub fn fit_standardization(vectors: &[FeatureVector]) -> Result<StandardizationStats> {
    if vectors.len() < 2 {
        return Err(QaError::InvalidArgument(format!(
            "standardization needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    check_same_schema(vectors)?;
    let d = vectors[0].dim();
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(&v.values).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| (s / (n - 1.0)).sqrt().max(STD_FLOOR))
        .collect();
    Ok(StandardizationStats { mean, std })
}

pub fn standardize(v: &FeatureVector, s: &StandardizationStats) -> Result<FeatureVector> {
    Ok(FeatureVector {
        values: s.apply(&v.values)?,
        ..v.clone()
    })
}

// ---------------------------------------------------------------------------
// classical-v1 extractor

const NEIGHBORS8: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn is_set(m: &Grid2<u8>, x: i64, y: i64) -> bool {
    m.get_signed(x, y).unwrap_or(0) != 0
}

/// Length of the outer 8-connected boundary of every component, with unit
/// axis steps and √2 diagonal steps.
pub fn perimeter(mask: &Grid2<u8>) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut total = 0.0;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 || seen[y * w + x] {
                continue;
            }
            total += trace_outer(mask, (x as i64, y as i64));
            // Mark the component so it is traced once.
            stack.push((x, y));
            seen[y * w + x] = true;
            while let Some((cx, cy)) = stack.pop() {
                for &(dx, dy) in &NEIGHBORS8 {
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if is_set(mask, nx, ny) {
                        let i = ny as usize * w + nx as usize;
                        if !seen[i] {
                            seen[i] = true;
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
        }
    }
    total
}

/// Moore-neighbour tracing from the raster-first pixel of a component.
/// Stops when the first move is about to repeat.
fn trace_outer(mask: &Grid2<u8>, start: (i64, i64)) -> f64 {
    let mut p = start;
    // The west neighbour of the raster-first pixel is background.
    let mut back = 0usize;
    let mut first: Option<(i64, i64)> = None;
    let mut length = 0.0;
    let limit = 4 * mask.width() * mask.height() + 8;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let q = (p.0 + NEIGHBORS8[d].0, p.1 + NEIGHBORS8[d].1);
            if is_set(mask, q.0, q.1) {
                found = Some((d, q));
                break;
            }
        }
        let Some((d, q)) = found else {
            return 0.0;
        };
        if p == start {
            match first {
                Some(f) if f == q => break,
                None => first = Some(q),
                _ => {}
            }
        }
        length += if d % 2 == 0 { 1.0 } else { std::f64::consts::SQRT_2 };
        let prev = (d + 7) % 8;
        let b = (p.0 + NEIGHBORS8[prev].0, p.1 + NEIGHBORS8[prev].1);
        let rel = (b.0 - q.0, b.1 - q.1);
        back = NEIGHBORS8.iter().position(|&n| n == rel).unwrap_or(0);
        p = q;
    }
    length
}

/// Raw and central moments of a binary mask.
struct Moments {
    m00: f64,
    cx: f64,
    cy: f64,
    mu: [[f64; 4]; 4],
}

fn moments(mask: &Grid2<u8>) -> Moments {
    let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) != 0 {
                m00 += 1.0;
                m10 += x as f64;
                m01 += y as f64;
            }
        }
    }
    let (cx, cy) = (m10 / m00, m01 / m00);
    let mut mu = [[0.0; 4]; 4];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) != 0 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let px = [1.0, dx, dx * dx, dx * dx * dx];
                let py = [1.0, dy, dy * dy, dy * dy * dy];
                for p in 0..4 {
                    for q in 0..4 - p {
                        mu[p][q] += px[p] * py[q];
                    }
                }
            }
        }
    }
    Moments { m00, cx, cy, mu }
}

/// The seven Hu invariants of a nonempty binary mask.
pub fn hu_moments(mask: &Grid2<u8>) -> [f64; 7] {
    let m = moments(mask);
    let eta = |p: usize, q: usize| m.mu[p][q] / m.m00.powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    let a = n30 + n12;
    let b = n21 + n03;
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        a * a + b * b,
        (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b)
            + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b)
            - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b),
    ]
}

/// Mask pixels with a 4-neighbour outside the mask or the grid.
fn boundary(mask: &Grid2<u8>) -> Grid2<u8> {
    let mut out = Grid2::filled(mask.width(), mask.height(), 0u8);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) == 0 {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            if !is_set(mask, xi - 1, yi)
                || !is_set(mask, xi + 1, yi)
                || !is_set(mask, xi, yi - 1)
                || !is_set(mask, xi, yi + 1)
            {
                out.set(x, y, 1);
            }
        }
    }
    out
}

/// Central-difference gradient magnitude with edge clamping.
fn gradient_magnitude(img: &Grid2<u8>) -> Grid2<f64> {
    let (w, h) = (img.width(), img.height());
    let mut out = Grid2::filled(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            let yu = y.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let gx = (img.get(xr, y) as f64 - img.get(xl, y) as f64) / (xr - xl).max(1) as f64;
            let gy = (img.get(x, yd) as f64 - img.get(x, yu) as f64) / (yd - yu).max(1) as f64;
            out.set(x, y, (gx * gx + gy * gy).sqrt());
        }
    }
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Extract the `classical-v1` feature vector from a crop.
pub fn extract_classical(crop: &SliceCrop) -> FeatureVector {
    let mask = crop.mask();
    let img = crop.pixels();

    let area = mask.count_nonzero() as f64;
    let perim = perimeter(mask);
    let circularity = if perim > 0.0 {
        4.0 * PI * area / (perim * perim)
    } else {
        0.0
    };
    let m = moments(mask);
    let center = (CROP_SIZE as f64 - 1.0) / 2.0;
    let hu = hu_moments(mask);

    let mut inside: Vec<f64> = mask
        .data()
        .iter()
        .zip(img.data())
        .filter(|(&mv, _)| mv != 0)
        .map(|(_, &p)| p as f64)
        .collect();
    let (i_mean, i_std) = mean_std(&inside);
    inside.sort_by(f64::total_cmp);

    let edge = boundary(mask);
    let band = dilate(&edge, BOUNDARY_BAND);
    let grad = gradient_magnitude(img);
    let band_grad: Vec<f64> = band
        .data()
        .iter()
        .zip(grad.data())
        .filter(|(&b, _)| b != 0)
        .map(|(_, &g)| g)
        .collect();
    let (g_mean, g_std) = mean_std(&band_grad);

    let mut radial = Vec::new();
    for y in 0..edge.height() {
        for x in 0..edge.width() {
            if edge.get(x, y) != 0 {
                radial.push(((x as f64 - m.cx).powi(2) + (y as f64 - m.cy).powi(2)).sqrt());
            }
        }
    }
    let (r_mean, r_std) = mean_std(&radial);
    let r_min = radial.iter().copied().fold(f64::INFINITY, f64::min);
    let r_max = radial.iter().copied().fold(0.0, f64::max);

    let values = vec![
        area,
        perim,
        circularity,
        m.cx - center,
        m.cy - center,
        hu[0],
        hu[1],
        hu[2],
        hu[3],
        hu[4],
        hu[5],
        hu[6],
        i_mean,
        i_std,
        percentile_nearest_rank(&inside, 10.0),
        percentile_nearest_rank(&inside, 50.0),
        percentile_nearest_rank(&inside, 90.0),
        g_mean,
        g_std,
        r_mean,
        r_std,
        r_min,
        r_max,
        area / (CROP_SIZE * CROP_SIZE) as f64,
    ];
    FeatureVector {
        schema_id: CLASSICAL_SCHEMA.to_string(),
        values,
        case_id: crop.provenance.case_id.clone(),
        organ: crop.provenance.organ.clone(),
        slice: crop.provenance.slice,
        label: None,
    }
}

// ---------------------------------------------------------------------------
// Feature file IO

fn label_str(l: Option<Quality>) -> &'static str {
    match l {
        Some(q) => q.as_str(),
        None => "unknown",
    }
}

/// Write vectors in the feature CSV format. All rows must share one schema.
pub fn write_feature_file(vectors: &[FeatureVector], path: impl AsRef<Path>) -> Result<()> {
    let (schema, dim) = match vectors.first() {
        Some(v) => (v.schema_id.clone(), v.dim()),
        None => {
            return Err(QaError::InvalidArgument(
                "cannot write an empty feature file".into(),
            ))
        }
    };
    check_same_schema(vectors)?;
    for v in vectors {
        v.validate(false)?;
    }
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{schema},{dim}")?;
    let mut cols = String::from("case_id,organ,slice,label");
    for i in 0..dim {
        cols.push_str(&format!(",f_{i}"));
    }
    writeln!(w, "{cols}")?;
    let mut line = String::new();
    for v in vectors {
        line.clear();
        line.push_str(&csv_field(&v.case_id));
        line.push(',');
        line.push_str(&csv_field(&v.organ));
        line.push_str(&format!(",{},{}", v.slice, label_str(v.label)));
        for x in &v.values {
            line.push_str(&format!(",{x:?}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Read a feature CSV. Known schemas are checked against their registered
/// dimension; `strict` also rejects unknown schemas.
pub fn read_feature_file(path: impl AsRef<Path>, strict: bool) -> Result<Vec<FeatureVector>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path.as_ref())?;
    let mut records = rdr.records();
    let head = records
        .next()
        .ok_or_else(|| QaError::Format("feature file is empty".into()))??;
    if head.len() != 2 {
        return Err(QaError::Format(
            "first line must be `schema_id,D`".into(),
        ));
    }
    let schema = head[0].to_string();
    let dim: usize = head[1]
        .trim()
        .parse()
        .map_err(|_| QaError::Format(format!("bad dimension `{}`", &head[1])))?;
    if dim == 0 {
        return Err(QaError::Format("dimension must be >= 1".into()));
    }
    let cols = records
        .next()
        .ok_or_else(|| QaError::Format("missing column header line".into()))??;
    let expected_cols = 4 + dim;
    if cols.len() != expected_cols
        || &cols[0] != "case_id"
        || &cols[1] != "organ"
        || &cols[2] != "slice"
        || &cols[3] != "label"
    {
        return Err(QaError::Format(format!(
            "column header must be case_id,organ,slice,label,f_0..f_{}",
            dim - 1
        )));
    }
    let mut out = Vec::new();
    for (row, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != expected_cols {
            return Err(QaError::Format(format!(
                "row {} has {} values, expected {dim}",
                row + 1,
                rec.len().saturating_sub(4)
            )));
        }
        let slice: i64 = rec[2]
            .parse()
            .map_err(|_| QaError::Format(format!("row {}: bad slice `{}`", row + 1, &rec[2])))?;
        let label = match &rec[3] {
            "unknown" => None,
            other => Some(other.parse::<Quality>()?),
        };
        let values = (4..expected_cols)
            .map(|i| {
                rec[i].trim().parse::<f64>().map_err(|_| {
                    QaError::Format(format!("row {}: bad value `{}`", row + 1, &rec[i]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let v = FeatureVector {
            schema_id: schema.clone(),
            values,
            case_id: rec[0].to_string(),
            organ: rec[1].to_string(),
            slice,
            label,
        };
        v.validate(strict)?;
        out.push(v);
    }
    Ok(out)
}
