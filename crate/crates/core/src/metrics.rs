//! Surface extraction and the overlap/distance agreement metrics (DSC,
//! percentile Hausdorff distance, mean surface distance).
//!
//! Volume metrics find nearest-surface distances with an exact separable
//! Euclidean distance transform over the bounding box of both surfaces.
//! Raw point sets use a sorted sweep. Both are exact; the test suite checks
//! them against the quadratic brute-force definition.

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::volume::{Grid2, Volume};

/// Percentile used for the HD95 metric.
pub const HD_PERCENTILE: f64 = 95.0;

/// Surface points of a mask in physical units (voxel index times spacing).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// DSC, HD95 and MSD for one contour pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub dsc: f64,
    pub hd95: f64,
    pub msd: f64,
}

/// Neighbourhood used to decide whether a mask voxel lies on the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceRule {
    /// Face-adjacent in 3-D; out-of-grid neighbours count as background.
    Face6,
    /// Edge-adjacent within each z plane. Used for single-slice masks.
    Planar4,
}

fn same_geometry(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(QaError::DimensionMismatch(format!(
            "dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.spacing() != b.spacing() {
        return Err(QaError::DimensionMismatch(format!(
            "spacing {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Flat indices of surface voxels under `rule`.
fn surface_indices(mask: &Volume, rule: SurfaceRule) -> Result<Vec<usize>> {
    let data = mask.mask_data()?;
    let [nx, ny, nz] = mask.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(x, y, z);
                if data[i] == 0 {
                    continue;
                }
                let in_plane = x == 0
                    || x + 1 == nx
                    || y == 0
                    || y + 1 == ny
                    || data[i - 1] == 0
                    || data[i + 1] == 0
                    || data[i - nx] == 0
                    || data[i + nx] == 0;
                let surface = in_plane
                    || match rule {
                        SurfaceRule::Planar4 => false,
                        SurfaceRule::Face6 => {
                            let plane = nx * ny;
                            z == 0 || z + 1 == nz || data[i - plane] == 0 || data[i + plane] == 0
                        }
                    };
                if surface {
                    out.push(i);
                }
            }
        }
    }
    Ok(out)
}

fn index_to_coords(mask: &Volume, i: usize) -> [usize; 3] {
    let [nx, ny, _] = mask.dims();
    [i % nx, (i / nx) % ny, i / (nx * ny)]
}

fn to_points(mask: &Volume, idx: &[usize]) -> SurfacePointSet {
    let s = mask.spacing();
    SurfacePointSet {
        points: idx
            .iter()
            .map(|&i| {
                let c = index_to_coords(mask, i);
                [c[0] as f64 * s[0], c[1] as f64 * s[1], c[2] as f64 * s[2]]
            })
            .collect(),
    }
}

/// Mask voxels with a face-adjacent background or out-of-grid neighbour.
pub fn surface_voxels(mask: &Volume) -> Result<SurfacePointSet> {
    surface_voxels_with(mask, SurfaceRule::Face6)
}

pub fn surface_voxels_with(mask: &Volume, rule: SurfaceRule) -> Result<SurfacePointSet> {
    let idx = surface_indices(mask, rule)?;
    Ok(to_points(mask, &idx))
}

/// Dice similarity coefficient. Two empty masks agree perfectly (1.0).
pub fn dsc(gt: &Volume, agc: &Volume) -> Result<f64> {
    same_geometry(gt, agc)?;
    let a = gt.mask_data()?;
    let b = agc.mask_data()?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// For every point of `a`, the Euclidean distance to its nearest point in `b`.
pub fn directed_distances(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<Vec<f64>> {
    if b.is_empty() {
        return Err(QaError::EmptyMask("target point set is empty".into()));
    }
    let mut sorted = b.points.clone();
    sorted.sort_by(|p, q| p[0].total_cmp(&q[0]));
    Ok(a.points
        .iter()
        .map(|p| nearest_sq_sweep(p, &sorted).sqrt())
        .collect())
}

fn nearest_sq_sweep(p: &[f64; 3], sorted: &[[f64; 3]]) -> f64 {
    let start = sorted.partition_point(|q| q[0] < p[0]);
    let mut best = f64::INFINITY;
    let sq = |q: &[f64; 3]| {
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    for q in &sorted[start..] {
        let dx = q[0] - p[0];
        if dx * dx > best {
            break;
        }
        best = best.min(sq(q));
    }
    for q in sorted[..start].iter().rev() {
        let dx = p[0] - q[0];
        if dx * dx > best {
            break;
        }
        best = best.min(sq(q));
    }
    best
}

/// Nearest-rank percentile of an unsorted sample: the element at 1-based
/// rank `ceil(p * n / 100)` of the ascending order.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(QaError::InvalidArgument(format!(
            "percentile must be in (0, 100], got {p}"
        )));
    }
    if values.is_empty() {
        return Err(QaError::InvalidArgument("percentile of empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    Ok(v[rank - 1])
}

/// Both directed distance lists between the surfaces of two masks.
fn bidirectional(gt: &Volume, agc: &Volume, rule: SurfaceRule) -> Result<(Vec<f64>, Vec<f64>)> {
    same_geometry(gt, agc)?;
    let sa = surface_indices(gt, rule)?;
    let sb = surface_indices(agc, rule)?;
    if sa.is_empty() || sb.is_empty() {
        return Err(QaError::EmptyMask(
            "distance metrics need two nonempty masks".into(),
        ));
    }
    let coords_a: Vec<[usize; 3]> = sa.iter().map(|&i| index_to_coords(gt, i)).collect();
    let coords_b: Vec<[usize; 3]> = sb.iter().map(|&i| index_to_coords(agc, i)).collect();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for c in coords_a.iter().chain(&coords_b) {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let spacing = gt.spacing();
    let field_b = SqDistanceField::new(lo, hi, spacing, &coords_b);
    let field_a = SqDistanceField::new(lo, hi, spacing, &coords_a);
    let a_to_b = coords_a.iter().map(|c| field_b.at(c).sqrt()).collect();
    let b_to_a = coords_b.iter().map(|c| field_a.at(c).sqrt()).collect();
    Ok((a_to_b, b_to_a))
}

/// Percentile Hausdorff distance; `percentile = 100` is the classic maximum.
pub fn hausdorff(gt: &Volume, agc: &Volume, percentile: f64) -> Result<f64> {
    hausdorff_with(gt, agc, percentile, SurfaceRule::Face6)
}

pub fn hausdorff_with(gt: &Volume, agc: &Volume, percentile: f64, rule: SurfaceRule) -> Result<f64> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(QaError::InvalidArgument(format!(
            "percentile must be in (0, 100], got {percentile}"
        )));
    }
    let (ab, ba) = bidirectional(gt, agc, rule)?;
    Ok(nearest_rank(&ab, percentile)?.max(nearest_rank(&ba, percentile)?))
}

/// Symmetric mean surface distance.
pub fn msd(gt: &Volume, agc: &Volume) -> Result<f64> {
    msd_with(gt, agc, SurfaceRule::Face6)
}

pub fn msd_with(gt: &Volume, agc: &Volume, rule: SurfaceRule) -> Result<f64> {
    let (ab, ba) = bidirectional(gt, agc, rule)?;
    Ok(mean_of_both(&ab, &ba))
}

fn mean_of_both(ab: &[f64], ba: &[f64]) -> f64 {
    let total: f64 = ab.iter().sum::<f64>() + ba.iter().sum::<f64>();
    total / (ab.len() + ba.len()) as f64
}

/// DSC, HD95 and MSD with one surface extraction.
pub fn metric_triple_with(gt: &Volume, agc: &Volume, rule: SurfaceRule) -> Result<MetricTriple> {
    let d = dsc(gt, agc)?;
    let (ab, ba) = bidirectional(gt, agc, rule)?;
    Ok(MetricTriple {
        dsc: d,
        hd95: nearest_rank(&ab, HD_PERCENTILE)?.max(nearest_rank(&ba, HD_PERCENTILE)?),
        msd: mean_of_both(&ab, &ba),
    })
}

/// Organ-level 3-D metrics in mm.
pub fn metric_triple(gt: &Volume, agc: &Volume) -> Result<MetricTriple> {
    metric_triple_with(gt, agc, SurfaceRule::Face6)
}

/// Slice-level metrics. `spacing = [1, 1]` gives pixel units; the surface
/// is the in-plane contour.
pub fn slice_metric_triple(gt: &Grid2<u8>, agc: &Grid2<u8>, spacing: [f64; 2]) -> Result<MetricTriple> {
    let a = Volume::from_mask_slice(gt, spacing)?;
    let b = Volume::from_mask_slice(agc, spacing)?;
    metric_triple_with(&a, &b, SurfaceRule::Planar4)
}

/// Nonzero voxel count and physical volume in mm³.
pub fn organ_volume(mask: &Volume) -> Result<(usize, f64)> {
    let count = mask.mask_data()?.iter().filter(|&&v| v != 0).count();
    let s = mask.spacing();
    Ok((count, count as f64 * s[0] * s[1] * s[2]))
}

/// Squared distance to the nearest feature voxel over an inclusive box,
/// computed with the separable lower-envelope transform one axis at a time.
struct SqDistanceField {
    lo: [usize; 3],
    shape: [usize; 3],
    values: Vec<f64>,
}

impl SqDistanceField {
    fn new(lo: [usize; 3], hi: [usize; 3], spacing: [f64; 3], features: &[[usize; 3]]) -> Self {
        let shape = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let mut values = vec![f64::INFINITY; shape[0] * shape[1] * shape[2]];
        let flat = |c: [usize; 3]| (c[2] * shape[1] + c[1]) * shape[0] + c[0];
        for f in features {
            values[flat([f[0] - lo[0], f[1] - lo[1], f[2] - lo[2]])] = 0.0;
        }
        let strides = [1, shape[0], shape[0] * shape[1]];
        let mut line = Vec::new();
        let mut out = Vec::new();
        let mut env = Envelope::default();
        for axis in 0..3 {
            let n = shape[axis];
            if n == 1 {
                continue;
            }
            let w = spacing[axis] * spacing[axis];
            let stride = strides[axis];
            let (o1, o2) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for a in 0..shape[o1] {
                for b in 0..shape[o2] {
                    let base = a * strides[o1] + b * strides[o2];
                    line.clear();
                    line.extend((0..n).map(|k| values[base + k * stride]));
                    env.transform(&line, w, &mut out);
                    for (k, &v) in out.iter().enumerate() {
                        values[base + k * stride] = v;
                    }
                }
            }
        }
        SqDistanceField { lo, shape, values }
    }

    fn at(&self, c: &[usize; 3]) -> f64 {
        let (x, y, z) = (c[0] - self.lo[0], c[1] - self.lo[1], c[2] - self.lo[2]);
        self.values[(z * self.shape[1] + y) * self.shape[0] + x]
    }
}

/// Scratch buffers for the 1-D lower envelope of parabolas
/// `f(q) + w (p - q)^2`.
#[derive(Default)]
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn transform(&mut self, f: &[f64], w: f64, out: &mut Vec<f64>) {
        let n = f.len();
        out.clear();
        self.sites.clear();
        self.bounds.clear();
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&v) => {
                        let s = intersect(f, w, v, q);
                        if s <= *self.bounds.last().unwrap() {
                            self.sites.pop();
                            self.bounds.pop();
                        } else {
                            self.sites.push(q);
                            self.bounds.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            out.resize(n, f64::INFINITY);
            return;
        }
        let mut k = 0;
        for p in 0..n {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < p as f64 {
                k += 1;
            }
            let v = self.sites[k];
            let d = p as f64 - v as f64;
            out.push(f[v] + w * d * d);
        }
    }
}

#[inline]
fn intersect(f: &[f64], w: f64, v: usize, q: usize) -> f64 {
    let (vf, qf) = (v as f64, q as f64);
    ((f[q] + w * qf * qf) - (f[v] + w * vf * vf)) / (2.0 * w * (qf - vf))
}
