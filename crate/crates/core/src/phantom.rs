//! Seeded synthetic CT phantoms with elliptical organs, ground-truth masks
//! and automatically-generated contours with controllable error.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::rng::rng_from;
use crate::volume::{save_volume, Volume, Voxels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    /// Ellipse centre in pixels (x, y).
    pub center: [f64; 2],
    /// Semi-axes in pixels (x, y).
    pub semi_axes: [f64; 2],
    /// Intensity offset from the background, in HU.
    pub contrast: f64,
    /// Standard deviation of per-case centre and semi-axis jitter, in pixels.
    pub jitter_std: f64,
    /// Multiplier on the AGC translation error for this organ.
    #[serde(default = "unit_scale")]
    pub agc_error_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgcError {
    /// Fraction of organs whose AGC equals the GT exactly.
    pub clean_fraction: f64,
    /// Standard deviation of the AGC translation, in pixels.
    pub translation_std: f64,
    /// Standard deviation of the relative AGC semi-axis scaling.
    pub radius_scale_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub organs: Vec<OrganSpec>,
    pub grid: [usize; 3],
    pub spacing: [f64; 3],
    pub background_hu: f64,
    pub noise_std: f64,
    pub cases: usize,
    pub agc_error: AgcError,
    /// Relative amplitude of the smooth semi-axis modulation along z.
    pub slice_variation: f64,
    pub seed: u64,
}

fn organ(name: &str, center: [f64; 2], semi_axes: [f64; 2], contrast: f64) -> OrganSpec {
    OrganSpec {
        name: name.to_string(),
        center,
        semi_axes,
        contrast,
        jitter_std: 1.0,
        agc_error_scale: 1.0,
    }
}

impl OrganSpec {
    pub fn with_error_scale(mut self, scale: f64) -> Self {
        self.agc_error_scale = scale;
        self
    }
}

impl PhantomSpec {
    /// A thorax-like layout with five organs spanning roughly 1:40 in area.
    pub fn thorax(cases: usize, seed: u64) -> Self {
        PhantomSpec {
            organs: vec![
                organ("esophagus", [128.0, 72.0], [6.0, 5.0], 300.0),
                organ("spinal_cord", [128.0, 205.0], [7.0, 7.0], 300.0),
                organ("heart", [150.0, 128.0], [28.0, 24.0], 300.0),
                organ("lung_left", [60.0, 125.0], [28.0, 45.0], -700.0),
                organ("lung_right", [212.0, 125.0], [26.0, 45.0], -700.0),
            ],
            grid: [256, 256, 12],
            spacing: [1.0, 1.0, 2.5],
            background_hu: 40.0,
            noise_std: 20.0,
            cases,
            agc_error: AgcError {
                clean_fraction: 0.85,
                translation_std: 2.5,
                radius_scale_std: 0.08,
            },
            slice_variation: 0.1,
            seed,
        }
    }

    /// Round organs of equal contrast whose areas span roughly 1:30.
    pub fn size_series(cases: usize, seed: u64) -> Self {
        let radii = [5.0, 12.0, 17.0, 22.0, 27.0];
        let centers = [[30.0, 30.0], [30.0, 200.0], [110.0, 40.0], [110.0, 190.0], [200.0, 100.0]];
        PhantomSpec {
            organs: radii
                .iter()
                .zip(centers)
                .map(|(&r, c)| {
                    organ(&format!("disk_r{r:02}"), c, [r, r], 300.0).with_error_scale(r / 15.0)
                })
                .collect(),
            grid: [256, 256, 8],
            spacing: [1.0, 1.0, 2.5],
            background_hu: 40.0,
            noise_std: 20.0,
            cases,
            agc_error: AgcError {
                clean_fraction: 0.5,
                translation_std: 2.0,
                radius_scale_std: 0.08,
            },
            slice_variation: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases < 1 {
            return Err(QaError::InvalidArgument("cases must be >= 1".into()));
        }
        if self.organs.is_empty() {
            return Err(QaError::InvalidArgument("phantom needs at least one organ".into()));
        }
        if self.grid.contains(&0) {
            return Err(QaError::InvalidArgument("grid dims must be >= 1".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(QaError::InvalidArgument("spacing must be > 0".into()));
        }
        let e = &self.agc_error;
        if !(0.0..=1.0).contains(&e.clean_fraction)
            || !(e.translation_std >= 0.0)
            || !(e.radius_scale_std >= 0.0)
            || !(self.noise_std >= 0.0)
            || !(self.slice_variation >= 0.0 && self.slice_variation < 1.0)
        {
            return Err(QaError::InvalidArgument("invalid phantom error/noise settings".into()));
        }
        for (i, o) in self.organs.iter().enumerate() {
            if o.semi_axes.iter().any(|&a| a < 2.0) {
                return Err(QaError::InvalidArgument(format!(
                    "organ `{}` semi-axes must be >= 2 px",
                    o.name
                )));
            }
            if !(o.jitter_std >= 0.0) || !(o.agc_error_scale >= 0.0) {
                return Err(QaError::InvalidArgument(format!(
                    "organ `{}` jitter and error scale must be >= 0",
                    o.name
                )));
            }
            if self.organs[..i].iter().any(|p| p.name == o.name) {
                return Err(QaError::InvalidArgument(format!(
                    "duplicate organ name `{}`",
                    o.name
                )));
            }
            let reach = 1.0 + self.slice_variation;
            for k in 0..2 {
                let lo = o.center[k] - o.semi_axes[k] * reach;
                let hi = o.center[k] + o.semi_axes[k] * reach;
                if lo < 0.0 || hi > (self.grid[k] - 1) as f64 {
                    return Err(QaError::InvalidArgument(format!(
                        "organ `{}` does not fit in the grid",
                        o.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ellipse parameters for one organ in one slice.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.ax;
        let dy = (y as f64 - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }

    fn fits(&self, nx: usize, ny: usize) -> bool {
        self.cx - self.ax >= 0.0
            && self.cy - self.ay >= 0.0
            && self.cx + self.ax <= (nx - 1) as f64
            && self.cy + self.ay <= (ny - 1) as f64
    }
}

fn rasterize(ellipses: &[Ellipse], nx: usize, ny: usize) -> Vec<u8> {
    let mut data = vec![0u8; nx * ny * ellipses.len()];
    for (z, e) in ellipses.iter().enumerate() {
        let x0 = (e.cx - e.ax).floor().max(0.0) as usize;
        let x1 = ((e.cx + e.ax).ceil() as usize).min(nx - 1);
        let y0 = (e.cy - e.ay).floor().max(0.0) as usize;
        let y1 = ((e.cy + e.ay).ceil() as usize).min(ny - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(x, y) {
                    data[(z * ny + y) * nx + x] = 1;
                }
            }
        }
    }
    data
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganMasks {
    pub name: String,
    pub gt: Volume,
    pub agc: Volume,
    /// Whether the AGC was left identical to the GT.
    pub clean: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub ct: Volume,
    pub organs: Vec<OrganMasks>,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std.max(0.0)).expect("std is finite and non-negative")
}

/// Generate one case; fully determined by `(spec.seed, case_index)`.
pub fn generate_case(spec: &PhantomSpec, case_index: usize) -> Result<PhantomCase> {
    spec.validate()?;
    let [nx, ny, nz] = spec.grid;
    let id = case_id(case_index);
    let mut organs = Vec::with_capacity(spec.organs.len());
    let mut ct = vec![spec.background_hu; nx * ny * nz];

    for o in &spec.organs {
        let mut rng = rng_from(crate::seed_of!(spec.seed, case_index, &o.name, "shape"));
        let jitter = normal(o.jitter_std);
        let cx = o.center[0] + jitter.sample(&mut rng);
        let cy = o.center[1] + jitter.sample(&mut rng);
        let ax = (o.semi_axes[0] + jitter.sample(&mut rng)).max(2.0);
        let ay = (o.semi_axes[1] + jitter.sample(&mut rng)).max(2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let gt_ellipses: Vec<Ellipse> = (0..nz)
            .map(|z| {
                let s = 1.0
                    + spec.slice_variation
                        * (std::f64::consts::TAU * z as f64 / nz as f64 + phase).sin();
                Ellipse {
                    cx,
                    cy,
                    ax: (ax * s).max(2.0),
                    ay: (ay * s).max(2.0),
                }
            })
            .collect();
        if gt_ellipses.iter().any(|e| !e.fits(nx, ny)) {
            return Err(QaError::InvalidArgument(format!(
                "{id}: organ `{}` exits the grid",
                o.name
            )));
        }

        let mut err_rng = rng_from(crate::seed_of!(spec.seed, case_index, &o.name, "agc"));
        let clean = err_rng.random_bool(spec.agc_error.clean_fraction);
        let agc_ellipses: Vec<Ellipse> = if clean {
            gt_ellipses.clone()
        } else {
            let t = normal(spec.agc_error.translation_std * o.agc_error_scale);
            let (tx, ty) = (t.sample(&mut err_rng), t.sample(&mut err_rng));
            let scale = (1.0 + normal(spec.agc_error.radius_scale_std).sample(&mut err_rng)).max(0.2);
            gt_ellipses
                .iter()
                .map(|e| Ellipse {
                    cx: e.cx + tx,
                    cy: e.cy + ty,
                    ax: e.ax * scale,
                    ay: e.ay * scale,
                })
                .collect()
        };
        let gt = Volume::new_mask(spec.grid, spec.spacing, rasterize(&gt_ellipses, nx, ny))?;
        let agc = Volume::new_mask(spec.grid, spec.spacing, rasterize(&agc_ellipses, nx, ny))?;

        // Overlap with previously placed organs, tolerated up to 1% of the
        // smaller organ.
        let mine = gt.u8_data().expect("mask is u8");
        let my_count = mine.iter().filter(|&&v| v != 0).count();
        for other in &organs {
            let theirs = other_gt(other);
            let overlap = mine.iter().zip(theirs).filter(|(&a, &b)| a & b != 0).count();
            let their_count = theirs.iter().filter(|&&v| v != 0).count();
            if overlap as f64 > 0.01 * my_count.min(their_count) as f64 {
                return Err(QaError::InvalidArgument(format!(
                    "{id}: organs `{}` and `{}` overlap",
                    o.name, other.name
                )));
            }
        }
        for (v, &m) in ct.iter_mut().zip(mine) {
            if m != 0 {
                *v += o.contrast;
            }
        }
        organs.push(OrganMasks {
            name: o.name.clone(),
            gt,
            agc,
            clean,
        });
    }

    let mut noise_rng = rng_from(crate::seed_of!(spec.seed, case_index, "noise"));
    let noise = normal(spec.noise_std);
    let ct: Vec<i16> = ct
        .into_iter()
        .map(|v| {
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            (v + n).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    Ok(PhantomCase {
        case_id: id,
        ct: Volume::new(spec.grid, spec.spacing, Voxels::I16(ct))?,
        organs,
    })
}

fn other_gt(o: &OrganMasks) -> &[u8] {
    o.gt.u8_data().expect("mask is u8")
}

/// A manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub organ: String,
    pub gt_path: String,
    pub agc_path: String,
    pub ct_path: String,
}

/// Write every case under `out_dir` and return the manifest rows
/// (also written to `out_dir/manifest.csv`).
pub fn write_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    use rayon::prelude::*;
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let per_case: Vec<Vec<ManifestRow>> = (0..spec.cases)
        .into_par_iter()
        .map(|i| -> Result<Vec<ManifestRow>> {
            let case = generate_case(spec, i)?;
            let dir = out_dir.join(&case.case_id);
            std::fs::create_dir_all(&dir)?;
            let ct_rel = format!("{}/ct.qav", case.case_id);
            save_volume(&case.ct, out_dir.join(&ct_rel))?;
            let mut rows = Vec::new();
            for o in &case.organs {
                let gt_rel = format!("{}/{}_gt.qav", case.case_id, o.name);
                let agc_rel = format!("{}/{}_agc.qav", case.case_id, o.name);
                save_volume(&o.gt, out_dir.join(&gt_rel))?;
                save_volume(&o.agc, out_dir.join(&agc_rel))?;
                rows.push(ManifestRow {
                    case_id: case.case_id.clone(),
                    organ: o.name.clone(),
                    gt_path: gt_rel,
                    agc_path: agc_rel,
                    ct_path: ct_rel.clone(),
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ManifestRow> = per_case.into_iter().flatten().collect();
    write_manifest(&rows, &out_dir.join("manifest.csv"))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}
