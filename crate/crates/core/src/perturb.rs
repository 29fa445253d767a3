//! Seeded generation of low-quality contours from high-quality ones by
//! translation, enlargement (dilation) and shrinkage (erosion).

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::metrics::{slice_metric_triple, MetricTriple};
use crate::quality::{label, Quality, QualityThresholds};
use crate::rng::rng_from;
use crate::volume::Grid2;

pub const DEFAULT_DISK_RADIUS: usize = 2;
pub const DEFAULT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Translate,
    Enlarge,
    Shrink,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::Translate,
        PerturbationKind::Enlarge,
        PerturbationKind::Shrink,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Translate => "translate",
            PerturbationKind::Enlarge => "enlarge",
            PerturbationKind::Shrink => "shrink",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(PerturbationKind::Translate),
            "enlarge" => Ok(PerturbationKind::Enlarge),
            "shrink" => Ok(PerturbationKind::Shrink),
            other => Err(QaError::InvalidArgument(format!(
                "unknown perturbation kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Translation distance in pixels.
    pub distance: f64,
    pub disk_radius: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, seed: u64) -> Self {
        PerturbationSpec {
            kind,
            distance: 0.0,
            disk_radius: DEFAULT_DISK_RADIUS,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance >= 0.0 && self.distance.is_finite()) {
            return Err(QaError::InvalidArgument(format!(
                "distance must be >= 0, got {}",
                self.distance
            )));
        }
        if self.disk_radius < 1 {
            return Err(QaError::InvalidArgument("disk radius must be >= 1".into()));
        }
        if self.max_iterations < 1 {
            return Err(QaError::InvalidArgument("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Lattice offsets with `dx² + dy² <= r²`.
pub fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Integer shift of `(round(d cos θ), round(d sin θ))`. Pixels pushed off
/// the grid are dropped.
pub fn translate_mask(mask: &Grid2<u8>, distance: f64, angle: f64) -> Result<Grid2<u8>> {
    if mask.count_nonzero() == 0 {
        return Err(QaError::EmptyMask("translate_mask input".into()));
    }
    let dx = (distance * angle.cos()).round() as i64;
    let dy = (distance * angle.sin()).round() as i64;
    let out = shift_mask(mask, dx, dy);
    if out.count_nonzero() == 0 {
        return Err(QaError::Generation(
            "mask shifted entirely off the grid".into(),
        ));
    }
    Ok(out)
}

pub fn shift_mask(mask: &Grid2<u8>, dx: i64, dy: i64) -> Grid2<u8> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Grid2::filled(w, h, 0u8);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                out.set(nx as usize, ny as usize, 1);
            }
        }
    }
    out
}

/// Binary dilation by the discrete disk, clipped to the grid.
pub fn dilate(mask: &Grid2<u8>, disk_radius: usize) -> Grid2<u8> {
    let offsets = disk_offsets(disk_radius);
    let (w, h) = (mask.width(), mask.height());
    let mut out = Grid2::filled(w, h, 0u8);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out.set(nx as usize, ny as usize, 1);
                }
            }
        }
    }
    out
}

/// Binary erosion by the discrete disk; out-of-grid pixels are background.
pub fn erode(mask: &Grid2<u8>, disk_radius: usize) -> Grid2<u8> {
    let offsets = disk_offsets(disk_radius);
    let (w, h) = (mask.width(), mask.height());
    let mut out = Grid2::filled(w, h, 0u8);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            let inside = offsets.iter().all(|&(dx, dy)| {
                mask.get_signed(x as i64 + dx, y as i64 + dy).unwrap_or(0) != 0
            });
            if inside {
                out.set(x, y, 1);
            }
        }
    }
    out
}

/// A generated low-quality contour.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedError {
    pub mask: Grid2<u8>,
    pub iterations: usize,
    pub metrics: MetricTriple,
    /// Translation angle (radians) for translate errors.
    pub angle: Option<f64>,
}

/// Slice metrics in pixel units.
fn pixel_metrics(gt: &Grid2<u8>, agc: &Grid2<u8>) -> Result<MetricTriple> {
    slice_metric_triple(gt, agc, [1.0, 1.0])
}

/// Uniform angle in `[0, 2π)` drawn from `seed`.
pub fn random_angle(seed: u64) -> f64 {
    rng_from(seed).random_range(0.0..TAU)
}

/// Turn a high-quality AGC into a low-quality one against a fixed GT.
pub fn generate_error(
    gt: &Grid2<u8>,
    agc: &Grid2<u8>,
    spec: &PerturbationSpec,
    thresholds: &QualityThresholds,
) -> Result<GeneratedError> {
    spec.validate()?;
    if gt.width() != agc.width() || gt.height() != agc.height() {
        return Err(QaError::DimensionMismatch(format!(
            "gt {}x{} vs agc {}x{}",
            gt.width(),
            gt.height(),
            agc.width(),
            agc.height()
        )));
    }
    let start = pixel_metrics(gt, agc)?;
    if label(&start, thresholds).value != Quality::High {
        return Err(QaError::InvalidArgument(
            "starting contour is not high quality".into(),
        ));
    }
    match spec.kind {
        PerturbationKind::Translate => {
            let angle = random_angle(spec.seed);
            let mask = translate_mask(agc, spec.distance, angle)?;
            let metrics = pixel_metrics(gt, &mask)?;
            if label(&metrics, thresholds).value != Quality::Low {
                return Err(QaError::Generation(format!(
                    "translation by {} px stays high quality",
                    spec.distance
                )));
            }
            Ok(GeneratedError {
                mask,
                iterations: 1,
                metrics,
                angle: Some(angle),
            })
        }
        PerturbationKind::Enlarge | PerturbationKind::Shrink => {
            let grow = spec.kind == PerturbationKind::Enlarge;
            let total = agc.width() * agc.height();
            let mut current = agc.clone();
            for iteration in 1..=spec.max_iterations {
                let next = if grow {
                    dilate(&current, spec.disk_radius)
                } else {
                    erode(&current, spec.disk_radius)
                };
                let count = next.count_nonzero();
                if !grow && count == 0 {
                    return Err(QaError::Generation(format!(
                        "mask vanished after {iteration} erosions"
                    )));
                }
                if grow && (count == total || next == current) {
                    return Err(QaError::Generation(format!(
                        "mask filled the grid after {iteration} dilations"
                    )));
                }
                let metrics = pixel_metrics(gt, &next)?;
                if label(&metrics, thresholds).value == Quality::Low {
                    return Ok(GeneratedError {
                        mask: next,
                        iterations: iteration,
                        metrics,
                        angle: None,
                    });
                }
                current = next;
            }
            Err(QaError::Generation(format!(
                "still high quality after {} iterations",
                spec.max_iterations
            )))
        }
    }
}
