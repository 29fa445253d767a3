//! Classification metrics (positive class = low quality), ROC/AUC,
//! Pearson correlation and the translation detection-limit experiment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::features::{extract_classical, FeatureVector};
use crate::ocsvm::{decision, OcsvmModel};
use crate::perturb::{random_angle, translate_mask};
use crate::quality::Quality;
use crate::volume::{preprocess_slice, Grid2, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        let pos = (self.tp + self.fn_) as u128;
        let neg = (self.tn + self.fp) as u128;
        if pos == 0 || neg == 0 {
            return None;
        }
        // Single rounding: (tp·neg + tn·pos) / (2·pos·neg).
        let num = self.tp as u128 * neg + self.tn as u128 * pos;
        Some(num as f64 / (2 * pos * neg) as f64)
    }

    pub fn f_score(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fn_ + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics with undefined values (zero denominators) left as `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub balanced_accuracy: Option<f64>,
    pub f_score: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
}

pub fn confusion(predictions: &[Quality], labels: &[Quality]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(QaError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(QaError::InvalidArgument("no samples to evaluate".into()));
    }
    let mut c = ConfusionCounts::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Quality::Low, Quality::Low) => c.tp += 1,
            (Quality::High, Quality::High) => c.tn += 1,
            (Quality::Low, Quality::High) => c.fp += 1,
            (Quality::High, Quality::Low) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Confusion-derived metrics plus AUC. `scores` are oriented so larger
/// means more likely low quality; AUC is `None` unless both classes occur.
pub fn report(c: &ConfusionCounts, scores: &[f64], labels: &[Quality]) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(QaError::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(EvalReport {
        balanced_accuracy: c.balanced_accuracy(),
        f_score: c.f_score(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        auc: auc(scores, labels)?,
        counts: *c,
    })
}

/// Mann–Whitney AUC: probability that a random low-quality sample scores
/// above a random high-quality one, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[Quality]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(QaError::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(QaError::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == Quality::Low).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == Quality::Low {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q)))
}

/// Empirical ROC points `(fpr, tpr)` from the highest threshold down,
/// grouping tied scores into one step.
pub fn roc_curve(scores: &[f64], labels: &[Quality]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&l| l == Quality::Low).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == Quality::Low {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / n_neg, tp / n_pos));
    }
    pts
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(QaError::DimensionMismatch(format!(
            "{} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(QaError::InvalidArgument(
            "pearson needs at least 2 pairs".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(QaError::InvalidArgument("pearson of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Detection limit

/// One high-quality contour used by the detection-limit experiment, in the
/// coordinates of its full (normalized) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub id: String,
    pub organ: String,
    pub slice: i64,
    pub image: Grid2<u8>,
    pub agc: Grid2<u8>,
}

/// Scores a contour on its slice; non-negative means accepted (high).
pub trait ContourScorer: Sync {
    fn score(&self, sample: &DetectionSample, mask: &Grid2<u8>) -> Result<f64>;
}

/// Crop, resize, extract `classical-v1` features and score with an OC-SVM.
pub struct OcsvmScorer<'a> {
    pub model: &'a OcsvmModel,
    pub margin: usize,
}

/// Crop and resize a contour on its slice, then extract `classical-v1`
/// features.
pub fn contour_features(
    sample: &DetectionSample,
    mask: &Grid2<u8>,
    margin: usize,
) -> Result<FeatureVector> {
    let crop = preprocess_slice(
        &sample.image,
        mask,
        margin,
        Provenance {
            case_id: sample.id.clone(),
            organ: sample.organ.clone(),
            slice: sample.slice,
            bbox: None,
        },
    )?;
    Ok(extract_classical(&crop))
}

impl ContourScorer for OcsvmScorer<'_> {
    fn score(&self, sample: &DetectionSample, mask: &Grid2<u8>) -> Result<f64> {
        decision(self.model, &contour_features(sample, mask, self.margin)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectionMode {
    /// Rate = fraction of perturbed contours predicted low.
    #[default]
    PerturbedOnly,
    /// Rate = balanced accuracy over perturbed contours and the originals.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionParams {
    pub d_max: usize,
    pub repeats: usize,
    pub rate_threshold: f64,
    pub seed: u64,
    pub mode: DetectionMode,
}

impl DetectionParams {
    pub fn new(d_max: usize, repeats: usize, seed: u64) -> Self {
        DetectionParams {
            d_max,
            repeats,
            rate_threshold: 0.90,
            seed,
            mode: DetectionMode::PerturbedOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRate {
    pub distance: usize,
    pub rate: f64,
    pub generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionLimitResult {
    pub organ: String,
    pub limit: Option<usize>,
    pub per_distance: Vec<DistanceRate>,
}

/// Scan `d = 1..=d_max`, translating every contour `repeats` times in
/// seeded random directions; the limit is the smallest `d` whose detection
/// rate reaches the threshold.
pub fn detection_limit(
    scorer: &dyn ContourScorer,
    organ: &str,
    samples: &[DetectionSample],
    params: &DetectionParams,
) -> Result<DetectionLimitResult> {
    if samples.is_empty() {
        return Err(QaError::InvalidArgument(
            "detection limit needs at least one contour".into(),
        ));
    }
    if params.repeats < 1 || params.d_max < 1 {
        return Err(QaError::InvalidArgument(
            "repeats and d_max must be >= 1".into(),
        ));
    }
    let specificity = match params.mode {
        DetectionMode::PerturbedOnly => None,
        DetectionMode::Mixed => {
            let accepted = samples
                .par_iter()
                .map(|s| scorer.score(s, &s.agc).map(|v| v >= 0.0))
                .collect::<Result<Vec<bool>>>()?;
            Some(accepted.iter().filter(|&&a| a).count() as f64 / samples.len() as f64)
        }
    };

    let mut per_distance = Vec::with_capacity(params.d_max);
    let mut limit = None;
    let mut total_generated = 0;
    for d in 1..=params.d_max {
        let jobs: Vec<(usize, usize)> = (0..samples.len())
            .flat_map(|s| (0..params.repeats).map(move |k| (s, k)))
            .collect();
        let outcomes = jobs
            .par_iter()
            .map(|&(s, k)| {
                let sample = &samples[s];
                let seed = crate::seed_of!(params.seed, &sample.id, d, k);
                match translate_mask(&sample.agc, d as f64, random_angle(seed)) {
                    Ok(mask) => scorer.score(sample, &mask).map(|v| Some(v < 0.0)),
                    Err(QaError::Generation(_)) | Err(QaError::EmptyMask(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<Option<bool>>>>()?;
        let generated = outcomes.iter().filter(|o| o.is_some()).count();
        let flagged = outcomes.iter().filter(|o| **o == Some(true)).count();
        total_generated += generated;
        let detect = if generated > 0 {
            flagged as f64 / generated as f64
        } else {
            0.0
        };
        let rate = match specificity {
            Some(spec) => 0.5 * (detect + spec),
            None => detect,
        };
        if limit.is_none() && generated > 0 && rate >= params.rate_threshold {
            limit = Some(d);
        }
        per_distance.push(DistanceRate {
            distance: d,
            rate,
            generated,
        });
    }
    if total_generated == 0 {
        return Err(QaError::Generation(
            "every translated contour left the grid".into(),
        ));
    }
    Ok(DetectionLimitResult {
        organ: organ.to_string(),
        limit,
        per_distance,
    })
}
