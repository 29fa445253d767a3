//! Dataset-level stages shared by the command line and the test suites:
//! metrics over a manifest, labelling, error generation, feature extraction,
//! prediction, evaluation and detection-limit sweeps.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::eval::{
    confusion, detection_limit, report, ContourScorer, DetectionLimitResult, DetectionParams,
    DetectionSample, EvalReport,
};
use crate::features::{extract_classical, FeatureVector};
use crate::metrics::{metric_triple, organ_volume, slice_metric_triple, MetricTriple};
use crate::ocsvm::{decision, OcsvmModel};
use crate::perturb::{generate_error, PerturbationKind, PerturbationSpec};
use crate::phantom::{read_manifest, ManifestRow};
use crate::quality::{fit_thresholds_with, label, DirectionMode, Quality, ThresholdSet};
use crate::volume::{
    load_mask, load_volume, normalize_u8, preprocess_slice, save_volume, Grid2, Provenance,
    Volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricsMode {
    #[serde(rename = "2d")]
    Slice2d,
    #[serde(rename = "3d")]
    Volume3d,
}

impl MetricsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricsMode::Slice2d => "2d",
            MetricsMode::Volume3d => "3d",
        }
    }
}

impl FromStr for MetricsMode {
    type Err = QaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(MetricsMode::Slice2d),
            "3d" => Ok(MetricsMode::Volume3d),
            _ => Err(QaError::InvalidArgument(format!("unknown metrics mode `{s}`"))),
        }
    }
}

/// One metrics row. 3-D rows use `slice = -1`; `label` and `failed` are
/// filled by [`label_rows`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case_id: String,
    pub organ: String,
    pub mode: MetricsMode,
    pub slice: i64,
    pub dsc: f64,
    pub hd95: f64,
    pub msd: f64,
    /// Ground-truth voxel count of the slice (2-D) or organ (3-D).
    pub volume_vox: usize,
    pub label: Option<Quality>,
    pub failed: Option<String>,
}

impl MetricsRow {
    pub fn triple(&self) -> MetricTriple {
        MetricTriple {
            dsc: self.dsc,
            hd95: self.hd95,
            msd: self.msd,
        }
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A manifest with paths resolved against its directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Dataset {
    pub fn open(manifest: &Path) -> Result<Self> {
        let rows = read_manifest(manifest)?;
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Dataset { root, rows })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn case_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.case_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Rows restricted to the given cases (all rows when `cases` is `None`).
    pub fn filter(&self, cases: Option<&[String]>) -> Dataset {
        Dataset {
            root: self.root.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| cases.is_none_or(|c| c.contains(&r.case_id)))
                .cloned()
                .collect(),
        }
    }
}

/// Loaded volumes for one manifest row.
pub struct LoadedOrgan {
    pub row: ManifestRow,
    /// CT normalized to u8.
    pub image: Volume,
    pub gt: Volume,
    pub agc: Volume,
}

fn load_organ(ds: &Dataset, row: &ManifestRow, window: (f64, f64)) -> Result<LoadedOrgan> {
    let ct = load_volume(ds.resolve(&row.ct_path))?;
    let gt = load_mask(ds.resolve(&row.gt_path))?;
    let agc = load_mask(ds.resolve(&row.agc_path))?;
    if ct.dims() != gt.dims() || gt.dims() != agc.dims() {
        return Err(QaError::DimensionMismatch(format!(
            "{}/{}: ct, gt and agc dims differ",
            row.case_id, row.organ
        )));
    }
    Ok(LoadedOrgan {
        row: row.clone(),
        image: normalize_u8(&ct, window)?,
        gt,
        agc,
    })
}

fn for_each_organ<T: Send>(
    ds: &Dataset,
    window: (f64, f64),
    f: impl Fn(&LoadedOrgan) -> Result<Vec<T>> + Sync,
) -> Result<Vec<T>> {
    let chunks = ds
        .rows
        .par_iter()
        .map(|row| f(&load_organ(ds, row, window)?))
        .collect::<Result<Vec<Vec<T>>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Per-slice metrics in pixel units (slices where both contours are
/// non-empty), or per-organ metrics in mm.
pub fn compute_metrics(ds: &Dataset, mode: MetricsMode) -> Result<Vec<MetricsRow>> {
    for_each_organ(ds, (0.0, 1.0), |o| {
        let row = |slice: i64, m: MetricTriple, vox: usize| MetricsRow {
            case_id: o.row.case_id.clone(),
            organ: o.row.organ.clone(),
            mode,
            slice,
            dsc: m.dsc,
            hd95: m.hd95,
            msd: m.msd,
            volume_vox: vox,
            label: None,
            failed: None,
        };
        match mode {
            MetricsMode::Volume3d => {
                let m = metric_triple(&o.gt, &o.agc)?;
                Ok(vec![row(-1, m, organ_volume(&o.gt)?.0)])
            }
            MetricsMode::Slice2d => {
                let mut out = Vec::new();
                for z in 0..o.gt.dims()[2] {
                    let gt = o.gt.slice_u8(z)?;
                    let agc = o.agc.slice_u8(z)?;
                    let n = gt.count_nonzero();
                    if n == 0 || agc.count_nonzero() == 0 {
                        continue;
                    }
                    let m = slice_metric_triple(&gt, &agc, [1.0, 1.0])?;
                    out.push(row(z as i64, m, n));
                }
                Ok(out)
            }
        }
    })
}

/// Fit one threshold set per organ from the given rows.
pub fn fit_threshold_set(rows: &[MetricsRow], mode: DirectionMode) -> Result<ThresholdSet> {
    let mut by_organ: BTreeMap<&str, Vec<MetricTriple>> = BTreeMap::new();
    for r in rows {
        by_organ.entry(&r.organ).or_default().push(r.triple());
    }
    by_organ
        .into_iter()
        .map(|(organ, triples)| Ok((organ.to_string(), fit_thresholds_with(&triples, organ, mode)?)))
        .collect()
}

pub fn label_rows(rows: &mut [MetricsRow], set: &ThresholdSet) -> Result<()> {
    for r in rows {
        let t = set.get(&r.organ).ok_or_else(|| {
            QaError::InvalidArgument(format!("no thresholds for organ `{}`", r.organ))
        })?;
        let l = label(&r.triple(), t);
        r.failed = Some(l.failed_string());
        r.label = Some(l.value);
    }
    Ok(())
}

/// Label lookup by `(case, organ, slice)`, falling back to the organ-level
/// `(case, organ, -1)` row.
pub struct LabelIndex {
    map: HashMap<(String, String, i64), Quality>,
}

impl LabelIndex {
    pub fn new(rows: &[MetricsRow]) -> Self {
        let map = rows
            .iter()
            .filter_map(|r| Some(((r.case_id.clone(), r.organ.clone(), r.slice), r.label?)))
            .collect();
        LabelIndex { map }
    }

    pub fn get(&self, case_id: &str, organ: &str, slice: i64) -> Option<Quality> {
        let key = |s| (case_id.to_string(), organ.to_string(), s);
        self.map
            .get(&key(slice))
            .or_else(|| self.map.get(&key(-1)))
            .copied()
    }
}

/// How far translations go when generating errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TranslationDistance {
    Fixed(f64),
    /// Increase the distance one pixel at a time until the contour turns low.
    Escalate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbSettings {
    pub kinds: Vec<PerturbationKind>,
    pub translation: TranslationDistance,
    pub disk_radius: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl PerturbSettings {
    pub fn new(seed: u64) -> Self {
        PerturbSettings {
            kinds: PerturbationKind::ALL.to_vec(),
            translation: TranslationDistance::Escalate,
            disk_radius: crate::perturb::DEFAULT_DISK_RADIUS,
            max_iterations: crate::perturb::DEFAULT_MAX_ITERATIONS,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub case_id: String,
    pub organ: String,
    pub slice: i64,
    pub kind: PerturbationKind,
    /// Translation distance in pixels, or the disk radius.
    pub param: f64,
    pub iterations: usize,
    pub dsc: f64,
    pub hd95: f64,
    pub msd: f64,
    pub label: Quality,
    pub mask_path: String,
}

/// A generated error with the image it belongs to.
pub struct GeneratedSample {
    pub row: PerturbRow,
    pub image: Grid2<u8>,
    pub mask: Grid2<u8>,
}

/// Generate every requested error kind for every high-quality 2-D slice.
/// Slices where generation fails are skipped; the count is returned.
pub fn generate_errors(
    ds: &Dataset,
    labels: &[MetricsRow],
    thresholds: &ThresholdSet,
    settings: &PerturbSettings,
    window: (f64, f64),
) -> Result<(Vec<GeneratedSample>, usize)> {
    let mut high: HashMap<(String, String), Vec<i64>> = HashMap::new();
    for r in labels {
        if r.mode == MetricsMode::Slice2d && r.label == Some(Quality::High) {
            high.entry((r.case_id.clone(), r.organ.clone()))
                .or_default()
                .push(r.slice);
        }
    }
    let results = for_each_organ(ds, window, |o| {
        let Some(slices) = high.get(&(o.row.case_id.clone(), o.row.organ.clone())) else {
            return Ok(Vec::new());
        };
        let t = thresholds.get(&o.row.organ).ok_or_else(|| {
            QaError::InvalidArgument(format!("no thresholds for organ `{}`", o.row.organ))
        })?;
        let mut out = Vec::new();
        for &z in slices {
            let gt = o.gt.slice_u8(z as usize)?;
            let agc = o.agc.slice_u8(z as usize)?;
            let image = o.image.slice_u8(z as usize)?;
            for &kind in &settings.kinds {
                let mut spec = PerturbationSpec::new(
                    kind,
                    crate::seed_of!(settings.seed, &o.row.case_id, &o.row.organ, z, kind.as_str()),
                );
                spec.disk_radius = settings.disk_radius;
                spec.max_iterations = settings.max_iterations;
                let generated = match (kind, settings.translation) {
                    (PerturbationKind::Translate, TranslationDistance::Fixed(d)) => {
                        spec.distance = d;
                        generate_error(&gt, &agc, &spec, t)
                    }
                    (PerturbationKind::Translate, TranslationDistance::Escalate) => {
                        let mut last = Err(QaError::Generation("no distance tried".into()));
                        for d in 1..=settings.max_iterations {
                            spec.distance = d as f64;
                            last = generate_error(&gt, &agc, &spec, t);
                            if !matches!(last, Err(QaError::Generation(_))) {
                                break;
                            }
                        }
                        last
                    }
                    _ => generate_error(&gt, &agc, &spec, t),
                };
                let g = match generated {
                    Ok(g) => g,
                    Err(QaError::Generation(_)) | Err(QaError::EmptyMask(_)) => {
                        out.push(None);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let param = match kind {
                    PerturbationKind::Translate => spec.distance,
                    _ => settings.disk_radius as f64,
                };
                out.push(Some(GeneratedSample {
                    row: PerturbRow {
                        case_id: o.row.case_id.clone(),
                        organ: o.row.organ.clone(),
                        slice: z,
                        kind,
                        param,
                        iterations: g.iterations,
                        dsc: g.metrics.dsc,
                        hd95: g.metrics.hd95,
                        msd: g.metrics.msd,
                        label: Quality::Low,
                        mask_path: format!(
                            "masks/{}_{}_{}_{}.qav",
                            o.row.case_id,
                            o.row.organ,
                            z,
                            kind.as_str()
                        ),
                    },
                    image: image.clone(),
                    mask: g.mask,
                }));
            }
        }
        Ok(out)
    })?;
    let failed = results.iter().filter(|r| r.is_none()).count();
    Ok((results.into_iter().flatten().collect(), failed))
}

/// Write generated masks under `out_dir` and the manifest to `manifest`.
pub fn save_generated(samples: &[GeneratedSample], out_dir: &Path, manifest: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir.join("masks"))?;
    samples.par_iter().try_for_each(|s| {
        let v = Volume::from_mask_slice(&s.mask, [1.0, 1.0])?;
        save_volume(&v, out_dir.join(&s.row.mask_path))
    })?;
    let rows: Vec<&PerturbRow> = samples.iter().map(|s| &s.row).collect();
    write_csv(&rows, manifest)
}

fn features_of(
    image: &Grid2<u8>,
    mask: &Grid2<u8>,
    margin: usize,
    case_id: &str,
    organ: &str,
    slice: i64,
    label: Option<Quality>,
) -> Result<FeatureVector> {
    let crop = preprocess_slice(
        image,
        mask,
        margin,
        Provenance {
            case_id: case_id.to_string(),
            organ: organ.to_string(),
            slice,
            bbox: None,
        },
    )?;
    let mut f = extract_classical(&crop);
    f.label = label;
    Ok(f)
}

/// Features of every labelled AGC slice in the dataset.
pub fn extract_dataset_features(
    ds: &Dataset,
    labels: &LabelIndex,
    window: (f64, f64),
    margin: usize,
) -> Result<Vec<FeatureVector>> {
    for_each_organ(ds, window, |o| {
        let mut out = Vec::new();
        for z in 0..o.agc.dims()[2] {
            let Some(l) = labels.get(&o.row.case_id, &o.row.organ, z as i64) else {
                continue;
            };
            let agc = o.agc.slice_u8(z)?;
            if agc.count_nonzero() == 0 || o.gt.slice_u8(z)?.count_nonzero() == 0 {
                continue;
            }
            let image = o.image.slice_u8(z)?;
            out.push(features_of(
                &image,
                &agc,
                margin,
                &o.row.case_id,
                &o.row.organ,
                z as i64,
                Some(l),
            )?);
        }
        Ok(out)
    })
}

/// Features of generated errors, all labelled low.
pub fn extract_generated_features(
    samples: &[GeneratedSample],
    margin: usize,
) -> Result<Vec<FeatureVector>> {
    samples
        .par_iter()
        .map(|s| {
            features_of(
                &s.image,
                &s.mask,
                margin,
                &s.row.case_id,
                &s.row.organ,
                s.row.slice,
                Some(Quality::Low),
            )
        })
        .collect()
}

/// Reload generated errors written by [`save_generated`].
pub fn load_generated(
    ds: &Dataset,
    manifest: &Path,
    window: (f64, f64),
) -> Result<Vec<GeneratedSample>> {
    let rows: Vec<PerturbRow> = read_csv(manifest)?;
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let ct_paths: HashMap<(&str, &str), &str> = ds
        .rows
        .iter()
        .map(|r| ((r.case_id.as_str(), r.organ.as_str()), r.ct_path.as_str()))
        .collect();
    rows.into_par_iter()
        .map(|row| {
            let ct_rel = ct_paths
                .get(&(row.case_id.as_str(), row.organ.as_str()))
                .ok_or_else(|| {
                    QaError::InvalidArgument(format!(
                        "{}/{} is not in the dataset manifest",
                        row.case_id, row.organ
                    ))
                })?;
            let ct = normalize_u8(&load_volume(ds.resolve(ct_rel))?, window)?;
            let slice = usize::try_from(row.slice)
                .map_err(|_| QaError::Format(format!("negative slice {}", row.slice)))?;
            if slice >= ct.dims()[2] {
                return Err(QaError::Format(format!("slice {slice} out of range")));
            }
            let image = ct.slice_u8(slice)?;
            let mask = load_mask(dir.join(&row.mask_path))?.slice_u8(0)?;
            if mask.width() != image.width() || mask.height() != image.height() {
                return Err(QaError::DimensionMismatch(format!(
                    "generated mask {} does not match its CT slice",
                    row.mask_path
                )));
            }
            Ok(GeneratedSample { row, image, mask })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub case_id: String,
    pub organ: String,
    /// `-1` for organ-level aggregates.
    pub slice: i64,
    pub label: Option<Quality>,
    /// Decision value; negative means low quality.
    pub score: f64,
    pub prediction: Quality,
}

/// Models keyed by organ, with an optional fallback for any organ.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub by_organ: BTreeMap<String, OcsvmModel>,
    pub fallback: Option<OcsvmModel>,
}

impl ModelSet {
    pub fn single(model: OcsvmModel) -> Self {
        ModelSet {
            by_organ: BTreeMap::new(),
            fallback: Some(model),
        }
    }

    pub fn get(&self, organ: &str) -> Result<&OcsvmModel> {
        self.by_organ
            .get(organ)
            .or(self.fallback.as_ref())
            .ok_or_else(|| QaError::InvalidArgument(format!("no model for organ `{organ}`")))
    }
}

pub fn predict_features(models: &ModelSet, features: &[FeatureVector]) -> Result<Vec<PredictionRow>> {
    features
        .par_iter()
        .map(|f| {
            let score = decision(models.get(&f.organ)?, f)?;
            Ok(PredictionRow {
                case_id: f.case_id.clone(),
                organ: f.organ.clone(),
                slice: f.slice,
                label: f.label,
                score,
                prediction: if score < 0.0 { Quality::Low } else { Quality::High },
            })
        })
        .collect()
}

/// Slice-to-organ aggregation of decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregate {
    /// Low when the mean decision value is negative.
    Mean,
    /// Low when any slice is low.
    Any,
    /// Low when at least this fraction of slices is low.
    Fraction(f64),
}

impl FromStr for Aggregate {
    type Err = QaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregate::Mean),
            "any" => Ok(Aggregate::Any),
            _ => {
                let theta = s
                    .strip_prefix("fraction:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .filter(|t| (0.0..=1.0).contains(t))
                    .ok_or_else(|| {
                        QaError::InvalidArgument(format!(
                            "aggregate must be mean, any or fraction:θ with θ in [0,1], got `{s}`"
                        ))
                    })?;
                Ok(Aggregate::Fraction(theta))
            }
        }
    }
}

/// One row per (case, organ). The organ label is low when any slice label
/// is low, and absent when any slice is unlabelled.
pub fn aggregate_predictions(rows: &[PredictionRow], how: Aggregate) -> Vec<PredictionRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.case_id, &r.organ)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((case_id, organ), g)| {
            let n = g.len() as f64;
            let mean = g.iter().map(|r| r.score).sum::<f64>() / n;
            let low_frac = g.iter().filter(|r| r.prediction == Quality::Low).count() as f64 / n;
            let low = match how {
                Aggregate::Mean => mean < 0.0,
                Aggregate::Any => low_frac > 0.0,
                Aggregate::Fraction(theta) => low_frac >= theta,
            };
            let label = g
                .iter()
                .map(|r| r.label)
                .collect::<Option<Vec<Quality>>>()
                .map(|ls| {
                    if ls.contains(&Quality::Low) {
                        Quality::Low
                    } else {
                        Quality::High
                    }
                });
            PredictionRow {
                case_id: case_id.to_string(),
                organ: organ.to_string(),
                slice: -1,
                label,
                score: mean,
                prediction: if low { Quality::Low } else { Quality::High },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrganReport {
    pub organ: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// One report per organ over labelled predictions. AUC uses the negated
/// decision value so that larger means more likely low.
pub fn evaluate_predictions(rows: &[PredictionRow]) -> Result<Vec<OrganReport>> {
    let mut groups: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.label.is_some()) {
        groups.entry(&r.organ).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(QaError::InvalidArgument("no labelled predictions".into()));
    }
    groups
        .into_iter()
        .map(|(organ, g)| {
            let preds: Vec<Quality> = g.iter().map(|r| r.prediction).collect();
            let labels: Vec<Quality> = g.iter().map(|r| r.label.expect("filtered")).collect();
            let scores: Vec<f64> = g.iter().map(|r| -r.score).collect();
            let c = confusion(&preds, &labels)?;
            Ok(OrganReport {
                organ: organ.to_string(),
                report: report(&c, &scores, &labels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub organ: String,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub ba: Option<f64>,
    pub f: Option<f64>,
    pub sens: Option<f64>,
    pub spec: Option<f64>,
    pub auc: Option<f64>,
}

impl From<&OrganReport> for ReportRow {
    fn from(r: &OrganReport) -> Self {
        let c = &r.report.counts;
        ReportRow {
            organ: r.organ.clone(),
            tp: c.tp,
            fn_: c.fn_,
            tn: c.tn,
            fp: c.fp,
            ba: r.report.balanced_accuracy,
            f: r.report.f_score,
            sens: r.report.sensitivity,
            spec: r.report.specificity,
            auc: r.report.auc,
        }
    }
}

/// High-quality 2-D slices as detection-limit samples, grouped by organ.
pub fn detection_samples(
    ds: &Dataset,
    labels: &[MetricsRow],
    window: (f64, f64),
) -> Result<BTreeMap<String, Vec<DetectionSample>>> {
    let mut high: HashMap<(String, String), Vec<i64>> = HashMap::new();
    for r in labels {
        if r.mode == MetricsMode::Slice2d && r.label == Some(Quality::High) {
            high.entry((r.case_id.clone(), r.organ.clone()))
                .or_default()
                .push(r.slice);
        }
    }
    let samples = for_each_organ(ds, window, |o| {
        let Some(slices) = high.get(&(o.row.case_id.clone(), o.row.organ.clone())) else {
            return Ok(Vec::new());
        };
        slices
            .iter()
            .map(|&z| {
                Ok(DetectionSample {
                    id: format!("{}/{}/{}", o.row.case_id, o.row.organ, z),
                    organ: o.row.organ.clone(),
                    slice: z,
                    image: o.image.slice_u8(z as usize)?,
                    agc: o.agc.slice_u8(z as usize)?,
                })
            })
            .collect()
    })?;
    let mut by_organ: BTreeMap<String, Vec<DetectionSample>> = BTreeMap::new();
    for s in samples {
        by_organ.entry(s.organ.clone()).or_default().push(s);
    }
    Ok(by_organ)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub organ: String,
    pub distance: usize,
    pub rate: f64,
    pub limit: Option<usize>,
}

pub fn trace_rows(r: &DetectionLimitResult) -> Vec<TraceRow> {
    r.per_distance
        .iter()
        .map(|d| TraceRow {
            organ: r.organ.clone(),
            distance: d.distance,
            rate: d.rate,
            limit: r.limit,
        })
        .collect()
}

/// Run the detection-limit sweep for each organ with its own scorer.
pub fn detection_limits<S: ContourScorer>(
    samples: &BTreeMap<String, Vec<DetectionSample>>,
    scorer_for: impl Fn(&str) -> Result<S>,
    params: &DetectionParams,
) -> Result<Vec<DetectionLimitResult>> {
    samples
        .iter()
        .map(|(organ, s)| detection_limit(&scorer_for(organ)?, organ, s, params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrganFactors {
    pub organ: String,
    pub limit: Option<usize>,
    /// Mean ground-truth voxel count over the organ's metric rows.
    pub size: f64,
    pub dsc: f64,
    pub hd95: f64,
    pub msd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub organs: Vec<OrganFactors>,
    /// Pearson r between limit and each factor, over organs with a limit.
    pub r_size: Option<f64>,
    pub r_dsc: Option<f64>,
    pub r_hd95: Option<f64>,
    pub r_msd: Option<f64>,
}

pub fn correlate(limits: &[TraceRow], metrics: &[MetricsRow]) -> Result<Correlation> {
    let mut limit_of: BTreeMap<&str, Option<usize>> = BTreeMap::new();
    for t in limits {
        limit_of.insert(&t.organ, t.limit);
    }
    let mut organs = Vec::new();
    for (organ, limit) in limit_of {
        let rows: Vec<&MetricsRow> = metrics.iter().filter(|m| m.organ == organ).collect();
        if rows.is_empty() {
            return Err(QaError::InvalidArgument(format!(
                "no metrics rows for organ `{organ}`"
            )));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        organs.push(OrganFactors {
            organ: organ.to_string(),
            limit,
            size: mean(|r| r.volume_vox as f64),
            dsc: mean(|r| r.dsc),
            hd95: mean(|r| r.hd95),
            msd: mean(|r| r.msd),
        });
    }
    let with_limit: Vec<&OrganFactors> = organs.iter().filter(|o| o.limit.is_some()).collect();
    let ls: Vec<f64> = with_limit.iter().map(|o| o.limit.unwrap() as f64).collect();
    let r = |f: fn(&OrganFactors) -> f64| {
        let xs: Vec<f64> = with_limit.iter().map(|o| f(o)).collect();
        crate::eval::pearson(&ls, &xs).ok()
    };
    Ok(Correlation {
        r_size: r(|o| o.size),
        r_dsc: r(|o| o.dsc),
        r_hd95: r(|o| o.hd95),
        r_msd: r(|o| o.msd),
        organs,
    })
}
