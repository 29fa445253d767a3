//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on validation errors, 2 on IO or format errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::error::{QaError, Result};
use crate::eval::{DetectionMode, DetectionParams, OcsvmScorer};
use crate::features::{read_feature_file, write_feature_file, FeatureVector};
use crate::ocsvm::{
    calibrate, default_gamma_grid, load_model, save_model, train, CalibrationGrid, NoiseSpec,
    OcsvmModel, TrainConfig, DEFAULT_NU_GRID,
};
use crate::perturb::PerturbationKind;
use crate::phantom::{write_dataset, PhantomSpec};
use crate::pipeline::{
    aggregate_predictions, compute_metrics, correlate, detection_limits, detection_samples,
    evaluate_predictions, extract_dataset_features, extract_generated_features,
    fit_threshold_set, generate_errors, label_rows, load_generated, read_csv, save_generated,
    trace_rows, write_csv, Aggregate, Dataset, LabelIndex, MetricsMode, MetricsRow, ModelSet,
    PerturbSettings, PredictionRow, ReportRow, TraceRow, TranslationDistance,
};
use crate::quality::{load_thresholds, save_thresholds, DirectionMode, Quality};
use crate::volume::{DEFAULT_MARGIN, DEFAULT_WINDOW};

#[derive(Debug, Parser)]
#[command(name = "contourqa", version, about = "Contour quality assurance toolkit")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with default flag values; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Phantom(PhantomArgs),
    /// Compute DSC, HD95 and MSD for every manifest entry.
    Metrics(MetricsArgs),
    /// Fit per-organ thresholds and label metric rows.
    Label(LabelArgs),
    /// Generate translation, enlargement and shrinkage errors.
    Perturb(PerturbArgs),
    /// Extract classical features for labelled slices.
    Features(FeaturesArgs),
    /// Train a one-class SVM on high-quality feature rows.
    Train(TrainArgs),
    /// Score feature rows with trained models.
    Predict(PredictArgs),
    /// Confusion metrics and AUC per organ.
    Evaluate(EvaluateArgs),
    /// Smallest translation each organ's model detects reliably.
    DetectLimit(DetectLimitArgs),
    /// Correlate detection limits with organ size and quality.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cases: Option<usize>,
    /// JSON phantom specification; defaults to the built-in thorax layout.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WindowArgs {
    /// Intensity window `lo,hi` for u8 normalization.
    #[arg(long, allow_hyphen_values = true)]
    window: Option<String>,
}

impl WindowArgs {
    fn get(&self) -> Result<(f64, f64)> {
        let Some(w) = &self.window else {
            return Ok(DEFAULT_WINDOW);
        };
        let parts: Vec<&str> = w.split(',').collect();
        let parsed = match parts.as_slice() {
            [lo, hi] => lo.trim().parse::<f64>().ok().zip(hi.trim().parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((lo, hi)) if lo < hi && lo.is_finite() && hi.is_finite() => Ok((lo, hi)),
            _ => Err(QaError::InvalidArgument(format!(
                "window must be `lo,hi` with lo < hi, got `{w}`"
            ))),
        }
    }
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "2d")]
    mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Apply these thresholds instead of fitting new ones.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Where to write fitted thresholds.
    #[arg(long)]
    thresholds_out: Option<PathBuf>,
    #[arg(long, default_value = "prevalence-consistent")]
    direction_mode: String,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Output directory for masks and `perturbations.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of translate,enlarge,shrink.
    #[arg(long, default_value = "translate,enlarge,shrink")]
    kinds: String,
    /// Translation distance in pixels, or `auto` to grow until low.
    #[arg(long, default_value = "auto")]
    distance: String,
    #[arg(long, default_value_t = crate::perturb::DEFAULT_DISK_RADIUS)]
    disk_radius: usize,
    #[arg(long, default_value_t = crate::perturb::DEFAULT_MAX_ITERATIONS)]
    max_iterations: usize,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Labelled metrics; 3-D rows give every slice its organ's label.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also extract generated errors from this perturbation manifest.
    #[arg(long)]
    perturbed: Option<PathBuf>,
    /// Skip the original contours.
    #[arg(long)]
    perturbed_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: usize,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    /// Model file, or a directory of `<organ>.json` with `--per-organ`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Train on this organ only.
    #[arg(long)]
    organ: Option<String>,
    #[arg(long)]
    per_organ: bool,
    /// Comma-separated ν values for calibration.
    #[arg(long)]
    nu_grid: Option<String>,
    /// Comma-separated γ values for calibration.
    #[arg(long)]
    gamma_grid: Option<String>,
    #[arg(long, default_value_t = 200)]
    noise_count: usize,
    #[arg(long, default_value_t = 3.0)]
    noise_sigma: f64,
    #[arg(long)]
    calibration_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    max_passes: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model file, or a directory of per-organ `<organ>.json` models.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelSet> {
        let path = required(&self.model, "model")?;
        if !path.is_dir() {
            return Ok(ModelSet::single(load_model(path)?));
        }
        let mut set = ModelSet::default();
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.extension().is_some_and(|e| e == "json") {
                let organ = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| QaError::Format(format!("bad model name {}", p.display())))?
                    .to_string();
                set.by_organ.insert(organ, load_model(&p)?);
            }
        }
        if set.by_organ.is_empty() {
            return Err(QaError::InvalidArgument(format!(
                "no models in {}",
                path.display()
            )));
        }
        Ok(set)
    }
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Organ-level output aggregated by mean, any or fraction:θ.
    #[arg(long)]
    organ_out: Option<PathBuf>,
    #[arg(long, default_value = "mean")]
    aggregate: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Replace prediction labels with these labelled metrics.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectLimitArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Restrict to these organs (comma-separated).
    #[arg(long)]
    organs: Option<String>,
    #[arg(long, default_value_t = 20)]
    d_max: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0.9)]
    rate_threshold: f64,
    /// `perturbed` or `mixed`.
    #[arg(long, default_value = "perturbed")]
    mode: String,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn required<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| QaError::InvalidArgument(format!("missing --{name}")))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    create_parent(path)?;
    write_csv(rows, path)
}

fn parse_list(s: &str, name: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| QaError::InvalidArgument(format!("bad {name} value `{t}`")))
        })
        .collect()
}

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> Result<()> {
    let out = required(&a.out, "out")?;
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<PhantomSpec>(&fs::read_to_string(p)?)?,
        None => PhantomSpec::thorax(10, seed),
    };
    if let Some(c) = a.cases {
        spec.cases = c;
    }
    spec.seed = seed;
    spec.validate()?;
    let rows = write_dataset(&spec, out)?;
    println!("wrote {} cases, {} organ entries to {}", spec.cases, rows.len(), out.display());
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let mode: MetricsMode = a.mode.parse()?;
    let out = required(&a.out, "out")?;
    let ds = Dataset::open(required(&a.manifest, "manifest")?)?;
    let rows = compute_metrics(&ds, mode)?;
    write_rows(&rows, out)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_label(a: &LabelArgs) -> Result<()> {
    let mode: DirectionMode = a.direction_mode.parse()?;
    let out = required(&a.out, "out")?;
    let mut rows: Vec<MetricsRow> = read_csv(required(&a.metrics, "metrics")?)?;
    let set = match &a.thresholds {
        Some(p) => load_thresholds(p)?,
        None => fit_threshold_set(&rows, mode)?,
    };
    label_rows(&mut rows, &set)?;
    write_rows(&rows, out)?;
    if let Some(p) = &a.thresholds_out {
        create_parent(p)?;
        save_thresholds(&set, p)?;
    }
    let low = rows.iter().filter(|r| r.label == Some(Quality::Low)).count();
    println!("labelled {} rows, {} low", rows.len(), low);
    Ok(())
}

fn cmd_perturb(a: &PerturbArgs, seed: u64) -> Result<()> {
    let kinds = a
        .kinds
        .split(',')
        .map(|k| k.trim().parse::<PerturbationKind>())
        .collect::<Result<Vec<_>>>()?;
    let translation = match a.distance.as_str() {
        "auto" => TranslationDistance::Escalate,
        d => TranslationDistance::Fixed(d.parse::<f64>().map_err(|_| {
            QaError::InvalidArgument(format!("distance must be a number or `auto`, got `{d}`"))
        })?),
    };
    let window = a.window.get()?;
    let out = required(&a.out, "out")?;
    let ds = Dataset::open(required(&a.manifest, "manifest")?)?;
    let labels: Vec<MetricsRow> = read_csv(required(&a.labels, "labels")?)?;
    let thresholds = load_thresholds(required(&a.thresholds, "thresholds")?)?;
    let settings = PerturbSettings {
        kinds,
        translation,
        disk_radius: a.disk_radius,
        max_iterations: a.max_iterations,
        seed,
    };
    let (samples, failed) = generate_errors(&ds, &labels, &thresholds, &settings, window)?;
    save_generated(&samples, out, &out.join("perturbations.csv"))?;
    println!("generated {} errors ({} failed)", samples.len(), failed);
    Ok(())
}

fn cmd_features(a: &FeaturesArgs) -> Result<()> {
    let window = a.window.get()?;
    let out = required(&a.out, "out")?;
    let ds = Dataset::open(required(&a.manifest, "manifest")?)?;
    let mut vectors: Vec<FeatureVector> = Vec::new();
    if !a.perturbed_only {
        let labels: Vec<MetricsRow> = read_csv(required(&a.labels, "labels")?)?;
        vectors = extract_dataset_features(&ds, &LabelIndex::new(&labels), window, a.margin)?;
    }
    if let Some(p) = &a.perturbed {
        let samples = load_generated(&ds, p, window)?;
        vectors.extend(extract_generated_features(&samples, a.margin)?);
    }
    if vectors.is_empty() {
        return Err(QaError::InvalidArgument("no feature rows to write".into()));
    }
    create_parent(out)?;
    write_feature_file(&vectors, out)?;
    println!("wrote {} feature rows to {}", vectors.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    nu: f64,
    gamma: f64,
    train_size: usize,
    calibration: Option<crate::ocsvm::CalibrationReport>,
}

fn train_one(
    a: &TrainArgs,
    data: &[FeatureVector],
    organ: Option<&str>,
    seed: u64,
) -> Result<(OcsvmModel, TrainSummary)> {
    let dim = data.first().map_or(0, FeatureVector::dim);
    let (nu, gamma, calibration) = match a.nu {
        Some(nu) => (nu, a.gamma.unwrap_or(1.0 / dim.max(1) as f64), None),
        None => {
            let grid = CalibrationGrid {
                nus: match &a.nu_grid {
                    Some(s) => parse_list(s, "nu")?,
                    None => DEFAULT_NU_GRID.to_vec(),
                },
                gammas: match (&a.gamma_grid, a.gamma) {
                    (Some(s), _) => parse_list(s, "gamma")?,
                    (None, Some(g)) => vec![g],
                    (None, None) => default_gamma_grid(dim),
                },
            };
            let noise = NoiseSpec {
                count: a.noise_count,
                sigma: a.noise_sigma,
            };
            let rep = calibrate(data, &grid, noise, crate::seed_of!(seed, organ.unwrap_or("")))?;
            (rep.best_nu, rep.best_gamma, Some(rep))
        }
    };
    let mut cfg = TrainConfig::new(nu, gamma);
    cfg.tolerance = a.tolerance;
    cfg.max_passes = a.max_passes;
    cfg.seed = seed;
    let model = train(data, &cfg)?;
    Ok((
        model,
        TrainSummary {
            nu,
            gamma,
            train_size: data.len(),
            calibration,
        },
    ))
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    if let Some(nu) = a.nu {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(QaError::InvalidArgument(format!("nu must be in (0, 1], got {nu}")));
        }
    }
    if let Some(g) = a.gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(QaError::InvalidArgument(format!("gamma must be > 0, got {g}")));
        }
    }
    let out = required(&a.out, "out")?;
    let all = read_feature_file(required(&a.features, "features")?, false)?;
    let high: Vec<FeatureVector> = all
        .into_iter()
        .filter(|f| f.label == Some(Quality::High))
        .filter(|f| a.organ.as_ref().is_none_or(|o| &f.organ == o))
        .collect();
    if high.is_empty() {
        return Err(QaError::InvalidArgument("no high-quality rows to train on".into()));
    }
    if a.per_organ {
        let mut organs: Vec<String> = high.iter().map(|f| f.organ.clone()).collect();
        organs.sort();
        organs.dedup();
        fs::create_dir_all(out)?;
        let mut summaries = Vec::new();
        for organ in &organs {
            let data: Vec<FeatureVector> =
                high.iter().filter(|f| &f.organ == organ).cloned().collect();
            let (model, summary) = train_one(a, &data, Some(organ), seed)?;
            save_model(&model, out.join(format!("{organ}.json")))?;
            summaries.push((organ.clone(), summary));
            println!("{organ}: trained on {} rows", data.len());
        }
        if let Some(p) = &a.calibration_out {
            let map: std::collections::BTreeMap<_, _> = summaries.into_iter().collect();
            write_json(&map, p)?;
        }
    } else {
        let (model, summary) = train_one(a, &high, a.organ.as_deref(), seed)?;
        create_parent(out)?;
        save_model(&model, out)?;
        if let Some(p) = &a.calibration_out {
            write_json(&summary, p)?;
        }
        println!(
            "trained on {} rows (nu = {}, gamma = {})",
            high.len(),
            summary.nu,
            summary.gamma
        );
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let how: Aggregate = a.aggregate.parse()?;
    let out = required(&a.out, "out")?;
    let models = a.model.load()?;
    let features = read_feature_file(required(&a.features, "features")?, false)?;
    let rows = crate::pipeline::predict_features(&models, &features)?;
    write_rows(&rows, out)?;
    if let Some(p) = &a.organ_out {
        write_rows(&aggregate_predictions(&rows, how), p)?;
    }
    let low = rows.iter().filter(|r| r.prediction == Quality::Low).count();
    println!("scored {} rows, {} predicted low", rows.len(), low);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut rows: Vec<PredictionRow> = read_csv(required(&a.predictions, "predictions")?)?;
    if let Some(p) = &a.labels {
        let labels: Vec<MetricsRow> = read_csv(p)?;
        let index = LabelIndex::new(&labels);
        for r in &mut rows {
            r.label = index.get(&r.case_id, &r.organ, r.slice);
        }
    }
    if a.out_json.is_none() && a.out_csv.is_none() {
        return Err(QaError::InvalidArgument("need --out-json or --out-csv".into()));
    }
    let reports = evaluate_predictions(&rows)?;
    if let Some(p) = &a.out_json {
        write_json(&reports, p)?;
    }
    if let Some(p) = &a.out_csv {
        let table: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
        write_rows(&table, p)?;
    }
    for r in &reports {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{}: BA {} AUC {}",
            r.organ,
            fmt(r.report.balanced_accuracy),
            fmt(r.report.auc)
        );
    }
    Ok(())
}

fn cmd_detect_limit(a: &DetectLimitArgs, seed: u64) -> Result<()> {
    let mode = match a.mode.as_str() {
        "perturbed" => DetectionMode::PerturbedOnly,
        "mixed" => DetectionMode::Mixed,
        m => {
            return Err(QaError::InvalidArgument(format!(
                "mode must be perturbed or mixed, got `{m}`"
            )))
        }
    };
    if !(a.rate_threshold > 0.0 && a.rate_threshold <= 1.0) {
        return Err(QaError::InvalidArgument("rate threshold must be in (0, 1]".into()));
    }
    let window = a.window.get()?;
    let out = required(&a.out, "out")?;
    let models = a.model.load()?;
    let ds = Dataset::open(required(&a.manifest, "manifest")?)?;
    let labels: Vec<MetricsRow> = read_csv(required(&a.labels, "labels")?)?;
    let mut samples = detection_samples(&ds, &labels, window)?;
    if let Some(list) = &a.organs {
        let keep: Vec<&str> = list.split(',').map(str::trim).collect();
        samples.retain(|o, _| keep.contains(&o.as_str()));
    }
    if samples.is_empty() {
        return Err(QaError::InvalidArgument("no high-quality slices to perturb".into()));
    }
    let mut params = DetectionParams::new(a.d_max, a.repeats, seed);
    params.rate_threshold = a.rate_threshold;
    params.mode = mode;
    let results = detection_limits(
        &samples,
        |organ| {
            Ok(OcsvmScorer {
                model: models.get(organ)?,
                margin: a.margin,
            })
        },
        &params,
    )?;
    let rows: Vec<TraceRow> = results.iter().flat_map(trace_rows).collect();
    write_rows(&rows, out)?;
    for r in &results {
        match r.limit {
            Some(l) => println!("{}: limit {l} px", r.organ),
            None => println!("{}: no limit up to {} px", r.organ, a.d_max),
        }
    }
    Ok(())
}

fn cmd_correlate(a: &CorrelateArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let trace: Vec<TraceRow> = read_csv(required(&a.trace, "trace")?)?;
    let metrics: Vec<MetricsRow> = read_csv(required(&a.metrics, "metrics")?)?;
    let c = correlate(&trace, &metrics)?;
    write_json(&c, out)?;
    match c.r_size {
        Some(r) => println!("pearson(limit, size) = {r:.4}"),
        None => println!("pearson(limit, size) undefined"),
    }
    Ok(())
}

/// Flag names (long form) that take no value.
fn is_switch(cmd: &clap::Command, long: &str) -> bool {
    cmd.get_arguments()
        .any(|a| a.get_long() == Some(long) && !a.get_action().takes_values())
}

/// Append config values for flags not given on the command line.
fn apply_config(argv: &mut Vec<String>) -> Result<()> {
    let mut config_path = None;
    let mut subcommand = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        } else if a == "--config" {
            config_path = argv.get(i + 1).cloned();
            i += 1;
        } else if a == "--seed" || a == "--threads" {
            i += 1;
        } else if subcommand.is_none() && !a.starts_with('-') {
            subcommand = Some(a.clone());
        }
        i += 1;
    }
    let (Some(path), Some(sub)) = (config_path, subcommand) else {
        return Ok(());
    };
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let obj = value
        .as_object()
        .ok_or_else(|| QaError::Format("config must be a JSON object".into()))?;
    let root = Cli::command();
    let Some(cmd) = root.find_subcommand(&sub) else {
        return Ok(());
    };
    let mut entries: Vec<(String, serde_json::Value)> = Vec::new();
    for (k, v) in obj {
        if !v.is_object() {
            entries.push((k.clone(), v.clone()));
        }
    }
    if let Some(section) = obj.get(&sub).and_then(|s| s.as_object()) {
        for (k, v) in section {
            entries.retain(|(e, _)| e != k);
            entries.push((k.clone(), v.clone()));
        }
    }
    let mut extra = Vec::new();
    for (key, v) in entries {
        let long = key.replace('_', "-");
        let known = long == "seed"
            || long == "threads"
            || cmd.get_arguments().any(|a| a.get_long() == Some(long.as_str()));
        if !known || long == "config" {
            continue;
        }
        let flag = format!("--{long}");
        let given = argv
            .iter()
            .any(|a| a == &flag || a.starts_with(&format!("{flag}=")));
        if given {
            continue;
        }
        let scalar = |v: &serde_json::Value| -> Result<String> {
            match v {
                serde_json::Value::String(s) => Ok(s.clone()),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                serde_json::Value::Bool(b) => Ok(b.to_string()),
                _ => Err(QaError::Format(format!("config key `{key}` has an unsupported value"))),
            }
        };
        if is_switch(cmd, &long) {
            if v.as_bool() == Some(true) {
                extra.push(flag);
            }
            continue;
        }
        let joined = match &v {
            serde_json::Value::Array(items) => items
                .iter()
                .map(scalar)
                .collect::<Result<Vec<_>>>()?
                .join(","),
            other => scalar(other)?,
        };
        extra.push(format!("{flag}={joined}"));
    }
    argv.extend(extra);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, seed),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Label(a) => cmd_label(a),
        Command::Perturb(a) => cmd_perturb(a, seed),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a, seed),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::DetectLimit(a) => cmd_detect_limit(a, seed),
        Command::Correlate(a) => cmd_correlate(a),
    }
}

fn exit_code(e: &QaError) -> i32 {
    if e.is_io_or_format() {
        2
    } else {
        1
    }
}

/// Parse `args` (including the program name) and run one subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    if argv.is_empty() {
        argv.push("contourqa".into());
    }
    if let Err(e) = apply_config(&mut argv) {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    if e.kind() == ErrorKind::InvalidSubcommand {
                        eprintln!("\n{}", Cli::command().render_usage());
                    }
                    1
                }
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
