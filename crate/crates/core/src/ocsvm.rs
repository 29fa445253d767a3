//! One-class support vector machine with an RBF kernel.
//!
//! Training solves the dual
//!
//! ```text
//! min_α  ½ Σ_i Σ_j α_i α_j k(x_i, x_j)
//! s.t.   0 ≤ α_i ≤ 1/(νn),  Σ_i α_i = 1
//! ```
//!
//! by sequential pairwise updates on the maximal KKT-violating pair. The
//! decision function is `Σ_i α_i k(x_i, x) − ρ`; non-negative scores are
//! inliers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::features::{fit_standardization, FeatureVector, StandardizationStats};
use crate::quality::Quality;
use crate::rng::rng_from;

pub const MODEL_FORMAT: &str = "ocsvm-v1";
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_NOISE_SIGMA: f64 = 3.0;
pub const DEFAULT_NU_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

/// Curvature floor for degenerate pairs.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub kind: KernelKind,
    pub gamma: f64,
}

impl KernelParams {
    pub fn rbf(gamma: f64) -> Self {
        KernelParams {
            kind: KernelKind::Rbf,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(QaError::InvalidArgument(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-self.gamma * d2).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub nu: f64,
    pub kernel: KernelParams,
    /// Stop once the maximal KKT violation is at most this.
    pub tolerance: f64,
    /// Cap on pair updates; `None` means `10 n²`.
    pub max_passes: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(nu: f64, gamma: f64) -> Self {
        TrainConfig {
            nu,
            kernel: KernelParams::rbf(gamma),
            tolerance: DEFAULT_TOLERANCE,
            max_passes: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(QaError::InvalidArgument(format!(
                "nu must be in (0, 1], got {}",
                self.nu
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(QaError::InvalidArgument(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        self.kernel.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub format: String,
    pub schema_id: String,
    pub nu: f64,
    pub kernel: KernelParams,
    pub rho: f64,
    pub alphas: Vec<f64>,
    /// Support vectors in standardized space.
    pub support_vectors: Vec<Vec<f64>>,
    pub standardization: StandardizationStats,
    pub train_size: usize,
}

/// Result of a dual solve on already-standardized data.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub objective: f64,
    pub iterations: usize,
    pub violation: f64,
    /// `Σ_j α_j k(x_j, x_i)` for every training point.
    pub gradient: Vec<f64>,
}

/// Upper bound on each α: `1/(νn)`.
pub fn box_bound(nu: f64, n: usize) -> f64 {
    1.0 / (nu * n as f64)
}

/// Solve the one-class dual on raw points.
pub fn solve_dual(points: &[Vec<f64>], cfg: &TrainConfig) -> Result<DualSolution> {
    cfg.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(QaError::InvalidArgument(format!(
            "training needs at least 2 points, got {n}"
        )));
    }
    let nu_n = cfg.nu * n as f64;
    if nu_n < 1.0 {
        return Err(QaError::InvalidArgument(format!(
            "nu * n must be >= 1 (nu = {}, n = {n})",
            cfg.nu
        )));
    }
    let c = box_bound(cfg.nu, n);

    let q = KernelMatrix::new(points, &cfg.kernel);

    // α = C on the first ⌊νn⌋ points, remainder on the next one.
    let full = (nu_n.floor() as usize).min(n);
    let mut alpha = vec![0.0; n];
    for a in alpha.iter_mut().take(full) {
        *a = c;
    }
    if full < n {
        let rest = 1.0 - full as f64 * c;
        if rest > 0.0 {
            alpha[full] = rest.min(c);
        }
    }

    let mut grad = vec![0.0; n];
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            let row = q.row(i);
            for (g, k) in grad.iter_mut().zip(row.iter()) {
                *g += a * k;
            }
        }
    }

    let max_updates = cfg.max_passes.unwrap_or_else(|| 10 * n * n).max(1);
    let mut objective = dual_objective(&alpha, &grad);
    let mut iterations = 0;
    let violation = loop {
        let (i, j, gap) = select_pair(&alpha, &grad, c);
        if gap <= cfg.tolerance {
            break gap;
        }
        if iterations >= max_updates {
            return Err(QaError::NonConvergence {
                iterations,
                violation: gap,
            });
        }
        iterations += 1;

        let (ri, rj) = (q.row(i), q.row(j));
        let eta = (ri[i] + rj[j] - 2.0 * ri[j]).max(TAU);
        let room = (c - alpha[i]).min(alpha[j]);
        let delta = (gap / eta).min(room);
        if delta >= c - alpha[i] {
            alpha[j] -= c - alpha[i];
            alpha[i] = c;
        } else if delta >= alpha[j] {
            alpha[i] += alpha[j];
            alpha[j] = 0.0;
        } else {
            alpha[i] += delta;
            alpha[j] -= delta;
        }
        if alpha[j] < 0.0 {
            alpha[j] = 0.0;
        }
        for (t, g) in grad.iter_mut().enumerate() {
            *g += delta * (ri[t] - rj[t]);
        }
        if cfg!(debug_assertions) {
            let next = dual_objective(&alpha, &grad);
            debug_assert!(
                next <= objective + 1e-12 * (1.0 + objective.abs()),
                "dual objective increased: {objective} -> {next}"
            );
            objective = next;
        }
    };

    // Recompute the gradient from scratch to shed accumulated drift.
    let mut gradient = vec![0.0; n];
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            for (g, k) in gradient.iter_mut().zip(q.row(i).iter()) {
                *g += a * k;
            }
        }
    }
    let rho = compute_rho(&alpha, &gradient, c);
    Ok(DualSolution {
        objective: dual_objective(&alpha, &gradient),
        alphas: alpha,
        rho,
        iterations,
        violation,
        gradient,
    })
}

/// `½ αᵀQα` given `g = Qα`.
fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    0.5 * alpha.iter().zip(grad).map(|(a, g)| a * g).sum::<f64>()
}

/// Maximal violating pair: `i` can grow (α_i < C) with the smallest
/// gradient, `j` can shrink (α_j > 0) with the largest.
fn select_pair(alpha: &[f64], grad: &[f64], c: f64) -> (usize, usize, f64) {
    let mut i = usize::MAX;
    let mut j = usize::MAX;
    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;
    for (t, (&a, &g)) in alpha.iter().zip(grad).enumerate() {
        if a < c && g < g_min {
            g_min = g;
            i = t;
        }
        if a > 0.0 && g > g_max {
            g_max = g;
            j = t;
        }
    }
    if i == usize::MAX || j == usize::MAX || i == j {
        return (0, 0, 0.0);
    }
    (i, j, g_max - g_min)
}

fn compute_rho(alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for (&a, &g) in alpha.iter().zip(grad) {
        if a > 0.0 && a < c {
            sum += g;
            count += 1;
        } else if a == 0.0 {
            ub = ub.min(g);
        } else {
            lb = lb.max(g);
        }
    }
    if count > 0 {
        sum / count as f64
    } else if ub.is_finite() && lb.is_finite() {
        0.5 * (ub + lb)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    }
}

/// Dense kernel matrix, row-major.
struct KernelMatrix {
    n: usize,
    values: Vec<f64>,
}

impl KernelMatrix {
    fn new(points: &[Vec<f64>], kernel: &KernelParams) -> Self {
        let n = points.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in 0..i {
                let k = kernel.eval(&points[i], &points[j]);
                values[i * n + j] = k;
                values[j * n + i] = k;
            }
        }
        KernelMatrix { n, values }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

fn check_schema(data: &[FeatureVector]) -> Result<()> {
    let first = &data[0];
    for v in data {
        if v.schema_id != first.schema_id || v.dim() != first.dim() {
            return Err(QaError::SchemaMismatch {
                expected: format!("{} (D={})", first.schema_id, first.dim()),
                found: format!("{} (D={})", v.schema_id, v.dim()),
            });
        }
    }
    Ok(())
}

/// Fit standardization on `data` and train on the standardized vectors.
pub fn train(data: &[FeatureVector], cfg: &TrainConfig) -> Result<OcsvmModel> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(QaError::InvalidArgument(format!(
            "training needs at least 2 vectors, got {}",
            data.len()
        )));
    }
    check_schema(data)?;
    let stats = fit_standardization(data)?;
    let points: Vec<Vec<f64>> = data
        .iter()
        .map(|v| stats.apply(&v.values))
        .collect::<Result<_>>()?;
    train_standardized(&points, cfg, stats, &data[0].schema_id)
}

/// Train on points that are already in standardized space.
pub fn train_standardized(
    points: &[Vec<f64>],
    cfg: &TrainConfig,
    standardization: StandardizationStats,
    schema_id: &str,
) -> Result<OcsvmModel> {
    let sol = solve_dual(points, cfg)?;
    let mut support_vectors = Vec::new();
    let mut alphas = Vec::new();
    for (p, &a) in points.iter().zip(&sol.alphas) {
        if a > 0.0 {
            support_vectors.push(p.clone());
            alphas.push(a);
        }
    }
    Ok(OcsvmModel {
        format: MODEL_FORMAT.to_string(),
        schema_id: schema_id.to_string(),
        nu: cfg.nu,
        kernel: cfg.kernel,
        rho: sol.rho,
        alphas,
        support_vectors,
        standardization,
        train_size: points.len(),
    })
}

impl OcsvmModel {
    /// Score a point already in standardized space.
    pub fn decision_standardized(&self, z: &[f64]) -> f64 {
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(&self.alphas)
            .map(|(sv, a)| a * self.kernel.eval(sv, z))
            .sum();
        s - self.rho
    }

    /// Score raw feature values (standardized internally).
    pub fn decision_values(&self, x: &[f64]) -> Result<f64> {
        let z = self.standardization.apply(x)?;
        Ok(self.decision_standardized(&z))
    }

    pub fn box_bound(&self) -> f64 {
        box_bound(self.nu, self.train_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(QaError::Format(format!(
                "unsupported model format `{}`",
                self.format
            )));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(QaError::InvalidArgument(format!(
                "model nu must be in (0, 1], got {}",
                self.nu
            )));
        }
        self.kernel.validate()?;
        self.standardization.validate()?;
        if !self.rho.is_finite() {
            return Err(QaError::Format("rho must be finite".into()));
        }
        if self.alphas.len() != self.support_vectors.len() || self.alphas.is_empty() {
            return Err(QaError::Format(
                "alphas and support vectors must be nonempty and equal in length".into(),
            ));
        }
        if self.train_size < self.alphas.len() {
            return Err(QaError::Format("train_size below support vector count".into()));
        }
        let d = self.standardization.dim();
        if self.support_vectors.iter().any(|sv| sv.len() != d) {
            return Err(QaError::Format(
                "support vector dimension does not match standardization".into(),
            ));
        }
        let c = self.box_bound();
        if self.alphas.iter().any(|&a| !(a > 0.0 && a <= c * (1.0 + 1e-9))) {
            return Err(QaError::Format("alpha outside (0, 1/(nu n)]".into()));
        }
        Ok(())
    }
}

fn check_model_schema(model: &OcsvmModel, x: &FeatureVector) -> Result<()> {
    if x.schema_id != model.schema_id || x.dim() != model.standardization.dim() {
        return Err(QaError::SchemaMismatch {
            expected: format!("{} (D={})", model.schema_id, model.standardization.dim()),
            found: format!("{} (D={})", x.schema_id, x.dim()),
        });
    }
    Ok(())
}

/// `Σ α_i k(sv_i, z) − ρ` with `z` the standardized input. Positive is inlier.
pub fn decision(model: &OcsvmModel, x: &FeatureVector) -> Result<f64> {
    check_model_schema(model, x)?;
    model.decision_values(&x.values)
}

/// High iff the decision score is non-negative.
pub fn predict(model: &OcsvmModel, x: &FeatureVector) -> Result<Quality> {
    Ok(quality_of(decision(model, x)?))
}

pub fn quality_of(score: f64) -> Quality {
    if score >= 0.0 {
        Quality::High
    } else {
        Quality::Low
    }
}

pub fn save_model(model: &OcsvmModel, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let mut text = serde_json::to_string(model)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<OcsvmModel> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(MODEL_FORMAT) => {}
        Some(other) => {
            return Err(QaError::Format(format!(
                "unsupported model format `{other}`"
            )))
        }
        None => return Err(QaError::Format("model file has no format tag".into())),
    }
    let model: OcsvmModel = serde_json::from_value(value)?;
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Calibration with Gaussian pseudo-outliers

/// Default γ grid `{1/(2D), 1/D, 2/D, 4/D}`.
pub fn default_gamma_grid(dim: usize) -> Vec<f64> {
    let d = dim as f64;
    vec![0.5 / d, 1.0 / d, 2.0 / d, 4.0 / d]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGrid {
    pub nus: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl CalibrationGrid {
    pub fn default_for(dim: usize) -> Self {
        CalibrationGrid {
            nus: DEFAULT_NU_GRID.to_vec(),
            gammas: default_gamma_grid(dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub count: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationCell {
    pub nu: f64,
    pub gamma: f64,
    pub balanced_accuracy: f64,
    pub inlier_acceptance: f64,
    pub noise_rejection: f64,
    /// Training failure message, if the cell could not be trained.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub best_nu: f64,
    pub best_gamma: f64,
    pub best_balanced_accuracy: f64,
    pub train_count: usize,
    pub holdout_count: usize,
    pub noise_count: usize,
    pub noise_sigma: f64,
    pub cells: Vec<CalibrationCell>,
}

/// Pick (ν, γ) by balanced accuracy on held-out inliers versus zero-mean
/// Gaussian vectors in standardized space. Ties prefer smaller ν, then
/// smaller γ.
pub fn calibrate(
    train_features: &[FeatureVector],
    grid: &CalibrationGrid,
    noise: NoiseSpec,
    seed: u64,
) -> Result<CalibrationReport> {
    if grid.nus.is_empty() || grid.gammas.is_empty() {
        return Err(QaError::InvalidArgument("calibration grid is empty".into()));
    }
    if noise.count < 1 {
        return Err(QaError::InvalidArgument("noise count must be >= 1".into()));
    }
    if !(noise.sigma > 0.0 && noise.sigma.is_finite()) {
        return Err(QaError::InvalidArgument("noise sigma must be > 0".into()));
    }
    if train_features.is_empty() {
        return Err(QaError::InvalidArgument("no training features".into()));
    }
    check_schema(train_features)?;
    let n = train_features.len();
    let holdout = n / 5;
    let fit_n = n - holdout;
    if holdout < 2 || fit_n < 2 {
        return Err(QaError::InvalidArgument(format!(
            "degenerate calibration split: {fit_n} train / {holdout} held out"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(crate::seed_of!(seed, "calibrate-split"));
    order.shuffle(&mut rng);
    let fit_set: Vec<FeatureVector> = order[..fit_n]
        .iter()
        .map(|&i| train_features[i].clone())
        .collect();
    let stats = fit_standardization(&fit_set)?;
    let fit_points: Vec<Vec<f64>> = fit_set
        .iter()
        .map(|v| stats.apply(&v.values))
        .collect::<Result<_>>()?;
    let holdout_points: Vec<Vec<f64>> = order[fit_n..]
        .iter()
        .map(|&i| stats.apply(&train_features[i].values))
        .collect::<Result<_>>()?;
    let dim = stats.dim();
    let mut noise_rng = rng_from(crate::seed_of!(seed, "calibrate-noise"));
    let noise_points: Vec<Vec<f64>> = (0..noise.count)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    noise.sigma * z
                })
                .collect()
        })
        .collect();

    let mut nus = grid.nus.clone();
    let mut gammas = grid.gammas.clone();
    nus.sort_by(f64::total_cmp);
    nus.dedup();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();

    let schema = &train_features[0].schema_id;
    let mut cells = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for &nu in &nus {
        for &gamma in &gammas {
            let mut cfg = TrainConfig::new(nu, gamma);
            cfg.seed = seed;
            match train_standardized(&fit_points, &cfg, stats.clone(), schema) {
                Ok(model) => {
                    let accepted = holdout_points
                        .iter()
                        .filter(|z| model.decision_standardized(z) >= 0.0)
                        .count();
                    let rejected = noise_points
                        .iter()
                        .filter(|z| model.decision_standardized(z) < 0.0)
                        .count();
                    let acc = accepted as f64 / holdout_points.len() as f64;
                    let rej = rejected as f64 / noise_points.len() as f64;
                    let ba = 0.5 * (acc + rej);
                    if best.is_none_or(|(b, _, _)| ba > b) {
                        best = Some((ba, nu, gamma));
                    }
                    cells.push(CalibrationCell {
                        nu,
                        gamma,
                        balanced_accuracy: ba,
                        inlier_acceptance: acc,
                        noise_rejection: rej,
                        error: None,
                    });
                }
                Err(e) => cells.push(CalibrationCell {
                    nu,
                    gamma,
                    balanced_accuracy: 0.0,
                    inlier_acceptance: 0.0,
                    noise_rejection: 0.0,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    let (best_ba, best_nu, best_gamma) = best.ok_or_else(|| {
        QaError::InvalidArgument("no calibration cell could be trained".into())
    })?;
    Ok(CalibrationReport {
        best_nu,
        best_gamma,
        best_balanced_accuracy: best_ba,
        train_count: fit_n,
        holdout_count: holdout_points.len(),
        noise_count: noise.count,
        noise_sigma: noise.sigma,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    fn as_features(points: &[Vec<f64>]) -> Vec<FeatureVector> {
        points
            .iter()
            .map(|p| FeatureVector::new("toy", p.clone()).unwrap())
            .collect()
    }

    #[test]
    fn converged_model_is_feasible_and_stationary() {
        let pts = gaussian_points(60, 2, 1);
        let cfg = TrainConfig::new(0.2, 0.5);
        let sol = solve_dual(&pts, &cfg).unwrap();
        let c = box_bound(0.2, 60);
        assert!((sol.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (&a, &g) in sol.alphas.iter().zip(&sol.gradient) {
            assert!((0.0..=c + 1e-12).contains(&a));
            if a > 0.0 && a < c {
                assert!((g - sol.rho).abs() <= 10.0 * cfg.tolerance, "{g} vs {}", sol.rho);
            }
        }
    }

    #[test]
    fn unbounded_svs_score_zero_and_predict_high() {
        let feats = as_features(&gaussian_points(80, 3, 2));
        let cfg = TrainConfig::new(0.1, 0.3);
        let model = train(&feats, &cfg).unwrap();
        let c = model.box_bound();
        let mut seen = 0;
        for (sv, &a) in model.support_vectors.iter().zip(&model.alphas) {
            if a < c * (1.0 - 1e-12) {
                let s = model.decision_standardized(sv);
                assert!(s.abs() <= 10.0 * cfg.tolerance, "score {s}");
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn far_points_score_minus_rho_and_are_low() {
        let feats = as_features(&gaussian_points(50, 2, 3));
        let model = train(&feats, &TrainConfig::new(0.1, 0.5)).unwrap();
        let far = FeatureVector::new("toy", vec![1e3, -1e3]).unwrap();
        let s = decision(&model, &far).unwrap();
        assert_eq!(s, -model.rho);
        assert!(model.rho > 0.0);
        assert_eq!(predict(&model, &far).unwrap(), Quality::Low);
        assert_eq!(decision(&model, &far).unwrap().to_bits(), s.to_bits());
    }

    #[test]
    fn predict_agrees_with_decision_sign() {
        let feats = as_features(&gaussian_points(100, 2, 4));
        let model = train(&feats, &TrainConfig::new(0.1, 0.5)).unwrap();
        let mut rng = rng_from(44);
        for _ in 0..1000 {
            let x = FeatureVector::new(
                "toy",
                vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
            )
            .unwrap();
            let s = decision(&model, &x).unwrap();
            let q = predict(&model, &x).unwrap();
            assert_eq!(q == Quality::High, s >= 0.0);
        }
    }

    #[test]
    fn argument_errors() {
        let feats = as_features(&gaussian_points(10, 2, 5));
        assert!(train(&feats, &TrainConfig::new(0.0, 0.5)).is_err());
        assert!(train(&feats, &TrainConfig::new(1.5, 0.5)).is_err());
        assert!(train(&feats, &TrainConfig::new(0.05, 0.5)).is_err());
        assert!(train(&feats, &TrainConfig::new(0.5, 0.0)).is_err());
        let mut mixed = feats.clone();
        mixed[3].schema_id = "other".into();
        assert!(matches!(
            train(&mixed, &TrainConfig::new(0.5, 0.5)),
            Err(QaError::SchemaMismatch { .. })
        ));
        let model = train(&feats, &TrainConfig::new(0.5, 0.5)).unwrap();
        let wrong = FeatureVector::new("other", vec![0.0, 0.0]).unwrap();
        assert!(decision(&model, &wrong).is_err());
    }

    #[test]
    fn iteration_cap_reports_violation() {
        let pts = gaussian_points(40, 2, 6);
        let mut cfg = TrainConfig::new(0.1, 0.5);
        cfg.max_passes = Some(1);
        match solve_dual(&pts, &cfg) {
            Err(QaError::NonConvergence {
                iterations,
                violation,
            }) => {
                assert_eq!(iterations, 1);
                assert!(violation > cfg.tolerance);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn nu_one_puts_equal_weight_everywhere() {
        let pts = gaussian_points(12, 2, 7);
        let sol = solve_dual(&pts, &TrainConfig::new(1.0, 0.5)).unwrap();
        for a in &sol.alphas {
            assert!((a - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let feats = as_features(&gaussian_points(70, 3, 8));
        let model = train(&feats, &TrainConfig::new(0.1, 0.4)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, f.path()).unwrap();
        let back = load_model(f.path()).unwrap();
        assert_eq!(back, model);
        let mut rng = rng_from(9);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = model.decision_values(&x).unwrap();
            let b = back.decision_values(&x).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn model_file_validation() {
        let feats = as_features(&gaussian_points(30, 2, 10));
        let model = train(&feats, &TrainConfig::new(0.2, 0.5)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&model, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();

        let mut zero_nu = v.clone();
        zero_nu["nu"] = serde_json::json!(0.0);
        std::fs::write(f.path(), zero_nu.to_string()).unwrap();
        assert!(load_model(f.path()).is_err());

        let mut bad_format = v.clone();
        bad_format["format"] = serde_json::json!("ocsvm-v0");
        std::fs::write(f.path(), bad_format.to_string()).unwrap();
        assert!(matches!(load_model(f.path()), Err(QaError::Format(_))));

        v.as_object_mut().unwrap().remove("standardization");
        std::fs::write(f.path(), v.to_string()).unwrap();
        assert!(load_model(f.path()).is_err());

        std::fs::write(f.path(), "{not json").unwrap();
        assert!(matches!(load_model(f.path()), Err(QaError::Format(_))));
    }

    #[test]
    fn calibration_single_cell_and_determinism() {
        let feats = as_features(&gaussian_points(60, 2, 11));
        let grid = CalibrationGrid {
            nus: vec![0.1],
            gammas: vec![0.5],
        };
        let noise = NoiseSpec {
            count: 50,
            sigma: 3.0,
        };
        let r = calibrate(&feats, &grid, noise, 1).unwrap();
        assert_eq!((r.best_nu, r.best_gamma), (0.1, 0.5));
        assert_eq!(r.cells.len(), 1);

        let full = CalibrationGrid::default_for(2);
        let a = calibrate(&feats, &full, noise, 5).unwrap();
        let b = calibrate(&feats, &full, noise, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 16);
    }

    #[test]
    fn calibration_errors() {
        let feats = as_features(&gaussian_points(60, 2, 12));
        let noise = NoiseSpec {
            count: 10,
            sigma: 3.0,
        };
        let empty = CalibrationGrid {
            nus: vec![],
            gammas: vec![0.5],
        };
        assert!(calibrate(&feats, &empty, noise, 0).is_err());
        let grid = CalibrationGrid::default_for(2);
        assert!(calibrate(&feats[..5], &grid, noise, 0).is_err());
        assert!(calibrate(&feats, &grid, NoiseSpec { count: 0, sigma: 3.0 }, 0).is_err());
    }

    #[test]
    fn gaussian_cluster_calibrates_well() {
        let pts: Vec<Vec<f64>> = gaussian_points(100, 4, 13)
            .into_iter()
            .map(|p| p.into_iter().map(|x| 0.1 * x).collect())
            .collect();
        let feats = as_features(&pts);
        let grid = CalibrationGrid::default_for(4);
        let r = calibrate(&feats, &grid, NoiseSpec { count: 200, sigma: 3.0 }, 2).unwrap();
        assert!(r.best_balanced_accuracy >= 0.85, "{r:?}");
        assert!(r.cells.iter().any(|c| c.error.is_some()));
    }

    #[test]
    fn kernel_matrix_is_psd() {
        let pts = gaussian_points(25, 3, 14);
        let k = KernelMatrix::new(&pts, &KernelParams::rbf(0.7));
        let n = pts.len();
        // Cholesky with a small jitter on the diagonal.
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = k.values[i * n + j] + if i == j { 1e-10 } else { 0.0 };
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                if i == j {
                    assert!(s > 0.0, "pivot {i} = {s}");
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
            for j in 0..n {
                assert_eq!(k.values[i * n + j], k.values[j * n + i]);
            }
        }
    }
}
