//! Per-organ metric statistics and the high/low quality rule.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};
use crate::metrics::MetricTriple;

/// Which way the one-sigma margins point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionMode {
    /// High quality iff DSC >= mean - sd, HD95 <= mean + sd, MSD <= mean + sd.
    #[default]
    PrevalenceConsistent,
    /// High quality iff DSC > mean + sd, HD95 < mean - sd, MSD < mean - sd.
    Strict,
}

impl FromStr for DirectionMode {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prevalence-consistent" => Ok(DirectionMode::PrevalenceConsistent),
            "strict" => Ok(DirectionMode::Strict),
            other => Err(QaError::InvalidArgument(format!(
                "unknown threshold mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    High,
    Low,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::High => "high",
            Quality::Low => "low",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quality {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Quality::High),
            "low" => Ok(Quality::Low),
            other => Err(QaError::Format(format!("unknown quality label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Check {
    Dsc,
    Hd95,
    Msd,
}

impl Check {
    pub fn as_str(self) -> &'static str {
        match self {
            Check::Dsc => "dsc",
            Check::Hd95 => "hd95",
            Check::Msd => "msd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityLabel {
    pub value: Quality,
    pub failed_checks: Vec<Check>,
}

impl QualityLabel {
    /// Failed check names joined with `;`, empty for high quality.
    pub fn failed_string(&self) -> String {
        self.failed_checks
            .iter()
            .map(|c| c.as_str())
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub organ: String,
    pub mean_dsc: f64,
    pub sigma_dsc: f64,
    pub mean_hd95: f64,
    pub sigma_hd95: f64,
    pub mean_msd: f64,
    pub sigma_msd: f64,
    #[serde(default)]
    pub direction_mode: DirectionMode,
}

fn mean_and_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Arithmetic means and sample standard deviations of the three metrics.
pub fn fit_thresholds(triples: &[MetricTriple], organ: &str) -> Result<QualityThresholds> {
    fit_thresholds_with(triples, organ, DirectionMode::default())
}

pub fn fit_thresholds_with(
    triples: &[MetricTriple],
    organ: &str,
    mode: DirectionMode,
) -> Result<QualityThresholds> {
    if triples.len() < 2 {
        return Err(QaError::InvalidArgument(format!(
            "need at least 2 samples to fit thresholds for `{organ}`, got {}",
            triples.len()
        )));
    }
    if triples
        .iter()
        .any(|t| !(t.dsc.is_finite() && t.hd95.is_finite() && t.msd.is_finite()))
    {
        return Err(QaError::InvalidArgument("non-finite metric value".into()));
    }
    let (mean_dsc, sigma_dsc) = mean_and_sd(triples.iter().map(|t| t.dsc));
    let (mean_hd95, sigma_hd95) = mean_and_sd(triples.iter().map(|t| t.hd95));
    let (mean_msd, sigma_msd) = mean_and_sd(triples.iter().map(|t| t.msd));
    Ok(QualityThresholds {
        organ: organ.to_string(),
        mean_dsc,
        sigma_dsc,
        mean_hd95,
        sigma_hd95,
        mean_msd,
        sigma_msd,
        direction_mode: mode,
    })
}

/// Label a contour. Prevalence-consistent comparisons are inclusive toward high.
pub fn label(m: &MetricTriple, t: &QualityThresholds) -> QualityLabel {
    let (dsc_ok, hd_ok, msd_ok) = match t.direction_mode {
        DirectionMode::PrevalenceConsistent => (
            m.dsc >= t.mean_dsc - t.sigma_dsc,
            m.hd95 <= t.mean_hd95 + t.sigma_hd95,
            m.msd <= t.mean_msd + t.sigma_msd,
        ),
        DirectionMode::Strict => (
            m.dsc > t.mean_dsc + t.sigma_dsc,
            m.hd95 < t.mean_hd95 - t.sigma_hd95,
            m.msd < t.mean_msd - t.sigma_msd,
        ),
    };
    let failed_checks: Vec<Check> = [(dsc_ok, Check::Dsc), (hd_ok, Check::Hd95), (msd_ok, Check::Msd)]
        .into_iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, c)| c)
        .collect();
    QualityLabel {
        value: if failed_checks.is_empty() {
            Quality::High
        } else {
            Quality::Low
        },
        failed_checks,
    }
}

/// Thresholds file: a JSON object keyed by organ.
pub type ThresholdSet = BTreeMap<String, QualityThresholds>;

pub fn save_thresholds(set: &ThresholdSet, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(set)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_thresholds(path: impl AsRef<Path>) -> Result<ThresholdSet> {
    let text = std::fs::read_to_string(path)?;
    let set: ThresholdSet = serde_json::from_str(&text)?;
    for (organ, t) in &set {
        let sigmas = [t.sigma_dsc, t.sigma_hd95, t.sigma_msd];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(QaError::Format(format!("negative sigma for `{organ}`")));
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dsc: f64, hd95: f64, msd: f64) -> MetricTriple {
        MetricTriple { dsc, hd95, msd }
    }

    fn esophagus() -> QualityThresholds {
        QualityThresholds {
            organ: "esophagus".into(),
            mean_dsc: 0.77,
            sigma_dsc: 0.03,
            mean_hd95: 3.6,
            sigma_hd95: 1.9,
            mean_msd: 0.50,
            sigma_msd: 0.35,
            direction_mode: DirectionMode::PrevalenceConsistent,
        }
    }

    #[test]
    fn fit_examples() {
        let th = fit_thresholds(&[t(0.8, 1.0, 1.0), t(0.9, 1.0, 1.0), t(1.0, 1.0, 1.0)], "x").unwrap();
        assert!((th.mean_dsc - 0.9).abs() < 1e-12);
        assert!((th.sigma_dsc - 0.1).abs() < 1e-12);
        assert_eq!(th.sigma_hd95, 0.0);
        assert_eq!(th.sigma_msd, 0.0);
        assert!(fit_thresholds(&[t(0.8, 1.0, 1.0)], "x").is_err());
    }

    #[test]
    fn label_examples() {
        let th = esophagus();
        let l = label(&t(0.70, 3.0, 0.4), &th);
        assert_eq!(l.value, Quality::Low);
        assert_eq!(l.failed_checks, vec![Check::Dsc]);

        let edge = QualityThresholds {
            organ: "e".into(),
            mean_dsc: 0.75,
            sigma_dsc: 0.25,
            mean_hd95: 2.0,
            sigma_hd95: 1.0,
            mean_msd: 0.5,
            sigma_msd: 0.25,
            direction_mode: DirectionMode::PrevalenceConsistent,
        };
        let l = label(&t(0.5, 3.0, 0.75), &edge);
        assert_eq!(l.value, Quality::High);
        assert!(l.failed_checks.is_empty());

        let l = label(&t(0.1, 30.0, 9.0), &th);
        assert_eq!(l.value, Quality::Low);
        assert_eq!(l.failed_checks, vec![Check::Dsc, Check::Hd95, Check::Msd]);
        assert_eq!(l.failed_string(), "dsc;hd95;msd");
    }

    #[test]
    fn strict_mode_inverts_the_bounds() {
        let mut th = esophagus();
        th.direction_mode = DirectionMode::Strict;
        // An exactly average contour fails every literal check.
        let l = label(&t(0.77, 3.6, 0.5), &th);
        assert_eq!(l.failed_checks, vec![Check::Dsc, Check::Hd95, Check::Msd]);
        let l = label(&t(0.81, 1.0, 0.1), &th);
        assert_eq!(l.value, Quality::High);
    }

    #[test]
    fn thresholds_file_round_trip() {
        let mut set = ThresholdSet::new();
        set.insert("esophagus".into(), esophagus());
        let f = tempfile::NamedTempFile::new().unwrap();
        save_thresholds(&set, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.contains("\"direction_mode\": \"prevalence-consistent\""));
        assert_eq!(load_thresholds(f.path()).unwrap(), set);
    }

    proptest! {
        #[test]
        fn better_metrics_never_flip_high_to_low(
            dsc in 0.0f64..1.0, hd in 0.0f64..10.0, msd in 0.0f64..3.0,
            up in 0.0f64..0.5, down in 0.0f64..5.0,
        ) {
            let th = esophagus();
            let base = label(&t(dsc, hd, msd), &th);
            let better = label(&t((dsc + up).min(1.0), (hd - down).max(0.0), (msd - down).max(0.0)), &th);
            if base.value == Quality::High {
                prop_assert_eq!(better.value, Quality::High);
            }
        }

        #[test]
        fn fit_ignores_sample_order(xs in proptest::collection::vec((0.0f64..1.0, 0.0f64..9.0, 0.0f64..2.0), 2..30)) {
            let triples: Vec<MetricTriple> = xs.iter().map(|&(a, b, c)| t(a, b, c)).collect();
            let mut rev = triples.clone();
            rev.reverse();
            let a = fit_thresholds(&triples, "o").unwrap();
            let b = fit_thresholds(&rev, "o").unwrap();
            prop_assert!((a.mean_dsc - b.mean_dsc).abs() < 1e-12);
            prop_assert!((a.sigma_hd95 - b.sigma_hd95).abs() < 1e-9);
            for m in &triples {
                prop_assert_eq!(label(m, &a).value, label(m, &b).value);
            }
        }
    }
}
