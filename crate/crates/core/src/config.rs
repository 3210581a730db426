//! Declarative experiment configuration (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::branches::{BranchConfig, BranchKind, Eyes};
use crate::data::FoldScheme;
use crate::error::{Error, Result};
use crate::optim::TrainSchedule;

fn default_nu() -> f64 {
    1.0
}
fn default_folds() -> FoldScheme {
    FoldScheme::Loso
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One entry per weak predictor; defines N.
    pub branches: Vec<BranchConfig>,
    /// Weight of the combinatory loss.
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default = "default_folds")]
    pub folds: FoldScheme,
    /// Train only the first `max_folds` folds.
    #[serde(default)]
    pub max_folds: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Use the published (non-unit) gaze vector for angular errors.
    #[serde(default)]
    pub paper_literal_gaze_vector: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl ExperimentConfig {
    pub fn new(branches: Vec<BranchConfig>) -> Self {
        Self {
            branches,
            nu: default_nu(),
            schedule: TrainSchedule::default(),
            folds: default_folds(),
            max_folds: None,
            seed: 0,
            dataset: None,
            output_dir: default_output(),
            clip_norm: None,
            paper_literal_gaze_vector: false,
            eval_batch_size: default_eval_batch(),
        }
    }

    /// Rh-Ou-Fc with ν = 1 at the given crop and heatmap sizes.
    pub fn deesco(crop: [usize; 2], heatmap_size: usize) -> Self {
        let template = BranchConfig {
            crop_size: crop,
            heatmap_size,
            ..BranchConfig::new(BranchKind::Rh)
        };
        Self::new(parse_arch("Rh+Ou+Fc", &template).expect("static preset"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .branches
            .first()
            .ok_or_else(|| Error::config("config needs at least one branch"))?;
        if self.branches.iter().any(|b| b.heatmap_size != first.heatmap_size) {
            return Err(Error::config("all branches must share one heatmap_size"));
        }
        if self.branches.iter().any(|b| b.crop_size != first.crop_size) {
            return Err(Error::config("all branches must share one crop_size"));
        }
        for b in &self.branches {
            b.validate()?;
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::config(format!("nu must be a finite non-negative number, got {}", self.nu)));
        }
        let s = &self.schedule;
        if !(s.base_lr >= 0.0 && s.base_lr.is_finite()) || !(s.power >= 0.0) {
            return Err(Error::config("schedule: base_lr and power must be non-negative"));
        }
        if s.batch_size < 2 {
            return Err(Error::config("schedule: batch_size must be >= 2 (batch normalisation)"));
        }
        if s.total_steps == Some(0) || (s.total_steps.is_none() && s.epochs == 0) {
            return Err(Error::config("schedule: no training steps"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        if self.max_folds == Some(0) || self.eval_batch_size == 0 {
            return Err(Error::config("max_folds and eval_batch_size must be positive"));
        }
        Ok(())
    }

    pub fn arch_label(&self) -> String {
        arch_label(&self.branches)
    }
}

/// Text form of a composition, e.g. `Rh+Ou+Fc` or `Rh(l)+Rh(r)`.
pub fn arch_label(branches: &[BranchConfig]) -> String {
    branches
        .iter()
        .map(|b| {
            let eyes = match b.eyes {
                Eyes::Both => "",
                Eyes::Left => "(l)",
                Eyes::Right => "(r)",
            };
            format!("{}{eyes}", b.kind.as_str())
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Parses a composition like `Rh+Ou+Fc` or `Ba(l+r)+Rh(l)`; every branch
/// copies `template` apart from kind and eyes.
pub fn parse_arch(spec: &str, template: &BranchConfig) -> Result<Vec<BranchConfig>> {
    let mut out = Vec::new();
    let mut rest = spec.trim();
    while !rest.is_empty() {
        let end = rest.find(['+', '(']).unwrap_or(rest.len());
        let kind = BranchKind::parse(rest[..end].trim())?;
        rest = &rest[end..];
        let mut eyes = Eyes::Both;
        if let Some(r) = rest.strip_prefix('(') {
            let close = r
                .find(')')
                .ok_or_else(|| Error::config(format!("unbalanced parenthesis in {spec:?}")))?;
            eyes = match r[..close].trim() {
                "l" => Eyes::Left,
                "r" => Eyes::Right,
                "l+r" | "both" => Eyes::Both,
                other => return Err(Error::config(format!("unknown eye selection {other:?}"))),
            };
            rest = &r[close + 1..];
        }
        out.push(BranchConfig {
            kind,
            eyes,
            ..template.clone()
        });
        rest = rest.trim_start();
        if let Some(r) = rest.strip_prefix('+') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err(Error::config(format!("trailing '+' in {spec:?}")));
            }
        } else if !rest.is_empty() {
            return Err(Error::config(format!("cannot parse architecture {spec:?}")));
        }
    }
    if out.is_empty() {
        return Err(Error::config("empty architecture"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_a_fixpoint() {
        let mut cfg = ExperimentConfig::deesco([32, 32], 32);
        cfg.nu = 0.1;
        cfg.clip_norm = Some(5.0);
        cfg.folds = FoldScheme::Kfold(3);
        cfg.schedule.base_lr = 3.3e-4;
        let text = cfg.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(r#"{"branches":[{"kind":"Ou"}]}"#).unwrap();
        assert_eq!(cfg.nu, 1.0);
        assert_eq!(cfg.schedule.base_lr, 2e-4);
        assert_eq!(cfg.schedule.batch_size, 32);
        assert_eq!(cfg.folds, FoldScheme::Loso);
        assert!(cfg.validate().is_ok());
        assert!(ExperimentConfig::from_json(r#"{"branches":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn architectures() {
        let t = BranchConfig::new(BranchKind::Rh);
        let a = parse_arch("Rh(l) + Rh(r)+Ba(l+r)", &t).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].eyes, Eyes::Left);
        assert_eq!(a[1].eyes, Eyes::Right);
        assert_eq!(a[2].kind, BranchKind::Ba);
        assert_eq!(arch_label(&a), "Rh(l)+Rh(r)+Ba");
        assert!(parse_arch("Rh+", &t).is_err());
        assert!(parse_arch("Xx", &t).is_err());
        assert!(parse_arch("", &t).is_err());
    }

    #[test]
    fn mixed_heatmap_sizes_rejected() {
        let mut cfg = ExperimentConfig::deesco([32, 32], 32);
        cfg.branches[1].heatmap_size = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
