#![allow(dead_code)]

use std::path::{Path, PathBuf};

use deesco::branches::{BranchConfig, BranchKind};
use deesco::config::{parse_arch, ExperimentConfig};
use deesco::data::{load_dataset, synth_generate, Dataset, SynthParams, TargetKind};
use deesco::optim::TrainSchedule;
use deesco::trainer::TrainSettings;

pub const CROP: usize = 16;
pub const S: usize = 16;

/// Smallest legal branch: 16×16 crops, 16×16 heatmaps, one trunk layer.
pub fn tiny_template() -> BranchConfig {
    BranchConfig {
        crop_size: [CROP, CROP],
        heatmap_size: S,
        conv_channels: vec![4],
        fc_widths: vec![8],
        upsample_channels: vec![4],
        ..BranchConfig::new(BranchKind::Rh)
    }
}

pub fn tiny_branches(arch: &str) -> Vec<BranchConfig> {
    parse_arch(arch, &tiny_template()).unwrap()
}

pub fn tiny_config(arch: &str, dataset: &Path, output: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(tiny_branches(arch));
    cfg.dataset = Some(dataset.to_path_buf());
    cfg.output_dir = output.to_path_buf();
    cfg.schedule.batch_size = 4;
    cfg.schedule.total_steps = Some(4);
    cfg.eval_batch_size = 16;
    cfg
}

pub fn synth_params(kind: TargetKind) -> SynthParams {
    SynthParams {
        crop: [CROP, CROP],
        ..SynthParams::new(kind)
    }
}

/// Writes a synthetic dataset with 16×16 crops under `dir` and returns its path.
pub fn write_tiny_dataset(dir: &Path, subjects: usize, per_subject: usize, seed: u64, kind: TargetKind) -> PathBuf {
    let path = dir.join("data");
    synth_generate(&path, seed, subjects, per_subject, &synth_params(kind)).unwrap();
    path
}

pub fn tiny_dataset(subjects: usize, per_subject: usize, seed: u64) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    let path = write_tiny_dataset(dir.path(), subjects, per_subject, seed, TargetKind::Gaze3d);
    load_dataset(&path).unwrap().read_all().unwrap()
}

pub fn settings(steps: usize, batch: usize, nu: f64, seed: u64) -> TrainSettings {
    TrainSettings {
        nu,
        schedule: TrainSchedule {
            total_steps: Some(steps),
            batch_size: batch,
            ..TrainSchedule::default()
        },
        clip_norm: None,
        seed,
    }
}
