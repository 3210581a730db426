//! Gaze samples, batches, target normalisation and the on-disk dataset.

mod folds;
mod format;
mod synth;

pub use folds::{make_folds, Fold, FoldScheme};
pub use format::{
    decode_record, encode_record, load_dataset, write_dataset, DatasetManifest, DatasetReader, GeneratorInfo,
    SampleEntry, RECORD_MAGIC,
};
pub use synth::{generate_samples, synth_generate, SynthParams};

use serde::{Deserialize, Serialize};

use crate::branches::FEATURE_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "DEESCO_DATA_DIR";

/// Side of the square eye-position mask.
pub const MASK_SIZE: usize = FEATURE_SIZE;

/// An H×W×3 image with values in [0, 1], row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    #[serde(rename = "3d")]
    Gaze3d,
    #[serde(rename = "2d")]
    Gaze2d,
}

impl TargetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "3d" | "3D" => Ok(TargetKind::Gaze3d),
            "2d" | "2D" => Ok(TargetKind::Gaze2d),
            other => Err(Error::config(format!("unknown target kind {other:?} (expected 3d or 2d)"))),
        }
    }
}

/// Ground truth of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Yaw γ and pitch β in radians.
    Gaze3d { yaw: f64, pitch: f64 },
    /// Screen point in the normalised [−1, 1]² frame.
    Gaze2d { u: f64, v: f64 },
}

impl Target {
    pub fn kind(&self) -> TargetKind {
        match self {
            Target::Gaze3d { .. } => TargetKind::Gaze3d,
            Target::Gaze2d { .. } => TargetKind::Gaze2d,
        }
    }

    pub fn pair(&self) -> (f64, f64) {
        match *self {
            Target::Gaze3d { yaw, pitch } => (yaw, pitch),
            Target::Gaze2d { u, v } => (u, v),
        }
    }
}

/// Dataset-declared maximum |yaw| and |pitch|, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeRanges {
    pub yaw_max: f64,
    pub pitch_max: f64,
}

impl Default for GazeRanges {
    fn default() -> Self {
        Self {
            yaw_max: std::f64::consts::FRAC_PI_4,
            pitch_max: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl GazeRanges {
    fn check(&self) -> Result<()> {
        if !(self.yaw_max > 0.0 && self.pitch_max > 0.0) {
            return Err(Error::config("gaze ranges must be positive"));
        }
        Ok(())
    }

    /// Target in training space, [−1, 1]².
    pub fn normalize(&self, t: &Target) -> Result<(f64, f64)> {
        self.check()?;
        let (a, b) = match *t {
            Target::Gaze3d { yaw, pitch } => (yaw / self.yaw_max, pitch / self.pitch_max),
            Target::Gaze2d { u, v } => (u, v),
        };
        const SLACK: f64 = 1e-9;
        if !(a.abs() <= 1.0 + SLACK && b.abs() <= 1.0 + SLACK) {
            return Err(Error::Data(format!("target {t:?} lies outside the declared range")));
        }
        Ok((a, b))
    }

    /// Inverse of [`GazeRanges::normalize`] for the given target kind.
    pub fn denormalize(&self, kind: TargetKind, p: (f64, f64)) -> Target {
        match kind {
            TargetKind::Gaze3d => Target::Gaze3d {
                yaw: p.0 * self.yaw_max,
                pitch: p.1 * self.pitch_max,
            },
            TargetKind::Gaze2d => Target::Gaze2d { u: p.0, v: p.1 },
        }
    }
}

/// One pair of eye crops with its position mask and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSample {
    pub left: Image,
    pub right: Image,
    /// MASK_SIZE² cells, 1 where the eyes sit within the face.
    pub mask: Vec<u8>,
    pub target: Target,
    pub subject_id: u32,
    /// Half screen width/height in mm (2D samples only).
    pub screen_half_extent_mm: Option<(f64, f64)>,
}

impl GazeSample {
    pub fn validate(&self, ranges: &GazeRanges) -> Result<()> {
        if self.left.height != self.right.height || self.left.width != self.right.width {
            return Err(Error::Data("left and right crops differ in size".into()));
        }
        if self.mask.len() != MASK_SIZE * MASK_SIZE || self.mask.iter().any(|m| *m > 1) {
            return Err(Error::Data("position mask must be a 16x16 binary map".into()));
        }
        ranges.normalize(&self.target)?;
        if let Target::Gaze2d { .. } = self.target {
            match self.screen_half_extent_mm {
                Some((sx, sy)) if sx > 0.0 && sy > 0.0 => {}
                _ => return Err(Error::Data("2D sample without screen geometry".into())),
            }
        }
        Ok(())
    }
}

/// Network-ready tensors for a set of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub left: Tensor,
    /// `[B, 3, H, W]`
    pub right: Tensor,
    /// `[B, 1, 16, 16]`
    pub mask: Tensor,
    /// Normalised targets `[B, 2]`.
    pub targets: Tensor,
    /// Dataset indices of the samples.
    pub ids: Vec<usize>,
}

fn to_chw(img: &Image, out: &mut Vec<f64>) {
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                out.push(img.pixels[(y * img.width + x) * 3 + c] as f64);
            }
        }
    }
}

impl Batch {
    pub fn from_samples(samples: &[&GazeSample], ids: &[usize], ranges: &GazeRanges) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::usage("empty batch"))?;
        let (h, w) = (first.left.height, first.left.width);
        let n = samples.len();
        let mut left = Vec::with_capacity(n * 3 * h * w);
        let mut right = Vec::with_capacity(n * 3 * h * w);
        let mut mask = Vec::with_capacity(n * MASK_SIZE * MASK_SIZE);
        let mut targets = Vec::with_capacity(n * 2);
        for s in samples {
            if s.left.height != h || s.left.width != w || s.right.height != h || s.right.width != w {
                return Err(Error::dim("batch mixes crop sizes"));
            }
            to_chw(&s.left, &mut left);
            to_chw(&s.right, &mut right);
            mask.extend(s.mask.iter().map(|m| *m as f64));
            let (a, b) = ranges.normalize(&s.target)?;
            targets.extend([a, b]);
        }
        Ok(Self {
            left: Tensor::new(vec![n, 3, h, w], left)?,
            right: Tensor::new(vec![n, 3, h, w], right)?,
            mask: Tensor::new(vec![n, 1, MASK_SIZE, MASK_SIZE], mask)?,
            targets: Tensor::new(vec![n, 2], targets)?,
            ids: ids.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Samples held in memory together with their manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<GazeSample>,
}

impl Dataset {
    pub fn ranges(&self) -> GazeRanges {
        self.manifest.gaze_ranges
    }

    pub fn target_kind(&self) -> TargetKind {
        self.manifest.target_kind
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.samples.iter().map(|s| s.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Indices of all samples whose subject is in `subjects`.
    pub fn indices_of(&self, subjects: &[u32]) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| subjects.contains(&s.subject_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn batch(&self, ids: &[usize]) -> Result<Batch> {
        let refs: Vec<&GazeSample> = ids
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .ok_or_else(|| Error::usage(format!("sample id {i} out of range 0..{}", self.samples.len())))
            })
            .collect::<Result<_>>()?;
        Batch::from_samples(&refs, ids, &self.ranges())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_round_trip() {
        let r = GazeRanges::default();
        let t = Target::Gaze3d {
            yaw: r.yaw_max,
            pitch: 0.0,
        };
        assert_eq!(r.normalize(&t).unwrap(), (1.0, 0.0));
        let zero = Target::Gaze3d { yaw: 0.0, pitch: 0.0 };
        assert_eq!(r.normalize(&zero).unwrap(), (0.0, 0.0));
        for (y, p) in [(0.3, -0.2), (-0.78, 0.5), (0.01, 0.7)] {
            let t = Target::Gaze3d { yaw: y, pitch: p };
            let back = r.denormalize(TargetKind::Gaze3d, r.normalize(&t).unwrap());
            let (a, b) = back.pair();
            assert!((a - y).abs() < 1e-12 && (b - p).abs() < 1e-12);
        }
        let out = Target::Gaze3d { yaw: 1.0, pitch: 0.0 };
        assert!(matches!(r.normalize(&out), Err(Error::Data(_))));
        let bad = GazeRanges {
            yaw_max: 0.0,
            pitch_max: 1.0,
        };
        assert!(bad.normalize(&zero).is_err());
    }
}
