// Procedural eye crops with exact gaze labels.
//
// Each eye is an almond (ellipse) of sclera on skin, with an iris disc and a
// pupil. The iris centre is displaced from the eye centre linearly in the
// normalised target, so the label is recoverable from pixels by
// construction. Subjects differ in iris radius and colour, eyelid
// aperture, skin tone and head placement (which drives the position mask);
// samples add an illumination gain and pixel noise.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{write_dataset, DatasetManifest, GeneratorInfo};
use super::{GazeRanges, GazeSample, Image, Target, TargetKind, MASK_SIZE};
use crate::error::{Error, Result};
use crate::rng::substream;

fn default_crop() -> [usize; 2] {
    [32, 32]
}
fn default_noise() -> f64 {
    0.02
}
fn default_screen() -> [f64; 2] {
    [150.0, 90.0]
}
fn default_eye_width() -> f64 {
    0.84
}
fn default_iris_scale() -> [f64; 2] {
    [0.35, 0.45]
}
fn default_aperture() -> [f64; 2] {
    [0.55, 0.75]
}
fn default_gain() -> [f64; 2] {
    [0.75, 1.25]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Height and width of each eye crop.
    #[serde(default = "default_crop")]
    pub crop: [usize; 2],
    pub target_kind: TargetKind,
    #[serde(default)]
    pub gaze_ranges: GazeRanges,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Screen half extents in mm for 2D datasets.
    #[serde(default = "default_screen")]
    pub screen_half_extent_mm: [f64; 2],
    /// Eye width as a fraction of the crop width.
    #[serde(default = "default_eye_width")]
    pub eye_width: f64,
    /// Range of iris radius relative to the eye's vertical semi-axis.
    #[serde(default = "default_iris_scale")]
    pub iris_scale: [f64; 2],
    /// Range of eyelid aperture (vertical / horizontal semi-axis).
    #[serde(default = "default_aperture")]
    pub aperture: [f64; 2],
    /// Range of the per-sample illumination gain.
    #[serde(default = "default_gain")]
    pub gain: [f64; 2],
}

impl SynthParams {
    pub fn new(target_kind: TargetKind) -> Self {
        Self {
            crop: default_crop(),
            target_kind,
            gaze_ranges: GazeRanges::default(),
            noise_std: default_noise(),
            screen_half_extent_mm: default_screen(),
            eye_width: default_eye_width(),
            iris_scale: default_iris_scale(),
            aperture: default_aperture(),
            gain: default_gain(),
        }
    }

    fn validate(&self) -> Result<()> {
        let [h, w] = self.crop;
        if h < 8 || w < 8 {
            return Err(Error::config(format!("crop {h}x{w} is too small")));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] > 0.0;
        if !(ordered(self.iris_scale) && ordered(self.aperture) && ordered(self.gain)) {
            return Err(Error::config("appearance ranges must be positive and ordered"));
        }
        if !(self.eye_width > 0.0 && self.eye_width <= 1.0) || self.noise_std < 0.0 {
            return Err(Error::config("eye_width must lie in (0, 1] and noise_std be >= 0"));
        }
        if self.aperture[1] > 1.0 {
            return Err(Error::config("aperture above 1 makes the eye taller than wide"));
        }
        // The iris must fit inside the eye opening for every subject.
        if self.iris_scale[1] >= 1.0 {
            return Err(Error::config(format!(
                "iris radius scale {} does not fit inside the eye",
                self.iris_scale[1]
            )));
        }
        if let TargetKind::Gaze2d = self.target_kind {
            if !(self.screen_half_extent_mm[0] > 0.0 && self.screen_half_extent_mm[1] > 0.0) {
                return Err(Error::config("screen half extents must be positive"));
            }
        }
        self.gaze_ranges.normalize(&Target::Gaze3d { yaw: 0.0, pitch: 0.0 })?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Appearance {
    iris_scale: f64,
    aperture: f64,
    iris_rgb: [f64; 3],
    skin_rgb: [f64; 3],
    /// Column / row of the face-relative eye cell on the mask grid.
    head_cell: (i32, i32),
    base_gain: f64,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

fn appearance(seed: u64, subject: u32, p: &SynthParams) -> Appearance {
    let mut rng = substream(seed, &["synth", "subject", &subject.to_string()]);
    let iris_scale = uniform(&mut rng, p.iris_scale);
    let aperture = uniform(&mut rng, p.aperture);
    let hue = rng.random::<f64>();
    // Brown-to-blue family; pupil stays darker than any iris.
    let iris_rgb = [
        0.25 + 0.35 * (1.0 - hue),
        0.2 + 0.25 * rng.random::<f64>(),
        0.2 + 0.5 * hue,
    ];
    let tone = uniform(&mut rng, [0.45, 0.85]);
    let skin_rgb = [tone, tone * 0.78, tone * 0.62];
    let head_cell = (rng.random_range(4..12), rng.random_range(3..13));
    let base_gain = uniform(&mut rng, [0.9, 1.1]);
    Appearance {
        iris_scale,
        aperture,
        iris_rgb,
        skin_rgb,
        head_cell,
        base_gain,
    }
}

/// Anti-aliased coverage of a disc edge at signed distance `d` (pixels, inside negative).
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// Geometry of one rendered eye in pixel units.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EyeGeometry {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub iris_radius: f64,
    pub pupil_radius: f64,
    pub max_shift: (f64, f64),
}

fn geometry(p: &SynthParams, a: &Appearance) -> EyeGeometry {
    let [h, w] = p.crop;
    let sa = 0.5 * p.eye_width * w as f64;
    let sb = (a.aperture * sa).min(0.5 * h as f64 - 1.0);
    let iris_radius = a.iris_scale * sb;
    let pupil_radius = 0.45 * iris_radius;
    // The gaze-to-pixel scale is shared by all subjects: it is sized for the
    // narrowest eye with the largest iris the ranges allow.
    let sb_min = (p.aperture[0] * sa).min(0.5 * h as f64 - 1.0);
    let iris_max = p.iris_scale[1] * (p.aperture[1] * sa).min(0.5 * h as f64 - 1.0);
    EyeGeometry {
        center: ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
        semi_axes: (sa, sb),
        iris_radius,
        pupil_radius,
        max_shift: (
            0.8 * (sa - iris_max - 1.0).max(0.0),
            0.8 * (sb_min - 0.45 * iris_max - 1.0).max(0.0),
        ),
    }
}

fn render_eye(
    p: &SynthParams,
    a: &Appearance,
    geo: &EyeGeometry,
    offset: (f64, f64),
    gain: f64,
    noise: Option<&mut ChaCha8Rng>,
) -> Image {
    let [h, w] = p.crop;
    let (cx, cy) = geo.center;
    let (ix, iy) = (cx + offset.0 * geo.max_shift.0, cy + offset.1 * geo.max_shift.1);
    let sclera = [0.93, 0.92, 0.9];
    let pupil = [0.04, 0.04, 0.05];
    let mut noise = noise;
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            // Approximate signed distance to the eye ellipse in pixels.
            let (ex, ey) = ((xf - cx) / geo.semi_axes.0, (yf - cy) / geo.semi_axes.1);
            let r = (ex * ex + ey * ey).sqrt();
            let eye = coverage((r - 1.0) * geo.semi_axes.1.min(geo.semi_axes.0));
            let di = ((xf - ix).powi(2) + (yf - iy).powi(2)).sqrt();
            let iris = coverage(di - geo.iris_radius);
            let pup = coverage(di - geo.pupil_radius);
            for c in 0..3 {
                let inner = sclera[c] * (1.0 - iris) + (a.iris_rgb[c] * (1.0 - pup) + pupil[c] * pup) * iris;
                let mut v = gain * (a.skin_rgb[c] * (1.0 - eye) + inner * eye);
                if let Some(rng) = noise.as_deref_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    v += p.noise_std * z;
                }
                px.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(h, w, px).expect("rendered image size")
}

fn position_mask(a: &Appearance, jitter: (i32, i32)) -> Vec<u8> {
    let mut mask = vec![0u8; MASK_SIZE * MASK_SIZE];
    let (cx, cy) = (a.head_cell.0 + jitter.0, a.head_cell.1 + jitter.1);
    // Both eyes: a 4×2 block of cells centred on the head placement.
    for row in cy - 1..=cy {
        for col in cx - 2..=cx + 1 {
            if (0..MASK_SIZE as i32).contains(&row) && (0..MASK_SIZE as i32).contains(&col) {
                mask[row as usize * MASK_SIZE + col as usize] = 1;
            }
        }
    }
    mask
}

fn render_sample(seed: u64, subject: u32, k: usize, p: &SynthParams, a: &Appearance) -> GazeSample {
    let mut rng = substream(seed, &["synth", "sample", &subject.to_string(), &k.to_string()]);
    let (t0, t1): (f64, f64) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    let target = match p.target_kind {
        TargetKind::Gaze3d => Target::Gaze3d {
            yaw: t0 * p.gaze_ranges.yaw_max,
            pitch: t1 * p.gaze_ranges.pitch_max,
        },
        TargetKind::Gaze2d => Target::Gaze2d { u: t0, v: t1 },
    };
    let gain = a.base_gain * uniform(&mut rng, p.gain);
    let jitter = (rng.random_range(-1..=1), rng.random_range(-1..=1));
    let geo = geometry(p, a);
    let noise_on = p.noise_std > 0.0;
    let left = render_eye(p, a, &geo, (t0, t1), gain, noise_on.then_some(&mut rng));
    let right = render_eye(p, a, &geo, (t0, t1), gain, noise_on.then_some(&mut rng));
    GazeSample {
        left,
        right,
        mask: position_mask(a, jitter),
        target,
        subject_id: subject,
        screen_half_extent_mm: match p.target_kind {
            TargetKind::Gaze2d => Some((p.screen_half_extent_mm[0], p.screen_half_extent_mm[1])),
            TargetKind::Gaze3d => None,
        },
    }
}

/// Renders `n_subjects × samples_per_subject` samples in subject-major order.
pub fn generate_samples(
    seed: u64,
    n_subjects: usize,
    samples_per_subject: usize,
    params: &SynthParams,
) -> Result<Vec<GazeSample>> {
    if n_subjects < 2 {
        return Err(Error::config(format!(
            "need at least 2 subjects for leave-one-subject-out, got {n_subjects}"
        )));
    }
    params.validate()?;
    let looks: Vec<Appearance> = (0..n_subjects as u32).map(|s| appearance(seed, s, params)).collect();
    for a in &looks {
        let g = geometry(params, a);
        if g.iris_radius >= g.semi_axes.1.min(g.semi_axes.0) || g.pupil_radius < 0.5 {
            return Err(Error::config(format!(
                "degenerate eye: iris radius {:.2}px vs eye semi-axes {:.2}x{:.2}px",
                g.iris_radius, g.semi_axes.0, g.semi_axes.1
            )));
        }
    }
    let jobs: Vec<(u32, usize)> = (0..n_subjects as u32)
        .flat_map(|s| (0..samples_per_subject).map(move |k| (s, k)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(s, k)| render_sample(seed, s, k, params, &looks[s as usize]))
        .collect())
}

/// Generates a synthetic dataset and writes it to `root`.
pub fn synth_generate(
    root: &Path,
    seed: u64,
    n_subjects: usize,
    samples_per_subject: usize,
    params: &SynthParams,
) -> Result<DatasetManifest> {
    let samples = generate_samples(seed, n_subjects, samples_per_subject, params)?;
    let template = DatasetManifest {
        version: 1,
        format: "DGZS01".into(),
        sample_count: 0,
        subjects: Vec::new(),
        target_kind: params.target_kind,
        crop: params.crop,
        mask_size: MASK_SIZE,
        gaze_ranges: params.gaze_ranges,
        screen_half_extent_mm: match params.target_kind {
            TargetKind::Gaze2d => Some(params.screen_half_extent_mm),
            TargetKind::Gaze3d => None,
        },
        generator: Some(GeneratorInfo {
            seed,
            n_subjects,
            samples_per_subject,
            params: params.clone(),
        }),
        samples: Vec::new(),
    };
    write_dataset(root, template, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SynthParams {
        SynthParams {
            noise_std: 0.0,
            ..SynthParams::new(TargetKind::Gaze3d)
        }
    }

    /// Centroid of dark (pupil) pixels.
    fn pupil_centroid(img: &Image) -> (f64, f64) {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..img.height {
            for x in 0..img.width {
                let p = img.pixel(y, x);
                let lum = (p[0] + p[1] + p[2]) as f64 / 3.0;
                let w = (0.2 - lum).max(0.0);
                sx += w * x as f64;
                sy += w * y as f64;
                sw += w;
            }
        }
        (sx / sw, sy / sw)
    }

    #[test]
    fn zero_gaze_centres_the_iris() {
        let p = noiseless();
        let a = appearance(3, 0, &p);
        let geo = geometry(&p, &a);
        let img = render_eye(&p, &a, &geo, (0.0, 0.0), 1.0, None);
        let (x, y) = pupil_centroid(&img);
        assert!((x - geo.center.0).abs() < 1e-6 && (y - geo.center.1).abs() < 1e-6, "{x} {y}");
    }

    #[test]
    fn subjects_look_different_for_the_same_gaze() {
        let p = noiseless();
        let (a0, a1) = (appearance(3, 0, &p), appearance(3, 1, &p));
        let i0 = render_eye(&p, &a0, &geometry(&p, &a0), (0.3, -0.2), 1.0, None);
        let i1 = render_eye(&p, &a1, &geometry(&p, &a1), (0.3, -0.2), 1.0, None);
        assert_ne!(i0, i1);
    }

    #[test]
    fn label_is_linearly_recoverable_from_pupil_position() {
        let p = noiseless();
        let samples = generate_samples(11, 4, 60, &p).unwrap();
        // Least squares: target_k ≈ c0 + c1·dx + c2·dy per subject-agnostic probe.
        let rows: Vec<([f64; 3], (f64, f64))> = samples
            .iter()
            .map(|s| {
                let (x, y) = pupil_centroid(&s.left);
                let c = (p.crop[1] as f64 - 1.0) / 2.0;
                ([1.0, x - c, y - c], s.target.pair())
            })
            .collect();
        for axis in 0..2 {
            let ys: Vec<f64> = rows.iter().map(|r| if axis == 0 { r.1 .0 } else { r.1 .1 }).collect();
            let r2 = linear_r2(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), &ys);
            assert!(r2 > 0.99, "axis {axis}: R² = {r2}");
        }
    }

    fn linear_r2(x: &[[f64; 3]], y: &[f64]) -> f64 {
        // Normal equations, 3×3 solve by Gaussian elimination.
        let mut a = [[0.0; 4]; 3];
        for (xi, yi) in x.iter().zip(y) {
            for r in 0..3 {
                for c in 0..3 {
                    a[r][c] += xi[r] * xi[c];
                }
                a[r][3] += xi[r] * yi;
            }
        }
        for col in 0..3 {
            let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..3 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..4 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let pred: f64 = (0..3).map(|k| beta[k] * xi[k]).sum();
            ss_res += (yi - pred).powi(2);
            ss_tot += (yi - mean).powi(2);
        }
        1.0 - ss_res / ss_tot
    }

    #[test]
    fn degenerate_iris_is_rejected() {
        let p = SynthParams {
            iris_scale: [0.9, 1.2],
            ..noiseless()
        };
        assert!(matches!(generate_samples(1, 2, 1, &p), Err(Error::Config(_))));
        assert!(generate_samples(1, 1, 5, &noiseless()).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams::new(TargetKind::Gaze2d);
        let a = generate_samples(5, 3, 4, &p).unwrap();
        let b = generate_samples(5, 3, 4, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.screen_half_extent_mm.is_some()));
        assert!(a.iter().all(|s| s.validate(&p.gaze_ranges).is_ok()));
    }
}
