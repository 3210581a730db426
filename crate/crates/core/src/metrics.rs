//! Gaze error metrics, fold aggregation and branch decorrelation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::Mode;
use crate::data::{Dataset, Fold, Target, TargetKind};
use crate::ensemble::{decode, merge_heatmaps, EnsembleModel};
use crate::error::{Error, Result};
use crate::tensor::Graph;

/// Unit gaze direction `(cos β sin γ, sin β, cos β cos γ)` for yaw γ, pitch β.
pub fn yawpitch_to_vec(yaw: f64, pitch: f64) -> [f64; 3] {
    let (sb, cb) = pitch.sin_cos();
    let (sg, cg) = yaw.sin_cos();
    [cb * sg, sb, cb * cg]
}

/// The published form `(cos γ sin β, sin γ, cos² β)`, kept for comparison.
/// It is not unit length in general.
pub fn yawpitch_to_vec_literal(yaw: f64, pitch: f64) -> [f64; 3] {
    let cb = pitch.cos();
    [yaw.cos() * pitch.sin(), yaw.sin(), cb * cb]
}

/// Which yaw/pitch → vector map angular errors use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeVector {
    #[default]
    Spherical,
    PaperLiteral,
}

impl GazeVector {
    pub fn from_flag(paper_literal: bool) -> Self {
        if paper_literal {
            GazeVector::PaperLiteral
        } else {
            GazeVector::Spherical
        }
    }

    pub fn map(self, yaw: f64, pitch: f64) -> [f64; 3] {
        match self {
            GazeVector::Spherical => yawpitch_to_vec(yaw, pitch),
            GazeVector::PaperLiteral => yawpitch_to_vec_literal(yaw, pitch),
        }
    }
}

/// Angle in degrees between two direction vectors.
pub fn vector_angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angular error in degrees between two (yaw, pitch) pairs in radians.
pub fn angular_error_deg(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    angular_error_deg_with(GazeVector::Spherical, pred, truth)
}

pub fn angular_error_deg_with(conv: GazeVector, pred: (f64, f64), truth: (f64, f64)) -> f64 {
    vector_angle_deg(conv.map(pred.0, pred.1), conv.map(truth.0, truth.1))
}

/// On-screen distance in mm between two normalised screen points.
pub fn euclidean_error_mm(pred: (f64, f64), truth: (f64, f64), screen_half_extent_mm: Option<(f64, f64)>) -> Result<f64> {
    let (sx, sy) = screen_half_extent_mm
        .ok_or_else(|| Error::config("euclidean error needs the screen half extents in mm"))?;
    Ok(((pred.0 - truth.0) * sx).hypot((pred.1 - truth.1) * sy))
}

/// Pearson correlation of two equally long series; `None` when either has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise correlation of branch signed errors. Each branch contributes the
/// vector of its per-sample yaw errors followed by its pitch errors.
/// Undefined entries (a branch with constant error) are `None`.
pub fn decorrelation_matrix(per_branch: &[Vec<(f64, f64)>], truths: &[(f64, f64)]) -> Result<Vec<Vec<Option<f64>>>> {
    if per_branch.len() < 2 || truths.len() < 3 {
        return Err(Error::usage(format!(
            "decorrelation needs >= 2 branches and >= 3 samples, got {} and {}",
            per_branch.len(),
            truths.len()
        )));
    }
    let errors = per_branch
        .iter()
        .map(|preds| {
            if preds.len() != truths.len() {
                return Err(Error::dim("decorrelation: prediction and truth counts differ"));
            }
            let mut e: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| p.0 - t.0).collect();
            e.extend(preds.iter().zip(truths).map(|(p, t)| p.1 - t.1));
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = errors.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let r = pearson(&errors[i], &errors[j]).map(|r| if i == j { 1.0 } else { r });
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// Angular error in degrees.
    #[serde(rename = "3d")]
    Angular3d,
    /// On-screen Euclidean error in mm.
    #[serde(rename = "2d")]
    Euclid2d,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "3d" | "3D" => Ok(MetricKind::Angular3d),
            "2d" | "2D" => Ok(MetricKind::Euclid2d),
            other => Err(Error::config(format!("unknown metric {other:?} (expected 3d or 2d)"))),
        }
    }

    pub fn for_target(kind: TargetKind) -> Self {
        match kind {
            TargetKind::Gaze3d => MetricKind::Angular3d,
            TargetKind::Gaze2d => MetricKind::Euclid2d,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            MetricKind::Angular3d => "deg",
            MetricKind::Euclid2d => "mm",
        }
    }

    pub fn check_dataset(self, kind: TargetKind) -> Result<()> {
        if Self::for_target(kind) != self {
            return Err(Error::config(format!(
                "metric {} does not apply to a {} dataset",
                self.unit(),
                match kind {
                    TargetKind::Gaze3d => "3d",
                    TargetKind::Gaze2d => "2d",
                }
            )));
        }
        Ok(())
    }
}

/// Per-sample error of a normalised prediction against a sample's target.
pub fn sample_error(
    metric: MetricKind,
    conv: GazeVector,
    ds: &Dataset,
    index: usize,
    pred: (f64, f64),
) -> Result<f64> {
    let s = &ds.samples[index];
    let ranges = ds.ranges();
    match (metric, ranges.denormalize(ds.target_kind(), pred), s.target) {
        (MetricKind::Angular3d, Target::Gaze3d { yaw, pitch }, Target::Gaze3d { yaw: ty, pitch: tp }) => {
            Ok(angular_error_deg_with(conv, (yaw, pitch), (ty, tp)))
        }
        (MetricKind::Euclid2d, Target::Gaze2d { u, v }, Target::Gaze2d { u: tu, v: tv }) => {
            euclidean_error_mm((u, v), (tu, tv), s.screen_half_extent_mm)
        }
        _ => Err(Error::config(format!(
            "metric {} does not match the dataset targets",
            metric.unit()
        ))),
    }
}

/// Normalised full-ensemble and per-branch predictions for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub ids: Vec<usize>,
    pub full: Vec<(f64, f64)>,
    /// `branches[i][k]`: branch i's own decoded estimate for sample k.
    pub branches: Vec<Vec<(f64, f64)>>,
}

/// Eval-mode predictions, `batch_size` samples per graph.
pub fn predict(model: &EnsembleModel, ds: &Dataset, ids: &[usize], batch_size: usize) -> Result<Predictions> {
    let n_branches = model.n_branches();
    let chunks: Vec<&[usize]> = ids.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let batch = ds.batch(chunk)?;
            let mut g = Graph::new();
            let mut updates = Vec::new();
            let heatmaps = model
                .predictors()
                .iter()
                .map(|p| p.forward(&mut g, model.store(), &batch, Mode::Eval, &mut updates))
                .collect::<Result<Vec<_>>>()?;
            let merged = merge_heatmaps(&mut g, model.store(), model.full_combiner(), &heatmaps)?;
            let full = decode(&mut g, merged)?;
            let mut coords = vec![full.coords];
            for h in &heatmaps {
                coords.push(decode(&mut g, *h)?.coords);
            }
            let pairs: Vec<Vec<(f64, f64)>> = coords
                .iter()
                .map(|c| g.value(*c).data().chunks(2).map(|p| (p[0], p[1])).collect())
                .collect();
            Ok(pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Predictions {
        ids: ids.to_vec(),
        full: Vec::with_capacity(ids.len()),
        branches: vec![Vec::with_capacity(ids.len()); n_branches],
    };
    for part in parts {
        let mut it = part.into_iter();
        out.full.extend(it.next().unwrap());
        for (b, p) in out.branches.iter_mut().zip(it) {
            b.extend(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subjects: Vec<u32>,
    pub n: usize,
    pub mean_error: f64,
    /// Mean error of each branch evaluated on its own.
    pub branch_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub unit: String,
    pub gaze_vector: GazeVector,
    pub branches: Vec<String>,
    pub param_count: usize,
    pub per_fold: Vec<FoldResult>,
    /// Unweighted mean of the per-fold means.
    pub overall_mean: f64,
    /// Sample standard deviation of the per-fold means (0 for one fold).
    pub overall_std: f64,
    /// Mean over all test samples pooled.
    pub pooled_mean: f64,
    pub total_n: usize,
    /// fold × branch mean errors.
    pub per_branch_errors: Vec<Vec<f64>>,
    /// Pairwise correlation of branch signed errors over all test samples;
    /// `null` where undefined.
    pub decorrelation: Option<Vec<Vec<Option<f64>>>>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores one trained model per fold on that fold's held-out subjects.
pub fn evaluate(
    models: &[&EnsembleModel],
    folds: &[Fold],
    ds: &Dataset,
    metric: MetricKind,
    conv: GazeVector,
    batch_size: usize,
) -> Result<EvalReport> {
    Ok(evaluate_detailed(models, folds, ds, metric, conv, batch_size)?.0)
}

/// [`evaluate`] plus the per-fold predictions behind the report.
pub fn evaluate_detailed(
    models: &[&EnsembleModel],
    folds: &[Fold],
    ds: &Dataset,
    metric: MetricKind,
    conv: GazeVector,
    batch_size: usize,
) -> Result<(EvalReport, Vec<Predictions>)> {
    if models.len() != folds.len() || folds.is_empty() {
        return Err(Error::usage(format!(
            "evaluate: {} models for {} folds",
            models.len(),
            folds.len()
        )));
    }
    metric.check_dataset(ds.target_kind())?;
    let n_branches = models[0].n_branches();
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut pooled = Vec::new();
    let mut branch_preds: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_branches];
    let mut truths = Vec::new();
    let mut all_preds = Vec::with_capacity(folds.len());
    for (model, fold) in models.iter().zip(folds) {
        if model.n_branches() != n_branches {
            return Err(Error::usage("evaluate: fold models differ in branch count"));
        }
        let ids = ds.indices_of(&fold.test_subjects);
        if ids.is_empty() {
            return Err(Error::Data(format!("fold {}: no test samples", fold.id)));
        }
        let preds = predict(model, ds, &ids, batch_size)?;
        let errs = ids
            .iter()
            .zip(&preds.full)
            .map(|(&i, p)| sample_error(metric, conv, ds, i, *p))
            .collect::<Result<Vec<_>>>()?;
        let branch_errors = preds
            .branches
            .iter()
            .map(|bp| {
                let e = ids
                    .iter()
                    .zip(bp)
                    .map(|(&i, p)| sample_error(metric, conv, ds, i, *p))
                    .collect::<Result<Vec<_>>>()?;
                Ok(mean_std(&e).0)
            })
            .collect::<Result<Vec<_>>>()?;
        for (acc, bp) in branch_preds.iter_mut().zip(&preds.branches) {
            acc.extend(bp);
        }
        truths.extend(ids.iter().map(|&i| {
            let t = &ds.samples[i].target;
            ds.ranges().normalize(t).expect("validated on load")
        }));
        per_fold.push(FoldResult {
            fold: fold.id,
            test_subjects: fold.test_subjects.clone(),
            n: errs.len(),
            mean_error: mean_std(&errs).0,
            branch_errors,
        });
        pooled.extend(errs);
        all_preds.push(preds);
    }
    let fold_means: Vec<f64> = per_fold.iter().map(|f| f.mean_error).collect();
    let (overall_mean, overall_std) = mean_std(&fold_means);
    let decorrelation = if n_branches >= 2 && truths.len() >= 3 {
        Some(decorrelation_matrix(&branch_preds, &truths)?)
    } else {
        None
    };
    let report = EvalReport {
        metric,
        unit: metric.unit().into(),
        gaze_vector: conv,
        branches: models[0]
            .predictors()
            .iter()
            .map(|p| p.kind().as_str().to_string())
            .collect(),
        param_count: models[0].param_count(),
        per_branch_errors: per_fold.iter().map(|f| f.branch_errors.clone()).collect(),
        per_fold,
        overall_mean,
        overall_std,
        pooled_mean: mean_std(&pooled).0,
        total_n: pooled.len(),
        decorrelation,
    };
    Ok((report, all_preds))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per fold plus an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,test_subjects,n,err");
        for (i, b) in self.branches.iter().enumerate() {
            let _ = write!(s, ",branch{i}_{b}");
        }
        s.push('\n');
        for f in &self.per_fold {
            let subjects: Vec<String> = f.test_subjects.iter().map(|x| x.to_string()).collect();
            let _ = write!(s, "{},{},{},{:.6}", f.fold, subjects.join(" "), f.n, f.mean_error);
            for e in &f.branch_errors {
                let _ = write!(s, ",{e:.6}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "overall,,{},{:.6}", self.total_n, self.overall_mean);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn vector_examples() {
        assert_eq!(yawpitch_to_vec(0.0, 0.0), [0.0, 0.0, 1.0]);
        let v = yawpitch_to_vec(FRAC_PI_2, 0.0);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15 && v[2].abs() < 1e-15);
        assert!((angular_error_deg((0.0, 0.0), (FRAC_PI_2, 0.0)) - 90.0).abs() < 1e-12);
        assert_eq!(angular_error_deg((0.2, -0.1), (0.2, -0.1)), 0.0);
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(euclidean_error_mm((0.3, 0.3), (0.3, 0.3), Some((100.0, 50.0))).unwrap(), 0.0);
        assert!((euclidean_error_mm((0.1, 0.0), (0.0, 0.0), Some((100.0, 100.0))).unwrap() - 10.0).abs() < 1e-12);
        let d = euclidean_error_mm((0.1, 0.1), (0.0, 0.0), Some((100.0, 100.0))).unwrap();
        assert!((d - 14.142).abs() < 1e-3);
        assert!(matches!(euclidean_error_mm((0.0, 0.0), (0.0, 0.0), None), Err(Error::Config(_))));
    }

    #[test]
    fn decorrelation_duplicate_and_mirror() {
        let truths: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.01, -(i as f64) * 0.02)).collect();
        let a: Vec<(f64, f64)> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| (t.0 + ((i * 7) % 5) as f64 * 0.1, t.1 + ((i * 3) % 4) as f64 * 0.05))
            .collect();
        let mirror: Vec<(f64, f64)> = a
            .iter()
            .zip(&truths)
            .map(|(p, t)| (2.0 * t.0 - p.0, 2.0 * t.1 - p.1))
            .collect();
        let m = decorrelation_matrix(&[a.clone(), a.clone(), mirror], &truths).unwrap();
        assert!((m[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!((m[0][2].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m[1][1], Some(1.0));
        let m = decorrelation_matrix(&[a, truths.clone()], &truths).unwrap();
        assert_eq!(m[0][1], None);
        assert_eq!(m[1][1], None);
    }

    #[test]
    fn metric_dataset_mismatch() {
        assert!(matches!(
            MetricKind::Euclid2d.check_dataset(TargetKind::Gaze3d),
            Err(Error::Config(_))
        ));
        assert!(MetricKind::Angular3d.check_dataset(TargetKind::Gaze3d).is_ok());
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
