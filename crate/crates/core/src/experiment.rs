//! Command implementations behind the `deesco` binary.
//!
//! Each command takes fully resolved arguments, writes its artifacts and a
//! short human-readable summary to `log`, and returns its result so tests can
//! inspect it without parsing text.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::Mode;
use crate::config::{arch_label, parse_arch, ExperimentConfig};
use crate::data::{
    load_dataset, make_folds, synth_generate, Dataset, DatasetManifest, Fold, SynthParams, DATA_DIR_ENV,
};
use crate::ensemble::{subset_key, EnsembleModel};
use crate::error::{Error, Result};
use crate::gradcheck::{check_primitive, GradCheckOptions, PRIMITIVES};
use crate::metrics::{evaluate_detailed, mean_std, sample_error, EvalReport, GazeVector, MetricKind};
use crate::pgm::write_pgm;
use crate::rng::derive_seed;
use crate::tensor::{Graph, Tensor};
use crate::trainer::{fit, load_weights, FitOutputs, StepRecord, TrainSettings};

pub const TOOL_NAME: &str = "deesco";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const CONFIG_FILE: &str = "config.json";
const RUN_FILE: &str = "run.json";

/// Explicit path, else `$DEESCO_DATA_DIR`.
pub fn resolve_dataset_path(explicit: Option<&Path>) -> Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(DATA_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => {
                return Err(Error::config(format!(
                    "no dataset given: pass --dataset, set \"dataset\" in the config or export {DATA_DIR_ENV}"
                )))
            }
        },
    };
    if !path.join("manifest.json").is_file() {
        return Err(Error::config(format!("no dataset found at {}", path.display())));
    }
    Ok(path)
}

pub fn open_dataset(explicit: Option<&Path>) -> Result<(PathBuf, Dataset)> {
    let path = resolve_dataset_path(explicit)?;
    let ds = load_dataset(&path)?.read_all()?;
    Ok((path, ds))
}

/// Seed of the data-order and μ substreams of one fold.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    derive_seed(master, &["fold", &fold.to_string()])
}

fn in_fold(id: usize, e: Error) -> Error {
    let p = |m: String| format!("fold {id}: {m}");
    match e {
        Error::Dimension(m) => Error::Dimension(p(m)),
        Error::Config(m) => Error::Config(p(m)),
        Error::Usage(m) => Error::Usage(p(m)),
        Error::Numeric(m) => Error::Numeric(p(m)),
        Error::Data(m) => Error::Data(p(m)),
        Error::Format { path, msg } => Error::Format { path, msg: p(msg) },
        other => Error::Data(p(other.to_string())),
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::usage(format!("cannot start {jobs} workers: {e}")))
}

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone)]
pub struct GenArgs {
    /// Output directory; `$DEESCO_DATA_DIR` when absent.
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub subjects: usize,
    pub per_subject: usize,
    pub params: SynthParams,
}

pub fn cmd_gen(args: &GenArgs, log: &mut dyn Write) -> Result<DatasetManifest> {
    let out = match &args.out {
        Some(p) => p.clone(),
        None => std::env::var_os(DATA_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .ok_or_else(|| Error::usage(format!("gen: pass --out or set {DATA_DIR_ENV}")))?,
    };
    if args.per_subject == 0 {
        return Err(Error::usage("gen: --per-subject must be positive"));
    }
    let m = synth_generate(&out, args.seed, args.subjects, args.per_subject, &args.params)?;
    writeln!(
        log,
        "wrote {} samples ({} subjects x {}) to {}\n  target {}, crop {}x{}, seed {}",
        m.sample_count,
        m.subjects.len(),
        args.per_subject,
        out.display(),
        MetricKind::for_target(m.target_kind).unit(),
        m.crop[0],
        m.crop[1],
        args.seed
    )?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// train

/// Self-description stored next to the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub arch: String,
    pub param_count: usize,
    pub dataset_samples: usize,
    pub folds: Vec<Fold>,
}

pub struct FoldRun {
    pub fold: Fold,
    pub model: EnsembleModel,
    pub steps: u64,
    pub last: Option<StepRecord>,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub folds: Vec<FoldRun>,
}

/// Folds of the configured scheme, truncated to `max_folds`.
pub fn selected_folds(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<Fold>> {
    let mut folds = make_folds(&ds.subjects(), cfg.folds)?;
    if let Some(k) = cfg.max_folds {
        folds.truncate(k);
    }
    Ok(folds)
}

fn check_compatible(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    let crop = cfg.branches[0].crop_size;
    if crop != ds.manifest.crop {
        return Err(Error::config(format!(
            "branches expect {}x{} crops but the dataset has {}x{}",
            crop[0], crop[1], ds.manifest.crop[0], ds.manifest.crop[1]
        )));
    }
    Ok(())
}

fn fold_dir(run_dir: &Path, id: usize) -> PathBuf {
    run_dir.join(format!("fold{id:02}"))
}

/// Final weights written by `train` for one fold.
pub fn fold_checkpoint(run_dir: &Path, id: usize) -> PathBuf {
    fold_dir(run_dir, id).join("checkpoints").join("final.ckpt")
}

/// Trains one model per fold. Initialisation uses the master seed; data order
/// and μ use the fold's own substream. Results come back in fold order.
pub fn train_folds(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    folds: &[Fold],
    jobs: usize,
    run_dir: Option<&Path>,
    checkpoints: bool,
) -> Result<Vec<FoldRun>> {
    let run_one = |fold: &Fold| -> Result<FoldRun> {
        let model = EnsembleModel::build(&cfg.branches, cfg.seed)?;
        let settings = TrainSettings {
            nu: cfg.nu,
            schedule: cfg.schedule.clone(),
            clip_norm: cfg.clip_norm,
            seed: fold_seed(cfg.seed, fold.id),
        };
        let outputs = match run_dir {
            Some(dir) => {
                let d = fold_dir(dir, fold.id);
                fs::create_dir_all(&d)?;
                FitOutputs {
                    log: Some(d.join("steps.jsonl")),
                    checkpoints: checkpoints.then(|| d.join("checkpoints")),
                }
            }
            None => FitOutputs::default(),
        };
        let train_ids = ds.indices_of(&fold.train_subjects);
        let (trainer, records) = fit(model, ds, &train_ids, &settings, &outputs)?;
        Ok(FoldRun {
            fold: fold.clone(),
            steps: trainer.step(),
            model: trainer.into_model(),
            last: records.last().cloned(),
        })
    };
    let results: Vec<Result<FoldRun>> = if jobs <= 1 {
        folds.iter().map(run_one).collect()
    } else {
        thread_pool(jobs)?.install(|| folds.par_iter().map(run_one).collect())
    };
    results
        .into_iter()
        .zip(folds)
        .map(|(r, f)| r.map_err(|e| in_fold(f.id, e)))
        .collect()
}

pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (path, ds) = open_dataset(cfg.dataset.as_deref())?;
    check_compatible(cfg, &ds)?;
    let folds = selected_folds(cfg, &ds)?;
    let mut resolved = cfg.clone();
    resolved.dataset = Some(path);
    let run_dir = cfg.output_dir.clone();
    fs::create_dir_all(&run_dir)?;
    resolved.save(&run_dir.join(CONFIG_FILE))?;
    let probe = EnsembleModel::build(&cfg.branches, cfg.seed)?;
    let info = RunInfo {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        arch: cfg.arch_label(),
        param_count: probe.param_count(),
        dataset_samples: ds.samples.len(),
        folds: folds.clone(),
    };
    fs::write(run_dir.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    writeln!(
        log,
        "training {} (nu = {}, {} params) on {} folds -> {}",
        info.arch,
        cfg.nu,
        info.param_count,
        folds.len(),
        run_dir.display()
    )?;
    let runs = train_folds(cfg, &ds, &folds, jobs, Some(&run_dir), true)?;
    for r in &runs {
        let l = r.last.as_ref();
        writeln!(
            log,
            "  fold {:2}  test {:?}  steps {}  l0 {:.5}  l_comb {:.5}",
            r.fold.id,
            r.fold.test_subjects,
            r.steps,
            l.map_or(f64::NAN, |l| l.l0),
            l.map_or(f64::NAN, |l| l.l_comb)
        )?;
    }
    Ok(TrainOutcome { run_dir, folds: runs })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub run_dir: PathBuf,
    /// Overrides the dataset recorded in the run's config.
    pub dataset: Option<PathBuf>,
    pub metric: Option<MetricKind>,
}

pub fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, RunInfo)> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let info_path = run_dir.join(RUN_FILE);
    let text = fs::read_to_string(&info_path)
        .map_err(|e| Error::config(format!("not a run directory ({}: {e})", info_path.display())))?;
    let info: RunInfo = serde_json::from_str(&text)?;
    Ok((cfg, info))
}

/// Final weights of one fold of a finished run.
pub fn load_fold_model(cfg: &ExperimentConfig, run_dir: &Path, fold: usize) -> Result<EnsembleModel> {
    let mut model = EnsembleModel::build(&cfg.branches, cfg.seed)?;
    load_weights(&mut model, &fold_checkpoint(run_dir, fold)).map_err(|e| in_fold(fold, e))?;
    Ok(model)
}

pub fn cmd_eval(args: &EvalArgs, log: &mut dyn Write) -> Result<EvalReport> {
    let (cfg, info) = load_run(&args.run_dir)?;
    let (_, ds) = open_dataset(args.dataset.as_deref().or(cfg.dataset.as_deref()))?;
    let metric = args.metric.unwrap_or_else(|| MetricKind::for_target(ds.target_kind()));
    metric.check_dataset(ds.target_kind())?;
    let models = info
        .folds
        .iter()
        .map(|f| load_fold_model(&cfg, &args.run_dir, f.id))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EnsembleModel> = models.iter().collect();
    let conv = GazeVector::from_flag(cfg.paper_literal_gaze_vector);
    let (report, preds) = evaluate_detailed(&refs, &info.folds, &ds, metric, conv, cfg.eval_batch_size)?;

    fs::write(args.run_dir.join("report.json"), report.to_json()?)?;
    fs::write(args.run_dir.join("report.csv"), report.to_csv())?;
    let mut rows = String::from("fold,sample,subject,pred_0,pred_1,truth_0,truth_1,err\n");
    let ranges = ds.ranges();
    for (fold, p) in info.folds.iter().zip(&preds) {
        for (&i, &q) in p.ids.iter().zip(&p.full) {
            let pred = ranges.denormalize(ds.target_kind(), q).pair();
            let truth = ds.samples[i].target.pair();
            let err = sample_error(metric, conv, &ds, i, q)?;
            let _ = writeln!(
                rows,
                "{},{},{},{},{},{},{},{}",
                fold.id, i, ds.samples[i].subject_id, pred.0, pred.1, truth.0, truth.1, err
            );
        }
    }
    fs::write(args.run_dir.join("predictions.csv"), rows)?;
    writeln!(
        log,
        "{}: {:.3} ± {:.3} {} over {} folds ({} samples)",
        info.arch,
        report.overall_mean,
        report.overall_std,
        report.unit,
        report.per_fold.len(),
        report.total_n
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// ν values with the base architecture.
    Nu(Vec<f64>),
    /// Composition presets such as `Rh+Ou+Fc`, at the base ν.
    Arch(Vec<String>),
    /// The base configuration without and with the combinatory loss.
    Comb,
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub arch: String,
    pub nu: f64,
    pub params: usize,
    /// Parameters of each branch head (everything after the shared trunk layout).
    pub head_params: Vec<usize>,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// For ν = 0 cells: whether every strict-subset λ ended where it started.
    pub subset_lambdas_untouched: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub metric: MetricKind,
    pub unit: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,arch,nu,err_mean,err_std,params,subset_lambdas_untouched");
        for seed in &self.seeds {
            let _ = write!(s, ",seed{seed}");
        }
        s.push('\n');
        for c in &self.cells {
            let untouched = c.subset_lambdas_untouched.map_or(String::new(), |b| b.to_string());
            let _ = write!(
                s,
                "{},{},{},{:.6},{:.6},{},{}",
                c.label, c.arch, c.nu, c.mean, c.std, c.params, untouched
            );
            for e in &c.errors {
                let _ = write!(s, ",{e:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Plain-text table: config, err mean ± std, #params.
    pub fn to_table(&self) -> String {
        let w = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w$}  {:>20}  {:>10}\n", "config", format!("err ({})", self.unit), "#params");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<w$}  {:>20}  {:>10}",
                c.label,
                format!("{:.3} ± {:.3}", c.mean, c.std),
                c.params
            );
        }
        s
    }
}

fn fmt_nu(nu: f64) -> String {
    format!("{nu}")
}

fn sweep_configs(args: &SweepArgs) -> Result<Vec<(String, ExperimentConfig)>> {
    let base = &args.base;
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig) -> Result<()>| -> Result<(String, ExperimentConfig)> {
        let mut c = base.clone();
        f(&mut c)?;
        Ok((label, c))
    };
    match &args.axis {
        SweepAxis::Nu(values) => {
            if values.is_empty() {
                return Err(Error::usage("sweep: empty list of nu values"));
            }
            values
                .iter()
                .map(|&nu| {
                    with(format!("nu={}", fmt_nu(nu)), &|c| {
                        c.nu = nu;
                        Ok(())
                    })
                })
                .collect()
        }
        SweepAxis::Arch(presets) => {
            if presets.is_empty() {
                return Err(Error::usage("sweep: empty list of architectures"));
            }
            let template = base
                .branches
                .first()
                .ok_or_else(|| Error::config("sweep: base config has no branches"))?;
            presets
                .iter()
                .map(|p| {
                    let branches = parse_arch(p, template)?;
                    let label = arch_label(&branches);
                    with(label, &|c| {
                        c.branches = branches.clone();
                        Ok(())
                    })
                })
                .collect()
        }
        SweepAxis::Comb => {
            let nu = if base.nu > 0.0 { base.nu } else { 1.0 };
            Ok(vec![
                with(format!("{} without L_comb", base.arch_label()), &|c| {
                    c.nu = 0.0;
                    Ok(())
                })?,
                with(format!("{} with L_comb", base.arch_label()), &|c| {
                    c.nu = nu;
                    Ok(())
                })?,
            ])
        }
    }
}

/// True when every strict-subset combiner of `trained` still holds its initial λ.
pub fn subset_lambdas_untouched(trained: &EnsembleModel, initial: &EnsembleModel) -> bool {
    trained
        .subset_combiners()
        .iter()
        .zip(initial.subset_combiners())
        .all(|(a, b)| trained.store().tensor(a.lambdas).data() == initial.store().tensor(b.lambdas).data())
}

fn dir_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '=' { c } else { '_' })
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs, log: &mut dyn Write) -> Result<SweepReport> {
    if args.seeds.is_empty() {
        return Err(Error::usage("sweep: empty list of seeds"));
    }
    let configs = sweep_configs(args)?;
    for (_, c) in &configs {
        c.validate()?;
    }
    let (path, ds) = open_dataset(args.base.dataset.as_deref())?;
    let metric = MetricKind::for_target(ds.target_kind());
    let root = args.base.output_dir.clone();
    fs::create_dir_all(&root)?;
    let mut cells = Vec::with_capacity(configs.len());
    for (k, (label, cfg)) in configs.iter().enumerate() {
        check_compatible(cfg, &ds)?;
        let folds = selected_folds(cfg, &ds)?;
        let mut errors = Vec::with_capacity(args.seeds.len());
        let mut untouched = (cfg.nu == 0.0).then_some(true);
        let mut params = 0;
        let mut head_params = Vec::new();
        for &seed in &args.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.dataset = Some(path.clone());
            c.output_dir = root.join(format!("{k:02}_{}", dir_label(label))).join(format!("seed{seed}"));
            fs::create_dir_all(&c.output_dir)?;
            c.save(&c.output_dir.join(CONFIG_FILE))?;
            let runs = train_folds(&c, &ds, &folds, args.jobs, Some(&c.output_dir), false)?;
            let initial = EnsembleModel::build(&c.branches, c.seed)?;
            params = initial.param_count();
            head_params = initial
                .predictors()
                .iter()
                .map(|p| p.head_param_count(initial.store()))
                .collect();
            if let Some(u) = untouched.as_mut() {
                *u &= runs.iter().all(|r| subset_lambdas_untouched(&r.model, &initial));
            }
            let refs: Vec<&EnsembleModel> = runs.iter().map(|r| &r.model).collect();
            let conv = GazeVector::from_flag(c.paper_literal_gaze_vector);
            let (report, _) = evaluate_detailed(&refs, &folds, &ds, metric, conv, c.eval_batch_size)?;
            fs::write(c.output_dir.join("report.json"), report.to_json()?)?;
            errors.push(report.overall_mean);
        }
        let (mean, std) = mean_std(&errors);
        writeln!(log, "  {label}: {mean:.3} ± {std:.3} {}", metric.unit())?;
        cells.push(SweepCell {
            label: label.clone(),
            arch: cfg.arch_label(),
            nu: cfg.nu,
            params,
            head_params,
            errors,
            mean,
            std,
            subset_lambdas_untouched: untouched,
        });
    }
    let report = SweepReport {
        axis: match args.axis {
            SweepAxis::Nu(_) => "nu",
            SweepAxis::Arch(_) => "arch",
            SweepAxis::Comb => "comb",
        }
        .into(),
        metric,
        unit: metric.unit().into(),
        seeds: args.seeds.clone(),
        cells,
    };
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(root.join("sweep.csv"), report.to_csv())?;
    write!(log, "{}", report.to_table())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// introspect

#[derive(Debug, Clone)]
pub struct IntrospectArgs {
    pub config: ExperimentConfig,
    /// Weights to load; the seeded initialisation when absent.
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub samples: Vec<usize>,
    pub out: PathBuf,
    /// Also dump raw f64 map values.
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    /// Normalised grid coordinates.
    pub normalized: (f64, f64),
    /// Radians (yaw, pitch) or normalised screen units (u, v).
    pub value: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sample: usize,
    pub subject_id: u32,
    pub truth: (f64, f64),
    pub truth_normalized: (f64, f64),
    pub full: Estimate,
    pub branches: Vec<Estimate>,
    pub subsets: Vec<Estimate>,
    pub images: Vec<String>,
}

#[derive(Serialize)]
struct RawMap<'a> {
    name: &'a str,
    shape: &'a [usize],
    data: &'a [f64],
}

pub fn cmd_introspect(args: &IntrospectArgs, log: &mut dyn Write) -> Result<Vec<Sidecar>> {
    let cfg = &args.config;
    cfg.validate()?;
    if args.samples.is_empty() {
        return Err(Error::usage("introspect: no sample ids given"));
    }
    let (_, ds) = open_dataset(args.dataset.as_deref().or(cfg.dataset.as_deref()))?;
    check_compatible(cfg, &ds)?;
    for &i in &args.samples {
        if i >= ds.samples.len() {
            return Err(Error::usage(format!(
                "sample id {i} out of range: valid ids are 0..={}",
                ds.samples.len() - 1
            )));
        }
    }
    let mut model = EnsembleModel::build(&cfg.branches, cfg.seed)?;
    if let Some(ckpt) = &args.checkpoint {
        load_weights(&mut model, ckpt)?;
    }
    let ranges = ds.ranges();
    let kind = ds.target_kind();
    let s = model.heatmap_size();
    let mut sidecars = Vec::with_capacity(args.samples.len());
    for &i in &args.samples {
        let dir = args.out.join(format!("sample{i:05}"));
        fs::create_dir_all(&dir)?;
        let batch = ds.batch(&[i])?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Mode::Eval)?;
        let branch_decoded = model.decode_branches(&mut g, &out)?;
        let estimate = |g: &Graph, name: String, coords| {
            let d = g.value(coords).data();
            let p = (d[0], d[1]);
            Estimate {
                name,
                normalized: p,
                value: ranges.denormalize(kind, p).pair(),
            }
        };
        let mut maps: Vec<(String, Tensor)> = Vec::new();
        let map2d = |g: &Graph, v| g.value(v).reshaped(&[s, s]);
        let mut branches = Vec::new();
        for (p, (h, d)) in model.predictors().iter().zip(out.branch_heatmaps.iter().zip(&branch_decoded)) {
            let name = format!("branch{}_{}", p.index(), p.kind().as_str());
            maps.push((name.clone(), map2d(&g, *h)?));
            branches.push(estimate(&g, name, d.coords));
        }
        let mut subsets = Vec::new();
        for (subset, d) in &out.subsets {
            let name = format!("subset_{}", subset_key(subset).replace(',', "-"));
            maps.push((name.clone(), map2d(&g, d.prob)?));
            subsets.push(estimate(&g, name, d.coords));
        }
        maps.push(("full_prob".into(), map2d(&g, out.full.prob)?));
        let full = estimate(&g, "full".into(), out.full.coords);

        let mut images = Vec::with_capacity(maps.len());
        for (name, t) in &maps {
            let file = format!("{name}.pgm");
            write_pgm(&dir.join(&file), t)?;
            images.push(file);
        }
        if args.raw {
            let raw: Vec<RawMap> = maps
                .iter()
                .map(|(name, t)| RawMap {
                    name,
                    shape: t.shape(),
                    data: t.data(),
                })
                .collect();
            fs::write(dir.join("raw.json"), serde_json::to_string(&raw)? + "\n")?;
        }
        let target = &ds.samples[i].target;
        let side = Sidecar {
            sample: i,
            subject_id: ds.samples[i].subject_id,
            truth: target.pair(),
            truth_normalized: ranges.normalize(target)?,
            full,
            branches,
            subsets,
            images,
        };
        fs::write(dir.join("sidecar.json"), serde_json::to_string_pretty(&side)? + "\n")?;
        writeln!(log, "sample {i}: {} images in {}", side.images.len(), dir.display())?;
        sidecars.push(side);
    }
    Ok(sidecars)
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    /// Primitives to check; all of them when empty.
    pub ops: Vec<String>,
    pub seeds: usize,
    pub eps: f64,
    pub tol: f64,
    /// Scales every backward edge by this factor (negative control).
    pub inject_fault: Option<f64>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            ops: Vec::new(),
            seeds: 20,
            eps: 1e-4,
            tol: 1e-3,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub op: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub eps: f64,
    pub tol: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.failed_seeds.is_empty())
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs, log: &mut dyn Write) -> Result<GradcheckSummary> {
    if args.seeds == 0 {
        return Err(Error::usage("gradcheck: --seeds must be positive"));
    }
    let ops: Vec<String> = if args.ops.is_empty() {
        PRIMITIVES.iter().map(|s| s.to_string()).collect()
    } else {
        args.ops.clone()
    };
    let opts = GradCheckOptions {
        eps: args.eps,
        tol: args.tol,
        max_entries: None,
        adjoint_fault: args.inject_fault,
    };
    let mut rows = Vec::with_capacity(ops.len());
    for op in &ops {
        let mut row = GradcheckRow {
            op: op.clone(),
            seeds: args.seeds,
            max_rel_err: 0.0,
            failed_seeds: Vec::new(),
        };
        for seed in 0..args.seeds as u64 {
            let rep = check_primitive(op, seed, opts)?;
            row.max_rel_err = row.max_rel_err.max(rep.max_rel_err());
            if !rep.passed() {
                row.failed_seeds.push(seed);
            }
        }
        writeln!(
            log,
            "{:<18} seeds {:3}  max rel err {:.2e}  {}",
            row.op,
            row.seeds,
            row.max_rel_err,
            if row.failed_seeds.is_empty() { "ok" } else { "FAILED" }
        )?;
        rows.push(row);
    }
    let summary = GradcheckSummary {
        eps: args.eps,
        tol: args.tol,
        rows,
    };
    writeln!(log, "{}", if summary.passed() { "all checks passed" } else { "gradient check failed" })?;
    Ok(summary)
}
