use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deesco::branches::BranchConfig;
use deesco::config::{parse_arch, ExperimentConfig};
use deesco::data::{load_dataset, FoldScheme, SynthParams, TargetKind};
use deesco::experiment::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_introspect, cmd_sweep, cmd_train, fold_checkpoint, load_run, resolve_dataset_path,
    EvalArgs, GenArgs, GradcheckArgs, IntrospectArgs, SweepArgs, SweepAxis,
};
use deesco::metrics::MetricKind;
use deesco::{Error, Result};

/// Heterogeneous heatmap ensembles for gaze estimation.
#[derive(Parser, Debug)]
#[command(name = "deesco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic eye-crop dataset.
    Gen(GenCmd),
    /// Train one model per fold.
    Train(TrainCmd),
    /// Evaluate a finished training run.
    Eval(EvalCmd),
    /// Train and evaluate a list of configurations over several seeds.
    Sweep(SweepCmd),
    /// Export heatmaps of individual samples as PGM images.
    Introspect(IntrospectCmd),
    /// Finite-difference check of every autodiff primitive.
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug)]
struct GenCmd {
    /// Output directory (defaults to $DEESCO_DATA_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    subjects: usize,
    #[arg(long, default_value_t = 200)]
    per_subject: usize,
    /// `3d` (yaw/pitch) or `2d` (screen point).
    #[arg(long, default_value = "3d")]
    target: String,
    /// Eye crop as HxW, e.g. 32x32.
    #[arg(long)]
    crop: Option<String>,
    /// Standard deviation of the pixel noise.
    #[arg(long)]
    noise: Option<f64>,
}

/// Config fields that can be set from the command line.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    heatmap_size: Option<usize>,
    /// Trunk channels, comma separated.
    #[arg(long, value_delimiter = ',')]
    conv_channels: Option<Vec<usize>>,
    /// Hidden fully connected widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    fc_widths: Option<Vec<usize>>,
    /// Fc upsampling channels, comma separated.
    #[arg(long, value_delimiter = ',')]
    upsample_channels: Option<Vec<usize>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `loso` or `kfold:K`.
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    max_folds: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Angular errors with the published non-unit gaze vector.
    #[arg(long)]
    paper_literal_gaze_vector: bool,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    cfg: Overrides,
    /// Branch composition, e.g. Rh+Ou+Fc or Rh(l)+Rh(r).
    #[arg(long)]
    arch: Option<String>,
    /// Weight of the combinatory loss.
    #[arg(long)]
    nu: Option<f64>,
    /// Train without the combinatory loss (nu = 0).
    #[arg(long, conflicts_with = "nu")]
    no_comb: bool,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvalCmd {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `3d` (degrees) or `2d` (mm); follows the dataset by default.
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Args, Debug)]
struct SweepCmd {
    #[command(flatten)]
    cfg: Overrides,
    /// Comma separated nu values.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with_all = ["arch", "comb"])]
    nu: Option<Vec<f64>>,
    /// Comma separated compositions, e.g. Rh+Rh,Rh+Ou+Fc.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with = "comb")]
    arch: Option<Vec<String>>,
    /// Compare training without and with the combinatory loss.
    #[arg(long)]
    comb: bool,
    /// Comma separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct IntrospectCmd {
    /// Run directory written by `train`; supplies config and weights.
    #[arg(long, conflicts_with = "config")]
    run: Option<PathBuf>,
    #[arg(long, default_value_t = 0, requires = "run")]
    fold: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma separated dataset indices.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw map values.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    /// Primitive to check (repeatable); all when omitted.
    #[arg(long = "op", value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Corrupt the backward pass by this factor.
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "1.5")]
    inject_fault: Option<f64>,
}

fn parse_crop(s: &str) -> Result<[usize; 2]> {
    let bad = || Error::Usage(format!("crop must look like 32x32, got {s:?}"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok([h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?])
}

fn parse_folds(s: &str) -> Result<FoldScheme> {
    if s == "loso" {
        return Ok(FoldScheme::Loso);
    }
    s.strip_prefix("kfold:")
        .and_then(|k| k.parse().ok())
        .map(FoldScheme::Kfold)
        .ok_or_else(|| Error::Usage(format!("folds must be `loso` or `kfold:K`, got {s:?}")))
}

/// Flag > file > default. Without a file the default is Rh+Ou+Fc sized to the dataset crop.
fn resolve_config(o: &Overrides, arch: Option<&str>, nu: Option<f64>) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let crop = match resolve_dataset_path(o.dataset.as_deref()) {
                Ok(p) => load_dataset(&p)?.manifest().crop,
                Err(_) => [32, 32],
            };
            ExperimentConfig::deesco(crop, crop[0])
        }
    };
    if let Some(d) = &o.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(d) = &o.output {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(arch) = arch {
        let template = cfg
            .branches
            .first()
            .cloned()
            .unwrap_or_else(|| BranchConfig::new(deesco::branches::BranchKind::Rh));
        cfg.branches = parse_arch(arch, &template)?;
    }
    for b in &mut cfg.branches {
        if let Some(s) = o.heatmap_size {
            b.heatmap_size = s;
        }
        if let Some(c) = &o.conv_channels {
            b.conv_channels = c.clone();
        }
        if let Some(c) = &o.fc_widths {
            b.fc_widths = c.clone();
        }
        if let Some(c) = &o.upsample_channels {
            b.upsample_channels = c.clone();
        }
    }
    if let Some(nu) = nu {
        cfg.nu = nu;
    }
    if let Some(lr) = o.lr {
        cfg.schedule.base_lr = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.schedule.batch_size = b;
    }
    if let Some(s) = o.steps {
        cfg.schedule.total_steps = Some(s);
    }
    if let Some(e) = o.epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(f) = &o.folds {
        cfg.folds = parse_folds(f)?;
    }
    if let Some(k) = o.max_folds {
        cfg.max_folds = Some(k);
    }
    if let Some(c) = o.clip_norm {
        cfg.clip_norm = Some(c);
    }
    if o.paper_literal_gaze_vector {
        cfg.paper_literal_gaze_vector = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => {
            let target = TargetKind::parse(&a.target)?;
            let mut params = SynthParams::new(target);
            if let Some(c) = &a.crop {
                params.crop = parse_crop(c)?;
            }
            if let Some(n) = a.noise {
                params.noise_std = n;
            }
            let args = GenArgs {
                out: a.out,
                seed: a.seed,
                subjects: a.subjects,
                per_subject: a.per_subject,
                params,
            };
            cmd_gen(&args, out)?;
        }
        Command::Train(a) => {
            let mut cfg = resolve_config(&a.cfg, a.arch.as_deref(), a.nu)?;
            if a.no_comb {
                cfg.nu = 0.0;
            }
            cmd_train(&cfg, a.jobs, out)?;
        }
        Command::Eval(a) => {
            let args = EvalArgs {
                run_dir: a.run,
                dataset: a.dataset,
                metric: a.metric.as_deref().map(MetricKind::parse).transpose()?,
            };
            cmd_eval(&args, out)?;
        }
        Command::Sweep(a) => {
            let axis = match (a.nu, a.arch, a.comb) {
                (Some(v), None, false) => SweepAxis::Nu(v),
                (None, Some(v), false) => SweepAxis::Arch(v),
                (None, None, true) => SweepAxis::Comb,
                _ => return Err(Error::Usage("sweep: give exactly one of --nu, --arch, --comb".into())),
            };
            let args = SweepArgs {
                base: resolve_config(&a.cfg, None, None)?,
                axis,
                seeds: a.seeds,
                jobs: a.jobs,
            };
            cmd_sweep(&args, out)?;
        }
        Command::Introspect(a) => {
            let (config, checkpoint) = match (&a.run, &a.config) {
                (Some(run), _) => {
                    let (cfg, _) = load_run(run)?;
                    let ckpt = fold_checkpoint(run, a.fold);
                    (cfg, Some(ckpt))
                }
                (None, Some(p)) => (ExperimentConfig::load(p)?, a.checkpoint.clone()),
                (None, None) => return Err(Error::Usage("introspect: pass --run or --config".into())),
            };
            let args = IntrospectArgs {
                config,
                checkpoint,
                dataset: a.dataset,
                samples: a.samples,
                out: a.out,
                raw: a.raw,
            };
            cmd_introspect(&args, out)?;
        }
        Command::Gradcheck(a) => {
            let args = GradcheckArgs {
                ops: a.ops,
                seeds: a.seeds,
                eps: a.eps,
                tol: a.tol,
                inject_fault: a.inject_fault,
            };
            return Ok(cmd_gradcheck(&args, out)?.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
