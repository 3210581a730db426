//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line; exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use deesco::branches::{coords_to_gaussian_heatmap, BranchConfig, BranchKind};
use deesco::config::parse_arch;
use deesco::data::{load_dataset, make_folds, synth_generate, Dataset, FoldScheme, SynthParams, TargetKind};
use deesco::ensemble::{enumerate_subsets, soft_argmax, spatial_softmax, subset_key, EnsembleModel};
use deesco::experiment::{cmd_introspect, cmd_sweep, IntrospectArgs, SweepArgs, SweepAxis, SweepReport};
use deesco::gradcheck::{check_primitive, GradCheckOptions, PRIMITIVES};
use deesco::loss::{combinatory_loss, l2_gaze_loss, sample_mu, total_loss, LossBreakdown};
use deesco::metrics::{mean_std, predict, sample_error, GazeVector, MetricKind};
use deesco::optim::TrainSchedule;
use deesco::params::ParamStore;
use deesco::rng::substream;
use deesco::tensor::{Graph, Tensor};
use deesco::trainer::{TrainSettings, Trainer};
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn grid(i: usize, n: usize) -> f64 {
    2.0 * i as f64 / (n as f64 - 1.0) - 1.0
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for op in PRIMITIVES {
        for seed in 0..20 {
            let rep = check_primitive(op, seed, GradCheckOptions::default()).map_err(|e| e.to_string())?;
            worst = worst.max(rep.max_rel_err());
            if !rep.passed() {
                failures.push(format!("{op}/{seed}"));
            }
        }
    }
    let t = start.elapsed();
    check(
        failures.is_empty() && t < Duration::from_secs(120),
        format!("{} primitives x 20 seeds, max rel err {worst:.2e}, {:.1}s", PRIMITIVES.len(), t.as_secs_f64()),
        format!("failures {failures:?}, max rel err {worst:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

// 2 -------------------------------------------------------------------------

fn fidelity_oracles() -> Outcome {
    let mut rng = substream(2, &["acceptance", "oracles"]);
    let (mut sm, mut mom, mut comb) = (0.0f64, 0.0f64, 0.0f64);
    let mut exact = true;
    for trial in 0..50 {
        let (b, h, w) = (1 + trial % 4, 4 + trial % 13, 4 + (trial * 7) % 17);
        let t = Tensor::from_fn(&[b, h, w], |_| rng.random_range(-4.0..4.0));
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let p = g.spatial_softmax(v).unwrap();
        let c = g.soft_argmax(p).unwrap();
        for n in 0..b {
            let base = n * h * w;
            let mut z = 0.0;
            for i in 0..h * w {
                z += t.data()[base + i].exp();
            }
            let (mut x, mut y) = (0.0, 0.0);
            for r in 0..h {
                for col in 0..w {
                    let q = t.data()[base + r * w + col].exp() / z;
                    sm = sm.max((g.value(p).data()[base + r * w + col] - q).abs());
                    x += q * grid(col, w);
                    y += q * grid(r, h);
                }
            }
            mom = mom.max((g.value(c).data()[2 * n] - x).abs()).max((g.value(c).data()[2 * n + 1] - y).abs());
        }

        let n_branches = 2 + trial % 4;
        let subsets = enumerate_subsets(n_branches);
        let truth = Tensor::from_fn(&[b, 2], |_| rng.random_range(-1.0..1.0));
        let preds: Vec<Tensor> = (0..=subsets.len())
            .map(|_| Tensor::from_fn(&[b, 2], |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mu = sample_mu(&mut rng, &subsets, trial as u64);
        let nu = rng.random_range(0.0..10.0);
        let mut g = Graph::new();
        let vars: Vec<_> = preds.iter().map(|p| g.leaf(p.clone())).collect();
        let l0 = l2_gaze_loss(&mut g, vars[0], &truth).unwrap();
        let per: Vec<_> = subsets.iter().cloned().zip(vars[1..].iter().copied()).collect();
        let terms = combinatory_loss(&mut g, &per, &truth, &mu).unwrap();
        let l_tot = total_loss(&mut g, l0, terms.l_comb, nu).unwrap();
        let br = LossBreakdown::read(&g, l0, &terms, l_tot, nu).unwrap();
        let mut want = 0.0;
        for (k, s) in subsets.iter().enumerate() {
            let mut li = 0.0;
            for n in 0..b {
                let dx = preds[k + 1].data()[2 * n] - truth.data()[2 * n];
                let dy = preds[k + 1].data()[2 * n + 1] - truth.data()[2 * n + 1];
                li += dx * dx + dy * dy;
            }
            want += mu.get(s).unwrap() * li / b as f64;
        }
        comb = comb.max((br.l_comb - want).abs());
        exact &= br.l_tot == br.l0 + nu * br.l_comb;
        exact &= br.per_subset.len() == subsets.len() && br.per_subset.contains_key(&subset_key(&subsets[0]));
    }
    let ok = sm < 1e-12 && mom < 1e-12 && comb < 1e-12 && exact;
    let msg = format!("softmax {sm:.1e}, soft-argmax {mom:.1e}, L_comb {comb:.1e}, L_tot exact: {exact}");
    check(ok, msg.clone(), msg)
}

// 3 -------------------------------------------------------------------------

fn subset_machinery() -> Outcome {
    let mut counts = Vec::new();
    for n in 1..=5 {
        let subs = enumerate_subsets(n);
        let distinct: BTreeSet<Vec<usize>> = subs
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s
            })
            .collect();
        let legal = subs
            .iter()
            .all(|s| !s.is_empty() && s.len() < n && s.iter().all(|&i| i < n));
        if subs.len() != (1 << n) - 2 || distinct.len() != subs.len() || !legal {
            return Err(format!("N={n}: {} subsets, {} distinct, legal {legal}", subs.len(), distinct.len()));
        }
        counts.push(subs.len());
    }
    let dir = tempfile::tempdir().unwrap();
    let data = write_tiny_dataset(dir.path(), 2, 3, 1, TargetKind::Gaze3d);
    let cfg = tiny_config("Rh+Ou+Fc", &data, &dir.path().join("run"));
    let args = IntrospectArgs {
        config: cfg,
        checkpoint: None,
        dataset: None,
        samples: vec![2],
        out: dir.path().join("maps"),
        raw: false,
    };
    cmd_introspect(&args, &mut Vec::new()).map_err(|e| e.to_string())?;
    let maps = fs::read_dir(dir.path().join("maps/sample00002"))
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().into_string().unwrap();
            name.starts_with("subset_") && name.ends_with(".pgm")
        })
        .count();
    check(
        maps == 6,
        format!("subset counts {counts:?} for N=1..5, introspect wrote {maps} subset maps"),
        format!("introspect wrote {maps} subset maps, expected 6"),
    )
}

// 4 -------------------------------------------------------------------------

fn decoding_geometry() -> Outcome {
    let s = 32;
    let decode = |h: &Tensor| soft_argmax(&spatial_softmax(h).unwrap()).unwrap();
    let mut corner_err: f64 = 0.0;
    for (r, c) in [(0, 0), (0, s - 1), (s - 1, 0), (s - 1, s - 1)] {
        let mut h = Tensor::full(&[s, s], -1e4);
        h.data_mut()[r * s + c] = 0.0;
        let (x, y) = decode(&h);
        corner_err = corner_err.max((x - grid(c, s)).abs()).max((y - grid(r, s)).abs());
    }
    let (ux, uy) = decode(&Tensor::zeros(&[s, s]));
    let uniform_err = ux.abs().max(uy.abs());

    // Rendered at the default full heatmap size.
    let (size, sigma, scale) = (128, 0.05, 50.0);
    let mut round_trip: f64 = 0.0;
    for i in 0..9 {
        for j in 0..9 {
            let (u, v) = (-0.8 + 0.2 * j as f64, -0.8 + 0.2 * i as f64);
            let h = coords_to_gaussian_heatmap((u, v), size, sigma).unwrap();
            let h = Tensor::from_fn(&[size, size], |k| scale * h.data()[k]);
            let (x, y) = decode(&h);
            round_trip = round_trip.max((x - u).abs()).max((y - v).abs());
        }
    }
    let msg = format!("corners {corner_err:.1e}, uniform {uniform_err:.1e}, 9x9 round trip {round_trip:.2e}");
    check(corner_err < 1e-12 && uniform_err < 1e-12 && round_trip < 0.01, msg.clone(), msg)
}

// 5 -------------------------------------------------------------------------

fn smoke_branches() -> Vec<BranchConfig> {
    let template = BranchConfig {
        crop_size: [32, 32],
        heatmap_size: 32,
        conv_channels: vec![8, 16],
        fc_widths: vec![64],
        upsample_channels: vec![8],
        ..BranchConfig::new(BranchKind::Rh)
    };
    parse_arch("Rh+Ou+Fc", &template).unwrap()
}

fn held_out_error(model: &EnsembleModel, ds: &Dataset, test: &[usize]) -> f64 {
    let p = predict(model, ds, test, 64).unwrap();
    let errs: Vec<f64> = test
        .iter()
        .zip(&p.full)
        .map(|(&i, q)| sample_error(MetricKind::Angular3d, GazeVector::Spherical, ds, i, *q).unwrap())
        .collect();
    mean_std(&errs).0
}

fn snapshot(store: &ParamStore) -> Vec<Vec<u64>> {
    store.iter().map(|(_, p)| p.tensor.data().iter().map(|x| x.to_bits()).collect()).collect()
}

fn smoke_run(ds: &Dataset, train: &[usize]) -> Trainer {
    let model = EnsembleModel::build(&smoke_branches(), 1).unwrap();
    let settings = TrainSettings {
        nu: 1.0,
        schedule: TrainSchedule {
            total_steps: Some(2000),
            batch_size: 32,
            ..TrainSchedule::default()
        },
        clip_norm: None,
        seed: 1,
    };
    let mut tr = Trainer::new(model, settings, train.to_vec()).unwrap();
    tr.run(ds, 2000, |_, _| Ok(())).unwrap();
    tr
}

fn smoke_convergence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data");
    synth_generate(&path, 1, 6, 200, &SynthParams::new(TargetKind::Gaze3d)).map_err(|e| e.to_string())?;
    let ds = load_dataset(&path).unwrap().read_all().unwrap();
    let subjects = ds.subjects();
    let (held, rest) = subjects.split_last().unwrap();
    let test = ds.indices_of(&[*held]);
    let train = ds.indices_of(rest);

    let before = held_out_error(&EnsembleModel::build(&smoke_branches(), 1).unwrap(), &ds, &test);
    let start = Instant::now();
    let tr = smoke_run(&ds, &train);
    let wall = start.elapsed();
    let after = held_out_error(&tr.model, &ds, &test);
    let first = snapshot(tr.model.store());
    drop(tr);
    let again = smoke_run(&ds, &train);
    let reproducible = snapshot(again.model.store()) == first;

    let ratio = before / after;
    let msg = format!(
        "held-out error {before:.2} -> {after:.2} deg ({ratio:.1}x), 2000 steps in {:.0}s, rerun bitwise identical: {reproducible}",
        wall.as_secs_f64()
    );
    check(ratio >= 4.0 && wall < Duration::from_secs(600) && reproducible, msg.clone(), msg)
}

// 6 -------------------------------------------------------------------------

fn ablation_machinery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = write_tiny_dataset(dir.path(), 3, 40, 4, TargetKind::Gaze3d);
    let mut base = tiny_config("Rh+Ou+Fc", &data, &dir.path().join("nu"));
    base.schedule.total_steps = Some(150);
    base.schedule.batch_size = 16;
    base.schedule.base_lr = 1e-3;
    base.max_folds = Some(1);
    let seeds: Vec<u64> = (0..5).collect();
    let run = |base, axis| {
        cmd_sweep(
            &SweepArgs {
                base,
                axis,
                seeds: seeds.clone(),
                jobs: 1,
            },
            &mut Vec::new(),
        )
        .map_err(|e| e.to_string())
    };
    let nus = vec![0.0, 0.1, 1.0, 5.0, 10.0];
    let table2 = run(base.clone(), SweepAxis::Nu(nus.clone()))?;
    base.output_dir = dir.path().join("comb");
    let table3 = run(base, SweepAxis::Comb)?;

    let complete = |r: &SweepReport| r.cells.iter().all(|c| c.errors.len() == 5 && c.mean.is_finite() && c.std.is_finite());
    let shape = table2.cells.iter().map(|c| c.nu).collect::<Vec<_>>() == nus && table3.cells.len() == 2;
    let untouched = table2.cells[0].subset_lambdas_untouched == Some(true)
        && table3.cells[0].subset_lambdas_untouched == Some(true)
        && table2.cells[1..].iter().all(|c| c.subset_lambdas_untouched.is_none());
    let cells: Vec<String> = table2
        .cells
        .iter()
        .map(|c| format!("nu={} {:.2}±{:.2}", c.nu, c.mean, c.std))
        .chain(table3.cells.iter().map(|c| format!("{} {:.2}±{:.2}", c.label, c.mean, c.std)))
        .collect();
    let msg = format!(
        "{}; nu=0 leaves subset weights untouched: {untouched}; nu=1 {} nu=0 (reported only)",
        cells.join(", "),
        if table2.cells[2].mean < table2.cells[0].mean { "beats" } else { "does not beat" }
    );
    check(shape && complete(&table2) && complete(&table3) && untouched, msg.clone(), msg)
}

// 7 -------------------------------------------------------------------------

fn parameter_ordering() -> Outcome {
    let head = |kind| {
        let cfg = BranchConfig {
            crop_size: [64, 64],
            heatmap_size: 128,
            ..BranchConfig::new(kind)
        };
        let m = EnsembleModel::build(&[cfg], 0).unwrap();
        let p = &m.predictors()[0];
        (p.head_param_count(m.store()), p.param_count(m.store()) - p.head_param_count(m.store()))
    };
    let (rh, rt) = head(BranchKind::Rh);
    let (ou, ot) = head(BranchKind::Ou);
    let (fc, ft) = head(BranchKind::Fc);
    let heads_ok = rt == ot && rt == ft && ou < rh && fc < rh;

    let dir = tempfile::tempdir().unwrap();
    let data = write_tiny_dataset(dir.path(), 2, 4, 5, TargetKind::Gaze3d);
    let mut base = tiny_config("Rh+Ou+Fc", &data, &dir.path().join("arch"));
    base.schedule.total_steps = Some(1);
    base.max_folds = Some(1);
    let archs = ["Ou+Ou+Fc", "Rh+Ou+Fc", "Rh+Rh+Fc", "Rh+Rh+Rh"];
    let report = cmd_sweep(
        &SweepArgs {
            base,
            axis: SweepAxis::Arch(archs.iter().map(|s| s.to_string()).collect()),
            seeds: vec![0],
            jobs: 1,
        },
        &mut Vec::new(),
    )
    .map_err(|e| e.to_string())?;
    let params: Vec<usize> = report.cells.iter().map(|c| c.params).collect();
    let monotone = params.windows(2).all(|w| w[0] < w[1]);
    let msg = format!("S=128 heads Rh {rh}, Ou {ou}, Fc {fc} (trunk {rt}); sweep #params {params:?} for {archs:?}");
    check(heads_ok && monotone, msg.clone(), msg)
}

// 8 -------------------------------------------------------------------------

fn protocol_correctness() -> Outcome {
    let disjoint = |subjects: &[u32], scheme, expect: usize| -> Result<(), String> {
        let folds = make_folds(subjects, scheme).map_err(|e| e.to_string())?;
        let mut tested = Vec::new();
        for f in &folds {
            let tr: BTreeSet<_> = f.train_subjects.iter().collect();
            if f.test_subjects.iter().any(|s| tr.contains(s)) || f.test_subjects.len() + tr.len() != subjects.len() {
                return Err(format!("fold {} overlaps or drops subjects", f.id));
            }
            tested.extend(f.test_subjects.iter().copied());
        }
        tested.sort_unstable();
        if folds.len() != expect || tested != subjects {
            return Err(format!("{} folds, tested {:?}", folds.len(), tested));
        }
        Ok(())
    };
    let dir = tempfile::tempdir().unwrap();
    let fifteen = load_dataset(&write_tiny_dataset(dir.path(), 15, 2, 6, TargetKind::Gaze3d))
        .unwrap()
        .read_all()
        .unwrap()
        .subjects();
    disjoint(&fifteen, FoldScheme::Loso, 15)?;
    let fifty: Vec<u32> = (0..50).collect();
    disjoint(&fifty, FoldScheme::Kfold(3), 3)?;

    let ds = tiny_dataset(3, 12, 7);
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    let fresh = |seed| Trainer::new(EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), seed).unwrap(), settings(100, 4, 1.0, 3), ids.clone()).unwrap();
    let mut whole = fresh(2);
    let mut last_whole = None;
    whole
        .run(&ds, 100, |_, r| {
            last_whole = Some(r.l_tot);
            Ok(())
        })
        .unwrap();
    let ckpt = dir.path().join("half.ckpt");
    let mut first = fresh(2);
    first.run(&ds, 50, |_, _| Ok(())).unwrap();
    first.save_checkpoint(&ckpt).unwrap();
    let mut second = fresh(99);
    second.load_checkpoint(&ckpt).unwrap();
    let mut last_split = None;
    second
        .run(&ds, 100, |_, r| {
            last_split = Some(r.l_tot);
            Ok(())
        })
        .unwrap();
    let same = snapshot(whole.model.store()) == snapshot(second.model.store()) && last_whole == last_split;
    check(
        same,
        "LOSO(15) gives 15 disjoint folds, kfold(3) over 50 gives 3; 50+50 resume matches 100 steps bitwise".into(),
        format!("resume mismatch: final loss {last_whole:?} vs {last_split:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("fidelity oracles", fidelity_oracles),
        ("subset machinery", subset_machinery),
        ("decoding geometry", decoding_geometry),
        ("smoke convergence", smoke_convergence),
        ("ablation machinery", ablation_machinery),
        ("parameter-count ordering", parameter_ordering),
        ("protocol correctness", protocol_correctness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(msg) => println!("PASS {} {name}: {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name}: {msg}", k + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
