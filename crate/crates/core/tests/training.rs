mod common;

use deesco::data::Dataset;
use deesco::ensemble::EnsembleModel;
use deesco::error::Error;
use deesco::experiment::subset_lambdas_untouched;
use deesco::params::ParamStore;
use deesco::trainer::{fit, read_step_log, FitOutputs, StepRecord, TrainSettings, Trainer};

use common::*;

fn all_ids(ds: &Dataset) -> Vec<usize> {
    (0..ds.samples.len()).collect()
}

fn params_of(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec())).collect()
}

fn train(ds: &Dataset, arch: &str, s: TrainSettings, steps: u64) -> (Trainer, Vec<StepRecord>) {
    let model = EnsembleModel::build(&tiny_branches(arch), 7).unwrap();
    let mut tr = Trainer::new(model, s, all_ids(ds)).unwrap();
    let mut recs = Vec::new();
    tr.run(ds, steps, |_, r| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    (tr, recs)
}

#[test]
fn identical_runs_follow_identical_trajectories() {
    let ds = tiny_dataset(3, 12, 1);
    let (a, ra) = train(&ds, "Rh+Ou+Fc", settings(100, 4, 1.0, 5), 100);
    let (b, rb) = train(&ds, "Rh+Ou+Fc", settings(100, 4, 1.0, 5), 100);
    assert_eq!(ra.len(), 100);
    assert_eq!(ra, rb);
    assert_eq!(params_of(a.model.store()), params_of(b.model.store()));
    assert_eq!(a.adam, b.adam);
}

#[test]
fn two_hundred_steps_halve_the_full_ensemble_loss() {
    let ds = tiny_dataset(4, 32, 2);
    let mut s = settings(200, 16, 1.0, 3);
    s.schedule.base_lr = 1e-3;
    let (_, recs) = train(&ds, "Rh+Ou+Fc", s, 200);
    // Ten-step windows keep batch-to-batch noise out of the comparison.
    let window = |r: &[StepRecord]| r.iter().map(|x| x.l0).sum::<f64>() / r.len() as f64;
    let (first, last) = (window(&recs[..10]), window(&recs[190..]));
    assert!(last < 0.5 * first, "L0 {first} -> {last}");
}

#[test]
fn split_run_resumes_exactly() {
    let ds = tiny_dataset(3, 12, 3);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("half.ckpt");
    let (whole, whole_recs) = train(&ds, "Rh+Ou+Fc", settings(100, 4, 1.0, 9), 100);

    let (first, mut recs) = train(&ds, "Rh+Ou+Fc", settings(100, 4, 1.0, 9), 50);
    first.save_checkpoint(&ckpt).unwrap();
    drop(first);
    let fresh = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 1234).unwrap();
    let mut second = Trainer::new(fresh, settings(100, 4, 1.0, 9), all_ids(&ds)).unwrap();
    second.load_checkpoint(&ckpt).unwrap();
    second
        .run(&ds, 100, |_, r| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();

    assert_eq!(recs.last().unwrap().l_tot, whole_recs.last().unwrap().l_tot);
    assert_eq!(recs, whole_recs);
    assert_eq!(params_of(second.model.store()), params_of(whole.model.store()));
}

#[test]
fn without_the_combinatory_loss_subset_weights_stay_put() {
    let ds = tiny_dataset(3, 12, 4);
    let initial = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 7).unwrap();
    let (tr, _) = train(&ds, "Rh+Ou+Fc", settings(30, 4, 0.0, 1), 30);
    assert!(subset_lambdas_untouched(&tr.model, &initial));
    let full = tr.model.full_combiner().lambdas;
    assert_ne!(tr.model.store().tensor(full).data(), initial.store().tensor(full).data());

    let (tr, _) = train(&ds, "Rh+Ou+Fc", settings(30, 4, 1.0, 1), 30);
    assert!(!subset_lambdas_untouched(&tr.model, &initial));
}

#[test]
fn loss_weight_does_not_perturb_data_order() {
    let ds = tiny_dataset(3, 10, 5);
    let (_, a) = train(&ds, "Rh+Ou", settings(20, 4, 0.0, 3), 20);
    let (_, b) = train(&ds, "Rh+Ou", settings(20, 4, 1.0, 3), 20);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.batch, y.batch);
        assert_eq!(x.mu, y.mu);
    }
}

#[test]
fn mu_is_fresh_for_every_batch() {
    let ds = tiny_dataset(2, 10, 6);
    let (_, recs) = train(&ds, "Rh+Ou+Fc", settings(10, 4, 1.0, 3), 10);
    for r in &recs {
        assert_eq!(r.mu.len(), 6);
        assert!((r.mu.values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.per_subset.len(), 6);
        assert_eq!(r.l_tot, r.l0 + r.nu * r.l_comb);
    }
    assert!(recs.windows(2).all(|w| w[0].mu != w[1].mu));
}

#[test]
fn epoch_schedule_covers_every_sample() {
    let ds = tiny_dataset(3, 7, 7);
    let n = ds.samples.len();
    let mut s = settings(1, 4, 1.0, 2);
    s.schedule.total_steps = None;
    s.schedule.epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    let model = EnsembleModel::build(&tiny_branches("Rh+Ou"), 0).unwrap();
    let outputs = FitOutputs {
        log: Some(dir.path().join("steps.jsonl")),
        checkpoints: Some(dir.path().join("ckpt")),
    };
    let (tr, recs) = fit(model, &ds, &all_ids(&ds), &s, &outputs).unwrap();
    let steps = recs.len();
    assert_eq!(tr.step() as usize, steps);
    assert!(steps * 4 >= n * 3 - 4, "{steps} steps of 4 for {n}×3 samples");
    let mut seen = vec![0; n];
    for r in &recs {
        for &i in &r.batch {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c >= 3), "{seen:?}");
    assert_eq!(read_step_log(&dir.path().join("steps.jsonl")).unwrap(), recs);
    let mut ckpts: Vec<String> = std::fs::read_dir(dir.path().join("ckpt"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, ["epoch001.ckpt", "epoch002.ckpt", "epoch003.ckpt", "final.ckpt"]);
}

#[test]
fn learning_rate_anneals_to_zero() {
    let ds = tiny_dataset(2, 8, 8);
    let (_, recs) = train(&ds, "Rh+Ou", settings(10, 4, 1.0, 0), 10);
    assert_eq!(recs[0].lr, 2e-4);
    assert!(recs.windows(2).all(|w| w[1].lr < w[0].lr));
    assert!((recs[9].lr - 2e-5).abs() < 1e-18);
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let ds = tiny_dataset(2, 8, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let (tr, _) = train(&ds, "Rh+Ou+Fc", settings(2, 4, 1.0, 0), 2);
    tr.save_checkpoint(&path).unwrap();
    for arch in ["Rh+Rh+Fc", "Rh+Ou", "Rh+Ou+Fc+Ba"] {
        let other = EnsembleModel::build(&tiny_branches(arch), 0).unwrap();
        let mut t2 = Trainer::new(other, settings(2, 4, 1.0, 0), all_ids(&ds)).unwrap();
        match t2.load_checkpoint(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("architecture mismatch"), "{arch}: {msg}"),
            other => panic!("{arch}: {other:?}"),
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_the_step_index() {
    let ds = tiny_dataset(2, 8, 10);
    let (mut tr, _) = train(&ds, "Rh+Ou", settings(10, 4, 1.0, 0), 3);
    let id = tr.model.full_combiner().lambdas;
    tr.model.store_mut().tensor_mut(id).data_mut()[0] = f64::NAN;
    match tr.train_step(&ds) {
        Err(Error::Numeric(msg)) => assert!(msg.starts_with("step 3"), "{msg}"),
        other => panic!("{other:?}"),
    }
}
