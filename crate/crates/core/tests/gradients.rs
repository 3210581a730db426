mod common;

use std::collections::HashMap;

use deesco::branches::Mode;
use deesco::data::Batch;
use deesco::ensemble::EnsembleModel;
use deesco::gradcheck::{check_primitive, grad_check, grad_check_params, GradCheckOptions, PRIMITIVES};
use deesco::loss::{combinatory_loss, l2_gaze_loss, sample_mu, total_loss};
use deesco::params::ParamStore;
use deesco::rng::substream;
use deesco::tensor::{ConvGeometry, Graph, Tensor, Var};
use deesco::trainer::Trainer;
use deesco::Result;
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = substream(seed, &["test-tensor"]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_primitive_over_twenty_seeds() {
    for op in PRIMITIVES {
        for seed in 0..20 {
            let rep = check_primitive(op, seed, GradCheckOptions::default()).unwrap();
            assert!(rep.passed(), "{op} seed {seed}: {:?}", rep.inputs);
        }
    }
}

#[test]
fn conv2d_example_shape() {
    let x = random(&[2, 3, 8, 8], 1);
    let w = random(&[4, 3, 3, 3], 2);
    let c = random(&[2 * 4 * 8 * 8], 3);
    let rep = grad_check(&[x, w], GradCheckOptions::default(), |g, v| {
        let y = g.conv2d(v[0], v[1], None, ConvGeometry::new(1, 1))?;
        let c = c.reshaped(g.value(y).shape())?;
        g.dot_const(y, &c)
    })
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let cases = [
        ([2, 3, 9, 7], [4, 3, 3, 3], ConvGeometry::new(2, 1)),
        ([1, 2, 8, 8], [5, 2, 4, 4], ConvGeometry::new(2, 1)),
        ([2, 3, 6, 5], [2, 3, 3, 3], ConvGeometry::new(1, 1)),
        (
            [1, 4, 9, 13],
            [3, 4, 3, 5],
            ConvGeometry {
                stride: (3, 2),
                pad: (0, 2),
            },
        ),
    ];
    for (k, (xs, ws, geom)) in cases.into_iter().enumerate() {
        let x = random(&xs, 10 + k as u64);
        let w = random(&ws, 20 + k as u64);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let cx = g.conv2d(xv, wv, None, geom).unwrap();
        let y = random(g.value(cx).shape(), 30 + k as u64);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose2d(yv, wv, None, geom).unwrap();
        assert_eq!(g.value(ty).shape(), x.shape(), "case {k}");
        let lhs = g.value(cx).dot(&y);
        let rhs = x.dot(g.value(ty));
        assert!((lhs - rhs).abs() < 1e-10, "case {k}: {lhs} vs {rhs}");
    }
}

/// Whole-network checks step by 1e-6: batch normalisation amplifies
/// pre-activations enough that a 1e-4 step can carry a unit across its relu
/// kink, which is a property of the function rather than of the gradient.
fn model_opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        ..Default::default()
    }
}

fn model_loss(model: &EnsembleModel, g: &mut Graph, store: &ParamStore, batch: &Batch, nu: f64) -> Result<Var> {
    let out = model.forward_with(g, store, batch, Mode::Train)?;
    let l0 = l2_gaze_loss(g, out.full.coords, &batch.targets)?;
    let subsets: Vec<Vec<usize>> = out.subsets.iter().map(|(s, _)| s.clone()).collect();
    let mu = sample_mu(&mut substream(9, &["mu"]), &subsets, 0);
    let preds: Vec<_> = out.subsets.iter().map(|(s, d)| (s.clone(), d.coords)).collect();
    let terms = combinatory_loss(g, &preds, &batch.targets, &mu)?;
    total_loss(g, l0, terms.l_comb, nu)
}

#[test]
fn full_model_matches_finite_differences() {
    let ds = tiny_dataset(2, 4, 5);
    let batch = ds.batch(&[0, 3, 5, 6]).unwrap();
    for arch in ["Rh+Ou+Fc", "Ba+Rh(l)"] {
        let model = EnsembleModel::build(&tiny_branches(arch), 4).unwrap();
        let ids: Vec<_> = model.store().trainable_ids().collect();
        let opts = GradCheckOptions {
            max_entries: Some(5),
            ..model_opts()
        };
        let rep = grad_check_params(model.store(), &ids, opts, |g, s| model_loss(&model, g, s, &batch, 1.0)).unwrap();
        assert!(rep.passed(), "{arch}: {:?}", rep.failures().collect::<Vec<_>>());
        assert_eq!(rep.inputs.len(), ids.len());
    }
}

#[test]
fn combinatory_loss_gradient_reaches_branch_parameters() {
    let ds = tiny_dataset(2, 4, 6);
    let batch = ds.batch(&[1, 2, 4, 7]).unwrap();
    let model = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 8).unwrap();
    // One trunk weight and one head weight of each branch.
    let ids: Vec<_> = model
        .predictors()
        .iter()
        .flat_map(|p| {
            let all: Vec<_> = p.trainable_params().collect();
            [all[0], *all.last().unwrap()]
        })
        .collect();
    let opts = GradCheckOptions {
        max_entries: Some(8),
        ..model_opts()
    };
    let rep = grad_check_params(model.store(), &ids, opts, |g, s| {
        let out = model.forward_with(g, s, &batch, Mode::Train)?;
        let subsets: Vec<Vec<usize>> = out.subsets.iter().map(|(s, _)| s.clone()).collect();
        let mu = sample_mu(&mut substream(2, &["mu"]), &subsets, 0);
        let preds: Vec<_> = out.subsets.iter().map(|(s, d)| (s.clone(), d.coords)).collect();
        Ok(combinatory_loss(g, &preds, &batch.targets, &mu)?.l_comb)
    })
    .unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
}

/// A random order that still visits every node before its inputs.
fn random_reverse_topological(g: &Graph, loss: Var, seed: u64) -> Vec<Var> {
    let mut nodes = vec![loss];
    let mut seen = HashMap::from([(loss.index(), loss)]);
    let mut k = 0;
    while k < nodes.len() {
        for p in g.parents(nodes[k]) {
            if seen.insert(p.index(), p).is_none() {
                nodes.push(p);
            }
        }
        k += 1;
    }
    assert_eq!(nodes.len(), loss.index() + 1, "tape has nodes the loss does not reach");
    let mut pending: HashMap<usize, usize> = HashMap::new();
    for v in &nodes {
        for p in g.parents(*v) {
            *pending.entry(p.index()).or_default() += 1;
        }
    }
    let mut rng = substream(seed, &["order"]);
    let mut ready = vec![loss];
    let mut order = Vec::with_capacity(nodes.len());
    while !ready.is_empty() {
        ready.shuffle(&mut rng);
        let v = ready.pop().unwrap();
        order.push(v);
        for p in g.parents(v) {
            let c = pending.get_mut(&p.index()).unwrap();
            *c -= 1;
            if *c == 0 {
                ready.push(p);
            }
        }
    }
    order
}

#[test]
fn backward_is_independent_of_visit_order() {
    let ds = tiny_dataset(2, 4, 7);
    let batch = ds.batch(&[0, 1, 6, 7]).unwrap();
    let model = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 3).unwrap();
    let mut g = Graph::new();
    let loss = model_loss(&model, &mut g, model.store(), &batch, 1.0).unwrap();
    g.backward(loss).unwrap();
    let params = g.bound_params().to_vec();
    let reference: Vec<Option<Tensor>> = params.iter().map(|(_, v)| g.grad(*v).cloned()).collect();
    assert!(reference.iter().all(Option::is_some));
    for seed in 0..3 {
        let order = random_reverse_topological(&g, loss, seed);
        assert!(order.windows(2).any(|w| w[0].index() < w[1].index()), "order equals tape order");
        g.backward_in_order(loss, &order).unwrap();
        for ((id, v), r) in params.iter().zip(&reference) {
            assert_eq!(g.grad(*v), r.as_ref(), "param {id:?} seed {seed}");
        }
    }
}

#[test]
fn every_branch_parameter_receives_gradient() {
    let ds = tiny_dataset(2, 4, 8);
    let batch = ds.batch(&[0, 2, 4, 6]).unwrap();
    let model = EnsembleModel::build(&tiny_branches("Ba+Rh+Ou+Fc"), 5).unwrap();
    let mut g = Graph::new();
    let loss = model_loss(&model, &mut g, model.store(), &batch, 1.0).unwrap();
    g.backward(loss).unwrap();
    for p in model.predictors() {
        for id in p.trainable_params() {
            let gr = g.param_grad(id).unwrap_or_else(|| panic!("{} has no gradient", model.store().name(id)));
            assert!(gr.data().iter().any(|x| *x != 0.0), "{} gradient is all zero", model.store().name(id));
        }
    }
}

#[test]
fn subset_lambdas_get_gradient_only_through_the_combinatory_loss() {
    let ds = tiny_dataset(2, 4, 9);
    let batch = ds.batch(&[1, 3, 5, 7]).unwrap();
    let model = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 6).unwrap();
    for nu in [0.0, 0.5] {
        let mut g = Graph::new();
        let loss = model_loss(&model, &mut g, model.store(), &batch, nu).unwrap();
        g.backward(loss).unwrap();
        for c in model.subset_combiners() {
            let gr = g.param_grad(c.lambdas).cloned().unwrap_or_else(|| Tensor::zeros(&[c.subset.len()]));
            if nu == 0.0 {
                assert!(gr.data().iter().all(|x| *x == 0.0), "{}: {:?}", c.key(), gr.data());
            } else {
                assert!(gr.data().iter().all(|x| *x != 0.0), "{}: {:?}", c.key(), gr.data());
            }
        }
        let full = g.param_grad(model.full_combiner().lambdas).unwrap();
        assert!(full.data().iter().all(|x| *x != 0.0));
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let ds = tiny_dataset(2, 6, 10);
    let dir = tempfile::tempdir().unwrap();
    let model = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 1).unwrap();
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    let mut tr = Trainer::new(model, settings(10, 4, 1.0, 2), ids.clone()).unwrap();
    tr.run(&ds, 3, |_, _| Ok(())).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    tr.save_checkpoint(&a).unwrap();
    let fresh = EnsembleModel::build(&tiny_branches("Rh+Ou+Fc"), 99).unwrap();
    let mut tr2 = Trainer::new(fresh, settings(10, 4, 1.0, 2), ids).unwrap();
    tr2.load_checkpoint(&a).unwrap();
    assert_eq!(tr2.step(), 3);
    tr2.save_checkpoint(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
