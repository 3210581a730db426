//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ensemble::enumerate_subsets;
use crate::error::{Error, Result};
use crate::loss::{combinatory_loss, l2_gaze_loss, sample_mu, total_loss};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::{BatchNormMode, ConvGeometry, Graph, Tensor, Var};

/// Denominator floor of the relative error, so that gradients which are both
/// essentially zero do not register as failures.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries: Option<usize>,
    /// Corrupt the backward pass by this factor (negative control).
    pub adjoint_fault: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-3,
            max_entries: None,
            adjoint_fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_err < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InputReport> {
        self.inputs.iter().filter(move |r| !(r.max_rel_err < self.tol))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            if m == 0 {
                return Vec::new();
            }
            let step = len as f64 / m as f64;
            (0..m).map(|k| ((k as f64 + 0.5) * step) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .map_err(|_| Error::usage("grad_check: function must return a scalar"))
}

/// Compares the gradient of the scalar function `f` at `inputs` against
/// central differences. `f` receives one leaf per input.
pub fn grad_check<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    if let Some(k) = opts.adjoint_fault {
        g.inject_adjoint_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut reports = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut rep = InputReport {
            name: format!("input{i}"),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for j in probe_indices(inputs[i].len(), opts.max_entries) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            record(&mut rep, j, analytic.data()[j], numeric);
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        inputs: reports,
    })
}

fn record(rep: &mut InputReport, j: usize, analytic: f64, numeric: f64) {
    let rel = relative_error(analytic, numeric);
    rep.checked += 1;
    rep.max_abs_err = rep.max_abs_err.max((analytic - numeric).abs());
    if !(rel <= rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_index = j;
    }
}

/// Gradient check over entries of stored parameters. `f` builds the scalar
/// loss from a (possibly perturbed) parameter store.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(k) = opts.adjoint_fault {
        g.inject_adjoint_fault(k);
    }
    let out = f(&mut g, store)?;
    g.backward(out)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };

    let mut work = store.clone();
    let mut reports = Vec::new();
    for &id in ids {
        let analytic = g
            .param_grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()));
        let mut rep = InputReport {
            name: store.name(id).to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for j in probe_indices(store.tensor(id).len(), opts.max_entries) {
            let orig = work.tensor(id).data()[j];
            work.tensor_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[j] = orig;
            record(&mut rep, j, analytic.data()[j], (plus - minus) / (2.0 * opts.eps));
        }
        reports.push(rep);
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        inputs: reports,
    })
}

/// Names accepted by [`check_primitive`].
pub const PRIMITIVES: &[&str] = &[
    "conv2d",
    "transposed_conv2d",
    "dense",
    "batch_norm",
    "batch_norm_eval",
    "relu",
    "concat",
    "reshape",
    "outer_product",
    "spatial_softmax",
    "soft_argmax",
    "merge",
    "gaussian_render",
    "l2_loss",
    "combinatory_loss",
    "total_loss",
];

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in ±[0.1, 1], kept away from the relu kink.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn project(g: &mut Graph, out: Var, c: &Tensor) -> Result<Var> {
    let c = c.reshaped(g.value(out).shape())?;
    g.dot_const(out, &c)
}

/// Finite-difference check of one primitive on random inputs drawn from `seed`.
pub fn check_primitive(op: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = substream(seed, &["gradcheck", op]);
    let rng = &mut rng;
    let proj = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, &[n], -1.0, 1.0);
    match op {
        "conv2d" => {
            let geom = ConvGeometry {
                stride: (1 + rng.random_range(0..2), 1 + rng.random_range(0..2)),
                pad: (rng.random_range(0..2), 1),
            };
            let x = uniform(rng, &[2, 3, 6, 7], -1.0, 1.0);
            let w = uniform(rng, &[4, 3, 3, 3], -0.5, 0.5);
            let b = uniform(rng, &[4], -0.5, 0.5);
            let c = proj(rng, 2 * 4 * 7 * 7);
            grad_check(&[x, w, b], opts, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
                let n = g.value(y).len();
                project(g, y, &Tensor::new(vec![n], c.data()[..n].to_vec())?)
            })
        }
        "transposed_conv2d" => {
            let geom = ConvGeometry {
                stride: (1 + rng.random_range(0..2), 2),
                pad: (rng.random_range(0..2), 1),
            };
            let x = uniform(rng, &[2, 3, 4, 5], -1.0, 1.0);
            let w = uniform(rng, &[3, 2, 4, 4], -0.5, 0.5);
            let b = uniform(rng, &[2], -0.5, 0.5);
            let c = proj(rng, 2 * 2 * 12 * 12);
            grad_check(&[x, w, b], opts, |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), geom)?;
                let n = g.value(y).len();
                project(g, y, &Tensor::new(vec![n], c.data()[..n].to_vec())?)
            })
        }
        "dense" => {
            let x = uniform(rng, &[3, 5], -1.0, 1.0);
            let w = uniform(rng, &[4, 5], -0.5, 0.5);
            let b = uniform(rng, &[4], -0.5, 0.5);
            let c = proj(rng, 12);
            grad_check(&[x, w, b], opts, |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                project(g, y, &c)
            })
        }
        "batch_norm" | "batch_norm_eval" => {
            let x = uniform(rng, &[4, 3, 2, 3], -2.0, 2.0);
            let gamma = uniform(rng, &[3], 0.5, 1.5);
            let beta = uniform(rng, &[3], -0.5, 0.5);
            let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
            let c = proj(rng, 72);
            let eval = op == "batch_norm_eval";
            grad_check(&[x, gamma, beta], opts, |g, v| {
                let mode = if eval {
                    BatchNormMode::Eval { mean: &mean, var: &var }
                } else {
                    BatchNormMode::Train
                };
                let (y, _) = g.batch_norm(v[0], v[1], v[2], mode)?;
                project(g, y, &c)
            })
        }
        "relu" => {
            let x = off_kink(rng, &[3, 7]);
            let c = proj(rng, 21);
            grad_check(&[x], opts, |g, v| {
                let y = g.relu(v[0]);
                project(g, y, &c)
            })
        }
        "concat" => {
            let a = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = uniform(rng, &[2, 3, 3, 3], -1.0, 1.0);
            let c = proj(rng, 90);
            grad_check(&[a, b], opts, |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                project(g, y, &c)
            })
        }
        "reshape" => {
            let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let c = proj(rng, 24);
            grad_check(&[x], opts, |g, v| {
                let y = g.reshape(v[0], &[6, 4])?;
                let y = g.mul(y, y)?;
                project(g, y, &c)
            })
        }
        "outer_product" => {
            let cols = uniform(rng, &[2, 5], -1.0, 1.0);
            let rows = uniform(rng, &[2, 4], -1.0, 1.0);
            let c = proj(rng, 40);
            grad_check(&[cols, rows], opts, |g, v| {
                let y = g.outer_product(v[0], v[1])?;
                project(g, y, &c)
            })
        }
        "spatial_softmax" => {
            let h = uniform(rng, &[2, 5, 6], -2.0, 2.0);
            let c = proj(rng, 60);
            grad_check(&[h], opts, |g, v| {
                let y = g.spatial_softmax(v[0])?;
                project(g, y, &c)
            })
        }
        "soft_argmax" => {
            let p = uniform(rng, &[2, 5, 6], 0.0, 0.1);
            let c = proj(rng, 4);
            grad_check(&[p], opts, |g, v| {
                let y = g.soft_argmax(v[0])?;
                project(g, y, &c)
            })
        }
        "merge" => {
            let maps: Vec<Tensor> = (0..3).map(|_| uniform(rng, &[2, 4, 4], -1.0, 1.0)).collect();
            let lambdas = uniform(rng, &[3], -1.0, 1.0);
            let c = proj(rng, 32);
            let mut inputs = maps;
            inputs.push(lambdas);
            grad_check(&inputs, opts, |g, v| {
                let y = g.weighted_sum(&v[..3], v[3])?;
                project(g, y, &c)
            })
        }
        "gaussian_render" => {
            let coords = uniform(rng, &[2, 2], -0.9, 0.9);
            let c = proj(rng, 128);
            grad_check(&[coords], opts, |g, v| {
                let y = g.gaussian_render(v[0], 8, 0.3)?;
                project(g, y, &c)
            })
        }
        "l2_loss" => {
            let pred = uniform(rng, &[4, 2], -1.0, 1.0);
            let truth = uniform(rng, &[4, 2], -1.0, 1.0);
            grad_check(&[pred], opts, |g, v| l2_gaze_loss(g, v[0], &truth))
        }
        "combinatory_loss" | "total_loss" => {
            let subsets = enumerate_subsets(3);
            let mu = sample_mu(rng, &subsets, seed);
            let truth = uniform(rng, &[4, 2], -1.0, 1.0);
            let nu = rng.random_range(0.0..10.0);
            let preds: Vec<Tensor> = (0..=subsets.len()).map(|_| uniform(rng, &[4, 2], -1.0, 1.0)).collect();
            let total = op == "total_loss";
            grad_check(&preds, opts, |g, v| {
                let per: Vec<(Vec<usize>, Var)> = subsets.iter().cloned().zip(v[1..].iter().copied()).collect();
                let terms = combinatory_loss(g, &per, &truth, &mu)?;
                if total {
                    let l0 = l2_gaze_loss(g, v[0], &truth)?;
                    total_loss(g, l0, terms.l_comb, nu)
                } else {
                    Ok(terms.l_comb)
                }
            })
        }
        other => Err(Error::usage(format!(
            "unknown primitive {other:?}; expected one of {}",
            PRIMITIVES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let c = Tensor::from_fn(&[5], |i| 0.3 * i as f64 + 0.1);
        let rep = grad_check(&[x], GradCheckOptions::default(), |g, v| g.dot_const(v[0], &c)).unwrap();
        assert!(rep.max_rel_err() < 1e-9, "{rep:?}");
        assert!(rep.passed());
    }

    #[test]
    fn corrupted_adjoint_is_reported() {
        let x = Tensor::from_fn(&[4], |i| i as f64 + 0.5);
        let opts = GradCheckOptions {
            adjoint_fault: Some(1.5),
            ..Default::default()
        };
        let rep = grad_check(&[x], opts, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.failures().count(), 1);
    }

    #[test]
    fn every_primitive_passes_and_faults_are_caught() {
        for op in PRIMITIVES {
            let rep = check_primitive(op, 3, GradCheckOptions::default()).unwrap();
            assert!(rep.passed(), "{op}: {rep:?}");
            let bad = GradCheckOptions {
                adjoint_fault: Some(1.1),
                ..Default::default()
            };
            assert!(!check_primitive(op, 3, bad).unwrap().passed(), "{op}");
        }
        assert!(matches!(check_primitive("nope", 0, GradCheckOptions::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn probe_indices_are_spread_and_bounded() {
        assert_eq!(probe_indices(3, Some(10)), vec![0, 1, 2]);
        let p = probe_indices(100, Some(4));
        assert_eq!(p.len(), 4);
        assert!(p.windows(2).all(|w| w[0] < w[1]) && *p.last().unwrap() < 100);
    }
}
