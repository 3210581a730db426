//! The four weak-predictor architectures.
//!
//! Every branch shares the same shape of convolutional trunk: 3×3
//! convolutions, each followed by batch norm and ReLU, that bring the eye
//! crops down to a 16×16 feature map. The 16×16 eye-position mask is then
//! appended as one extra channel and a kind-specific head produces an S×S
//! heatmap:
//!
//! * `Ba` – fully connected layers regress a 2-vector, rendered as a Gaussian bump.
//! * `Rh` – fully connected layers with S² outputs, reshaped to S×S.
//! * `Fc` – stride-2 transposed convolutions from 16×16 up to S×S, then a 1×1 convolution.
//! * `Ou` – fully connected layers feeding two S-wide heads; the heatmap is their outer product.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{substream, truncated_normal};
use crate::tensor::{BatchNormMode, BatchStats, ConvGeometry, Graph, Tensor, Var};

/// Side of the square feature map the trunk must reach and of the position mask.
pub const FEATURE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    Ba,
    Rh,
    Fc,
    Ou,
}

impl BranchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "Ba" | "ba" => Ok(BranchKind::Ba),
            "Rh" | "rh" => Ok(BranchKind::Rh),
            "Fc" | "fc" => Ok(BranchKind::Fc),
            "Ou" | "ou" => Ok(BranchKind::Ou),
            other => Err(Error::config(format!("unknown branch kind {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Ba => "Ba",
            BranchKind::Rh => "Rh",
            BranchKind::Fc => "Fc",
            BranchKind::Ou => "Ou",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eyes {
    Left,
    Right,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn default_eyes() -> Eyes {
    Eyes::Both
}
fn default_crop() -> [usize; 2] {
    [128, 128]
}
fn default_heatmap() -> usize {
    128
}
fn default_conv() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_fc() -> Vec<usize> {
    vec![128]
}
fn default_upsample() -> Vec<usize> {
    vec![32, 16, 8]
}
fn default_sigma() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub kind: BranchKind,
    #[serde(default = "default_eyes")]
    pub eyes: Eyes,
    /// Height and width of a single eye crop in pixels.
    #[serde(default = "default_crop")]
    pub crop_size: [usize; 2],
    #[serde(default = "default_heatmap")]
    pub heatmap_size: usize,
    /// Output channels of each trunk convolution.
    #[serde(default = "default_conv")]
    pub conv_channels: Vec<usize>,
    /// Hidden fully connected widths (Ba, Rh, Ou).
    #[serde(default = "default_fc")]
    pub fc_widths: Vec<usize>,
    /// Channels of each transposed-convolution stage (Fc); the last entry repeats.
    #[serde(default = "default_upsample")]
    pub upsample_channels: Vec<usize>,
    /// Width of the rendered Gaussian in normalised units (Ba).
    #[serde(default = "default_sigma")]
    pub gaussian_sigma: f64,
}

impl BranchConfig {
    pub fn new(kind: BranchKind) -> Self {
        Self {
            kind,
            eyes: default_eyes(),
            crop_size: default_crop(),
            heatmap_size: default_heatmap(),
            conv_channels: default_conv(),
            fc_widths: default_fc(),
            upsample_channels: default_upsample(),
            gaussian_sigma: default_sigma(),
        }
    }

    /// Spatial extent of the trunk input (eyes side by side when `Both`).
    pub fn input_size(&self) -> (usize, usize) {
        let [h, w] = self.crop_size;
        match self.eyes {
            Eyes::Both => (h, 2 * w),
            _ => (h, w),
        }
    }

    /// Stride of every trunk layer, spreading the required halvings of each
    /// axis over the layers, front-loaded.
    pub fn trunk_strides(&self) -> Result<Vec<(usize, usize)>> {
        let layers = self.conv_channels.len();
        if layers == 0 {
            return Err(Error::config("conv_channels must list at least one layer"));
        }
        let (h, w) = self.input_size();
        let halvings = |n: usize, axis: &str| -> Result<usize> {
            if n < FEATURE_SIZE || n % FEATURE_SIZE != 0 || !(n / FEATURE_SIZE).is_power_of_two() {
                return Err(Error::config(format!(
                    "trunk input {axis} {n} cannot be reduced to {FEATURE_SIZE} by stride-2 steps"
                )));
            }
            Ok((n / FEATURE_SIZE).trailing_zeros() as usize)
        };
        let (mut rh, mut rw) = (halvings(h, "height")?, halvings(w, "width")?);
        let mut strides = Vec::with_capacity(layers);
        for l in 0..layers {
            let left = layers - l;
            let eh = rh.div_ceil(left);
            let ew = rw.div_ceil(left);
            rh -= eh;
            rw -= ew;
            strides.push((1 << eh, 1 << ew));
        }
        Ok(strides)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.heatmap_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::config(format!(
                "heatmap_size must be a power of two >= 8, got {s}"
            )));
        }
        if self.conv_channels.contains(&0) || self.fc_widths.contains(&0) || self.upsample_channels.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        self.trunk_strides()?;
        match self.kind {
            BranchKind::Fc => {
                if s < FEATURE_SIZE {
                    return Err(Error::config(format!(
                        "Fc branch cannot upsample {FEATURE_SIZE}x{FEATURE_SIZE} features to {s}x{s}"
                    )));
                }
                if self.upsample_channels.is_empty() && s > FEATURE_SIZE {
                    return Err(Error::config("Fc branch needs upsample_channels"));
                }
            }
            BranchKind::Ba => {
                if !(self.gaussian_sigma > 0.0) {
                    return Err(Error::config("gaussian_sigma must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    geom: ConvGeometry,
    norm: NormLayer,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Head {
    Ba {
        hidden: Vec<DenseLayer>,
        out: DenseLayer,
    },
    Rh {
        hidden: Vec<DenseLayer>,
        out: DenseLayer,
    },
    Ou {
        hidden: Vec<DenseLayer>,
        cols: DenseLayer,
        rows: DenseLayer,
    },
    Fc {
        stages: Vec<ConvLayer>,
        out_weight: ParamId,
        out_bias: ParamId,
    },
}

/// A pending running-statistics update produced by a training-mode forward.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// Running-statistics momentum of batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            for (r, b) in store.tensor_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// One configured branch. Its parameters live in a [`ParamStore`] under
/// the prefix `branch{index}/`.
#[derive(Debug)]
pub struct WeakPredictor {
    config: BranchConfig,
    index: usize,
    trunk: Vec<ConvLayer>,
    head: Head,
    trunk_params: Vec<ParamId>,
    head_params: Vec<ParamId>,
    calls: AtomicUsize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
    prefix: String,
    owned: Vec<ParamId>,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, relu_follows: bool) -> Result<ParamId> {
        let gain = if relu_follows { 2.0 } else { 1.0 };
        let std = (gain / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| truncated_normal(rng, std));
        let id = self.store.trainable(format!("{}/{name}", self.prefix), t)?;
        self.owned.push(id);
        Ok(id)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .store
            .trainable(format!("{}/{name}", self.prefix), Tensor::zeros(shape))?;
        self.owned.push(id);
        Ok(id)
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<NormLayer> {
        let gamma = self
            .store
            .trainable(format!("{}/{name}/gamma", self.prefix), Tensor::ones(&[channels]))?;
        let beta = self
            .store
            .trainable(format!("{}/{name}/beta", self.prefix), Tensor::zeros(&[channels]))?;
        self.owned.extend([gamma, beta]);
        let running_mean = self
            .store
            .buffer(format!("{}/{name}/running_mean", self.prefix), Tensor::zeros(&[channels]))?;
        let running_var = self
            .store
            .buffer(format!("{}/{name}/running_var", self.prefix), Tensor::ones(&[channels]))?;
        Ok(NormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, relu_follows: bool) -> Result<DenseLayer> {
        let weight = self.weight(&format!("{name}/weight"), &[fan_out, fan_in], fan_in, relu_follows)?;
        let bias = self.zeros(&format!("{name}/bias"), &[fan_out])?;
        Ok(DenseLayer { weight, bias })
    }

    fn hidden(&mut self, fan_in: usize, widths: &[usize]) -> Result<(Vec<DenseLayer>, usize)> {
        let mut layers = Vec::new();
        let mut width = fan_in;
        for (j, w) in widths.iter().enumerate() {
            layers.push(self.dense(&format!("fc{j}"), width, *w, true)?);
            width = *w;
        }
        Ok((layers, width))
    }

    fn take(&mut self) -> Vec<ParamId> {
        std::mem::take(&mut self.owned)
    }
}

impl WeakPredictor {
    /// Builds branch `index`, registering its parameters in `store`. The
    /// initial values depend only on `(seed, index)`.
    pub fn build(config: BranchConfig, index: usize, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let strides = config.trunk_strides()?;
        let mut b = Builder {
            store,
            rng: substream(seed, &["init", "branch", &index.to_string()]),
            prefix: format!("branch{index}"),
            owned: Vec::new(),
        };

        let mut trunk = Vec::new();
        let mut channels = 3;
        for (j, (&c, &(sh, sw))) in config.conv_channels.iter().zip(&strides).enumerate() {
            let weight = b.weight(&format!("conv{j}/weight"), &[c, channels, 3, 3], channels * 9, true)?;
            let norm = b.norm(&format!("bn{j}"), c)?;
            trunk.push(ConvLayer {
                weight,
                geom: ConvGeometry {
                    stride: (sh, sw),
                    pad: (1, 1),
                },
                norm,
            });
            channels = c;
        }
        let trunk_params = b.take();

        // Position mask joins as one extra channel.
        let feat_channels = channels + 1;
        let flat = feat_channels * FEATURE_SIZE * FEATURE_SIZE;
        let s = config.heatmap_size;
        let head = match config.kind {
            BranchKind::Ba => {
                let (hidden, width) = b.hidden(flat, &config.fc_widths)?;
                let out = b.dense("head", width, 2, false)?;
                Head::Ba { hidden, out }
            }
            BranchKind::Rh => {
                let (hidden, width) = b.hidden(flat, &config.fc_widths)?;
                let out = b.dense("head", width, s * s, false)?;
                Head::Rh { hidden, out }
            }
            BranchKind::Ou => {
                let (hidden, width) = b.hidden(flat, &config.fc_widths)?;
                let cols = b.dense("head_cols", width, s, false)?;
                let rows = b.dense("head_rows", width, s, false)?;
                Head::Ou { hidden, cols, rows }
            }
            BranchKind::Fc => {
                let n_stages = (s / FEATURE_SIZE).trailing_zeros() as usize;
                let mut stages = Vec::new();
                let mut ch = feat_channels;
                for j in 0..n_stages {
                    let out_ch = config.upsample_channels[j.min(config.upsample_channels.len() - 1)];
                    // Transposed-conv weights are [C_in, C_out, k, k]; each output
                    // pixel sees C_in · (k/stride)² inputs.
                    let weight = b.weight(&format!("up{j}/weight"), &[ch, out_ch, 4, 4], ch * 4, true)?;
                    let norm = b.norm(&format!("upbn{j}"), out_ch)?;
                    stages.push(ConvLayer {
                        weight,
                        geom: ConvGeometry::new(2, 1),
                        norm,
                    });
                    ch = out_ch;
                }
                let out_weight = b.weight("out/weight", &[1, ch, 1, 1], ch, false)?;
                let out_bias = b.zeros("out/bias", &[1])?;
                Head::Fc {
                    stages,
                    out_weight,
                    out_bias,
                }
            }
        };
        let head_params = b.take();
        Ok(Self {
            config,
            index,
            trunk,
            head,
            trunk_params,
            head_params,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn kind(&self) -> BranchKind {
        self.config.kind
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn trainable_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.trunk_params.iter().chain(&self.head_params).copied()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.trainable_params().map(|id| store.tensor(id).len()).sum()
    }

    /// Trainable scalars after the trunk (everything kind-specific).
    pub fn head_param_count(&self, store: &ParamStore) -> usize {
        self.head_params.iter().map(|id| store.tensor(*id).len()).sum()
    }

    fn input(&self, batch: &Batch) -> Result<Tensor> {
        let [h, w] = self.config.crop_size;
        for (name, t) in [("left", &batch.left), ("right", &batch.right)] {
            let s = t.shape();
            if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
                return Err(Error::dim(format!(
                    "branch{}: {name} crops have shape {s:?}, expected [B, 3, {h}, {w}]",
                    self.index
                )));
            }
        }
        Ok(match self.config.eyes {
            Eyes::Left => batch.left.clone(),
            Eyes::Right => batch.right.clone(),
            Eyes::Both => side_by_side(&batch.left, &batch.right),
        })
    }

    /// Raw (pre-softmax) heatmaps `[B, S, S]` for a batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        mode: Mode,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let n = batch.len();
        let mut x = g.constant(self.input(batch)?);
        for layer in &self.trunk {
            let w = g.param(store, layer.weight);
            x = g.conv2d(x, w, None, layer.geom)?;
            x = norm_relu(g, store, x, &layer.norm, mode, updates)?;
        }
        let mask = g.constant(batch.mask.clone());
        let feats = g.concat_channels(&[x, mask])?;
        let s = self.config.heatmap_size;

        match &self.head {
            Head::Ba { hidden, out } => {
                let h = mlp(g, store, feats, hidden)?;
                let coords = affine(g, store, h, out)?;
                g.gaussian_render(coords, s, self.config.gaussian_sigma)
            }
            Head::Rh { hidden, out } => {
                let h = mlp(g, store, feats, hidden)?;
                let flat = affine(g, store, h, out)?;
                g.reshape(flat, &[n, s, s])
            }
            Head::Ou { hidden, cols, rows } => {
                let h = mlp(g, store, feats, hidden)?;
                let a = affine(g, store, h, cols)?;
                let b = affine(g, store, h, rows)?;
                g.outer_product(a, b)
            }
            Head::Fc {
                stages,
                out_weight,
                out_bias,
            } => {
                let mut y = feats;
                for st in stages {
                    let w = g.param(store, st.weight);
                    y = g.conv_transpose2d(y, w, None, st.geom)?;
                    y = norm_relu(g, store, y, &st.norm, mode, updates)?;
                }
                let w = g.param(store, *out_weight);
                let b = g.param(store, *out_bias);
                let y = g.conv2d(y, w, Some(b), ConvGeometry::new(1, 0))?;
                g.reshape(y, &[n, s, s])
            }
        }
    }
}

fn norm_relu(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    norm: &NormLayer,
    mode: Mode,
    updates: &mut Vec<StatUpdate>,
) -> Result<Var> {
    let gamma = g.param(store, norm.gamma);
    let beta = g.param(store, norm.beta);
    let bn_mode = match mode {
        Mode::Train => BatchNormMode::Train,
        Mode::Eval => BatchNormMode::Eval {
            mean: store.tensor(norm.running_mean).data(),
            var: store.tensor(norm.running_var).data(),
        },
    };
    let (y, stats) = g.batch_norm(x, gamma, beta, bn_mode)?;
    if let Some(stats) = stats {
        updates.push(StatUpdate {
            mean: norm.running_mean,
            var: norm.running_var,
            stats,
        });
    }
    Ok(g.relu(y))
}

fn affine(g: &mut Graph, store: &ParamStore, x: Var, layer: &DenseLayer) -> Result<Var> {
    let w = g.param(store, layer.weight);
    let b = g.param(store, layer.bias);
    g.dense(x, w, Some(b))
}

fn mlp(g: &mut Graph, store: &ParamStore, feats: Var, hidden: &[DenseLayer]) -> Result<Var> {
    let n = g.value(feats).shape()[0];
    let flat_len = g.value(feats).len() / n.max(1);
    let mut h = g.reshape(feats, &[n, flat_len])?;
    for layer in hidden {
        h = affine(g, store, h, layer)?;
        h = g.relu(h);
    }
    Ok(h)
}

/// Places two `[B, C, H, W]` images next to each other → `[B, C, H, 2W]`.
pub fn side_by_side(left: &Tensor, right: &Tensor) -> Tensor {
    let s = left.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(2 * left.len());
    for plane in 0..n * c {
        for y in 0..h {
            let off = (plane * h + y) * w;
            out.extend_from_slice(&left.data()[off..off + w]);
            out.extend_from_slice(&right.data()[off..off + w]);
        }
    }
    Tensor::new(vec![n, c, h, 2 * w], out).expect("side_by_side shape")
}

/// Standalone Gaussian rendering of normalised coordinates on an S×S grid
/// (the adapter that lets `Ba` join heatmap mixing).
pub fn coords_to_gaussian_heatmap(coords: (f64, f64), size: usize, sigma: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = g.constant(Tensor::new(vec![1, 2], vec![coords.0, coords.1])?);
    let h = g.gaussian_render(c, size, sigma)?;
    g.value(h).reshaped(&[size, size])
}
