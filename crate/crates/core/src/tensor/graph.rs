use super::kernels::{self, ConvDims, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Variance floor used by batch normalisation.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm node normalises with.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Per-channel batch statistics; the caller receives them to update running stats.
    Train,
    /// Frozen running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    DotConst(Var, Tensor),
    Relu(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    OuterProduct {
        a: Var,
        b: Var,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    SpatialSoftmax(Var),
    SoftArgmax(Var),
    GaussianRender {
        coords: Var,
        sigma: f64,
    },
    SquaredErrorMean {
        pred: Var,
        target: Tensor,
    },
    LinearCombination(Vec<(Var, f64)>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::DotConst(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::SpatialSoftmax(a)
            | Op::SoftArgmax(a) => vec![*a],
            Op::ConcatChannels(v) => v.clone(),
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::ConvTranspose2d {
                input, weight, bias, ..
            }
            | Op::Dense {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::OuterProduct { a, b } => vec![*a, *b],
            Op::WeightedSum { inputs, weights } => {
                let mut v = inputs.clone();
                v.push(*weights);
                v
            }
            Op::GaussianRender { coords, .. } => vec![*coords],
            Op::SquaredErrorMean { pred, .. } => vec![*pred],
            Op::LinearCombination(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the tape order is always a valid topological order of the graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
    adjoint_fault: Option<f64>,
}

/// Grid coordinate of pixel `i` on an axis of `n` pixels: centres of the
/// first and last pixel map to −1 and +1.
#[inline]
pub(crate) fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every propagated adjoint by `factor`. Used only to confirm that
    /// gradient checking detects a broken backward pass.
    pub fn inject_adjoint_fault(&mut self, factor: f64) {
        self.adjoint_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inputs of the operation that produced `v`.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is not differentiated (data, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Binds a trainable parameter from `store` as a leaf. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some((_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let v = self.leaf(store.tensor(id).clone());
        self.params.push((id, v));
        v
    }

    /// Parameters bound on this graph, in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grad(*v))
    }

    // ----------------------------------------------------------------------
    // elementwise and reductions

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// ⟨a, c⟩ for a constant tensor `c`; turns any tensor into a scalar for gradient checks.
    pub fn dot_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::dim(format!(
                "dot_const: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let s = self.value(a).dot(c);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(a, c.clone())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect())
            .expect("same shape");
        self.push(t, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape).map_err(|_| {
            Error::dim(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.value(a).shape()
            ))
        })?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat_channels: no inputs"))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() < 2 {
            return Err(Error::dim("concat_channels: inputs need rank >= 2"));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::dim(format!(
                    "concat_channels: {s:?} incompatible with {s0:?}"
                )));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec())))
    }

    // ----------------------------------------------------------------------
    // layers

    /// 2D cross-correlation of an NCHW input with an `[O, C, KH, KW]` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!("conv2d: input {xs:?} and weight {ws:?} must be rank 4")));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        check_geometry(geom)?;
        let (oh, ow) = geom
            .conv_out((xs[2], xs[3]), (ws[2], ws[3]))
            .ok_or_else(|| Error::dim(format!("conv2d: kernel {ws:?} larger than padded input {xs:?}")))?;
        self.check_bias(bias, ws[0], "conv2d")?;
        let dims = ConvDims {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            oh,
            ow,
            kh: ws[2],
            kw: ws[3],
            geom,
        };
        let mut out = vec![0.0; dims.n * dims.o * oh * ow];
        if let Some(b) = bias {
            fill_channel_bias(&mut out, self.value(b).data(), dims.n, oh * ow);
        }
        kernels::gather(self.value(input).data(), self.value(weight).data(), &mut out, &dims);
        let t = Tensor::new(vec![dims.n, dims.o, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
        ))
    }

    /// Transposed convolution of an NCHW input with a `[C_in, C_out, KH, KW]`
    /// kernel; the adjoint of [`Graph::conv2d`] for the same kernel and geometry.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv_transpose2d: input {xs:?} and weight {ws:?} must be rank 4"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "conv_transpose2d: input has {} channels but weight expects {}",
                xs[1], ws[0]
            )));
        }
        check_geometry(geom)?;
        let (h, w) = geom.transposed_out((xs[2], xs[3]), (ws[2], ws[3])).ok_or_else(|| {
            Error::config(format!(
                "conv_transpose2d: non-positive output size for input {xs:?}, kernel {ws:?}, {geom:?}"
            ))
        })?;
        self.check_bias(bias, ws[1], "conv_transpose2d")?;
        // The output is the wide side of the shared kernel relation.
        let dims = ConvDims {
            n: xs[0],
            c: ws[1],
            h,
            w,
            o: xs[1],
            oh: xs[2],
            ow: xs[3],
            kh: ws[2],
            kw: ws[3],
            geom,
        };
        let mut out = vec![0.0; dims.n * dims.c * h * w];
        if let Some(b) = bias {
            fill_channel_bias(&mut out, self.value(b).data(), dims.n, h * w);
        }
        kernels::scatter(self.value(input).data(), self.value(weight).data(), &mut out, &dims);
        let t = Tensor::new(vec![dims.n, dims.c, h, w], out)?;
        Ok(self.push(
            t,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                dims,
            },
        ))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, what: &str) -> Result<()> {
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [channels] {
                return Err(Error::dim(format!("{what}: bias {bs:?}, expected [{channels}]")));
            }
        }
        Ok(())
    }

    /// Affine map `[B, in] -> [B, out]` with an `[out, in]` weight.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "dense: input {xs:?} does not match weight {ws:?} ([out, in])"
            )));
        }
        self.check_bias(bias, ws[0], "dense")?;
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; batch * fan_out];
        for b in 0..batch {
            let xr = &x[b * fan_in..(b + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                out[b * fan_out + o] = kernels::dot(wr, xr);
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(fan_out) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(t, Op::Dense { input, weight, bias }))
    }

    /// Per-channel batch normalisation of an `[N, C, ...]` input.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch_norm: input {xs:?} needs rank >= 2")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm: {name} {:?}, expected [{c}]",
                    self.value(p).shape()
                )));
            }
        }
        let x = self.value(input).data();
        let count = (n * inner) as f64;
        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::usage(
                        "batch_norm: training mode needs a batch of at least 2 samples",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        s += x[off..off + inner].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        ss += x[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!(
                        "batch_norm: running statistics have {} / {} channels, expected {c}",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    /// `[B, H, W]` map with `out[b][y][x] = rows[b][y] · cols[b][x]`,
    /// from `cols: [B, W]` and `rows: [B, H]`.
    pub fn outer_product(&mut self, cols: Var, rows: Var) -> Result<Var> {
        let (sa, sb) = (self.value(cols).shape().to_vec(), self.value(rows).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "outer_product: expected per-batch vectors, got {sa:?} and {sb:?}"
            )));
        }
        let (batch, w, h) = (sa[0], sa[1], sb[1]);
        let a = self.value(cols).data();
        let bv = self.value(rows).data();
        let mut out = vec![0.0; batch * h * w];
        for n in 0..batch {
            for y in 0..h {
                let r = bv[n * h + y];
                let row = &mut out[(n * h + y) * w..(n * h + y + 1) * w];
                for (o, c) in row.iter_mut().zip(&a[n * w..(n + 1) * w]) {
                    *o = r * c;
                }
            }
        }
        let t = Tensor::new(vec![batch, h, w], out)?;
        Ok(self.push(t, Op::OuterProduct { a: cols, b: rows }))
    }

    /// Σ_j weights[j] · inputs[j] for same-shaped inputs and a `[k]` weight vector.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let k = inputs.len();
        if k == 0 {
            return Err(Error::usage("weighted_sum: no inputs"));
        }
        if self.value(weights).shape() != [k] {
            return Err(Error::dim(format!(
                "weighted_sum: {k} inputs but weights have shape {:?}",
                self.value(weights).shape()
            )));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for v in inputs {
            if self.value(*v).shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "weighted_sum: input shape {:?} differs from {shape:?}",
                    self.value(*v).shape()
                )));
            }
        }
        let w = self.value(weights).data().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (v, wj) in inputs.iter().zip(&w) {
            for (o, x) in out.iter_mut().zip(self.value(*v).data()) {
                *o += wj * x;
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
        ))
    }

    /// Softmax over all non-batch elements of each sample, with max subtraction.
    pub fn spatial_softmax(&mut self, h: Var) -> Result<Var> {
        let t = self.value(h);
        if t.rank() < 2 {
            return Err(Error::dim(format!("spatial_softmax: input {:?} needs rank >= 2", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("spatial_softmax: non-finite heatmap entry".into()));
        }
        let batch = t.shape()[0];
        let per: usize = t.shape()[1..].iter().product();
        let mut out = t.data().to_vec();
        for chunk in out.chunks_mut(per.max(1)).take(batch) {
            let m = chunk.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in chunk.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SpatialSoftmax(h)))
    }

    /// First-order moments of a `[B, H, W]` probability map → `[B, 2]` as (x, y)
    /// in normalised grid coordinates.
    pub fn soft_argmax(&mut self, prob: Var) -> Result<Var> {
        let t = self.value(prob);
        if t.rank() != 3 {
            return Err(Error::dim(format!("soft_argmax: expected [B, H, W], got {:?}", t.shape())));
        }
        let (batch, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let xs: Vec<f64> = (0..w).map(|i| grid_coord(i, w)).collect();
        let ys: Vec<f64> = (0..h).map(|i| grid_coord(i, h)).collect();
        let p = t.data();
        let mut out = vec![0.0; batch * 2];
        for n in 0..batch {
            let (mut gx, mut gy) = (0.0, 0.0);
            for y in 0..h {
                let row = &p[(n * h + y) * w..(n * h + y + 1) * w];
                let mut rs = 0.0;
                for (pv, xv) in row.iter().zip(&xs) {
                    gx += pv * xv;
                    rs += pv;
                }
                gy += rs * ys[y];
            }
            // Probabilities can sum to 1 + ulp; keep the moment inside the grid.
            out[2 * n] = gx.clamp(-1.0, 1.0);
            out[2 * n + 1] = gy.clamp(-1.0, 1.0);
        }
        let t = Tensor::new(vec![batch, 2], out)?;
        Ok(self.push(t, Op::SoftArgmax(prob)))
    }

    /// Renders `[B, 2]` normalised coordinates (u, v) as `[B, S, S]` Gaussian bumps.
    pub fn gaussian_render(&mut self, coords: Var, size: usize, sigma: f64) -> Result<Var> {
        let t = self.value(coords);
        if t.rank() != 2 || t.shape()[1] != 2 {
            return Err(Error::dim(format!("gaussian_render: expected [B, 2], got {:?}", t.shape())));
        }
        if !(sigma > 0.0) {
            return Err(Error::config(format!("gaussian_render: sigma must be positive, got {sigma}")));
        }
        let batch = t.shape()[0];
        let out = render_gaussians(t.data(), batch, size, sigma);
        let t = Tensor::new(vec![batch, size, size], out)?;
        Ok(self.push(t, Op::GaussianRender { coords, sigma }))
    }

    /// Mean over the batch of the per-sample squared Euclidean distance between
    /// `pred` and a constant `target`, both `[B, D]`.
    pub fn squared_error_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.rank() != 2 {
            return Err(Error::dim(format!(
                "squared_error_mean: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let batch = p.shape()[0].max(1) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(s / batch),
            Op::SquaredErrorMean {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Σ c_j · s_j over scalar nodes with constant coefficients.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for (v, c) in terms {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(Error::dim(format!(
                    "linear_combination: term of shape {:?} is not scalar",
                    t.shape()
                )));
            }
            s += c * t.data()[0];
        }
        Ok(self.push(Tensor::scalar(s), Op::LinearCombination(terms.to_vec())))
    }

    // ----------------------------------------------------------------------
    // reverse pass

    /// Populates gradients of the scalar `loss` with respect to every node it
    /// depends on, walking the tape in reverse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let order: Vec<Var> = (0..=loss.0).rev().map(Var).collect();
        self.backward_in_order(loss, &order)
    }

    /// Same as [`Graph::backward`] but visits nodes in a caller-supplied order,
    /// which must list every node up to `loss` before any of its inputs.
    pub fn backward_in_order(&mut self, loss: Var, order: &[Var]) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut pos = vec![usize::MAX; n];
        for (i, v) in order.iter().enumerate() {
            if v.0 >= n || pos[v.0] != usize::MAX {
                return Err(Error::usage("backward: order is not a permutation of the tape"));
            }
            pos[v.0] = i;
        }
        if pos.iter().any(|p| *p == usize::MAX) {
            return Err(Error::usage("backward: order is not a permutation of the tape"));
        }
        for v in order {
            for p in self.nodes[v.0].op.inputs() {
                if pos[p.0] < pos[v.0] {
                    return Err(Error::usage("backward: order visits an input before its consumer"));
                }
            }
        }

        // Contributions are summed in tape order of their consumers, so the
        // result does not depend on the order nodes are visited in.
        let mut pending: Vec<Vec<(usize, Tensor)>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        pending[loss.0].push((loss.0, Tensor::full(self.value(loss).shape(), 1.0)));
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let fault = self.adjoint_fault.unwrap_or(1.0);
        for v in order {
            let mut parts = std::mem::take(&mut pending[v.0]);
            if parts.is_empty() {
                continue;
            }
            parts.sort_by_key(|(from, _)| *from);
            let mut it = parts.into_iter().map(|(_, t)| t);
            let mut g = it.next().expect("non-empty");
            for t in it {
                g.add_assign(&t);
            }
            if self.nodes[v.0].requires_grad {
                propagate(&self.nodes, v.0, &g, &mut pending, fault);
            }
            grads[v.0] = Some(g);
        }
        // Only differentiable nodes keep a gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn check_geometry(geom: ConvGeometry) -> Result<()> {
    if geom.stride.0 == 0 || geom.stride.1 == 0 {
        return Err(Error::config("convolution stride must be >= 1"));
    }
    Ok(())
}

fn fill_channel_bias(out: &mut [f64], bias: &[f64], n: usize, plane: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, bv) in bias.iter().enumerate() {
            let off = (b * c + ch) * plane;
            out[off..off + plane].fill(*bv);
        }
    }
}

pub(crate) fn render_gaussians(coords: &[f64], batch: usize, size: usize, sigma: f64) -> Vec<f64> {
    let grid: Vec<f64> = (0..size).map(|i| grid_coord(i, size)).collect();
    let denom = 2.0 * sigma * sigma;
    let mut out = vec![0.0; batch * size * size];
    for n in 0..batch {
        let (u, v) = (coords[2 * n], coords[2 * n + 1]);
        let gx: Vec<f64> = grid.iter().map(|x| (-(x - u) * (x - u) / denom).exp()).collect();
        for (y, yv) in grid.iter().enumerate() {
            let gy = (-(yv - v) * (yv - v) / denom).exp();
            let row = &mut out[(n * size + y) * size..(n * size + y + 1) * size];
            for (o, g) in row.iter_mut().zip(&gx) {
                *o = gy * g;
            }
        }
    }
    out
}

fn accumulate(nodes: &[Node], pending: &mut Pending, from: usize, target: Var, mut contrib: Tensor, fault: f64) {
    if !nodes[target.0].requires_grad {
        return;
    }
    if fault != 1.0 {
        contrib.data_mut().iter_mut().for_each(|v| *v *= fault);
    }
    pending[target.0].push((from, contrib));
}

/// Gradient contributions waiting for each node, tagged with the consumer.
type Pending = [Vec<(usize, Tensor)>];

fn like(node: &Node, data: Vec<f64>) -> Tensor {
    Tensor::new(node.value.shape().to_vec(), data).expect("gradient matches value shape")
}

fn propagate(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut Pending, fault: f64) {
    let node = &nodes[idx];
    let gd = g.data();
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let acc = |grads: &mut Pending, v: Var, data: Vec<f64>| {
        let t = like(&nodes[v.0], data);
        accumulate(nodes, grads, idx, v, t, fault);
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, *a, gd.to_vec());
            acc(grads, *b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            acc(grads, *a, gd.to_vec());
            acc(grads, *b, gd.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if needs(a) {
                acc(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
            }
            if needs(b) {
                acc(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
            }
        }
        Op::Scale(a, f) => acc(grads, *a, gd.iter().map(|v| v * f).collect()),
        Op::Sum(a) => {
            let n = nodes[a.0].value.len();
            acc(grads, *a, vec![gd[0]; n]);
        }
        Op::DotConst(a, c) => acc(grads, *a, c.data().iter().map(|v| v * gd[0]).collect()),
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            acc(
                grads,
                *a,
                gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            );
        }
        Op::Reshape(a) => acc(grads, *a, gd.to_vec()),
        Op::ConcatChannels(parts) => {
            let s = node.value.shape();
            let (n, total) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let mut offset = 0;
            for p in parts {
                let c = nodes[p.0].value.shape()[1];
                if needs(p) {
                    let mut d = Vec::with_capacity(n * c * inner);
                    for b in 0..n {
                        let start = (b * total + offset) * inner;
                        d.extend_from_slice(&gd[start..start + c * inner]);
                    }
                    acc(grads, *p, d);
                }
                offset += c;
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            dims,
        } => {
            let x = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            if needs(input) {
                let mut dx = vec![0.0; x.len()];
                kernels::scatter(gd, w, &mut dx, dims);
                acc(grads, *input, dx);
            }
            if needs(weight) {
                let mut dw = vec![0.0; w.len()];
                kernels::weight_grad(x, gd, &mut dw, dims);
                acc(grads, *weight, dw);
            }
            if let Some(b) = bias {
                if needs(b) {
                    acc(grads, *b, channel_sums(gd, dims.n, dims.o, dims.oh * dims.ow));
                }
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            dims,
        } => {
            let u = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            if needs(input) {
                let mut du = vec![0.0; u.len()];
                kernels::gather(gd, w, &mut du, dims);
                acc(grads, *input, du);
            }
            if needs(weight) {
                let mut dw = vec![0.0; w.len()];
                kernels::weight_grad(gd, u, &mut dw, dims);
                acc(grads, *weight, dw);
            }
            if let Some(b) = bias {
                if needs(b) {
                    acc(grads, *b, channel_sums(gd, dims.n, dims.c, dims.h * dims.w));
                }
            }
        }
        Op::Dense { input, weight, bias } => {
            let x = nodes[input.0].value.data();
            let w = nodes[weight.0].value.data();
            let xs = nodes[input.0].value.shape();
            let (batch, fan_in) = (xs[0], xs[1]);
            let fan_out = nodes[weight.0].value.shape()[0];
            if needs(input) {
                let mut dx = vec![0.0; x.len()];
                for b in 0..batch {
                    let dxr = &mut dx[b * fan_in..(b + 1) * fan_in];
                    for o in 0..fan_out {
                        let gv = gd[b * fan_out + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, wv) in dxr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *d += gv * wv;
                        }
                    }
                }
                acc(grads, *input, dx);
            }
            if needs(weight) {
                let mut dw = vec![0.0; w.len()];
                for b in 0..batch {
                    let xr = &x[b * fan_in..(b + 1) * fan_in];
                    for o in 0..fan_out {
                        let gv = gd[b * fan_out + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, xv) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                            *d += gv * xv;
                        }
                    }
                }
                acc(grads, *weight, dw);
            }
            if let Some(b) = bias {
                if needs(b) {
                    let mut db = vec![0.0; fan_out];
                    for row in gd.chunks(fan_out) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = node.value.shape();
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let gam = nodes[gamma.0].value.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            if needs(input) {
                let mut dx = vec![0.0; gd.len()];
                let m = (n * inner) as f64;
                for ch in 0..c {
                    let k = gam[ch] * inv_std[ch];
                    if *train {
                        // dx = γ/σ · (g − mean(g) − x̂ · mean(g·x̂))
                        let mean_g = dbeta[ch] / m;
                        let mean_gx = dgamma[ch] / m;
                        for b in 0..n {
                            let off = (b * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] = k * (gd[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    } else {
                        for b in 0..n {
                            let off = (b * c + ch) * inner;
                            for i in off..off + inner {
                                dx[i] = k * gd[i];
                            }
                        }
                    }
                }
                acc(grads, *input, dx);
            }
            if needs(gamma) {
                acc(grads, *gamma, dgamma);
            }
            if needs(beta) {
                acc(grads, *beta, dbeta);
            }
        }
        Op::OuterProduct { a, b } => {
            let s = node.value.shape();
            let (batch, h, w) = (s[0], s[1], s[2]);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let mut da = vec![0.0; batch * w];
            let mut db = vec![0.0; batch * h];
            for n in 0..batch {
                for y in 0..h {
                    let row = &gd[(n * h + y) * w..(n * h + y + 1) * w];
                    let r = bv[n * h + y];
                    let mut dot = 0.0;
                    for (x, gv) in row.iter().enumerate() {
                        da[n * w + x] += gv * r;
                        dot += gv * av[n * w + x];
                    }
                    db[n * h + y] = dot;
                }
            }
            if needs(a) {
                acc(grads, *a, da);
            }
            if needs(b) {
                acc(grads, *b, db);
            }
        }
        Op::WeightedSum { inputs, weights } => {
            let w = nodes[weights.0].value.data();
            for (v, wj) in inputs.iter().zip(w) {
                if needs(v) {
                    acc(grads, *v, gd.iter().map(|g| g * wj).collect());
                }
            }
            if needs(weights) {
                let dw = inputs.iter().map(|v| nodes[v.0].value.dot(g)).collect();
                acc(grads, *weights, dw);
            }
        }
        Op::SpatialSoftmax(h) => {
            let p = node.value.data();
            let batch = node.value.shape()[0];
            let per = p.len() / batch.max(1);
            let mut dh = vec![0.0; p.len()];
            for n in 0..batch {
                let r = n * per..(n + 1) * per;
                let dot: f64 = gd[r.clone()].iter().zip(&p[r.clone()]).map(|(a, b)| a * b).sum();
                for i in r {
                    dh[i] = p[i] * (gd[i] - dot);
                }
            }
            acc(grads, *h, dh);
        }
        Op::SoftArgmax(prob) => {
            let s = nodes[prob.0].value.shape();
            let (batch, h, w) = (s[0], s[1], s[2]);
            let mut dp = vec![0.0; batch * h * w];
            for n in 0..batch {
                let (gx, gy) = (gd[2 * n], gd[2 * n + 1]);
                for y in 0..h {
                    let yc = grid_coord(y, h);
                    for x in 0..w {
                        dp[(n * h + y) * w + x] = gx * grid_coord(x, w) + gy * yc;
                    }
                }
            }
            acc(grads, *prob, dp);
        }
        Op::GaussianRender { coords, sigma } => {
            let s = node.value.shape();
            let (batch, size) = (s[0], s[1]);
            let c = nodes[coords.0].value.data();
            let hv = node.value.data();
            let s2 = sigma * sigma;
            let mut dc = vec![0.0; batch * 2];
            for n in 0..batch {
                let (u, v) = (c[2 * n], c[2 * n + 1]);
                let (mut du, mut dv) = (0.0, 0.0);
                for y in 0..size {
                    let yn = grid_coord(y, size);
                    for x in 0..size {
                        let i = (n * size + y) * size + x;
                        let k = gd[i] * hv[i] / s2;
                        du += k * (grid_coord(x, size) - u);
                        dv += k * (yn - v);
                    }
                }
                dc[2 * n] = du;
                dc[2 * n + 1] = dv;
            }
            acc(grads, *coords, dc);
        }
        Op::SquaredErrorMean { pred, target } => {
            let p = nodes[pred.0].value.data();
            let batch = nodes[pred.0].value.shape()[0].max(1) as f64;
            let k = 2.0 * gd[0] / batch;
            acc(
                grads,
                *pred,
                p.iter().zip(target.data()).map(|(a, b)| k * (a - b)).collect(),
            );
        }
        Op::LinearCombination(terms) => {
            for (v, c) in terms {
                if needs(v) {
                    acc(grads, *v, vec![gd[0] * c]);
                }
            }
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            *o += g[off..off + plane].iter().sum::<f64>();
        }
    }
    out
}
