// Raw NCHW cross-correlation kernels shared by conv2d and its transpose.
//
// All three routines use the same index relation between a "wide" image x
// (channels C, extent H×W) and a "narrow" image y (channels O, extent OH×OW):
//
//     y[n, o, oh, ow] <- w[o, c, kh, kw] * x[n, c, oh*sh + kh - ph, ow*sw + kw - pw]
//
// `gather` computes y from x, `scatter` is its exact adjoint (x from y), and
// `weight_grad` is the derivative with respect to w.

/// Stride and zero padding of a 2D (transposed) convolution, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    /// Output extent of a convolution over an input of extent `input`.
    pub(crate) fn conv_out(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let h = input.0 + 2 * self.pad.0;
        let w = input.1 + 2 * self.pad.1;
        if h < kernel.0 || w < kernel.1 {
            return None;
        }
        Some(((h - kernel.0) / self.stride.0 + 1, (w - kernel.1) / self.stride.1 + 1))
    }

    /// Output extent of a transposed convolution: (in−1)·stride − 2·pad + k.
    pub(crate) fn transposed_out(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let h = (input.0 as isize - 1) * self.stride.0 as isize - 2 * self.pad.0 as isize + kernel.0 as isize;
        let w = (input.1 as isize - 1) * self.stride.1 as isize - 2 * self.pad.1 as isize + kernel.1 as isize;
        if input.0 == 0 || input.1 == 0 || h <= 0 || w <= 0 {
            return None;
        }
        Some((h as usize, w as usize))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    /// Wide-side channels and extent.
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Narrow-side channels and extent.
    pub o: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeometry,
}

/// Range of narrow-side indices `o` for which `o*stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Patch matrix of one wide-side sample: row `(c, kh, kw)`, column
/// `(oh, ow)`; out-of-image taps are zero.
fn im2col(xs: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = (d.geom.pad.0 as isize, d.geom.pad.1 as isize);
    let p = d.oh * d.ow;
    for c in 0..d.c {
        let xp = &xs[c * d.h * d.w..(c + 1) * d.h * d.w];
        for kh in 0..d.kh {
            let (oh_lo, oh_hi) = valid_range(d.oh, sh, kh as isize - ph, d.h);
            for kw in 0..d.kw {
                let (ow_lo, ow_hi) = valid_range(d.ow, sw, kw as isize - pw, d.w);
                let row = &mut cols[((c * d.kh + kh) * d.kw + kw) * p..][..p];
                if oh_hi - oh_lo != d.oh || ow_hi - ow_lo != d.ow {
                    row.fill(0.0);
                }
                for oh in oh_lo..oh_hi {
                    let ih = ((oh * sh) as isize + kh as isize - ph) as usize;
                    let xrow = &xp[ih * d.w..(ih + 1) * d.w];
                    let dst = &mut row[oh * d.ow..(oh + 1) * d.ow];
                    let start = ((ow_lo * sw) as isize + kw as isize - pw) as usize;
                    for (ow, v) in dst[ow_lo..ow_hi].iter_mut().enumerate() {
                        *v = xrow[start + ow * sw];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch entries back into the image.
fn col2im(cols: &[f64], d: &ConvDims, xs: &mut [f64]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = (d.geom.pad.0 as isize, d.geom.pad.1 as isize);
    let p = d.oh * d.ow;
    for c in 0..d.c {
        let xp = &mut xs[c * d.h * d.w..(c + 1) * d.h * d.w];
        for kh in 0..d.kh {
            let (oh_lo, oh_hi) = valid_range(d.oh, sh, kh as isize - ph, d.h);
            for kw in 0..d.kw {
                let (ow_lo, ow_hi) = valid_range(d.ow, sw, kw as isize - pw, d.w);
                let row = &cols[((c * d.kh + kh) * d.kw + kw) * p..][..p];
                for oh in oh_lo..oh_hi {
                    let ih = ((oh * sh) as isize + kh as isize - ph) as usize;
                    let xrow = &mut xp[ih * d.w..(ih + 1) * d.w];
                    let src = &row[oh * d.ow..(oh + 1) * d.ow];
                    let start = ((ow_lo * sw) as isize + kw as isize - pw) as usize;
                    for (ow, v) in src[ow_lo..ow_hi].iter().enumerate() {
                        xrow[start + ow * sw] += v;
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y = corr(x, w) without bias. `y` must be zero-initialised or pre-filled with bias.
pub(crate) fn gather(x: &[f64], wt: &[f64], y: &mut [f64], d: &ConvDims) {
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut cols = vec![0.0; k * p];
    for n in 0..d.n {
        im2col(&x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], d, &mut cols);
        for o in 0..d.o {
            let yrow = &mut y[(n * d.o + o) * p..][..p];
            for (j, &wv) in wt[o * k..(o + 1) * k].iter().enumerate() {
                if wv != 0.0 {
                    axpy(yrow, wv, &cols[j * p..(j + 1) * p]);
                }
            }
        }
    }
}

/// x += corrᵀ(y, w): the adjoint of [`gather`] with respect to x.
pub(crate) fn scatter(y: &[f64], wt: &[f64], x: &mut [f64], d: &ConvDims) {
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut cols = vec![0.0; k * p];
    for n in 0..d.n {
        cols.fill(0.0);
        for o in 0..d.o {
            let yrow = &y[(n * d.o + o) * p..][..p];
            for (j, &wv) in wt[o * k..(o + 1) * k].iter().enumerate() {
                if wv != 0.0 {
                    axpy(&mut cols[j * p..(j + 1) * p], wv, yrow);
                }
            }
        }
        col2im(&cols, d, &mut x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w]);
    }
}

/// gw += ∂⟨y, corr(x, w)⟩/∂w for narrow-side cotangent `y`.
pub(crate) fn weight_grad(x: &[f64], y: &[f64], gw: &mut [f64], d: &ConvDims) {
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut cols = vec![0.0; k * p];
    for n in 0..d.n {
        im2col(&x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], d, &mut cols);
        for o in 0..d.o {
            let yrow = &y[(n * d.o + o) * p..][..p];
            for (j, g) in gw[o * k..(o + 1) * k].iter_mut().enumerate() {
                *g += dot(yrow, &cols[j * p..(j + 1) * p]);
            }
        }
    }
}
