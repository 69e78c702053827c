//! Hand-differentiated layers for the toy denoiser.
//!
//! Feature maps are `(channels, height, width)` arrays; token sequences are
//! `(positions, features)` matrices. Each layer has a forward pass that keeps
//! whatever the backward pass needs and a backward pass that accumulates
//! parameter gradients into a same-shaped gradient layer.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Rounds every entry to the nearest `f32`, keeping parameters exactly
/// representable in the checkpoint format.
pub(crate) fn round_f32(xs: &mut [f64]) {
    for x in xs {
        *x = *x as f32 as f64;
    }
}

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (input as f64).sqrt();
        Linear {
            w: gaussian_matrix(output, input, std, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    /// Rows of `x` are independent inputs.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grad {
            g.w += &dy.t().dot(&x);
            g.b += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w)
    }

    pub fn backward_vec(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        grad: Option<&mut Linear>,
    ) -> Array1<f64> {
        if let Some(g) = grad {
            let outer = dy
                .view()
                .insert_axis(Axis(1))
                .dot(&x.view().insert_axis(Axis(0)));
            g.w += &outer;
            g.b += dy;
        }
        self.w.t().dot(dy)
    }
}

/// 3×3 convolution with zero padding 1 and stride 1 or 2, via im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `(out, in * 9)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: [usize; 3],
}

impl Conv {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / ((input * 9) as f64).sqrt();
        Conv {
            w: gaussian_matrix(output, input * 9, std, rng),
            b: Array1::zeros(output),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let st = self.stride;
        let mut cols = Array2::<f64>::zeros((c * 9, oh * ow));
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                    let row = row.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        let iy = (oy * st + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * st + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < w {
                                row[oy * ow + ox] = plane[[iy, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, in_shape: [usize; 3]) -> Array3<f64> {
        let [c, h, w] = in_shape;
        let (oh, ow) = self.out_hw(h, w);
        let st = self.stride;
        let mut dx = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let mut plane = dx.index_axis_mut(Axis(0), ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = dcols.row(ci * 9 + ky * 3 + kx);
                    for oy in 0..oh {
                        let iy = (oy * st + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * st + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < w {
                                plane[[iy, ix as usize]] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y = self.w.dot(&cols);
        y += &self.b.view().insert_axis(Axis(1));
        let y = y
            .into_shape_with_order((self.w.nrows(), oh, ow))
            .expect("conv output shape");
        let d = x.dim();
        (
            y,
            ConvCache {
                cols,
                in_shape: [d.0, d.1, d.2],
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: Option<&mut Conv>,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (co, oh, ow) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((co, oh * ow))
            .expect("contiguous gradient");
        if let Some(g) = grad {
            g.w += &dy2.dot(&cache.cols.t());
            g.b += &dy2.sum_axis(Axis(1));
        }
        if !need_input_grad {
            return None;
        }
        let dcols = self.w.t().dot(&dy2);
        Some(self.col2im(&dcols, cache.in_shape))
    }
}

pub(crate) fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub(crate) fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
    for ((ci, y, x), v) in dy.indexed_iter() {
        dx[[ci, y / 2, x / 2]] += v;
    }
    dx
}

/// `(C, H, W)` → `(H·W, C)`.
pub(crate) fn to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous map")
        .t()
        .to_owned()
}

/// `(H·W, C)` → `(C, H, W)`.
pub(crate) fn from_tokens(t: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = t.ncols();
    t.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count matches map")
}

/// Multi-head attention projections. For self-attention keys and values
/// project the same tokens as queries; for cross-attention they project the
/// conditioning context.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    ctx: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `(heads, queries, keys)`, the maps actually used
    probs: Array3<f64>,
    merged: Array2<f64>,
    overridden: bool,
}

impl AttentionCache {
    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(dim: usize, ctx_dim: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::init(dim, dim, 1.0, rng),
            k: Linear::init(ctx_dim, dim, 1.0, rng),
            v: Linear::init(ctx_dim, dim, 1.0, rng),
            o: Linear::init(dim, dim, 0.5, rng),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
            heads: self.heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.w.nrows() / self.heads
    }

    /// Returns the attention output (before any residual connection).
    ///
    /// When `replace` is given, it is used instead of the computed softmax
    /// maps; its shape must be `(heads, queries, keys)`.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        ctx: &Array2<f64>,
        replace: Option<&Array3<f64>>,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.q.forward(x.view());
        let k = self.k.forward(ctx.view());
        let v = self.v.forward(ctx.view());
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (x.nrows(), ctx.nrows());
        let probs = match replace {
            Some(m) => m.clone(),
            None => {
                let mut p = Array3::<f64>::zeros((self.heads, nq, nk));
                for h in 0..self.heads {
                    let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
                    let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
                    let mut logits = qh.dot(&kh.t());
                    for mut row in logits.rows_mut() {
                        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        row.mapv_inplace(|l| ((l - max) * scale).exp());
                        let sum = row.sum();
                        row /= sum;
                    }
                    p.index_axis_mut(Axis(0), h).assign(&logits);
                }
                p
            }
        };
        let mut merged = Array2::<f64>::zeros((nq, self.heads * dh));
        for h in 0..self.heads {
            let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
            let oh = probs.index_axis(Axis(0), h).dot(&vh);
            merged.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&oh);
        }
        let out = self.o.forward(merged.view());
        let cache = AttentionCache {
            x: x.clone(),
            ctx: ctx.clone(),
            q,
            k,
            v,
            probs,
            merged,
            overridden: replace.is_some(),
        };
        (out, cache)
    }

    /// Returns `(d_x, d_ctx)`. For self-attention the caller adds the two.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        mut grad: Option<&mut Attention>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let d_merged = self
            .o
            .backward(cache.merged.view(), dy.view(), grad.as_mut().map(|g| &mut g.o));
        let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = cache.probs.index_axis(Axis(0), h);
            let d_oh = d_merged.slice(cols);
            let vh = cache.v.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
            if cache.overridden {
                continue;
            }
            let dp = d_oh.dot(&vh.t());
            let mut dlogits = &dp * &p;
            for (mut row, prow) in dlogits.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = row.sum();
                row.zip_mut_with(&prow, |d, &pp| *d -= pp * dot);
            }
            dlogits *= scale;
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            dq.slice_mut(cols).assign(&dlogits.dot(&kh));
            dk.slice_mut(cols).assign(&dlogits.t().dot(&qh));
        }
        let dx = self
            .q
            .backward(cache.x.view(), dq.view(), grad.as_mut().map(|g| &mut g.q));
        let mut dctx = self
            .k
            .backward(cache.ctx.view(), dk.view(), grad.as_mut().map(|g| &mut g.k));
        dctx += &self
            .v
            .backward(cache.ctx.view(), dv.view(), grad.as_mut().map(|g| &mut g.v));
        (dx, dctx)
    }
}
