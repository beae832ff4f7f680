//! Small building blocks shared by the toy backbones and the adapters.

use rand::Rng;

use super::graph::{concat_cols, Var};
use super::store::{ParamId, ParamStore, Params};
use super::tensor::Mat;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Gaussian weights scaled by `gain / sqrt(din)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Mat::randn(din, dout, gain / (din as f64).sqrt(), rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, dout)));
        Self { w, b, din, dout }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Mat::zeros(din, dout));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, dout)));
        Self { w, b, din, dout }
    }

    pub fn forward<'g>(&self, p: &Params<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(p.v(self.w));
        match self.b {
            Some(b) => y.add_row(p.v(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Mat::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.b"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward<'g>(&self, p: &Params<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm_rows(LN_EPS).mul_row(p.v(self.gain)).add_row(p.v(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, true, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, true, 0.5, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Params<'g>, x: Var<'g>) -> Var<'g> {
        self.fc2.forward(p, self.fc1.forward(p, x).silu())
    }
}

/// Scaled dot-product attention with `heads` heads over pre-projected inputs.
/// `q` has one row per query token, `k` and `v` one row per key token.
pub fn multi_head_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, heads: usize) -> Var<'g> {
    let d = q.cols();
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let outs: Vec<Var<'g>> = (0..heads)
        .map(|h| {
            let qh = q.slice_cols(h * hd, hd);
            let kh = k.slice_cols(h * hd, hd);
            let vh = v.slice_cols(h * hd, hd);
            qh.matmul_t(kh).scale(scale).softmax_rows().matmul(vh)
        })
        .collect();
    if heads == 1 {
        outs[0]
    } else {
        concat_cols(&outs)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub dim: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, 1.0, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_ratio, rng),
            heads,
            dim,
        }
    }

    pub fn forward<'g>(&self, p: &Params<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.ln1.forward(p, x);
        let qkv = self.qkv.forward(p, h);
        let d = self.dim;
        let att = multi_head_attention(qkv.slice_cols(0, d), qkv.slice_cols(d, d), qkv.slice_cols(2 * d, d), self.heads);
        let x = x.add(self.proj.forward(p, att));
        x.add(self.mlp.forward(p, self.ln2.forward(p, x)))
    }
}

/// Sinusoidal embedding of continuous 2-D coordinates, half the channels per
/// axis. Coordinates may be fractional or scaled.
pub fn pos_embed_2d(ids: &[(f64, f64)], dim: usize) -> Mat {
    assert_eq!(dim % 4, 0, "2-D positional width must be a multiple of 4");
    let quarter = dim / 4;
    Mat::from_fn(ids.len(), dim, |r, c| {
        let (y, x) = ids[r];
        let axis_val = if c < dim / 2 { y } else { x };
        let k = c % (dim / 2);
        let freq = 1.0 / 100f64.powf((k % quarter) as f64 / quarter as f64);
        if k < quarter {
            (axis_val * freq).sin()
        } else {
            (axis_val * freq).cos()
        }
    })
}

/// Sinusoidal embedding of a scalar (used for timesteps).
pub fn scalar_embed(t: f64, dim: usize) -> Mat {
    let half = dim / 2;
    Mat::from_fn(1, dim, |_, c| {
        let k = c % half;
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        if c < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

/// Row-major grid IDs `(r, c)` for an `rows × cols` token grid.
pub fn grid_ids(rows: usize, cols: usize) -> Vec<(f64, f64)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r as f64, c as f64))).collect()
}
