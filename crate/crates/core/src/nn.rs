//! Layer building blocks shared by the trainable model and the frozen
//! perceptual networks.

use ndarray::Array2;

use crate::attention::attend_rows;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `x W + b`, applied per row.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: store.uniform(format!("{name}.weight"), input, output, input),
            bias: store.zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).ncols()
    }
}

/// Single-map 3×3 convolution over the (time, channel) plane.
#[derive(Debug, Clone)]
pub struct PlaneConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl PlaneConv {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self {
            kernel: store.uniform(format!("{name}.kernel"), 3, 3, 9),
            bias: store.zeros(format!("{name}.bias"), 1, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        g.conv3x3(x, k, b)
    }
}

/// 1-D convolution along time with replication padding, via im2col.
#[derive(Debug, Clone)]
pub struct TimeConv {
    pub proj: Affine,
    pub width: usize,
    pub stride: usize,
    pub input: usize,
}

impl TimeConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        width: usize,
        stride: usize,
    ) -> Self {
        Self {
            proj: Affine::new(store, name, width * input, output),
            width,
            stride,
            input,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let cols = im2col(g, x, self.width, self.stride);
        self.proj.forward(g, store, cols)
    }
}

/// Unfolds `x` (T×C) into `ceil(T/stride) × (width·C)` windows centred on
/// every `stride`-th frame, clamping indices at the edges.
pub fn im2col(g: &mut Graph, x: Var, width: usize, stride: usize) -> Var {
    let (t, c) = g.shape(x);
    let out_len = t.div_ceil(stride);
    let half = (width / 2) as isize;
    let mut idx = Vec::with_capacity(out_len * width * c);
    for o in 0..out_len {
        let centre = (o * stride) as isize;
        for j in 0..width as isize {
            let row = (centre + j - half).clamp(0, t as isize - 1) as usize;
            idx.extend(row * c..(row + 1) * c);
        }
    }
    g.gather(x, out_len, width * c, idx)
}

/// Sinusoidal position table, `T × d`.
pub fn positional_encoding(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Pre-norm self-attention plus feed-forward block with residuals.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub out: Affine,
    pub ff_in: Affine,
    pub ff_out: Affine,
    pub dim: usize,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            q: Affine::new(store, &format!("{name}.attn_q"), dim, dim),
            k: Affine::new(store, &format!("{name}.attn_k"), dim, dim),
            v: Affine::new(store, &format!("{name}.attn_v"), dim, dim),
            out: Affine::new(store, &format!("{name}.attn_out"), dim, dim),
            ff_in: Affine::new(store, &format!("{name}.ff_in"), dim, 2 * dim),
            ff_out: Affine::new(store, &format!("{name}.ff_out"), 2 * dim, dim),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = g.layer_norm_rows(x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let (a, _) = attend_rows(g, q, k, v, (self.dim as f64).sqrt());
        let a = self.out.forward(g, store, a);
        let x = g.add(x, a);
        let h = g.layer_norm_rows(x);
        let f = self.ff_in.forward(g, store, h);
        let f = g.silu(f);
        let f = self.ff_out.forward(g, store, f);
        g.add(x, f)
    }

    pub fn zero_output_paths(&self, store: &mut ParamStore) {
        for id in [
            self.out.weight,
            self.out.bias,
            self.ff_out.weight,
            self.ff_out.bias,
        ] {
            store.value_mut(id).fill(0.0);
        }
    }
}
