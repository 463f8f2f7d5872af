//! Node encoder: input projection followed by self-attention blocks, each sub-block
//! closed by a residual connection and per-node normalization.

use super::linalg::{add_a_bt, add_at_b, add_col_sums, add_row_bias, matmul, softmax_inplace};
use super::params::{ArchConfig, LayerOffsets, Offsets};
use crate::env::STATIC_FEATURES;
use crate::error::{Error, Result};

/// Added to the variance inside per-node normalization.
pub const NORM_EPS: f64 = 1e-6;

/// Intermediate values of one encoder block kept for the backward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `heads × N × N`.
    attn: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    heads_out: Vec<f64>,
    norm1_hat: Vec<f64>,
    norm1_inv_std: Vec<f64>,
    h1: Vec<f64>,
    ff_pre: Vec<f64>,
    norm2_hat: Vec<f64>,
    norm2_inv_std: Vec<f64>,
}

/// Output of the encoder with everything needed to back-propagate into it.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub nodes: usize,
    pub dim: usize,
    /// Final node embeddings, `N × d`.
    pub embeddings: Vec<f64>,
    features: Vec<f64>,
    layers: Vec<LayerCache>,
}

impl Encoded {
    pub fn row(&self, node: usize) -> &[f64] {
        &self.embeddings[node * self.dim..(node + 1) * self.dim]
    }
}

fn layer_norm(x: &[f64], dim: usize, scale: &[f64], shift: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / dim;
    let mut hat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv[r] = is;
        for j in 0..dim {
            let h = (xr[j] - mean) * is;
            hat[r * dim + j] = h;
            y[r * dim + j] = scale[j] * h + shift[j];
        }
    }
    (y, hat, inv)
}

/// Returns the input gradient; accumulates scale/shift gradients.
fn layer_norm_backward(
    dy: &[f64],
    hat: &[f64],
    inv: &[f64],
    scale: &[f64],
    dim: usize,
    d_scale: &mut [f64],
    d_shift: &mut [f64],
) -> Vec<f64> {
    let rows = inv.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dhat = vec![0.0; dim];
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let hr = &hat[r * dim..(r + 1) * dim];
        let mut mean_dhat = 0.0;
        let mut mean_dhat_h = 0.0;
        for j in 0..dim {
            d_scale[j] += dyr[j] * hr[j];
            d_shift[j] += dyr[j];
            dhat[j] = dyr[j] * scale[j];
            mean_dhat += dhat[j];
            mean_dhat_h += dhat[j] * hr[j];
        }
        mean_dhat /= dim as f64;
        mean_dhat_h /= dim as f64;
        for j in 0..dim {
            dx[r * dim + j] = inv[r] * (dhat[j] - mean_dhat - hr[j] * mean_dhat_h);
        }
    }
    dx
}

fn block_forward(
    p: &[f64],
    o: &LayerOffsets,
    arch: &ArchConfig,
    x: Vec<f64>,
    nodes: usize,
) -> (Vec<f64>, LayerCache) {
    let d = arch.embed_dim;
    let h = arch.heads;
    let dk = arch.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let w = |off: usize, len: usize| &p[off..off + len];

    let mut q = vec![0.0; nodes * d];
    let mut k = vec![0.0; nodes * d];
    let mut v = vec![0.0; nodes * d];
    matmul(&x, w(o.wq, d * d), nodes, d, d, &mut q);
    matmul(&x, w(o.wk, d * d), nodes, d, d, &mut k);
    matmul(&x, w(o.wv, d * d), nodes, d, d, &mut v);

    let mut attn = vec![0.0; h * nodes * nodes];
    let mut heads_out = vec![0.0; nodes * d];
    for m in 0..h {
        let cols = m * dk..(m + 1) * dk;
        for i in 0..nodes {
            let qi = &q[i * d + cols.start..i * d + cols.end];
            let row = &mut attn[(m * nodes + i) * nodes..(m * nodes + i + 1) * nodes];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[j * d + cols.start..j * d + cols.end];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_inplace(row);
            let out = &mut heads_out[i * d + cols.start..i * d + cols.end];
            for (j, &a) in row.iter().enumerate() {
                let vj = &v[j * d + cols.start..j * d + cols.end];
                for (ov, &vv) in out.iter_mut().zip(vj) {
                    *ov += a * vv;
                }
            }
        }
    }
    let mut r1 = vec![0.0; nodes * d];
    matmul(&heads_out, w(o.wo, d * d), nodes, d, d, &mut r1);
    for (r, xi) in r1.iter_mut().zip(&x) {
        *r += xi;
    }
    let (h1, norm1_hat, norm1_inv_std) = layer_norm(&r1, d, w(o.n1_scale, d), w(o.n1_shift, d));

    let mut ff_pre = vec![0.0; nodes * 2 * d];
    matmul(&h1, w(o.ff1_w, 2 * d * d), nodes, d, 2 * d, &mut ff_pre);
    add_row_bias(&mut ff_pre, w(o.ff1_b, 2 * d));
    let hidden: Vec<f64> = ff_pre.iter().map(|&z| z.max(0.0)).collect();
    let mut r2 = vec![0.0; nodes * d];
    matmul(&hidden, w(o.ff2_w, 2 * d * d), nodes, 2 * d, d, &mut r2);
    add_row_bias(&mut r2, w(o.ff2_b, d));
    for (r, hi) in r2.iter_mut().zip(&h1) {
        *r += hi;
    }
    let (out, norm2_hat, norm2_inv_std) = layer_norm(&r2, d, w(o.n2_scale, d), w(o.n2_shift, d));

    let cache = LayerCache {
        input: x,
        q,
        k,
        v,
        attn,
        heads_out,
        norm1_hat,
        norm1_inv_std,
        h1,
        ff_pre,
        norm2_hat,
        norm2_inv_std,
    };
    (out, cache)
}

/// Returns the gradient with respect to the block input.
fn block_backward(
    p: &[f64],
    o: &LayerOffsets,
    arch: &ArchConfig,
    c: &LayerCache,
    d_out: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let d = arch.embed_dim;
    let h = arch.heads;
    let dk = arch.head_dim();
    let nodes = c.norm1_inv_std.len();
    let scale = 1.0 / (dk as f64).sqrt();

    // Second normalization and feed-forward.
    let mut gs = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let dr2 = layer_norm_backward(
        d_out,
        &c.norm2_hat,
        &c.norm2_inv_std,
        &p[o.n2_scale..o.n2_scale + d],
        d,
        &mut gs,
        &mut gb,
    );
    accumulate(grad, o.n2_scale, &gs);
    accumulate(grad, o.n2_shift, &gb);

    let hidden: Vec<f64> = c.ff_pre.iter().map(|&z| z.max(0.0)).collect();
    add_at_b(&hidden, &dr2, nodes, 2 * d, d, &mut grad[o.ff2_w..o.ff2_w + 2 * d * d]);
    add_col_sums(&dr2, &mut grad[o.ff2_b..o.ff2_b + d]);
    let mut d_hidden = vec![0.0; nodes * 2 * d];
    add_a_bt(&dr2, &p[o.ff2_w..o.ff2_w + 2 * d * d], nodes, 2 * d, d, &mut d_hidden);
    for (g, &z) in d_hidden.iter_mut().zip(&c.ff_pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    add_at_b(&c.h1, &d_hidden, nodes, d, 2 * d, &mut grad[o.ff1_w..o.ff1_w + 2 * d * d]);
    add_col_sums(&d_hidden, &mut grad[o.ff1_b..o.ff1_b + 2 * d]);
    let mut dh1 = dr2;
    add_a_bt(&d_hidden, &p[o.ff1_w..o.ff1_w + 2 * d * d], nodes, d, 2 * d, &mut dh1);

    // First normalization and attention.
    gs.fill(0.0);
    gb.fill(0.0);
    let dr1 = layer_norm_backward(
        &dh1,
        &c.norm1_hat,
        &c.norm1_inv_std,
        &p[o.n1_scale..o.n1_scale + d],
        d,
        &mut gs,
        &mut gb,
    );
    accumulate(grad, o.n1_scale, &gs);
    accumulate(grad, o.n1_shift, &gb);

    add_at_b(&c.heads_out, &dr1, nodes, d, d, &mut grad[o.wo..o.wo + d * d]);
    let mut d_heads = vec![0.0; nodes * d];
    add_a_bt(&dr1, &p[o.wo..o.wo + d * d], nodes, d, d, &mut d_heads);

    let mut dq = vec![0.0; nodes * d];
    let mut dkm = vec![0.0; nodes * d];
    let mut dv = vec![0.0; nodes * d];
    let mut d_attn = vec![0.0; nodes];
    for m in 0..h {
        let cols = m * dk..(m + 1) * dk;
        for i in 0..nodes {
            let a = &c.attn[(m * nodes + i) * nodes..(m * nodes + i + 1) * nodes];
            let dout = &d_heads[i * d + cols.start..i * d + cols.end];
            // dA_ij = dout_i · v_j ; dV_j += a_ij dout_i
            let mut weighted = 0.0;
            for j in 0..nodes {
                let vj = &c.v[j * d + cols.start..j * d + cols.end];
                let g = dout.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                d_attn[j] = g;
                weighted += g * a[j];
                let dvj = &mut dv[j * d + cols.start..j * d + cols.end];
                for (t, &x) in dvj.iter_mut().zip(dout) {
                    *t += a[j] * x;
                }
            }
            for j in 0..nodes {
                let ds = a[j] * (d_attn[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in cols.clone() {
                    dq[i * d + t] += ds * c.k[j * d + t];
                    dkm[j * d + t] += ds * c.q[i * d + t];
                }
            }
        }
    }

    let mut dx = dr1;
    for (off, g) in [(o.wq, &dq), (o.wk, &dkm), (o.wv, &dv)] {
        add_at_b(&c.input, g, nodes, d, d, &mut grad[off..off + d * d]);
        add_a_bt(g, &p[off..off + d * d], nodes, d, d, &mut dx);
    }
    dx
}

fn accumulate(grad: &mut [f64], off: usize, g: &[f64]) {
    for (t, x) in grad[off..off + g.len()].iter_mut().zip(g) {
        *t += x;
    }
}

pub(crate) fn encode_with(
    params: &[f64],
    offsets: &Offsets,
    arch: &ArchConfig,
    features: &[f64],
) -> Result<Encoded> {
    let d = arch.embed_dim;
    let nodes = features.len() / STATIC_FEATURES;
    let mut x = vec![0.0; nodes * d];
    matmul(
        features,
        &params[offsets.embed_w..offsets.embed_w + STATIC_FEATURES * d],
        nodes,
        STATIC_FEATURES,
        d,
        &mut x,
    );
    add_row_bias(&mut x, &params[offsets.embed_b..offsets.embed_b + d]);
    let mut layers = Vec::with_capacity(arch.layers);
    for lo in &offsets.layers {
        let (out, cache) = block_forward(params, lo, arch, x, nodes);
        layers.push(cache);
        x = out;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite node embedding".into()));
    }
    Ok(Encoded {
        nodes,
        dim: d,
        embeddings: x,
        features: features.to_vec(),
        layers,
    })
}

/// Back-propagates `d_embeddings` through the encoder into `grad`.
pub(crate) fn encode_backward(
    params: &[f64],
    offsets: &Offsets,
    arch: &ArchConfig,
    enc: &Encoded,
    d_embeddings: Vec<f64>,
    grad: &mut [f64],
) {
    let d = arch.embed_dim;
    let mut g = d_embeddings;
    for (lo, cache) in offsets.layers.iter().zip(&enc.layers).rev() {
        g = block_backward(params, lo, arch, cache, &g, grad);
    }
    add_at_b(
        &enc.features,
        &g,
        enc.nodes,
        STATIC_FEATURES,
        d,
        &mut grad[offsets.embed_w..offsets.embed_w + STATIC_FEATURES * d],
    );
    add_col_sums(&g, &mut grad[offsets.embed_b..offsets.embed_b + d]);
}
