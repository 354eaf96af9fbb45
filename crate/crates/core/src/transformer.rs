//! Pre-norm causal self-attention block shared by the language model and the
//! interface, with a taped path for training and a cached path for inference.

use rand::Rng;

use crate::autograd::{gelu, matmul, Graph, Tensor, Var};
use crate::params::{normal, ones, zeros};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

pub const BLOCK_TENSORS: [&str; 12] =
    ["ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2"];

impl BlockParams {
    pub fn init(d: usize, hidden: usize, std: f64, out_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            ln1_g: ones(d),
            ln1_b: zeros(d),
            w_qkv: normal(d, 3 * d, std, rng),
            b_qkv: zeros(3 * d),
            w_o: normal(d, d, out_std, rng),
            b_o: zeros(d),
            ln2_g: ones(d),
            ln2_b: zeros(d),
            w_1: normal(d, hidden, std, rng),
            b_1: zeros(hidden),
            w_2: normal(hidden, d, out_std, rng),
            b_2: zeros(d),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o, &self.ln2_g, &self.ln2_b,
            &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_qkv, &mut self.b_qkv, &mut self.w_o, &mut self.b_o,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w_1, &mut self.b_1, &mut self.w_2, &mut self.b_2,
        ]
    }

    pub fn d_model(&self) -> usize {
        self.w_o.rows
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> BlockVars {
        let mut vars = self.tensors().map(|t| g.leaf(t, trainable)).into_iter();
        let mut next = || vars.next().expect("twelve block tensors");
        BlockVars {
            ln1_g: next(),
            ln1_b: next(),
            w_qkv: next(),
            b_qkv: next(),
            w_o: next(),
            b_o: next(),
            ln2_g: next(),
            ln2_b: next(),
            w_1: next(),
            b_1: next(),
            w_2: next(),
            b_2: next(),
        }
    }

    /// Inference step: `x` holds the new rows, `cache` the keys and values of
    /// all earlier rows. Returns the block output for the new rows.
    pub fn forward_cached(&self, x: &Tensor, n_heads: usize, cache: &mut KvCache) -> Tensor {
        let d = self.d_model();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = layer_norm(x, &self.ln1_g, &self.ln1_b);
        let qkv = affine(&a, &self.w_qkv, &self.b_qkv);
        let past = cache.len;
        for r in 0..x.rows {
            let row = qkv.row(r);
            cache.k.extend_from_slice(&row[d..2 * d]);
            cache.v.extend_from_slice(&row[2 * d..3 * d]);
        }
        cache.len += x.rows;
        let mut att = Tensor::zeros(x.rows, d);
        let mut scores = vec![0.0; cache.len];
        for r in 0..x.rows {
            let q = &qkv.row(r)[..d];
            let upto = past + r + 1;
            for h in 0..n_heads {
                let qs = &q[h * dh..(h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores[..upto].iter_mut().enumerate() {
                    let k = &cache.k[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = qs.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in &mut scores[..upto] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att.row_mut(r)[h * dh..(h + 1) * dh];
                for (j, s) in scores[..upto].iter().enumerate() {
                    let w = s / sum;
                    let v = &cache.v[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
            }
        }
        let mut y = affine(&att, &self.w_o, &self.b_o);
        y.add_assign(x);
        let m = layer_norm(&y, &self.ln2_g, &self.ln2_b);
        let mut hdn = affine(&m, &self.w_1, &self.b_1);
        hdn.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = affine(&hdn, &self.w_2, &self.b_2);
        out.add_assign(&y);
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

impl BlockVars {
    pub fn vars(&self) -> [Var; 12] {
        [
            self.ln1_g, self.ln1_b, self.w_qkv, self.b_qkv, self.w_o, self.b_o, self.ln2_g, self.ln2_b, self.w_1,
            self.b_1, self.w_2, self.b_2,
        ]
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, n_heads: usize) -> Var {
        let d = g.shape(x).1;
        let dh = d / n_heads;
        let a = g.layer_norm(x, self.ln1_g, self.ln1_b);
        let qkv = g.matmul(a, self.w_qkv);
        let qkv = g.add_row(qkv, self.b_qkv);
        let heads: Vec<Var> = (0..n_heads)
            .map(|h| {
                let q = g.col_slice(qkv, h * dh, dh);
                let k = g.col_slice(qkv, d + h * dh, dh);
                let v = g.col_slice(qkv, 2 * d + h * dh, dh);
                let s = g.matmul_bt(q, k);
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let p = g.causal_softmax(s);
                g.matmul(p, v)
            })
            .collect();
        let att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let o = g.matmul(att, self.w_o);
        let o = g.add_row(o, self.b_o);
        let y = g.add(x, o);
        let m = g.layer_norm(y, self.ln2_g, self.ln2_b);
        let m = g.matmul(m, self.w_1);
        let m = g.add_row(m, self.b_1);
        let m = g.gelu(m);
        let m = g.matmul(m, self.w_2);
        let m = g.add_row(m, self.b_2);
        g.add(y, m)
    }
}

/// Keys and values of the rows processed so far by one block.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub len: usize,
}

pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = matmul(x, w);
    for r in 0..y.rows {
        for (o, bb) in y.row_mut(r).iter_mut().zip(&b.data) {
            *o += bb;
        }
    }
    y
}

pub fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let d = x.cols;
    let mut out = Tensor::zeros(x.rows, d);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * rs * g.data[c] + b.data[c];
        }
    }
    out
}
