//! One-layer causal transformer mapping visual embeddings into the language
//! model's input space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::params::{normal, zeros, ParamSet};
use crate::transformer::{affine, BlockParams, BlockVars, KvCache, BLOCK_TENSORS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceConfig {
    pub d_v: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_traj_len: usize,
}

impl Default for InterfaceConfig {
    fn default() -> Self {
        Self { d_v: 128, d_model: 128, n_heads: 4, mlp_hidden: 512, max_traj_len: 32 }
    }
}

impl InterfaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_model == 0 || self.mlp_hidden == 0 || self.max_traj_len == 0 {
            return Err(Error::BadConfig("interface dimensions must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::BadConfig(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }
}

/// `pe[p][2k] = sin(p / 10000^(2k/d))`, `pe[p][2k+1] = cos(p / 10000^(2k/d))`.
pub fn sinusoid(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, d);
    for p in 0..len {
        for c in 0..d {
            let k = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * k / d as f64);
            pe.data[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterfaceParams {
    pub config: InterfaceConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub block: BlockParams,
}

impl InterfaceParams {
    pub fn init(config: &InterfaceConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        Ok(Self {
            config: config.clone(),
            w_in: normal(config.d_v, d, 1.0 / (config.d_v as f64).sqrt(), &mut rng),
            b_in: zeros(d),
            block: BlockParams::init(d, config.mlp_hidden, 0.02, 0.02, &mut rng),
        })
    }

    fn check(&self, vs: &Tensor) -> Result<()> {
        if vs.cols != self.config.d_v {
            return Err(Error::DimMismatch(format!("visual width {} vs d_v {}", vs.cols, self.config.d_v)));
        }
        if vs.rows > self.config.max_traj_len {
            return Err(Error::TooLong { len: vs.rows, max: self.config.max_traj_len });
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> InterfaceVars {
        let w_in = g.leaf(&self.w_in, trainable);
        let b_in = g.leaf(&self.b_in, trainable);
        InterfaceVars { w_in, b_in, block: self.block.bind(g, trainable), n_heads: self.config.n_heads }
    }
}

impl ParamSet for InterfaceParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("w_in".to_string(), &self.w_in), ("b_in".to_string(), &self.b_in)];
        for (name, t) in BLOCK_TENSORS.iter().zip(self.block.tensors()) {
            v.push((format!("block.{name}"), t));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_in, &mut self.b_in];
        v.extend(self.block.tensors_mut());
        v
    }
}

/// Maps `t × d_v` visual embeddings to `t × d_model` soft items.
pub fn interface_forward(vs: &Tensor, params: &InterfaceParams) -> Result<Tensor> {
    params.check(vs)?;
    let mut x = affine(vs, &params.w_in, &params.b_in);
    x.add_assign(&sinusoid(vs.rows, params.config.d_model));
    Ok(params.block.forward_cached(&x, params.config.n_heads, &mut KvCache::default()))
}

pub struct InterfaceVars {
    pub w_in: Var,
    pub b_in: Var,
    pub block: BlockVars,
    n_heads: usize,
}

impl InterfaceVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_in, self.b_in];
        v.extend(self.block.vars());
        v
    }

    pub fn forward(&self, g: &mut Graph<'_>, vs: Var) -> Var {
        let (t, _) = g.shape(vs);
        let d = g.shape(self.w_in).1;
        let x = g.matmul(vs, self.w_in);
        let x = g.add_row(x, self.b_in);
        let pe = g.constant(sinusoid(t, d));
        let x = g.add(x, pe);
        self.block.forward(g, x, self.n_heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> InterfaceConfig {
        InterfaceConfig { d_v: 5, d_model: 8, n_heads: 2, mlp_hidden: 12, max_traj_len: 8 }
    }

    fn inputs(t: usize, seed: u64) -> Tensor {
        normal(t, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sinusoid_closed_form() {
        let pe = sinusoid(50, 16);
        for p in 0..50 {
            for k in 0..8 {
                let f = (p as f64) / 10000f64.powf(2.0 * k as f64 / 16.0);
                assert!((pe.get(p, 2 * k) - f.sin()).abs() < 1e-12);
                assert!((pe.get(p, 2 * k + 1) - f.cos()).abs() < 1e-12);
            }
        }
        for k in 0..8 {
            assert_eq!(pe.get(0, 2 * k), 0.0);
            assert_eq!(pe.get(0, 2 * k + 1), 1.0);
        }
    }

    #[test]
    fn length_and_causality() {
        let p = InterfaceParams::init(&tiny(), 1).unwrap();
        let full = interface_forward(&inputs(8, 2), &p).unwrap();
        for t in 1..=8 {
            let x = inputs(8, 2);
            let pre = Tensor::from_vec(t, 5, x.data[..t * 5].to_vec());
            let out = interface_forward(&pre, &p).unwrap();
            assert_eq!(out.rows, t);
            assert_eq!(out.data[..], full.data[..t * 8]);
        }
        assert!(matches!(interface_forward(&inputs(9, 2), &p), Err(Error::TooLong { .. })));
        assert!(matches!(interface_forward(&Tensor::zeros(2, 4), &p), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn residual_path_only() {
        let mut p = InterfaceParams::init(&tiny(), 1).unwrap();
        for t in [&mut p.block.w_o, &mut p.block.b_o, &mut p.block.w_1, &mut p.block.b_1, &mut p.block.w_2, &mut p.block.b_2] {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = inputs(4, 3);
        let out = interface_forward(&x, &p).unwrap();
        let mut want = affine(&x, &p.w_in, &p.b_in);
        want.add_assign(&sinusoid(4, 8));
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_frames_changes_output() {
        let p = InterfaceParams::init(&tiny(), 4).unwrap();
        let x = inputs(3, 5);
        let mut y = x.clone();
        let (a, b) = (x.row(0).to_vec(), x.row(2).to_vec());
        y.row_mut(0).copy_from_slice(&b);
        y.row_mut(2).copy_from_slice(&a);
        let ox = interface_forward(&x, &p).unwrap();
        let oy = interface_forward(&y, &p).unwrap();
        assert_ne!(ox, oy);
        // a per-frame map would merely permute the output rows
        let mut permuted = ox.clone();
        permuted.row_mut(0).copy_from_slice(ox.row(2));
        permuted.row_mut(2).copy_from_slice(ox.row(0));
        assert_ne!(permuted, oy);
    }

    #[test]
    fn taped_forward_matches() {
        let p = InterfaceParams::init(&tiny(), 7).unwrap();
        let x = inputs(5, 8);
        let want = interface_forward(&x, &p).unwrap();
        let mut g = Graph::new();
        let iv = p.bind(&mut g, true);
        let xv = g.constant(x);
        let y = iv.forward(&mut g, xv);
        for (a, b) in g.value(y).data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(iv.vars().len(), p.named().len());
    }
}
