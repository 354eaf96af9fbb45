//! Small decoder-only language model over the closed instruction vocabulary.
//! Its forward pass accepts token embeddings interleaved with externally
//! supplied soft vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::params::{normal, ones, zeros, ParamSet};
use crate::transformer::{layer_norm, BlockParams, BlockVars, KvCache, BLOCK_TENSORS};
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { d_model: 128, n_layers: 2, n_heads: 4, max_seq: 256, vocab_size: Vocab::standard().len() }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_seq == 0 || self.vocab_size == 0 {
            return Err(Error::BadConfig("n_layers, max_seq and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    /// Token embeddings, also the output head.
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

impl LmParams {
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let out_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        Ok(Self {
            config: config.clone(),
            tok_emb: normal(config.vocab_size, d, 0.02, &mut rng),
            pos_emb: normal(config.max_seq, d, 0.01, &mut rng),
            blocks: (0..config.n_layers).map(|_| BlockParams::init(d, 4 * d, 0.02, out_std, &mut rng)).collect(),
            lnf_g: ones(d),
            lnf_b: zeros(d),
        })
    }

    /// Every tensor zero, including layer-norm gains.
    pub fn zeros(config: &LmConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        p.zero_all();
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> LmVars {
        let tok_emb = g.leaf(&self.tok_emb, trainable);
        let pos_emb = g.leaf(&self.pos_emb, trainable);
        let blocks = self.blocks.iter().map(|b| b.bind(g, trainable)).collect();
        let lnf_g = g.leaf(&self.lnf_g, trainable);
        let lnf_b = g.leaf(&self.lnf_b, trainable);
        LmVars { tok_emb, pos_emb, blocks, lnf_g, lnf_b, n_heads: self.config.n_heads, max_seq: self.config.max_seq }
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<EmbeddedSequence> {
        let d = self.d_model();
        let mut seq = EmbeddedSequence::new(d);
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::BadId(id));
            }
            seq.vectors.data.extend_from_slice(self.tok_emb.row(id));
            seq.vectors.rows += 1;
            seq.tags.push(ItemTag::Token(id));
        }
        Ok(seq)
    }

    pub fn start(&self) -> LmState {
        LmState { caches: vec![KvCache::default(); self.config.n_layers] }
    }

    /// Runs `x` (new rows of already-embedded items) on top of `state` and
    /// returns their final hidden states.
    pub fn extend(&self, state: &mut LmState, x: &Tensor) -> Result<Tensor> {
        let d = self.d_model();
        if x.cols != d {
            return Err(Error::DimMismatch(format!("sequence width {} vs d_model {d}", x.cols)));
        }
        let start = state.len();
        if start + x.rows > self.config.max_seq {
            return Err(Error::TooLong { len: start + x.rows, max: self.config.max_seq });
        }
        let mut h = x.clone();
        for r in 0..h.rows {
            for (v, p) in h.row_mut(r).iter_mut().zip(self.pos_emb.row(start + r)) {
                *v += p;
            }
        }
        for (block, cache) in self.blocks.iter().zip(&mut state.caches) {
            h = block.forward_cached(&h, self.config.n_heads, cache);
        }
        Ok(layer_norm(&h, &self.lnf_g, &self.lnf_b))
    }

    pub fn logits(&self, hidden: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(hidden.rows, self.config.vocab_size);
        for r in 0..hidden.rows {
            let h = hidden.row(r);
            for (v, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = h.iter().zip(self.tok_emb.row(v)).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

impl ParamSet for LmParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                v.push((format!("block{i}.{name}"), t));
            }
        }
        v.push(("lnf_g".into(), &self.lnf_g));
        v.push(("lnf_b".into(), &self.lnf_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.lnf_g);
        v.push(&mut self.lnf_b);
        v
    }
}

/// Incremental inference state (one key/value cache per layer).
#[derive(Clone, Debug)]
pub struct LmState {
    caches: Vec<KvCache>,
}

impl LmState {
    pub fn len(&self) -> usize {
        self.caches.first().map_or(0, |c| c.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemTag {
    Token(usize),
    Soft,
}

/// Rows of d_model vectors, each tagged with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence {
    pub vectors: Tensor,
    pub tags: Vec<ItemTag>,
}

impl EmbeddedSequence {
    pub fn new(d: usize) -> Self {
        Self { vectors: Tensor::zeros(0, d), tags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn push_soft(&mut self, rows: &Tensor) -> Result<()> {
        if rows.cols != self.vectors.cols {
            return Err(Error::DimMismatch(format!("soft item width {} vs {}", rows.cols, self.vectors.cols)));
        }
        self.vectors.data.extend_from_slice(&rows.data);
        self.vectors.rows += rows.rows;
        self.tags.extend(std::iter::repeat_n(ItemTag::Soft, rows.rows));
        Ok(())
    }

    pub fn append(&mut self, other: &EmbeddedSequence) {
        self.vectors.data.extend_from_slice(&other.vectors.data);
        self.vectors.rows += other.vectors.rows;
        self.tags.extend_from_slice(&other.tags);
    }
}

/// Full-sequence logits (L × V) through the inference path.
pub fn lm_forward(seq: &EmbeddedSequence, params: &LmParams) -> Result<Tensor> {
    let mut st = params.start();
    let h = params.extend(&mut st, &seq.vectors)?;
    Ok(params.logits(&h))
}

/// Language model leaves bound onto a [`Graph`].
pub struct LmVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    n_heads: usize,
    max_seq: usize,
}

impl LmVars {
    /// Leaves in parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.push(self.lnf_g);
        v.push(self.lnf_b);
        v
    }

    pub fn embed(&self, g: &mut Graph<'_>, ids: &[usize]) -> Var {
        g.gather_rows(self.tok_emb, ids)
    }

    /// Final hidden states of an embedded sequence.
    pub fn hidden(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let len = g.shape(x).0;
        if len > self.max_seq {
            return Err(Error::TooLong { len, max: self.max_seq });
        }
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(self.pos_emb, &positions);
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            h = b.forward(g, h, self.n_heads);
        }
        Ok(g.layer_norm(h, self.lnf_g, self.lnf_b))
    }

    /// Logits at the given hidden rows only.
    pub fn logits_at(&self, g: &mut Graph<'_>, hidden: Var, rows: &[usize]) -> Var {
        let h = g.gather_rows(hidden, rows);
        g.matmul_bt(h, self.tok_emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;

    fn tiny() -> LmConfig {
        LmConfig { d_model: 16, n_layers: 2, n_heads: 4, max_seq: 32, vocab_size: 11 }
    }

    fn random_seq(p: &LmParams, n: usize, seed: u64) -> EmbeddedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = p.embed_tokens(&[1, 2, 3]).unwrap();
        s.push_soft(&normal(n, p.d_model(), 1.0, &mut rng)).unwrap();
        s.append(&p.embed_tokens(&[4, 5]).unwrap());
        s
    }

    #[test]
    fn causal_prefix_invariance() {
        let p = LmParams::init(&tiny(), 3).unwrap();
        let s = random_seq(&p, 4, 1);
        let full = lm_forward(&s, &p).unwrap();
        for j in 1..s.len() {
            let mut pre = s.clone();
            pre.vectors = Tensor::from_vec(j, 16, s.vectors.data[..j * 16].to_vec());
            pre.tags.truncate(j);
            let part = lm_forward(&pre, &p).unwrap();
            assert_eq!(part.data[..], full.data[..j * 11]);
        }
    }

    #[test]
    fn soft_item_changes_only_later_positions() {
        let mut p = LmParams::init(&tiny(), 3).unwrap();
        for b in &mut p.blocks {
            b.w_o = normal(16, 16, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        }
        let s = random_seq(&p, 3, 2);
        let a = lm_forward(&s, &p).unwrap();
        let k = 4;
        let mut s2 = s.clone();
        s2.vectors.row_mut(k)[0] += 0.5;
        let b = lm_forward(&s2, &p).unwrap();
        for r in 0..s.len() {
            let same = a.row(r) == b.row(r);
            assert_eq!(same, r < k, "row {r}");
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = LmParams::zeros(&tiny()).unwrap();
        let s = p.embed_tokens(&[0, 3, 7]).unwrap();
        let logits = lm_forward(&s, &p).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taped_and_cached_paths_agree() {
        let p = LmParams::init(&tiny(), 5).unwrap();
        let s = random_seq(&p, 2, 3);
        let want = lm_forward(&s, &p).unwrap();
        let mut g = Graph::new();
        let lv = p.bind(&mut g, false);
        let x = g.constant(s.vectors.clone());
        let h = lv.hidden(&mut g, x).unwrap();
        let rows: Vec<usize> = (0..s.len()).collect();
        let l = lv.logits_at(&mut g, h, &rows);
        for (a, b) in g.value(l).data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let p = LmParams::init(&tiny(), 5).unwrap();
        assert!(matches!(p.embed_tokens(&[11]), Err(Error::BadId(11))));
        let long = p.embed_tokens(&[1; 33]).unwrap();
        assert!(matches!(lm_forward(&long, &p), Err(Error::TooLong { len: 33, max: 32 })));
        let bad = LmConfig { n_heads: 3, ..tiny() };
        assert!(LmParams::init(&bad, 0).is_err());
    }

    #[test]
    fn embedding_rows_match_table() {
        let p = LmParams::init(&LmConfig::default(), 1).unwrap();
        let v = Vocab::standard();
        let s = p.embed_tokens(&[v.true_id(), v.false_id()]).unwrap();
        assert_eq!(s.vectors.row(0), p.tok_emb.row(v.true_id()));
        assert_eq!(s.vectors.row(1), p.tok_emb.row(v.false_id()));
        assert!(p.embed_tokens(&[]).unwrap().is_empty());
    }
}
