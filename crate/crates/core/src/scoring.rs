//! Instruction-induction contexts, instruction log-likelihoods, dense reward
//! curves and success probabilities.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_at, Graph, Tensor, Var};
use crate::interface::{interface_forward, InterfaceParams};
use crate::lm::{lm_forward, EmbeddedSequence, LmParams, LmVars};
use crate::vocab::Vocab;
use crate::world::Instruction;
use crate::{Error, Result};

pub const PREAMBLE: &str = "task : infer instruction given trajectory";
pub const PROMPT: &str = "instruction :";
pub const SUCCESS_SUFFIX: &str = "success :";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Induction,
    SuccessDetection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    Raw,
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Sum,
    PerToken,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "per-token" | "per_token" => Ok(Self::PerToken),
            _ => Err(Error::BadConfig(format!("unknown normalization `{s}`"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::PerToken => "per_token",
        })
    }
}

/// One context position: a vocabulary token or row `k` of the interfaced trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Item {
    Token(usize),
    Soft(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub preamble: Range<usize>,
    pub traj: Range<usize>,
    pub prompt: Range<usize>,
    pub instruction: Option<Range<usize>>,
    pub success_suffix: Option<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub items: Vec<Item>,
    pub layout: Layout,
    pub mode: ContextMode,
    pub t: usize,
}

fn fixed_tokens(text: &str) -> Vec<usize> {
    Vocab::standard().tokenize(text).expect("context phrases are in the vocabulary")
}

pub fn preamble_tokens() -> Vec<usize> {
    let v = Vocab::standard();
    let mut ids = vec![v.bos()];
    ids.extend(fixed_tokens(PREAMBLE));
    ids.push(v.newline());
    ids
}

pub fn prompt_tokens() -> Vec<usize> {
    let mut ids = vec![Vocab::standard().newline()];
    ids.extend(fixed_tokens(PROMPT));
    ids
}

pub fn success_suffix_tokens() -> Vec<usize> {
    let mut ids = vec![Vocab::standard().newline()];
    ids.extend(fixed_tokens(SUCCESS_SUFFIX));
    ids
}

/// Builds `ctx_t` over a trajectory of `traj_len` interfaced items. Success
/// mode needs the instruction, which it places before the success suffix.
pub fn assemble_context(traj_len: usize, t: usize, mode: ContextMode, instruction: Option<&[usize]>) -> Result<Context> {
    if t == 0 || t > traj_len {
        return Err(Error::BadT { t, len: traj_len });
    }
    let mut items: Vec<Item> = preamble_tokens().into_iter().map(Item::Token).collect();
    let preamble = 0..items.len();
    items.extend((0..t).map(Item::Soft));
    let traj = preamble.end..items.len();
    items.extend(prompt_tokens().into_iter().map(Item::Token));
    let prompt = traj.end..items.len();
    let (mut instr_range, mut suffix) = (None, None);
    if mode == ContextMode::SuccessDetection {
        let instr = instruction.ok_or_else(|| Error::BadConfig("success context needs an instruction".into()))?;
        items.extend(instr.iter().map(|&i| Item::Token(i)));
        instr_range = Some(prompt.end..items.len());
        let s = items.len();
        items.extend(success_suffix_tokens().into_iter().map(Item::Token));
        suffix = Some(s..items.len());
    }
    Ok(Context {
        items,
        layout: Layout { preamble, traj, prompt, instruction: instr_range, success_suffix: suffix },
        mode,
        t,
    })
}

impl Context {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Embeds the context; `soft` holds the interfaced trajectory rows.
    pub fn embed(&self, lm: &LmParams, soft: &Tensor) -> Result<EmbeddedSequence> {
        embed_items(&self.items, lm, soft)
    }
}

pub fn embed_items(items: &[Item], lm: &LmParams, soft: &Tensor) -> Result<EmbeddedSequence> {
    let mut seq = EmbeddedSequence::new(lm.d_model());
    for &it in items {
        match it {
            Item::Token(id) => seq.append(&lm.embed_tokens(&[id])?),
            Item::Soft(k) => {
                if k >= soft.rows {
                    return Err(Error::BadT { t: k + 1, len: soft.rows });
                }
                seq.push_soft(&Tensor::from_vec(1, soft.cols, soft.row(k).to_vec()))?;
            }
        }
    }
    Ok(seq)
}

/// Records the embedding of `items` on a graph, taking soft rows from `soft`.
pub fn embed_items_on_graph(g: &mut Graph<'_>, lm: &LmVars, items: &[Item], soft: Var) -> Var {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let j = (i..items.len()).find(|&j| std::mem::discriminant(&items[j]) != std::mem::discriminant(&items[i]));
        let j = j.unwrap_or(items.len());
        match items[i] {
            Item::Token(_) => {
                let ids: Vec<usize> = items[i..j]
                    .iter()
                    .map(|it| match it {
                        Item::Token(id) => *id,
                        Item::Soft(_) => unreachable!(),
                    })
                    .collect();
                parts.push(lm.embed(g, &ids));
            }
            Item::Soft(k0) => {
                let contiguous = items[i..j].iter().enumerate().all(|(o, it)| *it == Item::Soft(k0 + o));
                if contiguous {
                    parts.push(g.row_slice(soft, k0, j - i));
                } else {
                    for it in &items[i..j] {
                        if let Item::Soft(k) = it {
                            parts.push(g.row_slice(soft, *k, 1));
                        }
                    }
                }
            }
        }
        i = j;
    }
    g.concat_rows(&parts)
}

/// Sum of `log P(tokens[n] | items, tokens[..n])` recorded on a graph, as a
/// `1 × 1` node. `tokens` must be non-empty.
pub fn log_likelihood_on_graph(g: &mut Graph<'_>, lm: &LmVars, items: &[Item], tokens: &[usize], soft: Var) -> Result<Var> {
    let mut all = items.to_vec();
    all.extend(tokens.iter().map(|&t| Item::Token(t)));
    let x = embed_items_on_graph(g, lm, &all, soft);
    let h = lm.hidden(g, x)?;
    let rows: Vec<usize> = (0..tokens.len()).map(|n| items.len() + n - 1).collect();
    let logits = lm.logits_at(g, h, &rows);
    let picks: Vec<(usize, usize)> = tokens.iter().enumerate().map(|(n, &t)| (n, t)).collect();
    let lp = g.pick_log_probs(logits, &picks);
    Ok(g.sum_all(lp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCurve {
    pub values: Vec<f64>,
    pub mode: CurveMode,
    pub normalization: Normalization,
}

/// A frozen language model together with a trained interface.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub lm: LmParams,
    pub interface: InterfaceParams,
}

impl RewardModel {
    pub fn new(lm: LmParams, interface: InterfaceParams) -> Result<Self> {
        if lm.d_model() != interface.config.d_model {
            return Err(Error::DimMismatch(format!(
                "interface outputs {} but the language model expects {}",
                interface.config.d_model,
                lm.d_model()
            )));
        }
        Ok(Self { lm, interface })
    }

    /// Interfaced trajectory for `t × d_v` visual embeddings.
    pub fn interfaced(&self, vs: &Tensor) -> Result<Tensor> {
        interface_forward(vs, &self.interface)
    }

    /// Eq.-1 log-likelihood of `tokens` after an induction context, in one pass.
    pub fn score_tokens(&self, tokens: &[usize], ctx: &Context, soft: &Tensor) -> Result<f64> {
        if ctx.mode != ContextMode::Induction {
            return Err(Error::BadConfig("instructions are scored against induction contexts".into()));
        }
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let mut seq = ctx.embed(&self.lm, soft)?;
        seq.append(&self.lm.embed_tokens(&tokens[..tokens.len() - 1])?);
        let mut st = self.lm.start();
        let h = self.lm.extend(&mut st, &seq.vectors)?;
        let first = ctx.len() - 1;
        let sub = Tensor::from_vec(tokens.len(), h.cols, h.data[first * h.cols..].to_vec());
        let logits = self.lm.logits(&sub);
        Ok(tokens.iter().enumerate().map(|(n, &t)| log_softmax_at(logits.row(n), t)).sum())
    }

    pub fn score_instruction(&self, instr: &Instruction, ctx: &Context, soft: &Tensor) -> Result<f64> {
        self.score_tokens(&instr.tokens, ctx, soft)
    }

    /// Score against the full trajectory.
    pub fn score_trajectory(&self, tokens: &[usize], vs: &Tensor) -> Result<f64> {
        let soft = self.interfaced(vs)?;
        let ctx = assemble_context(soft.rows, soft.rows, ContextMode::Induction, None)?;
        self.score_tokens(tokens, &ctx, &soft)
    }

    /// Raw per-prefix scores reusing the cached preamble and trajectory prefix.
    fn raw_curve_cached(&self, tokens: &[usize], vs: &Tensor) -> Result<Vec<f64>> {
        let soft = self.interfaced(vs)?;
        if soft.rows == 0 {
            return Err(Error::BadT { t: 1, len: 0 });
        }
        if tokens.is_empty() {
            return Ok(vec![0.0; soft.rows]);
        }
        let mut st = self.lm.start();
        self.lm.extend(&mut st, &self.lm.embed_tokens(&preamble_tokens())?.vectors)?;
        let mut tail = prompt_tokens();
        tail.extend_from_slice(&tokens[..tokens.len() - 1]);
        let tail = self.lm.embed_tokens(&tail)?.vectors;
        let n_prompt = prompt_tokens().len();
        let mut out = Vec::with_capacity(soft.rows);
        for t in 0..soft.rows {
            self.lm.extend(&mut st, &Tensor::from_vec(1, soft.cols, soft.row(t).to_vec()))?;
            let mut branch = st.clone();
            let h = self.lm.extend(&mut branch, &tail)?;
            let sub = Tensor::from_vec(tokens.len(), h.cols, h.data[(n_prompt - 1) * h.cols..].to_vec());
            let logits = self.lm.logits(&sub);
            out.push(tokens.iter().enumerate().map(|(n, &tok)| log_softmax_at(logits.row(n), tok)).sum());
        }
        Ok(out)
    }

    /// Reference curve: every prefix is interfaced and scored from scratch.
    pub fn raw_curve_independent(&self, tokens: &[usize], vs: &Tensor) -> Result<Vec<f64>> {
        (1..=vs.rows)
            .map(|t| {
                let prefix = Tensor::from_vec(t, vs.cols, vs.data[..t * vs.cols].to_vec());
                let soft = self.interfaced(&prefix)?;
                let ctx = assemble_context(t, t, ContextMode::Induction, None)?;
                let mut seq = ctx.embed(&self.lm, &soft)?;
                seq.append(&self.lm.embed_tokens(tokens)?);
                let logits = lm_forward(&seq, &self.lm)?;
                Ok(tokens.iter().enumerate().map(|(n, &tok)| log_softmax_at(logits.row(ctx.len() - 1 + n), tok)).sum())
            })
            .collect()
    }

    pub fn reward_curve(&self, instr: &Instruction, vs: &Tensor, mode: CurveMode, norm: Normalization) -> Result<RewardCurve> {
        let raw = self.raw_curve_cached(&instr.tokens, vs)?;
        Ok(shape_curve(&raw, instr.tokens.len(), mode, norm))
    }

    /// `P(true) / (P(true) + P(false))` after the success suffix.
    pub fn success_prob(&self, tokens: &[usize], vs: &Tensor) -> Result<f64> {
        let soft = self.interfaced(vs)?;
        let ctx = assemble_context(soft.rows, soft.rows, ContextMode::SuccessDetection, Some(tokens))?;
        let seq = ctx.embed(&self.lm, &soft)?;
        let mut st = self.lm.start();
        let h = self.lm.extend(&mut st, &seq.vectors)?;
        let last = Tensor::from_vec(1, h.cols, h.row(h.rows - 1).to_vec());
        let logits = self.lm.logits(&last);
        let v = Vocab::standard();
        let (lt, lf) = (logits.data[v.true_id()], logits.data[v.false_id()]);
        let m = lt.max(lf);
        let (et, ef) = ((lt - m).exp(), (lf - m).exp());
        Ok(et / (et + ef))
    }
}

/// Applies the curve mode and normalization to raw prefix scores.
pub fn shape_curve(raw: &[f64], n_tokens: usize, mode: CurveMode, norm: Normalization) -> RewardCurve {
    let div = match norm {
        Normalization::Sum => 1.0,
        Normalization::PerToken => n_tokens.max(1) as f64,
    };
    let scaled: Vec<f64> = raw.iter().map(|v| v / div).collect();
    let values = match mode {
        CurveMode::Raw => scaled,
        CurveMode::Delta => {
            (0..scaled.len()).map(|t| if t == 0 { 0.0 } else { scaled[t] - scaled[t - 1] }).collect()
        }
    };
    RewardCurve { values, mode, normalization: norm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interface::InterfaceConfig;
    use crate::lm::LmConfig;
    use crate::params::{normal, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> RewardModel {
        let lm_cfg = LmConfig { d_model: 16, n_layers: 2, n_heads: 2, max_seq: 64, vocab_size: Vocab::standard().len() };
        let if_cfg = InterfaceConfig { d_v: 6, d_model: 16, n_heads: 2, mlp_hidden: 24, max_traj_len: 8 };
        let mut lm = LmParams::init(&lm_cfg, seed).unwrap();
        // larger weights make the check sensitive
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        lm.tok_emb = normal(lm.tok_emb.rows, 16, 0.5, &mut rng);
        RewardModel::new(lm, InterfaceParams::init(&if_cfg, seed).unwrap()).unwrap()
    }

    #[test]
    fn layout_tiles_the_sequence() {
        for t in 1..=5 {
            let c = assemble_context(5, t, ContextMode::SuccessDetection, Some(&[7, 8, 9])).unwrap();
            let l = &c.layout;
            assert_eq!(l.preamble.start, 0);
            assert_eq!(l.preamble.end, l.traj.start);
            assert_eq!(l.traj.len(), t);
            assert_eq!(l.traj.end, l.prompt.start);
            let i = l.instruction.clone().unwrap();
            let s = l.success_suffix.clone().unwrap();
            assert_eq!((l.prompt.end, i.end, s.end), (i.start, s.start, c.len()));
        }
        assert!(matches!(assemble_context(3, 0, ContextMode::Induction, None), Err(Error::BadT { .. })));
        assert!(matches!(assemble_context(3, 4, ContextMode::Induction, None), Err(Error::BadT { .. })));
    }

    #[test]
    fn token_portion_detokenizes_to_the_fixed_phrases() {
        let c = assemble_context(2, 2, ContextMode::Induction, None).unwrap();
        let toks: Vec<usize> = c.items.iter().filter_map(|i| if let Item::Token(t) = i { Some(*t) } else { None }).collect();
        let text = Vocab::standard().detokenize(&toks).unwrap();
        assert_eq!(text, "<bos> task : infer instruction given trajectory <nl> <nl> instruction :");
    }

    #[test]
    fn single_pass_matches_prefix_chain() {
        let m = model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let t = rng.gen_range(1..5);
            let vs = normal(t, 6, 1.0, &mut rng);
            let n = rng.gen_range(0..6);
            let toks: Vec<usize> = (0..n).map(|_| rng.gen_range(6..m.lm.config.vocab_size)).collect();
            let soft = m.interfaced(&vs).unwrap();
            let ctx = assemble_context(t, t, ContextMode::Induction, None).unwrap();
            let got = m.score_tokens(&toks, &ctx, &soft).unwrap();
            let mut want = 0.0;
            for k in 0..n {
                let mut seq = ctx.embed(&m.lm, &soft).unwrap();
                seq.append(&m.lm.embed_tokens(&toks[..k]).unwrap());
                let logits = lm_forward(&seq, &m.lm).unwrap();
                want += log_softmax_at(logits.row(seq.len() - 1), toks[k]);
            }
            assert!((got - want).abs() < 1e-9);
            assert!(got <= 0.0);
        }
    }

    #[test]
    fn cached_curve_matches_independent() {
        let m = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vs = normal(5, 6, 1.0, &mut rng);
        let toks = [20, 30, 40, 50];
        let a = m.raw_curve_cached(&toks, &vs).unwrap();
        let b = m.raw_curve_independent(&toks, &vs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(*a.last().unwrap(), m.score_trajectory(&toks, &vs).unwrap());
    }

    #[test]
    fn uniform_model_closed_forms() {
        let mut m = model(5);
        m.lm.zero_all();
        let v = m.lm.config.vocab_size as f64;
        let vs = normal(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = m.score_trajectory(&[10, 11, 12], &vs).unwrap();
        assert!((s - 3.0 * (1.0 / v).ln()).abs() < 1e-9);
        assert_eq!(m.success_prob(&[10, 11, 12], &vs).unwrap(), 0.5);
    }

    #[test]
    fn curve_shapes() {
        let raw = [-9.0, -7.0, -4.0];
        let d = shape_curve(&raw, 3, CurveMode::Delta, Normalization::Sum);
        assert_eq!(d.values, vec![0.0, 2.0, 3.0]);
        assert_eq!(d.values.iter().sum::<f64>(), raw[2] - raw[0]);
        let p = shape_curve(&raw, 3, CurveMode::Raw, Normalization::PerToken);
        assert_eq!(p.values, vec![-3.0, -7.0 / 3.0, -4.0 / 3.0]);
    }

    #[test]
    fn empty_instruction_scores_zero() {
        let m = model(6);
        let vs = normal(2, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.score_trajectory(&[], &vs).unwrap(), 0.0);
    }

    #[test]
    fn taped_likelihood_matches() {
        let m = model(7);
        let vs = normal(3, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let toks = [12, 13, 14, 15];
        let want = m.score_trajectory(&toks, &vs).unwrap();
        let mut g = Graph::new();
        let lv = m.lm.bind(&mut g, false);
        let iv = m.interface.bind(&mut g, true);
        let x = g.constant(vs.clone());
        let soft = iv.forward(&mut g, x);
        let ctx = assemble_context(3, 3, ContextMode::Induction, None).unwrap();
        let l = log_likelihood_on_graph(&mut g, &lv, &ctx.items, &toks, soft).unwrap();
        assert!((g.value(l).data[0] - want).abs() < 1e-10);
    }
}
