//! Text-only language-model pretraining on instruction sequences, held-out
//! perplexity, and a smoothed bigram baseline.
//!
//! Besides bare instructions the corpus holds instruction-induction contexts
//! whose trajectory slot is filled with a caption of the instruction's
//! attribute words, and success-detection contexts with matching or
//! mismatched captions. A caption occupies one to four slot positions; each
//! position holds the mean embedding of a group of caption words, so a
//! single soft item can carry several attributes. The model never sees
//! visual input here.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_at, Graph, Tensor};
use crate::lm::LmParams;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::scoring::{preamble_tokens, prompt_tokens, success_suffix_tokens};
use crate::vocab::Vocab;
use crate::world::attrs::ANGLES;
use crate::world::{Color, Direction, Instruction, Shape, Texture};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    /// Held-out per-token perplexity the run must reach.
    pub ppl_threshold: f64,
    /// Sampling weights of bare, caption, success-true and success-false sequences.
    pub mix: [f64; 4],
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            ppl_threshold: 3.0,
            mix: [0.25, 0.45, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if self.mix.iter().any(|w| !(*w >= 0.0)) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::BadConfig("sequence mix weights must be non-negative and not all zero".into()));
        }
        if !(self.lr > 0.0) || !(self.ppl_threshold >= 1.0) {
            return Err(Error::BadConfig("lr must be positive and ppl_threshold at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqKind {
    Bare,
    Caption,
    SuccessTrue,
    SuccessFalse,
}

/// A token sequence and which positions are prediction targets. Positions
/// listed in `bags` are embedded as the mean of the listed tokens'
/// embeddings; their entry in `tokens` is `<pad>` and never a target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmExample {
    pub tokens: Vec<usize>,
    pub target: Vec<bool>,
    pub bags: Vec<(usize, Vec<usize>)>,
}

impl LmExample {
    fn new() -> Self {
        Self { tokens: Vec::new(), target: Vec::new(), bags: Vec::new() }
    }

    fn push(&mut self, toks: &[usize], target: bool) {
        self.tokens.extend_from_slice(toks);
        self.target.extend(std::iter::repeat_n(target, toks.len()));
    }

    fn push_bag(&mut self, words: &[usize]) {
        self.bags.push((self.tokens.len(), words.to_vec()));
        self.push(&[Vocab::standard().pad()], false);
    }

    /// Input rows through the inference path.
    pub fn embed(&self, lm: &LmParams) -> Result<Tensor> {
        let mut x = lm.embed_tokens(&self.tokens)?.vectors;
        for (pos, words) in &self.bags {
            let row = x.row_mut(*pos);
            row.iter_mut().for_each(|v| *v = 0.0);
            for &w in words {
                for (r, e) in row.iter_mut().zip(lm.tok_emb.row(w)) {
                    *r += e;
                }
            }
            row.iter_mut().for_each(|v| *v /= words.len() as f64);
        }
        Ok(x)
    }

    pub fn n_targets(&self) -> usize {
        self.target.iter().filter(|&&t| t).count()
    }
}

fn is_attribute(word: &str) -> bool {
    Color::from_word(word).is_some()
        || Texture::from_word(word).is_some()
        || Shape::from_word(word).is_some()
        || Direction::from_word(word).is_some()
        || word.parse::<u16>().is_ok_and(|a| ANGLES.contains(&a))
}

/// The instruction's attribute words, in order.
pub fn caption_tokens(tokens: &[usize]) -> Vec<usize> {
    let v = Vocab::standard();
    tokens.iter().copied().filter(|&t| v.word(t).is_ok_and(is_attribute)).collect()
}

/// `<bos> instruction <eos>`; every position after `<bos>` is a target.
pub fn bare_example(instr: &[usize]) -> LmExample {
    let v = Vocab::standard();
    let mut ex = LmExample::new();
    ex.push(&[v.bos()], false);
    ex.push(instr, true);
    ex.push(&[v.eos()], true);
    ex
}

/// Induction or success context whose trajectory slot holds one position per
/// group of caption words.
pub fn caption_example(instr: &[usize], groups: &[Vec<usize>], kind: SeqKind) -> LmExample {
    let v = Vocab::standard();
    let mut ex = LmExample::new();
    ex.push(&preamble_tokens(), false);
    for grp in groups {
        ex.push_bag(grp);
    }
    ex.push(&prompt_tokens(), false);
    match kind {
        SeqKind::Bare => return bare_example(instr),
        SeqKind::Caption => {
            ex.push(instr, true);
            ex.push(&[v.eos()], true);
        }
        SeqKind::SuccessTrue | SeqKind::SuccessFalse => {
            ex.push(instr, kind == SeqKind::SuccessTrue);
            ex.push(&success_suffix_tokens(), false);
            ex.push(&[if kind == SeqKind::SuccessTrue { v.true_id() } else { v.false_id() }], true);
        }
    }
    ex
}

/// Draws one training sequence for `instrs[i]`. Mismatched captions come from
/// another instruction with a different caption.
pub fn sample_example(instrs: &[Instruction], i: usize, mix: &[f64; 4], rng: &mut impl Rng) -> LmExample {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut kind = SeqKind::SuccessFalse;
    for (w, k) in mix.iter().zip([SeqKind::Bare, SeqKind::Caption, SeqKind::SuccessTrue, SeqKind::SuccessFalse]) {
        if u < *w {
            kind = k;
            break;
        }
        u -= w;
    }
    let toks = &instrs[i].tokens;
    let own = caption_tokens(toks);
    match kind {
        SeqKind::Bare => bare_example(toks),
        SeqKind::SuccessFalse => {
            for _ in 0..16 {
                let other = caption_tokens(&instrs[rng.gen_range(0..instrs.len())].tokens);
                if sorted(&other) != sorted(&own) {
                    return caption_example(toks, &group_words(&other, rng), kind);
                }
            }
            caption_example(toks, &group_words(&own, rng), SeqKind::Caption)
        }
        k => caption_example(toks, &group_words(&own, rng), k),
    }
}

fn sorted(words: &[usize]) -> Vec<usize> {
    let mut w = words.to_vec();
    w.sort_unstable();
    w
}

/// Splits `words` into one to four non-empty groups at random.
pub fn group_words(words: &[usize], rng: &mut impl Rng) -> Vec<Vec<usize>> {
    if words.is_empty() {
        return vec![vec![Vocab::standard().pad()]];
    }
    let n = rng.gen_range(1..=words.len().min(4));
    let mut groups = vec![Vec::new(); n];
    let mut shuffled = words.to_vec();
    shuffled.shuffle(rng);
    for (k, w) in shuffled.into_iter().enumerate() {
        let g = if k < n { k } else { rng.gen_range(0..n) };
        groups[g].push(w);
    }
    groups.shuffle(rng);
    groups
}

/// Summed negative log-likelihood over the example's targets, via the
/// inference path.
pub fn example_nll(lm: &LmParams, ex: &LmExample) -> Result<f64> {
    let x = ex.embed(lm)?;
    let mut st = lm.start();
    let h = lm.extend(&mut st, &x)?;
    let logits = lm.logits(&h);
    Ok((1..ex.tokens.len()).filter(|&j| ex.target[j]).map(|j| -log_softmax_at(logits.row(j - 1), ex.tokens[j])).sum())
}

/// Per-token perplexity of bare instruction sequences (instruction tokens
/// and `<eos>` are scored).
pub fn perplexity(lm: &LmParams, instrs: &[Instruction]) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for ins in instrs {
        let ex = bare_example(&ins.tokens);
        nll += example_nll(lm, &ex)?;
        n += ex.n_targets();
    }
    if n == 0 {
        return Err(Error::BadConfig("no held-out instructions".into()));
    }
    Ok((nll / n as f64).exp())
}

fn embed_example(vars: &crate::lm::LmVars, g: &mut Graph<'_>, ex: &LmExample) -> crate::autograd::Var {
    if ex.bags.is_empty() {
        return vars.embed(g, &ex.tokens);
    }
    let mut parts = Vec::new();
    let mut at = 0;
    for (pos, words) in &ex.bags {
        if *pos > at {
            parts.push(vars.embed(g, &ex.tokens[at..*pos]));
        }
        let rows = vars.embed(g, words);
        parts.push(g.mean_rows(rows));
        at = pos + 1;
    }
    if at < ex.tokens.len() {
        parts.push(vars.embed(g, &ex.tokens[at..]));
    }
    g.concat_rows(&parts)
}

fn batch_grads(lm: &LmParams, batch: &[LmExample]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = lm.bind(&mut g, true);
    let mut terms = Vec::with_capacity(batch.len());
    let mut n = 0;
    for ex in batch {
        let x = embed_example(&vars, &mut g, ex);
        let h = vars.hidden(&mut g, x)?;
        let rows: Vec<usize> = (1..ex.tokens.len()).filter(|&j| ex.target[j]).map(|j| j - 1).collect();
        let picks: Vec<(usize, usize)> = rows.iter().enumerate().map(|(k, &r)| (k, ex.tokens[r + 1])).collect();
        let logits = vars.logits_at(&mut g, h, &rows);
        let lp = g.pick_log_probs(logits, &picks);
        terms.push(g.sum_all(lp));
        n += picks.len();
    }
    let total = g.add_scalars(&terms);
    let loss = g.scale(total, -1.0 / n.max(1) as f64);
    let mut grads = g.backward(loss);
    let out = vars.vars().iter().map(|&v| grads.take(v).expect("language model leaf gradient")).collect();
    Ok((g.value(loss).data[0], out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub heldout_ppl: f64,
    pub converged: bool,
}

/// Trains every LM parameter with next-token cross-entropy. A missed
/// perplexity threshold is reported through `converged`, not as an error.
pub fn pretrain_lm(
    lm: &mut LmParams,
    train: &[Instruction],
    heldout: &[Instruction],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::BadConfig("empty pretraining corpus".into()));
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, warmup_steps: cfg.warmup_steps, clip_norm: cfg.clip_norm, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let (mut first, mut last) = (None, f64::NAN);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(sample_example(train, order[cursor], &cfg.mix, &mut rng));
            cursor += 1;
        }
        let (loss, grads) = batch_grads(lm, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NaNLoss(step));
        }
        first.get_or_insert(loss);
        last = loss;
        on_step(step, loss);
        adam.step(lm.tensors_mut(), &grads);
        lm.round_to_f32();
    }
    let heldout_ppl = perplexity(lm, if heldout.is_empty() { train } else { heldout })?;
    Ok(PretrainReport {
        steps: cfg.steps,
        initial_loss: first.unwrap_or(f64::NAN),
        final_loss: last,
        heldout_ppl,
        converged: heldout_ppl <= cfg.ppl_threshold,
    })
}

/// Add-`alpha` smoothed bigram model over bare instruction sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Bigram {
    counts: Vec<Vec<f64>>,
    alpha: f64,
}

impl Bigram {
    pub fn fit(instrs: &[Instruction], vocab_size: usize, alpha: f64) -> Self {
        let mut counts = vec![vec![0.0; vocab_size]; vocab_size];
        for ins in instrs {
            let toks = bare_example(&ins.tokens).tokens;
            for w in toks.windows(2) {
                counts[w[0]][w[1]] += 1.0;
            }
        }
        Self { counts, alpha }
    }

    pub fn log_prob(&self, prev: usize, next: usize) -> f64 {
        let row = &self.counts[prev];
        let v = row.len() as f64;
        ((row[next] + self.alpha) / (row.iter().sum::<f64>() + self.alpha * v)).ln()
    }

    pub fn perplexity(&self, instrs: &[Instruction]) -> f64 {
        let (mut nll, mut n) = (0.0, 0usize);
        for ins in instrs {
            let toks = bare_example(&ins.tokens).tokens;
            for w in toks.windows(2) {
                nll -= self.log_prob(w[0], w[1]);
                n += 1;
            }
        }
        (nll / n as f64).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::world::dataset::{generate_episodes, DatasetConfig};
    use crate::world::TaskId;

    fn instrs(n: usize, seed: u64) -> Vec<Instruction> {
        let cfg = DatasetConfig { tasks: vec![TaskId::T5, TaskId::T6], episodes_per_task: n, seed, split_fraction: 0.5, ..Default::default() };
        let (a, b) = generate_episodes(&cfg).unwrap();
        a.into_iter().chain(b).map(|e| e.instruction).collect()
    }

    fn small_lm(seed: u64) -> LmParams {
        let cfg = LmConfig { d_model: 32, n_layers: 1, n_heads: 2, max_seq: 64, vocab_size: Vocab::standard().len() };
        LmParams::init(&cfg, seed).unwrap()
    }

    #[test]
    fn captions_keep_attribute_words_in_order() {
        let v = Vocab::standard();
        let toks = v.tokenize("put the red polka-dot block into the green pan").unwrap();
        assert_eq!(v.detokenize(&caption_tokens(&toks)).unwrap(), "red polka-dot block green pan");
        let toks = v.tokenize("rotate blue flower by 60 degrees").unwrap();
        assert_eq!(v.detokenize(&caption_tokens(&toks)).unwrap(), "blue flower 60");
    }

    #[test]
    fn example_layouts() {
        let v = Vocab::standard();
        let instr = v.tokenize("rotate blue flower by 60 degrees").unwrap();
        let bare = bare_example(&instr);
        assert_eq!(bare.tokens.len(), instr.len() + 2);
        assert_eq!(bare.n_targets(), instr.len() + 1);
        let cap = vec![caption_tokens(&instr)[..2].to_vec(), caption_tokens(&instr)[2..].to_vec()];
        let f = caption_example(&instr, &cap, SeqKind::SuccessFalse);
        assert_eq!(f.n_targets(), 1);
        assert_eq!(*f.tokens.last().unwrap(), v.false_id());
        let t = caption_example(&instr, &cap, SeqKind::SuccessTrue);
        assert_eq!(t.n_targets(), instr.len() + 1);
        let c = caption_example(&instr, &cap, SeqKind::Caption);
        assert_eq!(c.tokens.len(), preamble_tokens().len() + 2 + prompt_tokens().len() + instr.len() + 1);
        assert_eq!(c.bags[1], (preamble_tokens().len() + 1, vec![v.id("60").unwrap()]));
        let lm = small_lm(0);
        let x = c.embed(&lm).unwrap();
        let pos = preamble_tokens().len();
        for (k, &val) in x.row(pos).iter().enumerate() {
            assert!((val - (lm.tok_emb.get(cap[0][0], k) + lm.tok_emb.get(cap[0][1], k)) / 2.0).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn word_groups_partition_the_caption(n in 0usize..7, seed in 0u64..1000) {
            let words: Vec<usize> = (10..10 + n).collect();
            let groups = group_words(&words, &mut ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert!(!groups.is_empty() && groups.len() <= 4);
            proptest::prop_assert!(groups.iter().all(|g| !g.is_empty()));
            if n > 0 {
                let mut all: Vec<usize> = groups.concat();
                all.sort_unstable();
                proptest::prop_assert_eq!(all, words);
            }
        }
    }

    #[test]
    fn untrained_zero_head_perplexity_is_vocab_size() {
        let mut lm = small_lm(0);
        lm.zero_all();
        let ppl = perplexity(&lm, &instrs(3, 1)).unwrap();
        assert!((ppl - Vocab::standard().len() as f64).abs() < 1e-9);
    }

    #[test]
    fn single_instruction_corpus_is_memorized() {
        let one = vec![instrs(1, 2).remove(0)];
        let mut lm = small_lm(1);
        let cfg = PretrainConfig { steps: 150, batch_size: 4, lr: 3e-3, warmup_steps: 10, mix: [1.0, 0.0, 0.0, 0.0], ..Default::default() };
        let rep = pretrain_lm(&mut lm, &one, &one, &cfg, |_, _| {}).unwrap();
        assert!(rep.heldout_ppl < 1.05, "{rep:?}");
        assert!(rep.converged);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let data = instrs(2, 3);
        let mut lm = small_lm(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<LmExample> = (0..3).map(|i| sample_example(&data, i, &[1.0, 1.0, 1.0, 1.0], &mut rng)).collect();
        let (_, grads) = batch_grads(&lm, &batch).unwrap();
        let n: usize = batch.iter().map(LmExample::n_targets).sum();
        let loss = |lm: &LmParams| batch.iter().map(|ex| example_nll(lm, ex).unwrap()).sum::<f64>() / n as f64;
        // a handful of entries from each of the first tensors
        for ti in [0, 1, 4, 10] {
            for i in [0, 7, 33] {
                let orig = lm.tensors_mut()[ti].data[i];
                lm.tensors_mut()[ti].data[i] = orig + 1e-5;
                let up = loss(&lm);
                lm.tensors_mut()[ti].data[i] = orig - 1e-5;
                let down = loss(&lm);
                lm.tensors_mut()[ti].data[i] = orig;
                let num = (up - down) / 2e-5;
                let a = grads[ti].data[i];
                assert!((a - num).abs() <= 1e-4 * a.abs().max(num.abs()).max(1e-5), "tensor {ti}[{i}]: {a} vs {num}");
            }
        }
    }

    #[test]
    fn bigram_is_normalized_and_fits_its_corpus() {
        let data = instrs(10, 4);
        let v = Vocab::standard().len();
        let bg = Bigram::fit(&data, v, 0.1);
        let s: f64 = (0..v).map(|j| bg.log_prob(1, j).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(bg.perplexity(&data) < Bigram::fit(&[], v, 0.1).perplexity(&data));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let data = instrs(1, 5);
        let mut lm = small_lm(0);
        for cfg in [PretrainConfig { batch_size: 0, ..Default::default() }, PretrainConfig { mix: [0.0; 4], ..Default::default() }] {
            assert!(matches!(pretrain_lm(&mut lm, &data, &data, &cfg, |_, _| {}), Err(Error::BadConfig(_))));
        }
        assert!(matches!(pretrain_lm(&mut lm, &[], &data, &PretrainConfig::default(), |_, _| {}), Err(Error::BadConfig(_))));
    }
}
