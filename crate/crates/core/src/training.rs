//! Interface training under the maximum-likelihood, contrastive and
//! success-detection objectives. The language model and the encoder stay
//! frozen unless joint encoder training is requested.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::encoder::{patchify, EncoderParams, EncoderVars};
use crate::interface::{InterfaceParams, InterfaceVars};
use crate::lm::{LmParams, LmVars};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::perturb::{materialize, plan_trajectory, FramePlan, FrameSrc, TrajPerturbKind};
use crate::scoring::{
    assemble_context, embed_items_on_graph, log_likelihood_on_graph, success_suffix_tokens, ContextMode, Item,
    Normalization,
};
use crate::vocab::Vocab;
use crate::world::scene::mix_seed;
use crate::world::{Episode, Frame, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Ml,
    Contrastive,
    Success,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(Self::Ml),
            "contrastive" => Ok(Self::Contrastive),
            "success" => Ok(Self::Success),
            _ => Err(Error::BadConfig(format!("unknown protocol `{s}`"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ml => "ml",
            Self::Contrastive => "contrastive",
            Self::Success => "success",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub protocol: Protocol,
    /// Defaults to 8 for `ml` and 4 otherwise.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    pub max_steps: usize,
    pub clamp_bound: f64,
    pub clamp_basis: Normalization,
    /// Probability of a repeated-frame negative; reversal otherwise.
    pub negative_mix: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            protocol: Protocol::Ml,
            batch_size: None,
            lr: 3e-4,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            max_steps: 5000,
            clamp_bound: 0.5,
            clamp_basis: Normalization::PerToken,
            negative_mix: 0.5,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or(match self.protocol {
            Protocol::Ml => 8,
            _ => 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch() == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if !(self.clamp_bound > 0.0) {
            return Err(Error::BadConfig("clamp_bound must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_mix) {
            return Err(Error::BadConfig("negative_mix must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::BadConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Repeat-frame (probability `mix`) or reversal plan over an `len`-frame trajectory.
pub fn negative_plan(len: usize, seed: u64, mix: f64) -> Result<FramePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x4e45]));
    let kind = if rng.gen_bool(mix.clamp(0.0, 1.0)) { TrajPerturbKind::Rep } else { TrajPerturbKind::Rev };
    plan_trajectory(len, None, &[], kind, rng.gen())
}

pub fn sample_negative(pos: &Trajectory, seed: u64, mix: f64) -> Result<Trajectory> {
    let plan = negative_plan(pos.frames.len(), seed, mix)?;
    Ok(Trajectory {
        frames: materialize::<Frame, &[Frame]>(&plan, &pos.frames, &[]),
        task: pos.task.clone(),
        scene: pos.scene.clone(),
        success: false,
        seed: pos.seed,
        states: Vec::new(),
    })
}

fn plan_rows(plan: &FramePlan) -> Vec<usize> {
    plan.iter()
        .map(|s| match s {
            FrameSrc::Own(i) => *i,
            FrameSrc::Pool { .. } => unreachable!("negatives reuse their own frames"),
        })
        .collect()
}

/// One positive training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub tokens: Vec<usize>,
    /// `t × d_v` frozen visual embeddings.
    pub vs: Tensor,
    /// Raw frames, kept only for joint encoder training.
    pub frames: Vec<Frame>,
}

/// Successful episodes paired with their embeddings.
pub fn positive_items(episodes: &[Episode], embeddings: &[Tensor], keep_frames: bool) -> Result<Vec<TrainItem>> {
    if episodes.len() != embeddings.len() {
        return Err(Error::DimMismatch(format!("{} episodes but {} embedded trajectories", episodes.len(), embeddings.len())));
    }
    Ok(episodes
        .iter()
        .zip(embeddings)
        .filter(|(ep, _)| ep.trajectory.success)
        .map(|(ep, vs)| TrainItem {
            tokens: ep.instruction.tokens.clone(),
            vs: vs.clone(),
            frames: if keep_frames { ep.trajectory.frames.clone() } else { Vec::new() },
        })
        .collect())
}

/// Frozen language model, encoder and the interface being trained.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub lm: LmParams,
    pub encoder: EncoderParams,
    pub interface: InterfaceParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub pos_term: f64,
    pub neg_term: f64,
    pub aux_term: f64,
    pub lr: f64,
}

/// Batch loss, its terms, and gradients for the interface parameters (and
/// the encoder's when it is trained jointly).
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub pos_term: f64,
    pub neg_term: f64,
    pub aux_term: f64,
    pub interface_grads: Vec<Tensor>,
    pub encoder_grads: Option<Vec<Tensor>>,
}

struct Bound {
    lm: LmVars,
    iface: InterfaceVars,
    enc: Option<EncoderVars>,
}

fn visual(g: &mut Graph<'_>, b: &Bound, item: &TrainItem, patch: usize) -> Var {
    match &b.enc {
        Some(ev) => {
            let rows: Vec<Var> = item
                .frames
                .iter()
                .map(|f| {
                    let p = g.constant(patchify(f, patch));
                    ev.forward(g, p)
                })
                .collect();
            g.concat_rows(&rows)
        }
        None => g.constant(item.vs.clone()),
    }
}

fn scalar(g: &Graph<'_>, v: Var) -> f64 {
    g.value(v).data[0]
}

/// Records one protocol's batch loss and differentiates it. `negative_seeds`
/// must have one entry per item for the contrastive and success protocols.
pub fn batch_loss(models: &Models, batch: &[&TrainItem], hyper: &TrainHyper, negative_seeds: &[u64], train_encoder: bool) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::BadConfig("empty batch".into()));
    }
    let vocab = Vocab::standard();
    let mut g = Graph::new();
    let b = Bound {
        lm: models.lm.bind(&mut g, false),
        iface: models.interface.bind(&mut g, true),
        enc: train_encoder.then(|| models.encoder.bind(&mut g, true)),
    };
    let inv_b = 1.0 / batch.len() as f64;
    let (mut pos_terms, mut neg_terms, mut aux_terms) = (Vec::new(), Vec::new(), Vec::new());
    for (k, item) in batch.iter().enumerate() {
        let vs = visual(&mut g, &b, item, models.encoder.config.patch_size);
        let t = g.shape(vs).0;
        let n = item.tokens.len();
        let per_tok = if hyper.clamp_basis == Normalization::PerToken { 1.0 / n.max(1) as f64 } else { 1.0 };
        let soft = b.iface.forward(&mut g, vs);
        match hyper.protocol {
            Protocol::Ml => {
                let ctx = assemble_context(t, t, ContextMode::Induction, None)?;
                let lp = log_likelihood_on_graph(&mut g, &b.lm, &ctx.items, &item.tokens, soft)?;
                pos_terms.push(g.scale(lp, -1.0));
            }
            Protocol::Contrastive => {
                let plan = negative_plan(t, negative_seeds[k], hyper.negative_mix)?;
                let neg_vs = g.gather_rows(vs, &plan_rows(&plan));
                let neg_soft = b.iface.forward(&mut g, neg_vs);
                let ctx = assemble_context(t, t, ContextMode::Induction, None)?;
                let lp = log_likelihood_on_graph(&mut g, &b.lm, &ctx.items, &item.tokens, soft)?;
                let ln = log_likelihood_on_graph(&mut g, &b.lm, &ctx.items, &item.tokens, neg_soft)?;
                pos_terms.push(g.scale(lp, -per_tok));
                let ln = g.scale(ln, per_tok);
                neg_terms.push(g.floor_at(ln, -hyper.clamp_bound));
            }
            Protocol::Success => {
                let plan = negative_plan(t, negative_seeds[k], hyper.negative_mix)?;
                let neg_vs = g.gather_rows(vs, &plan_rows(&plan));
                let neg_soft = b.iface.forward(&mut g, neg_vs);
                let ctx = assemble_context(t, t, ContextMode::Induction, None)?;
                // [ctx, instruction, suffix, TRUE] in one pass scores both the
                // instruction and the success token.
                let mut toks = item.tokens.clone();
                toks.extend(success_suffix_tokens());
                toks.push(vocab.true_id());
                let (li, lt) = positive_success_terms(&mut g, &b.lm, &ctx.items, &toks, n, soft)?;
                pos_terms.push(g.scale(li, -1.0));
                aux_terms.push(g.scale(lt, -1.0));
                let mut neg = toks.clone();
                *neg.last_mut().expect("suffix") = vocab.false_id();
                let lf = tail_log_prob(&mut g, &b.lm, &ctx.items, &neg, neg_soft)?;
                neg_terms.push(g.scale(lf, -1.0));
            }
        }
    }
    let pos_sum = g.add_scalars(&pos_terms);
    let mut parts = vec![pos_sum];
    let neg_sum = (!neg_terms.is_empty()).then(|| g.add_scalars(&neg_terms));
    let aux_sum = (!aux_terms.is_empty()).then(|| g.add_scalars(&aux_terms));
    parts.extend(neg_sum);
    parts.extend(aux_sum);
    let total = g.add_scalars(&parts);
    let loss = g.scale(total, inv_b);
    let mut grads = g.backward(loss);
    let take = |gr: &mut crate::autograd::Gradients, vars: Vec<Var>, like: Vec<&Tensor>| -> Vec<Tensor> {
        vars.iter()
            .zip(like)
            .map(|(&v, t)| gr.take(v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect()
    };
    let interface_grads =
        take(&mut grads, b.iface.vars(), models.interface.named().into_iter().map(|(_, t)| t).collect());
    let encoder_grads = b
        .enc
        .as_ref()
        .map(|ev| take(&mut grads, ev.vars(), models.encoder.named().into_iter().map(|(_, t)| t).collect()));
    Ok(LossOutput {
        loss: scalar(&g, loss),
        pos_term: scalar(&g, pos_sum) * inv_b,
        neg_term: neg_sum.map_or(0.0, |v| scalar(&g, v) * inv_b),
        aux_term: aux_sum.map_or(0.0, |v| scalar(&g, v) * inv_b),
        interface_grads,
        encoder_grads,
    })
}

/// `(log P(instruction | ctx), log P(TRUE | ctx, instruction, suffix))` from one pass.
fn positive_success_terms(
    g: &mut Graph<'_>,
    lm: &LmVars,
    ctx: &[Item],
    toks: &[usize],
    n_instr: usize,
    soft: Var,
) -> Result<(Var, Var)> {
    let mut all = ctx.to_vec();
    all.extend(toks[..toks.len() - 1].iter().map(|&t| Item::Token(t)));
    let x = embed_items_on_graph(g, lm, &all, soft);
    let h = lm.hidden(g, x)?;
    let mut rows: Vec<usize> = (0..n_instr).map(|k| ctx.len() - 1 + k).collect();
    rows.push(all.len() - 1);
    let logits = lm.logits_at(g, h, &rows);
    let instr_picks: Vec<(usize, usize)> = (0..n_instr).map(|k| (k, toks[k])).collect();
    let instr = if n_instr == 0 {
        g.constant(Tensor::zeros(1, 1))
    } else {
        let lp = g.pick_log_probs(logits, &instr_picks);
        g.sum_all(lp)
    };
    let tv = g.pick_log_probs(logits, &[(n_instr, *toks.last().expect("suffix"))]);
    Ok((instr, tv))
}

/// Log-probability of the last of `toks` after `ctx` and the earlier `toks`.
fn tail_log_prob(g: &mut Graph<'_>, lm: &LmVars, ctx: &[Item], toks: &[usize], soft: Var) -> Result<Var> {
    let mut all = ctx.to_vec();
    all.extend(toks[..toks.len() - 1].iter().map(|&t| Item::Token(t)));
    let x = embed_items_on_graph(g, lm, &all, soft);
    let h = lm.hidden(g, x)?;
    let logits = lm.logits_at(g, h, &[all.len() - 1]);
    Ok(g.pick_log_probs(logits, &[(0, *toks.last().expect("non-empty"))]))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub lm_checksum: String,
    pub encoder_checksum: String,
}

/// Runs `hyper.max_steps` optimizer steps over `items`. Batches come from
/// seeded shuffles; negatives are resampled every step.
pub fn train(items: &[TrainItem], models: &mut Models, hyper: &TrainHyper, train_encoder: bool, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    hyper.validate()?;
    if items.is_empty() {
        return Err(Error::BadConfig("no positive training items".into()));
    }
    if train_encoder && items.iter().any(|i| i.frames.is_empty()) {
        return Err(Error::BadConfig("joint encoder training needs frames".into()));
    }
    let lm_before = models.lm.checksum();
    let enc_before = models.encoder.checksum();
    let adam_cfg = AdamConfig { lr: hyper.lr, warmup_steps: hyper.warmup_steps, clip_norm: hyper.clip_norm, ..AdamConfig::default() };
    let mut adam = Adam::new(adam_cfg.clone());
    let mut enc_adam = Adam::new(adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let bs = hyper.batch();
    let mut metrics = Vec::with_capacity(hyper.max_steps);
    for step in 0..hyper.max_steps {
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&items[order[cursor]]);
            cursor += 1;
        }
        let seeds: Vec<u64> = (0..bs).map(|k| mix_seed(&[hyper.seed, step as u64, k as u64])).collect();
        let out = batch_loss(models, &batch, hyper, &seeds, train_encoder)?;
        if !out.loss.is_finite() {
            return Err(Error::NaNLoss(step));
        }
        let m = StepMetrics {
            step,
            loss: out.loss,
            pos_term: out.pos_term,
            neg_term: out.neg_term,
            aux_term: out.aux_term,
            lr: adam.current_lr(),
        };
        on_step(&m);
        metrics.push(m);
        adam.step(models.interface.tensors_mut(), &out.interface_grads);
        models.interface.round_to_f32();
        if let Some(eg) = &out.encoder_grads {
            enc_adam.step(models.encoder.tensors_mut(), eg);
            models.encoder.round_to_f32();
        }
    }
    let lm_after = models.lm.checksum();
    assert_eq!(lm_before, lm_after, "language model parameters changed during interface training");
    let enc_after = models.encoder.checksum();
    if !train_encoder {
        assert_eq!(enc_before, enc_after, "frozen encoder parameters changed");
    }
    Ok(TrainOutcome { metrics, lm_checksum: lm_after, encoder_checksum: enc_after })
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for m in metrics {
        w.serialize(m).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::interface::InterfaceConfig;
    use crate::lm::LmConfig;
    use crate::params::normal;
    use crate::world::dataset::make_episode;
    use crate::world::TaskId;

    const V: usize = 16;

    fn models(seed: u64) -> Models {
        let lm_cfg = LmConfig { d_model: 8, n_layers: 1, n_heads: 2, max_seq: 48, vocab_size: V };
        let if_cfg = InterfaceConfig { d_v: 4, d_model: 8, n_heads: 2, mlp_hidden: 12, max_traj_len: 8 };
        let enc_cfg = EncoderConfig { d_v: 4, patch_size: 4, hidden: 3, frame_width: 8, frame_height: 8, ..Default::default() };
        let mut lm = LmParams::init(&lm_cfg, seed).unwrap();
        lm.tok_emb = normal(V, 8, 0.7, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let mut interface = InterfaceParams::init(&if_cfg, seed).unwrap();
        for t in interface.tensors_mut() {
            let n = normal(t.rows, t.cols, 0.3, &mut ChaCha8Rng::seed_from_u64(seed + t.len() as u64));
            t.add_assign(&n);
        }
        Models { lm, encoder: EncoderParams::init(&enc_cfg, seed).unwrap(), interface }
    }

    fn item(t: usize, n: usize, seed: u64) -> TrainItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrainItem { tokens: (0..n).map(|_| rng.gen_range(6..V)).collect(), vs: normal(t, 4, 1.0, &mut rng), frames: vec![] }
    }

    fn hyper(protocol: Protocol, basis: Normalization) -> TrainHyper {
        TrainHyper { protocol, clamp_basis: basis, clamp_bound: 3.0, ..TrainHyper::default() }
    }

    fn grad_check(protocol: Protocol, basis: Normalization, seed: u64) {
        let m = models(seed);
        let items = [item(3, 3, seed), item(2, 4, seed + 7)];
        let batch: Vec<&TrainItem> = items.iter().collect();
        let h = hyper(protocol, basis);
        let seeds = [seed, seed + 1];
        let out = batch_loss(&m, &batch, &h, &seeds, false).unwrap();
        let eps = 1e-5;
        for (ti, g) in out.interface_grads.iter().enumerate() {
            for i in 0..g.len() {
                let f = |d: f64| {
                    let mut mm = m.clone();
                    mm.interface.tensors_mut()[ti].data[i] += d;
                    batch_loss(&mm, &batch, &h, &seeds, false).unwrap().loss
                };
                let num = (f(eps) - f(-eps)) / (2.0 * eps);
                let a = g.data[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-4 || (a - num).abs() < 1e-9, "{protocol} tensor {ti}[{i}]: {a} vs {num}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        grad_check(Protocol::Ml, Normalization::Sum, 1);
        grad_check(Protocol::Contrastive, Normalization::PerToken, 2);
        grad_check(Protocol::Contrastive, Normalization::Sum, 3);
        grad_check(Protocol::Success, Normalization::PerToken, 4);
    }

    #[test]
    fn uniform_model_losses() {
        let mut m = models(1);
        m.lm.zero_all();
        let it = item(3, 3, 1);
        let ln16 = (V as f64).ln();
        let seeds = [0];
        let ml = batch_loss(&m, &[&it], &hyper(Protocol::Ml, Normalization::Sum), &seeds, false).unwrap();
        assert!((ml.loss - 3.0 * ln16).abs() < 1e-9);
        let s = batch_loss(&m, &[&it], &hyper(Protocol::Success, Normalization::Sum), &seeds, false).unwrap();
        assert!((s.loss - 5.0 * ln16).abs() < 1e-9);
        assert!(s.pos_term >= 0.0 && s.neg_term >= 0.0 && s.aux_term >= 0.0);
    }

    #[test]
    fn single_item_ml_is_negative_score() {
        let m = models(3);
        let it = item(4, 5, 9);
        let ml = batch_loss(&m, &[&it], &hyper(Protocol::Ml, Normalization::Sum), &[0], false).unwrap();
        let rm = crate::scoring::RewardModel::new(m.lm.clone(), m.interface.clone()).unwrap();
        let s = rm.score_trajectory(&it.tokens, &it.vs).unwrap();
        assert!((ml.loss + s).abs() < 1e-10);
    }

    #[test]
    fn saturated_clamp_passes_no_gradient() {
        let m = models(5);
        let it = item(3, 4, 2);
        let mut h = hyper(Protocol::Contrastive, Normalization::PerToken);
        h.clamp_bound = 1e-3;
        let full = batch_loss(&m, &[&it], &h, &[11], false).unwrap();
        assert_eq!(full.neg_term, -1e-3, "negative term sits on the floor");
        let ml = batch_loss(&m, &[&it], &hyper(Protocol::Ml, Normalization::Sum), &[11], false).unwrap();
        // positive term alone, on the per-token scale
        let n = it.tokens.len() as f64;
        for (a, b) in full.interface_grads.iter().zip(&ml.interface_grads) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negatives_preserve_length() {
        let ep = make_episode(TaskId::T1, 3, (8, 8), 0.0).unwrap();
        for seed in 0..10 {
            let rev = sample_negative(&ep.trajectory, seed, 0.0).unwrap();
            let expect: Vec<_> = ep.trajectory.frames.iter().rev().cloned().collect();
            assert_eq!(rev.frames, expect);
            let rep = sample_negative(&ep.trajectory, seed, 1.0).unwrap();
            assert_eq!(rep.len(), ep.trajectory.len());
            assert!(rep.frames.iter().all(|f| *f == rep.frames[0]));
            assert_eq!(sample_negative(&ep.trajectory, seed, 0.5).unwrap().len(), ep.trajectory.len());
        }
        let mut short = ep.trajectory.clone();
        short.frames.truncate(1);
        assert!(matches!(sample_negative(&short, 0, 0.5), Err(Error::TooShort(1))));
    }

    #[test]
    fn training_is_deterministic_and_respects_frozen_parts() {
        let items: Vec<TrainItem> = (0..5).map(|i| item(2 + i % 2, 3, i as u64)).collect();
        let h = TrainHyper { max_steps: 6, protocol: Protocol::Contrastive, ..TrainHyper::default() };
        let mut a = models(9);
        let init = a.clone();
        let zero = train(&items, &mut a.clone(), &TrainHyper { max_steps: 0, ..h.clone() }, false, |_| {}).unwrap();
        assert!(zero.metrics.is_empty());
        let out = train(&items, &mut a, &h, false, |_| {}).unwrap();
        let mut b = init.clone();
        train(&items, &mut b, &h, false, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.interface, init.interface);
        assert_eq!(a.lm, init.lm);
        assert_eq!(out.lm_checksum, init.lm.checksum());
        assert_eq!(out.metrics.len(), 6);
    }
}
