//! Perturbation evaluations: per-item scores, per-task aggregation into
//! tables, and per-step reward curves grouped by trajectory length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::perturb::{materialize, perturb_instruction, plan_trajectory, InstrPerturbKind, TrajPerturbKind};
use crate::scoring::{CurveMode, Normalization, RewardModel};
use crate::world::scene::mix_seed;
use crate::world::{Episode, TaskId};
use crate::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CORRECT: &str = "correct";
pub const GT: &str = "GT";

/// Variant names of the trajectory table, in column order.
pub fn trajectory_variants() -> Vec<&'static str> {
    std::iter::once(CORRECT).chain(TrajPerturbKind::ALL.iter().map(|k| k.name())).collect()
}

/// Variant names of the instruction table, in column order.
pub fn instruction_variants() -> Vec<&'static str> {
    std::iter::once(GT).chain(InstrPerturbKind::ALL.iter().map(|k| k.name())).collect()
}

/// One scored (instruction, trajectory) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub task: TaskId,
    pub seed: u64,
    pub variant: String,
    pub log_prob: f64,
    pub n_tokens: usize,
}

impl ItemScore {
    pub fn value(&self, norm: Normalization) -> f64 {
        match norm {
            Normalization::Sum => self.log_prob,
            Normalization::PerToken if self.n_tokens > 0 => self.log_prob / self.n_tokens as f64,
            Normalization::PerToken => 0.0,
        }
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize) -> Tensor {
    Tensor::from_vec(rows.len(), cols, rows.concat())
}

fn check_inputs(episodes: &[Episode], embeddings: &[Tensor]) -> Result<()> {
    if episodes.len() != embeddings.len() {
        return Err(Error::DimMismatch(format!("{} episodes but {} embedded trajectories", episodes.len(), embeddings.len())));
    }
    Ok(())
}

/// Perturbed embedding sequences of one episode. The pool of `PT_Len` and
/// `PT_Inc` is the other episodes of the same task; perturbing embeddings
/// row-wise equals encoding perturbed frames because the encoder is per-frame.
pub fn perturbed_embeddings(
    episodes: &[Episode],
    embeddings: &[Tensor],
    index: usize,
    seed: u64,
) -> Result<Vec<(TrajPerturbKind, Tensor)>> {
    check_inputs(episodes, embeddings)?;
    let task = episodes[index].task();
    let members: Vec<usize> = (0..episodes.len()).filter(|&i| episodes[i].task() == task).collect();
    let own = members.iter().position(|&i| i == index);
    let lens: Vec<usize> = members.iter().map(|&i| embeddings[i].rows).collect();
    let pool: Vec<Vec<Vec<f64>>> = members.iter().map(|&i| rows_of(&embeddings[i])).collect();
    let vs = &embeddings[index];
    let rows = rows_of(vs);
    TrajPerturbKind::ALL
        .iter()
        .map(|&kind| {
            let s = mix_seed(&[seed, episodes[index].trajectory.seed, kind as u64]);
            let plan = plan_trajectory(vs.rows, own, &lens, kind, s)?;
            Ok((kind, from_rows(&materialize(&plan, &rows, &pool), vs.cols)))
        })
        .collect()
}

/// Scores every episode's instruction against its own trajectory and the
/// four trajectory perturbations.
pub fn score_trajectory_variants(rm: &RewardModel, episodes: &[Episode], embeddings: &[Tensor], seed: u64) -> Result<Vec<ItemScore>> {
    check_inputs(episodes, embeddings)?;
    let mut out = Vec::with_capacity(episodes.len() * 5);
    for (i, ep) in episodes.iter().enumerate() {
        let toks = &ep.instruction.tokens;
        let item = |variant: &str, log_prob| ItemScore {
            task: ep.task(),
            seed: ep.trajectory.seed,
            variant: variant.to_string(),
            log_prob,
            n_tokens: toks.len(),
        };
        out.push(item(CORRECT, rm.score_trajectory(toks, &embeddings[i])?));
        for (kind, vs) in perturbed_embeddings(episodes, embeddings, i, seed)? {
            out.push(item(kind.name(), rm.score_trajectory(toks, &vs)?));
        }
    }
    Ok(out)
}

/// Scores the ground-truth instruction and its four perturbations against
/// each episode's own trajectory.
pub fn score_instruction_variants(rm: &RewardModel, episodes: &[Episode], embeddings: &[Tensor], seed: u64) -> Result<Vec<ItemScore>> {
    check_inputs(episodes, embeddings)?;
    let mut out = Vec::with_capacity(episodes.len() * 5);
    for (ep, vs) in episodes.iter().zip(embeddings) {
        let mut push = |variant: &str, toks: &[usize]| -> Result<()> {
            out.push(ItemScore {
                task: ep.task(),
                seed: ep.trajectory.seed,
                variant: variant.to_string(),
                log_prob: rm.score_trajectory(toks, vs)?,
                n_tokens: toks.len(),
            });
            Ok(())
        };
        push(GT, &ep.instruction.tokens)?;
        for kind in InstrPerturbKind::ALL {
            let s = mix_seed(&[seed, ep.trajectory.seed, 16 + kind as u64]);
            let pi = perturb_instruction(&ep.instruction, &ep.trajectory.task, &ep.trajectory.scene, kind, s)?;
            push(kind.name(), &pi.tokens)?;
        }
    }
    Ok(out)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskId,
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: String,
    pub normalization: Normalization,
    /// Smallest cell size in the report.
    pub n_per_cell: usize,
    pub rows: Vec<ReportRow>,
    pub format_version: u32,
}

impl EvalReport {
    pub fn cell(&self, task: TaskId, variant: &str) -> Option<&Cell> {
        self.rows.iter().find(|r| r.task == task)?.cells.get(variant)
    }
}

/// Groups item scores by task and variant. Every cell must hold at least
/// `n_min` items.
pub fn aggregate(scores: &[ItemScore], norm: Normalization, n_min: usize, protocol: &str) -> Result<EvalReport> {
    let mut groups: BTreeMap<TaskId, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.task).or_default().entry(s.variant.clone()).or_default().push(s.value(norm));
    }
    let mut rows = Vec::with_capacity(groups.len());
    let mut n_per_cell = usize::MAX;
    for (task, variants) in groups {
        let mut cells = BTreeMap::new();
        for (variant, values) in variants {
            if values.len() < n_min {
                return Err(Error::EmptyCell { task: task.to_string(), variant, n: values.len(), min: n_min });
            }
            let (mean, stddev) = mean_std(&values);
            if !mean.is_finite() {
                return Err(Error::BadConfig(format!("non-finite mean in cell {task}/{variant}")));
            }
            n_per_cell = n_per_cell.min(values.len());
            cells.insert(variant, Cell { mean, stddev, n: values.len() });
        }
        rows.push(ReportRow { task, cells });
    }
    Ok(EvalReport {
        protocol: protocol.to_string(),
        normalization: norm,
        n_per_cell: if rows.is_empty() { 0 } else { n_per_cell },
        rows,
        format_version: REPORT_FORMAT_VERSION,
    })
}

/// Mean and per-step spread of the curves of one (task, variant, length).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub task: TaskId,
    pub variant: String,
    pub length: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    /// Individual curves, kept when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveBundle {
    pub protocol: String,
    pub mode: CurveMode,
    pub normalization: Normalization,
    pub series: Vec<CurveSeries>,
    pub format_version: u32,
}

impl CurveBundle {
    pub fn get(&self, task: TaskId, variant: &str, length: usize) -> Option<&CurveSeries> {
        self.series.iter().find(|s| s.task == task && s.variant == variant && s.length == length)
    }
}

/// Raw per-step reward curves for correct and trajectory-perturbed items,
/// averaged per (task, variant, trajectory length).
pub fn eval_curves(
    rm: &RewardModel,
    episodes: &[Episode],
    embeddings: &[Tensor],
    seed: u64,
    norm: Normalization,
    keep_items: bool,
    protocol: &str,
) -> Result<CurveBundle> {
    check_inputs(episodes, embeddings)?;
    let mut groups: BTreeMap<(TaskId, usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let variants = trajectory_variants();
    let col = |name: &str| variants.iter().position(|v| *v == name).expect("known variant");
    for (i, ep) in episodes.iter().enumerate() {
        let mut trajs = vec![(CORRECT, embeddings[i].clone())];
        trajs.extend(perturbed_embeddings(episodes, embeddings, i, seed)?.into_iter().map(|(k, t)| (k.name(), t)));
        for (variant, vs) in trajs {
            let c = rm.reward_curve(&ep.instruction, &vs, CurveMode::Raw, norm)?;
            groups.entry((ep.task(), col(variant), vs.rows)).or_default().push(c.values);
        }
    }
    let series = groups
        .into_iter()
        .map(|((task, v, length), curves)| {
            let (mean, stddev) = (0..length)
                .map(|t| mean_std(&curves.iter().map(|c| c[t]).collect::<Vec<_>>()))
                .unzip();
            CurveSeries {
                task,
                variant: variants[v].to_string(),
                length,
                n: curves.len(),
                mean,
                stddev,
                items: if keep_items { curves } else { Vec::new() },
            }
        })
        .collect();
    Ok(CurveBundle { protocol: protocol.to_string(), mode: CurveMode::Raw, normalization: norm, series, format_version: REPORT_FORMAT_VERSION })
}
