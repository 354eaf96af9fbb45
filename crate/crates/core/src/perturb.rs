//! Systematic trajectory and instruction perturbations used to probe whether
//! a reward ranks correct behaviour above near-misses.
//!
//! Trajectory perturbations are expressed as a [`FramePlan`], a list of frame
//! references, so the same plan can be applied to rendered frames or to
//! cached per-frame embeddings.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::Vocab;
use crate::world::attrs::{Shape, ShapeKind};
use crate::world::dataset::Episode;
use crate::world::scene::{mix_seed, Scene, SlotValue, TaskId, TaskSpec};
use crate::world::template::{render_template, Instruction};
use crate::world::Trajectory;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrajPerturbKind {
    #[serde(rename = "PT_Rev")]
    Rev,
    #[serde(rename = "PT_Rep")]
    Rep,
    #[serde(rename = "PT_Len")]
    Len,
    #[serde(rename = "PT_Inc")]
    Inc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstrPerturbKind {
    #[serde(rename = "PI_Obj")]
    Obj,
    #[serde(rename = "PI_Col")]
    Col,
    #[serde(rename = "PI_Tex")]
    Tex,
    #[serde(rename = "PI_Comb")]
    Comb,
}

impl TrajPerturbKind {
    pub const ALL: [TrajPerturbKind; 4] = [Self::Rev, Self::Rep, Self::Len, Self::Inc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rev => "PT_Rev",
            Self::Rep => "PT_Rep",
            Self::Len => "PT_Len",
            Self::Inc => "PT_Inc",
        }
    }
}

impl InstrPerturbKind {
    pub const ALL: [InstrPerturbKind; 4] = [Self::Obj, Self::Col, Self::Tex, Self::Comb];

    pub fn name(self) -> &'static str {
        match self {
            Self::Obj => "PI_Obj",
            Self::Col => "PI_Col",
            Self::Tex => "PI_Tex",
            Self::Comb => "PI_Comb",
        }
    }
}

/// Either kind of perturbation, as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    Traj(TrajPerturbKind),
    Instr(InstrPerturbKind),
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrajPerturbKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .map(|&k| PerturbKind::Traj(k))
            .or_else(|| InstrPerturbKind::ALL.iter().find(|k| k.name() == s).map(|&k| PerturbKind::Instr(k)))
            .ok_or_else(|| Error::BadKind(s.to_string()))
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbKind::Traj(k) => f.write_str(k.name()),
            PerturbKind::Instr(k) => f.write_str(k.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameSrc {
    Own(usize),
    Pool { traj: usize, frame: usize },
}

pub type FramePlan = Vec<FrameSrc>;

fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag]))
}

/// Plans a perturbed trajectory of an `own_len`-frame trajectory.
/// `pool_lens` are the frame counts of the pool trajectories; `exclude` is the
/// pool index of the trajectory itself when it is a pool member.
pub fn plan_trajectory(
    own_len: usize,
    exclude: Option<usize>,
    pool_lens: &[usize],
    kind: TrajPerturbKind,
    seed: u64,
) -> Result<FramePlan> {
    if own_len < 2 {
        return Err(Error::TooShort(own_len));
    }
    let mut rng = rng_for(seed, 0x5052 + kind as u64);
    let others: Vec<usize> = (0..pool_lens.len()).filter(|&i| Some(i) != exclude && pool_lens[i] > 0).collect();
    Ok(match kind {
        TrajPerturbKind::Rev => (0..own_len).rev().map(FrameSrc::Own).collect(),
        TrajPerturbKind::Rep => {
            let k = rng.gen_range(0..own_len);
            vec![FrameSrc::Own(k); own_len]
        }
        TrajPerturbKind::Len => {
            let &traj = others.choose(&mut rng).ok_or(Error::EmptyPool)?;
            let pos = rng.gen_range(0..own_len);
            let frame = rng.gen_range(0..pool_lens[traj]);
            (0..own_len).map(|i| if i == pos { FrameSrc::Pool { traj, frame } } else { FrameSrc::Own(i) }).collect()
        }
        TrajPerturbKind::Inc => {
            let &traj = others.choose(&mut rng).ok_or(Error::EmptyPool)?;
            (0..pool_lens[traj]).map(|frame| FrameSrc::Pool { traj, frame }).collect()
        }
    })
}

/// Applies a plan to any per-frame payload (frames, embeddings, ...).
pub fn materialize<T: Clone, P: AsRef<[T]>>(plan: &[FrameSrc], own: &[T], pool: &[P]) -> Vec<T> {
    plan.iter()
        .map(|s| match *s {
            FrameSrc::Own(i) => own[i].clone(),
            FrameSrc::Pool { traj, frame } => pool[traj].as_ref()[frame].clone(),
        })
        .collect()
}

fn same_episode(a: &Trajectory, b: &Trajectory) -> bool {
    a.task.task_id == b.task.task_id && a.seed == b.seed && a.frames == b.frames
}

pub fn perturb_trajectory(
    traj: &Trajectory,
    kind: TrajPerturbKind,
    seed: u64,
    pool: &[Trajectory],
) -> Result<Trajectory> {
    let exclude = pool.iter().position(|p| same_episode(p, traj));
    let lens: Vec<usize> = pool.iter().map(|p| p.frames.len()).collect();
    let plan = plan_trajectory(traj.frames.len(), exclude, &lens, kind, seed)?;
    let pool_frames: Vec<&[crate::world::Frame]> = pool.iter().map(|p| p.frames.as_slice()).collect();
    Ok(Trajectory {
        frames: materialize(&plan, &traj.frames, &pool_frames),
        task: traj.task.clone(),
        scene: traj.scene.clone(),
        success: false,
        seed: traj.seed,
        states: Vec::new(),
    })
}

pub fn provenance(kind: PerturbKind, seed: u64) -> serde_json::Value {
    serde_json::json!({ "perturbation": kind.to_string(), "perturbation_seed": seed })
}

/// Instruction slots naming the objects the task acts on. The T7 constraint
/// is an obstacle, not a target.
fn target_slots(task: TaskId, slots: &[String]) -> (Vec<String>, Vec<String>) {
    let chars = slots
        .iter()
        .filter(|s| s.starts_with("chars") && !(task == TaskId::T7 && s.as_str() == "chars3"))
        .cloned()
        .collect();
    let idents = slots
        .iter()
        .filter(|s| matches!(s.as_str(), "object" | "container" | "container2" | "container3"))
        .cloned()
        .collect();
    (chars, idents)
}

fn pick<T: Ord + Copy>(rng: &mut ChaCha8Rng, pool: BTreeSet<T>, what: &str) -> Result<T> {
    let v: Vec<T> = pool.into_iter().collect();
    v.choose(rng).copied().ok_or_else(|| Error::NoSubstitute(what.to_string()))
}

fn swap_identifiers(slots: &mut std::collections::BTreeMap<String, SlotValue>, names: &[String], scene: &Scene, rng: &mut ChaCha8Rng) -> Result<()> {
    for name in names {
        let Some(SlotValue::Shape(cur)) = slots.get(name).copied() else { continue };
        let present: BTreeSet<Shape> = scene.objects.iter().map(|o| o.shape).filter(|&s| s != cur).collect();
        let same_kind: BTreeSet<Shape> = present.iter().copied().filter(|s| s.kind() == cur.kind()).collect();
        let pool = if same_kind.is_empty() {
            present.into_iter().filter(|s| s.kind() != ShapeKind::Obstacle).collect()
        } else {
            same_kind
        };
        let new = pick(rng, pool, &format!("identifier of `{name}`"))?;
        slots.insert(name.clone(), SlotValue::Shape(new));
    }
    Ok(())
}

fn swap_chars(
    slots: &mut std::collections::BTreeMap<String, SlotValue>,
    names: &[String],
    scene: &Scene,
    color: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for name in names {
        let Some(SlotValue::Chars(mut c)) = slots.get(name).copied() else { continue };
        if color {
            let pool = scene.objects.iter().map(|o| o.color).filter(|&x| x != c.color).collect();
            c.color = pick(rng, pool, &format!("color of `{name}`"))?;
        } else {
            let pool = scene.objects.iter().map(|o| o.texture).filter(|&x| x != c.texture).collect();
            c.texture = pick(rng, pool, &format!("texture of `{name}`"))?;
        }
        slots.insert(name.clone(), SlotValue::Chars(c));
    }
    Ok(())
}

/// Rewrites the target attributes of an instruction with attributes of other
/// objects in the same scene and re-renders it through the task's template.
pub fn perturb_instruction(
    instr: &Instruction,
    task: &TaskSpec,
    scene: &Scene,
    kind: InstrPerturbKind,
    seed: u64,
) -> Result<Instruction> {
    let mut rng = rng_for(seed, 0x5049 + kind as u64);
    let mut slots = instr.slots.clone();
    let names: Vec<String> = slots.keys().cloned().collect();
    let (chars, idents) = target_slots(task.task_id, &names);
    if matches!(kind, InstrPerturbKind::Obj | InstrPerturbKind::Comb) {
        swap_identifiers(&mut slots, &idents, scene, &mut rng)?;
    }
    if matches!(kind, InstrPerturbKind::Col | InstrPerturbKind::Comb) {
        swap_chars(&mut slots, &chars, scene, true, &mut rng)?;
    }
    if matches!(kind, InstrPerturbKind::Tex | InstrPerturbKind::Comb) {
        swap_chars(&mut slots, &chars, scene, false, &mut rng)?;
    }
    let text = render_template(task.task_id, &slots)?;
    let tokens = Vocab::standard().tokenize(&text)?;
    Ok(Instruction { text, tokens, slots })
}

/// Applies `kind` to a whole episode. Trajectory kinds draw from `pool`.
pub fn perturb_episode(ep: &Episode, kind: PerturbKind, seed: u64, pool: &[Trajectory]) -> Result<Episode> {
    let mut out = ep.clone();
    match kind {
        PerturbKind::Traj(k) => out.trajectory = perturb_trajectory(&ep.trajectory, k, seed, pool)?,
        PerturbKind::Instr(k) => {
            out.instruction =
                perturb_instruction(&ep.instruction, &ep.trajectory.task, &ep.trajectory.scene, k, seed)?;
            out.trajectory.success = false;
        }
    }
    out.provenance = Some(provenance(kind, seed));
    Ok(out)
}
