//! Scripted privileged-state policy and the ground-truth success predicate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, Frame};
use super::scene::{mix_seed, Scene, SlotValue, TaskId, TaskSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Move { object: usize, to: (usize, usize) },
    Rotate { object: usize, degrees: u16 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Frame 0 renders `scene`; frame k renders the state after action k.
    pub frames: Vec<Frame>,
    pub task: TaskSpec,
    pub scene: Scene,
    pub success: bool,
    pub seed: u64,
    /// Object states behind each frame. Empty when unknown, e.g. for
    /// perturbed trajectories.
    #[serde(skip)]
    pub states: Vec<Scene>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn apply(scene: &Scene, action: Action) -> Result<Scene> {
    let mut next = scene.clone();
    match action {
        Action::Move { object, to } => {
            let o = next
                .objects
                .get_mut(object)
                .ok_or_else(|| Error::Unrealizable(format!("no object {object}")))?;
            if o.is_container {
                return Err(Error::Unrealizable("containers are never moved".into()));
            }
            o.position = to;
        }
        Action::Rotate { object, degrees } => {
            let o = next
                .objects
                .get_mut(object)
                .ok_or_else(|| Error::Unrealizable(format!("no object {object}")))?;
            o.orientation = (o.orientation + degrees) % 360;
        }
    }
    next.validate().map_err(|e| Error::Unrealizable(e.to_string()))?;
    Ok(next)
}

fn script(scene: &Scene, task: &TaskSpec) -> Result<Vec<Action>> {
    let pos = |role: &str| -> Result<(usize, usize)> { Ok(scene.objects[task.role(role)?].position) };
    let mv = |role: &str, dest: &str| -> Result<Action> { Ok(Action::Move { object: task.role(role)?, to: pos(dest)? }) };
    Ok(match task.task_id {
        TaskId::T1 => {
            let mut a = Vec::new();
            let mut k = 0;
            while task.roles.contains_key(&format!("match_{k}")) {
                a.push(mv(&format!("match_{k}"), "container")?);
                k += 1;
            }
            a
        }
        TaskId::T2 => vec![mv("target", "container")?, mv("neighbor", "container")?],
        TaskId::T3 | TaskId::T5 => vec![mv("target", "container")?],
        TaskId::T4 => vec![mv("target", "container2")?, mv("target", "container3")?, mv("target", "origin")?],
        TaskId::T6 => {
            let Some(SlotValue::Angle(a)) = task.slots.get("angle") else {
                return Err(Error::Unrealizable("T6 without angle".into()));
            };
            vec![Action::Rotate { object: task.role("target")?, degrees: *a }]
        }
        TaskId::T7 => {
            let (r, c0) = pos("target")?;
            let (_, c1) = pos("container")?;
            let t = task.role("target")?;
            let step = |c: usize| if c1 > c0 { c + 1 } else { c - 1 };
            let mut c = c0;
            let mut a = Vec::new();
            while c != c1 {
                c = step(c);
                a.push(Action::Move { object: t, to: (r, c) });
            }
            a
        }
    })
}

/// A wrong outcome for one scripted action.
fn corrupt(scene: &Scene, action: Action, avoid: Option<(usize, usize)>, rng: &mut ChaCha8Rng) -> Action {
    match action {
        Action::Rotate { object, degrees } => Action::Rotate { object, degrees: (degrees + 30) % 360 },
        Action::Move { object, to } => {
            let mut options: Vec<(usize, usize)> = scene
                .objects
                .iter()
                .filter(|o| o.is_container && o.position != to && o.position != scene.objects[object].position)
                .filter(|o| Some(o.position) != avoid)
                .map(|o| o.position)
                .collect();
            if options.is_empty() {
                let (rows, cols) = scene.grid_size;
                options = (0..rows)
                    .flat_map(|r| (0..cols).map(move |c| (r, c)))
                    .filter(|&cell| !scene.occupied(cell))
                    .collect();
            }
            match options.choose(rng) {
                Some(&cell) => Action::Move { object, to: cell },
                None => action,
            }
        }
    }
}

/// Scripted completion of `task`, one frame per atomic action. With
/// `failure_rate > 0` an action may be replaced by a wrong placement, in which
/// case the trajectory is labelled unsuccessful by [`check_success`].
pub fn oracle_rollout(scene: &Scene, task: &TaskSpec, seed: u64, failure_rate: f64) -> Result<Trajectory> {
    let mut actions = script(scene, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x0AC1E]));
    if failure_rate > 0.0 && rng.gen_bool(failure_rate.min(1.0)) {
        let k = rng.gen_range(0..actions.len());
        // the corrupted action sees the state it would have been applied to
        let mut s = scene.clone();
        for a in &actions[..k] {
            s = apply(&s, *a)?;
        }
        // a T7 push that lands in the goal container early is not a failure
        let avoid = match task.task_id {
            TaskId::T7 => Some(scene.objects[task.role("container")?].position),
            _ => None,
        };
        actions[k] = corrupt(&s, actions[k], avoid, &mut rng);
        // later moves of a misplaced T7 sweep would walk from the wrong cell
        if task.task_id == TaskId::T7 {
            actions.truncate(k + 1);
        }
    }
    let mut states = vec![scene.clone()];
    for a in actions {
        let next = apply(states.last().unwrap(), a)?;
        states.push(next);
    }
    let success = check_success(&states, task)?;
    Ok(Trajectory {
        frames: states.iter().map(render).collect(),
        task: task.clone(),
        scene: scene.clone(),
        success,
        seed,
        states,
    })
}

/// Ground-truth label over the state history (initial state first). Only
/// T4, T6 and T7 look beyond the final state.
pub fn check_success(states: &[Scene], task: &TaskSpec) -> Result<bool> {
    let (Some(first), Some(last)) = (states.first(), states.last()) else {
        return Err(Error::Unrealizable("empty state history".into()));
    };
    let at = |s: &Scene, role: &str| -> Result<(usize, usize)> { Ok(s.objects[task.role(role)?].position) };
    Ok(match task.task_id {
        TaskId::T1 => {
            let c = task.role("container")?;
            let home = last.objects[c].position;
            let profile = last.objects[c].chars();
            let matching: Vec<_> =
                last.objects.iter().filter(|o| !o.is_container && o.chars() == profile).collect();
            !matching.is_empty() && matching.iter().all(|o| o.position == home)
        }
        TaskId::T2 => {
            let home = at(last, "container")?;
            let entered = |role: &str| -> Result<Option<usize>> {
                let mut idx = None;
                for (i, s) in states.iter().enumerate() {
                    if at(s, role)? == home {
                        idx = Some(i);
                        break;
                    }
                }
                Ok(idx)
            };
            match (entered("target")?, entered("neighbor")?) {
                (Some(a), Some(b)) => a < b && at(last, "target")? == home && at(last, "neighbor")? == home,
                _ => false,
            }
        }
        TaskId::T3 | TaskId::T5 => at(last, "target")? == at(last, "container")?,
        TaskId::T4 => {
            let (c2, c3, c1) = (at(first, "container2")?, at(first, "container3")?, at(first, "origin")?);
            let path: Vec<(usize, usize)> = states.iter().map(|s| at(s, "target")).collect::<Result<_>>()?;
            let i2 = path.iter().position(|&p| p == c2);
            let visited = i2.is_some_and(|i| path[i..].contains(&c3));
            visited && *path.last().unwrap() == c1
        }
        TaskId::T6 => {
            let Some(SlotValue::Angle(angle)) = task.slots.get("angle") else {
                return Err(Error::Unrealizable("T6 without angle".into()));
            };
            let t = task.role("target")?;
            last.objects[t].orientation == (first.objects[t].orientation + angle) % 360
        }
        TaskId::T7 => {
            let (_, c1) = at(first, "container")?;
            let (_, cl) = at(first, "constraint")?;
            let beyond = |col: usize| if cl > c1 { col >= cl } else { col <= cl };
            let crossed = states.iter().any(|s| at(s, "target").map(|p| beyond(p.1)).unwrap_or(true));
            !crossed && at(last, "target")? == at(last, "container")?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::render::{cell_bbox, DEFAULT_CELL_PX};
    use crate::world::scene::gen_scene;

    #[test]
    fn oracle_succeeds_on_every_task_without_failures() {
        for task in TaskId::ALL {
            for seed in 0..100 {
                let (scene, spec) = gen_scene(task, seed, (8, 8)).unwrap();
                let t = oracle_rollout(&scene, &spec, seed, 0.0).unwrap();
                assert!(t.success, "{task} seed {seed}");
                assert!(t.len() >= 2);
                assert_eq!(t.frames[0], render(&scene));
            }
        }
    }

    #[test]
    fn rollout_lengths() {
        let (s, t) = gen_scene(TaskId::T5, 1, (8, 8)).unwrap();
        assert_eq!(oracle_rollout(&s, &t, 1, 0.0).unwrap().len(), 2);
        let (s, t) = gen_scene(TaskId::T4, 1, (8, 8)).unwrap();
        assert_eq!(oracle_rollout(&s, &t, 1, 0.0).unwrap().len(), 4);
        let (s, t) = gen_scene(TaskId::T6, 1, (8, 8)).unwrap();
        assert_eq!(oracle_rollout(&s, &t, 1, 0.0).unwrap().len(), 2);
    }

    #[test]
    fn injected_failures_are_labelled() {
        for task in TaskId::ALL {
            for seed in 0..30 {
                let (scene, spec) = gen_scene(task, seed, (8, 8)).unwrap();
                let t = oracle_rollout(&scene, &spec, seed, 1.0).unwrap();
                assert!(!t.success, "{task} seed {seed} should fail");
            }
        }
    }

    #[test]
    fn t6_exact_rotation_succeeds() {
        let (scene, spec) = gen_scene(TaskId::T6, 4, (8, 8)).unwrap();
        let SlotValue::Angle(a) = spec.slots["angle"] else { panic!() };
        let t = spec.role("target").unwrap();
        let done = apply(&scene, Action::Rotate { object: t, degrees: a }).unwrap();
        assert!(check_success(&[scene.clone(), done], &spec).unwrap());
        let wrong = apply(&scene, Action::Rotate { object: t, degrees: (a + 30) % 360 }).unwrap();
        assert!(!check_success(&[scene, wrong], &spec).unwrap());
    }

    #[test]
    fn t5_wrong_container_fails() {
        let (scene, spec) = gen_scene(TaskId::T5, 9, (8, 8)).unwrap();
        let right = spec.role("container").unwrap();
        let other = scene.objects.iter().enumerate().position(|(i, o)| o.is_container && i != right).unwrap();
        let done = apply(
            &scene,
            Action::Move { object: spec.role("target").unwrap(), to: scene.objects[other].position },
        )
        .unwrap();
        assert!(!check_success(&[scene, done], &spec).unwrap());
    }

    #[test]
    fn t1_two_of_three_is_not_enough() {
        let (scene, spec) = gen_scene(TaskId::T1, 2, (8, 8)).unwrap();
        let home = scene.objects[spec.role("container").unwrap()].position;
        let mut s = scene.clone();
        let mut states = vec![scene];
        for k in 0..2 {
            s = apply(&s, Action::Move { object: spec.role(&format!("match_{k}")).unwrap(), to: home }).unwrap();
            states.push(s.clone());
        }
        assert!(!check_success(&states, &spec).unwrap());
        s = apply(&s, Action::Move { object: spec.role("match_2").unwrap(), to: home }).unwrap();
        states.push(s);
        assert!(check_success(&states, &spec).unwrap());
    }

    #[test]
    fn moving_an_object_only_touches_old_and_new_cells() {
        let (scene, spec) = gen_scene(TaskId::T5, 21, (8, 8)).unwrap();
        let t = oracle_rollout(&scene, &spec, 21, 0.0).unwrap();
        let from = scene.objects[spec.role("target").unwrap()].position;
        let to = scene.objects[spec.role("container").unwrap()].position;
        let (a, b) = (&t.frames[0], &t.frames[1]);
        let in_box = |x: usize, y: usize, cell| {
            let (x0, y0, x1, y1) = cell_bbox(cell, DEFAULT_CELL_PX);
            x >= x0 && x < x1 && y >= y0 && y < y1
        };
        let mut changed = 0;
        for y in 0..a.height {
            for x in 0..a.width {
                if a.pixel(x, y) != b.pixel(x, y) {
                    changed += 1;
                    assert!(in_box(x, y, from) || in_box(x, y, to));
                }
            }
        }
        assert!(changed > 0);
    }
}
