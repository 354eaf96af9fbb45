use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attrs::{Chars, Color, Direction, Shape, ShapeKind, Texture, ANGLES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    T7,
}

impl TaskId {
    pub const ALL: [TaskId; 7] =
        [TaskId::T1, TaskId::T2, TaskId::T3, TaskId::T4, TaskId::T5, TaskId::T6, TaskId::T7];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["T1", "T2", "T3", "T4", "T5", "T6", "T7"][self.index()]
    }

    /// Parses a comma separated list such as `T1,T3,T5`.
    pub fn parse_list(s: &str) -> Result<Vec<TaskId>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::BadTask(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub texture: Texture,
    /// Degrees, a multiple of 30 in `[0, 330]`.
    pub orientation: u16,
    /// (row, col) cell.
    pub position: (usize, usize),
    pub is_container: bool,
}

impl ObjectSpec {
    pub fn new(shape: Shape, chars: Chars, orientation: u16, position: (usize, usize)) -> Self {
        Self {
            shape,
            color: chars.color,
            texture: chars.texture,
            orientation,
            position,
            is_container: shape.is_container(),
        }
    }

    pub fn chars(&self) -> Chars {
        Chars::new(self.color, self.texture)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: (usize, usize),
    pub objects: Vec<ObjectSpec>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.grid_size;
        if rows == 0 || cols == 0 {
            return Err(Error::BadConfig("grid dimensions must be positive".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::BadConfig("scene has no objects".into()));
        }
        let mut per_cell: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for o in &self.objects {
            if o.orientation % 30 != 0 || o.orientation >= 360 {
                return Err(Error::BadConfig(format!("orientation {} is not a multiple of 30", o.orientation)));
            }
            if o.position.0 >= rows || o.position.1 >= cols {
                return Err(Error::BadConfig(format!("object at {:?} is off the grid", o.position)));
            }
            if o.is_container != o.shape.is_container() {
                return Err(Error::BadConfig(format!("container flag disagrees with shape {}", o.shape)));
            }
            let e = per_cell.entry(o.position).or_default();
            if o.is_container {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        for (cell, (containers, others)) in per_cell {
            if containers > 1 || (containers == 0 && others > 1) {
                return Err(Error::BadConfig(format!("cell {cell:?} is over-occupied")));
            }
        }
        Ok(())
    }

    /// Container occupying the cell, if any.
    pub fn container_at(&self, cell: (usize, usize)) -> Option<usize> {
        self.objects.iter().position(|o| o.is_container && o.position == cell)
    }

    pub fn occupied(&self, cell: (usize, usize)) -> bool {
        self.objects.iter().any(|o| o.position == cell)
    }

    pub fn neighbor(&self, cell: (usize, usize), dir: Direction) -> Option<(usize, usize)> {
        let (dr, dc) = dir.offset();
        let r = cell.0 as isize + dr;
        let c = cell.1 as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < self.grid_size.0 && (c as usize) < self.grid_size.1)
            .then_some((r as usize, c as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotValue {
    Chars(Chars),
    Shape(Shape),
    Direction(Direction),
    Angle(u16),
}

/// A task instance: template variables plus the scene objects they refer to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub slots: BTreeMap<String, SlotValue>,
    /// Role name → object index in the scene (e.g. `target`, `container`,
    /// `neighbor`, `origin`, `match_0`). For T2 the neighbor is resolved
    /// against the initial layout and cached here.
    pub roles: BTreeMap<String, usize>,
}

impl TaskSpec {
    pub fn role(&self, name: &str) -> Result<usize> {
        self.roles
            .get(name)
            .copied()
            .ok_or_else(|| Error::Unrealizable(format!("{} has no `{name}` role", self.task_id)))
    }

    pub fn chars_slot(&self, name: &str) -> Option<Chars> {
        match self.slots.get(name) {
            Some(SlotValue::Chars(c)) => Some(*c),
            _ => None,
        }
    }

    pub fn shape_slot(&self, name: &str) -> Option<Shape> {
        match self.slots.get(name) {
            Some(SlotValue::Shape(s)) => Some(*s),
            _ => None,
        }
    }
}

/// Slot names each template requires, in template order.
pub fn required_slots(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::T1 => &["chars", "container"],
        TaskId::T2 => &["chars1", "object", "chars2", "container", "direction"],
        TaskId::T3 => &["chars1", "chars2"],
        TaskId::T4 => &["chars1", "object", "chars2", "container2", "chars3", "container3"],
        TaskId::T5 => &["chars1", "object", "chars2", "container"],
        TaskId::T6 => &["chars", "object", "angle"],
        TaskId::T7 => &["chars1", "object", "chars2", "container", "chars3", "constraint"],
    }
}

/// Mixes task, seed and grid into the generator seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

struct Builder {
    rng: ChaCha8Rng,
    grid: (usize, usize),
    objects: Vec<ObjectSpec>,
    reserved: BTreeSet<(usize, usize)>,
}

impl Builder {
    fn taken(&self, cell: (usize, usize)) -> bool {
        self.reserved.contains(&cell) || self.objects.iter().any(|o| o.position == cell)
    }

    fn free_cell(&mut self) -> Option<(usize, usize)> {
        let free: Vec<_> = (0..self.grid.0)
            .flat_map(|r| (0..self.grid.1).map(move |c| (r, c)))
            .filter(|&cell| !self.taken(cell))
            .collect();
        free.choose(&mut self.rng).copied()
    }

    fn orientation(&mut self) -> u16 {
        30 * self.rng.gen_range(0..12u16)
    }

    fn chars(&mut self) -> Chars {
        Chars::new(*Color::ALL.choose(&mut self.rng).unwrap(), *Texture::ALL.choose(&mut self.rng).unwrap())
    }

    fn chars_not_in(&mut self, used: &[Chars]) -> Chars {
        loop {
            let c = self.chars();
            if !used.contains(&c) {
                return c;
            }
        }
    }

    fn shape(&mut self, kind: ShapeKind) -> Shape {
        *Shape::of_kind(kind).choose(&mut self.rng).unwrap()
    }

    fn place(&mut self, shape: Shape, chars: Chars, cell: (usize, usize)) -> usize {
        let o = self.orientation();
        self.objects.push(ObjectSpec::new(shape, chars, o, cell));
        self.objects.len() - 1
    }

    fn place_free(&mut self, shape: Shape, chars: Chars) -> Option<usize> {
        let cell = self.free_cell()?;
        Some(self.place(shape, chars, cell))
    }
}

fn min_cells(task: TaskId) -> usize {
    // targets + reserved cells + two mandatory distractors
    2 + match task {
        TaskId::T1 => 4,
        TaskId::T2 => 3,
        TaskId::T3 | TaskId::T5 => 2,
        TaskId::T4 => 3,
        TaskId::T6 => 1,
        TaskId::T7 => 5,
    }
}

/// Generates a scene and a realizable task instance; fully determined by the inputs.
pub fn gen_scene(task: TaskId, seed: u64, grid_size: (usize, usize)) -> Result<(Scene, TaskSpec)> {
    let (rows, cols) = grid_size;
    let too_small = || Error::GridTooSmall { task: task.to_string(), rows, cols };
    if rows * cols < min_cells(task) || (task == TaskId::T7 && cols < 3) || (task == TaskId::T2 && rows * cols < 4) {
        return Err(too_small());
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(mix_seed(&[task.index() as u64, seed, rows as u64, cols as u64])),
        grid: grid_size,
        objects: Vec::new(),
        reserved: BTreeSet::new(),
    };
    let mut slots = BTreeMap::new();
    let mut roles = BTreeMap::new();

    match task {
        TaskId::T1 => {
            let cc = b.chars();
            let shape = b.shape(ShapeKind::Container);
            let c = b.place_free(shape, cc).ok_or_else(too_small)?;
            roles.insert("container".into(), c);
            for k in 0..3 {
                let s = b.shape(ShapeKind::Object);
                let m = b.place_free(s, cc).ok_or_else(too_small)?;
                roles.insert(format!("match_{k}"), m);
            }
            slots.insert("chars".into(), SlotValue::Chars(cc));
            slots.insert("container".into(), SlotValue::Shape(shape));
        }
        TaskId::T2 => {
            let (cell, dir, ncell) = loop {
                let cell = b.free_cell().ok_or_else(too_small)?;
                let probe = Scene { grid_size, objects: Vec::new(), rng_seed: seed };
                let dirs: Vec<(Direction, (usize, usize))> = Direction::ALL
                    .iter()
                    .filter_map(|&d| probe.neighbor(cell, d).map(|n| (d, n)))
                    .filter(|&(_, n)| !b.taken(n))
                    .collect();
                if let Some(&(d, n)) = dirs.choose(&mut b.rng) {
                    break (cell, d, n);
                }
                b.reserved.insert(cell);
            };
            b.reserved.clear();
            let oc = b.chars();
            let os = b.shape(ShapeKind::Object);
            let t = b.place(os, oc, cell);
            let nc = b.chars_not_in(&[oc]);
            let ns = b.shape(ShapeKind::Object);
            let n = b.place(ns, nc, ncell);
            let cc = b.chars_not_in(&[oc, nc]);
            let cs = b.shape(ShapeKind::Container);
            let c = b.place_free(cs, cc).ok_or_else(too_small)?;
            roles.insert("target".into(), t);
            roles.insert("neighbor".into(), n);
            roles.insert("container".into(), c);
            slots.insert("chars1".into(), SlotValue::Chars(oc));
            slots.insert("object".into(), SlotValue::Shape(os));
            slots.insert("chars2".into(), SlotValue::Chars(cc));
            slots.insert("container".into(), SlotValue::Shape(cs));
            slots.insert("direction".into(), SlotValue::Direction(dir));
        }
        TaskId::T3 | TaskId::T5 => {
            let oc = b.chars();
            let os = b.shape(ShapeKind::Object);
            let t = b.place_free(os, oc).ok_or_else(too_small)?;
            let cc = b.chars_not_in(&[oc]);
            let cs = b.shape(ShapeKind::Container);
            let c = b.place_free(cs, cc).ok_or_else(too_small)?;
            roles.insert("target".into(), t);
            roles.insert("container".into(), c);
            slots.insert("chars1".into(), SlotValue::Chars(oc));
            slots.insert("chars2".into(), SlotValue::Chars(cc));
            if task == TaskId::T5 {
                slots.insert("object".into(), SlotValue::Shape(os));
                slots.insert("container".into(), SlotValue::Shape(cs));
            }
        }
        TaskId::T4 => {
            let oc = b.chars();
            let os = b.shape(ShapeKind::Object);
            let c1c = b.chars_not_in(&[oc]);
            let c1s = b.shape(ShapeKind::Container);
            let c1 = b.place_free(c1s, c1c).ok_or_else(too_small)?;
            let cell = b.objects[c1].position;
            let t = b.place(os, oc, cell);
            let c2c = b.chars_not_in(&[oc, c1c]);
            let c2s = b.shape(ShapeKind::Container);
            let c2 = b.place_free(c2s, c2c).ok_or_else(too_small)?;
            let c3c = b.chars_not_in(&[oc, c1c, c2c]);
            let c3s = b.shape(ShapeKind::Container);
            let c3 = b.place_free(c3s, c3c).ok_or_else(too_small)?;
            roles.insert("target".into(), t);
            roles.insert("origin".into(), c1);
            roles.insert("container2".into(), c2);
            roles.insert("container3".into(), c3);
            slots.insert("chars1".into(), SlotValue::Chars(oc));
            slots.insert("object".into(), SlotValue::Shape(os));
            slots.insert("chars2".into(), SlotValue::Chars(c2c));
            slots.insert("container2".into(), SlotValue::Shape(c2s));
            slots.insert("chars3".into(), SlotValue::Chars(c3c));
            slots.insert("container3".into(), SlotValue::Shape(c3s));
        }
        TaskId::T6 => {
            let oc = b.chars();
            let os = b.shape(ShapeKind::Object);
            let t = b.place_free(os, oc).ok_or_else(too_small)?;
            let angle = *ANGLES.choose(&mut b.rng).unwrap();
            roles.insert("target".into(), t);
            slots.insert("chars".into(), SlotValue::Chars(oc));
            slots.insert("object".into(), SlotValue::Shape(os));
            slots.insert("angle".into(), SlotValue::Angle(angle));
        }
        TaskId::T7 => {
            let k = b.rng.gen_range(1..=3usize).min(cols - 2);
            let east = b.rng.gen_bool(0.5);
            let r = b.rng.gen_range(0..rows);
            // columns: object at c0, container at c1, line just beyond the container
            let c0 = b.rng.gen_range(0..cols - k - 1);
            let (c0, c1, cl) = if east { (c0, c0 + k, c0 + k + 1) } else { (c0 + k + 1, c0 + 1, c0) };
            let oc = b.chars();
            let os = b.shape(ShapeKind::Object);
            let t = b.place(os, oc, (r, c0));
            let cc = b.chars_not_in(&[oc]);
            let cs = b.shape(ShapeKind::Container);
            let c = b.place(cs, cc, (r, c1));
            let lc = b.chars_not_in(&[oc, cc]);
            let l = b.objects.len();
            b.objects.push(ObjectSpec::new(Shape::Line, lc, 90, (r, cl)));
            let (lo, hi) = (c0.min(c1), c0.max(c1));
            for col in lo + 1..hi {
                b.reserved.insert((r, col));
            }
            roles.insert("target".into(), t);
            roles.insert("container".into(), c);
            roles.insert("constraint".into(), l);
            slots.insert("chars1".into(), SlotValue::Chars(oc));
            slots.insert("object".into(), SlotValue::Shape(os));
            slots.insert("chars2".into(), SlotValue::Chars(cc));
            slots.insert("container".into(), SlotValue::Shape(cs));
            slots.insert("chars3".into(), SlotValue::Chars(lc));
            slots.insert("constraint".into(), SlotValue::Shape(Shape::Line));
        }
    }

    add_distractors(&mut b, &roles).ok_or_else(too_small)?;
    let scene = Scene { grid_size, objects: b.objects, rng_seed: seed };
    scene.validate()?;
    Ok((scene, TaskSpec { task_id: task, slots, roles }))
}

/// One object and one container distractor, plus an optional extra, all with
/// colors, textures and identifiers absent from the task's targets so that
/// every instruction perturbation has an in-scene substitute.
fn add_distractors(b: &mut Builder, roles: &BTreeMap<String, usize>) -> Option<()> {
    let targets: Vec<ObjectSpec> = roles.values().map(|&i| b.objects[i].clone()).collect();
    let colors: BTreeSet<Color> = targets.iter().map(|o| o.color).collect();
    let textures: BTreeSet<Texture> = targets.iter().map(|o| o.texture).collect();
    let shapes: BTreeSet<Shape> = targets.iter().map(|o| o.shape).collect();
    let pick_color = |rng: &mut ChaCha8Rng| {
        let pool: Vec<Color> = Color::ALL.iter().copied().filter(|c| !colors.contains(c)).collect();
        *pool.choose(rng).unwrap()
    };
    let pick_texture = |rng: &mut ChaCha8Rng| {
        let pool: Vec<Texture> = Texture::ALL.iter().copied().filter(|t| !textures.contains(t)).collect();
        *pool.choose(rng).unwrap_or(&Texture::Plain)
    };
    let mut kinds = vec![ShapeKind::Object, ShapeKind::Container];
    if b.rng.gen_bool(0.5) {
        let extra = if b.rng.gen_bool(0.5) { ShapeKind::Object } else { ShapeKind::Container };
        kinds.push(extra);
    }
    for kind in kinds {
        let pool: Vec<Shape> = Shape::of_kind(kind).into_iter().filter(|s| !shapes.contains(s)).collect();
        let shape = *pool.choose(&mut b.rng)?;
        let chars = Chars::new(pick_color(&mut b.rng), pick_texture(&mut b.rng));
        b.place_free(shape, chars)?;
    }
    Some(())
}
