//! Episode generation and the on-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json                 sorted-key JSON manifest
//! <root>/<task>_<seed>/frame_000.ppm   binary P6 frames
//! <root>/<task>_<seed>/meta.json       instruction, slots, labels, provenance
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::oracle::{oracle_rollout, Trajectory};
use super::render::Frame;
use super::scene::{gen_scene, mix_seed, Scene, SlotValue, TaskId, TaskSpec};
use super::template::{make_instruction, Instruction};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub instruction: Instruction,
    /// Free-form provenance, e.g. the perturbation that produced the episode.
    pub provenance: Option<serde_json::Value>,
}

impl Episode {
    pub fn task(&self) -> TaskId {
        self.trajectory.task.task_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub trajectory_dir: String,
    pub instruction_text: String,
    pub task_id: TaskId,
    pub seed: u64,
    pub success: bool,
    pub num_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root_path: String,
    pub records: Vec<ManifestRecord>,
    pub split: Split,
    pub format_version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub tasks: Vec<TaskId>,
    pub episodes_per_task: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub grid_size: (usize, usize),
    pub failure_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            tasks: TaskId::ALL.to_vec(),
            episodes_per_task: 300,
            seed: 0,
            split_fraction: 10.0 / 11.0,
            grid_size: (8, 8),
            failure_rate: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::BadConfig(format!("split fraction {} is outside (0, 1)", self.split_fraction)));
        }
        if self.tasks.is_empty() {
            return Err(Error::BadConfig("no tasks selected".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(Error::BadConfig(format!("failure rate {} is outside [0, 1]", self.failure_rate)));
        }
        Ok(())
    }

    /// Number of training episodes per task.
    pub fn train_per_task(&self) -> usize {
        (self.episodes_per_task as f64 * self.split_fraction).round() as usize
    }
}

/// Deterministic per-episode seed.
pub fn episode_seed(base: u64, task: TaskId, index: usize) -> u64 {
    mix_seed(&[base, task.index() as u64, index as u64]) >> 1
}

pub fn make_episode(task: TaskId, seed: u64, grid: (usize, usize), failure_rate: f64) -> Result<Episode> {
    let (scene, spec) = gen_scene(task, seed, grid)?;
    let trajectory = oracle_rollout(&scene, &spec, seed, failure_rate)?;
    let instruction = make_instruction(&spec)?;
    Ok(Episode { trajectory, instruction, provenance: None })
}

/// In-memory dataset generation: `(train, eval)` episodes, tasks interleaved
/// in config order. Each episode is a pure function of its seed.
pub fn generate_episodes(config: &DatasetConfig) -> Result<(Vec<Episode>, Vec<Episode>)> {
    config.validate()?;
    let n_train = config.train_per_task();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut seen = BTreeSet::new();
    for i in 0..config.episodes_per_task {
        for &task in &config.tasks {
            let seed = episode_seed(config.seed, task, i);
            if !seen.insert((task, seed)) {
                return Err(Error::BadConfig(format!("seed collision for {task} episode {i}")));
            }
            let ep = make_episode(task, seed, config.grid_size, config.failure_rate)?;
            if i < n_train {
                train.push(ep);
            } else {
                eval.push(ep);
            }
        }
    }
    Ok((train, eval))
}

fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is a BTreeMap without `preserve_order`, so going
    // through Value sorts every object's keys.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    buf.extend_from_slice(&frame.pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::FormatError(format!("{}: {m}", path.display()));
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
    }
    i += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("not an 8-bit P6 image"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(i..).ok_or_else(|| bad("missing pixels"))?.to_vec();
    if pixels.len() != width * height * 3 {
        return Err(bad("pixel payload has the wrong size"));
    }
    Ok(Frame { width, height, pixels })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    instruction: String,
    slots: BTreeMap<String, SlotValue>,
    success: bool,
    task_id: TaskId,
    seed: u64,
    task: TaskSpec,
    scene: Scene,
    /// Object layout behind each frame, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    states: Vec<Scene>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn episode_dir_name(ep: &Episode) -> String {
    format!("{}_{}", ep.task(), ep.trajectory.seed)
}

/// Writes episodes and their manifest under `root`, replacing any previous
/// manifest. Directory names must be unique within the split.
pub fn write_dataset(root: &Path, episodes: &[Episode], split: Split) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(episodes.len());
    let mut names = BTreeSet::new();
    for (k, ep) in episodes.iter().enumerate() {
        let mut name = episode_dir_name(ep);
        if !names.insert(name.clone()) {
            name = format!("{name}_{k}");
            names.insert(name.clone());
        }
        let dir = root.join(&name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in ep.trajectory.frames.iter().enumerate() {
            write_ppm(&dir.join(format!("frame_{i:03}.ppm")), f)?;
        }
        let meta = EpisodeMeta {
            instruction: ep.instruction.text.clone(),
            slots: ep.instruction.slots.clone(),
            success: ep.trajectory.success,
            task_id: ep.task(),
            seed: ep.trajectory.seed,
            task: ep.trajectory.task.clone(),
            scene: ep.trajectory.scene.clone(),
            states: ep.trajectory.states.clone(),
            provenance: ep.provenance.clone(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, sorted_json(&meta)?).map_err(|e| Error::io(&path, e))?;
        records.push(ManifestRecord {
            trajectory_dir: name,
            instruction_text: ep.instruction.text.clone(),
            task_id: ep.task(),
            seed: ep.trajectory.seed,
            success: ep.trajectory.success,
            num_frames: ep.trajectory.frames.len(),
        });
    }
    let manifest = DatasetManifest {
        root_path: root.display().to_string(),
        records,
        split,
        format_version: FORMAT_VERSION,
    };
    let path = root.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(sorted_json(&manifest)?.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates and writes `<out>/train` and `<out>/eval`.
pub fn gen_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, eval) = generate_episodes(config)?;
    let t = write_dataset(&out_dir.join("train"), &train, Split::Train)?;
    let e = write_dataset(&out_dir.join("eval"), &eval, Split::Eval)?;
    Ok((t, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::FormatError(format!("unsupported dataset format {}", m.format_version)));
    }
    m.root_path = root.display().to_string();
    Ok(m)
}

pub fn frame_paths(root: &Path, record: &ManifestRecord) -> Vec<PathBuf> {
    (0..record.num_frames).map(|i| root.join(&record.trajectory_dir).join(format!("frame_{i:03}.ppm"))).collect()
}

/// Loads every episode of a dataset directory, in manifest order.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Episode>)> {
    let manifest = read_manifest(root)?;
    let mut episodes = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let dir = root.join(&rec.trajectory_dir);
        let frames = frame_paths(root, rec).iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: EpisodeMeta = serde_json::from_str(&text)?;
        let mut instruction = Instruction::from_text(&meta.instruction)?;
        instruction.slots = meta.slots;
        episodes.push(Episode {
            trajectory: Trajectory {
                frames,
                task: meta.task,
                scene: meta.scene,
                success: meta.success,
                seed: meta.seed,
                states: meta.states,
            },
            instruction,
            provenance: meta.provenance,
        });
    }
    Ok((manifest, episodes))
}
