//! Browser bindings: generate an episode, perturb it, and plot reward curves
//! for the original and perturbed versions.
//!
//! [`Session`] holds the logic and is usable natively; [`Demo`] is the thin
//! wasm-bindgen wrapper the page talks to.

use fomo_core::checkpoint::{decode_records, Bundle};
use fomo_core::encoder::{encode_frames, EncoderConfig, EncoderParams};
use fomo_core::interface::{InterfaceConfig, InterfaceParams};
use fomo_core::lm::{LmConfig, LmParams};
use fomo_core::perturb::{perturb_episode, PerturbKind};
use fomo_core::scoring::{CurveMode, Normalization, RewardModel};
use fomo_core::vocab::Vocab;
use fomo_core::world::dataset::{make_episode, Episode};
use fomo_core::world::{TaskId, Trajectory};
use fomo_core::{Error, Result};
use wasm_bindgen::prelude::*;

const GRID: (usize, usize) = (8, 8);
const POOL_SIZE: usize = 4;

pub struct Models {
    pub reward: RewardModel,
    pub encoder: EncoderParams,
    pub trained: bool,
}

impl Models {
    /// Freshly initialised weights, so the page works before a checkpoint is loaded.
    pub fn untrained() -> Result<Self> {
        let lm = LmParams::init(&LmConfig { vocab_size: Vocab::standard().len(), ..Default::default() }, 0)?;
        let interface = InterfaceParams::init(&InterfaceConfig::default(), 0)?;
        let encoder = EncoderParams::init(&EncoderConfig::default(), 0)?;
        Ok(Self { reward: RewardModel::new(lm, interface)?, encoder, trained: false })
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let b = Bundle::from_records(&decode_records(bytes)?)?;
        let reward = RewardModel::new(b.need_lm()?.clone(), b.need_interface()?.clone())?;
        Ok(Self { reward, encoder: b.need_encoder()?.clone(), trained: true })
    }

    /// Raw prefix log-likelihoods of `ep`'s instruction, one per frame.
    pub fn curve(&self, ep: &Episode) -> Result<Vec<f64>> {
        let vs = encode_frames(&ep.trajectory.frames, &self.encoder)?;
        Ok(self.reward.reward_curve(&ep.instruction, &vs, CurveMode::Raw, Normalization::Sum)?.values)
    }
}

pub struct Session {
    pub original: Episode,
    pub view: Episode,
    pool: Vec<Trajectory>,
}

impl Session {
    pub fn new(task: &str, seed: u64) -> Result<Self> {
        let task: TaskId = task.parse()?;
        let original = make_episode(task, seed, GRID, 0.0)?;
        let pool = (1..=POOL_SIZE as u64)
            .map(|k| make_episode(task, seed.wrapping_add(k), GRID, 0.0).map(|e| e.trajectory))
            .collect::<Result<_>>()?;
        Ok(Self { view: original.clone(), original, pool })
    }

    /// Replaces the view with a perturbed copy of the original; `"none"` restores it.
    pub fn perturb(&mut self, kind: &str, seed: u64) -> Result<()> {
        self.view = if kind == "none" {
            self.original.clone()
        } else {
            let kind: PerturbKind = kind.parse()?;
            perturb_episode(&self.original, kind, seed, &self.pool)?
        };
        Ok(())
    }

    fn episode(&self, perturbed: bool) -> &Episode {
        if perturbed {
            &self.view
        } else {
            &self.original
        }
    }

    pub fn frame_rgba(&self, perturbed: bool, k: usize) -> Result<Vec<u8>> {
        let frames = &self.episode(perturbed).trajectory.frames;
        let f = frames.get(k).ok_or_else(|| Error::BadConfig(format!("frame {k} of {}", frames.len())))?;
        Ok(f.to_rgba())
    }

    /// `{"original": [...], "perturbed": [...], "trained": bool}`.
    pub fn curves_json(&self, models: &Models) -> Result<String> {
        let v = serde_json::json!({
            "original": models.curve(&self.original)?,
            "perturbed": models.curve(&self.view)?,
            "trained": models.trained,
        });
        Ok(v.to_string())
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
    models: Option<Models>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(task: &str, seed: u64) -> std::result::Result<Demo, JsError> {
        Ok(Demo { session: Session::new(task, seed).map_err(js)?, models: None })
    }

    /// Starts a new episode, keeping any loaded models.
    pub fn reset(&mut self, task: &str, seed: u64) -> std::result::Result<(), JsError> {
        self.session = Session::new(task, seed).map_err(js)?;
        Ok(())
    }

    pub fn perturb(&mut self, kind: &str, seed: u64) -> std::result::Result<(), JsError> {
        self.session.perturb(kind, seed).map_err(js)
    }

    pub fn instruction(&self, perturbed: bool) -> String {
        self.session.episode(perturbed).instruction.text.clone()
    }

    pub fn n_frames(&self, perturbed: bool) -> usize {
        self.session.episode(perturbed).trajectory.frames.len()
    }

    pub fn frame_width(&self) -> usize {
        self.session.original.trajectory.frames[0].width
    }

    pub fn frame_height(&self) -> usize {
        self.session.original.trajectory.frames[0].height
    }

    pub fn frame_rgba(&self, perturbed: bool, k: usize) -> std::result::Result<Vec<u8>, JsError> {
        self.session.frame_rgba(perturbed, k).map_err(js)
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> std::result::Result<(), JsError> {
        self.models = Some(Models::from_checkpoint(bytes).map_err(js)?);
        Ok(())
    }

    pub fn reward_curves(&mut self) -> std::result::Result<String, JsError> {
        if self.models.is_none() {
            self.models = Some(Models::untrained().map_err(js)?);
        }
        let models = self.models.as_ref().expect("models set above");
        self.session.curves_json(models).map_err(js)
    }
}
