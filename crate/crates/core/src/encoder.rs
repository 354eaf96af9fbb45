//! Frame encoders producing one visual embedding per frame, and the binary
//! exchange format for externally computed embeddings.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu, matmul, max_rows, Graph, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use crate::params::{normal, zeros, ParamSet};
use crate::world::attrs::{Color, Shape, Texture};
use crate::world::{Episode, Frame, Scene};
use crate::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 8] = *b"FOMOEMB\0";
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Builtin,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub d_v: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub external_path: Option<String>,
    /// Train the encoder together with the interface instead of freezing it.
    pub joint_training: bool,
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Builtin,
            d_v: 128,
            patch_size: 12,
            hidden: 128,
            frame_width: 96,
            frame_height: 96,
            external_path: None,
            joint_training: false,
            warmup_steps: 4000,
            warmup_batch: 16,
            warmup_lr: 1e-3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 {
            return Err(Error::BadConfig("d_v must be positive".into()));
        }
        if self.backend == Backend::Builtin {
            let p = self.patch_size;
            if p == 0 || self.hidden == 0 || !self.frame_width.is_multiple_of(p) || !self.frame_height.is_multiple_of(p) {
                return Err(Error::BadConfig(format!(
                    "patch size {p} must divide the {}x{} frame",
                    self.frame_width, self.frame_height
                )));
            }
        } else if self.external_path.is_none() {
            return Err(Error::BadConfig("external backend needs external_path".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.frame_width / self.patch_size) * (self.frame_height / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Patch projection with a learned per-patch position embedding, GELU,
/// max-pool over patches, then a linear map to `d_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub w_patch: Tensor,
    pub b_patch: Tensor,
    pub pos: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pd, h) = (config.patch_dim(), config.hidden);
        Ok(Self {
            config: config.clone(),
            w_patch: normal(pd, h, 1.0 / (pd as f64).sqrt(), &mut rng),
            b_patch: zeros(h),
            pos: normal(config.n_patches(), h, 0.5, &mut rng),
            w_out: normal(h, config.d_v, 1.0 / (h as f64).sqrt(), &mut rng),
            b_out: zeros(config.d_v),
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let ok = (self.w_patch.rows, self.w_patch.cols) == (c.patch_dim(), c.hidden)
            && (self.pos.rows, self.pos.cols) == (c.n_patches(), c.hidden)
            && (self.w_out.rows, self.w_out.cols) == (c.hidden, c.d_v)
            && self.b_patch.cols == c.hidden
            && self.b_out.cols == c.d_v;
        if ok {
            Ok(())
        } else {
            Err(Error::MissingParams("encoder parameters do not match the encoder config".into()))
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> EncoderVars {
        EncoderVars {
            w_patch: g.leaf(&self.w_patch, trainable),
            b_patch: g.leaf(&self.b_patch, trainable),
            pos: g.leaf(&self.pos, trainable),
            w_out: g.leaf(&self.w_out, trainable),
            b_out: g.leaf(&self.b_out, trainable),
        }
    }
}

impl ParamSet for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_patch".into(), &self.w_patch),
            ("b_patch".into(), &self.b_patch),
            ("pos".into(), &self.pos),
            ("w_out".into(), &self.w_out),
            ("b_out".into(), &self.b_out),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_patch, &mut self.b_patch, &mut self.pos, &mut self.w_out, &mut self.b_out]
    }
}

pub struct EncoderVars {
    pub w_patch: Var,
    pub b_patch: Var,
    pub pos: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl EncoderVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_patch, self.b_patch, self.pos, self.w_out, self.b_out]
    }

    /// `patches` is `n_patches × patch_dim`; returns `1 × d_v`.
    pub fn forward(&self, g: &mut Graph<'_>, patches: Var) -> Var {
        let h = g.matmul(patches, self.w_patch);
        let h = g.add_row(h, self.b_patch);
        let h = g.add(h, self.pos);
        let h = g.gelu(h);
        let m = g.max_rows(h);
        let e = g.matmul(m, self.w_out);
        g.add_row(e, self.b_out)
    }
}

/// Non-overlapping patches, row-major over the patch grid, pixels scaled to [0, 1].
pub fn patchify(frame: &Frame, p: usize) -> Tensor {
    let (gw, gh) = (frame.width / p, frame.height / p);
    let dim = p * p * 3;
    let mut out = Tensor::zeros(gw * gh, dim);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    let i = ((py * p + y) * frame.width + px * p + x) * 3;
                    for c in 0..3 {
                        row[k] = frame.pixels[i + c] as f64 / 255.0;
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn check_frame(frame: &Frame, c: &EncoderConfig) -> Result<()> {
    if frame.width != c.frame_width || frame.height != c.frame_height || frame.pixels.len() != frame.width * frame.height * 3
    {
        return Err(Error::DimMismatch(format!(
            "frame is {}x{}, encoder expects {}x{}",
            frame.width, frame.height, c.frame_width, c.frame_height
        )));
    }
    Ok(())
}

/// One `d_v` row per frame, values rounded to 32-bit floats.
pub fn encode_frames(frames: &[Frame], params: &EncoderParams) -> Result<Tensor> {
    let c = &params.config;
    if frames.is_empty() {
        return Err(Error::DimMismatch("no frames to encode".into()));
    }
    if c.backend != Backend::Builtin {
        return Err(Error::MissingParams("external encoders are read from an embedding file".into()));
    }
    params.check_shapes()?;
    let mut out = Tensor::zeros(frames.len(), c.d_v);
    for (i, f) in frames.iter().enumerate() {
        check_frame(f, c)?;
        let mut h = matmul(&patchify(f, c.patch_size), &params.w_patch);
        for r in 0..h.rows {
            for (k, v) in h.row_mut(r).iter_mut().enumerate() {
                *v = gelu(*v + params.b_patch.data[k] + params.pos.get(r, k));
            }
        }
        let e = matmul(&max_rows(&h).0, &params.w_out);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (e.data[k] + params.b_out.data[k]) as f32 as f64;
        }
    }
    Ok(out)
}

/// Labels of the warm-up heads: object count, dominant rendered color, and
/// which colors, shapes and textures are present, first over all objects and
/// then over objects sharing a cell with another one.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxLabels {
    pub count: usize,
    pub dominant_color: usize,
    pub presence: Vec<f64>,
}

pub const MAX_COUNT: usize = 15;

/// `state` is the object layout the frame renders.
pub fn aux_labels(frame: &Frame, state: &Scene) -> AuxLabels {
    let mut hist = [0usize; 8];
    for px in frame.pixels.chunks(3) {
        for c in Color::ALL {
            let rgb = c.rgb();
            let dark = [rgb[0] / 2, rgb[1] / 2, rgb[2] / 2];
            if px == rgb || px == dark {
                hist[c.index()] += 1;
            }
        }
    }
    let dominant_color = (0..8).max_by_key(|&i| (hist[i], std::cmp::Reverse(i))).unwrap_or(0);
    let n = Color::ALL.len() + Shape::ALL.len() + Texture::ALL.len();
    let mut presence = vec![0.0; 2 * n];
    for o in &state.objects {
        let stacked = state.objects.iter().filter(|p| p.position == o.position).count() > 1;
        for off in [0, n].into_iter().take(1 + stacked as usize) {
            presence[off + o.color.index()] = 1.0;
            presence[off + Color::ALL.len() + o.shape.index()] = 1.0;
            presence[off + Color::ALL.len() + Shape::ALL.len() + o.texture.index()] = 1.0;
        }
    }
    AuxLabels { count: state.objects.len().min(MAX_COUNT), dominant_color, presence }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmupReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Fraction of positive presence labels the auxiliary head recovers, over
    /// all objects and over stacked objects, on a sample of warm-up frames.
    pub presence_recall: f64,
    pub stacked_recall: f64,
}

/// Self-supervised warm-up of the builtin encoder through linear auxiliary
/// heads. The heads are discarded afterwards.
pub fn warm_up(params: &mut EncoderParams, episodes: &[Episode], seed: u64) -> Result<WarmupReport> {
    let c = params.config.clone();
    let mut items: Vec<(Tensor, AuxLabels)> = Vec::new();
    for ep in episodes {
        let tr = &ep.trajectory;
        // Without per-frame states only the first frame has known labels.
        let states: Vec<&Scene> = if tr.states.len() == tr.frames.len() { tr.states.iter().collect() } else { vec![&tr.scene] };
        for (f, st) in tr.frames.iter().zip(states) {
            check_frame(f, &c)?;
            items.push((patchify(f, c.patch_size), aux_labels(f, st)));
        }
    }
    if items.is_empty() || c.warmup_steps == 0 {
        return Ok(WarmupReport::default());
    }
    let n_presence = items[0].1.presence.len();
    let n_out = MAX_COUNT + 1 + 8 + n_presence;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head_w = normal(c.d_v, n_out, 0.01, &mut rng);
    let mut head_b = zeros(n_out);
    let mut adam = Adam::new(AdamConfig { lr: c.warmup_lr, warmup_steps: 20, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = items.len();
    let (mut first, mut last) = (None, 0.0);
    for step in 0..c.warmup_steps {
        let mut batch = Vec::with_capacity(c.warmup_batch);
        for _ in 0..c.warmup_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = {
            let mut g = Graph::new();
            let ev = params.bind(&mut g, true);
            let hw = g.param(&head_w);
            let hb = g.param(&head_b);
            let mut terms = Vec::new();
            for &i in &batch {
                let (patches, lab) = &items[i];
                let x = g.constant(patches.clone());
                let e = ev.forward(&mut g, x);
                let z = g.matmul(e, hw);
                let z = g.add_row(z, hb);
                let zc = g.col_slice(z, 0, MAX_COUNT + 1);
                let zd = g.col_slice(z, MAX_COUNT + 1, 8);
                let zp = g.col_slice(z, MAX_COUNT + 9, n_presence);
                let lc = g.pick_log_probs(zc, &[(0, lab.count)]);
                let ld = g.pick_log_probs(zd, &[(0, lab.dominant_color)]);
                let lp = g.sigmoid_bce(zp, &lab.presence);
                let lp = g.scale(lp, -1.0);
                let s = g.add_scalars(&[lc, ld, lp]);
                terms.push(s);
            }
            let total = g.add_scalars(&terms);
            let loss = g.scale(total, -1.0 / batch.len() as f64);
            let mut gr = g.backward(loss);
            let mut vars = ev.vars();
            vars.push(hw);
            vars.push(hb);
            let grads: Vec<Tensor> = vars.iter().map(|&v| gr.take(v).expect("warm-up leaf gradient")).collect();
            (g.value(loss).data[0], grads)
        };
        if !loss.is_finite() {
            return Err(Error::NaNLoss(step));
        }
        first.get_or_insert(loss);
        last = loss;
        let mut tensors = params.tensors_mut();
        tensors.push(&mut head_w);
        tensors.push(&mut head_b);
        adam.step(tensors, &grads);
        params.round_to_f32();
    }
    let sample: Vec<&(Tensor, AuxLabels)> = items.iter().step_by(items.len().div_ceil(STANDARDIZE_SAMPLE)).collect();
    // hits and positives for all-object and stacked presence
    let mut tally = [0usize; 4];
    for (patches, lab) in &sample {
        let e = encode_patches(params, patches);
        let mut z = matmul(&e, &head_w);
        z.add_assign(&head_b);
        let half = n_presence / 2;
        for (j, &y) in lab.presence.iter().enumerate() {
            if y > 0.5 {
                let k = 2 * (j >= half) as usize;
                tally[k + 1] += 1;
                tally[k] += (z.data[MAX_COUNT + 9 + j] > 0.0) as usize;
            }
        }
    }
    let recall = |hit: usize, pos: usize| if pos == 0 { 1.0 } else { hit as f64 / pos as f64 };
    standardize_outputs(params, &sample.iter().map(|(p, _)| p).collect::<Vec<_>>());
    Ok(WarmupReport {
        initial_loss: first.unwrap_or(0.0),
        final_loss: last,
        presence_recall: recall(tally[0], tally[1]),
        stacked_recall: recall(tally[2], tally[3]),
    })
}

fn encode_patches(params: &EncoderParams, patches: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let ev = params.bind(&mut g, false);
    let x = g.constant(patches.clone());
    let e = ev.forward(&mut g, x);
    g.value(e).clone()
}

const STANDARDIZE_SAMPLE: usize = 2000;

/// Rescales `w_out` and `b_out` so that the embeddings of `patches` have zero
/// mean and unit variance per dimension. Constant dimensions are only centred.
pub fn standardize_outputs(params: &mut EncoderParams, patches: &[&Tensor]) {
    if patches.is_empty() {
        return;
    }
    let d = params.config.d_v;
    let embs: Vec<Tensor> = patches.iter().map(|p| encode_patches(params, p)).collect();
    let n = embs.len() as f64;
    for k in 0..d {
        let mean = embs.iter().map(|e| e.data[k]).sum::<f64>() / n;
        let var = embs.iter().map(|e| (e.data[k] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for r in 0..params.w_out.rows {
            params.w_out.data[r * d + k] /= sd;
        }
        params.b_out.data[k] = (params.b_out.data[k] - mean) / sd;
    }
    params.round_to_f32();
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    format_version: u32,
    n_trajectories: usize,
    lengths: Vec<usize>,
    d: usize,
}

/// Writes per-trajectory embedding matrices in the exchange format.
pub fn write_embeddings(path: &Path, trajectories: &[Tensor]) -> Result<()> {
    let d = trajectories.first().map_or(0, |t| t.cols);
    if trajectories.iter().any(|t| t.cols != d) {
        return Err(Error::DimMismatch("trajectories disagree on embedding width".into()));
    }
    let header = EmbeddingHeader {
        format_version: EMBEDDING_FORMAT_VERSION,
        n_trajectories: trajectories.len(),
        lengths: trajectories.iter().map(|t| t.rows).collect(),
        d,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + trajectories.iter().map(|t| t.len() * 4).sum::<usize>());
    buf.extend_from_slice(&EMBEDDING_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in trajectories {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn parse_embeddings(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let bad = |m: &str| Error::FormatError(m.to_string());
    if bytes.len() < 16 || bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("missing embedding file magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: EmbeddingHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::FormatError(format!("bad header: {e}")))?;
    if header.format_version != EMBEDDING_FORMAT_VERSION {
        return Err(Error::FormatError(format!("unsupported format_version {}", header.format_version)));
    }
    if header.lengths.len() != header.n_trajectories {
        return Err(bad("lengths do not match n_trajectories"));
    }
    let total: usize = header.lengths.iter().sum();
    let payload = &body[hlen..];
    if payload.len() != total * header.d * 4 {
        return Err(Error::FormatError(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            total * header.d * 4
        )));
    }
    let mut vals = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64);
    Ok(header
        .lengths
        .iter()
        .map(|&len| Tensor::from_vec(len, header.d, vals.by_ref().take(len * header.d).collect()))
        .collect())
}

/// Reads an embedding file; `expected_d` is validated when given.
pub fn load_external_embeddings(path: &Path, expected_d: Option<usize>) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let trajs = parse_embeddings(&bytes)?;
    if let (Some(d), Some(t)) = (expected_d, trajs.first()) {
        if t.cols != d {
            return Err(Error::DimMismatch(format!("embedding file has d={}, config expects {d}", t.cols)));
        }
    }
    Ok(trajs)
}

/// Embeds every episode's frames with the builtin encoder.
pub fn embed_episodes(episodes: &[Episode], params: &EncoderParams) -> Result<Vec<Tensor>> {
    episodes.iter().map(|ep| encode_frames(&ep.trajectory.frames, params)).collect()
}
