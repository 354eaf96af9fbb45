//! Checkpoint files.
//!
//! A file holds one or more records. Each record is
//!
//! ```text
//! u64 LE   header length in bytes
//! [u8]     JSON header, sorted keys
//! [f32 LE] n_params values in the header's tensor order
//! ```
//!
//! The header carries `component`, `config`, `frozen`, `format_version`,
//! `n_params` and the `tensors` list (name, rows, cols).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::interface::{InterfaceConfig, InterfaceParams};
use crate::lm::{LmConfig, LmParams};
use crate::params::ParamSet;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Lm,
    Encoder,
    Interface,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lm => "lm",
            Self::Encoder => "encoder",
            Self::Interface => "interface",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordHeader {
    pub component: Component,
    pub config: serde_json::Value,
    pub frozen: bool,
    pub format_version: u32,
    pub n_params: usize,
    pub tensors: Vec<TensorInfo>,
    /// Training settings of an interface record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub header: RecordHeader,
    pub params: Vec<f32>,
}

impl Record {
    pub fn new(component: Component, config: &impl Serialize, frozen: bool, params: &impl ParamSet) -> Result<Self> {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, t)| TensorInfo { name, rows: t.rows, cols: t.cols })
            .collect();
        Ok(Self {
            header: RecordHeader {
                component,
                config: serde_json::to_value(config)?,
                frozen,
                format_version: CHECKPOINT_FORMAT_VERSION,
                n_params: params.n_params(),
                tensors,
                training: None,
            },
            params: params.to_f32(),
        })
    }

    fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::FormatError(format!("{} config: {e}", self.header.component)))
    }

    /// Loads the values into `target`, checking the tensor layout first.
    fn fill<P: ParamSet>(&self, mut target: P) -> Result<P> {
        let expect: Vec<TensorInfo> = target
            .named()
            .into_iter()
            .map(|(name, t)| TensorInfo { name, rows: t.rows, cols: t.cols })
            .collect();
        if expect != self.header.tensors {
            return Err(Error::MissingParams(format!("{} tensor layout does not match its config", self.header.component)));
        }
        target.load_f32(&self.params)?;
        Ok(target)
    }
}

pub fn lm_record(lm: &LmParams, frozen: bool) -> Result<Record> {
    Record::new(Component::Lm, &lm.config, frozen, lm)
}

pub fn encoder_record(enc: &EncoderParams, frozen: bool) -> Result<Record> {
    Record::new(Component::Encoder, &enc.config, frozen, enc)
}

pub fn interface_record(iface: &InterfaceParams, frozen: bool) -> Result<Record> {
    Record::new(Component::Interface, &iface.config, frozen, iface)
}

pub fn encode_records(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        if r.params.len() != r.header.n_params {
            return Err(Error::MissingParams(format!("{} record holds {} of {} values", r.header.component, r.params.len(), r.header.n_params)));
        }
        // Value maps are sorted, so the header bytes are canonical.
        let header = serde_json::to_vec(&serde_json::to_value(&r.header)?)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &r.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut at = 0;
    let truncated = || Error::FormatError("truncated checkpoint".into());
    while at < bytes.len() {
        let len_bytes: [u8; 8] = bytes.get(at..at + 8).ok_or_else(truncated)?.try_into().expect("eight bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
        at += 8;
        let hbytes = bytes.get(at..at.checked_add(hlen).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let header: RecordHeader =
            serde_json::from_slice(hbytes).map_err(|e| Error::FormatError(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatError(format!("unsupported checkpoint format {}", header.format_version)));
        }
        at += hlen;
        let n = header.n_params.checked_mul(4).ok_or_else(truncated)?;
        let blob = bytes.get(at..at.checked_add(n).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let params = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        at += n;
        records.push(Record { header, params });
    }
    Ok(records)
}

pub fn write_checkpoint(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = encode_records(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}

/// Whatever components a set of checkpoint files provides. Later files
/// override earlier ones component by component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub lm: Option<LmParams>,
    pub encoder: Option<EncoderParams>,
    pub interface: Option<InterfaceParams>,
    pub interface_training: Option<serde_json::Value>,
}

impl Bundle {
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut b = Bundle::default();
        b.absorb(records)?;
        Ok(b)
    }

    pub fn absorb(&mut self, records: &[Record]) -> Result<()> {
        for r in records {
            match r.header.component {
                Component::Lm => {
                    let cfg: LmConfig = r.config()?;
                    self.lm = Some(r.fill(LmParams::zeros(&cfg)?)?);
                }
                Component::Encoder => {
                    let cfg: EncoderConfig = r.config()?;
                    self.encoder = Some(r.fill(EncoderParams::init(&cfg, 0)?)?);
                }
                Component::Interface => {
                    let cfg: InterfaceConfig = r.config()?;
                    self.interface = Some(r.fill(InterfaceParams::init(&cfg, 0)?)?);
                    self.interface_training = r.header.training.clone();
                }
            }
        }
        Ok(())
    }

    pub fn read(paths: &[&Path]) -> Result<Self> {
        let mut b = Bundle::default();
        for p in paths {
            b.absorb(&read_checkpoint(p)?)?;
        }
        Ok(b)
    }

    /// Records in component order; the interface is the only trainable part.
    pub fn records(&self) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        if let Some(lm) = &self.lm {
            out.push(lm_record(lm, true)?);
        }
        if let Some(e) = &self.encoder {
            out.push(encoder_record(e, !e.config.joint_training)?);
        }
        if let Some(i) = &self.interface {
            let mut r = interface_record(i, false)?;
            r.header.training = self.interface_training.clone();
            out.push(r);
        }
        Ok(out)
    }

    /// Protocol the interface was trained with, if recorded.
    pub fn interface_protocol(&self) -> Option<String> {
        Some(self.interface_training.as_ref()?.get("protocol")?.as_str()?.to_string())
    }

    pub fn need_lm(&self) -> Result<&LmParams> {
        self.lm.as_ref().ok_or_else(|| Error::MissingParams("no language model checkpoint".into()))
    }

    pub fn need_encoder(&self) -> Result<&EncoderParams> {
        self.encoder.as_ref().ok_or_else(|| Error::MissingParams("no encoder checkpoint".into()))
    }

    pub fn need_interface(&self) -> Result<&InterfaceParams> {
        self.interface.as_ref().ok_or_else(|| Error::MissingParams("no interface checkpoint".into()))
    }
}
