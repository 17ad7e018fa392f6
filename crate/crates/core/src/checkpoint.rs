//! `.larar` checkpoints: network parameters, batchnorm state and optional
//! calibration thresholds in the shared binary container.
//!
//! Sections:
//!
//! | tag    | contents                                                          |
//! |--------|-------------------------------------------------------------------|
//! | `MODL` | kind code `u8`, input dim `u64`, layer count `u64`, hidden dims `u64`*, batchnorm `u8`, aux heads `u8` |
//! | `PARM` | every trainable tensor in [`NetworkParams::tensors`] order        |
//! | `RUNS` | per hidden layer: presence `u8`, then running mean and variance   |
//! | `CALB` | optional; calibration statistics as JSON with a `version` field   |

use std::path::Path;

use larar_autodiff::nn::RunningStats;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Reader, Writer, CHECKPOINT_MAGIC};
use crate::error::{LararError, Result};
use crate::model::{Architecture, ModelKind, NetworkParams};
use crate::vulnerability::CalibrationStats;

pub const CALIBRATION_VERSION: u32 = 1;
pub const EXTENSION: &str = "larar";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub calibration: Option<CalibrationStats>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationSection {
    version: u32,
    stats: CalibrationStats,
}

impl Checkpoint {
    pub fn new(params: NetworkParams) -> Self {
        Self {
            params,
            calibration: None,
        }
    }

    pub fn calibration(&self) -> Result<&CalibrationStats> {
        self.calibration.as_ref().ok_or(LararError::Uncalibrated)
    }

    pub fn to_container(&self) -> Result<Container> {
        let p = &self.params;
        let mut c = Container::default();

        let mut w = Writer::new();
        w.u8(kind_code(p.kind))
            .u64(p.input_dim as u64)
            .u64(p.arch.hidden.len() as u64);
        for &d in &p.arch.hidden {
            w.u64(d as u64);
        }
        w.u8(u8::from(p.arch.batchnorm)).u8(u8::from(p.arch.aux_heads));
        c.push(b"MODL", w.finish());

        let mut w = Writer::new();
        for (_, t) in p.tensors() {
            w.tensor(t);
        }
        c.push(b"PARM", w.finish());

        let mut w = Writer::new();
        for layer in &p.hidden {
            match layer.batchnorm.as_ref().and_then(|bn| bn.running.as_ref()) {
                Some(rs) => {
                    w.u8(1).tensor(&rs.mean).tensor(&rs.var);
                }
                None => {
                    w.u8(0);
                }
            }
        }
        c.push(b"RUNS", w.finish());

        if let Some(stats) = &self.calibration {
            let section = CalibrationSection {
                version: CALIBRATION_VERSION,
                stats: stats.clone(),
            };
            let json = serde_json::to_vec(&section).map_err(|e| LararError::Serialization(e.to_string()))?;
            c.push(b"CALB", json);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, expected: Option<ModelKind>) -> Result<Self> {
        let mut r = Reader::new(c.require(b"MODL")?);
        let code = r.u8()?;
        let kind = kind_from_code(code).ok_or_else(|| LararError::CorruptFile(format!("unknown model kind code {code}")))?;
        let input_dim = r.u64()? as usize;
        let depth = r.u64()? as usize;
        if depth > 64 {
            return Err(LararError::CorruptFile(format!("implausible depth {depth}")));
        }
        let hidden = (0..depth).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            hidden,
            batchnorm: r.u8()? != 0,
            aux_heads: r.u8()? != 0,
        };

        if let Some(want) = expected {
            let want_arch = want.architecture();
            if want != kind || want_arch != arch {
                return Err(LararError::ShapeMismatch(format!(
                    "checkpoint holds {kind} with hidden {:?}, expected {want} with hidden {:?}",
                    arch.hidden, want_arch.hidden
                )));
            }
        }

        let mut params = NetworkParams::zeros(kind, arch, input_dim)
            .map_err(|e| LararError::CorruptFile(format!("bad header: {e}")))?;
        let mut r = Reader::new(c.require(b"PARM")?);
        for (slot, t) in params.tensors_mut() {
            let loaded = r.tensor()?;
            if loaded.shape() != t.shape() {
                return Err(LararError::ShapeMismatch(format!(
                    "{slot:?}: stored {:?}, declared {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        if !r.is_empty() {
            return Err(LararError::CorruptFile("extra data in parameter section".into()));
        }

        let mut r = Reader::new(c.require(b"RUNS")?);
        for layer in &mut params.hidden {
            if r.u8()? == 1 {
                let rs = RunningStats {
                    mean: r.tensor()?,
                    var: r.tensor()?,
                };
                let bn = layer
                    .batchnorm
                    .as_mut()
                    .ok_or_else(|| LararError::CorruptFile("running stats for a layer without batchnorm".into()))?;
                if rs.mean.shape() != bn.gamma.shape() || rs.var.shape() != bn.gamma.shape() {
                    return Err(LararError::ShapeMismatch("running statistics width".into()));
                }
                bn.running = Some(rs);
            }
        }

        let calibration = match c.section(b"CALB") {
            None => None,
            Some(bytes) => {
                let section: CalibrationSection =
                    serde_json::from_slice(bytes).map_err(|e| LararError::CorruptFile(format!("calibration: {e}")))?;
                if section.version != CALIBRATION_VERSION {
                    return Err(LararError::VersionMismatch {
                        found: section.version,
                        supported: CALIBRATION_VERSION,
                    });
                }
                Some(section.stats)
            }
        };
        Ok(Self { params, calibration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: &Path, expected: Option<ModelKind>) -> Result<Self> {
        Self::from_container(&Container::read(path, CHECKPOINT_MAGIC)?, expected)
    }
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    Checkpoint::new(params.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    Ok(Checkpoint::load(path, None)?.params)
}

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Vanilla => 0,
        ModelKind::BaseAdvnn => 1,
        ModelKind::Larar => 2,
    }
}

fn kind_from_code(code: u8) -> Option<ModelKind> {
    ModelKind::ALL.into_iter().find(|&k| kind_code(k) == code)
}
