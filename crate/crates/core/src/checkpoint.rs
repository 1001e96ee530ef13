//! Binary checkpoint format.
//!
//! ```text
//! "LASNN\x01"
//! u32 LE  length of the spec document
//! bytes   UTF-8 JSON {"spec": NetworkSpec, "meta": CheckpointMeta}
//! f32 LE  every parameter tensor, layers in spec order; within a layer
//!         weight, bias / gamma, beta, running mean, running var
//! u8      1 if a threshold block follows, else 0
//!   u32   n spiking layers
//!   u32 x n  layer indices
//!   f32 x n  thresholds
//!   f32 x n  maximum preactivations
//!   u32   calibration samples
//!   u32   calibration time steps
//!   f32   percentile
//! ```
//! Conv kernels are stored `[F,C,kh,kw]` and used as cross-correlation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conversion::CalibrationReport;
use crate::error::{Error, Result};
use crate::network::{LayerParams, Network, NetworkSpec, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"LASNN\x01";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Leak the spiking network was trained or converted with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leak: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Present exactly when the network is a spiking student.
    pub calibration: Option<CalibrationReport>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Document {
    spec: NetworkSpec,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(network: Network, calibration: Option<CalibrationReport>, meta: CheckpointMeta) -> Result<Self> {
        let c = Checkpoint {
            network,
            calibration,
            meta,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        let snn = self.network.spec.role == Role::StudentSnn;
        match (&self.calibration, snn) {
            (Some(_), false) => Err(Error::Checkpoint(format!(
                "thresholds stored for a {} network",
                self.network.spec.role
            ))),
            (None, true) => Err(Error::Checkpoint("student-snn checkpoint without thresholds".into())),
            (Some(c), true) => {
                let n = c.layers.len();
                if c.thresholds.len() != n || c.maxima.len() != n {
                    return Err(Error::Checkpoint("threshold block lengths disagree".into()));
                }
                Ok(())
            }
            (None, false) => Ok(()),
        }
    }

    pub fn thresholds(&self) -> &[f32] {
        self.calibration.as_ref().map_or(&[], |c| &c.thresholds)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let doc = serde_json::to_vec(&Document {
            spec: self.network.spec.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(doc.len() + 4 * self.network.parameter_count() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
        out.extend_from_slice(&doc);
        for p in &self.network.params {
            for t in p.tensors() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.calibration {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&(c.layers.len() as u32).to_le_bytes());
                for &l in &c.layers {
                    out.extend_from_slice(&(l as u32).to_le_bytes());
                }
                for v in c.thresholds.iter().chain(&c.maxima) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(c.samples as u32).to_le_bytes());
                out.extend_from_slice(&(c.time_steps as u32).to_le_bytes());
                out.extend_from_slice(&c.percentile.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let n = r.u32()? as usize;
        let doc: Document = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("spec document: {e}")))?;
        let spec = doc.spec;
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        for i in 0..spec.layers.len() {
            let mut ts = Vec::new();
            for shape in spec.param_shapes(i) {
                let len = shape.iter().product();
                ts.push(Tensor::new(&shape, r.f32s(len)?)?);
            }
            let mut it = ts.into_iter();
            params.push(match spec.layers[i].kind {
                crate::network::LayerKind::Conv { .. } | crate::network::LayerKind::Linear { .. } => LayerParams::Affine {
                    weight: it.next().unwrap(),
                    bias: it.next(),
                },
                crate::network::LayerKind::BatchNorm { .. } => LayerParams::BatchNorm {
                    gamma: it.next().unwrap(),
                    beta: it.next().unwrap(),
                    running_mean: it.next().unwrap(),
                    running_var: it.next().unwrap(),
                },
                _ => LayerParams::None,
            });
        }
        let calibration = match r.take(1)?[0] {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut layers = Vec::with_capacity(n);
                for _ in 0..n {
                    layers.push(r.u32()? as usize);
                }
                let thresholds = r.f32s(n)?;
                let maxima = r.f32s(n)?;
                Some(CalibrationReport {
                    layers,
                    thresholds,
                    maxima,
                    samples: r.u32()? as usize,
                    time_steps: r.u32()? as usize,
                    percentile: r.f32s(1)?[0],
                })
            }
            f => return Err(Error::Checkpoint(format!("bad threshold flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Checkpoint::new(Network::from_params(spec, params)?, calibration, doc.meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
