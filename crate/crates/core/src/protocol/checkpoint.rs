//! Binary checkpoint container.
//!
//! ```text
//! magic "FSDETCKP" | u32 version | u64 header length | JSON header | f64 LE payloads
//! ```
//!
//! The header names every parameter block with its shape; payloads follow in
//! header order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::variant::Variant;
use crate::boxes::BoxHeadParams;
use crate::classifier::ClassWeightPosterior;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mask::MaskHeadParams;
use crate::world::{FeatureExtractor, WorldConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSDETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Base,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub kind: ClassKind,
}

/// Classifier rows for the classes of a checkpoint, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierState {
    Point(Matrix<f64>),
    Posterior(ClassWeightPosterior<f64>),
    /// Softmax rows; a base checkpoint carries the background row last.
    Softmax(Matrix<f64>),
}

impl ClassifierState {
    fn tag(&self) -> &'static str {
        match self {
            ClassifierState::Point(_) => "point",
            ClassifierState::Posterior(_) => "posterior",
            ClassifierState::Softmax(_) => "softmax",
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            ClassifierState::Point(w) | ClassifierState::Softmax(w) => w.rows(),
            ClassifierState::Posterior(p) => p.classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub registry: Vec<ClassEntry>,
    pub variant: Variant,
    pub seed: u64,
    pub classifier: ClassifierState,
    pub box_head: BoxHeadParams<f64>,
    pub mask_head: MaskHeadParams<f64>,
    pub trunk: FeatureExtractor,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockDescriptor {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    variant: Variant,
    seed: u64,
    registry: Vec<ClassEntry>,
    classifier: String,
    world: WorldConfig,
    config_fingerprint: String,
    trunk_fingerprint: String,
    blocks: Vec<BlockDescriptor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn class_ids(&self) -> Vec<usize> {
        self.registry.iter().map(|e| e.id).collect()
    }

    /// Named parameter blocks in serialization order.
    pub fn blocks(&self) -> Vec<(String, &Matrix<f64>)> {
        let mut out: Vec<(String, &Matrix<f64>)> = FeatureExtractor::BLOCK_NAMES
            .iter()
            .zip(self.trunk.blocks())
            .map(|(n, m)| (format!("trunk.{n}"), m))
            .collect();
        match &self.classifier {
            ClassifierState::Point(w) | ClassifierState::Softmax(w) => out.push(("classifier.weights".into(), w)),
            ClassifierState::Posterior(p) => {
                out.push(("classifier.mu".into(), p.mu()));
                out.push(("classifier.rho".into(), p.rho()));
            }
        }
        out.push(("box.predictor".into(), &self.box_head.predictor));
        out.push(("box.refiner_in".into(), &self.box_head.refiner_in));
        out.push(("box.refiner_out".into(), &self.box_head.refiner_out));
        out.push(("mask.weights".into(), &self.mask_head.weights));
        out
    }

    /// SHA-256 of each block's little-endian payload.
    pub fn block_hashes(&self) -> BTreeMap<String, String> {
        self.blocks()
            .into_iter()
            .map(|(n, m)| {
                let mut h = Sha256::new();
                for v in m.as_slice() {
                    h.update(v.to_le_bytes());
                }
                (n, hex::encode(h.finalize()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<usize> = self.registry.iter().map(|e| e.id).collect();
        if ids.len() != self.registry.len() {
            return Err(corrupt("class registry has duplicate ids"));
        }
        let has_base = self.registry.iter().any(|e| e.kind == ClassKind::Base);
        if has_base && matches!(self.classifier, ClassifierState::Posterior(_)) {
            return Err(corrupt("base classes cannot carry a posterior"));
        }
        let n = self.registry.len();
        let expected_rows = match &self.classifier {
            ClassifierState::Softmax(_) if has_base => n + 1,
            _ => n,
        };
        if self.classifier.rows() != expected_rows
            || self.box_head.classes() != n
            || self.mask_head.classes() != n
        {
            return Err(corrupt("parameter rows disagree with the class registry"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks = self.blocks();
        let header = Header {
            variant: self.variant,
            seed: self.seed,
            registry: self.registry.clone(),
            classifier: self.classifier.tag().into(),
            world: self.trunk.config().clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            trunk_fingerprint: self.trunk.fingerprint(),
            blocks: blocks
                .iter()
                .map(|(n, m)| BlockDescriptor {
                    name: n.clone(),
                    shape: m.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in blocks {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + len;
        let mut blocks: BTreeMap<String, Matrix<f64>> = BTreeMap::new();
        for d in &header.blocks {
            let n = d.shape[0] * d.shape[1];
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| corrupt(format!("truncated block {}", d.name)))?;
            cursor += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.insert(d.name.clone(), Matrix::from_vec(d.shape[0], d.shape[1], data)?);
        }
        if cursor != bytes.len() {
            return Err(corrupt("trailing bytes after the last block"));
        }
        let mut take = |name: &str| blocks.remove(name).ok_or_else(|| corrupt(format!("missing block {name}")));
        let trunk = FeatureExtractor::from_blocks(
            &header.world,
            [
                take("trunk.prototypes")?,
                take("trunk.appearance_in")?,
                take("trunk.appearance_out")?,
                take("trunk.geometry_in")?,
            ],
        )?;
        if trunk.fingerprint() != header.trunk_fingerprint {
            return Err(corrupt("trunk fingerprint does not match its weights"));
        }
        let classifier = match header.classifier.as_str() {
            "point" => ClassifierState::Point(take("classifier.weights")?),
            "softmax" => ClassifierState::Softmax(take("classifier.weights")?),
            "posterior" => {
                ClassifierState::Posterior(ClassWeightPosterior::new(take("classifier.mu")?, take("classifier.rho")?)?)
            }
            other => return Err(corrupt(format!("unknown classifier kind `{other}`"))),
        };
        let box_head = BoxHeadParams {
            predictor: take("box.predictor")?,
            refiner_in: take("box.refiner_in")?,
            refiner_out: take("box.refiner_out")?,
        };
        let mask_head = MaskHeadParams {
            weights: take("mask.weights")?,
        };
        let ckpt = Self {
            registry: header.registry,
            variant: header.variant,
            seed: header.seed,
            classifier,
            box_head,
            mask_head,
            trunk,
            config_fingerprint: header.config_fingerprint,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
