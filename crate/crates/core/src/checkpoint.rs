//! Checkpoints: a JSON manifest next to a little-endian f32 blob.
//!
//! `<stem>.json` lists every tensor with its shape and byte offset into
//! `<stem>.bin`; tensors are row-major and concatenated in manifest order.
//! Values are stored as f32, so a loaded checkpoint saves back to identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{EmaTeacher, TeacherSet};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::moe::{DenseFfn, MoeLayer};
use crate::train::{Block, ToyModel};
use crate::upcycle::ActivationBank;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    Dense,
    Moe {
        n_experts: usize,
        k: usize,
        /// `null` for unbounded capacity.
        capacity_factor: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub blocks: Vec<BlockSpec>,
    /// EMA coefficient per MoE site when teachers are stored.
    pub teacher_beta: Option<f64>,
    pub teacher_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Model,
    ActivationBank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    pub architecture: Option<Architecture>,
    pub token_cap: Option<usize>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
}

/// Manifest plus tensor values in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Vec<f64>>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Sibling blob path for a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

struct Builder {
    tensors: Vec<TensorEntry>,
    values: Vec<Vec<f64>>,
    offset: usize,
}

impl Builder {
    fn new() -> Self {
        Self {
            tensors: Vec::new(),
            values: Vec::new(),
            offset: 0,
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        let nbytes = data.len() * 4;
        self.tensors.push(TensorEntry {
            name,
            shape,
            offset: self.offset,
            nbytes,
        });
        self.offset += nbytes;
        // round through f32 so in-memory values match what is written
        self.values.push(data.iter().map(|&v| v as f32 as f64).collect());
    }

    fn matrix(&mut self, name: String, m: &DenseMatrix) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice());
    }

    fn ffn(&mut self, prefix: &str, f: &DenseFfn) {
        self.matrix(format!("{prefix}.w1"), &f.w1);
        self.push(format!("{prefix}.b1"), vec![f.b1.len()], &f.b1);
        self.matrix(format!("{prefix}.w2"), &f.w2);
        self.push(format!("{prefix}.b2"), vec![f.b2.len()], &f.b2);
    }

    fn moe(&mut self, prefix: &str, m: &MoeLayer) {
        self.matrix(format!("{prefix}.router"), &m.router);
        for (i, e) in m.experts.iter().enumerate() {
            self.ffn(&format!("{prefix}.experts.{i}"), e);
        }
    }
}

struct Reader<'a> {
    ck: &'a Checkpoint,
    pos: usize,
}

impl Reader<'_> {
    fn next(&mut self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let entry = self
            .ck
            .manifest
            .tensors
            .get(self.pos)
            .ok_or_else(|| ck(format!("missing tensor {name}")))?;
        if entry.name != name || entry.shape != shape {
            return Err(ck(format!(
                "expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
        let v = &self.ck.values[self.pos];
        self.pos += 1;
        Ok(v)
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<DenseMatrix> {
        let v = self.next(&name, &[rows, cols])?.to_vec();
        DenseMatrix::new(rows, cols, v)
    }

    fn vector(&mut self, name: String, len: usize) -> Result<Vec<f64>> {
        Ok(self.next(&name, &[len])?.to_vec())
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> Result<DenseFfn> {
        let w1 = self.matrix(format!("{prefix}.w1"), h, d)?;
        let b1 = self.vector(format!("{prefix}.b1"), h)?;
        let w2 = self.matrix(format!("{prefix}.w2"), d, h)?;
        let b2 = self.vector(format!("{prefix}.b2"), d)?;
        DenseFfn::new(w1, b1, w2, b2)
    }

    fn moe(&mut self, prefix: &str, d: usize, h: usize, n: usize, k: usize, cf: f64) -> Result<MoeLayer> {
        let router = self.matrix(format!("{prefix}.router"), n, d)?;
        let experts = (0..n)
            .map(|i| self.ffn(&format!("{prefix}.experts.{i}"), d, h))
            .collect::<Result<_>>()?;
        MoeLayer::new(experts, router, k, cf)
    }
}

impl Checkpoint {
    /// Model checkpoint; teachers, when given, follow the model tensors.
    pub fn from_model(
        model: &ToyModel,
        teachers: Option<&TeacherSet>,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
    ) -> Result<Self> {
        let mut b = Builder::new();
        let mut blocks = Vec::with_capacity(model.blocks.len());
        let mut hidden_dim = 0;
        for (i, block) in model.blocks.iter().enumerate() {
            match block {
                Block::Dense(f) => {
                    hidden_dim = f.hidden_dim();
                    b.ffn(&format!("blocks.{i}.ffn"), f);
                    blocks.push(BlockSpec::Dense);
                }
                Block::Moe(m) => {
                    hidden_dim = m.hidden_dim();
                    b.moe(&format!("blocks.{i}.moe"), m);
                    blocks.push(BlockSpec::Moe {
                        n_experts: m.n_experts(),
                        k: m.k,
                        capacity_factor: m.capacity_factor.is_finite().then_some(m.capacity_factor),
                    });
                }
            }
        }
        b.matrix("head".into(), &model.head);
        let (mut beta, mut steps) = (None, None);
        if let Some(set) = teachers {
            if set.sites != model.moe_sites() {
                return Err(ck("teacher sites differ from model MoE sites"));
            }
            for (site, t) in set.sites.iter().zip(&set.teachers) {
                b.moe(&format!("teachers.{site}"), &t.mirror);
            }
            beta = set.teachers.first().map(|t| t.beta);
            steps = set.teachers.first().map(|t| t.step_count);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: ArtifactKind::Model,
            dtype: DTYPE.into(),
            blob: String::new(),
            tensors: b.tensors,
            architecture: Some(Architecture {
                input_dim: model.input_dim,
                hidden_dim,
                n_classes: model.n_classes(),
                blocks,
                teacher_beta: beta,
                teacher_steps: steps,
            }),
            token_cap: None,
            config,
            seeds,
        };
        Ok(Self {
            manifest,
            values: b.values,
        })
    }

    pub fn to_model(&self) -> Result<(ToyModel, Option<TeacherSet>)> {
        let arch = match (&self.manifest.kind, &self.manifest.architecture) {
            (ArtifactKind::Model, Some(a)) => a,
            _ => return Err(ck("not a model checkpoint")),
        };
        let (d, h) = (arch.input_dim, arch.hidden_dim);
        let mut r = Reader { ck: self, pos: 0 };
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (i, spec) in arch.blocks.iter().enumerate() {
            blocks.push(match spec {
                BlockSpec::Dense => Block::Dense(r.ffn(&format!("blocks.{i}.ffn"), d, h)?),
                BlockSpec::Moe {
                    n_experts,
                    k,
                    capacity_factor,
                } => Block::Moe(r.moe(&format!("blocks.{i}.moe"), d, h, *n_experts, *k, capacity_factor.unwrap_or(f64::INFINITY))?),
            });
        }
        let head = r.matrix("head".into(), arch.n_classes, d)?;
        let model = ToyModel {
            input_dim: d,
            blocks,
            head,
        };
        let teachers = match arch.teacher_beta {
            None => None,
            Some(beta) => {
                let sites = model.moe_sites();
                let mut teachers = Vec::with_capacity(sites.len());
                for &s in &sites {
                    let student = model.moe_layer(s).expect("moe site");
                    let mirror = r.moe(
                        &format!("teachers.{s}"),
                        d,
                        h,
                        student.n_experts(),
                        student.k,
                        student.capacity_factor,
                    )?;
                    teachers.push(EmaTeacher {
                        mirror,
                        beta,
                        step_count: arch.teacher_steps.unwrap_or(0),
                    });
                }
                Some(TeacherSet { sites, teachers })
            }
        };
        if r.pos != self.values.len() {
            return Err(ck("unexpected trailing tensors"));
        }
        Ok((model, teachers))
    }

    pub fn from_bank(
        bank: &ActivationBank,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
    ) -> Self {
        let mut b = Builder::new();
        for (site, x) in &bank.per_site {
            b.matrix(format!("sites.{site}"), x);
        }
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: ArtifactKind::ActivationBank,
                dtype: DTYPE.into(),
                blob: String::new(),
                tensors: b.tensors,
                architecture: None,
                token_cap: Some(bank.token_cap),
                config,
                seeds,
            },
            values: b.values,
        }
    }

    pub fn to_bank(&self) -> Result<ActivationBank> {
        if self.manifest.kind != ArtifactKind::ActivationBank {
            return Err(ck("not an activation bank"));
        }
        let mut per_site = BTreeMap::new();
        for (entry, v) in self.manifest.tensors.iter().zip(&self.values) {
            let site: usize = entry
                .name
                .strip_prefix("sites.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ck(format!("bad tensor name {}", entry.name)))?;
            let [rows, cols] = entry.shape[..] else {
                return Err(ck(format!("tensor {} is not a matrix", entry.name)));
            };
            per_site.insert(site, DenseMatrix::new(rows, cols, v.clone())?);
        }
        Ok(ActivationBank {
            per_site,
            token_cap: self.manifest.token_cap.unwrap_or(0),
        })
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        let total: usize = self.manifest.tensors.iter().map(|t| t.nbytes).sum();
        let mut out = Vec::with_capacity(total);
        for v in &self.values {
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    /// Writes `<path>` (manifest) and its `.bin` sibling.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let mut manifest = self.manifest.clone();
        manifest.blob = blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| ck(e.to_string()))?;
        text.push('\n');
        fs::write(path, text)?;
        fs::write(blob, self.blob_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ck(format!("{}: {e}", path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ck(format!("format version {}", manifest.format_version)));
        }
        if manifest.dtype != DTYPE {
            return Err(ck(format!("dtype {}", manifest.dtype)));
        }
        let blob_file = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob_file)
            .map_err(|e| Error::Io(format!("{}: {e}", blob_file.display())))?;
        let mut offset = 0;
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let count: usize = t.shape.iter().product();
            if t.offset != offset || t.nbytes != count * 4 {
                return Err(ck(format!("inconsistent layout for {}", t.name)));
            }
            let end = offset + t.nbytes;
            let chunk = bytes
                .get(offset..end)
                .ok_or_else(|| ck(format!("blob too short for {}", t.name)))?;
            values.push(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            );
            offset = end;
        }
        if offset != bytes.len() {
            return Err(ck(format!(
                "blob has {} bytes, manifest describes {offset}",
                bytes.len()
            )));
        }
        Ok(Self { manifest, values })
    }
}
