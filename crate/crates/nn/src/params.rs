//! Named parameter storage, graph binding and flat checkpoints.
//!
//! A checkpoint is a directory holding `params.f32` (every tensor as
//! little-endian `f32` in C order, concatenated in store order) and
//! `manifest.json` (names, shapes, offsets, a SHA-256 of the parameter
//! bytes, plus caller-supplied metadata).

use std::cell::RefCell;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Shape, Tensor};
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Parameter bytes as written to `params.f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 4);
        for t in &self.values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<(), NnError> {
        fs::create_dir_all(dir)?;
        let bytes = self.to_bytes();
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: t.shape(),
                    offset,
                };
                offset += t.numel();
                entry
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.to_string(),
            content_hash: hex_digest(&bytes),
            tensors,
            metadata,
        };
        fs::write(dir.join("params.f32"), &bytes)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value), NnError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != FORMAT {
            return Err(NnError::Checkpoint(format!("unknown checkpoint format {}", manifest.format)));
        }
        let bytes = fs::read(dir.join("params.f32"))?;
        if bytes.len() % 4 != 0 {
            return Err(NnError::Checkpoint("params.f32 length is not a multiple of 4".into()));
        }
        if hex_digest(&bytes) != manifest.content_hash {
            return Err(NnError::Checkpoint("params.f32 does not match manifest hash".into()));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let Some(slice) = floats.get(e.offset..e.offset + n) else {
                return Err(NnError::Checkpoint(format!("tensor {} overruns params.f32", e.name)));
            };
            store.add(e.name, Tensor::from_vec(e.shape, slice.to_vec()));
        }
        Ok((store, manifest.metadata))
    }

    /// Copy values from `other`, matching by name and shape.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let Some(j) = other.find(name) else {
                return Err(NnError::Checkpoint(format!("checkpoint lacks tensor {name}")));
            };
            let src = other.get(j);
            if src.shape() != self.values[i].shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

const FORMAT: &str = "named-f32le-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Shape,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    content_hash: String,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// He-uniform initialisation for a conv weight `[out, in, kh, kw]`.
pub fn he_uniform(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Glorot-uniform initialisation, used for layers followed by a
/// saturating nonlinearity.
pub fn glorot_uniform(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let rf = (shape[2] * shape[3]) as f32;
    let fan = (shape[0] as f32 + shape[1] as f32) * rf;
    let bound = (6.0 / fan.max(1.0)).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Binds store parameters into one graph. Each parameter becomes a leaf
/// the first time it is requested.
pub struct Binder<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    trainable: bool,
}

impl<'g> Binder<'g> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(graph: &'g Graph, store: &'g ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let t = self.store.get(id).clone();
            if self.trainable {
                self.graph.input(t)
            } else {
                self.graph.constant(t)
            }
        })
    }

    /// Gradients aligned with the store; `None` for parameters that did not
    /// take part in the graph.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}
