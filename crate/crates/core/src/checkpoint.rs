//! Binary tensor container used for model and training-state checkpoints.
//!
//! Layout: the magic bytes `MPQECKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header
//! `{"meta": ..., "tensors": [{"name", "rows", "cols"}, ...]}`, then every
//! tensor's values as little-endian `f64` in header order. Values round-trip
//! bit for bit.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, Mlp, ModelParams, ModelShape, RgcnLayer};
use crate::kg::KnowledgeGraph;
use crate::numerics::{Matrix, Param, Parameterized};
use crate::util::sha256_hex;

pub const MAGIC: &[u8; 8] = b"MPQECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
}

impl CheckpointError {
    fn format(msg: impl Into<String>) -> Self {
        CheckpointError::Format(msg.into())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.push((name.into(), m.clone()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorHeader { name: name.clone(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, m) in &self.tensors {
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let io_err = |e: io::Error| CheckpointError::format(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::format("bad magic bytes"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io_err)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::format(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io_err)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut buf = [0u8; 8];
        for t in header.tensors {
            let n = t.rows * t.cols;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(io_err)?;
                data.push(f64::from_le_bytes(buf));
            }
            let m = Matrix::from_vec(t.rows, t.cols, data).map_err(|e| CheckpointError::format(e.to_string()))?;
            tensors.push((t.name, m));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io_err)? != 0 {
            return Err(CheckpointError::format("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let wrap = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let f = File::create(path).map_err(wrap)?;
        self.write_to(BufWriter::new(f)).map_err(wrap)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = File::open(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Checkpoint::read_from(BufReader::new(f))
    }
}

/// Identifies the entity, relation and type vocabularies a model was
/// trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entities: usize,
    pub relations: usize,
    pub types: usize,
    pub digest: String,
    /// Digest of the `entity\ttype` listing in id order.
    pub typing_digest: String,
}

impl Vocabulary {
    pub fn of(g: &KnowledgeGraph) -> Self {
        let mut text = String::new();
        for (section, labels) in [("E", g.entity_labels()), ("R", g.relation_labels()), ("T", g.type_labels())] {
            text.push_str(section);
            text.push('\n');
            for l in labels {
                text.push_str(l);
                text.push('\n');
            }
        }
        for e in 0..g.entity_count() {
            text.push_str(&g.type_of(e.into()).to_string());
            text.push('\n');
        }
        let mut typing = Vec::new();
        g.write_types(&mut typing).expect("writing to memory");
        Vocabulary {
            entities: g.entity_count(),
            relations: g.relation_count(),
            types: g.type_count(),
            digest: sha256_hex(text.as_bytes()),
            typing_digest: sha256_hex(&typing),
        }
    }

    /// Digest comparable to `typing_digest` for `(entity, type)` rows.
    pub fn typing_digest_of<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
        let mut text = String::new();
        for (e, t) in rows {
            text.push_str(e);
            text.push('\t');
            text.push_str(t);
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }

    pub fn check(&self, g: &KnowledgeGraph) -> Result<(), CheckpointError> {
        let other = Vocabulary::of(g);
        if *self != other {
            return Err(CheckpointError::Vocabulary(format!(
                "model has {}/{}/{} entities/relations/types (digest {}), graph has {}/{}/{} (digest {})",
                self.entities,
                self.relations,
                self.types,
                &self.digest[..12],
                other.entities,
                other.relations,
                other.types,
                &other.digest[..12]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    shape: ModelShape,
    encoder: Encoder,
    vocabulary: Vocabulary,
}

/// A trained model: parameters plus everything needed to encode queries
/// with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParams,
    pub encoder: Encoder,
    pub vocabulary: Vocabulary,
}

/// Appends every parameter of `p` under `prefix`.
pub fn push_params(ck: &mut Checkpoint, prefix: &str, p: &ModelParams) {
    for param in p.params() {
        ck.push(format!("{prefix}{}", param.name), &param.value);
    }
}

/// Rebuilds parameters of `shape` from tensors stored under `prefix`.
pub fn read_params(ck: &Checkpoint, prefix: &str, shape: ModelShape) -> Result<ModelParams, CheckpointError> {
    let load = |name: String, sparse: bool, rows: usize, cols: usize| -> Result<Param, CheckpointError> {
        let m = ck.tensor(&format!("{prefix}{name}"))?;
        if m.shape() != (rows, cols) {
            return Err(CheckpointError::format(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        Ok(if sparse { Param::row_sparse(name, m.clone()) } else { Param::new(name, m.clone()) })
    };
    let d = shape.dim;
    let r = shape.relations;
    let layers = (0..shape.layers)
        .map(|l| -> Result<RgcnLayer, CheckpointError> {
            Ok(RgcnLayer {
                self_weight: load(format!("layer{l}.self"), false, d, d)?,
                relation_weights: (0..2 * r)
                    .map(|slot| {
                        let name = if slot < r {
                            format!("layer{l}.rel{slot}")
                        } else {
                            format!("layer{l}.rel{}_inv", slot - r)
                        };
                        load(name, false, d, d)
                    })
                    .collect::<Result<_, _>>()?,
            })
        })
        .collect::<Result<_, _>>()?;
    let mlp = if shape.cmlp {
        Some(Mlp {
            hidden: load("mlp.hidden".into(), false, d, shape.layers * d)?,
            hidden_bias: load("mlp.hidden_bias".into(), false, 1, d)?,
            output: load("mlp.output".into(), false, d, d)?,
            output_bias: load("mlp.output_bias".into(), false, 1, d)?,
        })
    } else {
        None
    };
    Ok(ModelParams {
        shape,
        entity: load("entity".into(), true, shape.entities, d)?,
        types: load("type".into(), true, shape.types, d)?,
        layers,
        mlp,
    })
}

impl ModelCheckpoint {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = ModelMeta {
            kind: "model".into(),
            shape: self.params.shape,
            encoder: self.encoder,
            vocabulary: self.vocabulary.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("serializable"));
        push_params(&mut ck, "", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| CheckpointError::format(format!("model header: {e}")))?;
        if meta.kind != "model" {
            return Err(CheckpointError::format(format!("expected a model checkpoint, found `{}`", meta.kind)));
        }
        Ok(ModelCheckpoint {
            params: read_params(ck, "", meta.shape)?,
            encoder: meta.encoder,
            vocabulary: meta.vocabulary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        ModelCheckpoint::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, AggregatorKind};
    use crate::synthetic::{five_entity_graph, ten_entity_graph};

    fn model() -> ModelCheckpoint {
        let g = five_entity_graph();
        let shape = ModelShape {
            entities: g.entity_count(),
            types: g.type_count(),
            relations: g.relation_count(),
            dim: 6,
            layers: 3,
            cmlp: true,
        };
        ModelCheckpoint {
            params: init_params(shape, 11),
            encoder: Encoder::new(AggregatorKind::Cmlp),
            vocabulary: Vocabulary::of(&g),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut bytes = Vec::new();
        m.to_checkpoint().write_to(&mut bytes).unwrap();
        let back = ModelCheckpoint::from_checkpoint(&Checkpoint::read_from(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.to_checkpoint().write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn special_values_survive() {
        let mut ck = Checkpoint::new(serde_json::json!({"k": 1}));
        ck.push("x", &Matrix::from_rows(&[vec![-0.0, f64::MIN_POSITIVE, 1e308, 0.1 + 0.2]]).unwrap());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        let a: Vec<u64> = ck.tensors[0].1.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.tensors[0].1.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        model().to_checkpoint().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice()), Err(CheckpointError::Format(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::read_from(truncated).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
    }

    #[test]
    fn vocabulary_mismatch_detected() {
        let m = model();
        assert!(m.vocabulary.check(&five_entity_graph()).is_ok());
        assert!(matches!(m.vocabulary.check(&ten_entity_graph()), Err(CheckpointError::Vocabulary(_))));
    }
}
