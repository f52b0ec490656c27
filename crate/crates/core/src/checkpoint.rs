//! Named-tensor checkpoint container.
//!
//! ```text
//! "QCKP" | header_len u64 LE | header (UTF-8, header_len bytes) | payload
//! ```
//!
//! The header is a list of newline-terminated lines:
//!
//! ```text
//! quest-checkpoint 1
//! meta <key> <value>
//! tensor <name> <f32|f64> <d0>x<d1>x... <byte offset into payload>
//! ```
//!
//! Tensors are stored back to back, little-endian, in header order. Meta
//! lines come first, sorted by key.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{config_err, format_err, Result};
use crate::models::{ArchSpec, Mode, Model};
use crate::params::ParamSet;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QCKP";
const HEADER_TAG: &str = "quest-checkpoint 1";
/// Parameter-name prefix of the network weights.
pub const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }

    fn byte_len(&self) -> usize {
        self.shape().iter().product::<usize>() * self.dtype().size()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if !valid_token(key) || value.contains('\n') || value.contains('\r') {
            return Err(config_err!("checkpoint meta {key:?} = {value:?} is not storable"));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| config_err!("checkpoint has no '{key}' entry"))
    }

    pub fn insert(&mut self, name: &str, tensor: StoredTensor) -> Result<()> {
        if !valid_token(name) {
            return Err(config_err!("tensor name {name:?} is not storable"));
        }
        if self.get(name).is_some() {
            return Err(config_err!("duplicate tensor {name}"));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Stores every entry of `params` as f32 under `prefix`.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            self.insert(&format!("{prefix}{name}"), StoredTensor::F32(t.cast()))?;
        }
        Ok(())
    }

    /// Entries under `prefix`, with the prefix stripped, in stored order.
    pub fn params<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.to())?;
            }
        }
        Ok(out)
    }

    /// Records `arch` and stores the model weights under [`MODEL_PREFIX`].
    pub fn add_model(&mut self, model: &Model<f32>) -> Result<()> {
        self.set_meta("arch.in_channels", model.arch.in_channels)?;
        self.set_meta("arch.stages", model.arch.stages_string())?;
        self.set_meta("arch.num_classes", model.arch.num_classes)?;
        self.add_params(MODEL_PREFIX, &model.params)
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        let num = |key: &str| -> Result<usize> {
            self.meta(key)?
                .parse()
                .map_err(|_| format_err!("checkpoint meta {key} is not an integer"))
        };
        ArchSpec::new(
            num("arch.in_channels")?,
            ArchSpec::parse_stages(self.meta("arch.stages")?)?,
            num("arch.num_classes")?,
        )
    }

    /// Rebuilds the stored model; parameter shapes must agree with the
    /// recorded architecture.
    pub fn model(&self, mode: Mode) -> Result<Model<f32>> {
        Model::from_params(self.arch()?, self.params(MODEL_PREFIX)?, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_checkpoint(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_checkpoint(&std::fs::read(path)?)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = format!("{HEADER_TAG}\n");
    for (k, v) in &ckpt.meta {
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in &ckpt.tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor {name} {} {} {offset}\n", t.dtype().name(), dims.join("x")));
        offset += t.byte_len();
    }
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in &ckpt.tensors {
        match t {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| match d.parse::<usize>() {
            Ok(v) if v > 0 && d.bytes().all(|b| b.is_ascii_digit()) => Ok(v),
            _ => Err(format_err!("bad tensor shape '{s}'")),
        })
        .collect()
}

fn read_tensor(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<StoredTensor> {
    Ok(match dtype {
        DType::F32 => StoredTensor::F32(Tensor::new(
            shape,
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
        )?),
        DType::F64 => StoredTensor::F64(Tensor::new(
            shape,
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        )?),
    })
}

/// Strict decoder: the payload must be exactly the concatenation the header
/// describes, so that decode → encode reproduces the input bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err!("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(12))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err!("checkpoint header truncated"))?;
    let header = std::str::from_utf8(&bytes[12..header_end]).map_err(|_| format_err!("checkpoint header is not UTF-8"))?;
    let payload = &bytes[header_end..];
    let body = header
        .strip_suffix('\n')
        .ok_or_else(|| format_err!("checkpoint header must end with a newline"))?;
    let mut lines = body.split('\n');
    if lines.next() != Some(HEADER_TAG) {
        return Err(format_err!("unsupported checkpoint header"));
    }
    let mut ckpt = Checkpoint::new();
    let mut offset = 0usize;
    let mut last_meta: Option<String> = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("meta ") {
            if !ckpt.tensors.is_empty() {
                return Err(format_err!("meta line after tensor lines"));
            }
            let (k, v) = rest.split_once(' ').ok_or_else(|| format_err!("bad meta line '{line}'"))?;
            if !valid_token(k) || last_meta.as_deref().is_some_and(|p| p >= k) {
                return Err(format_err!("meta keys must be unique, sorted tokens: '{k}'"));
            }
            last_meta = Some(k.to_string());
            ckpt.meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, dtype, shape, off] = fields[..] else {
                return Err(format_err!("bad tensor line '{line}'"));
            };
            let dtype = DType::parse(dtype).ok_or_else(|| format_err!("unknown dtype '{dtype}'"))?;
            let shape = parse_shape(shape)?;
            if off != offset.to_string() {
                return Err(format_err!("tensor {name} at offset {off}, expected {offset}"));
            }
            let len = shape
                .iter()
                .try_fold(dtype.size(), |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err!("tensor {name} size overflows"))?;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| format_err!("checkpoint payload truncated in {name}"))?;
            let t = read_tensor(dtype, shape, &payload[offset..end])?;
            ckpt.insert(name, t).map_err(|_| format_err!("duplicate or invalid tensor name '{name}'"))?;
            offset = end;
        } else {
            return Err(format_err!("unrecognised checkpoint header line '{line}'"));
        }
    }
    if offset != payload.len() {
        return Err(format_err!("{} trailing bytes after checkpoint payload", payload.len() - offset));
    }
    Ok(ckpt)
}
