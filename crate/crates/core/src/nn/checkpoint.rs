//! Parameter checkpoints: one JSON header line, then the parameters as a
//! flat little-endian `f64` payload in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "forcegrasp.checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
    payload_values: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), NnError> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            step: self.step,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            payload_values: self.tensors.iter().map(|(_, t)| t.len()).sum(),
        };
        let json =
            serde_json::to_string(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        out.write_all(json.as_bytes())?;
        out.write_all(b"\n")?;
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut input: R) -> Result<Checkpoint, NnError> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let declared: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if declared != header.payload_values {
            return Err(NnError::Checkpoint(format!(
                "shape manifest covers {declared} values but header declares {}",
                header.payload_values
            )));
        }
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        if payload.len() != 8 * declared {
            return Err(NnError::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                8 * declared
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFinite(format!(
                    "checkpoint tensor {}",
                    entry.name
                )));
            }
            tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
        }
        Ok(Checkpoint {
            seed: header.seed,
            step: header.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NnError> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }

    /// Fetch a tensor by name, checking its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor, NnError> {
        let (_, t) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(NnError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }
}
