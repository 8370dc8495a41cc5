//! Checkpoint file format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SPRTCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     header, UTF-8 JSON (`CheckpointHeader`)
//! 20+H    ...   parameter blobs, f64 little-endian, in header order
//! ```
//!
//! The header records dimensions, estimator kind, seed, the task the model
//! was trained on, and the name and shape of every tensor. Blob lengths
//! follow from the shapes; trailing bytes are an error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ToyModelSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::trainer::TaskSpec;

const MAGIC: &[u8; 8] = b"SPRTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ToyModelSpec,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub task: Option<TaskSpec>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

pub fn encode_checkpoint(
    spec: &ToyModelSpec,
    params: &ModelParams,
    seed: u64,
    task: Option<&TaskSpec>,
) -> Result<Vec<u8>> {
    let tensors = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        model: spec.clone(),
        estimator: spec.blocks[0].estimator.kind,
        seed,
        task: task.cloned(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    header.model.validate()?;

    // Build a template with the right structure, then fill it.
    let mut params = ModelParams::init(&header.model, &mut crate::rng::SplitRng::new(0));
    let names = params.names();
    if names.len() != header.tensors.len() {
        return Err(bad("tensor count does not match the model"));
    }
    let mut offset = 20 + hlen;
    for ((slot, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let n = slot.len();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad("truncated parameters"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::new(&entry.shape, values)?;
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint(
    path: &Path,
    spec: &ToyModelSpec,
    params: &ModelParams,
    seed: u64,
    task: Option<&TaskSpec>,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(spec, params, seed, task)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::BalanceConfig;
    use crate::estimators::EstimatorConfig;
    use crate::model::MoELayerSpec;
    use crate::rng::SplitRng;
    use proptest::prelude::*;

    fn spec(depth: usize, n: usize) -> ToyModelSpec {
        ToyModelSpec::uniform(
            depth,
            MoELayerSpec {
                n_expert: n,
                top_k: 1,
                d_model: 3,
                d_inner: 4,
                estimator: EstimatorConfig::sparsemixer_v2_star(),
                balance: BalanceConfig::new(n),
            },
            2,
        )
    }

    proptest! {
        #[test]
        fn round_trip(depth in 1usize..3, n in 1usize..4, seed in any::<u64>()) {
            let s = spec(depth, n);
            let p = ModelParams::init(&s, &mut SplitRng::new(seed));
            let bytes = encode_checkpoint(&s, &p, seed, None).unwrap();
            let ck = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(&ck.header.model, &s);
            prop_assert_eq!(ck.header.seed, seed);
            for (a, b) in ck.params.tensors().iter().zip(p.tensors()) {
                prop_assert_eq!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn layout_is_documented() {
        let s = spec(1, 2);
        let p = ModelParams::init(&s, &mut SplitRng::new(1));
        let bytes = encode_checkpoint(&s, &p, 7, None).unwrap();
        assert_eq!(&bytes[..8], b"SPRTCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + h]).unwrap();
        assert_eq!(header["estimator"], "sparsemixer_v2_star");
        assert_eq!(header["seed"], 7);
        assert_eq!(bytes.len(), 20 + h + 8 * p.num_values());
        let first = f64::from_le_bytes(bytes[20 + h..28 + h].try_into().unwrap());
        assert_eq!(first, p.blocks[0].router.weight.values()[0]);
    }

    #[test]
    fn corruption_detected() {
        let s = spec(1, 2);
        let p = ModelParams::init(&s, &mut SplitRng::new(1));
        let mut bytes = encode_checkpoint(&s, &p, 7, None).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
        assert!(decode_checkpoint(b"nonsense").is_err());
    }
}
