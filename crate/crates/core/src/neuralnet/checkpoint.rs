//! `NNCP1` checkpoint files: magic, a little-endian u64 manifest length, a
//! JSON manifest, then raw little-endian f32 data in manifest order.

use serde::{Deserialize, Serialize};

use super::network::{build_network, ArchitectureConfig, Network};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const MAGIC: &[u8; 5] = b"NNCP1";
const DTYPE: &str = "f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset in bytes from the start of the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ArchitectureConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (epoch, seed) written by the trainer.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl Manifest {
    pub fn has_global_branch(&self) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with("global."))
    }
}

fn entries(net: &Network) -> Vec<(TensorRole, &str, &[usize], &[f32])> {
    let params = net
        .params()
        .iter()
        .map(|p| (TensorRole::Param, p.name.as_str(), p.shape.as_slice(), p.value.as_slice()));
    let buffers = net
        .buffers()
        .iter()
        .map(|b| (TensorRole::Buffer, b.name.as_str(), b.shape.as_slice(), b.value.as_slice()));
    params.chain(buffers).collect()
}

pub fn save_checkpoint(net: &Network, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (role, name, shape, value) in entries(net) {
        tensors.push(TensorEntry {
            name: name.to_string(),
            role,
            shape: shape.to_vec(),
            offset,
            len: value.len(),
        });
        offset += value.len() * 4;
    }
    let manifest = Manifest {
        config: net.config(),
        dtype: DTYPE.into(),
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, _, value) in entries(net) {
        for v in value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses only the header.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not an NNCP1 checkpoint".into()));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes");
    let json_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Integrity("manifest length overflows".into()))?;
    let start = MAGIC.len() + 8;
    let json = bytes
        .get(start..start.saturating_add(json_len))
        .ok_or_else(|| Error::Integrity("manifest truncated".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("manifest is not valid JSON: {e}")))?;
    if manifest.dtype != DTYPE {
        return Err(Error::Integrity(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    Ok((manifest, start + json_len))
}

/// Rebuilds the network described by the manifest and fills every tensor,
/// validating names, shapes, offsets and values.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(Network, Manifest)> {
    let (manifest, data_start) = read_manifest(bytes)?;
    let data = &bytes[data_start..];
    let mut net = build_network(manifest.config, &mut SeededRng::from_seed(0))
        .map_err(|e| Error::Integrity(format!("manifest architecture is invalid: {e}")))?;
    let expected: Vec<(TensorRole, String, Vec<usize>)> = entries(&net)
        .into_iter()
        .map(|(r, n, s, _)| (r, n.to_string(), s.to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    let (mut pi, mut bi) = (0, 0);
    for (entry, (role, name, shape)) in manifest.tensors.iter().zip(&expected) {
        let count: usize = shape.iter().product();
        if entry.role != *role || entry.name != *name || entry.shape != *shape || entry.len != count {
            return Err(Error::Integrity(format!(
                "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(Error::Integrity(format!("tensor {name:?} has offset {}, expected {offset}", entry.offset)));
        }
        let raw = data
            .get(offset..offset + count * 4)
            .ok_or_else(|| Error::Integrity(format!("data for {name:?} is truncated")))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("tensor {name:?} contains non-finite values")));
        }
        match role {
            TensorRole::Param => {
                net.params_mut()[pi].value = values;
                pi += 1;
            }
            TensorRole::Buffer => {
                if name.ends_with("running_var") && values.iter().any(|&v| v < 0.0) {
                    return Err(Error::Integrity(format!("{name:?} has negative variance")));
                }
                net.buffers_mut()[bi].value = values;
                bi += 1;
            }
        }
        offset += count * 4;
    }
    if offset != data.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last tensor",
            data.len() - offset
        )));
    }
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::gradcheck::random_tensor;
    use crate::neuralnet::Mode;

    fn trained_net(global: bool) -> Network {
        let cfg = ArchitectureConfig {
            use_global_encoder: global,
            width_scale: 0.125,
        };
        let mut net = build_network(cfg, &mut SeededRng::from_seed(1)).unwrap();
        // Move the running statistics off their initial values.
        net.forward(&random_tensor([2, 3, 16, 16], 2), Mode::Train).unwrap();
        net
    }

    #[test]
    fn round_trip_preserves_everything() {
        let net = trained_net(true);
        let bytes = save_checkpoint(&net, serde_json::json!({"epoch": 3})).unwrap();
        assert_eq!(&bytes[..5], b"NNCP1");
        let (back, manifest) = load_checkpoint(&bytes).unwrap();
        assert_eq!(manifest.metadata["epoch"], 3);
        assert_eq!(back.config(), net.config());
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.value, b.value);
        }
        for (a, b) in net.buffers().iter().zip(back.buffers()) {
            assert_eq!(a.value, b.value);
        }
        let x = random_tensor([1, 3, 32, 32], 3).map_values(f32::abs);
        assert_eq!(net.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert_eq!(save_checkpoint(&back, manifest.metadata).unwrap(), bytes);
    }

    #[test]
    fn ablated_manifest_has_no_global_tensors() {
        let bytes = save_checkpoint(&trained_net(false), serde_json::Value::Null).unwrap();
        let (m, _) = read_manifest(&bytes).unwrap();
        assert!(!m.has_global_branch());
        let bytes = save_checkpoint(&trained_net(true), serde_json::Value::Null).unwrap();
        assert!(read_manifest(&bytes).unwrap().0.has_global_branch());
    }

    #[test]
    fn corruption_is_an_integrity_error() {
        let bytes = save_checkpoint(&trained_net(false), serde_json::Value::Null).unwrap();
        let check = |b: &[u8]| matches!(load_checkpoint(b), Err(Error::Integrity(_)));
        assert!(check(&bytes[..bytes.len() - 1]));
        assert!(check(b"NNCP2"));
        assert!(check(&[bytes.as_slice(), &[0, 0, 0, 0]].concat()));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(check(&bad_magic));

        // A shape edit in the manifest must be caught.
        let (mut m, start) = read_manifest(&bytes).unwrap();
        m.tensors[0].shape[0] += 1;
        let json = serde_json::to_vec(&m).unwrap();
        let mut edited = b"NNCP1".to_vec();
        edited.extend_from_slice(&(json.len() as u64).to_le_bytes());
        edited.extend_from_slice(&json);
        edited.extend_from_slice(&bytes[start..]);
        assert!(check(&edited));

        // NaN payload
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(check(&nan));
    }
}
