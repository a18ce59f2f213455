//! Checkpoint archives: a text manifest (ordered parameter names and
//! shapes) followed by the concatenated little-endian f64 payload in
//! manifest order. Loading is name-addressed, so a permuted manifest still
//! restores correctly; shape or name-set mismatches are rejected outright.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;

const MAGIC: &str = "nae-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic line {0:?}")]
    BadMagic(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("payload is {got} bytes, manifest requires {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("checkpoint has no parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint parameter {0:?} is not part of this model")]
    UnknownParam(String),
    #[error("shape mismatch for {name}: checkpoint {ckpt:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        ckpt: Vec<usize>,
        model: Vec<usize>,
    },
}

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("params {}\n", store.len()));
    for p in store.iter() {
        let dims: Vec<String> = p.tensor.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {}\n", p.name, dims.join("x")));
    }
    manifest.push_str("end\n");
    let mut bytes = manifest.into_bytes();
    for p in store.iter() {
        for v in &p.tensor.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(store))?;
    Ok(())
}

fn parse_manifest(bytes: &[u8]) -> Result<(Vec<(String, Vec<usize>)>, usize), CheckpointError> {
    let mut entries = Vec::new();
    let mut at = 0usize;
    let mut lineno = 0usize;
    let mut declared: Option<usize> = None;
    loop {
        let rest = &bytes[at..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::CorruptManifest("unterminated header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| CheckpointError::CorruptManifest("non-utf8 header".into()))?;
        at += nl + 1;
        lineno += 1;
        if lineno == 1 {
            if line != MAGIC {
                return Err(CheckpointError::BadMagic(line.to_string()));
            }
            continue;
        }
        if lineno == 2 {
            let count = line
                .strip_prefix("params ")
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| CheckpointError::CorruptManifest(format!("bad count {line:?}")))?;
            declared = Some(count);
            continue;
        }
        if line == "end" {
            break;
        }
        let (name, dims) = line
            .rsplit_once(' ')
            .ok_or_else(|| CheckpointError::CorruptManifest(format!("bad entry {line:?}")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::CorruptManifest(format!("bad shape {dims:?}")))?;
        entries.push((name.to_string(), shape));
    }
    let declared =
        declared.ok_or_else(|| CheckpointError::CorruptManifest("missing count".into()))?;
    if entries.len() != declared {
        return Err(CheckpointError::CorruptManifest(format!(
            "declared {declared} params, listed {}",
            entries.len()
        )));
    }
    Ok((entries, at))
}

/// Restore parameter values by name. Optimizer moments are reset; loading
/// is for inference or a fresh schedule.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let bytes = fs::read(path)?;
    load_checkpoint_bytes(store, &bytes)
}

pub fn load_checkpoint_bytes(
    store: &mut ParamStore,
    bytes: &[u8],
) -> Result<(), CheckpointError> {
    let (entries, payload_at) = parse_manifest(bytes)?;
    let payload = &bytes[payload_at..];
    let total: usize = entries
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(CheckpointError::PayloadLength {
            expected: total * 8,
            got: payload.len(),
        });
    }
    for (name, _) in &entries {
        if !store.contains(name) {
            return Err(CheckpointError::UnknownParam(name.clone()));
        }
    }
    let mut loaded: HashMap<&str, (&[usize], Vec<f64>)> = HashMap::new();
    let mut offset = 0usize;
    for (name, shape) in &entries {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = payload[offset..offset + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += numel * 8;
        loaded.insert(name.as_str(), (shape.as_slice(), data));
    }
    // verify the full name set and all shapes before mutating anything
    for p in store.iter() {
        let (shape, _) = loaded
            .get(p.name.as_str())
            .ok_or_else(|| CheckpointError::MissingParam(p.name.clone()))?;
        if *shape != p.tensor.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                ckpt: shape.to_vec(),
                model: p.tensor.shape.clone(),
            });
        }
    }
    for p in store.iter_mut() {
        let (_, data) = loaded.remove(p.name.as_str()).expect("verified above");
        p.tensor.data = data;
        p.tensor.grad = None;
        p.m.iter_mut().for_each(|v| *v = 0.0);
        p.v.iter_mut().for_each(|v| *v = 0.0);
        p.step = 0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        ps.register_xavier("a.w", 2, 3, &mut rng).unwrap();
        ps.register_xavier("b.w", 4, 1, &mut rng).unwrap();
        ps.register("c", Tensor::new(vec![1, 1], vec![14.3]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ps = store();
        let bytes = checkpoint_bytes(&ps);
        let mut restored = store();
        restored.get_mut("a.w").unwrap().tensor.data[0] = 999.0;
        load_checkpoint_bytes(&mut restored, &bytes).unwrap();
        assert_eq!(checkpoint_bytes(&restored), bytes);
    }

    #[test]
    fn permuted_manifest_loads_by_name() {
        let ps = store();
        let bytes = checkpoint_bytes(&ps);
        // rebuild the archive with entries (and payload blocks) swapped
        let text_end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let header = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
        let mut lines: Vec<&str> = header.lines().collect();
        lines.swap(2, 3); // swap "a.w ..." and "b.w ..."
        let mut permuted = lines.join("\n").into_bytes();
        permuted.push(b'\n');
        let a = &ps.get("a.w").unwrap().tensor.data;
        let b = &ps.get("b.w").unwrap().tensor.data;
        let c = &ps.get("c").unwrap().tensor.data;
        for v in b.iter().chain(a).chain(c) {
            permuted.extend_from_slice(&v.to_le_bytes());
        }
        let mut restored = store();
        restored.get_mut("b.w").unwrap().tensor.data[0] = -1.0;
        load_checkpoint_bytes(&mut restored, &permuted).unwrap();
        assert_eq!(&restored.get("a.w").unwrap().tensor.data, a);
        assert_eq!(&restored.get("b.w").unwrap().tensor.data, b);
    }

    #[test]
    fn truncated_payload_rejected_without_partial_load() {
        let ps = store();
        let mut bytes = checkpoint_bytes(&ps);
        bytes.truncate(bytes.len() - 8);
        let mut restored = store();
        let before = restored.get("a.w").unwrap().tensor.data.clone();
        let err = load_checkpoint_bytes(&mut restored, &bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::PayloadLength { .. }));
        assert_eq!(restored.get("a.w").unwrap().tensor.data, before);
    }

    #[test]
    fn shape_and_name_mismatches_rejected() {
        let ps = store();
        let bytes = checkpoint_bytes(&ps);
        let mut other = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        other.register_xavier("a.w", 3, 2, &mut rng).unwrap(); // transposed shape
        other.register_xavier("b.w", 4, 1, &mut rng).unwrap();
        other
            .register("c", Tensor::new(vec![1, 1], vec![0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            load_checkpoint_bytes(&mut other, &bytes),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        let mut extra = store();
        extra
            .register("d", Tensor::new(vec![1, 1], vec![0.0]).unwrap())
            .unwrap();
        assert!(matches!(
            load_checkpoint_bytes(&mut extra, &bytes),
            Err(CheckpointError::MissingParam(_))
        ));
    }
}
