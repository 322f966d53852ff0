//! Versioned binary checkpoint files.
//!
//! Layout (all little-endian):
//!   magic "DGSC" | format version u32 | provenance digest [u8; 8]
//!   | step u64 | param count u64 | has_optimizer_state u8 | pad [u8; 7]
//!   | params f64[n] | adam_m f64[n] | adam_v f64[n] (if has state)
//!   | checksum u64 over every preceding byte
//!
//! Parameters are stored as 64-bit floats in layout order regardless of
//! training precision; the optimizer moments make reload-and-continue
//! bit-exact, and the counter-based RNG streams are positioned by `step`
//! alone.

use crate::error::{CoreError, Result};
use crate::io::config::digest_hex;
use crate::params::{Layout, ParameterVector};
use crate::train::Checkpoint;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

const MAGIC: &[u8; 4] = b"DGSC";
const FORMAT_VERSION: u32 = 1;

fn checksum64(bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dgsc.ckpt.v1");
    h.update(bytes);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, digest: &[u8; 8]) -> Result<()> {
    let n = ckpt.params.len();
    let has_opt = !ckpt.adam_m.is_empty();
    if has_opt && (ckpt.adam_m.len() != n || ckpt.adam_v.len() != n) {
        return Err(CoreError::shape("optimizer state length mismatch"));
    }
    let mut buf = Vec::with_capacity(32 + 8 * n * if has_opt { 3 } else { 1 } + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.push(has_opt as u8);
    buf.extend_from_slice(&[0u8; 7]);
    for &v in &ckpt.params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if has_opt {
        for &v in &ckpt.adam_m {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &ckpt.adam_v {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and verify magic, version, checksum, and (when given) the
/// expected provenance digest. Returns the checkpoint and the digest
/// stored in the file.
pub fn load_checkpoint(
    path: &Path,
    layout: Arc<Layout>,
    expected_digest: Option<&[u8; 8]>,
) -> Result<(Checkpoint, [u8; 8])> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 40 {
        return Err(CoreError::Format(format!(
            "checkpoint `{}` is truncated ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    let (body, stored_sum) = buf.split_at(buf.len() - 8);
    if checksum64(body) != u64::from_le_bytes(stored_sum.try_into().expect("8 bytes")) {
        return Err(CoreError::Integrity(format!(
            "checksum mismatch in `{}`",
            path.display()
        )));
    }
    if &body[..4] != MAGIC {
        return Err(CoreError::Format(format!(
            "`{}` is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut digest = [0u8; 8];
    digest.copy_from_slice(&body[8..16]);
    if let Some(expect) = expected_digest {
        if &digest != expect {
            return Err(CoreError::Compatibility {
                expected: digest_hex(expect),
                found: digest_hex(&digest),
            });
        }
    }
    let step = u64::from_le_bytes(body[16..24].try_into().expect("8 bytes"));
    let n = u64::from_le_bytes(body[24..32].try_into().expect("8 bytes")) as usize;
    let has_opt = body[32] != 0;
    let expected_len = 40 + 8 * n * if has_opt { 3 } else { 1 };
    if body.len() != expected_len {
        return Err(CoreError::Format(format!(
            "checkpoint `{}` has {} bytes of payload, expected {}",
            path.display(),
            body.len(),
            expected_len
        )));
    }
    if n != layout.total() {
        return Err(CoreError::shape(format!(
            "checkpoint has {} parameters, layout expects {}",
            n,
            layout.total()
        )));
    }
    let read_f64s = |at: usize, count: usize| -> Vec<f64> {
        (0..count)
            .map(|i| {
                f64::from_le_bytes(body[at + 8 * i..at + 8 * i + 8].try_into().expect("8 bytes"))
            })
            .collect()
    };
    let params = ParameterVector::new(read_f64s(40, n), layout)?;
    let (adam_m, adam_v) = if has_opt {
        (read_f64s(40 + 8 * n, n), read_f64s(40 + 16 * n, n))
    } else {
        (Vec::new(), Vec::new())
    };
    Ok((
        Checkpoint {
            step,
            params,
            adam_m,
            adam_v,
        },
        digest,
    ))
}

/// Conventional file name for a checkpoint at a given step.
pub fn checkpoint_file_name(step: u64) -> String {
    format!("step_{step:09}.ckpt")
}

/// Parse a step index back out of a checkpoint file name.
pub fn parse_checkpoint_step(name: &str) -> Option<u64> {
    name.strip_prefix("step_")?
        .strip_suffix(".ckpt")?
        .parse()
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::RunConfig;
    use crate::transformer::{TransformerConfig, TransformerModel};

    fn sample() -> (Checkpoint, [u8; 8], Arc<Layout>) {
        let cfg = TransformerConfig {
            layers: 1,
            heads: 2,
            d_embed: 8,
            d_mlp: 8,
            input_dim: 2,
            max_examples: 3,
            ..TransformerConfig::default()
        };
        let model = TransformerModel::new(cfg.clone()).unwrap();
        let params = model.init_params(3);
        let n = params.len();
        let layout = params.layout.clone();
        let ckpt = Checkpoint {
            step: 1234,
            params,
            adam_m: (0..n).map(|i| i as f64 * 0.5).collect(),
            adam_v: (0..n).map(|i| i as f64 * 0.25).collect(),
        };
        let mut rc = RunConfig::default();
        rc.model = cfg;
        rc.data.input_dim = 2;
        rc.data.max_examples = 3;
        (ckpt, rc.provenance_digest(), layout)
    }

    #[test]
    fn round_trip_bit_exact() {
        let (ckpt, digest, layout) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(checkpoint_file_name(ckpt.step));
        save_checkpoint(&path, &ckpt, &digest).unwrap();
        let (loaded, stored) = load_checkpoint(&path, layout, Some(&digest)).unwrap();
        assert_eq!(stored, digest);
        assert_eq!(loaded.step, 1234);
        for (a, b) in ckpt.params.values.iter().zip(&loaded.params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ckpt.adam_v.iter().zip(&loaded.adam_v) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flipped_byte_is_integrity_error() {
        let (ckpt, digest, layout) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &ckpt, &digest).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path, layout, Some(&digest)) {
            Err(CoreError::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn digest_mismatch_is_compatibility_error() {
        let (ckpt, digest, layout) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &ckpt, &digest).unwrap();
        let other = [0xAB; 8];
        match load_checkpoint(&path, layout, Some(&other)) {
            Err(CoreError::Compatibility { expected, found }) => {
                assert_eq!(expected, digest_hex(&other));
                assert_eq!(found, digest_hex(&digest));
            }
            other => panic!("expected compatibility error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_layout_is_shape_error() {
        let (ckpt, digest, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &ckpt, &digest).unwrap();
        let other_layout = TransformerConfig {
            layers: 1,
            heads: 2,
            d_embed: 8,
            d_mlp: 8,
            input_dim: 8,
            max_examples: 3,
            ..TransformerConfig::default()
        }
        .layout()
        .unwrap();
        assert!(matches!(
            load_checkpoint(&path, other_layout, None),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn file_name_round_trip() {
        assert_eq!(checkpoint_file_name(42), "step_000000042.ckpt");
        assert_eq!(parse_checkpoint_step("step_000000042.ckpt"), Some(42));
        assert_eq!(parse_checkpoint_step("other.ckpt"), None);
    }
}
