//! Checkpoint format: a JSON manifest plus a raw little-endian f32 blob.
//!
//! `<base>.json` describes the parameters (name, shape, offset) and carries a
//! `digest` — the SHA-256 of the digest-free manifest concatenated with the
//! blob — so a checkpoint is verifiable and referenceable. A downstream
//! checkpoint stores `parent_digest` to pin the exact upstream weights it was
//! built on (the diffusion model pins its frozen autoencoder this way).
//! Writing is deterministic: same weights + metadata give identical bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("blob length {found} does not match manifest ({expect} f32 values)")]
    BlobLength { expect: usize, found: usize },
    #[error("digest mismatch: manifest says {expect}, recomputed {found}")]
    DigestMismatch { expect: String, found: String },
    #[error("parent digest mismatch: expected {expect}, found {found}")]
    ParentMismatch { expect: String, found: String },
}

const CKPT_VERSION: u32 = 1;

/// Caller-provided checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CkptMeta {
    /// What the weights are, e.g. "autoencoder" or "diffusion".
    pub kind: String,
    /// Digest of the checkpoint these weights depend on, if any.
    pub parent_digest: Option<String>,
    /// Arbitrary structured config echoed back on load.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    parent_digest: Option<String>,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
    /// SHA-256 hex of (manifest with empty digest) || blob.
    digest: String,
}

fn digest_of(manifest: &Manifest, blob: &[u8]) -> Result<String, serde_json::Error> {
    let mut undigested = manifest.clone();
    undigested.digest = String::new();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&undigested)?);
    hasher.update(blob);
    Ok(format!("{:x}", hasher.finalize()))
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("ckpt.json")
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("ckpt.blob")
}

/// Write `<base>.ckpt.json` + `<base>.ckpt.blob`; returns the digest.
pub fn save_checkpoint(base: &Path, meta: &CkptMeta, store: &ParamStore<f32>) -> Result<String, CkptError> {
    let mut params = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.n_elements() * 4);
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.len(),
        });
        for &v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let mut manifest = Manifest {
        version: CKPT_VERSION,
        kind: meta.kind.clone(),
        parent_digest: meta.parent_digest.clone(),
        config: meta.config.clone(),
        params,
        digest: String::new(),
    };
    manifest.digest = digest_of(&manifest, &blob)?;
    if let Some(dir) = base.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(manifest_path(base), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(blob_path(base), &blob)?;
    Ok(manifest.digest)
}

/// Read a checkpoint pair back; verifies the digest.
pub fn load_checkpoint(base: &Path) -> Result<(CkptMeta, ParamStore<f32>, String), CkptError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(base))?)?;
    if manifest.version != CKPT_VERSION {
        return Err(CkptError::Version(manifest.version));
    }
    let blob = fs::read(blob_path(base))?;
    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    if blob.len() != total * 4 {
        return Err(CkptError::BlobLength { expect: total, found: blob.len() / 4 });
    }
    let found = digest_of(&manifest, &blob)?;
    if found != manifest.digest {
        return Err(CkptError::DigestMismatch { expect: manifest.digest, found });
    }
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let mut data = Vec::with_capacity(p.len);
        for i in 0..p.len {
            let at = (p.offset + i) * 4;
            data.push(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()));
        }
        store.insert(&p.name, Tensor::new(p.shape.clone(), data));
    }
    let meta = CkptMeta {
        kind: manifest.kind,
        parent_digest: manifest.parent_digest,
        config: manifest.config,
    };
    Ok((meta, store, manifest.digest))
}

/// Load and insist the checkpoint's parent is the given digest.
pub fn load_checkpoint_expecting_parent(
    base: &Path,
    parent: &str,
) -> Result<(CkptMeta, ParamStore<f32>, String), CkptError> {
    let (meta, store, digest) = load_checkpoint(base)?;
    match &meta.parent_digest {
        Some(p) if p == parent => Ok((meta, store, digest)),
        other => Err(CkptError::ParentMismatch {
            expect: parent.to_string(),
            found: other.clone().unwrap_or_else(|| "<none>".into()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sample_store(seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("enc.w", crate::nn::opt::xavier_uniform(&mut rng, 3, 5));
        s.insert("enc.b", Tensor::zeros(vec![1, 5]));
        s.insert("dec.w", crate::nn::opt::xavier_uniform(&mut rng, 5, 2));
        s
    }

    #[test]
    fn round_trip_preserves_weights_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ae");
        let store = sample_store(1);
        let meta = CkptMeta {
            kind: "autoencoder".into(),
            parent_digest: None,
            config: serde_json::json!({"latent_tokens": 64}),
        };
        let digest = save_checkpoint(&base, &meta, &store).unwrap();
        let (meta2, store2, digest2) = load_checkpoint(&base).unwrap();
        assert_eq!(digest, digest2);
        assert_eq!(meta2.kind, "autoencoder");
        assert_eq!(meta2.config["latent_tokens"], 64);
        assert_eq!(store.names(), store2.names());
        for name in store.names() {
            assert_eq!(store.get(&name).data, store2.get(&name).data);
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let store = sample_store(2);
        let meta = CkptMeta { kind: "x".into(), ..Default::default() };
        save_checkpoint(&a, &meta, &store).unwrap();
        save_checkpoint(&b, &meta, &store).unwrap();
        assert_eq!(
            fs::read(manifest_path(&a)).unwrap(),
            fs::read(manifest_path(&b)).unwrap()
        );
        assert_eq!(fs::read(blob_path(&a)).unwrap(), fs::read(blob_path(&b)).unwrap());
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ae");
        let store = sample_store(3);
        save_checkpoint(&base, &CkptMeta::default(), &store).unwrap();
        let mut blob = fs::read(blob_path(&base)).unwrap();
        blob[0] ^= 0xff;
        fs::write(blob_path(&base), blob).unwrap();
        assert!(matches!(load_checkpoint(&base), Err(CkptError::DigestMismatch { .. })));
    }

    #[test]
    fn parent_digest_chain() {
        let dir = tempfile::tempdir().unwrap();
        let ae = dir.path().join("ae");
        let dm = dir.path().join("dm");
        let ae_digest = save_checkpoint(&ae, &CkptMeta { kind: "autoencoder".into(), ..Default::default() }, &sample_store(4)).unwrap();
        let meta = CkptMeta {
            kind: "diffusion".into(),
            parent_digest: Some(ae_digest.clone()),
            config: serde_json::Value::Null,
        };
        save_checkpoint(&dm, &meta, &sample_store(5)).unwrap();
        assert!(load_checkpoint_expecting_parent(&dm, &ae_digest).is_ok());
        assert!(matches!(
            load_checkpoint_expecting_parent(&dm, "deadbeef"),
            Err(CkptError::ParentMismatch { .. })
        ));
    }

    #[test]
    fn digest_changes_with_weights() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("w");
        let mut store = sample_store(6);
        let d1 = save_checkpoint(&base, &CkptMeta::default(), &store).unwrap();
        store.get_mut("enc.w").data[0] += 1.0;
        let d2 = save_checkpoint(&base, &CkptMeta::default(), &store).unwrap();
        assert_ne!(d1, d2);
    }
}

