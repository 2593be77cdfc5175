//! Knowledge-base persistence: `<dir>/manifest.json` holds both bases with
//! base64-encoded little-endian `f32` vectors, plus a content hash of the
//! sources and embedder so a cached build can be reused.

use std::collections::BTreeMap;
use std::path::Path;

use apg_core::index::{EmbeddingEntry, KnowledgeBase, Modality, PayloadKind};
use apg_core::kb::{build_knowledge_bases, KnowledgeBases, Source};
use apg_core::{Gateway, TemplateSet};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_to_string, write, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredEntry {
    pub vector: String,
    pub payload: String,
    pub source_id: String,
    pub payload_kind: PayloadKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredKb {
    pub modality: Modality,
    pub entries: Vec<StoredEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dim: usize,
    pub content_hash: String,
    pub text: StoredKb,
    pub image: StoredKb,
    pub image_refs: BTreeMap<String, String>,
}

pub fn encode_vector(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_vector(s: &str) -> std::result::Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// SHA-256 over the serialized sources and an embedder identity string.
pub fn content_hash(sources: &[Source], embedder: &str) -> String {
    let mut h = Sha256::new();
    h.update(embedder.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(sources).expect("sources serialize"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn store(kb: &KnowledgeBase) -> StoredKb {
    StoredKb {
        modality: kb.modality(),
        entries: kb
            .entries()
            .iter()
            .map(|e| StoredEntry {
                vector: encode_vector(&e.vector),
                payload: e.payload.clone(),
                source_id: e.source_id.clone(),
                payload_kind: e.payload_kind,
            })
            .collect(),
    }
}

impl Manifest {
    pub fn from_kbs(kbs: &KnowledgeBases, content_hash: String) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            dim: kbs.text.dim(),
            content_hash,
            text: store(&kbs.text),
            image: store(&kbs.image),
            image_refs: kbs.image_refs.clone(),
        }
    }

    pub fn to_kbs(&self, path: &Path) -> Result<KnowledgeBases> {
        let bad = |reason: String| Error::Manifest { path: path.to_path_buf(), reason };
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        let load = |stored: &StoredKb, expected: Modality| -> Result<KnowledgeBase> {
            if stored.modality != expected {
                return Err(bad(format!("expected a {expected:?} base, found {:?}", stored.modality)));
            }
            let entries = stored
                .entries
                .iter()
                .map(|e| {
                    Ok(EmbeddingEntry {
                        vector: decode_vector(&e.vector).map_err(|r| bad(format!("entry `{}`: {r}", e.payload)))?,
                        payload: e.payload.clone(),
                        source_id: e.source_id.clone(),
                        payload_kind: e.payload_kind,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            KnowledgeBase::new(expected, self.dim, entries).map_err(|e| bad(e.to_string()))
        };
        Ok(KnowledgeBases {
            text: load(&self.text, Modality::Text)?,
            image: load(&self.image, Modality::Image)?,
            image_refs: self.image_refs.clone(),
        })
    }
}

pub fn save(dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST_FILE), json)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, line: source.line(), source })
}

pub fn load(dir: &Path) -> Result<KnowledgeBases> {
    load_manifest(dir)?.to_kbs(&dir.join(MANIFEST_FILE))
}

/// Whether the knowledge bases came from the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
}

/// Loads `dir` when its manifest matches the sources and embedder,
/// otherwise builds and saves.
pub fn build_or_load(
    dir: &Path,
    sources: &[Source],
    embedder: &str,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<(KnowledgeBases, CacheStatus)> {
    let hash = content_hash(sources, embedder);
    if dir.join(MANIFEST_FILE).is_file() {
        match load_manifest(dir) {
            Ok(m) if m.content_hash == hash => {
                log::info!("knowledge bases loaded from {}", dir.display());
                return Ok((m.to_kbs(&dir.join(MANIFEST_FILE))?, CacheStatus::Hit));
            }
            Ok(_) => log::info!("cached knowledge bases in {} are stale; rebuilding", dir.display()),
            Err(e) => log::warn!("ignoring unreadable cache: {e}"),
        }
    }
    let kbs = build_knowledge_bases(sources, gateway, templates)?;
    save(dir, &Manifest::from_kbs(&kbs, hash))?;
    Ok((kbs, CacheStatus::Built))
}
