//! Modality-gap report from a persisted knowledge base and a pairs file.
//!
//! The pairs file is a JSON array (or one object per line) of
//! `{"caption": <source id>, "text": <source id>, "image": <source id>?}`:
//! the caption or title entry of `caption` is compared with the first
//! triplet entry of `text` and with the image entry of `image` (defaulting
//! to `caption`).

use std::path::Path;

use apg_core::eval::{modality_gap_report, GapPair, GapReport};
use apg_core::index::{KnowledgeBase, PayloadKind};
use apg_core::kb::KnowledgeBases;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub caption: String,
    pub text: String,
    #[serde(default)]
    pub image: Option<String>,
}

fn find(kb: &KnowledgeBase, source: &str, kinds: &[PayloadKind]) -> Option<usize> {
    kinds.iter().find_map(|k| {
        kb.entries()
            .iter()
            .position(|e| e.source_id == source && e.payload_kind == *k)
    })
}

pub fn resolve_pairs(kbs: &KnowledgeBases, specs: &[PairSpec], path: &Path) -> Result<Vec<GapPair>> {
    specs
        .iter()
        .map(|p| {
            let missing = |what: &str, id: &str| Error::schema(path, &p.caption, format!("no {what} entry for source `{id}`"));
            let image_id = p.image.as_deref().unwrap_or(&p.caption);
            Ok(GapPair {
                text: find(&kbs.text, &p.caption, &[PayloadKind::Caption, PayloadKind::Title])
                    .ok_or_else(|| missing("caption or title", &p.caption))?,
                peer_text: find(&kbs.text, &p.text, &[PayloadKind::Triplet, PayloadKind::Caption, PayloadKind::Title])
                    .ok_or_else(|| missing("text", &p.text))?,
                image: find(&kbs.image, image_id, &[PayloadKind::Image]).ok_or_else(|| missing("image", image_id))?,
            })
        })
        .collect()
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairSpec>> {
    crate::sources::parse_records(&read_to_string(path)?, path)
}

pub fn gap_report(kbs: &KnowledgeBases, pairs_path: &Path) -> Result<GapReport> {
    let pairs = resolve_pairs(kbs, &load_pairs(pairs_path)?, pairs_path)?;
    Ok(modality_gap_report(&kbs.text, &kbs.image, &pairs)?)
}
