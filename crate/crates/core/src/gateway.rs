//! Uniform access to the four model capabilities (chat, vision chat, text
//! embedding, image embedding) with call accounting.
//!
//! Backends implement [`ModelBackend`]. Pipeline code never calls a backend
//! directly; it goes through a [`Gateway`], which validates requests,
//! normalizes embeddings, checks dimension drift and counts every dispatch.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::normalize;

/// What a chat call is for. Each maps to one prompt family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    PlanGen,
    Planning,
    Triplet,
    Decomp,
    TextExtract,
    TgtImage,
    DescrImage,
    ExamText,
    Aggregate,
    Reason,
}

impl Purpose {
    pub const ALL: [Purpose; 10] = [
        Purpose::PlanGen,
        Purpose::Planning,
        Purpose::Triplet,
        Purpose::Decomp,
        Purpose::TextExtract,
        Purpose::TgtImage,
        Purpose::DescrImage,
        Purpose::ExamText,
        Purpose::Aggregate,
        Purpose::Reason,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::PlanGen => "plan_gen",
            Purpose::Planning => "planning",
            Purpose::Triplet => "triplet",
            Purpose::Decomp => "decomp",
            Purpose::TextExtract => "text_extract",
            Purpose::TgtImage => "tgt_image",
            Purpose::DescrImage => "descr_image",
            Purpose::ExamText => "exam_text",
            Purpose::Aggregate => "aggregate",
            Purpose::Reason => "reason",
        }
    }

    pub fn parse(s: &str) -> Option<Purpose> {
        Purpose::ALL.into_iter().find(|p| p.as_str() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub purpose: Purpose,
}

impl ChatRequest {
    pub fn new(purpose: Purpose, prompt: impl Into<String>) -> Self {
        ChatRequest { prompt: prompt.into(), purpose }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionRequest {
    pub prompt: String,
    pub image_ref: String,
}

/// A provider of the four model capabilities. Implementations return raw
/// (possibly unnormalized) embeddings; the gateway normalizes them.
pub trait ModelBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String>;

    fn vision(&self, request: &VisionRequest) -> Result<String>;

    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;

    fn embed_image(&self, image_ref: &str) -> Result<Vec<f32>>;

    /// Whether `image_ref` can be resolved. Checked before any vision or
    /// image-embedding dispatch.
    fn image_exists(&self, _image_ref: &str) -> bool {
        true
    }
}

/// Snapshot of model-call counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub llm_calls: u64,
    pub vlm_calls: u64,
    pub text_embed_calls: u64,
    pub image_embed_calls: u64,
    pub by_purpose: BTreeMap<Purpose, u64>,
}

impl CallLedger {
    pub fn purpose(&self, p: Purpose) -> u64 {
        self.by_purpose.get(&p).copied().unwrap_or(0)
    }

    /// Sum of the per-purpose breakdown equals the chat-call total.
    pub fn is_conserved(&self) -> bool {
        self.by_purpose.values().sum::<u64>() == self.llm_calls
    }

    /// Counts accrued since `earlier`.
    pub fn since(&self, earlier: &CallLedger) -> CallLedger {
        let mut by_purpose = BTreeMap::new();
        for p in Purpose::ALL {
            let d = self.purpose(p) - earlier.purpose(p);
            if d > 0 {
                by_purpose.insert(p, d);
            }
        }
        CallLedger {
            llm_calls: self.llm_calls - earlier.llm_calls,
            vlm_calls: self.vlm_calls - earlier.vlm_calls,
            text_embed_calls: self.text_embed_calls - earlier.text_embed_calls,
            image_embed_calls: self.image_embed_calls - earlier.image_embed_calls,
            by_purpose,
        }
    }

    pub fn absorb(&mut self, other: &CallLedger) {
        self.llm_calls += other.llm_calls;
        self.vlm_calls += other.vlm_calls;
        self.text_embed_calls += other.text_embed_calls;
        self.image_embed_calls += other.image_embed_calls;
        for (p, n) in &other.by_purpose {
            *self.by_purpose.entry(*p).or_insert(0) += n;
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    llm: AtomicU64,
    vlm: AtomicU64,
    text_embed: AtomicU64,
    image_embed: AtomicU64,
    purposes: [AtomicU64; 10],
}

/// Request validation, embedding normalization and call accounting in front
/// of a [`ModelBackend`]. Safe to share across threads.
pub struct Gateway<'a> {
    backend: &'a dyn ModelBackend,
    counters: Counters,
    // 0 means "not seen yet".
    text_dim: AtomicUsize,
    image_dim: AtomicUsize,
}

impl fmt::Debug for Gateway<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("ledger", &self.ledger()).finish()
    }
}

impl<'a> Gateway<'a> {
    pub fn new(backend: &'a dyn ModelBackend) -> Self {
        Gateway {
            backend,
            counters: Counters::default(),
            text_dim: AtomicUsize::new(0),
            image_dim: AtomicUsize::new(0),
        }
    }

    pub fn ledger(&self) -> CallLedger {
        let c = &self.counters;
        let by_purpose = Purpose::ALL
            .into_iter()
            .filter_map(|p| {
                let n = c.purposes[p.slot()].load(Ordering::SeqCst);
                (n > 0).then_some((p, n))
            })
            .collect();
        CallLedger {
            llm_calls: c.llm.load(Ordering::SeqCst),
            vlm_calls: c.vlm.load(Ordering::SeqCst),
            text_embed_calls: c.text_embed.load(Ordering::SeqCst),
            image_embed_calls: c.image_embed.load(Ordering::SeqCst),
            by_purpose,
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String> {
        if request.prompt.trim().is_empty() {
            return Err(Error::invalid("chat prompt must be non-empty"));
        }
        self.counters.purposes[request.purpose.slot()].fetch_add(1, Ordering::SeqCst);
        self.counters.llm.fetch_add(1, Ordering::SeqCst);
        self.backend.chat(request)
    }

    pub fn chat(&self, purpose: Purpose, prompt: impl Into<String>) -> Result<String> {
        self.complete(&ChatRequest::new(purpose, prompt))
    }

    /// Whether the backend can resolve `image_ref`; makes no call.
    pub fn image_exists(&self, image_ref: &str) -> bool {
        self.backend.image_exists(image_ref)
    }

    pub fn complete_vision(&self, request: &VisionRequest) -> Result<String> {
        if request.prompt.trim().is_empty() {
            return Err(Error::invalid("vision prompt must be non-empty"));
        }
        if !self.backend.image_exists(&request.image_ref) {
            return Err(Error::invalid(alloc::format!(
                "image `{}` cannot be resolved",
                request.image_ref
            )));
        }
        self.counters.vlm.fetch_add(1, Ordering::SeqCst);
        self.backend.vision(request)
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("text to embed must be non-empty"));
        }
        self.counters.text_embed.fetch_add(1, Ordering::SeqCst);
        let v = self.backend.embed_text(text)?;
        check_dim(&self.text_dim, v.len())?;
        normalize(v)
    }

    pub fn embed_image(&self, image_ref: &str) -> Result<Vec<f32>> {
        if image_ref.trim().is_empty() {
            return Err(Error::invalid("image reference must be non-empty"));
        }
        if !self.backend.image_exists(image_ref) {
            return Err(Error::invalid(alloc::format!("image `{image_ref}` cannot be resolved")));
        }
        self.counters.image_embed.fetch_add(1, Ordering::SeqCst);
        let v = self.backend.embed_image(image_ref)?;
        check_dim(&self.image_dim, v.len())?;
        normalize(v)
    }
}

fn check_dim(seen: &AtomicUsize, dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::DegenerateEmbedding);
    }
    match seen.compare_exchange(0, dim, Ordering::SeqCst, Ordering::SeqCst) {
        Ok(_) => Ok(()),
        Err(expected) if expected == dim => Ok(()),
        Err(expected) => Err(Error::DimensionMismatch { expected, actual: dim }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::l2_norm;
    use alloc::vec;
    use std::sync::Mutex;

    /// Echoes prompts and returns scripted vectors in order.
    #[derive(Default)]
    struct Stub {
        vectors: Mutex<Vec<Vec<f32>>>,
    }

    impl ModelBackend for Stub {
        fn chat(&self, r: &ChatRequest) -> Result<String> {
            if r.prompt.contains("profession") {
                Ok("singer".into())
            } else {
                Err(Error::UnmatchedRequest(r.prompt.clone()))
            }
        }
        fn vision(&self, r: &VisionRequest) -> Result<String> {
            Ok(alloc::format!("caption of {}", r.image_ref))
        }
        fn embed_text(&self, _: &str) -> Result<Vec<f32>> {
            Ok(self.vectors.lock().unwrap().remove(0))
        }
        fn embed_image(&self, _: &str) -> Result<Vec<f32>> {
            Ok(self.vectors.lock().unwrap().remove(0))
        }
        fn image_exists(&self, image_ref: &str) -> bool {
            image_ref != "missing.png"
        }
    }

    #[test]
    fn chat_counts_calls_per_purpose() {
        let stub = Stub::default();
        let gw = Gateway::new(&stub);
        assert_eq!(gw.ledger().llm_calls, 0);
        assert_eq!(gw.chat(Purpose::Reason, "their profession?").unwrap(), "singer");
        assert_eq!(gw.ledger().llm_calls, 1);
        for _ in 0..6 {
            gw.chat(Purpose::Planning, "profession").unwrap();
        }
        let l = gw.ledger();
        assert_eq!(l.llm_calls, 7);
        assert_eq!(l.purpose(Purpose::Planning), 6);
        assert!(l.is_conserved());
        assert!(matches!(gw.chat(Purpose::Reason, ""), Err(Error::InvalidInput(_))));
        assert_eq!(gw.ledger().llm_calls, 7, "rejected requests are not dispatched");
    }

    #[test]
    fn vision_checks_image_before_dispatch() {
        let stub = Stub::default();
        let gw = Gateway::new(&stub);
        let req = |img: &str| VisionRequest { prompt: "describe".into(), image_ref: img.into() };
        assert!(matches!(gw.complete_vision(&req("missing.png")), Err(Error::InvalidInput(_))));
        assert_eq!(gw.ledger().vlm_calls, 0);
        for n in 1..=4 {
            gw.complete_vision(&req("logo.png")).unwrap();
            assert_eq!(gw.ledger().vlm_calls, n);
        }
    }

    #[test]
    fn embeddings_are_normalized_and_dimension_checked() {
        let stub = Stub {
            vectors: Mutex::new(vec![vec![1.0; 4], vec![0.0; 4], vec![1.0; 3]]),
        };
        let gw = Gateway::new(&stub);
        let v = gw.embed_text("a").unwrap();
        assert_eq!(v, [0.5; 4]);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
        assert_eq!(gw.embed_text("b"), Err(Error::DegenerateEmbedding));
        assert_eq!(
            gw.embed_text("c"),
            Err(Error::DimensionMismatch { expected: 4, actual: 3 })
        );
        assert_eq!(gw.ledger().text_embed_calls, 3);
    }

    #[test]
    fn ledger_diff_and_absorb() {
        let stub = Stub::default();
        let gw = Gateway::new(&stub);
        gw.chat(Purpose::Decomp, "profession").unwrap();
        let before = gw.ledger();
        gw.chat(Purpose::Aggregate, "profession").unwrap();
        let delta = gw.ledger().since(&before);
        assert_eq!(delta.llm_calls, 1);
        assert_eq!(delta.purpose(Purpose::Aggregate), 1);
        assert_eq!(delta.purpose(Purpose::Decomp), 0);
        let mut total = before.clone();
        total.absorb(&delta);
        assert_eq!(total, gw.ledger());
    }
}
