//! Scripted backend shared by the unit tests.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, ModelBackend, Purpose, VisionRequest};

pub(crate) const DIM: usize = 64;

/// Token-hashing embedding: identical texts map to identical vectors and
/// texts sharing words are close.
pub(crate) fn hash_embed(text: &str) -> Vec<f32> {
    let mut v = alloc::vec![0.0f32; DIM];
    for word in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.to_lowercase().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        v[(h % DIM as u64) as usize] += 1.0;
    }
    v
}

#[derive(Default)]
pub(crate) struct ScriptedBackend {
    chat_rules: Vec<(Option<Purpose>, String, String)>,
    vision_rules: Vec<(String, String)>,
    vectors: HashMap<String, Vec<f32>>,
    pub(crate) chat_log: Mutex<Vec<ChatRequest>>,
    pub(crate) vision_log: Mutex<Vec<VisionRequest>>,
}

impl ScriptedBackend {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    /// First matching rule wins; `purpose = None` matches any purpose.
    pub(crate) fn chat(mut self, purpose: Option<Purpose>, needle: &str, reply: &str) -> Self {
        self.chat_rules.push((purpose, needle.to_string(), reply.to_string()));
        self
    }

    pub(crate) fn vision(mut self, needle: &str, reply: &str) -> Self {
        self.vision_rules.push((needle.to_string(), reply.to_string()));
        self
    }

    /// Fixed vector for an exact text or image reference.
    pub(crate) fn vector(mut self, key: &str, v: Vec<f32>) -> Self {
        self.vectors.insert(key.to_string(), v);
        self
    }

    pub(crate) fn prompts_for(&self, purpose: Purpose) -> Vec<String> {
        self.chat_log
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.purpose == purpose)
            .map(|r| r.prompt.clone())
            .collect()
    }
}

impl ModelBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        self.chat_log.lock().unwrap().push(request.clone());
        self.chat_rules
            .iter()
            .find(|(p, needle, _)| {
                p.is_none_or(|p| p == request.purpose) && request.prompt.contains(needle.as_str())
            })
            .map(|(_, _, reply)| reply.clone())
            .ok_or_else(|| Error::UnmatchedRequest(request.purpose.to_string()))
    }

    fn vision(&self, request: &VisionRequest) -> Result<String> {
        self.vision_log.lock().unwrap().push(request.clone());
        let haystack = alloc::format!("{}\n{}", request.image_ref, request.prompt);
        self.vision_rules
            .iter()
            .find(|(needle, _)| haystack.contains(needle.as_str()))
            .map(|(_, reply)| reply.clone())
            .ok_or_else(|| Error::UnmatchedRequest(request.image_ref.clone()))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.vectors.get(text).cloned().unwrap_or_else(|| hash_embed(text)))
    }

    fn embed_image(&self, image_ref: &str) -> Result<Vec<f32>> {
        Ok(self
            .vectors
            .get(image_ref)
            .cloned()
            .unwrap_or_else(|| hash_embed(image_ref)))
    }
}

impl ScriptedBackend {
    /// Normalized vector the gateway would produce for `text`.
    pub(crate) fn vectors_for_test(&self, text: &str) -> Vec<f32> {
        crate::index::normalize(self.embed_text(text).unwrap()).unwrap()
    }
}
