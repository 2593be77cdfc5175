//! Scripted backend loaded from a JSON file.
//!
//! ```json
//! {
//!   "embedding_dim": 64,
//!   "images": ["bird.png"],
//!   "rules": [
//!     {"capability": "chat", "purpose": "planning", "contains": "\nN3 [", "reply": "..."},
//!     {"capability": "chat", "regex": "(?i)profession", "replies": ["first", "second"]},
//!     {"capability": "vision", "image": "bird.png", "reply": "A bird."},
//!     {"capability": "embed_text", "equals": "logo with a bird", "vector": [1, 0, 0]},
//!     {"capability": "chat", "purpose": "reason", "unavailable": true}
//!   ]
//! }
//! ```
//!
//! Rules are tried in order and the first one whose every condition holds
//! answers. `replies` are handed out one per call and `times` caps how often
//! a rule may fire; a spent rule is skipped. Embedding requests that match no
//! rule fall back to a deterministic token-hashing embedder. When `images` is
//! present only the listed references resolve.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;

use apg_core::gateway::{ChatRequest, ModelBackend, Purpose, VisionRequest};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    #[default]
    Chat,
    Vision,
    EmbedText,
    EmbedImage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(default = "chat")]
    pub capability: Capability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<Purpose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    /// Vision only: substring of the image reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unavailable: bool,
}

fn chat() -> Capability {
    Capability::Chat
}

impl RuleSpec {
    pub fn chat(purpose: Option<Purpose>, contains: &str, reply: &str) -> Self {
        RuleSpec {
            purpose,
            contains: (!contains.is_empty()).then(|| contains.to_string()),
            reply: Some(reply.to_string()),
            ..RuleSpec::default()
        }
    }

    pub fn vision(image: &str, reply: &str) -> Self {
        RuleSpec {
            capability: Capability::Vision,
            image: Some(image.to_string()),
            reply: Some(reply.to_string()),
            ..RuleSpec::default()
        }
    }

    pub fn text_vector(text: &str, vector: Vec<f32>) -> Self {
        RuleSpec {
            capability: Capability::EmbedText,
            equals: Some(text.to_string()),
            vector: Some(vector),
            ..RuleSpec::default()
        }
    }

    pub fn image_vector(image_ref: &str, vector: Vec<f32>) -> Self {
        RuleSpec {
            capability: Capability::EmbedImage,
            equals: Some(image_ref.to_string()),
            vector: Some(vector),
            ..RuleSpec::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<BTreeSet<String>>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
}

/// One request seen by the mock, with what it returned.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MockCall {
    pub capability: Capability,
    pub purpose: Option<Purpose>,
    pub input: String,
    pub rule: Option<usize>,
    pub ok: bool,
}

struct Rule {
    spec: RuleSpec,
    regex: Option<Regex>,
}

#[derive(Default)]
struct State {
    fired: Vec<usize>,
    log: Vec<MockCall>,
}

pub struct MockBackend {
    rules: Vec<Rule>,
    dim: usize,
    images: Option<BTreeSet<String>>,
    state: Mutex<State>,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("rules", &self.rules.len()).field("dim", &self.dim).finish()
    }
}

/// Deterministic bag-of-words embedding: every lowercase alphanumeric token
/// adds one to an FNV-1a-hashed coordinate.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f32> {
    let dim = dim.max(1);
    let mut v = vec![0.0f32; dim];
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.to_lowercase().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        v[(h % dim as u64) as usize] += 1.0;
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self> {
        let dim = script.embedding_dim.unwrap_or(DEFAULT_EMBEDDING_DIM);
        if dim == 0 {
            return Err(Error::Config("mock embedding_dim must be positive".into()));
        }
        let rules = script
            .rules
            .into_iter()
            .map(|spec| {
                let regex = spec
                    .regex
                    .as_deref()
                    .map(|p| Regex::new(p).map_err(|source| Error::Regex { pattern: p.to_string(), source }))
                    .transpose()?;
                let answers = spec.reply.is_some() || !spec.replies.is_empty() || spec.vector.is_some() || spec.unavailable;
                if !answers {
                    return Err(Error::Config(format!("mock rule {spec:?} has no reply, replies, vector or unavailable")));
                }
                Ok(Rule { spec, regex })
            })
            .collect::<Result<Vec<_>>>()?;
        let fired = vec![0; rules.len()];
        Ok(MockBackend { rules, dim, images: script.images, state: Mutex::new(State { fired, log: Vec::new() }) })
    }

    pub fn from_rules(rules: Vec<RuleSpec>) -> Result<Self> {
        MockBackend::new(MockScript { rules, ..MockScript::default() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let script: MockScript = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })?;
        MockBackend::new(script)
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.state.lock().expect("mock state").log.clone()
    }

    pub fn prompts_for(&self, purpose: Purpose) -> Vec<String> {
        self.calls()
            .into_iter()
            .filter(|c| c.purpose == Some(purpose))
            .map(|c| c.input)
            .collect()
    }

    /// Finds and fires the first live matching rule, returning its index and
    /// the position of the reply to use.
    fn fire(&self, capability: Capability, purpose: Option<Purpose>, input: &str, image: Option<&str>) -> Option<(usize, usize)> {
        let mut state = self.state.lock().expect("mock state");
        let hit = self.rules.iter().enumerate().find(|(i, r)| {
            let s = &r.spec;
            let fired = state.fired[*i];
            let live = s.times.is_none_or(|t| fired < t) && (s.replies.is_empty() || fired < s.replies.len() || s.reply.is_some());
            live && s.capability == capability
                && (s.purpose.is_none() || s.purpose == purpose)
                && s.contains.as_deref().is_none_or(|c| input.contains(c))
                && s.equals.as_deref().is_none_or(|e| input == e)
                && r.regex.as_ref().is_none_or(|re| re.is_match(input))
                && s.image.as_deref().is_none_or(|m| image.is_some_and(|i| i.contains(m)))
        });
        let out = hit.map(|(i, _)| {
            let n = state.fired[i];
            state.fired[i] += 1;
            (i, n)
        });
        state.log.push(MockCall {
            capability,
            purpose,
            input: input.to_string(),
            rule: out.map(|(i, _)| i),
            ok: out.is_some_and(|(i, _)| !self.rules[i].spec.unavailable),
        });
        out
    }

    fn text_reply(&self, capability: Capability, purpose: Option<Purpose>, input: &str, image: Option<&str>) -> apg_core::Result<String> {
        let label = || match purpose {
            Some(p) => format!("{p}: {}", excerpt(input)),
            None => format!("{capability:?}: {}", excerpt(input)),
        };
        let (i, n) = self
            .fire(capability, purpose, input, image)
            .ok_or_else(|| apg_core::Error::UnmatchedRequest(label()))?;
        let spec = &self.rules[i].spec;
        if spec.unavailable {
            return Err(apg_core::Error::BackendUnavailable(format!("mock rule {i} marks the backend unavailable")));
        }
        spec.replies
            .get(n)
            .or(spec.reply.as_ref())
            .cloned()
            .ok_or_else(|| apg_core::Error::UnmatchedRequest(label()))
    }

    fn vector_reply(&self, capability: Capability, input: &str) -> apg_core::Result<Vec<f32>> {
        match self.fire(capability, None, input, None) {
            Some((i, _)) => {
                let spec = &self.rules[i].spec;
                if spec.unavailable {
                    return Err(apg_core::Error::BackendUnavailable(format!("mock rule {i} marks the backend unavailable")));
                }
                spec.vector.clone().ok_or_else(|| apg_core::Error::invalid(format!("mock rule {i} has no vector")))
            }
            None => Ok(hash_embed(input, self.dim)),
        }
    }
}

fn excerpt(s: &str) -> String {
    let line = s.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    line.chars().take(80).collect()
}

impl ModelBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> apg_core::Result<String> {
        self.text_reply(Capability::Chat, Some(request.purpose), &request.prompt, None)
    }

    fn vision(&self, request: &VisionRequest) -> apg_core::Result<String> {
        self.text_reply(Capability::Vision, None, &request.prompt, Some(&request.image_ref))
    }

    fn embed_text(&self, text: &str) -> apg_core::Result<Vec<f32>> {
        self.vector_reply(Capability::EmbedText, text)
    }

    fn embed_image(&self, image_ref: &str) -> apg_core::Result<Vec<f32>> {
        self.vector_reply(Capability::EmbedImage, image_ref)
    }

    fn image_exists(&self, image_ref: &str) -> bool {
        self.images.as_ref().is_none_or(|set| set.contains(image_ref))
    }
}
