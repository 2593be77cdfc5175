//! Embedding storage and exact radius search.
//!
//! [`KnowledgeBase`] keeps its entries in insertion order and indexes them with
//! a ball tree. Queries return every entry within a Euclidean radius, sorted by
//! distance with ties broken by insertion order; [`brute_force_radius`] applies
//! the same contract by linear scan.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;
/// Slack applied to the pruning bound so that rounding in the centroid never
/// discards a point the linear scan would keep.
const PRUNE_SLACK: f64 = 1e-6;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Triplet,
    Title,
    Caption,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub vector: Vec<f32>,
    pub payload: String,
    pub source_id: String,
    pub payload_kind: PayloadKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source_id: String,
    pub payload: String,
    pub payload_kind: PayloadKind,
    pub distance: f64,
}

impl Candidate {
    fn from_entry(entry: &EmbeddingEntry, distance: f64) -> Self {
        Candidate {
            source_id: entry.source_id.clone(),
            payload: entry.payload.clone(),
            payload_kind: entry.payload_kind,
            distance,
        }
    }
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    libm::sqrt(sum)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Scales `v` to unit length. Zero and non-finite vectors are rejected.
pub fn normalize(mut v: Vec<f32>) -> Result<Vec<f32>> {
    let norm = l2_norm(&v);
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(v)
}

fn check_query(dim: usize, query: &[f32], radius: f64) -> Result<()> {
    if query.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: query.len(),
        });
    }
    if radius.is_nan() || radius < 0.0 {
        return Err(Error::invalid("radius must be a non-negative number"));
    }
    Ok(())
}

fn sort_hits(hits: &mut [(f64, usize)]) {
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
}

/// Linear-scan radius search over `entries`.
pub fn brute_force_radius(
    entries: &[EmbeddingEntry],
    query: &[f32],
    radius: f64,
) -> Result<Vec<Candidate>> {
    if let Some(first) = entries.first() {
        check_query(first.vector.len(), query, radius)?;
    } else if radius.is_nan() || radius < 0.0 {
        return Err(Error::invalid("radius must be a non-negative number"));
    }
    let mut hits: Vec<(f64, usize)> = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let d = euclidean(&e.vector, query);
            (d <= radius).then_some((d, i))
        })
        .collect();
    sort_hits(&mut hits);
    Ok(hits
        .into_iter()
        .map(|(d, i)| Candidate::from_entry(&entries[i], d))
        .collect())
}

#[derive(Debug, Clone)]
enum BallNode {
    Leaf {
        center: Vec<f64>,
        radius: f64,
        members: Vec<usize>,
    },
    Split {
        center: Vec<f64>,
        radius: f64,
        children: Box<[BallNode; 2]>,
    },
}

fn dist_f64(center: &[f64], v: &[f32]) -> f64 {
    let sum: f64 = center
        .iter()
        .zip(v)
        .map(|(c, x)| {
            let d = c - f64::from(*x);
            d * d
        })
        .sum();
    libm::sqrt(sum)
}

impl BallNode {
    fn build(entries: &[EmbeddingEntry], members: Vec<usize>, dim: usize) -> BallNode {
        let mut center = alloc::vec![0.0f64; dim];
        for &i in &members {
            for (c, x) in center.iter_mut().zip(&entries[i].vector) {
                *c += f64::from(*x);
            }
        }
        let n = members.len().max(1) as f64;
        center.iter_mut().for_each(|c| *c /= n);
        let radius = members
            .iter()
            .map(|&i| dist_f64(&center, &entries[i].vector))
            .fold(0.0, f64::max);

        if members.len() <= LEAF_SIZE {
            return BallNode::Leaf { center, radius, members };
        }

        // Split around two far-apart pivots.
        let far_from = |from: &[f32]| {
            members
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    euclidean(&entries[a].vector, from)
                        .total_cmp(&euclidean(&entries[b].vector, from))
                        .then(b.cmp(&a))
                })
                .unwrap_or(members[0])
        };
        let first = members
            .iter()
            .copied()
            .max_by(|&a, &b| {
                dist_f64(&center, &entries[a].vector)
                    .total_cmp(&dist_f64(&center, &entries[b].vector))
                    .then(b.cmp(&a))
            })
            .unwrap_or(members[0]);
        let second = far_from(&entries[first].vector);
        let (pa, pb) = (&entries[first].vector, &entries[second].vector);

        let (left, right): (Vec<usize>, Vec<usize>) = members
            .iter()
            .partition(|&&i| euclidean(&entries[i].vector, pa) <= euclidean(&entries[i].vector, pb));
        if left.is_empty() || right.is_empty() {
            // All points coincide; a leaf is as good as any split.
            return BallNode::Leaf { center, radius, members };
        }
        BallNode::Split {
            center,
            radius,
            children: Box::new([
                BallNode::build(entries, left, dim),
                BallNode::build(entries, right, dim),
            ]),
        }
    }

    fn query(&self, entries: &[EmbeddingEntry], q: &[f32], r: f64, out: &mut Vec<(f64, usize)>) {
        let (center, radius) = match self {
            BallNode::Leaf { center, radius, .. } | BallNode::Split { center, radius, .. } => {
                (center, *radius)
            }
        };
        if dist_f64(center, q) - radius > r + PRUNE_SLACK {
            return;
        }
        match self {
            BallNode::Leaf { members, .. } => {
                for &i in members {
                    let d = euclidean(&entries[i].vector, q);
                    if d <= r {
                        out.push((d, i));
                    }
                }
            }
            BallNode::Split { children, .. } => {
                children[0].query(entries, q, r, out);
                children[1].query(entries, q, r, out);
            }
        }
    }
}

/// A modality-tagged, immutable store of unit embeddings with a ball-tree
/// index over them.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    modality: Modality,
    dim: usize,
    entries: Vec<EmbeddingEntry>,
    root: Option<BallNode>,
}

/// Equal contents; the index is derived from them.
impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality && self.dim == other.dim && self.entries == other.entries
    }
}

impl KnowledgeBase {
    /// Indexes `entries`. Every vector must have dimension `dim` and unit norm.
    pub fn new(modality: Modality, dim: usize, entries: Vec<EmbeddingEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Build("embedding dimension must be positive".into()));
        }
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.vector.len(),
                });
            }
            let norm = l2_norm(&e.vector);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Build(alloc::format!(
                    "entry `{}` from {} is not unit norm ({norm})",
                    e.payload, e.source_id
                )));
            }
        }
        let root = (!entries.is_empty())
            .then(|| BallNode::build(&entries, (0..entries.len()).collect(), dim));
        Ok(KnowledgeBase { modality, dim, entries, root })
    }

    pub fn empty(modality: Modality, dim: usize) -> Self {
        KnowledgeBase { modality, dim, entries: Vec::new(), root: None }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[EmbeddingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every entry within `radius` of `query`, nearest first.
    pub fn radius_query(&self, query: &[f32], radius: f64) -> Result<Vec<Candidate>> {
        check_query(self.dim, query, radius)?;
        let mut hits = Vec::new();
        if let Some(root) = &self.root {
            root.query(&self.entries, query, radius, &mut hits);
        }
        sort_hits(&mut hits);
        Ok(hits
            .into_iter()
            .map(|(d, i)| Candidate::from_entry(&self.entries[i], d))
            .collect())
    }
}
