//! Token layout of the combined prompt `[identity, image_1, …, image_k, padding]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::EmbeddingMatrix;

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<[usize; 2]> for TokenRange {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TokenRange> for [usize; 2] {
    fn from(r: TokenRange) -> Self {
        [r.start, r.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptManifest {
    pub total_len: usize,
    pub dim: usize,
    pub id_range: TokenRange,
    pub image_ranges: Vec<TokenRange>,
    pub pad_range: TokenRange,
}

impl PromptManifest {
    /// Checks ordering, disjointness and bounds. Tokens between segments
    /// (e.g. an end-of-sequence marker) are allowed and left untouched.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invariant("dim ≥ 1", "dim is 0"));
        }
        if self.image_ranges.is_empty() {
            return Err(Error::invariant("k ≥ 1", "no image ranges"));
        }
        let mut named: Vec<(String, TokenRange)> = vec![("id_range".into(), self.id_range)];
        named.extend(
            self.image_ranges
                .iter()
                .enumerate()
                .map(|(i, r)| (format!("image_ranges[{i}]"), *r)),
        );
        for (name, r) in &named {
            if r.start >= r.end {
                return Err(Error::invariant(
                    "intervals nonempty",
                    format!("{name} = [{}, {}) is empty", r.start, r.end),
                ));
            }
        }
        if self.pad_range.start > self.pad_range.end {
            return Err(Error::invariant(
                "intervals nonempty",
                format!(
                    "pad_range = [{}, {}) is reversed",
                    self.pad_range.start, self.pad_range.end
                ),
            ));
        }
        named.push(("pad_range".into(), self.pad_range));
        for pair in named.windows(2) {
            let (prev_name, prev) = &pair[0];
            let (name, r) = &pair[1];
            if r.start < prev.end {
                return Err(Error::invariant(
                    "intervals disjoint",
                    format!("{name} starts at {} before {prev_name} ends at {}", r.start, prev.end),
                ));
            }
        }
        let last = named.last().map(|(_, r)| r.end).unwrap_or(0);
        if last > self.total_len {
            return Err(Error::invariant(
                "intervals within total_len",
                format!("segments reach token {last} but total_len is {}", self.total_len),
            ));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.image_ranges.len()
    }

    pub fn range_of(&self, id: SegmentId) -> Option<TokenRange> {
        match id {
            SegmentId::Identity => Some(self.id_range),
            SegmentId::Image(i) => self.image_ranges.get(i).copied(),
            SegmentId::Padding => Some(self.pad_range),
        }
    }
}

/// Which segment of the combined embedding. `Image` indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentId {
    Identity,
    Image(usize),
    Padding,
}

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentId::Identity => write!(f, "id"),
            SegmentId::Image(i) => write!(f, "image_{}", i + 1),
            SegmentId::Padding => write!(f, "pad"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedEmbedding {
    pub id_seg: EmbeddingMatrix,
    pub image_segs: Vec<EmbeddingMatrix>,
    pub pad_seg: EmbeddingMatrix,
    pub manifest: PromptManifest,
    source: EmbeddingMatrix,
}

impl SegmentedEmbedding {
    pub fn source(&self) -> &EmbeddingMatrix {
        &self.source
    }

    pub fn get(&self, id: SegmentId) -> Option<&EmbeddingMatrix> {
        match id {
            SegmentId::Identity => Some(&self.id_seg),
            SegmentId::Image(i) => self.image_segs.get(i),
            SegmentId::Padding => Some(&self.pad_seg),
        }
    }
}

/// Expression / suppression split for one target image.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleAssignment {
    /// One-based, as in "the second per-image prompt".
    pub target_index: usize,
    pub expression: EmbeddingMatrix,
    pub suppressions: Vec<EmbeddingMatrix>,
}

impl RoleAssignment {
    /// Segment ids of the suppressions, in order.
    pub fn suppression_ids(&self) -> impl Iterator<Item = SegmentId> + '_ {
        let target = self.target_index - 1;
        (0..=self.suppressions.len())
            .filter(move |&i| i != target)
            .map(SegmentId::Image)
    }
}

pub fn segment(e_single: &EmbeddingMatrix, manifest: &PromptManifest) -> Result<SegmentedEmbedding> {
    manifest
        .validate()
        .map_err(|e| Error::ManifestMismatch(e.to_string()))?;
    if manifest.total_len != e_single.nrows() || manifest.dim != e_single.ncols() {
        return Err(Error::ManifestMismatch(format!(
            "manifest describes {}×{}, embedding is {}×{}",
            manifest.total_len,
            manifest.dim,
            e_single.nrows(),
            e_single.ncols()
        )));
    }
    let slice = |r: TokenRange| e_single.slice_rows(r.start, r.end);
    Ok(SegmentedEmbedding {
        id_seg: slice(manifest.id_range),
        image_segs: manifest.image_ranges.iter().map(|&r| slice(r)).collect(),
        pad_seg: slice(manifest.pad_range),
        manifest: manifest.clone(),
        source: e_single.clone(),
    })
}

pub fn assign_roles(seg: &SegmentedEmbedding, target_index: usize) -> Result<RoleAssignment> {
    let k = seg.image_segs.len();
    if target_index == 0 || target_index > k {
        return Err(Error::IndexOutOfRange {
            index: target_index,
            len: k,
        });
    }
    let target = target_index - 1;
    Ok(RoleAssignment {
        target_index,
        expression: seg.image_segs[target].clone(),
        suppressions: seg
            .image_segs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, m)| m.clone())
            .collect(),
    })
}

/// Source matrix with the listed segments overwritten; every other row is
/// copied unchanged.
pub fn reassemble(
    seg: &SegmentedEmbedding,
    replacements: &BTreeMap<SegmentId, EmbeddingMatrix>,
) -> Result<EmbeddingMatrix> {
    let mut out = seg.source.as_matrix().clone();
    for (&id, value) in replacements {
        let range = seg
            .manifest
            .range_of(id)
            .ok_or_else(|| Error::Shape(format!("no segment {id}")))?;
        if value.nrows() != range.len() || value.ncols() != out.ncols() {
            return Err(Error::Shape(format!(
                "replacement for {id} is {}×{}, segment is {}×{}",
                value.nrows(),
                value.ncols(),
                range.len(),
                out.ncols()
            )));
        }
        out.rows_mut(range.start, range.len()).copy_from(value.as_matrix());
    }
    EmbeddingMatrix::from_matrix(out)
}

/// Mean pairwise Euclidean distance between token-mean vectors.
pub fn cohesion(embeddings: &[EmbeddingMatrix]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::TooFewInputs {
            needed: 2,
            got: embeddings.len(),
        });
    }
    let d = embeddings[0].ncols();
    if embeddings.iter().any(|e| e.ncols() != d) {
        return Err(Error::Shape("cohesion inputs differ in embedding dimension".into()));
    }
    if embeddings.iter().any(EmbeddingMatrix::is_empty) {
        return Err(Error::InvalidInput("cohesion of a matrix with no tokens".into()));
    }
    let means: Vec<_> = embeddings.iter().map(EmbeddingMatrix::column_mean).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            total += (&means[i] - &means[j]).norm();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
