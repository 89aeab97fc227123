//! Semantic point correspondences between reference and target token grids.
//!
//! Token indices are 0-based row-major flat indices (`y * width + x`).
//! Reference slots are numbered from 1, so slot `k` owns the tokens at
//! offsets `sum(counts[..k-1])..` in the concatenated reference stream.
//!
//! The dataset format is JSON Lines, one sample per line:
//!
//! ```text
//! {"id":0,"target_grid":[8,8],"ref_grids":[[4,4],[4,4]],"valid":[true,true],
//!  "pairs":[[[u,v],...],[[u,v],...]],"d_in":8,
//!  "target_tokens":[...N_tgt*d_in...],"ref_tokens":[[...N_1*d_in...],[...]]}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sample {sample}: {message}")]
    Invariant { sample: u64, message: String },
    #[error("sample {sample}: {report}")]
    Disjointness {
        sample: u64,
        report: DisjointnessReport,
    },
    #[error("{0}")]
    Annotation(String),
    #[error("index error: {0}")]
    Index(String),
}

/// A token grid of `height × width` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// `(x, y)` of a flat index.
    pub fn coords(&self, flat: usize) -> (usize, usize) {
        (flat % self.width, flat / self.width)
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.tokens()).map(|i| self.coords(i)).collect()
    }
}

impl From<[usize; 2]> for Grid {
    fn from([height, width]: [usize; 2]) -> Self {
        Self { height, width }
    }
}

impl From<Grid> for [usize; 2] {
    fn from(g: Grid) -> Self {
        [g.height, g.width]
    }
}

/// The pairs `(u, v)` linking reference-local token `u` of one slot to
/// target token `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceSet {
    slot: usize,
    pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    /// `slot` is 1-based.
    pub fn new(slot: usize, pairs: Vec<(usize, usize)>) -> Self {
        Self { slot, pairs }
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(_, v)| v)
    }
}

/// Correspondence annotation of one sample across its `K` reference slots.
///
/// Construction enforces the per-set invariants. Cross-slot disjointness is
/// checked separately by [`validate_disjointness`] so that violations can be
/// reported rather than merely refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleAnnotation {
    sets: Vec<CorrespondenceSet>,
    ref_token_counts: Vec<usize>,
    target_token_count: usize,
    valid_mask: Vec<bool>,
}

impl SampleAnnotation {
    pub fn new(
        sets: Vec<CorrespondenceSet>,
        ref_token_counts: Vec<usize>,
        target_token_count: usize,
        valid_mask: Vec<bool>,
    ) -> Result<Self, DataError> {
        let k = sets.len();
        if k == 0 {
            return Err(DataError::Annotation("annotation has no reference slots".into()));
        }
        if ref_token_counts.len() != k || valid_mask.len() != k {
            return Err(DataError::Annotation(format!(
                "{k} sets but {} token counts and {} mask entries",
                ref_token_counts.len(),
                valid_mask.len()
            )));
        }
        if target_token_count == 0 {
            return Err(DataError::Annotation("target has no tokens".into()));
        }
        for (i, set) in sets.iter().enumerate() {
            let slot = i + 1;
            if set.slot != slot {
                return Err(DataError::Annotation(format!(
                    "set at position {slot} is labelled slot {}",
                    set.slot
                )));
            }
            if !valid_mask[i] && !set.is_empty() {
                return Err(DataError::Annotation(format!(
                    "padded slot {slot} has {} correspondence pairs",
                    set.len()
                )));
            }
            let mut seen = vec![false; target_token_count];
            for &(u, v) in &set.pairs {
                if u >= ref_token_counts[i] {
                    return Err(DataError::Annotation(format!(
                        "slot {slot}: reference token {u} out of range ({} tokens)",
                        ref_token_counts[i]
                    )));
                }
                if v >= target_token_count {
                    return Err(DataError::Annotation(format!(
                        "slot {slot}: target token {v} out of range ({target_token_count} tokens)"
                    )));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(DataError::Annotation(format!(
                        "slot {slot}: duplicate target token {v}"
                    )));
                }
            }
        }
        Ok(Self {
            sets,
            ref_token_counts,
            target_token_count,
            valid_mask,
        })
    }

    pub fn sets(&self) -> &[CorrespondenceSet] {
        &self.sets
    }

    /// The set for 1-based `slot`.
    pub fn set(&self, slot: usize) -> Option<&CorrespondenceSet> {
        slot.checked_sub(1).and_then(|i| self.sets.get(i))
    }

    pub fn slot_count(&self) -> usize {
        self.sets.len()
    }

    pub fn ref_token_counts(&self) -> &[usize] {
        &self.ref_token_counts
    }

    pub fn total_ref_tokens(&self) -> usize {
        self.ref_token_counts.iter().sum()
    }

    pub fn target_token_count(&self) -> usize {
        self.target_token_count
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    /// 1-based slots that are valid and carry at least one pair.
    pub fn effective_slots(&self) -> Vec<usize> {
        self.sets
            .iter()
            .zip(&self.valid_mask)
            .filter(|(s, &valid)| valid && !s.is_empty())
            .map(|(s, _)| s.slot)
            .collect()
    }

    pub fn effective_k(&self) -> usize {
        self.effective_slots().len()
    }

    /// Global row of `(slot, u)` in the concatenated reference stream.
    pub fn global_index(&self, slot: usize, u: usize) -> Result<usize, DataError> {
        global_index(slot, u, &self.ref_token_counts)
    }
}

/// `sum(counts[..k-1]) + u` for 1-based slot `k`.
pub fn global_index(k: usize, u: usize, counts: &[usize]) -> Result<usize, DataError> {
    if k == 0 || k > counts.len() {
        return Err(DataError::Index(format!(
            "slot {k} outside 1..={}",
            counts.len()
        )));
    }
    if u >= counts[k - 1] {
        return Err(DataError::Index(format!(
            "token {u} outside slot {k} with {} tokens",
            counts[k - 1]
        )));
    }
    Ok(counts[..k - 1].iter().sum::<usize>() + u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Collision {
    pub target: usize,
    /// 1-based slots, first < second.
    pub slots: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DisjointnessReport {
    pub collisions: Vec<Collision>,
}

impl DisjointnessReport {
    pub fn is_ok(&self) -> bool {
        self.collisions.is_empty()
    }
}

impl fmt::Display for DisjointnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "target sets disjoint");
        }
        write!(f, "target sets overlap:")?;
        for c in &self.collisions {
            write!(f, " v={} (slots {} and {})", c.target, c.slots.0, c.slots.1)?;
        }
        Ok(())
    }
}

/// Reports every target token claimed by more than one slot, once per pair
/// of claiming slots.
pub fn validate_disjointness(ann: &SampleAnnotation) -> DisjointnessReport {
    let mut claims: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for set in &ann.sets {
        for v in set.targets() {
            claims.entry(v).or_default().push(set.slot);
        }
    }
    let mut collisions = Vec::new();
    for (v, slots) in claims {
        for (i, &a) in slots.iter().enumerate() {
            for &b in &slots[i + 1..] {
                collisions.push(Collision {
                    target: v,
                    slots: (a.min(b), a.max(b)),
                });
            }
        }
    }
    DisjointnessReport { collisions }
}

/// One dataset record: annotation plus token payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub target_grid: Grid,
    pub ref_grids: Vec<Grid>,
    pub annotation: SampleAnnotation,
    /// `[N_tgt × d_in]`
    pub target_tokens: Tensor,
    /// One `[N_k × d_in]` tensor per slot; zeros for padded slots.
    pub ref_tokens: Vec<Tensor>,
}

impl Sample {
    pub fn feature_dim(&self) -> usize {
        self.target_tokens.shape()[1]
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    target_grid: Grid,
    ref_grids: Vec<Grid>,
    valid: Vec<bool>,
    pairs: Vec<Vec<(usize, usize)>>,
    d_in: usize,
    target_tokens: Vec<f64>,
    ref_tokens: Vec<Vec<f64>>,
}

impl Record {
    fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id,
            target_grid: s.target_grid,
            ref_grids: s.ref_grids.clone(),
            valid: s.annotation.valid_mask.clone(),
            pairs: s.annotation.sets.iter().map(|c| c.pairs.clone()).collect(),
            d_in: s.feature_dim(),
            target_tokens: s.target_tokens.data().to_vec(),
            ref_tokens: s.ref_tokens.iter().map(|t| t.data().to_vec()).collect(),
        }
    }

    fn into_sample(self) -> Result<Sample, DataError> {
        let id = self.id;
        let bad = |message: String| DataError::Invariant { sample: id, message };
        if self.d_in == 0 {
            return Err(bad("d_in must be positive".into()));
        }
        let k = self.ref_grids.len();
        if self.pairs.len() != k || self.valid.len() != k || self.ref_tokens.len() != k {
            return Err(bad(format!(
                "{k} reference grids but {} pair lists, {} mask entries, {} payloads",
                self.pairs.len(),
                self.valid.len(),
                self.ref_tokens.len()
            )));
        }
        let n_tgt = self.target_grid.tokens();
        let target_tokens = Tensor::new(vec![n_tgt, self.d_in], self.target_tokens)
            .map_err(|e| bad(format!("target payload: {e}")))?;
        let mut ref_tokens = Vec::with_capacity(k);
        for (i, (grid, data)) in self.ref_grids.iter().zip(self.ref_tokens).enumerate() {
            let t = Tensor::new(vec![grid.tokens(), self.d_in], data)
                .map_err(|e| bad(format!("reference {} payload: {e}", i + 1)))?;
            if !self.valid[i] && t.data().iter().any(|&x| x != 0.0) {
                return Err(bad(format!("padded slot {} has a nonzero payload", i + 1)));
            }
            ref_tokens.push(t);
        }
        let sets = self
            .pairs
            .into_iter()
            .enumerate()
            .map(|(i, p)| CorrespondenceSet::new(i + 1, p))
            .collect();
        let counts = self.ref_grids.iter().map(Grid::tokens).collect();
        let annotation = SampleAnnotation::new(sets, counts, n_tgt, self.valid).map_err(|e| {
            bad(match e {
                DataError::Annotation(m) => m,
                other => other.to_string(),
            })
        })?;
        Ok(Sample {
            id,
            target_grid: self.target_grid,
            ref_grids: self.ref_grids,
            annotation,
            target_tokens,
            ref_tokens,
        })
    }
}

/// Serializes one sample as a single dataset line (no trailing newline).
pub fn encode_sample(sample: &Sample) -> String {
    serde_json::to_string(&Record::from_sample(sample)).expect("records serialize")
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in samples {
        w.write_all(encode_sample(s).as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Outcome of checking one parsed record.
#[derive(Debug)]
pub struct RecordCheck {
    pub line: usize,
    pub id: u64,
    pub outcome: Result<Sample, DataError>,
}

/// Parses every line and checks each record independently. Only I/O and
/// syntax failures abort the scan.
pub fn scan_dataset(path: &Path) -> Result<Vec<RecordCheck>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let id = record.id;
        let outcome = record.into_sample().and_then(|s| {
            let report = validate_disjointness(&s.annotation);
            if report.is_ok() {
                Ok(s)
            } else {
                Err(DataError::Disjointness { sample: id, report })
            }
        });
        out.push(RecordCheck {
            line: line_no,
            id,
            outcome,
        });
    }
    Ok(out)
}

/// Loads a dataset, failing on the first malformed or invalid record.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DataError> {
    scan_dataset(path)?
        .into_iter()
        .map(|c| c.outcome)
        .collect()
}
