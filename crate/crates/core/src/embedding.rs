//! Embeddings, uncertain embeddings, labelled training sets and trial lists.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Embedding dimension used by the xi-vector front-ends this back-end targets.
pub const DEFAULT_DIM: usize = 192;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self { id: id.into(), vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// A point estimate together with the diagonal of its posterior covariance.
///
/// An all-zero `uncertainty` is a plain point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainEmbedding {
    pub embedding: Embedding,
    pub uncertainty: Vec<f64>,
}

impl UncertainEmbedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>, uncertainty: Vec<f64>) -> Self {
        Self {
            embedding: Embedding::new(id, vector),
            uncertainty,
        }
    }

    /// Wraps a point estimate with zero uncertainty.
    pub fn point(embedding: Embedding) -> Self {
        let uncertainty = vec![0.0; embedding.dim()];
        Self { embedding, uncertainty }
    }

    pub fn id(&self) -> &str {
        &self.embedding.id
    }

    pub fn vector(&self) -> &[f64] {
        &self.embedding.vector
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn is_point(&self) -> bool {
        self.uncertainty.iter().all(|&u| u == 0.0)
    }

    /// Same vector, uncertainty replaced by zeros.
    pub fn without_uncertainty(&self) -> Self {
        Self::point(self.embedding.clone())
    }
}

impl From<Embedding> for UncertainEmbedding {
    fn from(embedding: Embedding) -> Self {
        Self::point(embedding)
    }
}

/// Training container: speaker id to that speaker's utterances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub speakers: BTreeMap<String, Vec<UncertainEmbedding>>,
}

impl LabeledDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, speaker: impl Into<String>, utt: UncertainEmbedding) {
        self.speakers.entry(speaker.into()).or_default().push(utt);
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.speakers.values().map(Vec::len).sum()
    }

    /// Dimension of the first utterance, if any.
    pub fn dim(&self) -> Option<usize> {
        self.utterances().next().map(UncertainEmbedding::dim)
    }

    /// All utterances in speaker order.
    pub fn utterances(&self) -> impl Iterator<Item = &UncertainEmbedding> {
        self.speakers.values().flatten()
    }

    /// Builds a dataset from an archive and an utterance-to-speaker map.
    /// Utterances keep the archive order within each speaker.
    pub fn from_archive(archive: &EmbeddingArchive, utt2spk: &[(String, String)]) -> Result<Self> {
        let mut ds = Self::new();
        for (utt, spk) in utt2spk {
            let e = archive
                .get(utt)
                .ok_or_else(|| Error::invalid(format!("utterance `{utt}` not in archive")))?;
            ds.insert(spk.clone(), e.clone());
        }
        Ok(ds)
    }

    /// Flattens into an archive plus the utterance-to-speaker map.
    pub fn to_archive(&self, has_uncertainty: bool) -> Result<(EmbeddingArchive, Vec<(String, String)>)> {
        let mut entries = Vec::with_capacity(self.num_utterances());
        let mut utt2spk = Vec::with_capacity(self.num_utterances());
        for (spk, utts) in &self.speakers {
            for u in utts {
                utt2spk.push((u.id().to_owned(), spk.clone()));
                entries.push(u.clone());
            }
        }
        let dim = self.dim().unwrap_or(0);
        Ok((EmbeddingArchive::new(dim, has_uncertainty, entries)?, utt2spk))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
            TrialLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            "unknown" => Ok(TrialLabel::Unknown),
            other => Err(format!("unknown trial label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, label: TrialLabel) -> Self {
        Self {
            enroll: enroll.into(),
            test: test.into(),
            label,
        }
    }
}

/// Embeddings of a single dimension with unique ids, addressable by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    dim: usize,
    has_uncertainty: bool,
    entries: Vec<UncertainEmbedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingArchive {
    pub fn new(dim: usize, has_uncertainty: bool, entries: Vec<UncertainEmbedding>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.dim() != dim || e.uncertainty.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: if e.dim() != dim { e.dim() } else { e.uncertainty.len() },
                });
            }
            if index.insert(e.id().to_owned(), i).is_some() {
                return Err(Error::invalid(format!("duplicate embedding id `{}`", e.id())));
            }
        }
        Ok(Self {
            dim,
            has_uncertainty,
            entries,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_uncertainty(&self) -> bool {
        self.has_uncertainty
    }

    /// Declares stored uncertainties (zeros when none were read) as present.
    pub fn assume_uncertainty(&mut self) {
        self.has_uncertainty = true;
    }

    pub fn entries(&self) -> &[UncertainEmbedding] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<UncertainEmbedding> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UncertainEmbedding> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    /// Applies `f` to every entry, keeping ids and order.
    pub fn try_map<F>(&self, has_uncertainty: bool, f: F) -> Result<Self>
    where
        F: Fn(&UncertainEmbedding) -> Result<UncertainEmbedding>,
    {
        let entries = self.entries.iter().map(f).collect::<Result<Vec<_>>>()?;
        let dim = entries.first().map_or(self.dim, UncertainEmbedding::dim);
        Self::new(dim, has_uncertainty, entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    DimensionMismatch { expected: usize, found: usize },
    UncertaintyLength { expected: usize, found: usize },
    NonFinite { field: &'static str, index: usize },
    NegativeVariance { index: usize },
    DuplicateId,
    EmptySpeaker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub speaker: String,
    /// `None` for speaker-level violations.
    pub utterance: Option<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.utterance {
            Some(u) => write!(f, "speaker `{}` utterance `{u}`: ", self.speaker)?,
            None => write!(f, "speaker `{}`: ", self.speaker)?,
        }
        match &self.kind {
            ViolationKind::DimensionMismatch { expected, found } => {
                write!(f, "vector has dimension {found}, expected {expected}")
            }
            ViolationKind::UncertaintyLength { expected, found } => {
                write!(f, "uncertainty has length {found}, expected {expected}")
            }
            ViolationKind::NonFinite { field, index } => write!(f, "{field}[{index}] is not finite"),
            ViolationKind::NegativeVariance { index } => write!(f, "uncertainty[{index}] is negative"),
            ViolationKind::DuplicateId => write!(f, "duplicate utterance id"),
            ViolationKind::EmptySpeaker => write!(f, "no utterances"),
        }
    }
}

/// Lists every well-formedness violation in `ds`; empty iff the dataset is usable.
///
/// The reference dimension is taken from the first utterance.
pub fn validate_dataset(ds: &LabeledDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let dim = ds.dim();
    let mut seen = HashSet::new();
    for (spk, utts) in &ds.speakers {
        if utts.is_empty() {
            out.push(Violation {
                speaker: spk.clone(),
                utterance: None,
                kind: ViolationKind::EmptySpeaker,
            });
        }
        for u in utts {
            let mut push = |kind| {
                out.push(Violation {
                    speaker: spk.clone(),
                    utterance: Some(u.id().to_owned()),
                    kind,
                })
            };
            if !seen.insert(u.id()) {
                push(ViolationKind::DuplicateId);
            }
            let expected = dim.unwrap_or(u.dim());
            if u.dim() != expected || u.dim() == 0 {
                push(ViolationKind::DimensionMismatch {
                    expected,
                    found: u.dim(),
                });
            }
            if u.uncertainty.len() != u.dim() {
                push(ViolationKind::UncertaintyLength {
                    expected: u.dim(),
                    found: u.uncertainty.len(),
                });
            }
            for (index, v) in u.vector().iter().enumerate() {
                if !v.is_finite() {
                    push(ViolationKind::NonFinite { field: "vector", index });
                }
            }
            for (index, v) in u.uncertainty.iter().enumerate() {
                if !v.is_finite() {
                    push(ViolationKind::NonFinite {
                        field: "uncertainty",
                        index,
                    });
                } else if *v < 0.0 {
                    push(ViolationKind::NegativeVariance { index });
                }
            }
        }
    }
    out
}
