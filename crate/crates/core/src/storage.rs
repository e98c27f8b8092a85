//! On-disk formats.
//!
//! Binary archives share a 14-byte header:
//!
//! | offset | size | field                                 |
//! |--------|------|---------------------------------------|
//! | 0      | 4    | magic: `UPE1`, `UPF1`, `UPM1`, `UPS1` |
//! | 4      | 2    | version (u16, currently 1)            |
//! | 6      | 4    | dim (u32, ≥ 1)                        |
//! | 10     | 4    | flags (u32; bit 0: has-uncertainty)   |
//!
//! All integers and IEEE-754 doubles are little-endian, strings are a u32
//! byte length followed by UTF-8, and records follow the header without
//! padding until end of file.
//!
//! * `UPE1` embeddings: `id, vector[dim], uncertainty[dim] if bit 0`.
//! * `UPF1` frame estimates (`dim = d_h`): `id, T: u32, T × (mean[dim], precision[dim])`.
//! * `UPM1` models (`dim = D`): a u32 kind, then
//!   kind 1 (PLDA): `d_y: u32, mean[D], transform[D×D] row-major, between[D], residual[D]`;
//!   kind 2 (head): `d_h: u32, bn_mean[d_h], bn_std[d_h], bn_scale[d_h], weight[D×d_h] row-major, bias[D]`.
//! * `UPS1` statistics: `source: u32 (0 train, 1 dev-adapted), mean[dim], total_cov[dim×dim] row-major`.
//!
//! Text formats: trial lists (`enroll test [target|nontarget]`), utterance to
//! speaker maps (`utt spk`), score files (`enroll test score label`) and a
//! plain-text embedding format (`id v1 … vD`) accepted wherever a `UPE1`
//! archive is read.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::embedding::{EmbeddingArchive, Trial, TrialLabel, UncertainEmbedding};
use crate::error::{Error, Result};
use crate::metrics::{ScoreSet, ScoredTrial};
use crate::plda::PldaModel;
use crate::pooling::{FrameEstimate, HeadParams};
use crate::preprocess::{CenteringStats, StatsSource};

pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;
pub const FLAG_HAS_UNCERTAINTY: u32 = 1;

const KIND_PLDA: u32 = 1;
const KIND_HEAD: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Magic {
    Embeddings,
    Frames,
    Model,
    Stats,
}

impl Magic {
    pub fn bytes(self) -> &'static [u8; 4] {
        match self {
            Magic::Embeddings => b"UPE1",
            Magic::Frames => b"UPF1",
            Magic::Model => b"UPM1",
            Magic::Stats => b"UPS1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub magic: Magic,
    pub version: u16,
    pub dim: u32,
    pub flags: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u16),

    #[error("file truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },

    #[error("dimension mismatch at byte offset {offset}: expected {expected}, found {found}")]
    DimensionMismatch {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("identifier at byte offset {offset} is not valid UTF-8")]
    InvalidUtf8 { offset: usize },

    #[error("invalid value at byte offset {offset}: {message}")]
    InvalidValue { offset: usize, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: Magic, dim: usize, flags: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic.bytes());
        w.buf.extend_from_slice(&VERSION.to_le_bytes());
        w.u32(dim as u32);
        w.u32(flags);
        w
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn row_major(&mut self, m: &DMatrix<f64>) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.buf.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                offset: self.buf.len(),
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Reads `n` doubles, checking the byte count before allocating.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = n.checked_mul(8).ok_or(FormatError::Truncated {
            offset: self.buf.len(),
            needed: usize::MAX,
        })?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        let offset = self.pos;
        let raw = self.take(len)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| FormatError::InvalidUtf8 { offset })
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>, FormatError> {
        Ok(DMatrix::from_row_slice(rows, cols, &self.f64s(rows * cols)?))
    }

    fn header(buf: &'a [u8], magic: Magic) -> Result<(Self, ArchiveHeader), FormatError> {
        let mut r = Reader { buf, pos: 0 };
        let found = r.take(4)?;
        if found != magic.bytes() {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic.bytes()).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dim = r.u32()?;
        if dim == 0 {
            return Err(FormatError::InvalidValue {
                offset: 6,
                message: "dimension must be at least 1".into(),
            });
        }
        let flags = r.u32()?;
        Ok((
            r,
            ArchiveHeader {
                magic,
                version,
                dim,
                flags,
            },
        ))
    }
}

/// What to do when an embedding archive carries no uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UncertaintyPolicy {
    /// Fail with [`Error::NoUncertainty`].
    Require,
    /// Fill zeros and mark the archive as carrying uncertainty.
    AssumeZero,
    /// Keep zeros, archive flagged as without uncertainty.
    #[default]
    Optional,
}

fn apply_policy(mut archive: EmbeddingArchive, policy: UncertaintyPolicy) -> Result<EmbeddingArchive> {
    if !archive.has_uncertainty() {
        match policy {
            UncertaintyPolicy::Require => return Err(Error::NoUncertainty),
            UncertaintyPolicy::AssumeZero => archive.assume_uncertainty(),
            UncertaintyPolicy::Optional => {}
        }
    }
    Ok(archive)
}

pub fn encode_embeddings(archive: &EmbeddingArchive) -> Vec<u8> {
    let flags = if archive.has_uncertainty() {
        FLAG_HAS_UNCERTAINTY
    } else {
        0
    };
    let mut w = Writer::new(Magic::Embeddings, archive.dim(), flags);
    for e in archive.entries() {
        w.str(e.id());
        w.f64s(e.vector());
        if archive.has_uncertainty() {
            w.f64s(&e.uncertainty);
        }
    }
    w.buf
}

pub fn decode_embeddings(buf: &[u8]) -> Result<EmbeddingArchive> {
    let (mut r, h) = Reader::header(buf, Magic::Embeddings)?;
    let dim = h.dim as usize;
    let has_u = h.flags & FLAG_HAS_UNCERTAINTY != 0;
    let mut entries = Vec::new();
    while !r.at_end() {
        let offset = r.pos;
        let id = r.str()?;
        let vector = r.f64s(dim)?;
        let uncertainty = if has_u { r.f64s(dim)? } else { vec![0.0; dim] };
        if vector.iter().chain(&uncertainty).any(|v| !v.is_finite()) {
            return Err(FormatError::InvalidValue {
                offset,
                message: format!("embedding `{id}` has non-finite entries"),
            }
            .into());
        }
        entries.push(UncertainEmbedding::new(id, vector, uncertainty));
    }
    EmbeddingArchive::new(dim, has_u, entries)
}

/// Parses the plain-text embedding format: `id v1 … vD` per line.
pub fn parse_text_embeddings(text: &str) -> Result<EmbeddingArchive> {
    let mut entries = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| FormatError::Parse { line: i + 1, message };
        let mut tokens = line.split_whitespace();
        let id = tokens.next().expect("non-empty line");
        let vector = tokens
            .map(|t| t.parse::<f64>().map_err(|e| perr(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if vector.is_empty() {
            return Err(perr(format!("embedding `{id}` has no values")).into());
        }
        let d = *dim.get_or_insert(vector.len());
        if d != vector.len() {
            return Err(perr(format!("expected {d} values, found {}", vector.len())).into());
        }
        entries.push(UncertainEmbedding::new(id, vector, vec![0.0; d]));
    }
    let dim = dim.ok_or_else(|| FormatError::Parse {
        line: 0,
        message: "no embeddings".into(),
    })?;
    EmbeddingArchive::new(dim, false, entries)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a `UPE1` archive, or the plain-text format when the magic is absent.
pub fn read_embeddings(path: impl AsRef<Path>, policy: UncertaintyPolicy) -> Result<EmbeddingArchive> {
    let path = path.as_ref();
    let buf = read_file(path)?;
    let archive = if buf.starts_with(Magic::Embeddings.bytes()) {
        decode_embeddings(&buf)?
    } else {
        let text = std::str::from_utf8(&buf).map_err(|_| FormatError::BadMagic {
            expected: "UPE1".into(),
            found: String::from_utf8_lossy(&buf[..buf.len().min(4)]).into_owned(),
        })?;
        parse_text_embeddings(text)?
    };
    apply_policy(archive, policy)
}

pub fn write_embeddings(path: impl AsRef<Path>, archive: &EmbeddingArchive) -> Result<()> {
    write_atomic(path, &encode_embeddings(archive))
}

/// One utterance worth of frame estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    pub frames: Vec<FrameEstimate>,
}

pub fn encode_frames(dim: usize, records: &[FrameRecord]) -> Result<Vec<u8>> {
    let mut w = Writer::new(Magic::Frames, dim, 0);
    for rec in records {
        w.str(&rec.id);
        w.u32(rec.frames.len() as u32);
        for f in &rec.frames {
            if f.mean.len() != dim || f.precision.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: f.mean.len().max(f.precision.len()),
                });
            }
            w.f64s(&f.mean);
            w.f64s(&f.precision);
        }
    }
    Ok(w.buf)
}

pub fn decode_frames(buf: &[u8]) -> Result<(usize, Vec<FrameRecord>)> {
    let (mut r, h) = Reader::header(buf, Magic::Frames)?;
    let dim = h.dim as usize;
    let mut records = Vec::new();
    while !r.at_end() {
        let id = r.str()?;
        let count = r.u32()? as usize;
        let needed = count.saturating_mul(dim).saturating_mul(16);
        if needed > r.remaining() {
            return Err(FormatError::Truncated {
                offset: buf.len(),
                needed: needed - r.remaining(),
            }
            .into());
        }
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let mean = r.f64s(dim)?;
            let precision = r.f64s(dim)?;
            frames.push(FrameEstimate::new(mean, precision));
        }
        records.push(FrameRecord { id, frames });
    }
    Ok((dim, records))
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<(usize, Vec<FrameRecord>)> {
    decode_frames(&read_file(path.as_ref())?)
}

pub fn write_frames(path: impl AsRef<Path>, dim: usize, records: &[FrameRecord]) -> Result<()> {
    write_atomic(path, &encode_frames(dim, records)?)
}

pub fn encode_model(m: &PldaModel) -> Vec<u8> {
    let mut w = Writer::new(Magic::Model, m.dim(), 0);
    w.u32(KIND_PLDA);
    w.u32(m.speaker_dim() as u32);
    w.f64s(m.mean().iter());
    w.row_major(m.transform());
    w.f64s(m.between_cov().iter());
    w.f64s(m.residual_cov().iter());
    w.buf
}

fn model_kind(r: &mut Reader<'_>, expected: u32) -> Result<(), FormatError> {
    let offset = r.pos;
    let kind = r.u32()?;
    if kind != expected {
        let name = |k| match k {
            KIND_PLDA => "PLDA model".to_owned(),
            KIND_HEAD => "head parameters".to_owned(),
            other => format!("unknown kind {other}"),
        };
        return Err(FormatError::InvalidValue {
            offset,
            message: format!("archive holds {}, expected {}", name(kind), name(expected)),
        });
    }
    Ok(())
}

fn expect_end(r: &Reader<'_>) -> Result<(), FormatError> {
    if r.at_end() {
        Ok(())
    } else {
        Err(FormatError::InvalidValue {
            offset: r.pos,
            message: format!("{} trailing bytes", r.remaining()),
        })
    }
}

pub fn decode_model(buf: &[u8]) -> Result<PldaModel> {
    let (mut r, h) = Reader::header(buf, Magic::Model)?;
    let d = h.dim as usize;
    model_kind(&mut r, KIND_PLDA)?;
    let k = r.u32()? as usize;
    let mean = DVector::from_vec(r.f64s(d)?);
    let transform = r.matrix(d, d)?;
    let between = DVector::from_vec(r.f64s(d)?);
    let residual = DVector::from_vec(r.f64s(d)?);
    expect_end(&r)?;
    PldaModel::from_parts(mean, transform, between, residual, k)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<PldaModel> {
    decode_model(&read_file(path.as_ref())?)
}

pub fn write_model(path: impl AsRef<Path>, m: &PldaModel) -> Result<()> {
    write_atomic(path, &encode_model(m))
}

pub fn encode_head(h: &HeadParams) -> Vec<u8> {
    let mut w = Writer::new(Magic::Model, h.output_dim(), 0);
    w.u32(KIND_HEAD);
    w.u32(h.input_dim() as u32);
    w.f64s(&h.bn_mean);
    w.f64s(&h.bn_std);
    w.f64s(&h.bn_scale);
    w.row_major(&h.weight);
    w.f64s(&h.bias);
    w.buf
}

pub fn decode_head(buf: &[u8]) -> Result<HeadParams> {
    let (mut r, h) = Reader::header(buf, Magic::Model)?;
    let d = h.dim as usize;
    model_kind(&mut r, KIND_HEAD)?;
    let dh = r.u32()? as usize;
    let bn_mean = r.f64s(dh)?;
    let bn_std = r.f64s(dh)?;
    let bn_scale = r.f64s(dh)?;
    let weight = r.matrix(d, dh)?;
    let bias = r.f64s(d)?;
    expect_end(&r)?;
    HeadParams::with_scale(bn_mean, bn_std, bn_scale, weight, bias)
}

pub fn read_head(path: impl AsRef<Path>) -> Result<HeadParams> {
    decode_head(&read_file(path.as_ref())?)
}

pub fn write_head(path: impl AsRef<Path>, h: &HeadParams) -> Result<()> {
    write_atomic(path, &encode_head(h))
}

pub fn encode_stats(s: &CenteringStats) -> Vec<u8> {
    let mut w = Writer::new(Magic::Stats, s.dim(), 0);
    w.u32(match s.source {
        StatsSource::Train => 0,
        StatsSource::DevAdapted => 1,
    });
    w.f64s(s.mean.iter());
    w.row_major(&s.total_cov);
    w.buf
}

pub fn decode_stats(buf: &[u8]) -> Result<CenteringStats> {
    let (mut r, h) = Reader::header(buf, Magic::Stats)?;
    let d = h.dim as usize;
    let offset = r.pos;
    let source = match r.u32()? {
        0 => StatsSource::Train,
        1 => StatsSource::DevAdapted,
        other => {
            return Err(FormatError::InvalidValue {
                offset,
                message: format!("unknown statistics source {other}"),
            }
            .into())
        }
    };
    let mean = DVector::from_vec(r.f64s(d)?);
    let cov = r.matrix(d, d)?;
    expect_end(&r)?;
    CenteringStats::new(mean, cov, source)
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<CenteringStats> {
    decode_stats(&read_file(path.as_ref())?)
}

pub fn write_stats(path: impl AsRef<Path>, s: &CenteringStats) -> Result<()> {
    write_atomic(path, &encode_stats(s))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Parses a trial list: `<enroll> <test> [target|nontarget]`, single-space separated.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    content_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split(' ').collect();
            let perr = |message: String| Error::from(FormatError::Parse { line, message });
            if fields.iter().any(|f| f.is_empty()) {
                return Err(perr("fields must be separated by single spaces".into()));
            }
            let label = match fields.as_slice() {
                [_, _] => TrialLabel::Unknown,
                [_, _, "target"] => TrialLabel::Target,
                [_, _, "nontarget"] => TrialLabel::Nontarget,
                [_, _, other] => return Err(perr(format!("unknown label `{other}`"))),
                _ => return Err(perr(format!("expected 2 or 3 fields, found {}", fields.len()))),
            };
            Ok(Trial::new(fields[0], fields[1], label))
        })
        .collect()
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&t.enroll);
        out.push(' ');
        out.push_str(&t.test);
        if t.label != TrialLabel::Unknown {
            out.push(' ');
            out.push_str(t.label.as_str());
        }
        out.push('\n');
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    parse_trials(&read_text(path.as_ref())?)
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    write_atomic(path, format_trials(trials).as_bytes())
}

/// Parses `<utt> <spk>` lines.
pub fn parse_utt2spk(text: &str) -> Result<Vec<(String, String)>> {
    content_lines(text)
        .map(|(line, l)| match l.split_whitespace().collect::<Vec<_>>().as_slice() {
            [u, s] => Ok(((*u).to_owned(), (*s).to_owned())),
            other => Err(FormatError::Parse {
                line,
                message: format!("expected `<utt> <spk>`, found {} fields", other.len()),
            }
            .into()),
        })
        .collect()
}

pub fn read_utt2spk(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    parse_utt2spk(&read_text(path.as_ref())?)
}

pub fn write_utt2spk(path: impl AsRef<Path>, map: &[(String, String)]) -> Result<()> {
    let text: String = map.iter().map(|(u, s)| format!("{u} {s}\n")).collect();
    write_atomic(path, text.as_bytes())
}

/// Score file lines: `<enroll> <test> <score> <label>`; scores use the
/// shortest representation that parses back to the same double.
pub fn format_scores(s: &ScoreSet) -> String {
    let mut out = String::new();
    for e in &s.entries {
        out.push_str(&format!(
            "{} {} {} {}\n",
            e.trial.enroll, e.trial.test, e.score, e.trial.label
        ));
    }
    out
}

pub fn parse_scores(text: &str) -> Result<ScoreSet> {
    let entries = content_lines(text)
        .map(|(line, l)| {
            let perr = |message: String| Error::from(FormatError::Parse { line, message });
            match l.split_whitespace().collect::<Vec<_>>().as_slice() {
                [e, t, score, label] => {
                    let score = score
                        .parse::<f64>()
                        .map_err(|err| perr(format!("score `{score}`: {err}")))?;
                    let label = label.parse::<TrialLabel>().map_err(perr)?;
                    Ok(ScoredTrial {
                        trial: Trial::new(*e, *t, label),
                        score,
                    })
                }
                other => Err(perr(format!("expected 4 fields, found {}", other.len()))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet::new(entries))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    parse_scores(&read_text(path.as_ref())?)
}

pub fn write_scores(path: impl AsRef<Path>, s: &ScoreSet) -> Result<()> {
    write_atomic(path, format_scores(s).as_bytes())
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    builder.prefix(".upplda-");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
