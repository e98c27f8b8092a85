//! Detection metrics over labelled score sets.
//!
//! Scores are swept as thresholds: a trial is accepted when its score is
//! strictly above the threshold. Tied scores form a single operating point.
//! The sweep starts at `-∞` (accept everything: FRR 0, FAR 1) and ends after
//! the largest score (reject everything: FRR 1, FAR 0).

use crate::embedding::{Trial, TrialLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoredTrial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub target: usize,
    pub nontarget: usize,
    pub unknown: usize,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoredTrial>) -> Self {
        Self { entries }
    }

    /// Builds a labelled set from separate target and nontarget scores.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let mk = |(i, &s): (usize, &f64), label| ScoredTrial {
            trial: Trial::new(format!("e{i}"), format!("t{i}"), label),
            score: s,
        };
        let mut entries: Vec<ScoredTrial> = targets.iter().enumerate().map(|p| mk(p, TrialLabel::Target)).collect();
        entries.extend(nontargets.iter().enumerate().map(|p| mk(p, TrialLabel::Nontarget)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.score)
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for e in &self.entries {
            match e.trial.label {
                TrialLabel::Target => c.target += 1,
                TrialLabel::Nontarget => c.nontarget += 1,
                TrialLabel::Unknown => c.unknown += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_fa: f64,
    pub c_miss: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_fa: 1.0,
            c_miss: 1.0,
        }
    }
}

impl DcfParams {
    pub fn new(p_target: f64, c_fa: f64, c_miss: f64) -> Result<Self> {
        if !(p_target > 0.0 && p_target < 1.0) {
            return Err(Error::invalid(format!("p_target {p_target} must lie in (0, 1)")));
        }
        if !(c_fa > 0.0 && c_miss > 0.0 && c_fa.is_finite() && c_miss.is_finite()) {
            return Err(Error::invalid("detection costs must be positive"));
        }
        Ok(Self { p_target, c_fa, c_miss })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Trials scoring strictly above this value are accepted.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// The ROC operating points of the sweep, in increasing threshold order.
pub fn operating_points(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let counts = s.label_counts();
    if counts.unknown > 0 {
        return Err(Error::UnknownLabels(counts.unknown));
    }
    if counts.target == 0 {
        return Err(Error::MissingClass("target"));
    }
    if counts.nontarget == 0 {
        return Err(Error::MissingClass("nontarget"));
    }
    if let Some(e) = s.entries.iter().find(|e| !e.score.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite score for trial {} {}",
            e.trial.enroll, e.trial.test
        )));
    }
    let mut sorted: Vec<(f64, bool)> = s
        .entries
        .iter()
        .map(|e| (e.score, e.trial.label == TrialLabel::Target))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (nt, nn) = (counts.target as f64, counts.nontarget as f64);
    let mut points = Vec::with_capacity(sorted.len() + 1);
    points.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    });
    let (mut misses, mut false_accepts) = (0usize, counts.nontarget);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                misses += 1;
            } else {
                false_accepts -= 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold,
            far: false_accepts as f64 / nn,
            frr: misses as f64 / nt,
        });
    }
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two adjacent operating
/// points where `FAR − FRR` changes sign.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    Ok(eer_from_points(&operating_points(s)?))
}

pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    // FAR − FRR starts at 1 and ends at −1, decreasing monotonically.
    let k = points
        .iter()
        .position(|p| p.far <= p.frr)
        .expect("the sweep ends at FAR = 0, FRR = 1");
    let cur = points[k];
    if cur.far == cur.frr {
        return cur.frr;
    }
    let prev = points[k - 1];
    let d_prev = prev.far - prev.frr;
    let d_cur = cur.far - cur.frr;
    let t = d_prev / (d_prev - d_cur);
    prev.frr + t * (cur.frr - prev.frr)
}

/// Minimum of `p·c_miss·FRR + (1−p)·c_fa·FAR` over the sweep, divided by
/// `min(p·c_miss, (1−p)·c_fa)`.
pub fn min_dcf(s: &ScoreSet, p: &DcfParams) -> Result<f64> {
    let points = operating_points(s)?;
    let miss_weight = p.p_target * p.c_miss;
    let fa_weight = (1.0 - p.p_target) * p.c_fa;
    let best = points
        .iter()
        .map(|op| miss_weight * op.frr + fa_weight * op.far)
        .fold(f64::INFINITY, f64::min);
    Ok(best / miss_weight.min(fa_weight))
}
