//! Which visits the trained Transformer looks at.
//!
//! Scores come from [`extract_attention`]; offsets count visits back from the
//! most recent one (0 = latest), with everything 10 or more back pooled.

use crate::cohort::{pad_and_batch, Cohort};
use crate::metrics::percentile;
use crate::diff::Mode;
use crate::model::{extract_attention, Model, ModelKind};
use crate::{Error, Result};

/// Offsets at or beyond this share one bin.
pub const OFFSET_CAP: usize = 10;
const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EyeAttention {
    pub patient_id: u32,
    pub eye_id: u8,
    pub visit_months: Vec<u32>,
    /// Normalised so the largest entry is exactly 1.
    pub scores: Vec<f64>,
}

impl EyeAttention {
    /// Offset of visit `k` from the latest visit.
    pub fn offset(&self, k: usize) -> usize {
        self.scores.len() - 1 - k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetBin {
    /// Visits back from the latest; `OFFSET_CAP` stands for "that many or more".
    pub offset: usize,
    pub n: usize,
    pub median: f64,
}

impl OffsetBin {
    pub fn label(&self) -> String {
        if self.offset >= OFFSET_CAP {
            format!(">={OFFSET_CAP}")
        } else {
            self.offset.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub n_eyes: usize,
    /// Eyes with at least two visits; only these enter the rest of the summary.
    pub n_multi_visit: usize,
    pub last_visit_max_fraction: Option<f64>,
    /// Mean of 1/J over the same eyes: what a uniform attention would give.
    pub uniform_fraction: Option<f64>,
    pub bins: Vec<OffsetBin>,
    /// Pearson r between bin offset and bin median.
    pub offset_correlation: Option<f64>,
}

pub fn attention_scores(model: &Model, cohort: &Cohort) -> Result<Vec<EyeAttention>> {
    if model.config.kind != ModelKind::Ltsa {
        return Err(Error::Config(format!(
            "attention analysis needs an ltsa model, got {}",
            model.config.kind
        )));
    }
    let mut out = Vec::with_capacity(cohort.eyes.len());
    for chunk in cohort.eyes.chunks(BATCH) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = pad_and_batch(&refs, model.config.max_len)?;
        let output = model.forward_ltsa(&batch, Mode::Eval, 0)?;
        for (b, eye) in chunk.iter().enumerate() {
            out.push(EyeAttention {
                patient_id: eye.patient_id,
                eye_id: eye.eye_id,
                visit_months: eye.visit_months.clone(),
                scores: extract_attention(&output, b)?,
            });
        }
    }
    Ok(out)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn summarize_attention(eyes: &[EyeAttention]) -> AttentionSummary {
    let multi: Vec<&EyeAttention> = eyes.iter().filter(|e| e.scores.len() >= 2).collect();
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); OFFSET_CAP + 1];
    let mut last_max = 0usize;
    for e in &multi {
        // Ties with an earlier visit still count: the latest visit reached 1.
        if e.scores[e.scores.len() - 1] == 1.0 {
            last_max += 1;
        }
        for (k, &s) in e.scores.iter().enumerate() {
            per_bin[e.offset(k).min(OFFSET_CAP)].push(s);
        }
    }
    let bins: Vec<OffsetBin> = per_bin
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(offset, mut v)| {
            v.sort_by(f64::total_cmp);
            OffsetBin { offset, n: v.len(), median: percentile(&v, 0.5) }
        })
        .collect();
    let xs: Vec<f64> = bins.iter().map(|b| b.offset as f64).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.median).collect();
    let m = multi.len();
    AttentionSummary {
        n_eyes: eyes.len(),
        n_multi_visit: m,
        last_visit_max_fraction: (m > 0).then(|| last_max as f64 / m as f64),
        uniform_fraction: (m > 0).then(|| multi.iter().map(|e| 1.0 / e.scores.len() as f64).sum::<f64>() / m as f64),
        bins,
        offset_correlation: pearson(&xs, &ys),
    }
}
