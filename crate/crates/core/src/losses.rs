//! Censoring-aware survival loss and the step-ahead feature loss.
//!
//! With `c = 1` for censored eyes and `S(0) = 1`:
//!
//! ```text
//! L_ce         = -c log S(tau)
//! L_uncensored = -(1 - c) [log S(tau - 1) + log h(tau)]
//! L_surv       = (1 - beta) L_ce + beta L_uncensored
//! ```
//!
//! The `Chen` variant instead weights `(1 - beta)(L_ce + L_uncensored) + beta L_uncensored`.
//! Inside the graph both are expressed as a weighted sum over `log(1 - h)` and
//! `log h` entries, so one pass handles every supervised row of a batch.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::model::{LtsaVars, SequenceBatch};
use crate::survival::{EventOutcome, HazardCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    #[default]
    Paper,
    Chen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub supervise_all_subsequences: bool,
    #[serde(default)]
    pub variant: LossVariant,
    /// Multiplier on the step-ahead term; 1 gives the plain sum.
    #[serde(default = "one")]
    pub step_ahead_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.15,
            supervise_all_subsequences: true,
            variant: LossVariant::Paper,
            step_ahead_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.step_ahead_weight >= 0.0 && self.step_ahead_weight.is_finite()) {
            return Err(Error::Config(format!("step_ahead_weight {} must be finite and >= 0", self.step_ahead_weight)));
        }
        Ok(())
    }

    /// Coefficients `(w_survive, w_event)` such that the row loss is
    /// `-(sum_s w_survive[s] log(1 - h[s]) + sum_s w_event[s] log h[s])`.
    pub fn row_weights(&self, outcome: EventOutcome, j_max: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        check_outcome(outcome, j_max)?;
        let tau = outcome.event_step;
        let c = if outcome.censored { 1.0 } else { 0.0 };
        let (ce, unc) = match self.variant {
            LossVariant::Paper => ((1.0 - self.beta) * c, self.beta * (1.0 - c)),
            LossVariant::Chen => ((1.0 - self.beta) * c, 1.0 - c),
        };
        let mut survive = vec![0.0; j_max];
        let mut event = vec![0.0; j_max];
        for (s, w) in survive.iter_mut().enumerate().take(tau) {
            *w = ce + if s + 1 < tau { unc } else { 0.0 };
        }
        event[tau - 1] = unc;
        Ok((survive, event))
    }
}

fn check_outcome(outcome: EventOutcome, j_max: usize) -> Result<()> {
    if outcome.event_step == 0 || outcome.event_step > j_max {
        return Err(Error::Data(format!(
            "event step {} outside the {j_max}-step grid",
            outcome.event_step
        )));
    }
    Ok(())
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Survival loss of one hazard curve, evaluated directly from the survival function.
pub fn survival_loss(h: &HazardCurve, outcome: EventOutcome, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_outcome(outcome, h.len())?;
    let s = h.to_survival();
    let tau = outcome.event_step;
    let c = if outcome.censored { 1.0 } else { 0.0 };
    let l_ce = -c * clamped_ln(s.at(tau));
    let l_unc = -(1.0 - c) * (clamped_ln(s.at(tau - 1)) + clamped_ln(h.values()[tau - 1]));
    Ok(match cfg.variant {
        LossVariant::Paper => (1.0 - cfg.beta) * l_ce + cfg.beta * l_unc,
        LossVariant::Chen => (1.0 - cfg.beta) * (l_ce + l_unc) + cfg.beta * l_unc,
    })
}

/// Mean squared error over flagged rows; `None` when no row is flagged.
pub fn step_ahead_loss(predicted: &Tensor, target: &Tensor, valid_rows: &[bool]) -> Result<Option<f64>> {
    let (m, n) = predicted
        .dims2()
        .ok_or_else(|| Error::shape("step_ahead_loss", predicted.shape(), target.shape()))?;
    if target.shape() != predicted.shape() || valid_rows.len() != m {
        return Err(Error::shape("step_ahead_loss", predicted.shape(), target.shape()));
    }
    let rows: Vec<usize> = (0..m).filter(|&r| valid_rows[r]).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut acc = 0.0;
    for &r in &rows {
        for (p, t) in predicted.row(r).iter().zip(target.row(r)) {
            acc += (p - t).powi(2);
        }
    }
    Ok(Some(acc / (rows.len() * n) as f64))
}

fn weighted_survival_term(
    g: &mut Graph,
    hazards: Var,
    w_survive: Vec<f64>,
    w_event: Vec<f64>,
    rows: usize,
    j_max: usize,
) -> Result<Var> {
    let one_minus = g.affine(hazards, -1.0, 1.0);
    let log_survive = g.log(one_minus);
    let log_event = g.log(hazards);
    let a = g.weighted_sum(log_survive, Tensor::new(vec![rows, j_max], w_survive)?)?;
    let b = g.weighted_sum(log_event, Tensor::new(vec![rows, j_max], w_event)?)?;
    let s = g.add(a, b)?;
    Ok(g.affine(s, -1.0, 0.0))
}

/// Loss terms recorded in a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub survival: Var,
    /// Absent when no sequence in the batch has a next visit.
    pub step_ahead: Option<Var>,
}

/// Survival loss averaged over supervised rows plus the pooled step-ahead MSE.
pub fn ltsa_loss(g: &mut Graph, vars: &LtsaVars, batch: &SequenceBatch, cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    let (bsz, len) = (batch.batch, batch.len);
    let j_max = g.value(vars.hazards).dims2().map(|d| d.1).unwrap_or(0);
    let lens = batch.lengths();
    let mut w_survive = vec![0.0; bsz * len * j_max];
    let mut w_event = vec![0.0; bsz * len * j_max];
    let mut supervised = 0usize;
    for b in 0..bsz {
        let (ws, we) = cfg.row_weights(batch.outcomes[b], j_max)?;
        let first = if cfg.supervise_all_subsequences { 0 } else { lens[b] - 1 };
        for k in first..lens[b] {
            let r = b * len + k;
            w_survive[r * j_max..(r + 1) * j_max].copy_from_slice(&ws);
            w_event[r * j_max..(r + 1) * j_max].copy_from_slice(&we);
            supervised += 1;
        }
    }
    let scale = 1.0 / supervised as f64;
    for w in w_survive.iter_mut().chain(w_event.iter_mut()) {
        *w *= scale;
    }
    let survival = weighted_survival_term(g, vars.hazards, w_survive, w_event, bsz * len, j_max)?;

    let emb = g.value(vars.image_embeddings);
    let d = emb.dims2().map(|x| x.1).unwrap_or(0);
    let mut target = vec![0.0; bsz * len * d];
    let mut rows = vec![false; bsz * len];
    for b in 0..bsz {
        for k in 0..lens[b].saturating_sub(1) {
            let r = b * len + k;
            target[r * d..(r + 1) * d].copy_from_slice(emb.row(r + 1));
            rows[r] = true;
        }
    }
    let step_ahead = if cfg.step_ahead_weight > 0.0 && rows.iter().any(|&r| r) {
        Some(g.mse_rows(vars.step_ahead, Tensor::new(vec![bsz * len, d], target)?, rows)?)
    } else {
        None
    };
    let total = match step_ahead {
        Some(p) if cfg.step_ahead_weight == 1.0 => g.add(survival, p)?,
        Some(p) => {
            let w = g.affine(p, cfg.step_ahead_weight, 0.0);
            g.add(survival, w)?
        }
        None => survival,
    };
    Ok(LossVars {
        total,
        survival,
        step_ahead,
    })
}

/// Survival loss averaged over single-image rows, one outcome per row.
pub fn baseline_loss(g: &mut Graph, hazards: Var, outcomes: &[EventOutcome], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (rows, j_max) = g
        .value(hazards)
        .dims2()
        .ok_or_else(|| Error::shape("baseline_loss", g.value(hazards).shape(), &[outcomes.len()]))?;
    if rows != outcomes.len() || rows == 0 {
        return Err(Error::shape("baseline_loss", &[rows, j_max], &[outcomes.len()]));
    }
    let mut w_survive = Vec::with_capacity(rows * j_max);
    let mut w_event = Vec::with_capacity(rows * j_max);
    for o in outcomes {
        let (ws, we) = cfg.row_weights(*o, j_max)?;
        w_survive.extend(ws.iter().map(|w| w / rows as f64));
        w_event.extend(we.iter().map(|w| w / rows as f64));
    }
    weighted_survival_term(g, hazards, w_survive, w_event, rows, j_max)
}
