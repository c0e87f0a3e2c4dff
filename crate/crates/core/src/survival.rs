//! Discrete-time survival bookkeeping.
//!
//! Hazards are indexed by grid step `1..=j_max` and stored zero-based, so
//! `values[j - 1]` is the hazard at step `j`. Survival follows the same
//! layout, with the implicit boundary `S(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discretisation of follow-up time into equally sized steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub step_months: u32,
    pub j_max: usize,
}

impl TimeGrid {
    pub fn new(step_months: u32, j_max: usize) -> Result<Self> {
        if step_months == 0 {
            return Err(Error::Config("step_months must be positive".into()));
        }
        if j_max == 0 {
            return Err(Error::Config("j_max must be at least 1".into()));
        }
        Ok(Self { step_months, j_max })
    }

    /// Six-month grid with 27 steps.
    pub fn areds_like() -> Self {
        Self {
            step_months: 6,
            j_max: 27,
        }
    }

    /// Annual grid with 15 steps.
    pub fn ohts_like() -> Self {
        Self {
            step_months: 12,
            j_max: 15,
        }
    }

    pub fn months_to_step(&self, months: f64) -> usize {
        let exact = months / self.step_months as f64;
        let step = exact.round();
        if (exact - step).abs() > 0.01 {
            log::warn!(
                "{months} months is {:.3} steps off the {}-month grid",
                (exact - step).abs(),
                self.step_months
            );
        }
        step.max(0.0) as usize
    }

    pub fn years_to_step(&self, years: f64) -> usize {
        self.months_to_step(12.0 * years)
    }

    pub fn step_to_months(&self, step: usize) -> f64 {
        (step as u64 * self.step_months as u64) as f64
    }
}

/// Per-step conditional event probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardCurve {
    values: Vec<f64>,
}

impl HazardCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("hazard curve must have at least one step".into()));
        }
        if let Some((j, h)) = values
            .iter()
            .enumerate()
            .find(|(_, h)| !(0.0..=1.0).contains(*h))
        {
            return Err(Error::Domain(format!(
                "hazard at step {} is {h}, outside [0, 1]",
                j + 1
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_survival(&self) -> SurvivalCurve {
        let mut acc = 1.0;
        let values = self
            .values
            .iter()
            .map(|h| {
                acc *= 1.0 - h;
                acc
            })
            .collect();
        SurvivalCurve { values }
    }
}

/// Probability of remaining event-free through each step.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    values: Vec<f64>,
}

impl SurvivalCurve {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn j_max(&self) -> usize {
        self.values.len()
    }

    /// `S(step)` with `S(0) = 1`.
    pub fn at(&self, step: usize) -> f64 {
        if step == 0 {
            1.0
        } else {
            self.values[step - 1]
        }
    }

    /// Recovers the hazards, `h[j] = 1 - S[j] / S[j-1]`, wherever `S[j-1] > 0`.
    /// Steps after the curve reaches zero have no defined hazard and yield `None`.
    pub fn to_hazards(&self) -> Vec<Option<f64>> {
        (1..=self.values.len())
            .map(|j| {
                let prev = self.at(j - 1);
                (prev > 0.0).then(|| 1.0 - self.at(j) / prev)
            })
            .collect()
    }
}

/// Discrete outcome of one eye: the step of the event or of censoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub event_step: usize,
    pub censored: bool,
}

impl EventOutcome {
    pub fn new(event_step: usize, censored: bool, grid: &TimeGrid) -> Result<Self> {
        if event_step == 0 || event_step > grid.j_max {
            return Err(Error::Data(format!(
                "event step {event_step} outside [1, {}]",
                grid.j_max
            )));
        }
        Ok(Self {
            event_step,
            censored,
        })
    }

    pub fn is_event(&self) -> bool {
        !self.censored
    }
}

pub fn hazard_to_survival(h: &HazardCurve) -> SurvivalCurve {
    h.to_survival()
}

/// Conditional probability of the event in `(t, t + dt]` given survival to `t`:
/// `(S(t) - S(t + dt)) / S(t)`.
pub fn risk_window(s: &SurvivalCurve, t_step: usize, dt_steps: usize) -> Result<f64> {
    if dt_steps == 0 {
        return Err(Error::Domain("risk window needs a positive horizon".into()));
    }
    let end = t_step + dt_steps;
    if end > s.j_max() {
        return Err(Error::Domain(format!(
            "window ({t_step}, {end}] exceeds the {}-step grid",
            s.j_max()
        )));
    }
    let base = s.at(t_step);
    if base <= 0.0 {
        return Err(Error::DegenerateConditioning(format!(
            "S({t_step}) = 0; the eye cannot be at risk"
        )));
    }
    Ok(((base - s.at(end)) / base).clamp(0.0, 1.0))
}
