//! Synthetic longitudinal cohorts with known ground truth.
//!
//! Each eye carries a hidden severity that drifts upward at an eye-specific
//! rate; the per-step hazard is a logistic function of the severity, so the
//! rate of progression (visible only across several visits) drives future
//! risk. Images are rendered from a noisy observation of the severity.

mod batch;
mod generate;
pub mod io;
mod split;

pub use batch::{pad_and_batch, pad_and_batch_with};
pub use generate::{generate_cohort, render_image, CohortConfig, SeverityModel, VisitSchedule};
pub use split::{split_patients, PatientSplit, SplitName};

use crate::encoders::Image;
use crate::survival::{EventOutcome, HazardCurve, TimeGrid};

/// Hidden generator state, kept for oracles only.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeTruth {
    pub drift: f64,
    /// Latent severity at each retained visit.
    pub severity: Vec<f64>,
    pub true_hazard: HazardCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EyeRecord {
    pub patient_id: u32,
    pub eye_id: u8,
    pub visit_months: Vec<u32>,
    pub images: Vec<Image>,
    pub outcome: EventOutcome,
    pub truth: Option<EyeTruth>,
}

impl EyeRecord {
    pub fn num_visits(&self) -> usize {
        self.visit_months.len()
    }

    /// Index of the latest visit at or before `months`.
    pub fn last_visit_at_or_before(&self, months: f64) -> Option<usize> {
        self.visit_months.iter().rposition(|&m| m as f64 <= months)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub grid: TimeGrid,
    pub image_size: usize,
    pub eyes: Vec<EyeRecord>,
}

/// Counts in the style of a cohort characteristics table.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub patients: usize,
    pub eyes: usize,
    pub images: usize,
    pub visits_mean: f64,
    pub visits_sd: f64,
    pub years_observed_mean: f64,
    pub years_observed_sd: f64,
    pub censored: usize,
    pub censored_pct: f64,
    pub events: usize,
    pub years_to_disease_mean: f64,
    pub years_to_disease_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl Cohort {
    pub fn max_sequence_len(&self) -> usize {
        self.eyes.iter().map(EyeRecord::num_visits).max().unwrap_or(0)
    }

    pub fn has_truth(&self) -> bool {
        !self.eyes.is_empty() && self.eyes.iter().all(|e| e.truth.is_some())
    }

    pub fn summary(&self) -> CohortSummary {
        let mut patients: Vec<u32> = self.eyes.iter().map(|e| e.patient_id).collect();
        patients.sort_unstable();
        patients.dedup();
        let visits: Vec<f64> = self.eyes.iter().map(|e| e.num_visits() as f64).collect();
        let observed: Vec<f64> = self
            .eyes
            .iter()
            .map(|e| self.grid.step_to_months(e.outcome.event_step) / 12.0)
            .collect();
        let to_disease: Vec<f64> = self
            .eyes
            .iter()
            .filter(|e| e.outcome.is_event())
            .map(|e| self.grid.step_to_months(e.outcome.event_step) / 12.0)
            .collect();
        let censored = self.eyes.len() - to_disease.len();
        let (visits_mean, visits_sd) = mean_sd(&visits);
        let (years_observed_mean, years_observed_sd) = mean_sd(&observed);
        let (years_to_disease_mean, years_to_disease_sd) = mean_sd(&to_disease);
        CohortSummary {
            patients: patients.len(),
            eyes: self.eyes.len(),
            images: self.eyes.iter().map(|e| e.images.len()).sum(),
            visits_mean,
            visits_sd,
            years_observed_mean,
            years_observed_sd,
            censored,
            censored_pct: 100.0 * censored as f64 / self.eyes.len().max(1) as f64,
            events: to_disease.len(),
            years_to_disease_mean,
            years_to_disease_sd,
        }
    }

    /// Eyes whose patient is assigned to `which`.
    pub fn subset(&self, split: &PatientSplit, which: SplitName) -> Cohort {
        Cohort {
            grid: self.grid,
            image_size: self.image_size,
            eyes: self
                .eyes
                .iter()
                .filter(|e| split.of(e.patient_id) == Some(which))
                .cloned()
                .collect(),
        }
    }
}

impl std::fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Images, n                  {}", self.images)?;
        writeln!(f, "Patients, n                {}", self.patients)?;
        writeln!(f, "Eyes, n                    {}", self.eyes)?;
        writeln!(f, "Visits, mean (sd)          {:.2} ({:.2})", self.visits_mean, self.visits_sd)?;
        writeln!(
            f,
            "Years observed, mean (sd)  {:.2} ({:.2})",
            self.years_observed_mean, self.years_observed_sd
        )?;
        writeln!(f, "Censored cases, n (%)      {} ({:.1})", self.censored, self.censored_pct)?;
        writeln!(f, "Events, n                  {}", self.events)?;
        if self.events == 0 {
            write!(f, "Years to disease           0 events")
        } else {
            write!(
                f,
                "Years to disease, mean (sd) {:.2} ({:.2})",
                self.years_to_disease_mean, self.years_to_disease_sd
            )
        }
    }
}
