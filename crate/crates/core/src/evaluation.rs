//! Risk forecasts over the (prediction time, horizon) grid and the
//! bootstrapped comparison of two score sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{pad_and_batch, Cohort};
use crate::diff::Mode;
use crate::error::{Error, Result};
use crate::metrics::{
    bonferroni, bootstrap_ci, brier_td, concordance_counts, stars, welch_one_sided, BootstrapResult, RiskRow,
    BONFERRONI_M,
};
use crate::model::{Model, ModelKind};
use crate::survival::{risk_window, SurvivalCurve, TimeGrid};

/// Random-predictor draws averaged into its point estimate.
const RANDOM_DRAWS: u64 = 1000;
const FORECAST_BATCH: usize = 64;

/// Prediction times and horizons, both in years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub times: Vec<f64>,
    pub horizons: Vec<f64>,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            times: vec![1.0, 2.0, 3.0, 5.0, 8.0],
            horizons: vec![1.0, 2.0, 5.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub t_years: f64,
    pub dt_years: f64,
    pub t_step: usize,
    /// `t_step + dt_steps`, clamped to the end of the grid.
    pub horizon_step: usize,
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.horizons.is_empty() {
            return Err(Error::Config("evaluation grid needs times and horizons".into()));
        }
        if self.times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) || self.horizons.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Config("grid times must be >= 0 and horizons > 0 years".into()));
        }
        Ok(())
    }

    pub fn cells(&self, grid: &TimeGrid) -> Result<Vec<Cell>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.times.len() * self.horizons.len());
        for &t in &self.times {
            for &dt in &self.horizons {
                let t_step = grid.years_to_step(t);
                let dt_steps = grid.years_to_step(dt).max(1);
                if t_step + dt_steps > grid.j_max {
                    log::debug!("horizon of cell ({t}, {dt}) clamped to step {}", grid.j_max);
                }
                out.push(Cell {
                    t_years: t,
                    dt_years: dt,
                    t_step,
                    horizon_step: (t_step + dt_steps).min(grid.j_max),
                });
            }
        }
        Ok(out)
    }
}

/// Survival curves of one eye, one per visit prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeForecasts {
    pub curves: Vec<SurvivalCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSource {
    Forecasts { forecasts: Vec<EyeForecasts>, negate: bool },
    /// Fresh uniform scores per draw.
    Random,
}

/// Hazard forecasts of a trained model after every visit of every eye.
pub fn forecast_model(model: &Model, cohort: &Cohort) -> Result<Vec<EyeForecasts>> {
    let mut out = Vec::with_capacity(cohort.eyes.len());
    match model.config.kind {
        ModelKind::Ltsa => {
            for chunk in cohort.eyes.chunks(FORECAST_BATCH) {
                let refs: Vec<_> = chunk.iter().collect();
                let batch = pad_and_batch(&refs, model.config.max_len)?;
                let output = model.forward_ltsa(&batch, Mode::Eval, 0)?;
                for (b, eye) in chunk.iter().enumerate() {
                    let curves = (0..eye.num_visits())
                        .map(|k| Ok(output.hazard_curve(b, k)?.to_survival()))
                        .collect::<Result<Vec<_>>>()?;
                    out.push(EyeForecasts { curves });
                }
            }
        }
        ModelKind::Baseline => {
            let images: Vec<_> = cohort.eyes.iter().flat_map(|e| e.images.iter().cloned()).collect();
            let mut curves = Vec::with_capacity(images.len());
            for chunk in images.chunks(FORECAST_BATCH * 8) {
                curves.extend(model.forward_baseline(chunk, Mode::Eval, 0)?);
            }
            let mut it = curves.into_iter();
            for eye in &cohort.eyes {
                let curves = it.by_ref().take(eye.num_visits()).map(|h| h.to_survival()).collect();
                out.push(EyeForecasts { curves });
            }
        }
    }
    Ok(out)
}

/// The generator's own hazards, identical at every visit.
pub fn forecast_oracle(cohort: &Cohort) -> Result<Vec<EyeForecasts>> {
    cohort
        .eyes
        .iter()
        .map(|e| {
            let truth = e.truth.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "patient {} eye {} has no ground truth; the oracle needs truth.csv",
                    e.patient_id, e.eye_id
                ))
            })?;
            let s = truth.true_hazard.to_survival();
            Ok(EyeForecasts { curves: vec![s; e.num_visits()] })
        })
        .collect()
}

/// Visit whose prefix forecasts for `eye` at `cell`, or `None` if the eye
/// is not in the risk set: no event or censoring by `t` and a visit by `t`.
fn risk_set_position(cohort: &Cohort, eye: usize, cell: &Cell) -> Option<usize> {
    let e = &cohort.eyes[eye];
    if e.outcome.event_step <= cell.t_step || cell.horizon_step <= cell.t_step {
        return None;
    }
    e.last_visit_at_or_before(cohort.grid.step_to_months(cell.t_step))
}

/// Window risk from a curve; a curve with `S(t) = 0` scores risk 1.
fn window_risk(curve: &SurvivalCurve, cell: &Cell) -> Result<f64> {
    match risk_window(curve, cell.t_step, cell.horizon_step - cell.t_step) {
        Ok(r) => Ok(r),
        Err(Error::DegenerateConditioning(_)) => Ok(1.0),
        Err(e) => Err(e),
    }
}

/// Risk set of `cell` as `(eye index, row)` pairs. Random sources score 0.
pub fn risk_table(cohort: &Cohort, source: &ScoreSource, cell: &Cell) -> Result<Vec<(usize, RiskRow)>> {
    if let ScoreSource::Forecasts { forecasts, .. } = source {
        if forecasts.len() != cohort.eyes.len() {
            return Err(Error::Data(format!(
                "{} forecasts for {} eyes",
                forecasts.len(),
                cohort.eyes.len()
            )));
        }
    }
    let mut out = Vec::new();
    for (eye, e) in cohort.eyes.iter().enumerate() {
        let Some(pos) = risk_set_position(cohort, eye, cell) else {
            continue;
        };
        let risk = match source {
            ScoreSource::Forecasts { forecasts, negate } => {
                let curve = forecasts[eye]
                    .curves
                    .get(pos)
                    .ok_or_else(|| Error::Data(format!("no forecast for visit {pos} of eye {eye}")))?;
                let r = window_risk(curve, cell)?;
                if *negate {
                    -r
                } else {
                    r
                }
            }
            ScoreSource::Random => 0.0,
        };
        out.push((
            eye,
            RiskRow {
                risk,
                event_step: e.outcome.event_step,
                censored: e.outcome.censored,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellEval {
    pub cell: Cell,
    pub n_risk_set: usize,
    pub n_pairs: u64,
    pub concordance: Option<f64>,
    pub brier: Option<f64>,
    pub concordance_boot: Option<BootstrapResult>,
    pub brier_boot: Option<BootstrapResult>,
}

impl CellEval {
    pub fn boot(&self, metric: Metric) -> Option<&BootstrapResult> {
        match metric {
            Metric::Concordance => self.concordance_boot.as_ref(),
            Metric::Brier => self.brier_boot.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    pub name: String,
    pub cells: Vec<CellEval>,
}

impl ModelEval {
    /// Mean point concordance over non-empty cells.
    pub fn mean_concordance(&self) -> Option<f64> {
        let values: Vec<f64> = self.cells.iter().filter_map(|c| c.concordance).collect();
        let skipped = self.cells.len() - values.len();
        if skipped > 0 {
            log::debug!("{skipped} empty cells left out of the mean concordance");
        }
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn with_random_scores(rows: &mut [RiskRow], rng: &mut ChaCha8Rng) {
    for r in rows {
        r.risk = rng.random();
    }
}

fn cell_metrics(rows: &[RiskRow], horizon: usize, brier_sum: bool) -> Result<(Option<f64>, u64, Option<f64>)> {
    let counts = concordance_counts(rows, horizon)?;
    Ok((counts.value(), counts.pairs, brier_td(rows, horizon, brier_sum)?))
}

/// Point estimates and, when `n_boot > 0`, eye-level bootstrap samples over
/// `cohort` for every cell. Resample `b` uses the same eye indices for every
/// cell and every score source that shares `seed`.
pub fn evaluate(name: &str, cohort: &Cohort, source: &ScoreSource, grid: &EvalGrid, n_boot: usize, seed: u64) -> Result<ModelEval> {
    let random = matches!(source, ScoreSource::Random);
    let mut cells = Vec::new();
    for (ci, cell) in grid.cells(&cohort.grid)?.into_iter().enumerate() {
        let table = risk_table(cohort, source, &cell)?;
        let mut rows: Vec<RiskRow> = table.iter().map(|&(_, r)| r).collect();
        let (concordance, n_pairs, brier) = if random {
            let mut c_sum = 0.0;
            let mut b_sum = 0.0;
            let mut c_value = None;
            for draw in 0..RANDOM_DRAWS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000 ^ ci as u64);
                rng.set_stream(draw);
                with_random_scores(&mut rows, &mut rng);
                let (c, _, b) = cell_metrics(&rows, cell.horizon_step, false)?;
                if let Some(c) = c {
                    c_sum += c;
                    c_value = Some(c_sum / (draw + 1) as f64);
                }
                b_sum += b.unwrap_or(0.0);
            }
            let pairs = concordance_counts(&rows, cell.horizon_step)?.pairs;
            let brier = (!rows.is_empty()).then(|| b_sum / RANDOM_DRAWS as f64);
            (c_value, pairs, brier)
        } else {
            cell_metrics(&rows, cell.horizon_step, false)?
        };

        let (mut concordance_boot, mut brier_boot) = (None, None);
        if n_boot > 0 && cohort.eyes.len() >= 2 && concordance.is_some() {
            let mut lookup: Vec<Option<RiskRow>> = vec![None; cohort.eyes.len()];
            for &(eye, r) in &table {
                lookup[eye] = Some(r);
            }
            let mut scratch = Vec::with_capacity(cohort.eyes.len());
            let gather = |idx: &[usize], rng: &mut ChaCha8Rng, scratch: &mut Vec<RiskRow>| {
                scratch.clear();
                scratch.extend(idx.iter().filter_map(|&i| lookup[i]));
                if random {
                    with_random_scores(scratch, rng);
                }
            };
            let boot_c = bootstrap_ci(cohort.eyes.len(), n_boot, seed, |idx, rng| {
                gather(idx, rng, &mut scratch);
                Ok(concordance_counts(&scratch, cell.horizon_step)?.value())
            })?;
            let mut scratch = Vec::with_capacity(cohort.eyes.len());
            let boot_b = bootstrap_ci(cohort.eyes.len(), n_boot, seed, |idx, rng| {
                gather(idx, rng, &mut scratch);
                brier_td(&scratch, cell.horizon_step, false)
            })?;
            concordance_boot = boot_c;
            brier_boot = boot_b;
        }
        cells.push(CellEval {
            cell,
            n_risk_set: rows.len(),
            n_pairs,
            concordance,
            brier,
            concordance_boot,
            brier_boot,
        });
    }
    Ok(ModelEval {
        name: name.to_string(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Concordance,
    Brier,
}

/// One-sided comparison of `a` against `b` in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellComparison {
    pub t_years: f64,
    pub dt_years: f64,
    pub raw_p: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub stars: String,
    pub degenerate: bool,
}

/// Tests whether `a` beats `b`: higher concordance, or lower Brier score.
pub fn compare(a: &ModelEval, b: &ModelEval, metric: Metric) -> Result<Vec<CellComparison>> {
    if a.cells.len() != b.cells.len() {
        return Err(Error::Data("evaluations cover different grids".into()));
    }
    let mut out = Vec::with_capacity(a.cells.len());
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        if ca.cell != cb.cell {
            return Err(Error::Data("evaluations cover different grids".into()));
        }
        let tested = match (ca.boot(metric), cb.boot(metric)) {
            (Some(sa), Some(sb)) if sa.samples.len() >= 2 && sb.samples.len() >= 2 => Some(match metric {
                Metric::Concordance => welch_one_sided(&sa.samples, &sb.samples)?,
                Metric::Brier => welch_one_sided(&sb.samples, &sa.samples)?,
            }),
            _ => None,
        };
        let (raw_p, p_adjusted, degenerate) = match tested {
            Some(w) => (Some(w.p), Some(bonferroni(w.p, BONFERRONI_M)?), w.degenerate),
            None => (None, None, false),
        };
        out.push(CellComparison {
            t_years: ca.cell.t_years,
            dt_years: ca.cell.dt_years,
            raw_p,
            p_adjusted,
            stars: p_adjusted.map_or("", stars).to_string(),
            degenerate,
        });
    }
    Ok(out)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub t: f64,
    pub dt: f64,
    pub estimate: Option<f64>,
    pub boot_mean: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub stars: String,
    pub n_pairs: u64,
    pub n_risk_set: usize,
}

/// Report rows for `eval`, with P-values from `comparison` when given.
pub fn report_rows(eval: &ModelEval, metric: Metric, comparison: Option<&[CellComparison]>) -> Vec<ReportRow> {
    eval.cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (estimate, boot) = match metric {
                Metric::Concordance => (c.concordance, c.concordance_boot.as_ref()),
                Metric::Brier => (c.brier, c.brier_boot.as_ref()),
            };
            let cmp = comparison.and_then(|cs| cs.get(i));
            ReportRow {
                model: eval.name.clone(),
                t: c.cell.t_years,
                dt: c.cell.dt_years,
                estimate,
                boot_mean: boot.map(|b| b.mean),
                ci_lo: boot.map(|b| b.lo),
                ci_hi: boot.map(|b| b.hi),
                p_adjusted: cmp.and_then(|x| x.p_adjusted),
                stars: cmp.map(|x| x.stars.clone()).unwrap_or_default(),
                n_pairs: c.n_pairs,
                n_risk_set: c.n_risk_set,
            }
        })
        .collect()
}
