use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Cohort, EyeRecord, EyeTruth};
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::survival::{EventOutcome, HazardCurve, TimeGrid};

/// Number of scheduled visits and the gaps between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    /// Scheduled visits per eye, including enrolment and the final
    /// outcome-determining visit; drawn uniformly from this range.
    pub min_visits: usize,
    pub max_visits: usize,
    /// `gap_probs[i]` is the probability of a gap of `i + 1` grid steps.
    pub gap_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityModel {
    pub init_mean: f64,
    pub init_sd: f64,
    /// Per-step drift, normal and clipped at zero.
    pub drift_mean: f64,
    pub drift_sd: f64,
    /// Correlation of drift between the two eyes of a patient.
    pub drift_corr: f64,
    pub process_sd: f64,
    /// Noise on the severity a rendered image reflects.
    pub obs_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub eyes_per_patient: usize,
    pub step_months: u32,
    pub j_max: usize,
    pub image_size: usize,
    pub visits: VisitSchedule,
    pub severity: SeverityModel,
    /// Hazard link `h = sigmoid(a * s + b)`.
    pub hazard_a: f64,
    pub hazard_b: f64,
    /// Expected fraction of censored eyes; `None` disables random dropout.
    pub target_censoring: Option<f64>,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl CohortConfig {
    /// Six-month grid calibrated to the AREDS-like censoring and visit counts.
    pub fn areds_like(n_patients: usize, seed: u64) -> Self {
        Self {
            n_patients,
            eyes_per_patient: 2,
            step_months: 6,
            j_max: 27,
            image_size: 32,
            visits: VisitSchedule {
                min_visits: 6,
                max_visits: 15,
                gap_probs: vec![0.3, 0.6, 0.1],
            },
            severity: SeverityModel {
                init_mean: 2.0,
                init_sd: 2.0,
                drift_mean: 0.2,
                drift_sd: 0.2,
                drift_corr: 0.5,
                process_sd: 0.1,
                obs_sd: 2.5,
            },
            hazard_a: 1.0,
            hazard_b: -10.5,
            target_censoring: Some(0.878),
            pixel_noise: 0.03,
            seed,
        }
    }

    /// Annual grid with 15 steps.
    pub fn ohts_like(n_patients: usize, seed: u64) -> Self {
        let mut cfg = Self::areds_like(n_patients, seed);
        cfg.step_months = 12;
        cfg.j_max = 15;
        cfg.visits.gap_probs = vec![0.8, 0.2];
        cfg.severity.drift_mean *= 2.0;
        cfg.severity.drift_sd *= 2.0;
        cfg.severity.process_sd *= std::f64::consts::SQRT_2;
        cfg
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.step_months, self.j_max)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_patients == 0 || self.eyes_per_patient == 0 {
            return bad("cohort needs at least one patient and one eye per patient");
        }
        if self.eyes_per_patient > 2 {
            return bad("eyes_per_patient must be 1 or 2");
        }
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        let v = &self.visits;
        if v.min_visits < 2 || v.max_visits < v.min_visits {
            return bad("visit range must satisfy 2 <= min_visits <= max_visits");
        }
        if v.gap_probs.is_empty()
            || v.gap_probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (v.gap_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("gap_probs must be probabilities summing to 1");
        }
        if self.j_max < v.gap_probs.len() {
            return bad("j_max must cover the longest visit gap");
        }
        let s = &self.severity;
        let finite = [
            s.init_mean,
            s.init_sd,
            s.drift_mean,
            s.drift_sd,
            s.process_sd,
            s.obs_sd,
            self.hazard_a,
            self.hazard_b,
            self.pixel_noise,
        ];
        if finite.iter().any(|x| x.is_nan()) {
            return bad("severity and hazard parameters must not be NaN");
        }
        if s.init_sd < 0.0 || s.drift_sd < 0.0 || s.process_sd < 0.0 || s.obs_sd < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&s.drift_corr) {
            return bad("drift_corr must lie in [0, 1]");
        }
        if let Some(t) = self.target_censoring {
            if !(0.0..=1.0).contains(&t) {
                return bad("target_censoring must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

const EYE_STREAM: u64 = 0;
const PATIENT_STREAM: u64 = 1 << 40;
const BLOBS: usize = 12;
const CALIBRATION_TOL: f64 = 0.02;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dropout-independent part of one eye.
struct Draft {
    patient_id: u32,
    eye_id: u8,
    drift: f64,
    /// Scheduled visit steps, starting at 0.
    schedule: Vec<usize>,
    /// Latent severity on every step `0..=j_max`.
    severity: Vec<f64>,
    hazard: Vec<f64>,
    dropout_u: Vec<f64>,
    event_u: Vec<f64>,
    obs_noise: Vec<f64>,
    texture_seed: u64,
}

fn draft_eye(cfg: &CohortConfig, patient_id: u32, eye_id: u8, patient_factor: f64) -> Draft {
    let grid_j = cfg.j_max;
    let eye_index = patient_id as u64 * cfg.eyes_per_patient as u64 + eye_id as u64;
    let mut rng = stream_rng(cfg.seed, EYE_STREAM + eye_index);
    let sev = &cfg.severity;

    let z_e = normal(&mut rng);
    let z = sev.drift_corr.sqrt() * patient_factor + (1.0 - sev.drift_corr).sqrt() * z_e;
    let drift = (sev.drift_mean + sev.drift_sd * z).max(0.0);
    let s0 = sev.init_mean + sev.init_sd * normal(&mut rng);

    let k = rng.random_range(cfg.visits.min_visits..=cfg.visits.max_visits);
    let mut schedule = vec![0usize];
    for _ in 1..cfg.visits.max_visits {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut gap = cfg.visits.gap_probs.len();
        for (i, p) in cfg.visits.gap_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                gap = i + 1;
                break;
            }
        }
        let next = schedule.last().unwrap() + gap;
        if schedule.len() < k && next <= grid_j {
            schedule.push(next);
        }
    }
    let end = *schedule.last().unwrap();

    let mut severity = Vec::with_capacity(grid_j + 1);
    severity.push(s0);
    for j in 1..=grid_j {
        let noise = sev.process_sd * normal(&mut rng);
        let prev = severity[j - 1];
        // Held constant past the end of scheduled follow-up.
        severity.push(if j <= end { prev + drift + noise } else { prev });
    }
    let hazard = (1..=grid_j)
        .map(|j| sigmoid(cfg.hazard_a * severity[j] + cfg.hazard_b))
        .collect();

    let dropout_u = (0..cfg.visits.max_visits).map(|_| rng.random()).collect();
    let event_u = (0..grid_j).map(|_| rng.random()).collect();
    let obs_noise = (0..cfg.visits.max_visits).map(|_| normal(&mut rng)).collect();
    let texture_seed = rng.random();

    Draft {
        patient_id,
        eye_id,
        drift,
        schedule,
        severity,
        hazard,
        dropout_u,
        event_u,
        obs_noise,
        texture_seed,
    }
}

/// Index of the last attended scheduled visit under per-visit dropout `q`.
fn final_visit(d: &Draft, q: f64) -> usize {
    let last = d.schedule.len() - 1;
    (1..last).find(|&k| d.dropout_u[k] < q).unwrap_or(last)
}

/// Analytic probability that the eye ends censored under dropout `q`.
fn censoring_probability(d: &Draft, q: f64) -> f64 {
    let last = d.schedule.len() - 1;
    let mut surv = Vec::with_capacity(d.hazard.len() + 1);
    surv.push(1.0);
    for h in &d.hazard {
        surv.push(surv.last().unwrap() * (1.0 - h));
    }
    let mut p = 0.0;
    let mut stay = 1.0;
    for k in 1..last {
        p += stay * q * surv[d.schedule[k]];
        stay *= 1.0 - q;
    }
    p + stay * surv[d.schedule[last]]
}

fn expected_censoring(drafts: &[Draft], q: f64) -> f64 {
    drafts.iter().map(|d| censoring_probability(d, q)).sum::<f64>() / drafts.len() as f64
}

fn calibrate_dropout(drafts: &[Draft], target: f64) -> Result<f64> {
    let lo_rate = expected_censoring(drafts, 0.0);
    let hi_rate = expected_censoring(drafts, 1.0);
    if target < lo_rate - CALIBRATION_TOL || target > hi_rate + CALIBRATION_TOL {
        return Err(Error::Config(format!(
            "censoring target {target:.3} unreachable; dropout spans [{lo_rate:.3}, {hi_rate:.3}]"
        )));
    }
    if target <= lo_rate {
        return Ok(0.0);
    }
    if target >= hi_rate {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(drafts, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Render a blob field whose blob count and brightness grow with severity.
pub fn render_image(severity: f64, texture_seed: u64, size: usize, pixel_noise: f64, noise_seed: u64) -> Image {
    let mut tex = ChaCha8Rng::seed_from_u64(texture_seed);
    let n = size as f64;
    let blobs: Vec<(f64, f64, f64)> = (0..BLOBS)
        .map(|_| {
            let cx = n * tex.random_range(0.15..0.85);
            let cy = n * tex.random_range(0.15..0.85);
            let r = n * tex.random_range(0.04..0.09);
            (cx, cy, r)
        })
        .collect();
    let s = severity.max(0.0);
    let amp = (0.25 + 0.05 * s).min(0.7);
    let weights: Vec<f64> = (0..BLOBS).map(|i| (s / 0.8 - i as f64).clamp(0.0, 1.0)).collect();
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.1;
            for (&(cx, cy, r), &w) in blobs.iter().zip(&weights) {
                if w > 0.0 {
                    let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                    v += w * amp * (-d2 / (2.0 * r * r)).exp();
                }
            }
            if pixel_noise > 0.0 {
                v += pixel_noise * normal(&mut noise);
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(1, size, size, data).expect("rendered pixels are clamped to [0, 1]")
}

fn finish_eye(cfg: &CohortConfig, grid: &TimeGrid, d: Draft, q: f64) -> Result<EyeRecord> {
    let f = final_visit(&d, q);
    let censor_step = d.schedule[f];
    let event = (1..=censor_step).find(|&j| d.event_u[j - 1] < d.hazard[j - 1]);
    let outcome = match event {
        Some(e) => EventOutcome::new(e, false, grid)?,
        None => EventOutcome::new(censor_step, true, grid)?,
    };
    let kept: Vec<usize> = d
        .schedule
        .iter()
        .copied()
        .take_while(|&v| v < outcome.event_step)
        .collect();
    let mut images = Vec::with_capacity(kept.len());
    let mut severity = Vec::with_capacity(kept.len());
    for (k, &step) in kept.iter().enumerate() {
        let s = d.severity[step];
        let observed = s + cfg.severity.obs_sd * d.obs_noise[k];
        let noise_seed = d.texture_seed ^ ((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        images.push(render_image(observed, d.texture_seed, cfg.image_size, cfg.pixel_noise, noise_seed));
        severity.push(s);
    }
    Ok(EyeRecord {
        patient_id: d.patient_id,
        eye_id: d.eye_id,
        visit_months: kept.iter().map(|&v| v as u32 * cfg.step_months).collect(),
        images,
        outcome,
        truth: Some(EyeTruth {
            drift: d.drift,
            severity,
            true_hazard: HazardCurve::new(d.hazard)?,
        }),
    })
}

pub fn generate_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut drafts = Vec::with_capacity(cfg.n_patients * cfg.eyes_per_patient);
    for p in 0..cfg.n_patients {
        let pid = p as u32;
        let patient_factor = normal(&mut stream_rng(cfg.seed, PATIENT_STREAM + p as u64));
        for e in 0..cfg.eyes_per_patient {
            drafts.push(draft_eye(cfg, pid, e as u8, patient_factor));
        }
    }
    let q = match cfg.target_censoring {
        Some(t) => calibrate_dropout(&drafts, t)?,
        None => 0.0,
    };
    log::info!("per-visit dropout probability {q:.4}");
    let eyes = drafts
        .into_iter()
        .map(|d| finish_eye(cfg, &grid, d, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        grid,
        image_size: cfg.image_size,
        eyes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> CohortConfig {
        let mut cfg = CohortConfig::areds_like(n, seed);
        cfg.image_size = 8;
        cfg
    }

    #[test]
    fn zero_hazard_censors_everyone() {
        let mut cfg = small(50, 1);
        cfg.hazard_a = 0.0;
        cfg.hazard_b = -800.0;
        cfg.target_censoring = None;
        let c = generate_cohort(&cfg).unwrap();
        assert!(c.eyes.iter().all(|e| e.outcome.censored));
    }

    #[test]
    fn certain_hazard_gives_events_at_step_one() {
        let mut cfg = small(50, 2);
        cfg.hazard_a = 0.0;
        cfg.hazard_b = 50.0;
        cfg.target_censoring = None;
        let c = generate_cohort(&cfg).unwrap();
        for e in &c.eyes {
            assert_eq!(e.outcome, EventOutcome { event_step: 1, censored: false });
            assert_eq!(e.visit_months, vec![0]);
        }
    }

    #[test]
    fn unreachable_target_is_config_error() {
        let mut cfg = small(50, 3);
        cfg.hazard_a = 0.0;
        cfg.hazard_b = -800.0;
        cfg.target_censoring = Some(0.5);
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let mut cfg = small(5, 0);
        cfg.visits.gap_probs = vec![0.5, 0.6];
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
        let mut cfg = small(5, 0);
        cfg.target_censoring = Some(1.5);
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn regeneration_is_deterministic() {
        let cfg = small(30, 11);
        assert_eq!(generate_cohort(&cfg).unwrap(), generate_cohort(&cfg).unwrap());
        let other = small(30, 12);
        assert_ne!(generate_cohort(&cfg).unwrap(), generate_cohort(&other).unwrap());
    }

    #[test]
    fn eye_streams_do_not_depend_on_cohort_size() {
        let mut cfg = small(10, 5);
        cfg.target_censoring = None;
        let a = generate_cohort(&cfg).unwrap();
        cfg.n_patients = 20;
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a.eyes[..], b.eyes[..20]);
    }

    #[test]
    fn records_respect_invariants() {
        let c = generate_cohort(&small(200, 7)).unwrap();
        for e in &c.eyes {
            assert!(!e.visit_months.is_empty());
            assert_eq!(e.visit_months[0], 0);
            assert!(e.visit_months.windows(2).all(|w| w[0] < w[1]));
            let last = *e.visit_months.last().unwrap() as f64;
            assert!(last < c.grid.step_to_months(e.outcome.event_step));
            assert_eq!(e.images.len(), e.visit_months.len());
            assert!(e.num_visits() <= 14);
            let t = e.truth.as_ref().unwrap();
            assert_eq!(t.severity.len(), e.visit_months.len());
            assert_eq!(t.true_hazard.len(), c.grid.j_max);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_tracks_severity() {
        let a = render_image(3.0, 9, 16, 0.0, 1);
        assert_eq!(a, render_image(3.0, 9, 16, 0.0, 1));
        let mean = |img: &Image| img.data().iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        assert!(mean(&render_image(6.0, 9, 16, 0.0, 1)) > mean(&a));
        assert!(mean(&a) > mean(&render_image(0.5, 9, 16, 0.0, 1)));
    }

    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }

    #[test]
    fn faster_drift_means_earlier_events() {
        let mut cfg = small(500, 21);
        cfg.target_censoring = None;
        cfg.hazard_b = -7.0;
        let c = generate_cohort(&cfg).unwrap();
        let (drift, time): (Vec<f64>, Vec<f64>) = c
            .eyes
            .iter()
            .filter(|e| e.outcome.is_event())
            .map(|e| (e.truth.as_ref().unwrap().drift, e.outcome.event_step as f64))
            .unzip();
        assert!(drift.len() > 50, "only {} events", drift.len());
        let (rd, rt) = (ranks(&drift), ranks(&time));
        let n = rd.len() as f64;
        let (md, mt) = (rd.iter().sum::<f64>() / n, rt.iter().sum::<f64>() / n);
        let cov: f64 = rd.iter().zip(&rt).map(|(a, b)| (a - md) * (b - mt)).sum();
        let vd: f64 = rd.iter().map(|a| (a - md).powi(2)).sum();
        let vt: f64 = rt.iter().map(|b| (b - mt).powi(2)).sum();
        assert!(cov / (vd * vt).sqrt() < 0.0);
    }
}
