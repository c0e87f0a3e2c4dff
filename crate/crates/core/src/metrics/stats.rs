use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Comparisons the adjustment accounts for (20 cells on two datasets).
pub const BONFERRONI_M: f64 = 40.0;
const MAX_REDRAWS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples on which the statistic was undefined and was redrawn.
    pub redrawn: usize,
    /// Resamples abandoned after the redraw cap.
    pub dropped: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resample `n_items` units with replacement `n_boot` times. Resample `b`
/// draws from its own stream of `seed`, and `stat` receives that stream
/// after the indices so it can draw further randomness reproducibly.
/// Returns `None` if the statistic was undefined on every resample.
pub fn bootstrap_ci<F>(n_items: usize, n_boot: usize, seed: u64, mut stat: F) -> Result<Option<BootstrapResult>>
where
    F: FnMut(&[usize], &mut ChaCha8Rng) -> Result<Option<f64>>,
{
    if n_items < 2 || n_boot < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 items and 2 resamples, got {n_items} and {n_boot}"
        )));
    }
    let mut samples = Vec::with_capacity(n_boot);
    let mut idx = vec![0usize; n_items];
    let (mut redrawn, mut dropped) = (0, 0);
    for b in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut value = None;
        for attempt in 0..=MAX_REDRAWS {
            if attempt > 0 {
                redrawn += 1;
            }
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..n_items);
            }
            if let Some(v) = stat(&idx, &mut rng)? {
                value = Some(v);
                break;
            }
        }
        match value {
            Some(v) => samples.push(v),
            None => dropped += 1,
        }
    }
    if redrawn > 0 || dropped > 0 {
        log::info!("bootstrap redrew {redrawn} undefined resamples and dropped {dropped}");
    }
    if samples.is_empty() {
        return Ok(None);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    // Shifted by the minimum so a constant statistic reproduces exactly.
    let base = sorted[0];
    let mean = base + samples.iter().map(|x| x - base).sum::<f64>() / samples.len() as f64;
    Ok(Some(BootstrapResult {
        lo: percentile(&sorted, 0.025),
        hi: percentile(&sorted, 0.975),
        mean,
        samples,
        redrawn,
        dropped,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// One-sided P for the alternative mean(a) > mean(b).
    pub p: f64,
    /// Both samples have zero variance; P was set from the means alone.
    pub degenerate: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn welch_one_sided(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data("Welch test needs at least two samples per group".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Data("Welch test samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        let p = if ma > mb { 0.0 } else { 1.0 };
        return Ok(WelchResult {
            t: f64::NAN,
            df: f64::NAN,
            p,
            degenerate: true,
        });
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(format!("t distribution: {e}")))?;
    Ok(WelchResult {
        t,
        df,
        p: dist.sf(t),
        degenerate: false,
    })
}

pub fn bonferroni(raw_p: f64, m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&raw_p) {
        return Err(Error::Domain(format!("P-value {raw_p} outside [0, 1]")));
    }
    Ok((raw_p * m).min(1.0))
}

pub fn stars(adjusted_p: f64) -> &'static str {
    match adjusted_p {
        p if p <= 1e-4 => "****",
        p if p <= 1e-3 => "***",
        p if p <= 1e-2 => "**",
        p if p <= 0.05 => "*",
        _ => "ns",
    }
}
