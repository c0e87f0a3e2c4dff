//! Time-dependent discrimination and calibration metrics and the
//! significance-testing protocol built on top of them.

mod stats;

pub use stats::{
    bonferroni, bootstrap_ci, percentile, stars, welch_one_sided, BootstrapResult, WelchResult, BONFERRONI_M,
};

use crate::error::{Error, Result};

/// One eye of a risk set: its predicted window risk and its outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskRow {
    pub risk: f64,
    pub event_step: usize,
    pub censored: bool,
}

/// Pair counts behind a concordance value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub concordant: u64,
    pub tied: u64,
    pub pairs: u64,
}

impl PairCounts {
    /// `None` when no pair is comparable.
    pub fn value(&self) -> Option<f64> {
        (self.pairs > 0).then(|| (2 * self.concordant + self.tied) as f64 / (2 * self.pairs) as f64)
    }
}

/// Counts over positions `1..=n` of a Fenwick tree.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, mut i: usize) {
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn check_finite(rows: &[RiskRow]) -> Result<()> {
    match rows.iter().find(|r| !r.risk.is_finite()) {
        Some(r) => Err(Error::Data(format!("non-finite risk score {}", r.risk))),
        None => Ok(()),
    }
}

/// Comparable pairs among `rows` (already restricted to the risk set):
/// eye `i` uncensored with `event_step <= horizon_step`, eye `k` with a
/// strictly later step, censored or not. Concordant when `risk_i > risk_k`.
pub fn concordance_counts(rows: &[RiskRow], horizon_step: usize) -> Result<PairCounts> {
    check_finite(rows)?;
    let mut sorted_risks: Vec<f64> = rows.iter().map(|r| r.risk).collect();
    sorted_risks.sort_by(f64::total_cmp);
    sorted_risks.dedup();
    let rank = |r: f64| sorted_risks.partition_point(|&x| x < r) + 1;

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].event_step.cmp(&rows[a].event_step));

    let mut tree = Fenwick::new(sorted_risks.len());
    let mut inserted = 0u64;
    let mut counts = PairCounts::default();
    let mut start = 0;
    while start < order.len() {
        let step = rows[order[start]].event_step;
        let end = start + order[start..].iter().take_while(|&&i| rows[i].event_step == step).count();
        for &i in &order[start..end] {
            let r = &rows[i];
            if !r.censored && r.event_step <= horizon_step {
                let k = rank(r.risk);
                let below = tree.prefix(k - 1);
                counts.concordant += below;
                counts.tied += tree.prefix(k) - below;
                counts.pairs += inserted;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(rows[i].risk));
            inserted += 1;
        }
        start = end;
    }
    Ok(counts)
}

pub fn concordance_td(rows: &[RiskRow], horizon_step: usize) -> Result<Option<f64>> {
    Ok(concordance_counts(rows, horizon_step)?.value())
}

/// Mean (or, with `sum`, total) squared error between the observed
/// in-window event indicator and the predicted risk. `None` for an empty set.
pub fn brier_td(rows: &[RiskRow], horizon_step: usize, sum: bool) -> Result<Option<f64>> {
    check_finite(rows)?;
    if rows.is_empty() {
        return Ok(None);
    }
    let total: f64 = rows
        .iter()
        .map(|r| {
            let y = if !r.censored && r.event_step <= horizon_step { 1.0 } else { 0.0 };
            (y - r.risk).powi(2)
        })
        .sum();
    Ok(Some(if sum { total } else { total / rows.len() as f64 }))
}
