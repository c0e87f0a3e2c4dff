use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Patient-level assignment to train/val/test.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatientSplit {
    pub assignment: BTreeMap<u32, SplitName>,
}

impl PatientSplit {
    pub fn of(&self, patient_id: u32) -> Option<SplitName> {
        self.assignment.get(&patient_id).copied()
    }

    pub fn count(&self, which: SplitName) -> usize {
        self.assignment.values().filter(|&&s| s == which).count()
    }
}

/// Shuffle patients with `seed` and cut at the given fractions.
pub fn split_patients(cohort: &Cohort, fractions: [f64; 3], seed: u64) -> Result<PatientSplit> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut patients: Vec<u32> = cohort.eyes.iter().map(|e| e.patient_id).collect();
    patients.sort_unstable();
    patients.dedup();
    let n = patients.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    let counts = [n_train, n_val, n.saturating_sub(n_train + n_val)];
    if n_train + n_val > n || counts.iter().zip(&fractions).any(|(&c, &f)| f > 0.0 && c == 0) {
        return Err(Error::Config(format!("{n} patients are too few for fractions {fractions:?}")));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = BTreeMap::new();
    for (i, p) in patients.into_iter().enumerate() {
        let which = if i < n_train {
            SplitName::Train
        } else if i < n_train + n_val {
            SplitName::Val
        } else {
            SplitName::Test
        };
        assignment.insert(p, which);
    }
    Ok(PatientSplit { assignment })
}
