//! Where risk scores come from: a trained checkpoint or a reference predictor.

use std::path::{Path, PathBuf};

use ltsa::checkpoint::Checkpoint;
use ltsa::cohort::Cohort;
use ltsa::evaluation::{forecast_model, forecast_oracle, EyeForecasts, ScoreSource};
use ltsa::model::Model;
use ltsa::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Checkpoint(PathBuf),
    Oracle,
    AntiOracle,
    Random,
}

impl Source {
    pub fn parse(s: &str) -> Self {
        match s {
            "oracle" => Source::Oracle,
            "anti-oracle" => Source::AntiOracle,
            "random" => Source::Random,
            path => Source::Checkpoint(PathBuf::from(path)),
        }
    }
}

/// A source resolved against its files.
pub enum Loaded {
    Model { name: String, model: Box<Model> },
    Oracle { negate: bool },
    Random,
}

pub fn load_model(dir: &Path) -> Result<Model> {
    if !dir.join("config.json").is_file() {
        return Err(Error::Config(format!(
            "{} is not a checkpoint directory; expected a path written by `ltsa train` or one of oracle, anti-oracle, random",
            dir.display()
        )));
    }
    Ok(Checkpoint::load(dir)?.model)
}

impl Loaded {
    pub fn open(source: &Source) -> Result<Self> {
        Ok(match source {
            Source::Checkpoint(dir) => {
                let model = load_model(dir)?;
                Loaded::Model { name: model.config.kind.to_string(), model: Box::new(model) }
            }
            Source::Oracle => Loaded::Oracle { negate: false },
            Source::AntiOracle => Loaded::Oracle { negate: true },
            Source::Random => Loaded::Random,
        })
    }

    pub fn name(&self) -> String {
        match self {
            Loaded::Model { name, .. } => name.clone(),
            Loaded::Oracle { negate: false } => "oracle".into(),
            Loaded::Oracle { negate: true } => "anti-oracle".into(),
            Loaded::Random => "random".into(),
        }
    }

    /// Per-visit survival forecasts; the random predictor has none.
    pub fn forecasts(&self, cohort: &Cohort) -> Result<Option<Vec<EyeForecasts>>> {
        Ok(match self {
            Loaded::Model { model, .. } => Some(forecast_model(model, cohort)?),
            Loaded::Oracle { .. } => Some(forecast_oracle(cohort)?),
            Loaded::Random => None,
        })
    }

    pub fn scores(&self, cohort: &Cohort) -> Result<ScoreSource> {
        let negate = matches!(self, Loaded::Oracle { negate: true });
        Ok(match self.forecasts(cohort)? {
            Some(forecasts) => ScoreSource::Forecasts { forecasts, negate },
            None => ScoreSource::Random,
        })
    }
}
