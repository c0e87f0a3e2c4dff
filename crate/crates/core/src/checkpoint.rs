//! Checkpoint directories: `manifest.txt` lists `name shape dtype offset`
//! per tensor, `tensors.bin` holds the little-endian `f64` data back to back,
//! and `config.json` records the architecture, grid, standardizer, seeds and
//! training progress.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Params, Tensor};
use crate::encoders::Standardizer;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{AdamState, TrainConfig, TrainRun, TrainState};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
pub const CONFIG: &str = "config.json";
const DTYPE: &str = "f64";
/// Largest element count a manifest entry may claim.
const MAX_ELEMENTS: usize = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Parse and check a manifest: four fields per line, known dtype, positive
/// extents, and entries packed contiguously from offset 0.
pub fn parse_manifest(text: &str) -> Result<Vec<TensorEntry>> {
    let mut entries = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, dtype, offset] = fields[..] else {
            return Err(Error::Data(format!("manifest line {line_no}: expected 4 fields")));
        };
        if dtype != DTYPE {
            return Err(Error::Data(format!("manifest line {line_no}: unsupported dtype {dtype:?}")));
        }
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Data(format!("manifest line {line_no}: bad shape {shape:?}")))?;
        let elements = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Data(format!("manifest line {line_no}: shape too large")))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {line_no}: bad offset {offset:?}")))?;
        if offset != expected_offset {
            return Err(Error::Data(format!(
                "manifest line {line_no}: offset {offset}, expected {expected_offset}"
            )));
        }
        if entries.iter().any(|e: &TensorEntry| e.name == name) {
            return Err(Error::Data(format!("manifest line {line_no}: duplicate tensor {name}")));
        }
        expected_offset = offset
            .checked_add(elements * 8)
            .ok_or_else(|| Error::Data(format!("manifest line {line_no}: offset overflow")))?;
        entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset,
        });
    }
    Ok(entries)
}

/// Split `blob` into tensors per `entries`; the blob must be fully covered.
pub fn decode_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let end = entries.last().map_or(0, |e| e.offset + 8 * e.elements());
    if end != blob.len() {
        return Err(Error::Data(format!("tensor blob is {} bytes, manifest covers {end}", blob.len())));
    }
    entries
        .iter()
        .map(|e| {
            let bytes = &blob[e.offset..e.offset + 8 * e.elements()];
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (String, Vec<u8>) {
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        manifest.push_str(&format!("{name} {} {DTYPE} {}\n", shape_text(t.shape()), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelConfig,
    standardizer: Standardizer,
    init_seed: u64,
    training: Option<TrainingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingRecord {
    config: TrainConfig,
    state: TrainState,
    adam_step: u64,
}

/// A model, optionally with the full state of the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub init_seed: u64,
    pub run: Option<TrainRun>,
}

const PARAM: &str = "param/";
const BEST: &str = "best/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn from_model(model: Model, init_seed: u64) -> Self {
        Self {
            model,
            init_seed,
            run: None,
        }
    }

    /// From a run: the model holds the best-epoch weights.
    pub fn from_run(run: &TrainRun, init_seed: u64) -> Self {
        Self {
            model: run.best_model(),
            init_seed,
            run: Some(run.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        let run = self.run.as_ref();
        let current = run.map_or(&self.model.params, |r| &r.model.params);
        for (n, t) in current.iter() {
            named.push((format!("{PARAM}{n}"), t));
        }
        if let Some(r) = run {
            for (n, t) in r.best_params.iter() {
                named.push((format!("{BEST}{n}"), t));
            }
            for ((n, _), (m, v)) in r.model.params.iter().zip(r.adam.m.iter().zip(&r.adam.v)) {
                named.push((format!("{ADAM_M}{n}"), m));
                named.push((format!("{ADAM_V}{n}"), v));
            }
        }
        let (manifest, blob) = encode_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)));
        let config = CheckpointConfig {
            model: self.model.config.clone(),
            standardizer: self.model.standardizer.clone(),
            init_seed: self.init_seed,
            training: run.map(|r| TrainingRecord {
                config: r.config.clone(),
                state: r.state.clone(),
                adam_step: r.adam.step,
            }),
        };
        write(&dir.join(MANIFEST), manifest.as_bytes())?;
        write(&dir.join(BLOB), &blob)?;
        write(&dir.join(CONFIG), &serde_json::to_vec_pretty(&config)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: CheckpointConfig = serde_json::from_slice(&read(&dir.join(CONFIG))?)?;
        let text = String::from_utf8(read(&dir.join(MANIFEST))?)
            .map_err(|_| Error::Data("checkpoint manifest is not UTF-8".into()))?;
        let entries = parse_manifest(&text)?;
        let tensors = decode_tensors(&entries, &read(&dir.join(BLOB))?)?;
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);

        // The architecture fixes the parameter names and shapes.
        let template = Model::init(config.model.clone(), config.init_seed)?;
        let fill = |prefix: &str| -> Result<Params> {
            let mut p = Params::new();
            for (name, t) in template.params.iter() {
                let key = format!("{prefix}{name}");
                let stored = lookup(&key).ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(Error::Data(format!(
                        "tensor {key} has shape {:?}, architecture expects {:?}",
                        stored.shape(),
                        t.shape()
                    )));
                }
                p.insert(name, stored.clone())?;
            }
            Ok(p)
        };
        let current = Model {
            config: config.model.clone(),
            params: fill(PARAM)?,
            standardizer: config.standardizer.clone(),
        };
        let Some(training) = config.training else {
            return Ok(Self::from_model(current, config.init_seed));
        };
        let moments = |prefix: &str| -> Result<Vec<Tensor>> { Ok(fill(prefix)?.iter().map(|(_, t)| t.clone()).collect()) };
        let run = TrainRun {
            config: training.config,
            best_params: fill(BEST)?,
            adam: AdamState {
                step: training.adam_step,
                m: moments(ADAM_M)?,
                v: moments(ADAM_V)?,
            },
            state: training.state,
            model: current,
        };
        Ok(Self::from_run(&run, config.init_seed))
    }
}
