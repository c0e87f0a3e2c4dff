//! Small models and random visit sequences shared by the integration tests.
#![allow(dead_code)]

use ltsa::diff::{grad_check, Graph, Mode, Params, Tensor};
use ltsa::encoders::{EncoderConfig, Image};
use ltsa::losses::{ltsa_loss, step_ahead_loss, survival_loss, LossConfig};
use ltsa::model::{Model, ModelConfig, ModelKind, SequenceBatch};
use ltsa::survival::{EventOutcome, HazardCurve, TimeGrid};
use rand::Rng;

pub const SIDE: usize = 8;

pub fn tiny_config(max_len: usize) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Ltsa,
        grid: TimeGrid::new(6, 6).unwrap(),
        max_len,
        d: 8,
        n_layers: 2,
        n_heads: 2,
        ff_mult: 2,
        dropout: 0.25,
        encoder: EncoderConfig {
            in_channels: 1,
            image_size: SIDE,
            conv_channels: vec![2, 3],
            kernel: 3,
            d: 8,
        },
    }
}

pub fn random_image(rng: &mut impl Rng) -> Image {
    Image::new(1, SIDE, SIDE, (0..SIDE * SIDE).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// One eye: strictly increasing visit months with an image each.
pub type Sequence = Vec<(f64, Image)>;

pub fn random_sequence(rng: &mut impl Rng, max_visits: usize) -> Sequence {
    let n = rng.random_range(1..=max_visits);
    let mut month = 0.0;
    (0..n)
        .map(|_| {
            let v = (month, random_image(rng));
            month += 6.0 * rng.random_range(1..=3) as f64;
            v
        })
        .collect()
}

pub fn random_outcome(rng: &mut impl Rng, j_max: usize) -> EventOutcome {
    EventOutcome { event_step: rng.random_range(1..=j_max), censored: rng.random::<bool>() }
}

pub fn batch_of(seqs: &[(Sequence, EventOutcome)], len: usize) -> SequenceBatch {
    let mut b = SequenceBatch { batch: seqs.len(), len, images: vec![], visit_months: vec![], valid: vec![], outcomes: vec![] };
    for (s, o) in seqs {
        for k in 0..len {
            match s.get(k) {
                Some((m, img)) => {
                    b.images.push(img.clone());
                    b.visit_months.push(*m);
                    b.valid.push(true);
                }
                None => {
                    b.images.push(Image::zeros(1, SIDE, SIDE));
                    b.visit_months.push(0.0);
                    b.valid.push(false);
                }
            }
        }
        b.outcomes.push(*o);
    }
    b
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Hazard rows 0..=j of a single-eye batch never change when visits after j
/// are replaced.
pub fn causal_invariance_holds(model: &Model, rng: &mut impl Rng, trials: usize) -> bool {
    let len = model.config.max_len;
    let j_max = model.config.grid.j_max;
    for _ in 0..trials {
        let mut seq = random_sequence(rng, len);
        while seq.len() < 2 {
            seq = random_sequence(rng, len);
        }
        let o = random_outcome(rng, j_max);
        let j = rng.random_range(0..seq.len() - 1);
        let base = model.forward_ltsa(&batch_of(&[(seq.clone(), o)], len), Mode::Eval, 0).unwrap();
        let mut perturbed = seq.clone();
        for (k, v) in perturbed.iter_mut().enumerate().skip(j + 1) {
            v.0 += 1.0 + k as f64;
            v.1 = random_image(rng);
        }
        let after = model.forward_ltsa(&batch_of(&[(perturbed, o)], len), Mode::Eval, 0).unwrap();
        let rows = (j + 1) * j_max;
        if !same_bits(&base.hazards.data()[..rows], &after.hazards.data()[..rows]) {
            return false;
        }
    }
    true
}

/// Valid-position hazards do not depend on how much right padding a batch has.
pub fn padding_invariance_holds(model: &Model, rng: &mut impl Rng, trials: usize) -> bool {
    let len = model.config.max_len;
    let j_max = model.config.grid.j_max;
    let mut wide_cfg = model.config.clone();
    wide_cfg.max_len = len + 3;
    let wide = Model { config: wide_cfg, ..model.clone() };
    for _ in 0..trials {
        let seq = random_sequence(rng, len);
        let o = random_outcome(rng, j_max);
        let n = seq.len();
        let tight = model.forward_ltsa(&batch_of(&[(seq.clone(), o)], n.max(1)), Mode::Eval, 0).unwrap();
        let padded = wide.forward_ltsa(&batch_of(&[(seq, o)], len + 3), Mode::Eval, 0).unwrap();
        let rows = n * j_max;
        if !same_bits(&tight.hazards.data()[..rows], &padded.hazards.data()[..rows]) {
            return false;
        }
        let d = model.config.d;
        if !same_bits(&tight.step_ahead.data()[..n * d], &padded.step_ahead.data()[..n * d]) {
            return false;
        }
    }
    true
}

/// Largest relative error over `probes` random parameter draws, each probing
/// `coords` coordinates of the full LTSA loss. The step-ahead target is
/// detached in training, so here it is frozen at the unperturbed embeddings.
pub fn full_loss_gradient_error(probes: u64, coords: usize, rng: &mut impl Rng) -> f64 {
    let cfg = tiny_config(4);
    let j_max = cfg.grid.j_max;
    let seqs: Vec<(Sequence, EventOutcome)> = (0..3).map(|_| (random_sequence(rng, 4), random_outcome(rng, j_max))).collect();
    let batch = batch_of(&seqs, 4);
    let survival_only = LossConfig { step_ahead_weight: 0.0, ..LossConfig::default() };
    let mut worst = 0.0f64;
    for probe in 0..probes {
        let model = Model::init(cfg.clone(), 100 + probe).unwrap();
        let (target, rows) = frozen_target(&model, &batch, &seqs);
        let f = |g: &mut Graph, p: &Params| {
            let m = Model { params: p.clone(), ..model.clone() };
            let vars = m.build_ltsa(g, &batch)?;
            let survival = ltsa_loss(g, &vars, &batch, &survival_only)?.total;
            let pred = g.mse_rows(vars.step_ahead, target.clone(), rows.clone())?;
            g.add(survival, pred)
        };
        let report = grad_check(&model.params, f, coords, probe, 1e-5).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn frozen_target(model: &Model, batch: &SequenceBatch, seqs: &[(Sequence, EventOutcome)]) -> (Tensor, Vec<bool>) {
    let mut g = Graph::new(Mode::Eval, 0);
    let vars = model.build_ltsa(&mut g, batch).unwrap();
    let emb = g.value(vars.image_embeddings);
    let (len, d) = (batch.len, model.config.d);
    let mut target = vec![0.0; batch.batch * len * d];
    let mut rows = vec![false; batch.batch * len];
    for (b, (seq, _)) in seqs.iter().enumerate() {
        for k in 0..seq.len().saturating_sub(1) {
            let r = b * len + k;
            target[r * d..(r + 1) * d].copy_from_slice(emb.row(r + 1));
            rows[r] = true;
        }
    }
    (Tensor::new(vec![batch.batch * len, d], target).unwrap(), rows)
}

/// The graph's total loss against the scalar survival and step-ahead losses.
pub fn total_loss_matches_scalar_oracle(model: &Model, seqs: &[(Sequence, EventOutcome)]) -> (f64, f64) {
    let len = model.config.max_len;
    let batch = batch_of(seqs, len);
    let cfg = LossConfig::default();
    let mut g = Graph::new(Mode::Eval, 0);
    let vars = model.build_ltsa(&mut g, &batch).unwrap();
    let total = ltsa_loss(&mut g, &vars, &batch, &cfg).unwrap().total;
    let graph_value = g.value(total).data()[0];

    let hazards = g.value(vars.hazards).clone();
    let emb = g.value(vars.image_embeddings).clone();
    let pred = g.value(vars.step_ahead).clone();
    let d = model.config.d;
    let (mut surv, mut rows) = (0.0, 0usize);
    let mut target = vec![0.0; batch.batch * len * d];
    let mut flags = vec![false; batch.batch * len];
    for (b, (seq, o)) in seqs.iter().enumerate() {
        for k in 0..seq.len() {
            let r = b * len + k;
            let h = HazardCurve::new(hazards.row(r).to_vec()).unwrap();
            surv += survival_loss(&h, *o, &cfg).unwrap();
            rows += 1;
            if k + 1 < seq.len() {
                target[r * d..(r + 1) * d].copy_from_slice(emb.row(r + 1));
                flags[r] = true;
            }
        }
    }
    let target = Tensor::new(vec![batch.batch * len, d], target).unwrap();
    let pred_loss = step_ahead_loss(&pred, &target, &flags).unwrap().unwrap_or(0.0);
    (graph_value, surv / rows as f64 + pred_loss)
}
