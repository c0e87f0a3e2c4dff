//! The longitudinal survival transformer and its single-image baseline.
//!
//! Per eye, each visit image is embedded, the absolute visit time (months)
//! is added as a sinusoidal encoding, and a causally masked Transformer
//! encoder mixes information from the current and earlier visits only. A
//! linear + sigmoid head turns every position into a full hazard curve, so
//! row `k` is the forecast made with visits `1..=k`. A second head predicts
//! the next visit's image embedding from row `k` plus the encoded gap to that
//! visit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{init_normal, AttnLayout, Graph, Mode, Params, Tensor, Var};
use crate::encoders::{relative_encode, temporal_encode, EncoderConfig, Image, Standardizer};
use crate::error::{Error, Result};
use crate::survival::{EventOutcome, HazardCurve, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ltsa,
    Baseline,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ltsa => "ltsa",
            ModelKind::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ltsa" => Ok(ModelKind::Ltsa),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub grid: TimeGrid,
    /// Padded sequence length `l`.
    pub max_len: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// 2 layers, 4 heads, width 64 over 32x32 grayscale images.
    pub fn desk(kind: ModelKind, grid: TimeGrid, max_len: usize) -> Self {
        Self {
            kind,
            grid,
            max_len,
            d: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 4,
            dropout: match kind {
                ModelKind::Ltsa => 0.1,
                ModelKind::Baseline => 0.25,
            },
            encoder: EncoderConfig::desk(64),
        }
    }

    /// 4 layers, 8 heads, width 512 over 3x224x224 images. Kept for reference;
    /// the conv stack here stands in for a residual network.
    pub fn full_scale(kind: ModelKind, grid: TimeGrid, max_len: usize) -> Self {
        Self {
            kind,
            grid,
            max_len,
            d: 512,
            n_layers: 4,
            n_heads: 8,
            ff_mult: 4,
            dropout: 0.25,
            encoder: EncoderConfig {
                in_channels: 3,
                image_size: 224,
                conv_channels: vec![64, 128, 256, 512, 512],
                kernel: 3,
                d: 512,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.d != self.d {
            return Err(Error::Config("encoder width must equal model width".into()));
        }
        if self.d % 2 != 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be even and divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.max_len == 0 || self.ff_mult == 0 {
            return Err(Error::Config("sequence length and ff multiplier must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Right-padded batch of visit sequences.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub batch: usize,
    pub len: usize,
    /// `batch * len` images in row-major (eye, position) order; padding slots hold zeros.
    pub images: Vec<Image>,
    pub visit_months: Vec<f64>,
    pub valid: Vec<bool>,
    pub outcomes: Vec<EventOutcome>,
}

impl SequenceBatch {
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| self.valid[b * self.len..(b + 1) * self.len].iter().filter(|&&v| v).count())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.batch * self.len;
        if self.batch == 0 || self.len == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if self.images.len() != n || self.visit_months.len() != n || self.valid.len() != n {
            return Err(Error::Data("batch arrays disagree with batch x len".into()));
        }
        if self.outcomes.len() != self.batch {
            return Err(Error::Data("one outcome per sequence required".into()));
        }
        for b in 0..self.batch {
            let row = &self.valid[b * self.len..(b + 1) * self.len];
            let j = row.iter().take_while(|&&v| v).count();
            if j == 0 {
                return Err(Error::Data(format!("sequence {b} has no valid visits")));
            }
            if row[j..].iter().any(|&v| v) {
                return Err(Error::Data(format!("sequence {b} validity mask is not a prefix")));
            }
            let months = &self.visit_months[b * self.len..b * self.len + j];
            if months.iter().any(|m| !(*m >= 0.0)) {
                return Err(Error::Data(format!("sequence {b} has a negative visit time")));
            }
            if months.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Data(format!("sequence {b} visit times not strictly increasing")));
            }
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct LtsaVars {
    /// `[batch * len, j_max]` hazards.
    pub hazards: Var,
    /// `[batch * len, d]` predicted next-visit embeddings.
    pub step_ahead: Var,
    /// `[batch * len, d]` image embeddings, zero rows at padding.
    pub image_embeddings: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
}

/// Plain-tensor result of a forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub j_max: usize,
    pub hazards: Tensor,
    pub step_ahead: Tensor,
    /// Per layer, `[batch, heads, len, len]` flattened.
    pub attention: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

impl ModelOutput {
    pub fn sequence_len(&self, eye: usize) -> usize {
        self.valid[eye * self.len..(eye + 1) * self.len]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    /// Hazard curve forecast from the first `pos + 1` visits of `eye`.
    pub fn hazard_curve(&self, eye: usize, pos: usize) -> Result<HazardCurve> {
        if pos >= self.sequence_len(eye) {
            return Err(Error::Data(format!("position {pos} of eye {eye} is padding")));
        }
        HazardCurve::new(self.hazards.row(eye * self.len + pos).to_vec())
    }

    /// Attention weights of `layer` for one eye and head, `[len, len]`.
    pub fn attention_matrix(&self, layer: usize, eye: usize, head: usize) -> &[f64] {
        let l = self.len;
        &self.attention[layer][((eye * self.heads + head) * l) * l..][..l * l]
    }
}

/// Normalised per-visit attention for one eye: final layer, query at the last
/// valid visit, averaged over heads, scaled so the largest score is 1.
pub fn extract_attention(output: &ModelOutput, eye: usize) -> Result<Vec<f64>> {
    let j = output.sequence_len(eye);
    if j == 0 {
        return Err(Error::Data(format!("eye {eye} has no visits")));
    }
    let layer = output
        .attention
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Data("output carries no attention".into()))?;
    let mut scores = vec![0.0; j];
    for h in 0..output.heads {
        let m = output.attention_matrix(layer, eye, h);
        for (k, s) in scores.iter_mut().enumerate() {
            *s += m[(j - 1) * output.len + k];
        }
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Numerical(format!("eye {eye} attention has no positive mass")));
    }
    for s in &mut scores {
        *s /= max;
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub standardizer: Standardizer,
}

fn linear_params(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<()> {
    params.insert(format!("{name}.w"), init_normal(rng, &[fan_in, fan_out], fan_in, gain))?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

/// Initial survival-head bias: a per-step hazard of about 1%.
const HAZARD_PRIOR_LOGIT: f64 = -4.6;

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let d = config.d;
        config.encoder.init_params(&mut params, &mut rng, "enc")?;
        if config.kind == ModelKind::Ltsa {
            for layer in 0..config.n_layers {
                let p = format!("tf.{layer}");
                for proj in ["q", "k", "v", "o"] {
                    linear_params(&mut params, &mut rng, &format!("{p}.{proj}"), d, d, 1.0)?;
                }
                for ln in ["ln1", "ln2"] {
                    params.insert(format!("{p}.{ln}.g"), Tensor::full(&[d], 1.0))?;
                    params.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[d]))?;
                }
                let ff = config.ff_mult * d;
                linear_params(&mut params, &mut rng, &format!("{p}.ff1"), d, ff, 2f64.sqrt())?;
                linear_params(&mut params, &mut rng, &format!("{p}.ff2"), ff, d, 1.0)?;
            }
            linear_params(&mut params, &mut rng, "step", d, d, 1.0)?;
        }
        linear_params(&mut params, &mut rng, "surv", d, config.grid.j_max, 0.1)?;
        let bias = params.id("surv.b").expect("just inserted");
        params.tensor_mut(bias).data_mut().fill(HAZARD_PRIOR_LOGIT);
        let channels = config.encoder.in_channels;
        Ok(Self {
            config,
            params,
            standardizer: Standardizer::identity(channels),
        })
    }

    fn image_tensor<'a>(&self, images: impl ExactSizeIterator<Item = &'a Image>) -> Result<Tensor> {
        let enc = &self.config.encoder;
        let per = enc.in_channels * enc.image_size * enc.image_size;
        let n = images.len();
        let mut data = vec![0.0; n * per];
        for (i, img) in images.enumerate() {
            if img.shape() != (enc.in_channels, enc.image_size, enc.image_size) {
                return Err(Error::Data(format!(
                    "image shape {:?} does not match encoder {}x{}x{}",
                    img.shape(),
                    enc.in_channels,
                    enc.image_size,
                    enc.image_size
                )));
            }
            self.standardizer.apply_into(img, &mut data[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![n, enc.in_channels, enc.image_size, enc.image_size], data)
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = g.param_named(&self.params, &format!("{name}.w"))?;
        let b = g.param_named(&self.params, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn norm(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gain = g.param_named(&self.params, &format!("{name}.g"))?;
        let bias = g.param_named(&self.params, &format!("{name}.b"))?;
        let y = g.layer_norm(x)?;
        let y = g.mul_cols(y, gain)?;
        g.add_bias(y, bias)
    }

    /// Post-norm encoder layer; returns the output and the attention node.
    fn transformer_layer(&self, g: &mut Graph, layer: usize, x: Var, layout: AttnLayout) -> Result<(Var, Var)> {
        let p = format!("tf.{layer}");
        let rate = self.config.dropout;
        let q = self.linear(g, &format!("{p}.q"), x)?;
        let k = self.linear(g, &format!("{p}.k"), x)?;
        let v = self.linear(g, &format!("{p}.v"), x)?;
        let attn = g.attention(q, k, v, layout)?;
        let o = self.linear(g, &format!("{p}.o"), attn)?;
        let o = g.dropout(o, rate)?;
        let x = g.add(x, o)?;
        let x = self.norm(g, &format!("{p}.ln1"), x)?;
        let f = self.linear(g, &format!("{p}.ff1"), x)?;
        let f = g.relu(f);
        let f = g.dropout(f, rate)?;
        let f = self.linear(g, &format!("{p}.ff2"), f)?;
        let f = g.dropout(f, rate)?;
        let x = g.add(x, f)?;
        let x = self.norm(g, &format!("{p}.ln2"), x)?;
        Ok((x, attn))
    }

    fn require(&self, kind: ModelKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::Config(format!(
                "operation needs a {kind} model, this one is {}",
                self.config.kind
            )));
        }
        Ok(())
    }

    /// Records the full forward pass of the longitudinal model in `g`.
    pub fn build_ltsa(&self, g: &mut Graph, batch: &SequenceBatch) -> Result<LtsaVars> {
        self.require(ModelKind::Ltsa)?;
        batch.validate()?;
        let (bsz, len, d) = (batch.batch, batch.len, self.config.d);
        let rows = bsz * len;
        let lens = batch.lengths();

        let valid_idx: Vec<usize> = (0..rows).filter(|&r| batch.valid[r]).collect();
        let images = self.image_tensor(valid_idx.iter().map(|&r| &batch.images[r]))?;
        let e_valid = self.config.encoder.encode(g, &self.params, "enc", images)?;
        let mut slot = 0;
        let scatter: Vec<Option<usize>> = batch
            .valid
            .iter()
            .map(|&v| {
                v.then(|| {
                    slot += 1;
                    slot - 1
                })
            })
            .collect();
        let e_img = g.gather_rows(e_valid, scatter)?;

        let mut time_rows = Vec::with_capacity(rows * d);
        let mut gap_rows = Vec::with_capacity(rows * d);
        for b in 0..bsz {
            for k in 0..len {
                let r = b * len + k;
                let month = if batch.valid[r] { batch.visit_months[r] } else { 0.0 };
                time_rows.extend(temporal_encode(month, d)?);
                let gap = if k + 1 < lens[b] {
                    batch.visit_months[r + 1] - batch.visit_months[r]
                } else {
                    0.0
                };
                gap_rows.extend(relative_encode(gap, d)?);
            }
        }
        let e = g.add_const(e_img, &Tensor::new(vec![rows, d], time_rows)?)?;

        let layout = AttnLayout {
            batch: bsz,
            seq: len,
            heads: self.config.n_heads,
            lens,
        };
        let mut x = e;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            let (next, attn) = self.transformer_layer(g, layer, x, layout.clone())?;
            x = next;
            attention.push(attn);
        }

        let rate = self.config.dropout;
        let hs = g.dropout(x, rate)?;
        let hs = self.linear(g, "surv", hs)?;
        let hazards = g.sigmoid(hs);

        let sa = g.add_const(x, &Tensor::new(vec![rows, d], gap_rows)?)?;
        let sa = g.dropout(sa, rate)?;
        let step_ahead = self.linear(g, "step", sa)?;

        Ok(LtsaVars {
            hazards,
            step_ahead,
            image_embeddings: e_img,
            attention,
        })
    }

    pub fn forward_ltsa(&self, batch: &SequenceBatch, mode: Mode, seed: u64) -> Result<ModelOutput> {
        let mut g = Graph::new(mode, seed);
        let vars = self.build_ltsa(&mut g, batch)?;
        let attention = vars
            .attention
            .iter()
            .map(|&a| g.attention_probs(a).expect("attention node").1.to_vec())
            .collect();
        Ok(ModelOutput {
            batch: batch.batch,
            len: batch.len,
            heads: self.config.n_heads,
            j_max: self.config.grid.j_max,
            hazards: g.value(vars.hazards).clone(),
            step_ahead: g.value(vars.step_ahead).clone(),
            attention,
            valid: batch.valid.clone(),
        })
    }

    /// Records encoder + survival head over single images; `[n, j_max]` hazards.
    pub fn build_baseline<'a>(&self, g: &mut Graph, images: impl ExactSizeIterator<Item = &'a Image>) -> Result<Var> {
        self.require(ModelKind::Baseline)?;
        if images.len() == 0 {
            return Err(Error::Data("baseline needs at least one image".into()));
        }
        let t = self.image_tensor(images)?;
        let e = self.config.encoder.encode(g, &self.params, "enc", t)?;
        let e = g.dropout(e, self.config.dropout)?;
        let h = self.linear(g, "surv", e)?;
        Ok(g.sigmoid(h))
    }

    /// One hazard curve per image, each image being an eye's latest visit.
    pub fn forward_baseline(&self, last_images: &[Image], mode: Mode, seed: u64) -> Result<Vec<HazardCurve>> {
        let mut g = Graph::new(mode, seed);
        let h = self.build_baseline(&mut g, last_images.iter())?;
        let t = g.value(h);
        (0..last_images.len())
            .map(|i| HazardCurve::new(t.row(i).to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            grid: TimeGrid::new(6, 5).unwrap(),
            max_len: 5,
            d: 8,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 2,
            dropout: 0.25,
            encoder: EncoderConfig {
                in_channels: 1,
                image_size: 8,
                conv_channels: vec![2, 2],
                kernel: 3,
                d: 8,
            },
        }
    }

    fn random_image(rng: &mut impl Rng) -> Image {
        Image::new(1, 8, 8, (0..64).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn batch_of(seqs: &[Vec<(f64, Image)>], len: usize) -> SequenceBatch {
        let mut b = SequenceBatch {
            batch: seqs.len(),
            len,
            images: vec![],
            visit_months: vec![],
            valid: vec![],
            outcomes: vec![],
        };
        for s in seqs {
            for k in 0..len {
                match s.get(k) {
                    Some((m, img)) => {
                        b.images.push(img.clone());
                        b.visit_months.push(*m);
                        b.valid.push(true);
                    }
                    None => {
                        b.images.push(Image::zeros(1, 8, 8));
                        b.visit_months.push(0.0);
                        b.valid.push(false);
                    }
                }
            }
            b.outcomes.push(EventOutcome {
                event_step: 5,
                censored: true,
            });
        }
        b
    }

    #[test]
    fn single_visit_sequence() {
        let m = Model::init(tiny_config(ModelKind::Ltsa), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = batch_of(&[vec![(0.0, random_image(&mut rng))]], 4);
        let out = m.forward_ltsa(&b, Mode::Eval, 0).unwrap();
        let h = out.hazard_curve(0, 0).unwrap();
        assert_eq!(h.len(), 5);
        assert!(h.values().iter().all(|&v| v > 0.0 && v < 1.0));
        for k in 1..4 {
            assert!(out.hazard_curve(0, k).is_err());
        }
        assert_eq!(extract_attention(&out, 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_malformed_batches() {
        let m = Model::init(tiny_config(ModelKind::Ltsa), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = vec![(0.0, random_image(&mut rng)), (6.0, random_image(&mut rng))];
        let mut b = batch_of(&[seq.clone()], 3);
        b.valid = vec![true, false, true];
        assert!(matches!(m.forward_ltsa(&b, Mode::Eval, 0), Err(Error::Data(_))));
        let mut b = batch_of(&[seq], 3);
        b.visit_months[1] = 0.0;
        assert!(matches!(m.forward_ltsa(&b, Mode::Eval, 0), Err(Error::Data(_))));
    }

    #[test]
    fn attention_rows_normalised_and_causal() {
        let m = Model::init(tiny_config(ModelKind::Ltsa), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<Vec<(f64, Image)>> = [5usize, 3, 1]
            .iter()
            .map(|&n| (0..n).map(|k| (6.0 * k as f64, random_image(&mut rng))).collect())
            .collect();
        let b = batch_of(&seqs, 5);
        let out = m.forward_ltsa(&b, Mode::Eval, 0).unwrap();
        for layer in 0..2 {
            for eye in 0..3 {
                let j = out.sequence_len(eye);
                for h in 0..2 {
                    let a = out.attention_matrix(layer, eye, h);
                    for q in 0..j {
                        let row = &a[q * 5..(q + 1) * 5];
                        let s: f64 = row[..=q].iter().sum();
                        assert!((s - 1.0).abs() < 1e-6);
                        assert!(row[q + 1..].iter().all(|&v| v == 0.0));
                    }
                }
            }
            let scores = extract_attention(&out, 0).unwrap();
            assert_eq!(scores.len(), 5);
            assert!(scores.iter().all(|&s| s > 0.0 && s <= 1.0));
            assert!(scores.iter().any(|&s| s == 1.0));
        }
    }

    #[test]
    fn baseline_is_deterministic_per_image() {
        let m = Model::init(tiny_config(ModelKind::Baseline), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng);
        let curves = m.forward_baseline(&[img.clone(), img], Mode::Eval, 0).unwrap();
        assert_eq!(curves[0], curves[1]);
        assert_eq!(curves[0].len(), 5);
        assert!(m.params.get("tf.0.q.w").is_none());
        assert!(m.params.get("step.w").is_none());
    }

    #[test]
    fn kind_mismatch_is_config_error() {
        let m = Model::init(tiny_config(ModelKind::Baseline), 5).unwrap();
        let b = batch_of(&[vec![(0.0, Image::zeros(1, 8, 8))]], 2);
        assert!(matches!(m.forward_ltsa(&b, Mode::Eval, 0), Err(Error::Config(_))));
    }
}
