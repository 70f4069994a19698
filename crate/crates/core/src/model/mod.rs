//! The shared transformer and its two heads.
//!
//! Input rows are token + position + segment embeddings. Each block is
//! post-norm: masked multi-head self-attention, residual, layer norm, then a
//! GELU feed-forward, residual, layer norm. The language-model head reuses
//! the token embedding matrix; the contrastive head is a small MLP over the
//! `[CLS]` row. Which role the network plays is decided only by the mask.

pub mod checkpoint;
mod encoding;
mod incremental;
mod mask;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoding::{ContrastiveLabel, EncodedInstance, InstanceEncoder};
pub use incremental::DecoderState;
pub use mask::{build_all_zero_mask, build_partial_causal_mask, AttentionMask, MaskKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    /// Weight of the contrastive term in the joint loss.
    pub alpha: f64,
    /// Divisor applied to the contrastive logits.
    pub temperature: f64,
    /// Also score source positions in the generation loss, each predicting
    /// its own token. Off by default: with a bidirectional source the term
    /// is trivially satisfiable.
    pub literal_source_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            vocab_size: 0,
            max_sequence_length: 128,
            alpha: 0.1,
            temperature: 1.0,
            literal_source_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_heads == 0 || self.hidden_size == 0 || self.hidden_size % self.num_heads != 0 {
            return fail("hidden_size must be a positive multiple of num_heads");
        }
        if self.ffn_size == 0 {
            return fail("ffn_size must be positive");
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive");
        }
        if self.max_sequence_length < 2 {
            return fail("max_sequence_length must be at least 2");
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return fail("alpha must be non-negative");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return fail("temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    attn_out: ParamId,
    attn_norm_gain: ParamId,
    attn_norm_bias: ParamId,
    ffn_in: ParamId,
    ffn_in_bias: ParamId,
    ffn_out: ParamId,
    ffn_out_bias: ParamId,
    ffn_norm_gain: ParamId,
    ffn_norm_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    token_embedding: ParamId,
    position_embedding: ParamId,
    segment_embedding: ParamId,
    lm_bias: ParamId,
    layers: Vec<LayerParams>,
    cls_hidden: ParamId,
    cls_hidden_bias: ParamId,
    cls_out: ParamId,
    cls_out_bias: ParamId,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Declares every parameter in canonical order. Used both to initialise a
/// fresh model and to validate a loaded parameter set.
fn layout(
    config: &ModelConfig,
    mut add: impl FnMut(String, Vec<usize>, Init) -> ParamId,
) -> ParamIds {
    let d = config.hidden_size;
    let f = config.ffn_size;
    let token_embedding = add(
        "embeddings.token".into(),
        vec![config.vocab_size, d],
        Init::Normal,
    );
    let position_embedding = add(
        "embeddings.position".into(),
        vec![config.max_sequence_length, d],
        Init::Normal,
    );
    let segment_embedding = add("embeddings.segment".into(), vec![2, d], Init::Normal);
    let lm_bias = add("lm_head.bias".into(), vec![config.vocab_size], Init::Zeros);
    let layers = (0..config.num_layers)
        .map(|l| {
            let mut p = |name: &str, shape: Vec<usize>, init| {
                add(format!("layers.{l}.{name}"), shape, init)
            };
            LayerParams {
                query: p("attention.query", vec![d, d], Init::Normal),
                key: p("attention.key", vec![d, d], Init::Normal),
                value: p("attention.value", vec![d, d], Init::Normal),
                attn_out: p("attention.output", vec![d, d], Init::Normal),
                attn_norm_gain: p("attention_norm.gain", vec![d], Init::Ones),
                attn_norm_bias: p("attention_norm.bias", vec![d], Init::Zeros),
                ffn_in: p("ffn.in.weight", vec![d, f], Init::Normal),
                ffn_in_bias: p("ffn.in.bias", vec![f], Init::Zeros),
                ffn_out: p("ffn.out.weight", vec![f, d], Init::Normal),
                ffn_out_bias: p("ffn.out.bias", vec![d], Init::Zeros),
                ffn_norm_gain: p("ffn_norm.gain", vec![d], Init::Ones),
                ffn_norm_bias: p("ffn_norm.bias", vec![d], Init::Zeros),
            }
        })
        .collect();
    ParamIds {
        token_embedding,
        position_embedding,
        segment_embedding,
        lm_bias,
        layers,
        cls_hidden: add("classifier.hidden.weight".into(), vec![d, d], Init::Normal),
        cls_hidden_bias: add("classifier.hidden.bias".into(), vec![d], Init::Zeros),
        cls_out: add("classifier.output.weight".into(), vec![d, 2], Init::Normal),
        cls_out_bias: add("classifier.output.bias".into(), vec![2], Init::Zeros),
    }
}

/// Shared-parameter transformer for generation and triple classification.
#[derive(Debug, Clone, PartialEq)]
pub struct CgtModel {
    config: ModelConfig,
    params: ParamSet,
    ids: ParamIds,
}

impl CgtModel {
    /// Random initialisation: N(0, 0.02) weights, zero biases, unit gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamSet::new();
        let ids = layout(&config, |name, shape, init| {
            let mut t = Tensor::zeros(&shape);
            match init {
                Init::Normal => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng)),
                Init::Zeros => {}
                Init::Ones => t.data_mut().fill(1.0),
            }
            params.add(name, t.with_requires_grad())
        });
        Ok(CgtModel {
            config,
            params,
            ids,
        })
    }

    /// Adopts an existing parameter set after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut expected = Vec::new();
        let mut next = 0;
        let ids = layout(&config, |name, shape, _| {
            expected.push((name, shape));
            next += 1;
            ParamId(next - 1)
        });
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (found_name, t)) in expected.iter().zip(params.iter()) {
            if name != found_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {found_name} {:?}",
                    t.shape()
                )));
            }
        }
        let mut params = params;
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).set_requires_grad(true);
        }
        Ok(CgtModel {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.ids.token_embedding
    }

    pub fn position_embedding_id(&self) -> ParamId {
        self.ids.position_embedding
    }

    pub fn segment_embedding_id(&self) -> ParamId {
        self.ids.segment_embedding
    }

    /// Parameters that only the contrastive head reads.
    pub fn classifier_param_ids(&self) -> [ParamId; 4] {
        [
            self.ids.cls_hidden,
            self.ids.cls_hidden_bias,
            self.ids.cls_out,
            self.ids.cls_out_bias,
        ]
    }

    /// `H⁰[i] = token[idᵢ] + position[i] + segment[segᵢ]`
    pub fn embed(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        segment_ids: &[usize],
    ) -> Result<Var> {
        if token_ids.len() != segment_ids.len() {
            return Err(Error::Layout(
                "token and segment ids differ in length".into(),
            ));
        }
        if token_ids.len() > self.config.max_sequence_length {
            return Err(Error::Length {
                len: token_ids.len(),
                max: self.config.max_sequence_length,
            });
        }
        let tok = tape.param(self.ids.token_embedding);
        let pos = tape.param(self.ids.position_embedding);
        let seg = tape.param(self.ids.segment_embedding);
        let positions: Vec<usize> = (0..token_ids.len()).collect();
        let t = tape.gather_rows(tok, token_ids)?;
        let p = tape.gather_rows(pos, &positions)?;
        let s = tape.gather_rows(seg, segment_ids)?;
        let ts = tape.add(t, p)?;
        tape.add(ts, s)
    }

    pub fn embed_instance(&self, tape: &mut Tape, instance: &EncodedInstance) -> Result<Var> {
        self.embed(tape, &instance.token_ids, &instance.segment_ids)
    }

    /// Runs every transformer block over `h0` under `mask`.
    pub fn forward(&self, tape: &mut Tape, h0: Var, mask: &AttentionMask) -> Result<Var> {
        let len = tape.shape(h0)[0];
        if mask.len() != len {
            return Err(Error::Shape {
                op: "forward",
                left: tape.shape(h0).to_vec(),
                right: mask.matrix().shape().to_vec(),
            });
        }
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut h = h0;
        for layer in &self.ids.layers {
            let wq = tape.param(layer.query);
            let wk = tape.param(layer.key);
            let wv = tape.param(layer.value);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for head in 0..self.config.num_heads {
                let qh = tape.slice_cols(q, head * dk, dk)?;
                let kh = tape.slice_cols(k, head * dk, dk)?;
                let vh = tape.slice_cols(v, head * dk, dk)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale)?;
                let probs = tape.masked_softmax_flags(scores, mask.allowed())?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let concat = tape.concat_cols(&heads)?;
            let wo = tape.param(layer.attn_out);
            let attn = tape.matmul(concat, wo)?;
            let res = tape.add(h, attn)?;
            let (g, b) = (
                tape.param(layer.attn_norm_gain),
                tape.param(layer.attn_norm_bias),
            );
            let h1 = tape.layer_norm(res, g, b, LAYER_NORM_EPS)?;

            let w1 = tape.param(layer.ffn_in);
            let b1 = tape.param(layer.ffn_in_bias);
            let w2 = tape.param(layer.ffn_out);
            let b2 = tape.param(layer.ffn_out_bias);
            let f = tape.matmul(h1, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            let res = tape.add(h1, f)?;
            let (g, b) = (
                tape.param(layer.ffn_norm_gain),
                tape.param(layer.ffn_norm_bias),
            );
            h = tape.layer_norm(res, g, b, LAYER_NORM_EPS)?;
        }
        Ok(h)
    }

    /// Embeds and encodes an instance under its own mask.
    pub fn encode(&self, tape: &mut Tape, instance: &EncodedInstance) -> Result<Var> {
        let mask = instance.mask(self.config.max_sequence_length)?;
        let h0 = self.embed_instance(tape, instance)?;
        self.forward(tape, h0, &mask)
    }

    /// Vocabulary logits through the tied output embedding.
    pub fn lm_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let emb = tape.param(self.ids.token_embedding);
        let bias = tape.param(self.ids.lm_bias);
        let logits = tape.matmul_nt(hidden, emb)?;
        tape.add_row(logits, bias)
    }

    /// Next-token cross-entropy over the target span: the row of each target
    /// token predicts the token after it, `[SOS]` predicting the first
    /// content token and the last content token predicting `[EOS]`.
    pub fn generation_loss(&self, tape: &mut Tape, instance: &EncodedInstance) -> Result<Var> {
        if instance.mask_kind != MaskKind::PartialCausal {
            return Err(Error::Layout(
                "generation loss needs a partial causal instance".into(),
            ));
        }
        if instance.target_len < 2 {
            return Err(Error::Precondition(
                "generation target has nothing to predict".into(),
            ));
        }
        let h = self.encode(tape, instance)?;
        let s = instance.source_len;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        if self.config.literal_source_loss {
            for i in 1..s.saturating_sub(1) {
                rows.push(i);
                labels.push(instance.token_ids[i]);
            }
        }
        for i in s..instance.len() - 1 {
            rows.push(i);
            labels.push(instance.token_ids[i + 1]);
        }
        let picked = tape.gather_rows(h, &rows)?;
        let logits = self.lm_logits(tape, picked)?;
        tape.cross_entropy(logits, &labels, None)
    }

    /// Two-class logits `[match, mismatch]` from the `[CLS]` row, divided by
    /// the temperature. Returns a 1×2 value.
    pub fn contrastive_logits(&self, tape: &mut Tape, instance: &EncodedInstance) -> Result<Var> {
        if instance.mask_kind != MaskKind::AllZero {
            return Err(Error::Layout(
                "contrastive logits need an all-zero mask instance".into(),
            ));
        }
        if instance.source_len == 0 || instance.target_len == 0 {
            return Err(Error::Layout(
                "contrastive instance needs a sentence and a triple".into(),
            ));
        }
        let h = self.encode(tape, instance)?;
        self.classify_cls(tape, h)
    }

    fn classify_cls(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let cls = tape.gather_rows(h, &[0])?;
        let w1 = tape.param(self.ids.cls_hidden);
        let b1 = tape.param(self.ids.cls_hidden_bias);
        let w2 = tape.param(self.ids.cls_out);
        let b2 = tape.param(self.ids.cls_out_bias);
        let a = tape.matmul(cls, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.tanh(a)?;
        let z = tape.matmul(a, w2)?;
        let z = tape.add_row(z, b2)?;
        tape.scale(z, 1.0 / self.config.temperature)
    }

    /// Mean of the positive's cross-entropy against "match" and the
    /// negative's against "mismatch".
    pub fn contrastive_pair_loss(
        &self,
        tape: &mut Tape,
        positive: &EncodedInstance,
        negative: &EncodedInstance,
    ) -> Result<Var> {
        let zp = self.contrastive_logits(tape, positive)?;
        let zn = self.contrastive_logits(tape, negative)?;
        let z = tape.concat_rows(&[zp, zn])?;
        tape.cross_entropy(
            z,
            &[
                ContrastiveLabel::Positive.class(),
                ContrastiveLabel::Negative.class(),
            ],
            None,
        )
    }

    /// Log-probabilities of the next token after `token_ids`, where the first
    /// `source_len` ids are the source and the rest a target prefix.
    pub fn next_token_log_probs(&self, token_ids: &[usize], source_len: usize) -> Result<Vec<f64>> {
        if token_ids.len() <= source_len {
            return Err(Error::Layout(
                "target prefix must contain at least [SOS]".into(),
            ));
        }
        let mut segments = vec![0; source_len];
        segments.resize(token_ids.len(), 1);
        let mask = build_partial_causal_mask(
            source_len,
            token_ids.len() - source_len,
            self.config.max_sequence_length,
        )?;
        let mut tape = Tape::new(&self.params);
        let h0 = self.embed(&mut tape, token_ids, &segments)?;
        let h = self.forward(&mut tape, h0, &mask)?;
        let last = tape.gather_rows(h, &[token_ids.len() - 1])?;
        let logits = self.lm_logits(&mut tape, last)?;
        Ok(log_softmax(tape.value(logits)))
    }

    /// Contrastive logits for an instance, as plain values.
    pub fn contrastive_logit_values(&self, instance: &EncodedInstance) -> Result<[f64; 2]> {
        let mut tape = Tape::new(&self.params);
        let z = self.contrastive_logits(&mut tape, instance)?;
        let v = tape.value(z);
        Ok([v[0], v[1]])
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Probability of the "match" class.
pub fn match_probability(z: [f64; 2]) -> f64 {
    let lp = log_softmax(&z);
    lp[0].exp()
}

/// Pair loss on plain logits: average of CE(z_pos, match) and
/// CE(z_neg, mismatch).
pub fn contrastive_loss(z_pos: [f64; 2], z_neg: [f64; 2]) -> f64 {
    let lp = log_softmax(&z_pos);
    let ln = log_softmax(&z_neg);
    -(lp[0] + ln[1]) / 2.0
}

/// `mean(gen) + α · mean(con)`; an empty list contributes nothing.
pub fn joint_loss(gen_losses: &[f64], con_losses: &[f64], alpha: f64) -> Result<f64> {
    if gen_losses.is_empty() && con_losses.is_empty() {
        return Err(Error::Precondition("joint loss over an empty batch".into()));
    }
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(mean(gen_losses) + alpha * mean(con_losses))
}
