//! Joint training: dynamic per-instance masking, fresh negatives every
//! epoch, one Adam step per batch on `mean(gen) + α · mean(con)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{corrupt, decompose, RelationInventory, Triple};
use crate::decoding::{generate_triples, DecodeConfig};
use crate::eval::{score_corpus, DatasetInstance, MatchMode, Metrics};
use crate::model::{
    contrastive_loss, joint_loss, CgtModel, ContrastiveLabel, EncodedInstance, InstanceEncoder,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability that an instance is used for generation rather than as
    /// a contrastive pair.
    pub gamma: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    pub val_beam_size: usize,
    pub max_target_length: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            lr_decay_factor: 0.8,
            decay_every: 8,
            epochs: 50,
            batch_size: 64,
            gamma: 0.2,
            alpha: 0.1,
            temperature: 1.0,
            seed: 42,
            eval_every: 1,
            val_beam_size: 1,
            max_target_length: 64,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail("lr_decay_factor must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return fail("decay_every must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if self.val_beam_size == 0 || self.max_target_length == 0 {
            return fail("val_beam_size and max_target_length must be at least 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// `base · 0.8^⌊epoch / 8⌋`
pub fn schedule_lr(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.8f64.powi((epoch / 8) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub positive: EncodedInstance,
    pub negative: EncodedInstance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub generation: Vec<EncodedInstance>,
    pub contrastive: Vec<ContrastivePair>,
    /// Instances dropped for being too long, having no triples, or
    /// admitting no corruption.
    pub skipped: usize,
}

impl TrainBatch {
    pub fn is_empty(&self) -> bool {
        self.generation.is_empty() && self.contrastive.is_empty()
    }
}

fn skippable(e: &Error) -> bool {
    matches!(
        e,
        Error::Length { .. } | Error::CorruptionExhausted | Error::Layout(_)
    )
}

fn build_pair<R: Rng + ?Sized>(
    encoder: &InstanceEncoder,
    text: &str,
    positive: &Triple,
    gold: &[Triple],
    rng: &mut R,
) -> Result<ContrastivePair> {
    let words = InstanceEncoder::sentence_words(text);
    let negative = corrupt(positive, &words, gold, rng)?;
    Ok(ContrastivePair {
        positive: encoder.contrastive(text, positive, ContrastiveLabel::Positive)?,
        negative: encoder.contrastive(text, &negative, ContrastiveLabel::Negative)?,
    })
}

/// Per instance, a Bernoulli(γ) draw picks the generation layout (on 1) or
/// one contrastive pair built from a uniformly chosen gold triple (on 0).
/// An instance never gets both.
pub fn make_dynamic_batch<R: Rng + ?Sized>(
    instances: &[DatasetInstance],
    gamma: f64,
    rng: &mut R,
    encoder: &InstanceEncoder,
) -> Result<TrainBatch> {
    if instances.is_empty() {
        return Err(Error::Precondition("cannot batch zero instances".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config("gamma must lie in [0, 1]".into()));
    }
    let mut batch = TrainBatch::default();
    for inst in instances {
        if rng.gen_bool(gamma) {
            match encoder.generation(&inst.text, &inst.triples) {
                Ok(e) => batch.generation.push(e),
                Err(e) if skippable(&e) => batch.skipped += 1,
                Err(e) => return Err(e),
            }
        } else {
            let Some(positive) = inst.triples.choose(rng) else {
                batch.skipped += 1;
                continue;
            };
            match build_pair(encoder, &inst.text, positive, &inst.triples, rng) {
                Ok(p) => batch.contrastive.push(p),
                Err(e) if skippable(&e) => batch.skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    check_no_leakage(&batch, encoder.vocab())?;
    Ok(batch)
}

/// Every all-zero instance carries exactly one `h r t` after `[SEP]`,
/// never a linearized target.
pub fn check_no_leakage(batch: &TrainBatch, vocab: &Vocabulary) -> Result<()> {
    let markers = [vocab.sos_id(), vocab.eos_id(), vocab.s2s_seq_id()];
    for pair in &batch.contrastive {
        for inst in [&pair.positive, &pair.negative] {
            if inst.target_ids().iter().any(|id| markers.contains(id)) {
                return Err(Error::Layout(
                    "contrastive instance exposes a linearized target".into(),
                ));
            }
        }
    }
    Ok(())
}

/// One pair per gold triple: the triple itself and a fresh corruption.
pub fn contrastive_pairs<R: Rng + ?Sized>(
    encoder: &InstanceEncoder,
    text: &str,
    gold: &[Triple],
    rng: &mut R,
) -> Result<Vec<ContrastivePair>> {
    decompose(gold)
        .iter()
        .map(|pos| build_pair(encoder, text, pos, gold, rng))
        .collect()
}

/// Mean pair loss over all positives of one sentence; `None` when the
/// sentence has no triples.
pub fn contrastive_step<R: Rng + ?Sized>(
    model: &CgtModel,
    encoder: &InstanceEncoder,
    text: &str,
    gold: &[Triple],
    rng: &mut R,
) -> Result<Option<f64>> {
    if gold.is_empty() {
        return Ok(None);
    }
    let pairs = contrastive_pairs(encoder, text, gold, rng)?;
    let mut total = 0.0;
    for p in &pairs {
        total += contrastive_loss(
            model.contrastive_logit_values(&p.positive)?,
            model.contrastive_logit_values(&p.negative)?,
        );
    }
    Ok(Some(total / pairs.len() as f64))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchLosses {
    pub generation: Vec<f64>,
    pub contrastive: Vec<f64>,
}

/// Adds the gradient of `mean(gen) + α · mean(pair)` over `batch` into the
/// parameters' grad buffers. Contrastive units are not run when `α = 0`.
pub fn accumulate_batch_gradients(
    model: &mut CgtModel,
    batch: &TrainBatch,
    alpha: f64,
) -> Result<BatchLosses> {
    let mut losses = BatchLosses::default();
    let n_gen = batch.generation.len();
    for inst in &batch.generation {
        let (value, grads) = {
            let mut tape = Tape::new(model.params());
            let l = model.generation_loss(&mut tape, inst)?;
            (
                tape.scalar(l).expect("scalar loss"),
                tape.backward_scaled(l, 1.0 / n_gen as f64)?,
            )
        };
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "generation loss",
            });
        }
        model.params_mut().accumulate(&grads)?;
        losses.generation.push(value);
    }
    let n_con = batch.contrastive.len();
    if alpha > 0.0 {
        for pair in &batch.contrastive {
            let (value, grads) = {
                let mut tape = Tape::new(model.params());
                let l = model.contrastive_pair_loss(&mut tape, &pair.positive, &pair.negative)?;
                (
                    tape.scalar(l).expect("scalar loss"),
                    tape.backward_scaled(l, alpha / n_con as f64)?,
                )
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: "contrastive loss",
                });
            }
            model.params_mut().accumulate(&grads)?;
            losses.contrastive.push(value);
        }
    }
    Ok(losses)
}

/// Joint objective over a whole dataset with every instance used both
/// ways; negatives come from an rng seeded with `seed`.
pub fn dataset_loss(
    model: &CgtModel,
    vocab: &Vocabulary,
    data: &[DatasetInstance],
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    let encoder = InstanceEncoder::new(vocab, model.config().max_sequence_length);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Vec::new();
    let mut con = Vec::new();
    for inst in data {
        match encoder.generation(&inst.text, &inst.triples) {
            Ok(e) => {
                let mut tape = Tape::new(model.params());
                let l = model.generation_loss(&mut tape, &e)?;
                gen.push(tape.scalar(l).expect("scalar loss"));
            }
            Err(e) if skippable(&e) => {}
            Err(e) => return Err(e),
        }
        match contrastive_step(model, &encoder, &inst.text, &inst.triples, &mut rng) {
            Ok(Some(v)) => con.push(v),
            Ok(None) => {}
            Err(e) if skippable(&e) => {}
            Err(e) => return Err(e),
        }
    }
    joint_loss(&gen, &con, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub gen_loss: Option<f64>,
    pub con_loss: Option<f64>,
    pub val_p: Option<f64>,
    pub val_r: Option<f64>,
    pub val_f1: Option<f64>,
    pub gen_instances: usize,
    pub con_pairs: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept, when validation ran.
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
}

/// Mixes `(seed, a, b)` into an rng seed (splitmix64 finalizer).
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Exact-match metrics of greedy/beam decoding without calibration.
pub fn validate(
    model: &CgtModel,
    vocab: &Vocabulary,
    inventory: &RelationInventory,
    data: &[DatasetInstance],
    decode: &DecodeConfig,
) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(data.len());
    for inst in data {
        match generate_triples(model, vocab, inventory, &inst.text, decode) {
            Ok(t) => preds.push(t),
            Err(e) => {
                log::warn!("validation decode failed for {:?}: {e}", inst.text);
                preds.push(Vec::new());
            }
        }
    }
    let gold: Vec<Vec<Triple>> = data.iter().map(|i| i.triples.clone()).collect();
    score_corpus(&preds, &gold, MatchMode::Exact)
}

/// Trains `model` in place. When validation runs, the parameters with the
/// best validation F1 (earliest on ties) are restored at the end.
pub fn train(
    model: &mut CgtModel,
    vocab: &Vocabulary,
    inventory: &RelationInventory,
    train_set: &[DatasetInstance],
    dev_set: &[DatasetInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Precondition(format!(
            "model vocabulary size {} does not match vocabulary of {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    {
        let mc = model.config_mut();
        mc.alpha = config.alpha;
        mc.temperature = config.temperature;
    }
    let max_len = model.config().max_sequence_length;
    let decode = DecodeConfig {
        beam_size: config.val_beam_size,
        max_target_length: config.max_target_length,
        calibration_enabled: false,
        ..DecodeConfig::default()
    };

    let mut adam = AdamState::new(model.params(), config.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamSet)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut gen_losses = Vec::new();
        let mut con_losses = Vec::new();
        let mut gen_instances = 0;
        let mut con_pairs = 0;
        let mut skipped = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let instances: Vec<DatasetInstance> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, b as u64));
            let encoder = InstanceEncoder::new(vocab, max_len);
            let batch = make_dynamic_batch(&instances, config.gamma, &mut rng, &encoder)?;
            gen_instances += batch.generation.len();
            con_pairs += batch.contrastive.len();
            skipped += batch.skipped;
            if batch.is_empty() || (batch.generation.is_empty() && config.alpha == 0.0) {
                continue;
            }
            model.params_mut().zero_grad();
            let losses = match accumulate_batch_gradients(model, &batch, config.alpha) {
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: b })
                }
                other => other?,
            };
            adam_step(model.params_mut(), &mut adam, lr)?;
            gen_losses.extend(losses.generation);
            con_losses.extend(losses.contrastive);
        }

        let validate_now = config.eval_every > 0
            && !dev_set.is_empty()
            && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let val = if validate_now {
            Some(validate(model, vocab, inventory, dev_set, &decode)?)
        } else {
            None
        };
        if let Some(m) = val {
            if best.as_ref().map_or(true, |(f, _, _)| m.f1 > *f) {
                best = Some((m.f1, epoch, model.params().clone()));
            }
        }
        let record = EpochMetrics {
            epoch,
            lr,
            gen_loss: mean(&gen_losses),
            con_loss: mean(&con_losses),
            val_p: val.map(|m| m.precision),
            val_r: val.map(|m| m.recall),
            val_f1: val.map(|m| m.f1),
            gen_instances,
            con_pairs,
            skipped,
        };
        on_epoch(&record);
        metrics.push(record);
    }

    let (best_val_f1, best_epoch) = match best {
        Some((f1, epoch, params)) => {
            *model.params_mut() = params;
            (Some(f1), Some(epoch))
        }
        None => (None, None),
    };
    model.params_mut().zero_grad();
    Ok(TrainOutcome {
        metrics,
        best_epoch,
        best_val_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic, SyntheticSpec};
    use crate::model::{MaskKind, ModelConfig};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 4.0 * f64::EPSILON * b.abs()
    }

    #[test]
    fn learning_rate_schedule() {
        assert_eq!(schedule_lr(2e-5, 0), 2e-5);
        assert_eq!(schedule_lr(2e-5, 7), 2e-5);
        assert!(close(schedule_lr(2e-5, 8), 1.6e-5));
        assert!(close(schedule_lr(2e-5, 16), 1.28e-5));
        assert!(close(schedule_lr(2e-5, 16), 2e-5 * 0.64));
        let c = TrainConfig::default();
        for e in 0..40 {
            assert_eq!(c.lr_at(e), schedule_lr(2e-5, e));
        }
    }

    proptest! {
        #[test]
        fn schedule_is_stepwise_non_increasing(base in 1e-6f64..1.0, epoch in 0usize..200) {
            prop_assert!(schedule_lr(base, epoch + 1) <= schedule_lr(base, epoch));
            prop_assert_eq!(schedule_lr(base, epoch), schedule_lr(base, epoch - epoch % 8));
        }
    }

    fn corpus() -> (Vec<DatasetInstance>, RelationInventory, Vocabulary) {
        let c = generate_synthetic(&SyntheticSpec {
            train_sentences: 40,
            dev_sentences: 8,
            test_sentences: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let texts: Vec<&str> = c
            .train
            .iter()
            .chain(&c.dev)
            .map(|i| i.text.as_str())
            .collect();
        let vocab = Vocabulary::build(&texts, 400).unwrap();
        let mut all = c.train;
        all.extend(c.dev);
        (all, c.inventory, vocab)
    }

    fn small_model(vocab: &Vocabulary, seed: u64) -> CgtModel {
        CgtModel::new(
            ModelConfig {
                num_layers: 1,
                hidden_size: 16,
                num_heads: 2,
                ffn_size: 32,
                vocab_size: vocab.len(),
                max_sequence_length: 64,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_gammas() {
        let (data, _, vocab) = corpus();
        let enc = InstanceEncoder::new(&vocab, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all_gen = make_dynamic_batch(&data, 1.0, &mut rng, &enc).unwrap();
        assert_eq!(all_gen.generation.len(), data.len());
        assert!(all_gen.contrastive.is_empty());
        let all_con = make_dynamic_batch(&data, 0.0, &mut rng, &enc).unwrap();
        assert!(all_con.generation.is_empty());
        assert_eq!(all_con.contrastive.len(), data.len());
        assert!(make_dynamic_batch(&[], 0.5, &mut rng, &enc).is_err());
    }

    #[test]
    fn generation_fraction_tracks_gamma() {
        let (data, _, vocab) = corpus();
        let enc = InstanceEncoder::new(&vocab, 64);
        let many: Vec<DatasetInstance> = data.iter().cycle().take(10_000).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make_dynamic_batch(&many, 0.2, &mut rng, &enc).unwrap();
        assert_eq!(b.skipped, 0);
        let frac = b.generation.len() as f64 / 10_000.0;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
    }

    #[test]
    fn contrastive_instances_never_see_the_target() {
        let (data, _, vocab) = corpus();
        let enc = InstanceEncoder::new(&vocab, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = make_dynamic_batch(&data, 0.5, &mut rng, &enc).unwrap();
        for p in &b.contrastive {
            for inst in [&p.positive, &p.negative] {
                assert_eq!(inst.mask_kind, MaskKind::AllZero);
                assert!(!inst.token_ids.contains(&vocab.s2s_seq_id()));
                assert!(!inst.token_ids.contains(&vocab.sos_id()));
            }
            assert_ne!(p.positive.token_ids, p.negative.token_ids);
        }
        for g in &b.generation {
            assert_eq!(g.mask_kind, MaskKind::PartialCausal);
        }
        // a handmade leak is caught
        let mut leaky = b.clone();
        let mut bad = leaky
            .generation
            .first()
            .cloned()
            .unwrap_or_else(|| b.contrastive[0].positive.clone());
        bad.token_ids.push(vocab.eos_id());
        bad.target_len += 1;
        leaky.contrastive.push(ContrastivePair {
            positive: bad.clone(),
            negative: bad,
        });
        assert!(check_no_leakage(&leaky, &vocab).is_err());
    }

    #[test]
    fn one_pair_per_gold_triple() {
        let (data, _, vocab) = corpus();
        let enc = InstanceEncoder::new(&vocab, 64);
        let inst = data.iter().find(|i| i.triples.len() == 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = contrastive_pairs(&enc, &inst.text, &inst.triples, &mut rng).unwrap();
        assert_eq!(pairs.len(), 3);
        let model = small_model(&vocab, 1);
        assert!(contrastive_step(&model, &enc, &inst.text, &[], &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn contrastive_loss_decreases_with_training() {
        let (data, _, vocab) = corpus();
        let enc = InstanceEncoder::new(&vocab, 64);
        let inst = data.iter().find(|i| i.triples.len() == 2).unwrap().clone();
        let mut model = small_model(&vocab, 5);
        let probe = |m: &CgtModel| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            contrastive_step(m, &enc, &inst.text, &inst.triples, &mut r)
                .unwrap()
                .unwrap()
        };
        let before = probe(&model);
        let mut adam = AdamState::new(model.params(), AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let batch = TrainBatch {
                contrastive: contrastive_pairs(&enc, &inst.text, &inst.triples, &mut rng).unwrap(),
                ..TrainBatch::default()
            };
            model.params_mut().zero_grad();
            accumulate_batch_gradients(&mut model, &batch, 1.0).unwrap();
            adam_step(model.params_mut(), &mut adam, 1e-3).unwrap();
        }
        let after = probe(&model);
        assert!(after < before, "{before} -> {after}");
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn alpha_zero_leaves_the_classifier_alone() {
        let (data, inv, vocab) = corpus();
        let mut model = small_model(&vocab, 7);
        let before: Vec<_> = model
            .classifier_param_ids()
            .map(|id| model.params().get(id).clone())
            .to_vec();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            alpha: 0.0,
            gamma: 0.5,
            learning_rate: 1e-3,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &vocab, &inv, &data, &[], &config, |_| {}).unwrap();
        assert!(out.metrics[0].con_loss.is_none());
        assert!(out.metrics[0].con_pairs > 0);
        for (id, t) in model.classifier_param_ids().iter().zip(before) {
            assert_eq!(model.params().get(*id).data(), t.data());
        }
    }

    #[test]
    fn one_epoch_reduces_the_joint_loss_and_is_reproducible() {
        let (data, inv, vocab) = corpus();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 3e-3,
            gamma: 0.5,
            eval_every: 1,
            max_target_length: 24,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = small_model(&vocab, 8);
            let init = dataset_loss(&model, &vocab, &data, config.alpha, 0).unwrap();
            let out = train(&mut model, &vocab, &inv, &data, &data[..4], &config, |_| {}).unwrap();
            (init, out, model)
        };
        let (init, out, model) = run();
        let trained = dataset_loss(&model, &vocab, &data, config.alpha, 0).unwrap();
        assert!(trained < init, "{init} -> {trained}");
        assert_eq!(out.best_epoch, Some(0));
        assert!(out.metrics[0].val_f1.is_some());

        let (_, out2, model2) = run();
        assert_eq!(out.metrics, out2.metrics);
        assert_eq!(model.params(), model2.params());
    }

    #[test]
    fn gamma_one_has_no_contrastive_pairs() {
        let (data, inv, vocab) = corpus();
        let mut model = small_model(&vocab, 9);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 16,
            gamma: 1.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &vocab, &inv, &data, &[], &config, |_| {}).unwrap();
        assert_eq!(out.metrics[0].con_pairs, 0);
        assert!(out.metrics[0].con_loss.is_none());
        assert!(out.metrics[0].gen_loss.is_some());
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let (data, inv, vocab) = corpus();
        let mut model = small_model(&vocab, 10);
        let id = model.token_embedding_id();
        model.params_mut().get_mut(id).data_mut().fill(f64::NAN);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 16,
            gamma: 1.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        match train(&mut model, &vocab, &inv, &data, &[], &config, |_| {}) {
            Err(Error::NonFiniteLoss { epoch: 0, batch: 0 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig {
                gamma: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                temperature: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig {
            epochs: 7,
            gamma: 0.5,
            ..TrainConfig::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        let partial: TrainConfig = toml::from_str("epochs = 3").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 64);
    }
}
