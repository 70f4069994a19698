//! Beam search over the partial-causal model and triple-wise calibration.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::codec::{parse, RelationInventory, Triple};
use crate::model::{match_probability, CgtModel, ContrastiveLabel, DecoderState, InstanceEncoder};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Generated tokens after `[SOS]`, `[EOS]` included.
    pub max_target_length: usize,
    pub match_threshold: f64,
    pub calibration_enabled: bool,
    /// Rank by mean instead of summed log-probability.
    pub length_normalize: bool,
    /// Parse every final beam and merge, instead of the best one only.
    pub union_beams: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            max_target_length: 64,
            match_threshold: 0.6,
            calibration_enabled: true,
            length_normalize: false,
            union_beams: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_target_length == 0 {
            return Err(Error::Config("max_target_length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::Config(format!(
                "match_threshold must lie in [0, 1], got {}",
                self.match_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Tokens after `[SOS]`; ends with `[EOS]` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn rank(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Next-token distributions for beam search.
pub trait StepScorer {
    type State: Clone;

    fn eos_id(&self) -> usize;

    /// State after `[SOS]` and the log-probabilities of the first token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Extends `state` by `token`.
    fn advance(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// Adapts a [`CgtModel`] with a fixed source to [`StepScorer`].
pub struct ModelScorer<'m> {
    model: &'m CgtModel,
    source_ids: Vec<usize>,
    sos_id: usize,
    eos_id: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m CgtModel, vocab: &Vocabulary, source_ids: Vec<usize>) -> Self {
        ModelScorer {
            model,
            source_ids,
            sos_id: vocab.sos_id(),
            eos_id: vocab.eos_id(),
        }
    }

    /// Largest number of tokens that fit after `[SOS]`.
    pub fn room(&self) -> usize {
        self.model
            .config()
            .max_sequence_length
            .saturating_sub(self.source_ids.len() + 1)
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn eos_id(&self) -> usize {
        self.eos_id
    }

    fn start(&self) -> Result<(DecoderState, Vec<f64>)> {
        let mut state = self.model.start_decoding(&self.source_ids)?;
        let lp = self.model.decode_step(&mut state, self.sos_id)?;
        Ok((state, lp))
    }

    fn advance(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>)> {
        let mut next = state.clone();
        let lp = self.model.decode_step(&mut next, token)?;
        Ok((next, lp))
    }
}

struct Beam<S> {
    hyp: Hypothesis,
    state: Option<S>,
    next: Vec<f64>,
}

fn compare(a: &Hypothesis, b: &Hypothesis, length_normalize: bool) -> Ordering {
    b.rank(length_normalize)
        .total_cmp(&a.rank(length_normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-wise beam search. Returns the final beams, best first: finished
/// hypotheses ahead of unfinished ones, then by score, then by token order.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam_size: usize,
    max_target_length: usize,
    length_normalize: bool,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let eos = scorer.eos_id();
    let (state, next) = scorer.start()?;
    let mut beams = vec![Beam {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: Some(state),
        next,
    }];

    for step in 0..max_target_length {
        if beams.iter().all(|b| b.hyp.finished) {
            break;
        }
        // (parent, token or None for a carried finished beam, hypothesis)
        let mut candidates: Vec<(usize, Option<usize>, Hypothesis)> = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            if beam.hyp.finished {
                candidates.push((bi, None, beam.hyp.clone()));
                continue;
            }
            for (tok, &lp) in beam.next.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = beam.hyp.tokens.clone();
                tokens.push(tok);
                candidates.push((
                    bi,
                    Some(tok),
                    Hypothesis {
                        tokens,
                        log_prob: beam.hyp.log_prob + lp,
                        finished: tok == eos,
                    },
                ));
            }
        }
        candidates.sort_by(|a, b| compare(&a.2, &b.2, length_normalize));
        candidates.truncate(beam_size);

        let last_step = step + 1 == max_target_length;
        let mut next_beams = Vec::with_capacity(candidates.len());
        for (parent, token, hyp) in candidates {
            let beam = match token {
                None => Beam {
                    hyp,
                    state: None,
                    next: Vec::new(),
                },
                Some(_) if hyp.finished || last_step => Beam {
                    hyp,
                    state: None,
                    next: Vec::new(),
                },
                Some(tok) => {
                    let parent_state = beams[parent]
                        .state
                        .as_ref()
                        .expect("unfinished beam keeps its state");
                    let (state, next) = scorer.advance(parent_state, tok)?;
                    Beam {
                        hyp,
                        state: Some(state),
                        next,
                    }
                }
            };
            next_beams.push(beam);
        }
        beams = next_beams;
    }

    let mut out: Vec<Hypothesis> = beams.into_iter().map(|b| b.hyp).collect();
    out.sort_by(|a, b| {
        b.finished
            .cmp(&a.finished)
            .then_with(|| compare(a, b, length_normalize))
    });
    Ok(out)
}

/// Probability that `triple` is faithful to `sentence`.
pub fn match_score(
    model: &CgtModel,
    encoder: &InstanceEncoder,
    sentence: &str,
    triple: &Triple,
) -> Result<f64> {
    let inst = encoder.contrastive(sentence, triple, ContrastiveLabel::Positive)?;
    Ok(match_probability(model.contrastive_logit_values(&inst)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriple {
    #[serde(flatten)]
    pub triple: Triple,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calibration {
    pub kept: Vec<ScoredTriple>,
    pub dropped: Vec<ScoredTriple>,
}

/// Splits `triples` by `score ≥ threshold`, preserving order.
pub fn calibrate_with(
    triples: &[Triple],
    threshold: f64,
    mut score: impl FnMut(&Triple) -> Result<f64>,
) -> Result<Calibration> {
    let mut out = Calibration::default();
    for t in triples {
        let s = ScoredTriple {
            triple: t.clone(),
            score: score(t)?,
        };
        if s.score >= threshold {
            out.kept.push(s);
        } else {
            out.dropped.push(s);
        }
    }
    Ok(out)
}

pub fn calibrate(
    model: &CgtModel,
    encoder: &InstanceEncoder,
    sentence: &str,
    triples: &[Triple],
    threshold: f64,
) -> Result<Calibration> {
    calibrate_with(triples, threshold, |t| {
        match_score(model, encoder, sentence, t)
    })
}

/// Output record for one sentence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Extraction {
    pub text: String,
    pub triples: Vec<Triple>,
    pub dropped: Vec<Triple>,
    /// Match score of every parsed triple, in parse order.
    pub scores: Vec<ScoredTriple>,
}

fn token_words(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<String>> {
    Ok(vocab
        .decode(ids)?
        .split_whitespace()
        .map(str::to_string)
        .collect())
}

/// Generates and parses triples for `sentence` without calibration.
pub fn generate_triples(
    model: &CgtModel,
    vocab: &Vocabulary,
    inventory: &RelationInventory,
    sentence: &str,
    config: &DecodeConfig,
) -> Result<Vec<Triple>> {
    let encoder = InstanceEncoder::new(vocab, model.config().max_sequence_length);
    let source = encoder.source_ids(sentence);
    if source.len() + 2 > model.config().max_sequence_length {
        return Err(Error::Length {
            len: source.len() + 2,
            max: model.config().max_sequence_length,
        }
        .in_stage("tokenize"));
    }
    let scorer = ModelScorer::new(model, vocab, source);
    let max_len = config.max_target_length.min(scorer.room());
    let beams = beam_search(&scorer, config.beam_size, max_len, config.length_normalize)
        .map_err(|e| e.in_stage("beam_search"))?;

    let chosen = if config.union_beams {
        &beams[..]
    } else {
        &beams[..1]
    };
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for hyp in chosen {
        let words = token_words(vocab, &hyp.tokens).map_err(|e| e.in_stage("parse"))?;
        for t in parse(&words, inventory).triples {
            if seen.insert(t.clone()) {
                triples.push(t);
            }
        }
    }
    Ok(triples)
}

/// Full inference pipeline: tokenize, beam search, parse, calibrate.
pub fn extract(
    model: &CgtModel,
    vocab: &Vocabulary,
    inventory: &RelationInventory,
    sentence: &str,
    config: &DecodeConfig,
) -> Result<Extraction> {
    config.validate()?;
    let triples = generate_triples(model, vocab, inventory, sentence, config)?;
    let encoder = InstanceEncoder::new(vocab, model.config().max_sequence_length);
    let threshold = if config.calibration_enabled {
        config.match_threshold
    } else {
        f64::NEG_INFINITY
    };
    let cal = calibrate(model, &encoder, sentence, &triples, threshold)
        .map_err(|e| e.in_stage("calibrate"))?;
    let mut scores = Vec::with_capacity(triples.len());
    for t in &triples {
        let s = cal
            .kept
            .iter()
            .chain(&cal.dropped)
            .find(|s| &s.triple == t)
            .expect("every triple is scored");
        scores.push(s.clone());
    }
    Ok(Extraction {
        text: sentence.to_string(),
        triples: cal.kept.into_iter().map(|s| s.triple).collect(),
        dropped: cal.dropped.into_iter().map(|s| s.triple).collect(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Toy scorer: log-probabilities from a random table keyed by prefix.
    struct TableScorer {
        vocab: usize,
        eos: usize,
        seed: u64,
    }

    impl TableScorer {
        fn dist(&self, prefix: &[usize]) -> Vec<f64> {
            let mut key = self.seed;
            for &t in prefix {
                key = key.wrapping_mul(31).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            crate::model::log_softmax(&logits)
        }
    }

    impl StepScorer for TableScorer {
        type State = Vec<usize>;

        fn eos_id(&self) -> usize {
            self.eos
        }

        fn start(&self) -> Result<(Vec<usize>, Vec<f64>)> {
            Ok((Vec::new(), self.dist(&[])))
        }

        fn advance(&self, state: &Vec<usize>, token: usize) -> Result<(Vec<usize>, Vec<f64>)> {
            let mut s = state.clone();
            s.push(token);
            let d = self.dist(&s);
            Ok((s, d))
        }
    }

    fn exhaustive(scorer: &TableScorer, max_len: usize) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut stack = vec![(Vec::new(), 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let dist = scorer.dist(&prefix);
            for t in 0..scorer.vocab {
                let mut seq = prefix.clone();
                seq.push(t);
                let score = lp + dist[t];
                if t == scorer.eos {
                    if best.as_ref().map_or(true, |b| score > b.1) {
                        best = Some((seq, score));
                    }
                } else if seq.len() < max_len {
                    stack.push((seq, score));
                }
            }
        }
        best.unwrap()
    }

    fn greedy(scorer: &TableScorer, max_len: usize) -> Vec<usize> {
        let mut seq = Vec::new();
        while seq.len() < max_len {
            let d = scorer.dist(&seq);
            let mut arg = 0;
            for t in 1..d.len() {
                if d[t] > d[arg] {
                    arg = t;
                }
            }
            seq.push(arg);
            if arg == scorer.eos {
                break;
            }
        }
        seq
    }

    #[test]
    fn saturated_beam_equals_exhaustive_search() {
        for seed in 0..20 {
            let scorer = TableScorer {
                vocab: 6,
                eos: 5,
                seed,
            };
            let beams = beam_search(&scorer, 216, 3, false).unwrap();
            let (seq, lp) = exhaustive(&scorer, 3);
            assert!(beams[0].finished);
            assert_eq!(beams[0].tokens, seq, "seed {seed}");
            assert!((beams[0].log_prob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn single_beam_is_greedy() {
        for seed in 0..20 {
            let scorer = TableScorer {
                vocab: 6,
                eos: 5,
                seed,
            };
            let beams = beam_search(&scorer, 1, 3, false).unwrap();
            assert_eq!(beams[0].tokens, greedy(&scorer, 3), "seed {seed}");
        }
    }

    #[test]
    fn log_prob_never_increases_along_a_hypothesis() {
        let scorer = TableScorer {
            vocab: 6,
            eos: 5,
            seed: 3,
        };
        for len in 1..=4 {
            let beams = beam_search(&scorer, 4, len, false).unwrap();
            for b in beams {
                let mut lp = 0.0;
                let mut prefix = Vec::new();
                for &t in &b.tokens {
                    let next = lp + scorer.dist(&prefix)[t];
                    assert!(next <= lp);
                    lp = next;
                    prefix.push(t);
                }
                assert!((lp - b.log_prob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn peaked_model_returns_its_sequence() {
        struct Peaked;
        impl StepScorer for Peaked {
            type State = usize;
            fn eos_id(&self) -> usize {
                3
            }
            fn start(&self) -> Result<(usize, Vec<f64>)> {
                Ok((0, self.at(0)))
            }
            fn advance(&self, s: &usize, _t: usize) -> Result<(usize, Vec<f64>)> {
                Ok((s + 1, self.at(s + 1)))
            }
        }
        impl Peaked {
            fn at(&self, step: usize) -> Vec<f64> {
                let want = [1, 2, 0, 3][step.min(3)];
                (0..4)
                    .map(|t| if t == want { -1e-9 } else { -30.0 })
                    .collect()
            }
        }
        for q in 1..=5 {
            let best = &beam_search(&Peaked, q, 10, false).unwrap()[0];
            assert_eq!(best.tokens, vec![1, 2, 0, 3]);
        }
    }

    #[test]
    fn unfinished_is_returned_when_nothing_finishes() {
        let scorer = TableScorer {
            vocab: 6,
            eos: 99,
            seed: 1,
        };
        let beams = beam_search(&scorer, 2, 3, false).unwrap();
        assert!(!beams[0].finished);
        assert_eq!(beams[0].tokens.len(), 3);
    }

    fn triples() -> Vec<Triple> {
        vec![Triple::new("a", "r", "b"), Triple::new("c", "r", "d")]
    }

    #[test]
    fn calibration_with_stub_scores() {
        let stub = |t: &Triple| Ok(if t.head == "a" { 0.9 } else { 0.3 });
        let cal = calibrate_with(&triples(), 0.6, stub).unwrap();
        assert_eq!(cal.kept.len(), 1);
        assert_eq!(cal.kept[0].triple.head, "a");
        assert_eq!(cal.dropped[0].triple.head, "c");
        assert_eq!(calibrate_with(&triples(), 0.0, stub).unwrap().kept.len(), 2);
        assert!(calibrate_with(&triples(), 1.0 + 1e-9, stub)
            .unwrap()
            .kept
            .is_empty());
    }

    #[test]
    fn kept_set_shrinks_with_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts: Vec<Triple> = (0..30)
            .map(|i| Triple::new(format!("e{i}"), "r", "x"))
            .collect();
        let scores: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let stub = |t: &Triple| Ok(scores[t.head[1..].parse::<usize>().unwrap()]);
        let mut last = usize::MAX;
        for k in 0..=20 {
            let cal = calibrate_with(&ts, k as f64 / 20.0, stub).unwrap();
            assert!(cal.kept.len() <= last);
            last = cal.kept.len();
            // order is preserved
            let idx: Vec<usize> = cal
                .kept
                .iter()
                .map(|s| s.triple.head[1..].parse().unwrap())
                .collect();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn dropping_false_positives_cannot_lower_precision() {
        let gold = triples();
        let fake = Triple::new("a", "r", "d");
        let predicted = vec![gold[0].clone(), fake.clone(), gold[1].clone()];
        let stub = |t: &Triple| Ok(if *t == fake { 0.2 } else { 0.8 });
        let cal = calibrate_with(&predicted, 0.6, stub).unwrap();
        let kept: Vec<Triple> = cal.kept.into_iter().map(|s| s.triple).collect();
        let before = crate::eval::score(&predicted, &gold);
        let after = crate::eval::score(&kept, &gold);
        assert!(after.precision >= before.precision);
        assert_eq!(after.true_positive, before.true_positive);
    }

    fn tiny_pipeline() -> (CgtModel, Vocabulary, RelationInventory) {
        let vocab = Vocabulary::build(&["alice works at acme"], 100).unwrap();
        let config = ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 8,
            vocab_size: vocab.len(),
            max_sequence_length: 24,
            ..ModelConfig::default()
        };
        let model = CgtModel::new(config, 5).unwrap();
        (model, vocab, RelationInventory::new(&["works at"]).unwrap())
    }

    #[test]
    fn match_scores_are_probabilities() {
        let (model, vocab, _) = tiny_pipeline();
        let enc = InstanceEncoder::new(&vocab, 24);
        let t = Triple::new("alice", "works at", "acme");
        let s = match_score(&model, &enc, "alice works at acme", &t).unwrap();
        assert!((0.0..=1.0).contains(&s));
        let z = model
            .contrastive_logit_values(
                &enc.contrastive("alice works at acme", &t, ContrastiveLabel::Positive)
                    .unwrap(),
            )
            .unwrap();
        let mismatch = crate::model::log_softmax(&z)[1].exp();
        assert!((s + mismatch - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extract_is_deterministic_and_consistent() {
        let (model, vocab, inv) = tiny_pipeline();
        let config = DecodeConfig {
            max_target_length: 8,
            ..DecodeConfig::default()
        };
        let a = extract(&model, &vocab, &inv, "alice works at acme", &config).unwrap();
        let b = extract(&model, &vocab, &inv, "alice works at acme", &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores.len(), a.triples.len() + a.dropped.len());

        let off = DecodeConfig {
            calibration_enabled: false,
            ..config.clone()
        };
        let zero = DecodeConfig {
            match_threshold: 0.0,
            ..config
        };
        assert_eq!(
            extract(&model, &vocab, &inv, "alice works at acme", &off).unwrap(),
            extract(&model, &vocab, &inv, "alice works at acme", &zero).unwrap()
        );
    }

    #[test]
    fn oversized_input_names_the_stage() {
        let (model, vocab, inv) = tiny_pipeline();
        let long = "alice ".repeat(40);
        let err = extract(&model, &vocab, &inv, &long, &DecodeConfig::default()).unwrap_err();
        assert!(
            err.to_string().starts_with("tokenize stage failed"),
            "{err}"
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(DecodeConfig {
            beam_size: 0,
            ..DecodeConfig::default()
        }
        .validate()
        .is_err());
        assert!(DecodeConfig {
            match_threshold: -0.1,
            ..DecodeConfig::default()
        }
        .validate()
        .is_err());
    }
}
