//! Scoring, length buckets, dataset files and the synthetic benchmark.

mod dataset;
mod synthetic;

pub use dataset::{check_instance, inventory_from, load_dataset, save_dataset, DatasetInstance};
pub use synthetic::{generate_synthetic, has_overlap, SyntheticCorpus, SyntheticSpec, Template};

use std::collections::HashSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::codec::Triple;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Metrics {
    pub fn from_counts(true_positive: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positive, predicted);
        let recall = ratio(true_positive, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            true_positive,
            predicted,
            gold,
        }
    }

    fn add(self, other: Metrics) -> Metrics {
        Metrics::from_counts(
            self.true_positive + other.true_positive,
            self.predicted + other.predicted,
            self.gold + other.gold,
        )
    }
}

/// How a predicted triple is compared with gold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Full head, relation and tail strings.
    #[default]
    Exact,
    /// Relation plus the last word of head and tail.
    Partial,
}

fn key(t: &Triple, mode: MatchMode) -> Triple {
    let t = t.normalized();
    match mode {
        MatchMode::Exact => t,
        MatchMode::Partial => {
            let last = |s: &str| s.rsplit(' ').next().unwrap_or_default().to_string();
            Triple::new(last(&t.head), t.relation, last(&t.tail))
        }
    }
}

/// Exact-match precision, recall and F1 for one sentence.
pub fn score(predicted: &[Triple], gold: &[Triple]) -> Metrics {
    score_with(predicted, gold, MatchMode::Exact)
}

pub fn score_with(predicted: &[Triple], gold: &[Triple], mode: MatchMode) -> Metrics {
    let p: HashSet<Triple> = predicted.iter().map(|t| key(t, mode)).collect();
    let g: HashSet<Triple> = gold.iter().map(|t| key(t, mode)).collect();
    Metrics::from_counts(p.intersection(&g).count(), p.len(), g.len())
}

/// Micro-averaged metrics: counts are summed over sentences, and a triple
/// only matches gold of its own sentence.
pub fn score_corpus(
    predicted: &[Vec<Triple>],
    gold: &[Vec<Triple>],
    mode: MatchMode,
) -> Result<Metrics> {
    if predicted.len() != gold.len() {
        return Err(Error::Precondition(format!(
            "{} prediction rows for {} gold rows",
            predicted.len(),
            gold.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(gold)
        .map(|(p, g)| score_with(p, g, mode))
        .fold(Metrics::default(), Metrics::add))
}

pub const DEFAULT_BUCKET_EDGES: [usize; 3] = [20, 40, 60];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub lower: usize,
    /// Exclusive; `None` for the open last bucket.
    pub upper: Option<usize>,
    pub instances: usize,
    pub empty: bool,
    pub metrics: Metrics,
}

impl BucketMetrics {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("{}-{}", self.lower, u - 1),
            None => format!(">={}", self.lower),
        }
    }

    /// x-coordinate for plotting; the open bucket reuses the width of the
    /// one before it.
    fn midpoint(&self, width_hint: usize) -> f64 {
        match self.upper {
            Some(u) => (self.lower + u) as f64 / 2.0,
            None => self.lower as f64 + width_hint as f64 / 2.0,
        }
    }
}

/// Groups sentences by whitespace token count. `edges` `[e₁, …, eₖ]`
/// produce `k + 1` buckets `[0, e₁), [e₁, e₂), …, [eₖ, ∞)`.
pub fn bucket_by_length(
    instances: &[DatasetInstance],
    predictions: &[Vec<Triple>],
    edges: &[usize],
    mode: MatchMode,
) -> Result<Vec<BucketMetrics>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(
            "bucket edges must be strictly increasing".into(),
        ));
    }
    if instances.len() != predictions.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} instances",
            predictions.len(),
            instances.len()
        )));
    }
    let mut buckets: Vec<BucketMetrics> = (0..=edges.len())
        .map(|i| BucketMetrics {
            lower: if i == 0 { 0 } else { edges[i - 1] },
            upper: edges.get(i).copied(),
            instances: 0,
            empty: true,
            metrics: Metrics::default(),
        })
        .collect();
    for (inst, pred) in instances.iter().zip(predictions) {
        let n = inst.text.split_whitespace().count();
        let b = edges.iter().position(|&e| n < e).unwrap_or(edges.len());
        let bucket = &mut buckets[b];
        bucket.instances += 1;
        bucket.empty = false;
        bucket.metrics = bucket.metrics.add(score_with(pred, &inst.triples, mode));
    }
    Ok(buckets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub global: Metrics,
    pub buckets: Vec<BucketMetrics>,
}

impl EvalReport {
    pub fn new(
        system: &str,
        instances: &[DatasetInstance],
        predictions: &[Vec<Triple>],
        edges: &[usize],
        mode: MatchMode,
    ) -> Result<Self> {
        let gold: Vec<Vec<Triple>> = instances.iter().map(|i| i.triples.clone()).collect();
        Ok(EvalReport {
            system: system.to_string(),
            global: score_corpus(predictions, &gold, mode)?,
            buckets: bucket_by_length(instances, predictions, edges, mode)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let m = &self.global;
        let _ = writeln!(out, "system: {}", self.system);
        let _ = writeln!(
            out,
            "global  P={:.4} R={:.4} F1={:.4}  (tp={} pred={} gold={})",
            m.precision, m.recall, m.f1, m.true_positive, m.predicted, m.gold
        );
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>8} {:>8} {:>8}",
            "length", "sentences", "P", "R", "F1"
        );
        for b in &self.buckets {
            let flag = if b.empty { "  (empty)" } else { "" };
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>8.4} {:>8.4} {:>8.4}{}",
                b.label(),
                b.instances,
                b.metrics.precision,
                b.metrics.recall,
                b.metrics.f1,
                flag
            );
        }
        out
    }
}

/// `midpoint,<system>,…` rows of per-bucket F1 for external plotting.
pub fn plot_csv(reports: &[EvalReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Ok(String::new());
    };
    if reports
        .iter()
        .any(|r| r.buckets.len() != first.buckets.len())
    {
        return Err(Error::Precondition(
            "reports use different bucket edges".into(),
        ));
    }
    let mut out = String::from("bucket_midpoint");
    for r in reports {
        let _ = write!(out, ",{}", r.system.replace(',', "_"));
    }
    out.push('\n');
    let n = first.buckets.len();
    let width = if n >= 2 {
        let prev = &first.buckets[n - 2];
        prev.upper.unwrap_or(prev.lower) - prev.lower
    } else {
        0
    };
    for i in 0..n {
        let _ = write!(out, "{}", first.buckets[i].midpoint(width));
        for r in reports {
            let _ = write!(out, ",{:.6}", r.buckets[i].metrics.f1);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(h: &str, r: &str, tl: &str) -> Triple {
        Triple::new(h, r, tl)
    }

    fn gold3() -> Vec<Triple> {
        vec![t("a", "r", "b"), t("c", "r", "d"), t("e", "s", "f")]
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let m = score(&gold3(), &gold3());
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = score(&[], &gold3());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = score(&[], &[]);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn two_of_three_correct() {
        let pred = vec![t("a", "r", "b"), t("c", "r", "d"), t("x", "r", "y")];
        let m = score(&pred, &gold3());
        assert_eq!((m.true_positive, m.predicted, m.gold), (2, 3, 3));
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_and_dedup() {
        let pred = vec![
            t("A", "R", "B"),
            t("a ", " r", "b"),
            t("new  york", "r", "b"),
        ];
        let gold = vec![t("a", "r", "b"), t("new york", "r", "b")];
        let m = score(&pred, &gold);
        assert_eq!((m.true_positive, m.predicted), (2, 2));
    }

    #[test]
    fn partial_mode_matches_head_words() {
        let pred = vec![t("the acme corp", "r", "big city")];
        let gold = vec![t("corp", "r", "city")];
        assert_eq!(score(&pred, &gold).true_positive, 0);
        assert_eq!(
            score_with(&pred, &gold, MatchMode::Partial).true_positive,
            1
        );
    }

    #[test]
    fn corpus_scores_do_not_cross_sentences() {
        let pred = vec![vec![t("a", "r", "b")], vec![]];
        let gold = vec![vec![], vec![t("a", "r", "b")]];
        let m = score_corpus(&pred, &gold, MatchMode::Exact).unwrap();
        assert_eq!(m.true_positive, 0);
        assert!(score_corpus(&pred, &gold[..1], MatchMode::Exact).is_err());
    }

    fn arb_triples() -> impl Strategy<Value = Vec<Triple>> {
        let word = prop::sample::select(vec!["a", "b", "c", "d"]);
        let rel = prop::sample::select(vec!["r", "s"]);
        prop::collection::vec((word.clone(), rel, word), 0..8)
            .prop_map(|v| v.into_iter().map(|(h, r, tl)| t(h, r, tl)).collect())
    }

    proptest! {
        #[test]
        fn score_is_permutation_symmetric(p in arb_triples(), g in arb_triples(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.shuffle(&mut rng);
            g2.shuffle(&mut rng);
            prop_assert_eq!(score(&p, &g), score(&p2, &g2));
        }

        #[test]
        fn f1_identity_holds(p in arb_triples(), g in arb_triples()) {
            let m = score(&p, &g);
            let pp: HashSet<_> = p.iter().collect();
            let gg: HashSet<_> = g.iter().collect();
            let tp = pp.intersection(&gg).count() as f64;
            let prec = if pp.is_empty() { 0.0 } else { tp / pp.len() as f64 };
            let rec = if gg.is_empty() { 0.0 } else { tp / gg.len() as f64 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            prop_assert!((m.precision - prec).abs() < 1e-12);
            prop_assert!((m.recall - rec).abs() < 1e-12);
            prop_assert!((m.f1 - f1).abs() < 1e-12);
        }
    }

    fn instances() -> (Vec<DatasetInstance>, Vec<Vec<Triple>>) {
        let lens = [3, 19, 20, 25, 39, 40, 41, 59, 60, 75];
        let mut insts = Vec::new();
        let mut preds = Vec::new();
        for (i, &n) in lens.iter().enumerate() {
            let text = vec!["w"; n].join(" ");
            let gold = vec![t("w", "r", &format!("x{i}")), t("w", "s", "w")];
            let pred = if i % 3 == 0 {
                gold.clone()
            } else {
                vec![gold[0].clone(), t("q", "r", "q")]
            };
            insts.push(DatasetInstance {
                text,
                triples: gold,
            });
            preds.push(pred);
        }
        (insts, preds)
    }

    #[test]
    fn buckets_partition_the_corpus() {
        let (insts, preds) = instances();
        let gold: Vec<_> = insts.iter().map(|i| i.triples.clone()).collect();
        let global = score_corpus(&preds, &gold, MatchMode::Exact).unwrap();

        let one = bucket_by_length(&insts, &preds, &[], MatchMode::Exact).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].metrics, global);

        let b = bucket_by_length(&insts, &preds, &DEFAULT_BUCKET_EDGES, MatchMode::Exact).unwrap();
        assert_eq!(b.len(), 4);
        let tp: usize = b.iter().map(|x| x.metrics.true_positive).sum();
        assert_eq!(tp, global.true_positive);
        // membership recounted with an independent filter
        let count = |lo: usize, hi: usize| {
            insts
                .iter()
                .filter(|i| (lo..hi).contains(&i.text.split(' ').count()))
                .count()
        };
        assert_eq!(b[0].instances, count(0, 20));
        assert_eq!(b[1].instances, count(20, 40));
        assert_eq!(b[2].instances, count(40, 60));
        assert_eq!(b[3].instances, count(60, usize::MAX));
    }

    #[test]
    fn empty_buckets_are_flagged() {
        let (insts, preds) = instances();
        let b =
            bucket_by_length(&insts[..2], &preds[..2], &[10, 100, 200], MatchMode::Exact).unwrap();
        assert_eq!(b.len(), 4);
        assert!(!b[0].empty && !b[1].empty && b[2].empty && b[3].empty);
        assert!(bucket_by_length(&insts, &preds, &[40, 20], MatchMode::Exact).is_err());
    }

    #[test]
    fn report_and_csv() {
        let (insts, preds) = instances();
        let a = EvalReport::new(
            "with",
            &insts,
            &preds,
            &DEFAULT_BUCKET_EDGES,
            MatchMode::Exact,
        )
        .unwrap();
        let gold: Vec<_> = insts.iter().map(|i| i.triples.clone()).collect();
        let b = EvalReport::new(
            "gold",
            &insts,
            &gold,
            &DEFAULT_BUCKET_EDGES,
            MatchMode::Exact,
        )
        .unwrap();
        assert_eq!(b.global.f1, 1.0);
        assert!(a.to_text().contains(">=60"));
        let csv = plot_csv(&[a, b]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bucket_midpoint,with,gold");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("10,"));
        assert!(lines[4].starts_with("70,"));
    }
}
