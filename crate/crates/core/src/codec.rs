//! Conversion between triple sets and flat target sequences.
//!
//! A triple list is written as
//! `[SOS] h¹ r¹ t¹ [S2S_SEQ] h² r² t² … [EOS]` with every field split into
//! whitespace tokens. Reading it back relies on the closed relation
//! inventory: inside each segment the longest inventory relation with
//! non-empty text on both sides marks the head/tail boundary.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{is_special, normalize_whitespace, EOS, S2S_SEQ, SOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    /// Lowercased, whitespace-normalized copy used for matching.
    pub fn normalized(&self) -> Triple {
        Triple {
            head: normalize_whitespace(&self.head),
            relation: normalize_whitespace(&self.relation),
            tail: normalize_whitespace(&self.tail),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        [&self.head, &self.relation, &self.tail]
            .iter()
            .all(|f| !f.trim().is_empty())
    }

    /// `h r t` as whitespace tokens.
    pub fn tokens(&self) -> Vec<String> {
        [&self.head, &self.relation, &self.tail]
            .iter()
            .flat_map(|f| f.split_whitespace().map(str::to_string))
            .collect()
    }
}

impl std::fmt::Display for Triple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// The closed set of relation strings, in precedence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationInventory {
    relations: Vec<String>,
    tokenized: Vec<Vec<String>>,
}

impl RelationInventory {
    pub fn new<S: AsRef<str>>(relations: &[S]) -> Result<Self> {
        if relations.is_empty() {
            return Err(Error::Config("relation inventory is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut rels = Vec::with_capacity(relations.len());
        let mut tokenized = Vec::with_capacity(relations.len());
        for r in relations {
            let norm = normalize_whitespace(r.as_ref());
            if norm.is_empty() {
                return Err(Error::Config(
                    "relation inventory contains an empty relation".into(),
                ));
            }
            let toks: Vec<String> = norm.split(' ').map(str::to_string).collect();
            if toks
                .iter()
                .any(|t| is_special(t) || t.eq_ignore_ascii_case(S2S_SEQ))
            {
                return Err(Error::Config(format!(
                    "relation `{norm}` contains a reserved token"
                )));
            }
            if !seen.insert(norm.clone()) {
                return Err(Error::Config(format!(
                    "relation `{norm}` is listed twice and cannot be told apart"
                )));
            }
            rels.push(norm);
            tokenized.push(toks);
        }
        Ok(RelationInventory {
            relations: rels,
            tokenized,
        })
    }

    /// One relation per line; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        RelationInventory::new(&lines)
    }

    pub fn to_file_text(&self) -> String {
        self.relations.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn contains(&self, relation: &str) -> bool {
        let norm = normalize_whitespace(relation);
        self.relations.iter().any(|r| *r == norm)
    }
}

/// Flat token sequence for a triple list, with `[SOS]`/`[EOS]` and
/// `[S2S_SEQ]` separators.
pub fn linearize(triples: &[Triple]) -> Vec<String> {
    let mut out = vec![SOS.to_string()];
    for (i, t) in triples.iter().enumerate() {
        if i > 0 {
            out.push(S2S_SEQ.to_string());
        }
        out.extend(t.tokens());
    }
    out.push(EOS.to_string());
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutput {
    pub triples: Vec<Triple>,
    pub rejected: Vec<Vec<String>>,
}

/// Recovers triples from a generated token sequence. Never fails: segments
/// that do not read as `head relation tail` are returned in `rejected`.
pub fn parse<S: AsRef<str>>(tokens: &[S], inventory: &RelationInventory) -> ParseOutput {
    let mut toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if toks.first() == Some(&SOS) {
        toks.remove(0);
    }
    if let Some(end) = toks.iter().position(|&t| t == EOS) {
        toks.truncate(end);
    }

    let mut out = ParseOutput::default();
    if toks.is_empty() {
        return out;
    }
    let mut seen = HashSet::new();
    for segment in toks.split(|&t| t == S2S_SEQ) {
        match parse_segment(segment, inventory) {
            Some(triple) => {
                if seen.insert(triple.clone()) {
                    out.triples.push(triple);
                }
            }
            None => out
                .rejected
                .push(segment.iter().map(|s| s.to_string()).collect()),
        }
    }
    out
}

fn parse_segment(segment: &[&str], inventory: &RelationInventory) -> Option<Triple> {
    if segment.is_empty() || segment.iter().any(|t| is_special(t)) {
        return None;
    }
    // (length, start, inventory index): longest, then leftmost, then precedence
    let mut best: Option<(usize, usize, usize)> = None;
    for (ri, rel) in inventory.tokenized.iter().enumerate() {
        let len = rel.len();
        if len + 2 > segment.len() {
            continue;
        }
        for start in 1..=segment.len() - len - 1 {
            if segment[start..start + len]
                .iter()
                .zip(rel)
                .all(|(a, b)| *a == b)
            {
                let better = match best {
                    None => true,
                    Some((bl, bs, bi)) => {
                        len > bl || (len == bl && (start < bs || (start == bs && ri < bi)))
                    }
                };
                if better {
                    best = Some((len, start, ri));
                }
                break;
            }
        }
    }
    let (len, start, ri) = best?;
    Some(Triple {
        head: segment[..start].join(" "),
        relation: inventory.relations[ri].clone(),
        tail: segment[start + len..].join(" "),
    })
}

/// The gold triples of an instance, each as its own positive example.
pub fn decompose(triples: &[Triple]) -> Vec<Triple> {
    triples.to_vec()
}

/// Which entity a corruption replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

const CORRUPTION_ATTEMPTS: usize = 64;

/// Builds a negative by replacing the head or the tail (chosen uniformly)
/// with a random span of 1–3 sentence tokens. The result never equals any
/// triple in `gold`; the relation is never touched.
pub fn corrupt<R: Rng + ?Sized>(
    positive: &Triple,
    sentence: &[String],
    gold: &[Triple],
    rng: &mut R,
) -> Result<Triple> {
    corrupt_with_side(positive, sentence, gold, rng).map(|(t, _)| t)
}

pub fn corrupt_with_side<R: Rng + ?Sized>(
    positive: &Triple,
    sentence: &[String],
    gold: &[Triple],
    rng: &mut R,
) -> Result<(Triple, Side)> {
    if sentence.is_empty() {
        return Err(Error::CorruptionExhausted);
    }
    let gold: HashSet<Triple> = gold
        .iter()
        .chain([positive])
        .map(Triple::normalized)
        .collect();
    let build = |side: Side, span: &[String]| {
        let entity = span.join(" ");
        let mut t = positive.clone();
        match side {
            Side::Head => t.head = entity,
            Side::Tail => t.tail = entity,
        }
        t
    };
    let max_len = sentence.len().min(3);

    for _ in 0..CORRUPTION_ATTEMPTS {
        let side = if rng.gen_bool(0.5) {
            Side::Head
        } else {
            Side::Tail
        };
        let len = rng.gen_range(1..=max_len);
        let start = rng.gen_range(0..=sentence.len() - len);
        let candidate = build(side, &sentence[start..start + len]);
        if !gold.contains(&candidate.normalized()) {
            return Ok((candidate, side));
        }
    }

    // Rejection sampling keeps failing; fall back to the full candidate set.
    let mut pool = Vec::new();
    for side in [Side::Head, Side::Tail] {
        for len in 1..=max_len {
            for start in 0..=sentence.len() - len {
                let candidate = build(side, &sentence[start..start + len]);
                if !gold.contains(&candidate.normalized()) {
                    pool.push((candidate, side));
                }
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::CorruptionExhausted);
    }
    let pick = rng.gen_range(0..pool.len());
    Ok(pool.swap_remove(pick))
}
