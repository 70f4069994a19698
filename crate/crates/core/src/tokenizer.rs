//! Greedy longest-match WordPiece tokenization.
//!
//! Text is lowercased and split on whitespace; each word is segmented into
//! the longest vocabulary prefix followed by `##`-prefixed continuation
//! pieces. A maximal run of characters that no piece covers becomes a single
//! `[UNK]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const S2S_SEQ: &str = "[S2S_SEQ]";

/// Reserved tokens in id order; `[PAD]` is always id 0.
pub const SPECIAL_TOKENS: [&str; 7] = [PAD, UNK, CLS, SEP, SOS, EOS, S2S_SEQ];

const CONTINUATION: &str = "##";

pub fn is_special(token: &str) -> bool {
    SPECIAL_TOKENS.contains(&token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Token ids with their surface pieces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub pieces: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    /// Builds a vocabulary that encodes `corpus` without `[UNK]`.
    ///
    /// Single-character pieces needed for full coverage are mandatory; the
    /// remaining capacity is filled with whole words by descending frequency,
    /// ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Precondition("vocabulary corpus is empty".into()));
        }
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Capacity {
                max_size,
                required: SPECIAL_TOKENS.len() + 1,
            });
        }

        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for word in line.as_ref().to_lowercase().split_whitespace() {
                *counts.entry(word.to_string()).or_default() += 1;
            }
        }

        let mut chars: Vec<String> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for word in counts.keys() {
            for (i, ch) in word.chars().enumerate() {
                let piece = if i == 0 {
                    ch.to_string()
                } else {
                    format!("{CONTINUATION}{ch}")
                };
                if seen.insert(piece.clone()) {
                    chars.push(piece);
                }
            }
        }
        chars.sort();

        let required = SPECIAL_TOKENS.len() + chars.len();
        if required > max_size {
            return Err(Error::Capacity { max_size, required });
        }

        let mut words: Vec<(&String, &usize)> =
            counts.iter().filter(|(w, _)| !seen.contains(*w)).collect();
        words.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars);
        let room = max_size - tokens.len();
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w.clone()));
        Vocabulary::from_tokens(tokens)
    }

    /// Wraps an explicit token list; id = position.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token `{tok}`")));
            }
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if token_to_id.get(*special).is_none() {
                return Err(Error::Vocabulary(format!(
                    "missing special token {special}"
                )));
            }
            if i == 0 && token_to_id[*special] != 0 {
                return Err(Error::Vocabulary("[PAD] must have id 0".into()));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// One token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_text(&text)
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_text(&self) -> String {
        let mut s = String::new();
        for tok in &self.id_to_token {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn special(&self, tok: &str) -> usize {
        self.token_to_id[tok]
    }

    pub fn pad_id(&self) -> usize {
        self.special(PAD)
    }
    pub fn unk_id(&self) -> usize {
        self.special(UNK)
    }
    pub fn cls_id(&self) -> usize {
        self.special(CLS)
    }
    pub fn sep_id(&self) -> usize {
        self.special(SEP)
    }
    pub fn sos_id(&self) -> usize {
        self.special(SOS)
    }
    pub fn eos_id(&self) -> usize {
        self.special(EOS)
    }
    pub fn s2s_seq_id(&self) -> usize {
        self.special(S2S_SEQ)
    }

    pub fn is_special_id(&self, id: usize) -> bool {
        self.token(id).is_some_and(is_special)
    }

    /// Segments plain text. Never emits `[CLS]`/`[SEP]`; callers compose.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for word in text.to_lowercase().split_whitespace() {
            self.encode_word(word, &mut seq);
        }
        seq
    }

    /// Like [`encode`](Self::encode), but whitespace-separated special token
    /// strings (e.g. `[S2S_SEQ]`) map straight to their ids.
    pub fn encode_with_specials(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for word in text.split_whitespace() {
            if is_special(word) {
                seq.ids.push(self.special(word));
                seq.pieces.push(word.to_string());
            } else {
                self.encode_word(&word.to_lowercase(), &mut seq);
            }
        }
        seq
    }

    fn encode_word(&self, word: &str, seq: &mut TokenSequence) {
        // byte offsets of char boundaries, plus the end
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain([word.len()])
            .collect();
        let nchars = bounds.len() - 1;
        let mut start = 0;
        let mut in_unk = false;
        while start < nchars {
            let mut matched = None;
            for end in (start + 1..=nchars).rev() {
                let body = &word[bounds[start]..bounds[end]];
                let candidate = if start == 0 {
                    body.to_string()
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(&id) = self.token_to_id.get(&candidate) {
                    if !is_special(&candidate) {
                        matched = Some((end, id, candidate));
                        break;
                    }
                }
            }
            match matched {
                Some((end, id, piece)) => {
                    seq.ids.push(id);
                    seq.pieces.push(piece);
                    start = end;
                    in_unk = false;
                }
                None => {
                    if !in_unk {
                        seq.ids.push(self.unk_id());
                        seq.pieces.push(UNK.to_string());
                        in_unk = true;
                    }
                    start += 1;
                }
            }
        }
    }

    /// Inverse of [`encode`](Self::encode): `##` pieces attach to their
    /// predecessor, everything else is space separated.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::Vocabulary(format!("id {id} out of range ({} tokens)", self.len()))
            })?;
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() && !rest.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    let _ = write!(out, "{tok}");
                }
            }
        }
        Ok(out)
    }
}

/// Lowercased, single-space-joined form of `text`.
pub fn normalize_whitespace(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}
