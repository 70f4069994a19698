use super::mask::{build_all_zero_mask, build_partial_causal_mask, AttentionMask, MaskKind};
use crate::codec::{linearize, Triple};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

/// Class index of a contrastive example: 0 = faithful, 1 = corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContrastiveLabel {
    Positive,
    Negative,
}

impl ContrastiveLabel {
    pub fn class(self) -> usize {
        match self {
            ContrastiveLabel::Positive => 0,
            ContrastiveLabel::Negative => 1,
        }
    }
}

/// One model input: `[CLS] source [SEP]` followed by a target span.
///
/// For generation the target is the linearized triple list starting with
/// `[SOS]`; for contrastive classification it is a single `h r t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInstance {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub source_len: usize,
    pub target_len: usize,
    pub mask_kind: MaskKind,
    pub label: Option<ContrastiveLabel>,
}

impl EncodedInstance {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn mask(&self, max_len: usize) -> Result<AttentionMask> {
        match self.mask_kind {
            MaskKind::PartialCausal => {
                build_partial_causal_mask(self.source_len, self.target_len, max_len)
            }
            MaskKind::AllZero => build_all_zero_mask(self.len(), max_len),
        }
    }

    pub fn target_ids(&self) -> &[usize] {
        &self.token_ids[self.source_len..]
    }
}

/// Turns text and triples into [`EncodedInstance`]s for one vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct InstanceEncoder<'v> {
    vocab: &'v Vocabulary,
    max_len: usize,
}

impl<'v> InstanceEncoder<'v> {
    pub fn new(vocab: &'v Vocabulary, max_len: usize) -> Self {
        InstanceEncoder { vocab, max_len }
    }

    pub fn vocab(&self) -> &'v Vocabulary {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `[CLS] tokens(text) [SEP]`
    pub fn source_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![self.vocab.cls_id()];
        ids.extend(self.vocab.encode(text).ids);
        ids.push(self.vocab.sep_id());
        ids
    }

    /// Word-level tokens of the sentence, as used for corruption spans.
    pub fn sentence_words(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    fn assemble(
        &self,
        source: Vec<usize>,
        target: Vec<usize>,
        kind: MaskKind,
        label: Option<ContrastiveLabel>,
    ) -> Result<EncodedInstance> {
        let len = source.len() + target.len();
        if len > self.max_len {
            return Err(Error::Length {
                len,
                max: self.max_len,
            });
        }
        let source_len = source.len();
        let target_len = target.len();
        let mut segment_ids = vec![0; source_len];
        segment_ids.extend(std::iter::repeat(1).take(target_len));
        let mut token_ids = source;
        token_ids.extend(target);
        Ok(EncodedInstance {
            token_ids,
            segment_ids,
            source_len,
            target_len,
            mask_kind: kind,
            label,
        })
    }

    /// Generation layout: `[CLS] x [SEP] [SOS] h r t [S2S_SEQ] … [EOS]`.
    pub fn generation(&self, text: &str, triples: &[Triple]) -> Result<EncodedInstance> {
        let target = self
            .vocab
            .encode_with_specials(&linearize(triples).join(" "))
            .ids;
        self.assemble(self.source_ids(text), target, MaskKind::PartialCausal, None)
    }

    /// Classification layout: `[CLS] x [SEP] h r t` under an all-zero mask.
    pub fn contrastive(
        &self,
        text: &str,
        triple: &Triple,
        label: ContrastiveLabel,
    ) -> Result<EncodedInstance> {
        let target = self.vocab.encode(&triple.tokens().join(" ")).ids;
        if target.is_empty() {
            return Err(Error::Layout(
                "contrastive triple encodes to nothing".into(),
            ));
        }
        self.assemble(
            self.source_ids(text),
            target,
            MaskKind::AllZero,
            Some(label),
        )
    }

    /// Decoding prompt: the source followed by `[SOS]`.
    pub fn prompt(&self, text: &str) -> Result<EncodedInstance> {
        self.assemble(
            self.source_ids(text),
            vec![self.vocab.sos_id()],
            MaskKind::PartialCausal,
            None,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["alice works at acme and lives in paris"], 200).unwrap()
    }

    #[test]
    fn generation_layout() {
        let v = vocab();
        let enc = InstanceEncoder::new(&v, 64);
        let inst = enc
            .generation(
                "alice works at acme",
                &[Triple::new("alice", "works at", "acme")],
            )
            .unwrap();
        assert_eq!(inst.token_ids[0], v.cls_id());
        assert_eq!(inst.token_ids[inst.source_len - 1], v.sep_id());
        assert_eq!(inst.target_ids()[0], v.sos_id());
        assert_eq!(*inst.token_ids.last().unwrap(), v.eos_id());
        assert_eq!(inst.source_len, 6);
        assert_eq!(inst.target_len, 6);
        // segments switch exactly once
        let switches = inst.segment_ids.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(switches, 1);
        assert_eq!(inst.mask_kind, MaskKind::PartialCausal);
    }

    #[test]
    fn contrastive_layout_has_single_triple() {
        let v = vocab();
        let enc = InstanceEncoder::new(&v, 64);
        let inst = enc
            .contrastive(
                "alice works at acme",
                &Triple::new("alice", "works at", "acme"),
                ContrastiveLabel::Negative,
            )
            .unwrap();
        assert_eq!(inst.target_len, 4);
        assert!(!inst.token_ids.contains(&v.s2s_seq_id()));
        assert_eq!(inst.label.unwrap().class(), 1);
        assert_eq!(inst.mask_kind, MaskKind::AllZero);
    }

    #[test]
    fn overflow_is_a_length_error() {
        let v = vocab();
        let enc = InstanceEncoder::new(&v, 5);
        assert!(matches!(
            enc.prompt("alice works at acme"),
            Err(Error::Length { .. })
        ));
    }
}
