use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Source attends bidirectionally to itself, target attends to the
    /// source and causally to itself; source never sees the target.
    PartialCausal,
    /// Every position attends everywhere.
    AllZero,
}

/// Additive attention mask with entries 0 (attend) or -inf (blocked).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    matrix: Tensor,
    allowed: Vec<bool>,
    kind: MaskKind,
}

fn check_len(len: usize, max_len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Length { len, max: max_len });
    }
    if len > max_len {
        return Err(Error::Length { len, max: max_len });
    }
    Ok(())
}

impl AttentionMask {
    fn from_predicate(len: usize, kind: MaskKind, allow: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                allowed.push(allow(i, j));
            }
        }
        let data = allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        AttentionMask {
            matrix: Tensor::new(vec![len, len], data).expect("square mask"),
            allowed,
            kind,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The L×L matrix of 0 / -inf entries.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len() + col]
    }

    pub(crate) fn allowed(&self) -> &[bool] {
        &self.allowed
    }
}

/// Mask for a `source_len`-token source followed by `target_len` target
/// tokens.
pub fn build_partial_causal_mask(
    source_len: usize,
    target_len: usize,
    max_len: usize,
) -> Result<AttentionMask> {
    if source_len == 0 {
        return Err(Error::Precondition(
            "partial causal mask needs a non-empty source".into(),
        ));
    }
    let len = source_len + target_len;
    check_len(len, max_len)?;
    Ok(AttentionMask::from_predicate(
        len,
        MaskKind::PartialCausal,
        |i, j| j < source_len || (i >= source_len && j <= i),
    ))
}

pub fn build_all_zero_mask(len: usize, max_len: usize) -> Result<AttentionMask> {
    check_len(len, max_len)?;
    Ok(AttentionMask::from_predicate(
        len,
        MaskKind::AllZero,
        |_, _| true,
    ))
}
