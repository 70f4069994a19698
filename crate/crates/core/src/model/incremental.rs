//! Tape-free inference with cached keys and values.
//!
//! Under the partial causal mask the source rows never look at the target,
//! and each target row sees the source plus earlier targets. So the source
//! is encoded once and every generated token costs a single-row pass.

use super::{log_softmax, CgtModel, LayerParams};
use crate::tensor::kernels::{
    dot, gelu, layer_norm_rows, masked_softmax_rows, matmul_acc, matmul_nt_acc,
};
use crate::tensor::LAYER_NORM_EPS;
use crate::{Error, Result};

/// Per-layer key/value rows for every position consumed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    source_len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }
}

fn project(x: &[f64], w: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    matmul_acc(x, w, &mut out, rows, d_in, d_out);
    out
}

impl CgtModel {
    fn embed_rows(&self, token_ids: &[usize], start: usize, segment: usize) -> Result<Vec<f64>> {
        let d = self.config.hidden_size;
        let tok = self.params.get(self.ids.token_embedding);
        let pos = self.params.get(self.ids.position_embedding);
        let seg = self.params.get(self.ids.segment_embedding);
        let mut out = Vec::with_capacity(token_ids.len() * d);
        for (i, &id) in token_ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::Vocabulary(format!("token id {id} out of range")));
            }
            let (t, p, s) = (tok.row(id), pos.row(start + i), seg.row(segment));
            out.extend((0..d).map(|c| t[c] + p[c] + s[c]));
        }
        Ok(out)
    }

    /// Pushes `x` (rows × d) through one block, appending its keys and
    /// values to the cache. New rows attend to every cached row and to every
    /// new row, so call it with the whole source or with one target row.
    fn block_rows(
        &self,
        layer: &LayerParams,
        x: &[f64],
        keys: &mut Vec<f64>,
        values: &mut Vec<f64>,
    ) -> Result<Vec<f64>> {
        let d = self.config.hidden_size;
        let f = self.config.ffn_size;
        let heads = self.config.num_heads;
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let rows = x.len() / d;
        let p = |id| self.params.get(id).data();

        let q = project(x, p(layer.query), rows, d, d);
        keys.extend(project(x, p(layer.key), rows, d, d));
        values.extend(project(x, p(layer.value), rows, d, d));
        let total = keys.len() / d;

        let mut ctx = vec![0.0; rows * d];
        let allowed = vec![true; rows * total];
        let mut scores = vec![0.0; rows * total];
        for h in 0..heads {
            let off = h * dk;
            for r in 0..rows {
                let qr = &q[r * d + off..r * d + off + dk];
                for j in 0..total {
                    scores[r * total + j] = dot(qr, &keys[j * d + off..j * d + off + dk]) * scale;
                }
            }
            let probs = masked_softmax_rows(&scores, &allowed, rows, total)?;
            for r in 0..rows {
                let out = &mut ctx[r * d + off..r * d + off + dk];
                for j in 0..total {
                    let pj = probs[r * total + j];
                    for (o, v) in out.iter_mut().zip(&values[j * d + off..j * d + off + dk]) {
                        *o += pj * v;
                    }
                }
            }
        }
        let mut res = x.to_vec();
        matmul_acc(&ctx, p(layer.attn_out), &mut res, rows, d, d);
        let (h1, _, _) = layer_norm_rows(
            &res,
            p(layer.attn_norm_gain),
            p(layer.attn_norm_bias),
            LAYER_NORM_EPS,
        );

        let b1 = p(layer.ffn_in_bias);
        let mut hidden: Vec<f64> = (0..rows).flat_map(|_| b1.iter().copied()).collect();
        matmul_acc(&h1, p(layer.ffn_in), &mut hidden, rows, d, f);
        for v in hidden.iter_mut() {
            *v = gelu(*v).0;
        }
        let b2 = p(layer.ffn_out_bias);
        let mut res = h1.clone();
        for r in 0..rows {
            for c in 0..d {
                res[r * d + c] += b2[c];
            }
        }
        matmul_acc(&hidden, p(layer.ffn_out), &mut res, rows, f, d);
        let (out, _, _) = layer_norm_rows(
            &res,
            p(layer.ffn_norm_gain),
            p(layer.ffn_norm_bias),
            LAYER_NORM_EPS,
        );
        Ok(out)
    }

    fn consume(
        &self,
        state: &mut DecoderState,
        token_ids: &[usize],
        segment: usize,
    ) -> Result<Vec<f64>> {
        let end = state.len + token_ids.len();
        if end > self.config.max_sequence_length {
            return Err(Error::Length {
                len: end,
                max: self.config.max_sequence_length,
            });
        }
        let mut h = self.embed_rows(token_ids, state.len, segment)?;
        for (l, layer) in self.ids.layers.iter().enumerate() {
            h = self.block_rows(layer, &h, &mut state.keys[l], &mut state.values[l])?;
        }
        state.len = end;
        Ok(h)
    }

    fn lm_log_probs(&self, row: &[f64]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let mut logits = self.params.get(self.ids.lm_bias).data().to_vec();
        matmul_nt_acc(
            row,
            self.params.get(self.ids.token_embedding).data(),
            &mut logits,
            1,
            row.len(),
            v,
        );
        log_softmax(&logits)
    }

    /// Encodes the source (`[CLS] … [SEP]`) and caches its keys and values.
    pub fn start_decoding(&self, source_ids: &[usize]) -> Result<DecoderState> {
        if source_ids.is_empty() {
            return Err(Error::Precondition(
                "decoding needs a non-empty source".into(),
            ));
        }
        let layers = self.ids.layers.len();
        let mut state = DecoderState {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            source_len: source_ids.len(),
        };
        self.consume(&mut state, source_ids, 0)?;
        Ok(state)
    }

    /// Appends one target token and returns log-probabilities of the next.
    pub fn decode_step(&self, state: &mut DecoderState, token_id: usize) -> Result<Vec<f64>> {
        let h = self.consume(state, &[token_id], 1)?;
        Ok(self.lm_log_probs(&h))
    }
}
