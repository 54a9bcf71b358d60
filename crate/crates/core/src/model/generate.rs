use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::transformer::{log_softmax_rows, source_origin, Transformer};
use super::ModelError;
use crate::tokenizer::{TokenId, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Prepared {
    memory: Array2<f64>,
    visible: Vec<bool>,
}

impl Transformer {
    fn prepare(&self, source_ids: &[TokenId], src_context_mask: &[bool]) -> Result<Prepared, ModelError> {
        let pad: Vec<bool> = source_ids.iter().map(|&t| t == PAD).collect();
        if src_context_mask.len() != source_ids.len() {
            return Err(ModelError::MaskLength {
                expected: source_ids.len(),
                got: src_context_mask.len(),
            });
        }
        let memory = self.encode_from(source_ids, &pad, source_origin(src_context_mask))?;
        let visible = self.cross_visibility(&pad, src_context_mask)?;
        Ok(Prepared { memory, visible })
    }

    /// `origin` is the index of the last forced-prefix token.
    fn next_log_probs(&self, prep: &Prepared, seq: &[TokenId], origin: usize) -> Result<Array2<f64>, ModelError> {
        let logits = self.decode_from(&prep.memory, &prep.visible, seq, origin)?;
        let last = logits.slice(ndarray::s![logits.nrows() - 1.., ..]).to_owned();
        Ok(log_softmax_rows(&last))
    }

    fn greedy_from(&self, prep: &Prepared, prefix: &[TokenId], max_len: usize) -> Result<Vec<TokenId>, ModelError> {
        let mut seq = prefix.to_vec();
        while seq.len() < max_len {
            let lp = self.next_log_probs(prep, &seq, prefix.len() - 1)?;
            let next = argmax(lp.row(0)) as TokenId;
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq.split_off(prefix.len()))
    }

    fn beam_from(&self, prep: &Prepared, width: usize, max_len: usize) -> Result<Vec<TokenId>, ModelError> {
        let width = width.max(1);
        let mut beams: Vec<(Vec<TokenId>, f64)> = vec![(vec![BOS], 0.0)];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
        let normalised = |seq: &[TokenId], score: f64| score / (seq.len() - 1) as f64;
        while !beams.is_empty() && finished.len() < width {
            if beams[0].0.len() >= max_len {
                for (seq, score) in beams.drain(..) {
                    let s = normalised(&seq, score);
                    finished.push((seq, s));
                }
                break;
            }
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
            for (b, (seq, score)) in beams.iter().enumerate() {
                let lp = self.next_log_probs(prep, seq, 0)?;
                candidates.extend(lp.row(0).iter().enumerate().map(|(v, &l)| (b, v, score + l)));
            }
            // Stable: ties keep beam order, then token order.
            candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores"));
            let mut next = Vec::with_capacity(width);
            for &(b, v, score) in candidates.iter().take(width - finished.len()) {
                let mut seq = beams[b].0.clone();
                seq.push(v as TokenId);
                if v as TokenId == EOS {
                    let s = normalised(&seq, score);
                    finished.push((seq, s));
                } else {
                    next.push((seq, score));
                }
            }
            beams = next;
        }
        let mut best = 0;
        for (i, (_, s)) in finished.iter().enumerate() {
            if *s > finished[best].1 {
                best = i;
            }
        }
        Ok(finished.swap_remove(best).0.split_off(1))
    }

    /// Decodes from BOS. `max_len` bounds the decoder sequence including
    /// BOS, so at most `max_len - 1` tokens are returned (EOS included when
    /// produced).
    pub fn generate(
        &self,
        source_ids: &[TokenId],
        src_context_mask: &[bool],
        max_len: usize,
        strategy: Strategy,
    ) -> Result<Vec<TokenId>, ModelError> {
        if max_len < 2 {
            return Err(ModelError::PrefixTooLong { prefix: 1, max_len });
        }
        let prep = self.prepare(source_ids, src_context_mask)?;
        match strategy {
            Strategy::Greedy => self.greedy_from(&prep, &[BOS], max_len),
            Strategy::Beam(w) => self.beam_from(&prep, w, max_len),
        }
    }

    /// Greedy decoding after force-feeding `prefix` (BOS plus gold target
    /// context). Returns only the generated tokens.
    pub fn forced_prefix_generate(
        &self,
        source_ids: &[TokenId],
        src_context_mask: &[bool],
        prefix: &[TokenId],
        max_len: usize,
    ) -> Result<Vec<TokenId>, ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::Empty);
        }
        if prefix.len() >= max_len {
            return Err(ModelError::PrefixTooLong {
                prefix: prefix.len(),
                max_len,
            });
        }
        let prep = self.prepare(source_ids, src_context_mask)?;
        self.greedy_from(&prep, prefix, max_len)
    }
}
