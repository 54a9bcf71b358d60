use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{coatt_mask, multi_head, multi_head_backward, AttentionMask, MhaCache};
use super::layers::{
    add_position, dropout, dropout_backward, feed_forward, feed_forward_backward, layer_norm, layer_norm_backward,
    FfnCache, NormCache,
};
use super::params::{Layout, Parameters};
use super::{CrossAttention, Mode, ModelConfig, ModelError};
use crate::contextizer::EncodedExample;
use crate::tokenizer::{TokenId, PAD};

/// One sequence pair of a packed batch.
///
/// Positions are counted from an origin: the first current-sentence token on
/// the source side and the last forced-prefix token (BOS or the final
/// separator) on the target side. Context tokens get negative positions, so
/// the current sentence is encoded the same way whatever the context size.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub source: Vec<TokenId>,
    pub source_pad: Vec<bool>,
    pub source_context: Vec<bool>,
    pub source_origin: usize,
    pub target_input: Vec<TokenId>,
    pub target_origin: usize,
}

/// Index of the first current-sentence token.
pub fn source_origin(src_context_mask: &[bool]) -> usize {
    src_context_mask.iter().position(|&m| !m).unwrap_or(0)
}

impl BatchItem {
    pub fn from_example(ex: &EncodedExample) -> Self {
        BatchItem {
            source: ex.source_ids.clone(),
            source_pad: ex.source_ids.iter().map(|&t| t == PAD).collect(),
            source_context: ex.src_context_mask.clone(),
            source_origin: source_origin(&ex.src_context_mask),
            target_input: ex.decoder_input().to_vec(),
            target_origin: ex.tgt_loss_mask.iter().position(|&m| m).unwrap_or(1) - 1,
        }
    }
}

/// Logits together with decoder cross-attention weights, indexed
/// `[layer][head]` as (target positions x source positions).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Array2<f64>,
    pub cross_attention: Vec<Vec<Array2<f64>>>,
}

struct EncLayerCache {
    norm_attn: NormCache,
    attn: MhaCache,
    drop_attn: Option<Array2<f64>>,
    norm_ffn: NormCache,
    ffn: FfnCache,
    drop_ffn: Option<Array2<f64>>,
}

struct DecLayerCache {
    norm_self: NormCache,
    self_attn: MhaCache,
    drop_self: Option<Array2<f64>>,
    norm_cross: NormCache,
    cross_attn: MhaCache,
    drop_cross: Option<Array2<f64>>,
    norm_ffn: NormCache,
    ffn: FfnCache,
    drop_ffn: Option<Array2<f64>>,
}

struct EncoderCache {
    ids: Vec<TokenId>,
    drop_in: Option<Array2<f64>>,
    layers: Vec<EncLayerCache>,
    norm: NormCache,
}

struct DecoderCache {
    ids: Vec<TokenId>,
    drop_in: Option<Array2<f64>>,
    layers: Vec<DecLayerCache>,
    norm: NormCache,
    output: Array2<f64>,
}

/// Everything the backward pass needs from a packed forward pass.
pub struct BatchCache {
    src_segs: Vec<Range<usize>>,
    tgt_segs: Vec<Range<usize>>,
    encoder: EncoderCache,
    decoder: DecoderCache,
}

impl BatchCache {
    /// Row range of each item inside the packed logits.
    pub fn target_segments(&self) -> &[Range<usize>] {
        &self.tgt_segs
    }
}

fn segments(lengths: impl Iterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: ModelConfig,
    layout: Layout,
    params: Parameters,
}

impl Transformer {
    /// Randomly initialised model; weights are rounded to `f32`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, mut params) = Layout::build(&cfg, Some(&mut rng));
        params.round_to_f32();
        Ok(Transformer { cfg, layout, params })
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_parameters(cfg: ModelConfig, params: Parameters) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, template) = Layout::build::<ChaCha8Rng>(&cfg, None);
        let same = template.names() == params.names()
            && template
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.dim() == b.dim());
        if !same {
            return Err(ModelError::ShapeMismatch);
        }
        Ok(Transformer { cfg, layout, params })
    }

    /// Zero-valued parameter template for `cfg`.
    pub fn parameter_template(cfg: &ModelConfig) -> Parameters {
        Layout::build::<ChaCha8Rng>(cfg, None).1
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Same weights, different cross-attention visibility rule.
    pub fn with_cross_attention(&self, kind: CrossAttention) -> Transformer {
        let mut m = self.clone();
        m.cfg.cross_attention = kind;
        m
    }

    /// Cross-attention key visibility under this model's rule.
    pub fn cross_visibility(&self, pad: &[bool], context: &[bool]) -> Result<Vec<bool>, ModelError> {
        match self.cfg.cross_attention {
            CrossAttention::CoAttMask => coatt_mask(pad, context),
            CrossAttention::Full => {
                if pad.len() != context.len() {
                    return Err(ModelError::MaskLength {
                        expected: pad.len(),
                        got: context.len(),
                    });
                }
                let v: Vec<bool> = pad.iter().map(|&p| !p).collect();
                if !v.iter().any(|&x| x) {
                    return Err(ModelError::NoVisibleKey { row: 0 });
                }
                Ok(v)
            }
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.cfg.max_positions {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.cfg.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[TokenId], segs: &[Range<usize>], origins: &[usize]) -> Array2<f64> {
        let table = self.params.get(self.layout.embed);
        let scale = (self.cfg.d_model as f64).sqrt();
        let mut x = Array2::zeros((ids.len(), self.cfg.d_model));
        for (seg, &origin) in segs.iter().zip(origins) {
            for (pos, r) in seg.clone().enumerate() {
                let mut row = x.row_mut(r);
                row.scaled_add(scale, &table.row(ids[r] as usize));
                add_position(&mut row, pos as i64 - origin as i64);
            }
        }
        x
    }

    fn embed_backward(&self, ids: &[TokenId], dx: &Array2<f64>, g: &mut Parameters) {
        let scale = (self.cfg.d_model as f64).sqrt();
        let table = g.get_mut(self.layout.embed);
        for (r, &id) in ids.iter().enumerate() {
            table.row_mut(id as usize).scaled_add(scale, &dx.row(r));
        }
    }

    fn run_encoder(
        &self,
        ids: Vec<TokenId>,
        segs: &[Range<usize>],
        origins: &[usize],
        masks: &[AttentionMask],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, EncoderCache) {
        let p = &self.params;
        let rate = self.cfg.dropout;
        let mut x = self.embed(&ids, segs, origins);
        let drop_in = dropout(&mut x, rate, rng.as_deref_mut());
        let mut layers = Vec::with_capacity(self.layout.encoder.len());
        for l in &self.layout.encoder {
            let (h, norm_attn) = layer_norm(p, &l.norm_attn, &x);
            let (mut a, attn) = multi_head(p, &l.attn, self.cfg.heads, h, None, segs, segs, masks);
            let drop_attn = dropout(&mut a, rate, rng.as_deref_mut());
            x += &a;
            let (h, norm_ffn) = layer_norm(p, &l.norm_ffn, &x);
            let (mut f, ffn) = feed_forward(p, &l.ffn, h);
            let drop_ffn = dropout(&mut f, rate, rng.as_deref_mut());
            x += &f;
            layers.push(EncLayerCache {
                norm_attn,
                attn,
                drop_attn,
                norm_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (memory, norm) = layer_norm(p, &self.layout.encoder_norm, &x);
        (
            memory,
            EncoderCache {
                ids,
                drop_in,
                layers,
                norm,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn run_decoder(
        &self,
        ids: Vec<TokenId>,
        memory: &Array2<f64>,
        tgt_segs: &[Range<usize>],
        tgt_origins: &[usize],
        src_segs: &[Range<usize>],
        self_masks: &[AttentionMask],
        cross_masks: &[AttentionMask],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, DecoderCache) {
        let p = &self.params;
        let rate = self.cfg.dropout;
        let heads = self.cfg.heads;
        let mut x = self.embed(&ids, tgt_segs, tgt_origins);
        let drop_in = dropout(&mut x, rate, rng.as_deref_mut());
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for l in &self.layout.decoder {
            let (h, norm_self) = layer_norm(p, &l.norm_self, &x);
            let (mut a, self_attn) = multi_head(p, &l.self_attn, heads, h, None, tgt_segs, tgt_segs, self_masks);
            let drop_self = dropout(&mut a, rate, rng.as_deref_mut());
            x += &a;
            let (h, norm_cross) = layer_norm(p, &l.norm_cross, &x);
            let (mut c, cross_attn) =
                multi_head(p, &l.cross_attn, heads, h, Some(memory), tgt_segs, src_segs, cross_masks);
            let drop_cross = dropout(&mut c, rate, rng.as_deref_mut());
            x += &c;
            let (h, norm_ffn) = layer_norm(p, &l.norm_ffn, &x);
            let (mut f, ffn) = feed_forward(p, &l.ffn, h);
            let drop_ffn = dropout(&mut f, rate, rng.as_deref_mut());
            x += &f;
            layers.push(DecLayerCache {
                norm_self,
                self_attn,
                drop_self,
                norm_cross,
                cross_attn,
                drop_cross,
                norm_ffn,
                ffn,
                drop_ffn,
            });
        }
        let (output, norm) = layer_norm(p, &self.layout.decoder_norm, &x);
        let logits = output.dot(&self.params.get(self.layout.embed).t());
        (
            logits,
            DecoderCache {
                ids,
                drop_in,
                layers,
                norm,
                output,
            },
        )
    }

    /// Packed forward pass. Logit rows follow the items' target inputs in
    /// order; see [`BatchCache::target_segments`].
    pub fn forward_batch(&self, items: &[BatchItem], mode: Mode) -> Result<(Array2<f64>, BatchCache), ModelError> {
        if items.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut src_ids = Vec::new();
        let mut tgt_ids = Vec::new();
        let mut enc_masks = Vec::with_capacity(items.len());
        let mut self_masks = Vec::with_capacity(items.len());
        let mut cross_masks = Vec::with_capacity(items.len());
        for it in items {
            self.check_ids(&it.source)?;
            self.check_ids(&it.target_input)?;
            if it.source_pad.len() != it.source.len() {
                return Err(ModelError::MaskLength {
                    expected: it.source.len(),
                    got: it.source_pad.len(),
                });
            }
            let non_pad: Vec<bool> = it.source_pad.iter().map(|&p| !p).collect();
            enc_masks.push(AttentionMask::keys(it.source.len(), &non_pad)?);
            let visible = self.cross_visibility(&it.source_pad, &it.source_context)?;
            cross_masks.push(AttentionMask::keys(it.target_input.len(), &visible)?);
            self_masks.push(AttentionMask::causal(&vec![false; it.target_input.len()])?);
            src_ids.extend_from_slice(&it.source);
            tgt_ids.extend_from_slice(&it.target_input);
        }
        let src_segs = segments(items.iter().map(|it| it.source.len()));
        let tgt_segs = segments(items.iter().map(|it| it.target_input.len()));
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        let src_origins: Vec<usize> = items.iter().map(|it| it.source_origin).collect();
        let tgt_origins: Vec<usize> = items.iter().map(|it| it.target_origin).collect();
        let (memory, encoder) = self.run_encoder(src_ids, &src_segs, &src_origins, &enc_masks, rng.as_mut());
        let (logits, decoder) = self.run_decoder(
            tgt_ids,
            &memory,
            &tgt_segs,
            &tgt_origins,
            &src_segs,
            &self_masks,
            &cross_masks,
            rng.as_mut(),
        );
        Ok((
            logits,
            BatchCache {
                src_segs,
                tgt_segs,
                encoder,
                decoder,
            },
        ))
    }

    /// Gradient of `sum(dlogits * logits)` with respect to every parameter.
    pub fn backward(&self, cache: &BatchCache, dlogits: &Array2<f64>) -> Parameters {
        let p = &self.params;
        let heads = self.cfg.heads;
        let mut g = p.zeros_like();
        let embed = p.get(self.layout.embed);
        let dec = &cache.decoder;
        *g.get_mut(self.layout.embed) += &dlogits.t().dot(&dec.output);
        let dout = dlogits.dot(embed);
        let mut dx = layer_norm_backward(p, &self.layout.decoder_norm, &dec.norm, &dout, &mut g);
        let mut dmemory: Array2<f64> = Array2::zeros((cache.encoder.ids.len(), self.cfg.d_model));
        for (l, c) in self.layout.decoder.iter().zip(&dec.layers).rev() {
            let d = dropout_backward(&dx, &c.drop_ffn);
            let d = feed_forward_backward(p, &l.ffn, &c.ffn, &d, &mut g);
            dx += &layer_norm_backward(p, &l.norm_ffn, &c.norm_ffn, &d, &mut g);

            let d = dropout_backward(&dx, &c.drop_cross);
            let (dq, dkv) = multi_head_backward(
                p,
                &l.cross_attn,
                heads,
                &c.cross_attn,
                &cache.tgt_segs,
                &cache.src_segs,
                &d,
                &mut g,
            );
            dmemory += &dkv.expect("cross-attention yields a memory gradient");
            dx += &layer_norm_backward(p, &l.norm_cross, &c.norm_cross, &dq, &mut g);

            let d = dropout_backward(&dx, &c.drop_self);
            let (dq, _) = multi_head_backward(
                p,
                &l.self_attn,
                heads,
                &c.self_attn,
                &cache.tgt_segs,
                &cache.tgt_segs,
                &d,
                &mut g,
            );
            dx += &layer_norm_backward(p, &l.norm_self, &c.norm_self, &dq, &mut g);
        }
        let dx = dropout_backward(&dx, &dec.drop_in);
        self.embed_backward(&dec.ids, &dx, &mut g);

        let enc = &cache.encoder;
        let mut dx = layer_norm_backward(p, &self.layout.encoder_norm, &enc.norm, &dmemory, &mut g);
        for (l, c) in self.layout.encoder.iter().zip(&enc.layers).rev() {
            let d = dropout_backward(&dx, &c.drop_ffn);
            let d = feed_forward_backward(p, &l.ffn, &c.ffn, &d, &mut g);
            dx += &layer_norm_backward(p, &l.norm_ffn, &c.norm_ffn, &d, &mut g);

            let d = dropout_backward(&dx, &c.drop_attn);
            let (dq, _) = multi_head_backward(
                p,
                &l.attn,
                heads,
                &c.attn,
                &cache.src_segs,
                &cache.src_segs,
                &d,
                &mut g,
            );
            dx += &layer_norm_backward(p, &l.norm_attn, &c.norm_attn, &dq, &mut g);
        }
        let dx = dropout_backward(&dx, &enc.drop_in);
        self.embed_backward(&enc.ids, &dx, &mut g);
        g
    }

    /// Teacher-forced logits for one example, one row per decoder input position.
    pub fn forward(&self, ex: &EncodedExample, mode: Mode) -> Result<Array2<f64>, ModelError> {
        Ok(self.forward_batch(&[BatchItem::from_example(ex)], mode)?.0)
    }

    /// Eval-mode forward that also returns the cross-attention weights.
    pub fn forward_traced(&self, ex: &EncodedExample) -> Result<ForwardTrace, ModelError> {
        let (logits, cache) = self.forward_batch(&[BatchItem::from_example(ex)], Mode::Eval)?;
        let cross_attention = cache
            .decoder
            .layers
            .into_iter()
            .map(|l| l.cross_attn.probs.into_iter().next().expect("one segment"))
            .collect();
        Ok(ForwardTrace {
            logits,
            cross_attention,
        })
    }

    /// Eval-mode encoder states, one row per source position, with positions
    /// counted from the start.
    pub fn encode(&self, source_ids: &[TokenId], pad_mask: &[bool]) -> Result<Array2<f64>, ModelError> {
        self.encode_from(source_ids, pad_mask, 0)
    }

    /// [`encode`](Self::encode) with positions counted from `origin`.
    pub fn encode_from(&self, source_ids: &[TokenId], pad_mask: &[bool], origin: usize) -> Result<Array2<f64>, ModelError> {
        self.check_ids(source_ids)?;
        if pad_mask.len() != source_ids.len() {
            return Err(ModelError::MaskLength {
                expected: source_ids.len(),
                got: pad_mask.len(),
            });
        }
        let non_pad: Vec<bool> = pad_mask.iter().map(|&p| !p).collect();
        let mask = AttentionMask::keys(source_ids.len(), &non_pad)?;
        let whole = 0..source_ids.len();
        Ok(self.run_encoder(source_ids.to_vec(), std::slice::from_ref(&whole), &[origin], &[mask], None).0)
    }

    /// Eval-mode decoder logits given encoder states and cross-attention key
    /// visibility, with target positions counted from the start.
    pub fn decode(&self, memory: &Array2<f64>, key_visible: &[bool], target_input: &[TokenId]) -> Result<Array2<f64>, ModelError> {
        self.decode_from(memory, key_visible, target_input, 0)
    }

    /// [`decode`](Self::decode) with target positions counted from `origin`.
    pub fn decode_from(
        &self,
        memory: &Array2<f64>,
        key_visible: &[bool],
        target_input: &[TokenId],
        origin: usize,
    ) -> Result<Array2<f64>, ModelError> {
        self.check_ids(target_input)?;
        if key_visible.len() != memory.nrows() {
            return Err(ModelError::MaskLength {
                expected: memory.nrows(),
                got: key_visible.len(),
            });
        }
        let n = target_input.len();
        let cross = AttentionMask::keys(n, key_visible)?;
        let causal = AttentionMask::causal(&vec![false; n])?;
        let (tgt, src) = (0..n, 0..memory.nrows());
        let (tgt_segs, src_segs) = (std::slice::from_ref(&tgt), std::slice::from_ref(&src));
        Ok(self
            .run_decoder(target_input.to_vec(), memory, tgt_segs, &[origin], src_segs, &[causal], &[cross], None)
            .0)
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
