//! Context-extended source/target sequences with their masks.
//!
//! Source layout:
//!
//! ```text
//! [scene] ([speaker tag] ctx_1 </t>) ... ([speaker tag] ctx_c </t>) current </s>
//! ```
//!
//! Target layout:
//!
//! ```text
//! <s> (ctx_1 </t>) ... (ctx_c </t>) current </s>
//! ```
//!
//! Context sentences are the `c` utterances preceding the current one in the
//! same document, oldest first. On the source side everything before the
//! current sentence is flagged as context (and hidden from cross-attention);
//! on the target side only the current sentence and its EOS are supervised.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::DialogueDocument;
use crate::tokenizer::{self, scene_token_id, Side, TokenId, Vocabulary, BOS, DIFF_SPEAKER, EOS, SAME_SPEAKER, SEP};

pub const MAX_CONTEXT: usize = 4;
pub const AGNOSTIC_MAX_LEN: usize = 128;
pub const CONTEXT_MAX_LEN: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("utterance index {index} out of range for document {doc_id} ({len} utterances)")]
    IndexOutOfRange { doc_id: String, index: usize, len: usize },
    #[error("invalid context configuration: {0}")]
    InvalidConfig(String),
    #[error("context override {requested} exceeds configured maximum {max}")]
    OverrideTooLarge { requested: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub k_src: usize,
    pub k_tgt: usize,
    pub speaker_tags: bool,
    pub scene_tag: bool,
    pub dynamic: bool,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig::new(0, 0)
    }
}

impl ContextConfig {
    /// Plain configuration with the default length limits (256 tokens for
    /// context-aware models, 128 otherwise).
    pub fn new(k_src: usize, k_tgt: usize) -> Self {
        let max_len = if k_src > 0 || k_tgt > 0 {
            CONTEXT_MAX_LEN
        } else {
            AGNOSTIC_MAX_LEN
        };
        ContextConfig {
            k_src,
            k_tgt,
            speaker_tags: false,
            scene_tag: false,
            dynamic: false,
            max_src_len: max_len,
            max_tgt_len: max_len,
        }
    }

    /// Parses a model family name: `1-1`, `k-1` (source context of k-1
    /// sentences) or `1-k` (target context).
    pub fn from_family(name: &str) -> Result<Self, ContextError> {
        let bad = || ContextError::InvalidConfig(format!("bad model family {name:?} (expected e.g. 1-1, 3-1, 1-2)"));
        let (a, b) = name.split_once('-').ok_or_else(bad)?;
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || b == 0 || (a > 1 && b > 1) {
            return Err(bad());
        }
        let cfg = ContextConfig::new(a - 1, b - 1);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn family(&self) -> String {
        format!("{}-{}", self.k_src + 1, self.k_tgt + 1)
    }

    pub fn with_speaker_tags(mut self, on: bool) -> Self {
        self.speaker_tags = on;
        self
    }

    pub fn with_scene_tag(mut self, on: bool) -> Self {
        self.scene_tag = on;
        self
    }

    pub fn with_dynamic(mut self, on: bool) -> Self {
        self.dynamic = on;
        self
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let bad = |m: &str| Err(ContextError::InvalidConfig(m.to_string()));
        if self.k_src > MAX_CONTEXT || self.k_tgt > MAX_CONTEXT {
            return bad("context sizes must lie in 0..=4");
        }
        if self.k_src > 0 && self.k_tgt > 0 {
            return bad("source and target context cannot be combined");
        }
        if self.speaker_tags && self.k_src == 0 {
            return bad("speaker tags need source context (k_src >= 1)");
        }
        if self.max_src_len < 3 || self.max_tgt_len < 3 {
            return bad("maximum lengths must be at least 3");
        }
        Ok(())
    }

    /// Largest context size on whichever side is active.
    pub fn k_max(&self) -> usize {
        self.k_src.max(self.k_tgt)
    }

    pub fn context_side(&self) -> Side {
        if self.k_tgt > 0 {
            Side::Target
        } else {
            Side::Source
        }
    }
}

impl fmt::Display for ContextConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family())?;
        if self.speaker_tags {
            write!(f, "+speaker")?;
        }
        if self.scene_tag {
            write!(f, "+scene")?;
        }
        if self.dynamic {
            write!(f, " (dynamic)")?;
        }
        Ok(())
    }
}

impl FromStr for ContextConfig {
    type Err = ContextError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContextConfig::from_family(s)
    }
}

/// Context sentences actually used after document-start clipping and length
/// truncation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsedContext {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInput {
    pub ids: Vec<TokenId>,
    /// True on context positions (scene tag, speaker tags, context tokens, separators).
    pub context_mask: Vec<bool>,
    pub used: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetOutput {
    pub ids: Vec<TokenId>,
    /// True on the current sentence and its EOS.
    pub loss_mask: Vec<bool>,
    pub used: usize,
    pub truncated: bool,
}

impl TargetOutput {
    /// The forced decoder prefix: BOS plus the target context block.
    pub fn context_prefix(&self) -> &[TokenId] {
        let first = self.loss_mask.iter().position(|&m| m).unwrap_or(self.ids.len());
        &self.ids[..first]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub doc_id: String,
    pub index: usize,
    pub source_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub src_context_mask: Vec<bool>,
    pub tgt_loss_mask: Vec<bool>,
    pub used_ctx: UsedContext,
    pub truncated: bool,
}

impl EncodedExample {
    /// Decoder input (target without its last token).
    pub fn decoder_input(&self) -> &[TokenId] {
        &self.target_ids[..self.target_ids.len() - 1]
    }

    /// Gold tokens predicted at each decoder position.
    pub fn gold(&self) -> &[TokenId] {
        &self.target_ids[1..]
    }

    /// Loss mask aligned with [`gold`](Self::gold).
    pub fn gold_mask(&self) -> &[bool] {
        &self.tgt_loss_mask[1..]
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.source_ids.len() != self.src_context_mask.len() || self.target_ids.len() != self.tgt_loss_mask.len() {
            return Err("mask length mismatch".into());
        }
        if self.src_context_mask.iter().all(|&m| m) {
            return Err("no visible source position".into());
        }
        if !self.tgt_loss_mask.iter().any(|&m| m) {
            return Err("no supervised target position".into());
        }
        if self.target_ids.len() < 2 {
            return Err("target shorter than BOS + EOS".into());
        }
        Ok(())
    }
}

fn check_index(doc: &DialogueDocument, i: usize) -> Result<(), ContextError> {
    if i >= doc.utterances.len() {
        return Err(ContextError::IndexOutOfRange {
            doc_id: doc.doc_id.clone(),
            index: i,
            len: doc.utterances.len(),
        });
    }
    Ok(())
}

fn resolve_context(requested: Option<usize>, max: usize) -> Result<usize, ContextError> {
    match requested {
        Some(c) if c > max => Err(ContextError::OverrideTooLarge { requested: c, max }),
        Some(c) => Ok(c),
        None => Ok(max),
    }
}

/// Source input for utterance `i`. `ctx_override` replaces `cfg.k_src` (it
/// may not exceed it).
pub fn build_source_input(
    doc: &DialogueDocument,
    i: usize,
    cfg: &ContextConfig,
    vocab: &Vocabulary,
    ctx_override: Option<usize>,
) -> Result<SourceInput, ContextError> {
    check_index(doc, i)?;
    let want = resolve_context(ctx_override, cfg.k_src)?;
    let mut c = want.min(i);
    let current = &doc.utterances[i];
    let encode = |j: usize| tokenizer::encode(&doc.utterances[j].source_text, vocab, Side::Source).ids;
    let mut cur = encode(i);
    let context: Vec<(TokenId, Vec<TokenId>)> = (i - c..i)
        .map(|j| {
            let tag = if doc.utterances[j].speaker_id == current.speaker_id {
                SAME_SPEAKER
            } else {
                DIFF_SPEAKER
            };
            (tag, encode(j))
        })
        .collect();

    let tag_len = usize::from(cfg.speaker_tags);
    let mut scene_len = usize::from(cfg.scene_tag);
    let block_len = |(_, s): &(TokenId, Vec<TokenId>)| tag_len + s.len() + 1;
    let mut start = 0;
    let mut ctx_len: usize = context.iter().map(block_len).sum();
    while c > 0 && scene_len + ctx_len + cur.len() + 1 > cfg.max_src_len {
        ctx_len -= block_len(&context[start]);
        start += 1;
        c -= 1;
    }
    let mut truncated = false;
    if scene_len + cur.len() + 1 > cfg.max_src_len {
        if cfg.max_src_len < 2 + scene_len {
            scene_len = 0;
        }
        cur.truncate(cfg.max_src_len - 1 - scene_len);
        truncated = true;
        log::warn!(
            "{} #{i}: source sentence truncated to {} tokens",
            doc.doc_id,
            cur.len()
        );
    }

    let mut ids = Vec::with_capacity(scene_len + ctx_len + cur.len() + 1);
    if scene_len > 0 {
        ids.push(scene_token_id(doc.scene));
    }
    for (tag, sentence) in &context[start..] {
        if cfg.speaker_tags {
            ids.push(*tag);
        }
        ids.extend_from_slice(sentence);
        ids.push(SEP);
    }
    let n_context = ids.len();
    ids.extend_from_slice(&cur);
    ids.push(EOS);
    let mut context_mask = vec![true; n_context];
    context_mask.resize(ids.len(), false);
    Ok(SourceInput {
        ids,
        context_mask,
        used: c,
        truncated,
    })
}

/// Target sequence for utterance `i` with gold target-side context.
pub fn build_target_output(
    doc: &DialogueDocument,
    i: usize,
    cfg: &ContextConfig,
    vocab: &Vocabulary,
    ctx_override: Option<usize>,
) -> Result<TargetOutput, ContextError> {
    check_index(doc, i)?;
    let want = resolve_context(ctx_override, cfg.k_tgt)?;
    let mut c = want.min(i);
    let encode = |j: usize| tokenizer::encode(&doc.utterances[j].target_text, vocab, Side::Target).ids;
    let mut cur = encode(i);
    let context: Vec<Vec<TokenId>> = (i - c..i).map(encode).collect();

    let mut start = 0;
    let mut ctx_len: usize = context.iter().map(|s| s.len() + 1).sum();
    while c > 0 && 1 + ctx_len + cur.len() + 1 > cfg.max_tgt_len {
        ctx_len -= context[start].len() + 1;
        start += 1;
        c -= 1;
    }
    let mut truncated = false;
    if cur.len() + 2 > cfg.max_tgt_len {
        cur.truncate(cfg.max_tgt_len - 2);
        truncated = true;
        log::warn!(
            "{} #{i}: target sentence truncated to {} tokens",
            doc.doc_id,
            cur.len()
        );
    }

    let mut ids = vec![BOS];
    for sentence in &context[start..] {
        ids.extend_from_slice(sentence);
        ids.push(SEP);
    }
    let n_prefix = ids.len();
    ids.extend_from_slice(&cur);
    ids.push(EOS);
    let mut loss_mask = vec![false; n_prefix];
    loss_mask.resize(ids.len(), true);
    Ok(TargetOutput {
        ids,
        loss_mask,
        used: c,
        truncated,
    })
}

/// Builds the full example for utterance `i`. `context` overrides the
/// configured size on the active side.
pub fn build_example(
    doc: &DialogueDocument,
    i: usize,
    cfg: &ContextConfig,
    vocab: &Vocabulary,
    context: Option<usize>,
) -> Result<EncodedExample, ContextError> {
    let (src_override, tgt_override) = match cfg.context_side() {
        Side::Source => (context, None),
        Side::Target => (None, context),
    };
    let source = build_source_input(doc, i, cfg, vocab, src_override)?;
    let target = build_target_output(doc, i, cfg, vocab, tgt_override)?;
    Ok(EncodedExample {
        doc_id: doc.doc_id.clone(),
        index: i,
        source_ids: source.ids,
        target_ids: target.ids,
        src_context_mask: source.context_mask,
        tgt_loss_mask: target.loss_mask,
        used_ctx: UsedContext {
            source: source.used,
            target: target.used,
        },
        truncated: source.truncated || target.truncated,
    })
}

/// Uniform draw from `0..=k_max`.
pub fn sample_context_size<R: Rng + ?Sized>(rng: &mut R, k_max: usize) -> usize {
    rng.gen_range(0..=k_max)
}

/// Rng stream for one example, derived from `(seed, epoch, doc_id, index)`
/// so that draws do not depend on iteration order.
pub fn example_rng(seed: u64, epoch: u64, doc_id: &str, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update((doc_id.len() as u64).to_le_bytes());
    h.update(doc_id.as_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// One example per utterance, in split order. With `cfg.dynamic` each
/// example's context size is drawn uniformly from `0..=k_max` using
/// [`example_rng`].
pub fn make_dataset(
    docs: &[DialogueDocument],
    cfg: &ContextConfig,
    vocab: &Vocabulary,
    seed: u64,
    epoch: u64,
) -> Result<Vec<EncodedExample>, ContextError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.len()).sum());
    for doc in docs {
        for i in 0..doc.len() {
            let context = cfg
                .dynamic
                .then(|| sample_context_size(&mut example_rng(seed, epoch, &doc.doc_id, i), cfg.k_max()));
            out.push(build_example(doc, i, cfg, vocab, context)?);
        }
    }
    Ok(out)
}

/// Inspection dump: one JSON record per line.
pub fn dataset_to_jsonl(examples: &[EncodedExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("example serialisation"));
        out.push('\n');
    }
    out
}
