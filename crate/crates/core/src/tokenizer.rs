//! Joint source/target vocabulary with atomic special tokens.
//!
//! Ids 0..=12 are reserved (padding, sentence boundaries, unknown, the context
//! separator, the two speaker-turn tags and the six scene tags). Next come the
//! atomic entries found in the corpus (the honorific expressions and the
//! synthetic politeness markers), then ordinary tokens by descending frequency.
//! The source side is split on whitespace; the target side is split either on
//! whitespace or into characters with greedy longest-match over atomic entries.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusSet, SceneTag};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;
pub const SAME_SPEAKER: TokenId = 5;
pub const DIFF_SPEAKER: TokenId = 6;
pub const SCENE_BASE: TokenId = 7;
pub const RESERVED_COUNT: usize = 13;

const RESERVED_SURFACES: [&str; 7] = ["<pad>", "<s>", "</s>", "<unk>", "</t>", "<SameSpeak>", "<DiffSpeak>"];

/// Honorific expressions treated as single tokens, in id order.
pub const HONORIFIC_EXPRESSIONS: [&str; 19] = [
    "です",
    "でした",
    "ます",
    "ました",
    "ません",
    "ましょう",
    "でしょう",
    "ください",
    "ございます",
    "おります",
    "致します",
    "ご覧",
    "なります",
    "伺",
    "頂く",
    "頂き",
    "頂いて",
    "下さい",
    "申し上げます",
];

/// Politeness marker of the synthetic corpus; counts as an honorific.
pub const SYNTHETIC_POLITE: &str = "+masu";
pub const SYNTHETIC_PLAIN: &str = "+da";

fn atomic_entries() -> impl Iterator<Item = &'static str> {
    HONORIFIC_EXPRESSIONS
        .iter()
        .copied()
        .chain([SYNTHETIC_POLITE, SYNTHETIC_PLAIN])
}

pub fn scene_token_id(scene: SceneTag) -> TokenId {
    SCENE_BASE + scene.ordinal() as TokenId
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("vocabulary file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Word,
    Character,
}

impl FromStr for TargetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(TargetMode::Word),
            "character" | "char" => Ok(TargetMode::Character),
            _ => Err(format!("unknown target mode {s:?} (expected word|character)")),
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::Word => "word",
            TargetMode::Character => "character",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub side: Side,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Honorific ids present in a vocabulary. The synthetic marker is kept apart
/// from the listed expressions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HonorificIds {
    pub expressions: BTreeSet<TokenId>,
    pub synthetic: Option<TokenId>,
}

impl HonorificIds {
    /// Listed expressions, plus the synthetic marker when `include_synthetic`.
    pub fn ids(&self, include_synthetic: bool) -> BTreeSet<TokenId> {
        let mut ids = self.expressions.clone();
        if include_synthetic {
            ids.extend(self.synthetic);
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    /// Installed atomic entries, longest first.
    atomic: Vec<String>,
    target_mode: TargetMode,
    min_freq: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, target_mode: TargetMode, min_freq: usize) -> Result<Self, String> {
        if tokens.len() < RESERVED_COUNT || tokens[..RESERVED_COUNT] != reserved_surfaces()[..] {
            return Err("reserved token layout mismatch".into());
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(format!("token {t:?} appears twice"));
            }
        }
        let mut atomic: Vec<String> = atomic_entries()
            .filter(|a| ids.contains_key(*a))
            .map(str::to_string)
            .collect();
        atomic.sort_by_key(|a| std::cmp::Reverse(a.chars().count()));
        Ok(Vocabulary {
            tokens,
            ids,
            atomic,
            target_mode,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_mode(&self) -> TargetMode {
        self.target_mode
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn atomic_entries(&self) -> &[String] {
        &self.atomic
    }

    /// One token per line; line 0 is a header recording build parameters.
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "# ctxnmt-vocab v1 min_freq={} target_mode={} size={}\n",
            self.min_freq,
            self.target_mode,
            self.len()
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str, origin: &str) -> Result<Self, TokenizerError> {
        let bad = |reason: String| TokenizerError::BadFile {
            path: origin.to_string(),
            reason,
        };
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        if !header.starts_with("# ctxnmt-vocab v1") {
            return Err(bad("missing header line".into()));
        }
        let mut min_freq = 1;
        let mut target_mode = TargetMode::Character;
        for field in header.split_whitespace() {
            if let Some(v) = field.strip_prefix("min_freq=") {
                min_freq = v.parse().map_err(|_| bad(format!("bad min_freq {v:?}")))?;
            } else if let Some(v) = field.strip_prefix("target_mode=") {
                target_mode = v.parse().map_err(bad)?;
            }
        }
        let mut tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop();
        }
        Vocabulary::from_tokens(tokens, target_mode, min_freq).map_err(bad)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocabulary::from_file_string(&text, &path.display().to_string())
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn reserved_surfaces() -> Vec<String> {
    RESERVED_SURFACES
        .iter()
        .map(|s| s.to_string())
        .chain(SceneTag::ALL.iter().map(|s| s.token()))
        .collect()
}

/// Splits target text in character mode: longest atomic match at each
/// position, otherwise a single character.
fn split_characters<'a>(text: &'a str, atomic: &[&str]) -> Vec<&'a str> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let len = atomic
            .iter()
            .filter(|a| rest.starts_with(**a))
            .map(|a| a.len())
            .max()
            .unwrap_or(c.len_utf8());
        pieces.push(&rest[..len]);
        rest = &rest[len..];
    }
    pieces
}

fn split_text<'a>(text: &'a str, side: Side, mode: TargetMode, atomic: &[&str]) -> Vec<&'a str> {
    match (side, mode) {
        (Side::Source, _) | (Side::Target, TargetMode::Word) => text.split_whitespace().collect(),
        (Side::Target, TargetMode::Character) => split_characters(text, atomic),
    }
}

/// Builds the joint vocabulary from the training split.
pub fn build_vocab(corpus: &CorpusSet, min_freq: usize, target_mode: TargetMode) -> Result<Vocabulary, TokenizerError> {
    if corpus.train.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let all_atomic: Vec<&str> = atomic_entries().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for u in corpus.train.iter().flat_map(|d| &d.utterances) {
        for piece in split_text(&u.source_text, Side::Source, target_mode, &all_atomic)
            .into_iter()
            .chain(split_text(&u.target_text, Side::Target, target_mode, &all_atomic))
        {
            *counts.entry(piece).or_default() += 1;
        }
    }

    let mut tokens = reserved_surfaces();
    let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
    for a in &all_atomic {
        if counts.contains_key(a) {
            tokens.push(a.to_string());
        }
    }
    let mut rest: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !reserved.contains(*t) && !all_atomic.contains(t))
        .collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    tokens.extend(rest.into_iter().map(|(t, _)| t.to_string()));

    Ok(Vocabulary::from_tokens(tokens, target_mode, min_freq).expect("freshly built vocabulary is consistent"))
}

/// Tokenises `text`; unknown pieces map to UNK. No BOS/EOS is added.
pub fn encode(text: &str, vocab: &Vocabulary, side: Side) -> TokenSequence {
    let atomic: Vec<&str> = vocab.atomic.iter().map(String::as_str).collect();
    let ids = split_text(text, side, vocab.target_mode, &atomic)
        .into_iter()
        .map(|piece| vocab.id(piece).unwrap_or(UNK))
        .collect();
    TokenSequence { ids, side }
}

/// Renders ids back to text. PAD is dropped; other specials keep their
/// literal surface.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut pieces = Vec::with_capacity(seq.ids.len());
    for &id in &seq.ids {
        if id == PAD {
            continue;
        }
        let token = vocab.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: vocab.len() })?;
        pieces.push(token);
    }
    let joiner = match (seq.side, vocab.target_mode) {
        (Side::Target, TargetMode::Character) => "",
        _ => " ",
    };
    Ok(pieces.join(joiner))
}

pub fn honorific_ids(vocab: &Vocabulary) -> HonorificIds {
    HonorificIds {
        expressions: HONORIFIC_EXPRESSIONS.iter().filter_map(|h| vocab.id(h)).collect(),
        synthetic: vocab.id(SYNTHETIC_POLITE),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueDocument, Provenance, Utterance};
    use proptest::prelude::*;

    fn corpus_of(pairs: &[(&str, &str)]) -> CorpusSet {
        let doc = DialogueDocument {
            doc_id: "d".into(),
            scene: SceneTag::Meeting,
            utterances: pairs
                .iter()
                .enumerate()
                .map(|(index, (s, t))| Utterance {
                    index,
                    speaker_id: "A".into(),
                    source_text: s.to_string(),
                    target_text: t.to_string(),
                })
                .collect(),
        };
        CorpusSet {
            train: vec![doc],
            dev: vec![],
            test: vec![],
            provenance: Provenance::File { path: "mem".into() },
        }
    }

    fn ja_vocab() -> Vocabulary {
        let corpus = corpus_of(&[
            ("I will visit tomorrow .", "明日伺います。"),
            ("Thank you very much .", "ありがとうございます。"),
            ("Please look .", "ご覧ください。"),
        ]);
        build_vocab(&corpus, 1, TargetMode::Character).unwrap()
    }

    #[test]
    fn reserved_layout_is_fixed() {
        let v = ja_vocab();
        assert_eq!(v.id("<pad>"), Some(0));
        assert_eq!(v.id("</t>"), Some(SEP));
        assert_eq!(v.id("<SameSpeak>"), Some(SAME_SPEAKER));
        assert_eq!(v.id("<DiffSpeak>"), Some(DIFF_SPEAKER));
        assert_eq!(v.id("<face-to-face conversation>"), Some(7));
        assert_eq!(v.id("<presentation>"), Some(12));
        for s in SceneTag::ALL {
            assert_eq!(v.token(scene_token_id(s)), Some(s.token().as_str()));
        }
    }

    #[test]
    fn honorific_expressions_are_atomic() {
        let v = ja_vocab();
        let seq = encode("ありがとうございます", &v, Side::Target);
        let gozaimasu = v.id("ございます").unwrap();
        assert_eq!(*seq.ids.last().unwrap(), gozaimasu);
        // atomic entries come right after the reserved block, in list order
        assert_eq!(v.id("ます"), Some(RESERVED_COUNT as TokenId));
        assert!(v.id("ます").unwrap() < v.id("ください").unwrap());
    }

    #[test]
    fn longest_match_on_ukagaimasu() {
        let v = ja_vocab();
        let seq = encode("伺います", &v, Side::Target);
        let surface: Vec<&str> = seq.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(surface, ["伺", "い", "ます"]);
        assert_eq!(decode(&seq, &v).unwrap(), "伺います");
    }

    #[test]
    fn empty_text_and_padding() {
        let v = ja_vocab();
        assert!(encode("", &v, Side::Target).is_empty());
        let pads = TokenSequence {
            ids: vec![PAD, PAD],
            side: Side::Target,
        };
        assert_eq!(decode(&pads, &v).unwrap(), "");
        let sep = TokenSequence {
            ids: vec![SEP],
            side: Side::Source,
        };
        assert_eq!(decode(&sep, &v).unwrap(), "</t>");
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = ja_vocab();
        let seq = TokenSequence {
            ids: vec![v.len() as TokenId],
            side: Side::Source,
        };
        assert!(matches!(decode(&seq, &v), Err(TokenizerError::IdOutOfRange { .. })));
    }

    #[test]
    fn source_side_round_trips_and_oov_is_unk() {
        let v = ja_vocab();
        let seq = encode("Thank you very much .", &v, Side::Source);
        assert_eq!(decode(&seq, &v).unwrap(), "Thank you very much .");
        assert_eq!(encode("zebra", &v, Side::Source).ids, vec![UNK]);
    }

    #[test]
    fn min_freq_folds_rare_tokens() {
        let corpus = corpus_of(&[("a a b", "x"), ("a c", "x")]);
        let v = build_vocab(&corpus, 2, TargetMode::Word).unwrap();
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(encode("b", &v, Side::Source).ids, vec![UNK]);
    }

    #[test]
    fn frequency_order_with_lexicographic_ties() {
        let corpus = corpus_of(&[("b b a c", "z")]);
        let v = build_vocab(&corpus, 1, TargetMode::Word).unwrap();
        let base = RESERVED_COUNT as TokenId;
        assert_eq!(v.id("b"), Some(base));
        assert_eq!(v.id("a"), Some(base + 1));
        assert_eq!(v.id("c"), Some(base + 2));
        assert_eq!(v.id("z"), Some(base + 3));
    }

    #[test]
    fn builds_are_deterministic_and_files_round_trip() {
        let a = ja_vocab();
        let b = ja_vocab();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let back = Vocabulary::from_file_string(&a.to_file_string(), "mem").unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut corpus = corpus_of(&[("a", "b")]);
        corpus.train.clear();
        assert!(matches!(
            build_vocab(&corpus, 1, TargetMode::Word),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn honorific_sets() {
        let all: Vec<String> = HONORIFIC_EXPRESSIONS.iter().map(|h| format!("{h}。")).collect();
        let pairs: Vec<(&str, &str)> = all.iter().map(|t| ("x", t.as_str())).collect();
        let v = build_vocab(&corpus_of(&pairs), 1, TargetMode::Character).unwrap();
        let h = honorific_ids(&v);
        assert_eq!(h.expressions.len(), 19);
        assert_eq!(h.synthetic, None);

        let english = build_vocab(&corpus_of(&[("hello", "hi there")]), 1, TargetMode::Word).unwrap();
        assert!(honorific_ids(&english).ids(true).is_empty());

        let synth = build_vocab(&corpus_of(&[("w1 w2", "t1 t2 +masu"), ("w3", "t3 +da")]), 1, TargetMode::Word).unwrap();
        let h = honorific_ids(&synth);
        assert!(h.expressions.is_empty());
        assert_eq!(h.ids(true), BTreeSet::from([synth.id("+masu").unwrap()]));
        assert!(h.ids(false).is_empty());
    }

    fn piece() -> impl Strategy<Value = String> {
        prop_oneof![
            prop::sample::select(HONORIFIC_EXPRESSIONS.to_vec()).prop_map(str::to_string),
            prop::sample::select(vec!["い", "ま", "す", "で", "し", "た", "明", "日", "。"]).prop_map(str::to_string),
        ]
    }

    proptest! {
        #[test]
        fn encoding_is_prefix_stable(a in prop::collection::vec(piece(), 0..8), b in prop::collection::vec(piece(), 0..8)) {
            let v = ja_vocab();
            let a: String = a.concat();
            let b: String = b.concat();
            let ea = encode(&a, &v, Side::Target);
            let joined = format!("{a}{b}");
            let eab = encode(&joined, &v, Side::Target);
            // only meaningful when `a` ends on a piece boundary of `a+b`
            let atomic: Vec<&str> = v.atomic_entries().iter().map(String::as_str).collect();
            let pieces = split_characters(&joined, &atomic);
            let mut offset = 0;
            let mut boundary = a.is_empty();
            for p in pieces {
                offset += p.len();
                if offset == a.len() { boundary = true; }
            }
            if boundary {
                prop_assert_eq!(&eab.ids[..ea.len()], &ea.ids[..]);
            }
        }

        #[test]
        fn output_pieces_are_longest_matches(parts in prop::collection::vec(piece(), 0..10)) {
            let v = ja_vocab();
            let text: String = parts.concat();
            let atomic: Vec<&str> = v.atomic_entries().iter().map(String::as_str).collect();
            let mut offset = 0;
            for p in split_characters(&text, &atomic) {
                let rest = &text[offset..];
                for a in &atomic {
                    if rest.starts_with(a) {
                        prop_assert!(a.len() <= p.len(), "{} shorter than matching {}", p, a);
                    }
                }
                offset += p.len();
            }
        }

        #[test]
        fn in_vocab_text_round_trips(parts in prop::collection::vec(piece(), 0..10)) {
            let v = ja_vocab();
            let text: String = parts.concat();
            let seq = encode(&text, &v, Side::Target);
            if !seq.ids.contains(&UNK) {
                prop_assert_eq!(decode(&seq, &v).unwrap(), text);
            }
        }
    }
}
