//! Synthetic dialogue corpus whose sentence-final politeness marker is fixed
//! by extra-sentential context only.
//!
//! Source sentences are 3–7 words from `w1..wV`; the target is the word-wise
//! image `wi -> ti` followed by one marker token. The marker is `+masu` when
//! the scene is meeting or presentation, or when the speaker differs from the
//! previous utterance's speaker, and `+da` otherwise.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, CorpusSet, DialogueDocument, Provenance, SceneTag, Split, Utterance};

pub const MIN_SENTENCE_WORDS: usize = 3;
pub const MAX_SENTENCE_WORDS: usize = 7;
const SPEAKER_NAMES: [&str; 3] = ["A", "B", "C"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Polite,
    Plain,
}

impl Marker {
    pub fn token(self) -> &'static str {
        match self {
            Marker::Polite => crate::tokenizer::SYNTHETIC_POLITE,
            Marker::Plain => crate::tokenizer::SYNTHETIC_PLAIN,
        }
    }
}

/// The marker rule: polite in meeting/presentation scenes or right after a
/// change of speaker.
pub fn politeness_marker(scene: SceneTag, previous_speaker: Option<&str>, speaker: &str) -> Marker {
    let forcing_scene = matches!(scene, SceneTag::Meeting | SceneTag::Presentation);
    let turn_change = previous_speaker.is_some_and(|p| p != speaker);
    if forcing_scene || turn_change {
        Marker::Polite
    } else {
        Marker::Plain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub utterances_per_doc: usize,
    /// Number of source words `w1..wV`.
    pub source_vocab: usize,
    /// Allowed speaker counts per document; each must be 2 or 3.
    pub speakers_per_doc: Vec<usize>,
    /// Probability that an utterance is spoken by someone other than the
    /// previous speaker.
    pub speaker_switch_prob: f64,
    pub scene_weights: BTreeMap<SceneTag, f64>,
}

impl Default for SynthSpec {
    /// 200/20/20 documents of 10 utterances. Forcing scenes are rare (4%) and
    /// the switch rate is chosen so that about half of all markers are polite.
    fn default() -> Self {
        let scene_weights = [
            (SceneTag::FaceToFace, 0.30),
            (SceneTag::PhoneCall, 0.24),
            (SceneTag::GeneralChatting, 0.24),
            (SceneTag::Training, 0.18),
            (SceneTag::Meeting, 0.02),
            (SceneTag::Presentation, 0.02),
        ]
        .into_iter()
        .collect();
        SynthSpec {
            train_docs: 200,
            dev_docs: 20,
            test_docs: 20,
            utterances_per_doc: 10,
            source_vocab: 24,
            speakers_per_doc: vec![2, 3],
            speaker_switch_prob: 0.55,
            scene_weights,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.source_vocab < 8 {
            return bad("source_vocab must be at least 8");
        }
        if self.utterances_per_doc == 0 {
            return bad("utterances_per_doc must be positive");
        }
        if self.speakers_per_doc.is_empty() || self.speakers_per_doc.iter().any(|&n| !(2..=3).contains(&n)) {
            return bad("speakers_per_doc must be a non-empty subset of {2, 3}");
        }
        if !(0.0..=1.0).contains(&self.speaker_switch_prob) {
            return bad("speaker_switch_prob must lie in [0, 1]");
        }
        if self.scene_weights.values().any(|w| !w.is_finite() || *w < 0.0)
            || self.scene_weights.values().sum::<f64>() <= 0.0
        {
            return bad("scene_weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

/// Builds one synthetic document from explicit speakers and word-index bodies.
pub fn synthetic_document(doc_id: &str, scene: SceneTag, turns: &[(&str, Vec<usize>)]) -> DialogueDocument {
    let mut utterances = Vec::with_capacity(turns.len());
    let mut previous: Option<&str> = None;
    for (index, (speaker, body)) in turns.iter().enumerate() {
        let source: Vec<String> = body.iter().map(|w| format!("w{w}")).collect();
        let mut target: Vec<String> = body.iter().map(|w| format!("t{w}")).collect();
        target.push(politeness_marker(scene, previous, speaker).token().to_string());
        utterances.push(Utterance {
            index,
            speaker_id: speaker.to_string(),
            source_text: source.join(" "),
            target_text: target.join(" "),
        });
        previous = Some(speaker);
    }
    DialogueDocument {
        doc_id: doc_id.to_string(),
        scene,
        utterances,
    }
}

/// Deterministic synthetic corpus for `(spec, seed)`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<CorpusSet, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<(SceneTag, f64)> = spec.scene_weights.iter().map(|(&s, &w)| (s, w)).collect();
    let scene_dist = WeightedIndex::new(scenes.iter().map(|s| s.1))
        .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;

    let mut corpus = CorpusSet {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        provenance: Provenance::Synthetic {
            spec: spec.clone(),
            seed,
        },
    };
    for (split, count) in [
        (Split::Train, spec.train_docs),
        (Split::Dev, spec.dev_docs),
        (Split::Test, spec.test_docs),
    ] {
        for d in 0..count {
            let scene = scenes[scene_dist.sample(&mut rng)].0;
            let n_speakers = *spec.speakers_per_doc.choose(&mut rng).unwrap();
            let speakers = &SPEAKER_NAMES[..n_speakers];
            let mut current = rng.gen_range(0..n_speakers);
            let mut turns = Vec::with_capacity(spec.utterances_per_doc);
            for i in 0..spec.utterances_per_doc {
                if i > 0 && rng.gen_bool(spec.speaker_switch_prob) {
                    let offset = rng.gen_range(1..n_speakers);
                    current = (current + offset) % n_speakers;
                }
                let len = rng.gen_range(MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS);
                let body: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=spec.source_vocab)).collect();
                turns.push((speakers[current], body));
            }
            let doc_id = format!("synth-{split}-{d:04}");
            corpus.split_mut(split).push(synthetic_document(&doc_id, scene, &turns));
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;

    fn marker_of(u: &Utterance) -> &str {
        u.target_text.rsplit(' ').next().unwrap()
    }

    #[test]
    fn meeting_scene_is_always_polite() {
        let doc = synthetic_document(
            "m",
            SceneTag::Meeting,
            &[("A", vec![1, 2, 3]), ("A", vec![4, 5, 6]), ("A", vec![7, 8, 1])],
        );
        assert!(doc.utterances.iter().all(|u| marker_of(u) == "+masu"));
    }

    #[test]
    fn alternating_speakers_in_chat_scene() {
        let turns: Vec<(&str, Vec<usize>)> = (0..6)
            .map(|i| (if i % 2 == 0 { "A" } else { "B" }, vec![1, 2, 3]))
            .collect();
        let doc = synthetic_document("g", SceneTag::GeneralChatting, &turns);
        assert_eq!(marker_of(&doc.utterances[0]), "+da");
        for u in &doc.utterances[1..] {
            assert_eq!(marker_of(u), "+masu");
        }
    }

    #[test]
    fn target_is_the_wordwise_image() {
        let doc = synthetic_document("x", SceneTag::Training, &[("A", vec![3, 10, 2])]);
        assert_eq!(doc.utterances[0].source_text, "w3 w10 w2");
        assert_eq!(doc.utterances[0].target_text, "t3 t10 t2 +da");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate_synthetic_corpus(&spec, 11).unwrap();
        let b = generate_synthetic_corpus(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&spec, 12).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn stats_match_the_requested_shape() {
        let spec = SynthSpec {
            train_docs: 10,
            dev_docs: 0,
            test_docs: 0,
            utterances_per_doc: 8,
            ..SynthSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec, 0).unwrap();
        let stats = corpus_stats(&corpus);
        assert_eq!((stats.train.sentences, stats.train.scenarios), (80, 10));
        assert_eq!(stats.train.scenes.values().sum::<usize>(), 10);
        assert_eq!(stats.dev.sentences, 0);
    }

    #[test]
    fn every_marker_follows_the_rule() {
        let corpus = generate_synthetic_corpus(&SynthSpec::default(), 5).unwrap();
        for doc in corpus.documents() {
            let mut prev: Option<&str> = None;
            for u in &doc.utterances {
                let words: Vec<&str> = u.source_text.split(' ').collect();
                assert!((MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS).contains(&words.len()));
                let expected = politeness_marker(doc.scene, prev, &u.speaker_id).token();
                assert_eq!(marker_of(u), expected, "{} #{}", doc.doc_id, u.index);
                prev = Some(&u.speaker_id);
            }
        }
    }

    #[test]
    fn default_mix_is_roughly_balanced() {
        let corpus = generate_synthetic_corpus(&SynthSpec::default(), 1).unwrap();
        let (polite, total) = corpus.train.iter().flat_map(|d| &d.utterances).fold((0, 0), |(p, t), u| {
            (p + usize::from(marker_of(u) == "+masu"), t + 1)
        });
        let rate = polite as f64 / total as f64;
        assert!((0.4..0.6).contains(&rate), "polite rate {rate}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let small = SynthSpec {
            source_vocab: 7,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_corpus(&small, 0).is_err());
        let crowd = SynthSpec {
            speakers_per_doc: vec![4],
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_corpus(&crowd, 0).is_err());
    }
}
