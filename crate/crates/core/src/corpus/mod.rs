//! Document-level parallel dialogue corpora.
//!
//! A corpus is a set of [`DialogueDocument`]s split into train/dev/test. Each
//! document carries a scene tag and an ordered list of utterances with speaker
//! ids, which is everything the contextizer needs to build context-extended
//! inputs. Files use the `bsd-json-v1` layout (see [`load_corpus`]).

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use synth::{
    generate_synthetic_corpus, politeness_marker, synthetic_document, Marker, SynthSpec,
};

/// The only corpus schema understood by [`load_corpus`].
pub const BSD_JSON_V1: &str = "bsd-json-v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported corpus schema {0:?} (expected \"bsd-json-v1\")")]
    Schema(String),
    #[error("document {doc_id}: malformed field `{field}`: {reason}")]
    Malformed {
        doc_id: String,
        field: String,
        reason: String,
    },
    #[error("document {doc_id}: unknown scene tag {tag:?} and no default scene configured")]
    UnknownScene { doc_id: String, tag: String },
    #[error("document {doc_id}: utterance {index} has empty {side} text")]
    EmptyText {
        doc_id: String,
        index: usize,
        side: &'static str,
    },
    #[error("document {doc_id}: non-contiguous indices {indices:?}")]
    NonContiguous { doc_id: String, indices: Vec<i64> },
    #[error("document {doc_id}: has no utterances")]
    EmptyDocument { doc_id: String },
    #[error("duplicate doc_id {doc_id} ({first} and {second})")]
    DuplicateDoc {
        doc_id: String,
        first: Split,
        second: Split,
    },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

/// The six dialogue scenes, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SceneTag {
    FaceToFace,
    PhoneCall,
    GeneralChatting,
    Meeting,
    Training,
    Presentation,
}

impl SceneTag {
    pub const ALL: [SceneTag; 6] = [
        SceneTag::FaceToFace,
        SceneTag::PhoneCall,
        SceneTag::GeneralChatting,
        SceneTag::Meeting,
        SceneTag::Training,
        SceneTag::Presentation,
    ];

    /// Name as written in corpus files.
    pub fn as_str(self) -> &'static str {
        match self {
            SceneTag::FaceToFace => "face-to-face conversation",
            SceneTag::PhoneCall => "phone call",
            SceneTag::GeneralChatting => "general chatting",
            SceneTag::Meeting => "meeting",
            SceneTag::Training => "training",
            SceneTag::Presentation => "presentation",
        }
    }

    /// Surface form of the scene's special token.
    pub fn token(self) -> String {
        format!("<{}>", self.as_str())
    }

    pub fn ordinal(self) -> usize {
        SceneTag::ALL.iter().position(|&s| s == self).unwrap()
    }
}

impl fmt::Display for SceneTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        SceneTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown scene tag {s:?}"))
    }
}

impl From<SceneTag> for String {
    fn from(t: SceneTag) -> String {
        t.as_str().to_string()
    }
}

impl TryFrom<String> for SceneTag {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker_id: String,
    pub source_text: String,
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueDocument {
    pub doc_id: String,
    pub scene: SceneTag,
    pub utterances: Vec<Utterance>,
}

impl DialogueDocument {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Checks the document invariants: at least one utterance, 0-based
    /// contiguous indices, non-empty text on both sides.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.utterances.is_empty() {
            return Err(CorpusError::EmptyDocument {
                doc_id: self.doc_id.clone(),
            });
        }
        if self.utterances.iter().enumerate().any(|(i, u)| u.index != i) {
            return Err(CorpusError::NonContiguous {
                doc_id: self.doc_id.clone(),
                indices: self.utterances.iter().map(|u| u.index as i64).collect(),
            });
        }
        for u in &self.utterances {
            for (side, text) in [("source", &u.source_text), ("target", &u.target_text)] {
                if text.trim().is_empty() {
                    return Err(CorpusError::EmptyText {
                        doc_id: self.doc_id.clone(),
                        index: u.index,
                        side,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    File { path: String },
    Synthetic { spec: SynthSpec, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSet {
    pub train: Vec<DialogueDocument>,
    pub dev: Vec<DialogueDocument>,
    pub test: Vec<DialogueDocument>,
    pub provenance: Provenance,
}

impl CorpusSet {
    pub fn split(&self, split: Split) -> &[DialogueDocument] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<DialogueDocument> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn documents(&self) -> impl Iterator<Item = &DialogueDocument> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn is_empty(&self) -> bool {
        self.documents().next().is_none()
    }

    /// Validates every document and checks doc_id uniqueness across splits.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for split in Split::ALL {
            for doc in self.split(split) {
                doc.validate()?;
                if let Some(&first) = seen.get(doc.doc_id.as_str()) {
                    return Err(CorpusError::DuplicateDoc {
                        doc_id: doc.doc_id.clone(),
                        first,
                        second: split,
                    });
                }
                seen.insert(&doc.doc_id, split);
            }
        }
        Ok(())
    }

    /// Writes `train.json`, `dev.json` and `test.json` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for split in Split::ALL {
            let path = dir.join(format!("{split}.json"));
            fs::write(&path, to_bsd_json(self.split(split)))
                .map_err(|source| CorpusError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Options for [`load_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Scene assigned to documents without a (recognised) scene tag, as in
    /// AMI-style meeting transcripts. `None` makes such documents an error.
    pub default_scene: Option<SceneTag>,
    /// Split that receives the documents when `path` is a single file.
    pub single_file_split: Split,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            default_scene: Some(SceneTag::Meeting),
            single_file_split: Split::Train,
        }
    }
}

/// Loads a corpus in `bsd-json-v1` layout.
///
/// `path` is either a directory holding any of `train.json`, `dev.json`,
/// `test.json`, or a single file whose documents go to
/// `opts.single_file_split`. Each file is a JSON array of documents:
///
/// ```text
/// [{"id": "...", "tag": "phone call",
///   "conversation": [{"no": 0, "speaker": "A", "source": "...", "target": "..."}]}]
/// ```
///
/// `no` may start at 0 or 1 but must be contiguous. Text is NFC-normalised and
/// trimmed.
pub fn load_corpus(path: &Path, schema: &str, opts: &LoadOptions) -> Result<CorpusSet, CorpusError> {
    if schema != BSD_JSON_V1 {
        return Err(CorpusError::Schema(schema.to_string()));
    }
    let mut corpus = CorpusSet {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        provenance: Provenance::File {
            path: path.display().to_string(),
        },
    };
    if path.is_dir() {
        for split in Split::ALL {
            let file = path.join(format!("{split}.json"));
            if file.exists() {
                *corpus.split_mut(split) = load_documents(&file, opts)?;
            }
        }
    } else {
        *corpus.split_mut(opts.single_file_split) = load_documents(path, opts)?;
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Loads the documents of a single `bsd-json-v1` file.
pub fn load_documents(path: &Path, opts: &LoadOptions) -> Result<Vec<DialogueDocument>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_bsd_json(&text, opts).map_err(|e| match e {
        ParseError::Json(source) => CorpusError::Json {
            path: path.to_path_buf(),
            source,
        },
        ParseError::Corpus(e) => e,
    })
}

enum ParseError {
    Json(serde_json::Error),
    Corpus(CorpusError),
}

impl From<CorpusError> for ParseError {
    fn from(e: CorpusError) -> Self {
        ParseError::Corpus(e)
    }
}

fn parse_bsd_json(text: &str, opts: &LoadOptions) -> Result<Vec<DialogueDocument>, ParseError> {
    let value: Value = serde_json::from_str(text).map_err(ParseError::Json)?;
    let Value::Array(records) = value else {
        return Err(malformed("<file>", "<root>", "expected an array of documents").into());
    };
    let mut docs = Vec::with_capacity(records.len());
    let mut ids = BTreeSet::new();
    for (n, record) in records.iter().enumerate() {
        let doc = parse_document(n, record, opts)?;
        if !ids.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDoc {
                doc_id: doc.doc_id,
                first: opts.single_file_split,
                second: opts.single_file_split,
            }
            .into());
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn malformed(doc_id: &str, field: &str, reason: &str) -> CorpusError {
    CorpusError::Malformed {
        doc_id: doc_id.to_string(),
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

fn normalize(s: &str) -> String {
    s.nfc().collect::<String>().trim().to_string()
}

fn parse_document(n: usize, record: &Value, opts: &LoadOptions) -> Result<DialogueDocument, CorpusError> {
    let placeholder = format!("#{n}");
    let obj = record
        .as_object()
        .ok_or_else(|| malformed(&placeholder, "<record>", "expected an object"))?;
    let doc_id = match obj.get("id") {
        Some(Value::String(s)) if !s.trim().is_empty() => normalize(s),
        Some(Value::Number(num)) => num.to_string(),
        Some(_) => return Err(malformed(&placeholder, "id", "expected a non-empty string")),
        None => return Err(malformed(&placeholder, "id", "missing")),
    };
    let scene = match obj.get("tag") {
        Some(Value::String(tag)) => match normalize(tag).parse::<SceneTag>() {
            Ok(scene) => scene,
            Err(_) => opts.default_scene.ok_or_else(|| CorpusError::UnknownScene {
                doc_id: doc_id.clone(),
                tag: tag.clone(),
            })?,
        },
        None | Some(Value::Null) => opts.default_scene.ok_or_else(|| CorpusError::UnknownScene {
            doc_id: doc_id.clone(),
            tag: String::new(),
        })?,
        Some(_) => return Err(malformed(&doc_id, "tag", "expected a string")),
    };
    let conversation = obj
        .get("conversation")
        .ok_or_else(|| malformed(&doc_id, "conversation", "missing"))?
        .as_array()
        .ok_or_else(|| malformed(&doc_id, "conversation", "expected an array"))?;
    if conversation.is_empty() {
        return Err(CorpusError::EmptyDocument { doc_id });
    }

    let mut rows = Vec::with_capacity(conversation.len());
    for (k, turn) in conversation.iter().enumerate() {
        let field = |name: &str| format!("conversation[{k}].{name}");
        let turn = turn
            .as_object()
            .ok_or_else(|| malformed(&doc_id, &format!("conversation[{k}]"), "expected an object"))?;
        let no = turn
            .get("no")
            .and_then(Value::as_i64)
            .ok_or_else(|| malformed(&doc_id, &field("no"), "expected an integer"))?;
        let text = |name: &str| -> Result<String, CorpusError> {
            match turn.get(name) {
                Some(Value::String(s)) => Ok(normalize(s)),
                Some(_) => Err(malformed(&doc_id, &field(name), "expected a string")),
                None => Err(malformed(&doc_id, &field(name), "missing")),
            }
        };
        rows.push((no, text("speaker")?, text("source")?, text("target")?));
    }

    rows.sort_by_key(|r| r.0);
    let indices: Vec<i64> = rows.iter().map(|r| r.0).collect();
    let base = indices[0];
    let contiguous = (base == 0 || base == 1)
        && indices.iter().enumerate().all(|(i, &no)| no == base + i as i64);
    if !contiguous {
        return Err(CorpusError::NonContiguous { doc_id, indices });
    }

    let doc = DialogueDocument {
        doc_id,
        scene,
        utterances: rows
            .into_iter()
            .enumerate()
            .map(|(index, (_, speaker_id, source_text, target_text))| Utterance {
                index,
                speaker_id,
                source_text,
                target_text,
            })
            .collect(),
    };
    doc.validate()?;
    Ok(doc)
}

/// Serialises documents in `bsd-json-v1` layout with 0-based `no` fields.
pub fn to_bsd_json(docs: &[DialogueDocument]) -> String {
    let records: Vec<Value> = docs
        .iter()
        .map(|d| {
            serde_json::json!({
                "id": d.doc_id,
                "tag": d.scene.as_str(),
                "conversation": d.utterances.iter().map(|u| serde_json::json!({
                    "no": u.index,
                    "speaker": u.speaker_id,
                    "source": u.source_text,
                    "target": u.target_text,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&records).expect("corpus serialisation");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub scenarios: usize,
    /// Distinct speakers summed over documents (speaker ids are document-local).
    pub speakers: usize,
    pub scenes: BTreeMap<SceneTag, usize>,
}

impl SplitStats {
    pub fn of(docs: &[DialogueDocument]) -> SplitStats {
        let mut scenes: BTreeMap<SceneTag, usize> = SceneTag::ALL.iter().map(|&s| (s, 0)).collect();
        let mut speakers = 0;
        for doc in docs {
            *scenes.get_mut(&doc.scene).unwrap() += 1;
            speakers += doc
                .utterances
                .iter()
                .map(|u| u.speaker_id.as_str())
                .collect::<BTreeSet<_>>()
                .len();
        }
        SplitStats {
            sentences: docs.iter().map(|d| d.utterances.len()).sum(),
            scenarios: docs.len(),
            speakers,
            scenes,
        }
    }
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sentences, {} scenarios, {} speakers",
            self.sentences, self.scenarios, self.speakers
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
}

pub fn corpus_stats(corpus: &CorpusSet) -> CorpusStats {
    CorpusStats {
        train: SplitStats::of(&corpus.train),
        dev: SplitStats::of(&corpus.dev),
        test: SplitStats::of(&corpus.test),
    }
}
