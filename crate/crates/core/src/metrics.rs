//! Corpus BLEU, CXMI and honorifics P-CXMI, with report files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contextizer::{build_example, ContextConfig, ContextError, EncodedExample, MAX_CONTEXT};
use crate::corpus::DialogueDocument;
use crate::model::{log_softmax_rows, Checkpoint, Mode, ModelError};
use crate::tokenizer::{TokenId, Vocabulary};
use crate::trainer::batch_inputs;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("runs are misaligned at sentence {position}: {reason}")]
    Misaligned { position: usize, reason: String },
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("context size {0} exceeds the supported maximum of 4")]
    ContextTooLarge(usize),
    #[error("cannot parse report: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Gold-token log-probabilities of one sentence (current sentence + EOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceLogProbs {
    pub doc_id: String,
    pub index: usize,
    pub context_used: usize,
    pub token_ids: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

impl SentenceLogProbs {
    pub fn total(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub context_size: usize,
    pub sentences: Vec<SentenceLogProbs>,
}

/// Extracts the natural-log probability of every supervised gold token.
pub fn logprobs_of(
    ckpt: &Checkpoint,
    examples: &[EncodedExample],
    batch_size: usize,
) -> Result<Vec<SentenceLogProbs>, MetricsError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let (items, _, _) = batch_inputs(&refs);
        let (logits, cache) = ckpt.model.forward_batch(&items, Mode::Eval)?;
        let lp = log_softmax_rows(&logits);
        for (ex, seg) in chunk.iter().zip(cache.target_segments()) {
            let mut token_ids = Vec::new();
            let mut logprobs = Vec::new();
            for (k, (&g, &m)) in ex.gold().iter().zip(ex.gold_mask()).enumerate() {
                if m {
                    token_ids.push(g);
                    logprobs.push(lp[[seg.start + k, g as usize]]);
                }
            }
            out.push(SentenceLogProbs {
                doc_id: ex.doc_id.clone(),
                index: ex.index,
                context_used: ex.used_ctx.source.max(ex.used_ctx.target),
                token_ids,
                logprobs,
            });
        }
    }
    Ok(out)
}

/// Teacher-forced scoring of every utterance in `docs` with exactly `context`
/// preceding sentences (fewer at document starts) on the checkpoint's
/// context side. `context = 0` gives the context-agnostic run.
pub fn score_logprobs(
    ckpt: &Checkpoint,
    docs: &[DialogueDocument],
    context: usize,
    batch_size: usize,
) -> Result<TokenLogProbs, MetricsError> {
    if context > MAX_CONTEXT {
        return Err(MetricsError::ContextTooLarge(context));
    }
    let mut cfg: ContextConfig = ckpt.context.with_dynamic(false);
    if context > cfg.k_max() {
        log::warn!(
            "context size {context} exceeds the trained maximum {}; scoring anyway",
            cfg.k_max()
        );
        match cfg.context_side() {
            crate::tokenizer::Side::Source => cfg.k_src = context,
            crate::tokenizer::Side::Target => cfg.k_tgt = context,
        }
    }
    let mut examples = Vec::new();
    for doc in docs {
        for i in 0..doc.len() {
            examples.push(build_example(doc, i, &cfg, &ckpt.vocab, Some(context))?);
        }
    }
    Ok(TokenLogProbs {
        context_size: context,
        sentences: logprobs_of(ckpt, &examples, batch_size)?,
    })
}

fn check_aligned(a: &TokenLogProbs, b: &TokenLogProbs) -> Result<(), MetricsError> {
    if a.sentences.len() != b.sentences.len() {
        return Err(MetricsError::Misaligned {
            position: a.sentences.len().min(b.sentences.len()),
            reason: format!("{} vs {} sentences", a.sentences.len(), b.sentences.len()),
        });
    }
    for (position, (x, y)) in a.sentences.iter().zip(&b.sentences).enumerate() {
        let reason = if x.doc_id != y.doc_id || x.index != y.index {
            format!("{}#{} vs {}#{}", x.doc_id, x.index, y.doc_id, y.index)
        } else if x.token_ids != y.token_ids || x.logprobs.len() != x.token_ids.len() || y.logprobs.len() != y.token_ids.len() {
            "gold tokens differ".to_string()
        } else {
            continue;
        };
        return Err(MetricsError::Misaligned { position, reason });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CxmiValue {
    pub nats: f64,
    pub bits: f64,
    pub n: usize,
    /// Per sentence: aware log-probability minus agnostic log-probability.
    pub deltas: Vec<f64>,
}

/// Mean per-sentence log-probability gain of `aware` over `agnostic`.
pub fn cxmi(agnostic: &TokenLogProbs, aware: &TokenLogProbs) -> Result<CxmiValue, MetricsError> {
    check_aligned(agnostic, aware)?;
    if agnostic.sentences.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let deltas: Vec<f64> = agnostic
        .sentences
        .iter()
        .zip(&aware.sentences)
        .map(|(a, c)| c.total() - a.total())
        .collect();
    let n = deltas.len();
    let nats = deltas.iter().sum::<f64>() / n as f64;
    Ok(CxmiValue {
        nats,
        bits: nats / std::f64::consts::LN_2,
        n,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBreakdown {
    pub token_id: TokenId,
    pub mean_delta: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcxmiValue {
    pub mean: f64,
    pub count: usize,
    /// One row per honorific token type, by id.
    pub breakdown: Vec<TokenBreakdown>,
}

impl PcxmiValue {
    /// Token type with the largest mean gain.
    pub fn largest_gain(&self) -> Option<&TokenBreakdown> {
        self.breakdown
            .iter()
            .fold(None, |best: Option<&TokenBreakdown>, b| match best {
                Some(x) if x.mean_delta >= b.mean_delta => Some(x),
                _ => Some(b),
            })
    }
}

/// Token-level mean gain over positions whose gold token is in `ids`;
/// `None` when there are no such positions.
pub fn honorifics_pcxmi(
    agnostic: &TokenLogProbs,
    aware: &TokenLogProbs,
    ids: &BTreeSet<TokenId>,
) -> Result<Option<PcxmiValue>, MetricsError> {
    check_aligned(agnostic, aware)?;
    let mut per: BTreeMap<TokenId, (f64, usize)> = BTreeMap::new();
    for (a, c) in agnostic.sentences.iter().zip(&aware.sentences) {
        for ((&t, &la), &lc) in a.token_ids.iter().zip(&a.logprobs).zip(&c.logprobs) {
            if ids.contains(&t) {
                let e = per.entry(t).or_insert((0.0, 0));
                e.0 += lc - la;
                e.1 += 1;
            }
        }
    }
    let count: usize = per.values().map(|v| v.1).sum();
    if count == 0 {
        return Ok(None);
    }
    let total: f64 = per.values().map(|v| v.0).sum();
    Ok(Some(PcxmiValue {
        mean: total / count as f64,
        count,
        breakdown: per
            .into_iter()
            .map(|(token_id, (sum, count))| TokenBreakdown {
                token_id,
                mean_delta: sum / count as f64,
                count,
            })
            .collect(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CxmiRow {
    pub context_size: usize,
    pub nats: f64,
    pub bits: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonorificRow {
    pub token: String,
    pub mean_delta: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonorificSection {
    pub context_size: usize,
    pub pcxmi: f64,
    pub count: usize,
    pub breakdown: Vec<HonorificRow>,
}

/// CXMI per context size plus the honorific breakdown at one context size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CxmiReport {
    pub rows: Vec<CxmiRow>,
    /// `None` renders as "absent".
    pub honorifics: Option<HonorificSection>,
}

/// Full-precision companion of a [`CxmiReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CxmiDetails {
    pub report: CxmiReport,
    pub deltas: BTreeMap<usize, Vec<f64>>,
}

impl CxmiReport {
    pub fn build(
        values: &[(usize, CxmiValue)],
        honorific: Option<(usize, &PcxmiValue)>,
        vocab: &Vocabulary,
    ) -> (CxmiReport, CxmiDetails) {
        let mut rows: Vec<CxmiRow> = values
            .iter()
            .map(|(c, v)| CxmiRow {
                context_size: *c,
                nats: v.nats,
                bits: v.bits,
                n: v.n,
            })
            .collect();
        rows.sort_by_key(|r| r.context_size);
        let honorifics = honorific.map(|(context_size, p)| HonorificSection {
            context_size,
            pcxmi: p.mean,
            count: p.count,
            breakdown: p
                .breakdown
                .iter()
                .map(|b| HonorificRow {
                    token: vocab.token(b.token_id).unwrap_or("<unk>").to_string(),
                    mean_delta: b.mean_delta,
                    count: b.count,
                })
                .collect(),
        });
        let report = CxmiReport { rows, honorifics };
        let deltas = values.iter().map(|(c, v)| (*c, v.deltas.clone())).collect();
        (report.clone(), CxmiDetails { report, deltas })
    }

    /// Tab-separated rendering, 4 decimals.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("context_size\tCXMI_nats\tCXMI_bits\tN\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{}", r.context_size, r.nats, r.bits, r.n);
        }
        s.push('\n');
        match &self.honorifics {
            None => s.push_str("honorifics\tabsent\n"),
            Some(h) => {
                let _ = writeln!(s, "honorifics\tcontext_size={}", h.context_size);
                s.push_str("token\tmean_delta\tcount\n");
                for b in &h.breakdown {
                    let _ = writeln!(s, "{}\t{:.4}\t{}", b.token, b.mean_delta, b.count);
                }
                let _ = writeln!(s, "P-CXMI\t{:.4}\t{}", h.pcxmi, h.count);
            }
        }
        s
    }

    /// Values rounded as in [`to_tsv`](Self::to_tsv).
    pub fn rounded(&self) -> CxmiReport {
        let r4 = |x: f64| format!("{x:.4}").parse::<f64>().expect("formatted float");
        CxmiReport {
            rows: self
                .rows
                .iter()
                .map(|r| CxmiRow {
                    nats: r4(r.nats),
                    bits: r4(r.bits),
                    ..r.clone()
                })
                .collect(),
            honorifics: self.honorifics.as_ref().map(|h| HonorificSection {
                pcxmi: r4(h.pcxmi),
                breakdown: h
                    .breakdown
                    .iter()
                    .map(|b| HonorificRow {
                        mean_delta: r4(b.mean_delta),
                        ..b.clone()
                    })
                    .collect(),
                ..h.clone()
            }),
        }
    }

    pub fn parse_tsv(text: &str) -> Result<CxmiReport, MetricsError> {
        let bad = |m: &str| MetricsError::Parse(m.to_string());
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer {s:?}")));
        let mut lines = text.lines();
        if lines.next() != Some("context_size\tCXMI_nats\tCXMI_bits\tN") {
            return Err(bad("missing CXMI header"));
        }
        let mut rows = Vec::new();
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("CXMI row needs 4 fields"));
            }
            rows.push(CxmiRow {
                context_size: int(f[0])?,
                nats: num(f[1])?,
                bits: num(f[2])?,
                n: int(f[3])?,
            });
        }
        let head = lines.next().ok_or_else(|| bad("missing honorifics section"))?;
        let honorifics = if head == "honorifics\tabsent" {
            None
        } else {
            let c = head
                .strip_prefix("honorifics\tcontext_size=")
                .ok_or_else(|| bad("bad honorifics header"))?;
            let context_size = int(c)?;
            if lines.next() != Some("token\tmean_delta\tcount") {
                return Err(bad("missing honorific table header"));
            }
            let mut breakdown = Vec::new();
            let mut total = None;
            for line in lines.by_ref() {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad("honorific row needs 3 fields"));
                }
                if f[0] == "P-CXMI" {
                    total = Some((num(f[1])?, int(f[2])?));
                    break;
                }
                breakdown.push(HonorificRow {
                    token: f[0].to_string(),
                    mean_delta: num(f[1])?,
                    count: int(f[2])?,
                });
            }
            let (pcxmi, count) = total.ok_or_else(|| bad("missing P-CXMI line"))?;
            Some(HonorificSection {
                context_size,
                pcxmi,
                count,
                breakdown,
            })
        };
        Ok(CxmiReport { rows, honorifics })
    }
}

/// Writes the TSV report to `path` and the full-precision details to
/// `path` with `.json` appended.
pub fn emit_cxmi_report(details: &CxmiDetails, path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, details.report.to_tsv()).map_err(io_err(path))?;
    let json_path = json_sibling(path);
    let json = serde_json::to_string_pretty(details).expect("details serialisation") + "\n";
    std::fs::write(&json_path, json).map_err(io_err(&json_path))
}

pub fn json_sibling(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuMode {
    /// Every non-whitespace character is a token.
    Character,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuOptions {
    pub max_n: usize,
    pub mode: BleuMode,
    /// Add-one smoothing of the n ≥ 2 precisions.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            max_n: 4,
            mode: BleuMode::Character,
            smooth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuScore {
    /// Single-line summary with the score at 2 decimals.
    pub fn summary(&self) -> String {
        let ps: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        format!(
            "BLEU = {:.2} {} (BP = {:.3} hyp_len = {} ref_len = {})",
            self.score,
            ps.join("/"),
            self.bp,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Parsed form of [`BleuScore::summary`].
#[derive(Debug, Clone, PartialEq)]
pub struct BleuSummary {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuSummary {
    pub fn parse(line: &str) -> Result<BleuSummary, MetricsError> {
        let bad = || MetricsError::Parse(format!("bad BLEU summary {line:?}"));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 13 || f[0] != "BLEU" || f[1] != "=" || f[4] != "(BP" || f[7] != "hyp_len" || f[10] != "ref_len" {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        Ok(BleuSummary {
            score: num(f[2])?,
            precisions: f[3].split('/').map(|p| num(p).map(|v| v / 100.0)).collect::<Result<_, _>>()?,
            bp: num(f[6])?,
            hyp_len: int(f[9])?,
            ref_len: int(f[12].trim_end_matches(')'))?,
        })
    }
}

pub fn emit_bleu_summary(score: &BleuScore, path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, score.summary() + "\n").map_err(io_err(path))
}

pub fn bleu_tokens(text: &str, mode: BleuMode) -> Vec<String> {
    match mode {
        BleuMode::Character => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        BleuMode::Whitespace => text.split_whitespace().map(String::from).collect(),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0–100 scale.
pub fn bleu<S: AsRef<str>>(hypotheses: &[S], references: &[S], opts: &BleuOptions) -> Result<BleuScore, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() || opts.max_n == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matches = vec![0usize; opts.max_n];
    let mut totals = vec![0usize; opts.max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = bleu_tokens(h.as_ref(), opts.mode);
        let r = bleu_tokens(r.as_ref(), opts.mode);
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=opts.max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let precisions: Vec<f64> = (0..opts.max_n)
        .map(|i| {
            if opts.smooth && i > 0 {
                (matches[i] + 1) as f64 / (totals[i] + 1) as f64
            } else if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            }
        })
        .collect();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    // Orders with no hypothesis n-gram anywhere in the corpus are left out
    // of the geometric mean.
    let used: Vec<f64> = precisions
        .iter()
        .zip(&totals)
        .filter(|&(_, &t)| t > 0 || opts.smooth)
        .map(|(&p, _)| p)
        .collect();
    let score = if used.is_empty() || used.contains(&0.0) || bp == 0.0 {
        0.0
    } else {
        let log_mean = used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        matches,
        totals,
        bp,
        hyp_len,
        ref_len,
    })
}
