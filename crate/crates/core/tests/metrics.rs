mod common;

use std::collections::BTreeSet;

use ctxnmt::contextizer::ContextConfig;
use ctxnmt::corpus::{generate_synthetic_corpus, SynthSpec};
use ctxnmt::metrics::{
    bleu, cxmi, emit_bleu_summary, emit_cxmi_report, honorifics_pcxmi, json_sibling, score_logprobs, BleuMode,
    BleuOptions, BleuSummary, CxmiDetails, CxmiReport, SentenceLogProbs, TokenLogProbs,
};
use ctxnmt::model::{Checkpoint, ModelConfig, Transformer};
use ctxnmt::tokenizer::{build_vocab, TargetMode};
use proptest::prelude::*;

use common::brute_force_bleu;

/// (doc id, index, [(token id, log-probability)]) per sentence.
type Sentence<'a> = (&'a str, usize, &'a [(u32, f64)]);

fn run(sentences: &[Sentence]) -> TokenLogProbs {
    TokenLogProbs {
        context_size: 0,
        sentences: sentences
            .iter()
            .map(|(doc, index, toks)| SentenceLogProbs {
                doc_id: doc.to_string(),
                index: *index,
                context_used: 0,
                token_ids: toks.iter().map(|t| t.0).collect(),
                logprobs: toks.iter().map(|t| t.1).collect(),
            })
            .collect(),
    }
}

#[test]
fn cxmi_identity_and_hand_cases() {
    let a = run(&[("d", 0, &[(5, -0.3), (2, -0.1)]), ("d", 1, &[(7, -1.2), (2, -0.05)])]);
    let v = cxmi(&a, &a).unwrap();
    assert_eq!(v.nats, 0.0);
    assert_eq!(v.n, 2);

    let agnostic = run(&[("d", 0, &[(5, 0.5f64.ln())])]);
    let aware = run(&[("d", 0, &[(5, 0.0)])]);
    let v = cxmi(&agnostic, &aware).unwrap();
    assert!((v.nats - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((v.bits - 1.0).abs() < 1e-12);

    let ln2 = std::f64::consts::LN_2;
    let agnostic = run(&[("d", 0, &[(5, -ln2)]), ("d", 1, &[(5, 0.0)])]);
    let aware = run(&[("d", 0, &[(5, 0.0)]), ("d", 1, &[(5, -ln2)])]);
    assert_eq!(cxmi(&agnostic, &aware).unwrap().nats, 0.0);
}

#[test]
fn misaligned_runs_are_rejected() {
    let a = run(&[("d", 0, &[(5, -0.3)])]);
    let b = run(&[("d", 1, &[(5, -0.3)])]);
    let c = run(&[("d", 0, &[(6, -0.3)])]);
    let d = run(&[("d", 0, &[(5, -0.3)]), ("d", 1, &[(5, -0.3)])]);
    assert!(cxmi(&a, &b).is_err());
    assert!(cxmi(&a, &c).is_err());
    assert!(cxmi(&a, &d).is_err());
}

#[test]
fn pcxmi_hand_case_and_absence() {
    let agnostic = run(&[("d", 0, &[(5, -0.2), (9, 0.25f64.ln()), (2, -0.1)])]);
    let aware = run(&[("d", 0, &[(5, -0.1), (9, 0.5f64.ln()), (2, -0.1)])]);
    let ids: BTreeSet<u32> = [9].into();
    let p = honorifics_pcxmi(&agnostic, &aware, &ids).unwrap().unwrap();
    assert!((p.mean - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(p.count, 1);
    assert_eq!(p.largest_gain().unwrap().token_id, 9);
    assert_eq!(honorifics_pcxmi(&agnostic, &aware, &BTreeSet::new()).unwrap(), None);
    let same = honorifics_pcxmi(&agnostic, &agnostic, &ids).unwrap().unwrap();
    assert_eq!(same.mean, 0.0);
}

fn arb_pair() -> impl Strategy<Value = (TokenLogProbs, TokenLogProbs)> {
    prop::collection::vec(prop::collection::vec((0u32..6, -5.0f64..0.0, -5.0f64..0.0), 1..5), 1..6).prop_map(|sents| {
        let mk = |pick: usize| TokenLogProbs {
            context_size: pick,
            sentences: sents
                .iter()
                .enumerate()
                .map(|(i, toks)| SentenceLogProbs {
                    doc_id: format!("doc{}", i / 2),
                    index: i % 2,
                    context_used: pick,
                    token_ids: toks.iter().map(|t| t.0).collect(),
                    logprobs: toks.iter().map(|t| if pick == 0 { t.1 } else { t.2 }).collect(),
                })
                .collect(),
        };
        (mk(0), mk(1))
    })
}

proptest! {
    #[test]
    fn cxmi_is_antisymmetric((a, b) in arb_pair()) {
        let ab = cxmi(&a, &b).unwrap().nats;
        let ba = cxmi(&b, &a).unwrap().nats;
        prop_assert!((ab + ba).abs() < 1e-12);
    }

    #[test]
    fn cxmi_ignores_document_order((a, b) in arb_pair(), rot in 0usize..6) {
        let mut ra = a.clone();
        let mut rb = b.clone();
        let k = rot % a.sentences.len();
        ra.sentences.rotate_left(k);
        rb.sentences.rotate_left(k);
        let x = cxmi(&a, &b).unwrap().nats;
        let y = cxmi(&ra, &rb).unwrap().nats;
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn sentence_delta_is_sum_of_token_deltas((a, b) in arb_pair()) {
        let v = cxmi(&a, &b).unwrap();
        for ((x, y), d) in a.sentences.iter().zip(&b.sentences).zip(&v.deltas) {
            let tok: f64 = x.logprobs.iter().zip(&y.logprobs).map(|(p, q)| q - p).sum();
            prop_assert!((tok - d).abs() < 1e-12);
        }
    }

    #[test]
    fn pcxmi_over_all_tokens_is_token_mean((a, b) in arb_pair()) {
        let all: BTreeSet<u32> = (0..6).collect();
        let p = honorifics_pcxmi(&a, &b, &all).unwrap().unwrap();
        let deltas: Vec<f64> = a.sentences.iter().zip(&b.sentences)
            .flat_map(|(x, y)| x.logprobs.iter().zip(&y.logprobs).map(|(p, q)| q - p).collect::<Vec<_>>())
            .collect();
        prop_assert_eq!(p.count, deltas.len());
        prop_assert!((p.mean - deltas.iter().sum::<f64>() / deltas.len() as f64).abs() < 1e-12);
        prop_assert_eq!(p.breakdown.iter().map(|b| b.count).sum::<usize>(), p.count);
    }
}

#[test]
fn uniform_model_scores_minus_log_v() {
    let corpus = generate_synthetic_corpus(
        &SynthSpec {
            train_docs: 2,
            dev_docs: 1,
            test_docs: 2,
            utterances_per_doc: 4,
            ..SynthSpec::default()
        },
        1,
    )
    .unwrap();
    let vocab = build_vocab(&corpus, 1, TargetMode::Word).unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        d_ff: 8,
        heads: 2,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let mut model = Transformer::new(cfg, 1).unwrap();
    let embed = model.params().names().iter().position(|n| n == "embed").unwrap();
    model.params_mut().tensors_mut()[embed].fill(0.0);
    let ckpt = Checkpoint {
        model,
        vocab: vocab.clone(),
        context: ContextConfig::new(2, 0).with_dynamic(true),
    };
    let lp = score_logprobs(&ckpt, &corpus.test, 1, 3).unwrap();
    let expected = -(vocab.len() as f64).ln();
    assert_eq!(lp.sentences.len(), 8);
    for s in &lp.sentences {
        assert!(s.total() <= 0.0);
        for &v in &s.logprobs {
            assert!((v - expected).abs() < 1e-12);
        }
    }
    assert_eq!(lp, score_logprobs(&ckpt, &corpus.test, 1, 5).unwrap());
}

#[test]
fn bleu_identity_and_hand_cases() {
    let h = vec!["今日は良い天気です".to_string(), "ありがとう".to_string()];
    assert_eq!(bleu(&h, &h, &BleuOptions::default()).unwrap().score, 100.0);
    let short = vec!["ab".to_string()];
    assert_eq!(bleu(&short, &short, &BleuOptions::default()).unwrap().score, 100.0);

    let s = bleu(&["aaa"], &["ab"], &BleuOptions::default()).unwrap();
    assert!((s.precisions[0] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(s.precisions[1], 0.0);
    assert_eq!(s.score, 0.0);
    let smoothed = bleu(
        &["aaa"],
        &["ab"],
        &BleuOptions {
            smooth: true,
            ..BleuOptions::default()
        },
    )
    .unwrap();
    assert!(smoothed.score > 0.0);

    let s = bleu(&["a b c d"], &["a b c d e f"], &BleuOptions {
        mode: BleuMode::Whitespace,
        ..BleuOptions::default()
    })
    .unwrap();
    let bp = (1.0f64 - 6.0 / 4.0).exp();
    assert!((s.bp - bp).abs() < 1e-15);
    assert!((s.score - 100.0 * bp).abs() < 1e-9);

    assert!(bleu(&["a"], &["a", "b"], &BleuOptions::default()).is_err());
    assert!(bleu::<&str>(&[], &[], &BleuOptions::default()).is_err());
}

proptest! {
    #[test]
    fn bleu_matches_brute_force(pairs in prop::collection::vec(("[abc ]{0,9}", "[abcd ]{1,9}"), 1..5), chars in any::<bool>()) {
        let hyps: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
        let mode = if chars { BleuMode::Character } else { BleuMode::Whitespace };
        let ours = bleu(&hyps, &refs, &BleuOptions { mode, ..BleuOptions::default() }).unwrap().score;
        let oracle = brute_force_bleu(&hyps, &refs, 4, chars);
        prop_assert!((ours - oracle).abs() < 1e-9, "{} vs {}", ours, oracle);
    }

    #[test]
    fn bleu_ignores_corpus_order(pairs in prop::collection::vec(("[ab]{1,6}", "[abc]{1,6}"), 2..6), k in 0usize..5) {
        let hyps: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k % hyps.len());
        r2.rotate_left(k % hyps.len());
        let opts = BleuOptions::default();
        prop_assert_eq!(bleu(&hyps, &refs, &opts).unwrap().score, bleu(&h2, &r2, &opts).unwrap().score);
        prop_assert_eq!(bleu(&hyps, &hyps, &opts).unwrap().score, 100.0);
    }
}

#[test]
fn bleu_summary_round_trip() {
    let s = bleu(&["abcde", "xyz"], &["abcdf", "xyzw"], &BleuOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bleu.txt");
    emit_bleu_summary(&s, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    let parsed = BleuSummary::parse(text.trim_end()).unwrap();
    assert_eq!(format!("{:.2}", parsed.score), format!("{:.2}", s.score));
    assert_eq!(parsed.hyp_len, 8);
    assert_eq!(parsed.ref_len, 9);
    assert_eq!(parsed.precisions.len(), 4);
}

#[test]
fn cxmi_report_round_trip() {
    let corpus = generate_synthetic_corpus(&SynthSpec::default(), 2).unwrap();
    let vocab = build_vocab(&corpus, 1, TargetMode::Word).unwrap();
    let masu = vocab.id("+masu").unwrap();
    let agnostic = run(&[("d", 0, &[(masu, -0.9), (2, -0.1)]), ("d", 1, &[(masu, -0.6)])]);
    let mut values = Vec::new();
    for c in [3usize, 1, 2, 4] {
        let aware = run(&[("d", 0, &[(masu, -0.1 * c as f64), (2, -0.1)]), ("d", 1, &[(masu, -0.2)])]);
        values.push((c, cxmi(&agnostic, &aware).unwrap()));
    }
    let aware = run(&[("d", 0, &[(masu, -0.4), (2, -0.1)]), ("d", 1, &[(masu, -0.2)])]);
    let p = honorifics_pcxmi(&agnostic, &aware, &[masu].into()).unwrap().unwrap();
    let (report, details) = CxmiReport::build(&values, Some((4, &p)), &vocab);
    let sizes: Vec<usize> = report.rows.iter().map(|r| r.context_size).collect();
    assert_eq!(sizes, vec![1, 2, 3, 4]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cxmi.tsv");
    emit_cxmi_report(&details, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("context_size\tCXMI_nats\tCXMI_bits\tN\n1\t"));
    assert!(text.contains("+masu\t"));
    let parsed = CxmiReport::parse_tsv(&text).unwrap();
    assert_eq!(parsed, report.rounded());
    assert_eq!(parsed.to_tsv(), text);
    let json: CxmiDetails = serde_json::from_str(&std::fs::read_to_string(json_sibling(&path)).unwrap()).unwrap();
    assert_eq!(json, details);

    let (empty, _) = CxmiReport::build(&values[..1], None, &vocab);
    let tsv = empty.to_tsv();
    assert!(tsv.contains("absent"));
    assert_eq!(CxmiReport::parse_tsv(&tsv).unwrap(), empty.rounded());
}
