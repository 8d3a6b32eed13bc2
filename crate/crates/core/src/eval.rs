//! Span-level evaluation and inter-annotator agreement.
//!
//! A predicted span counts only on exact match: type, start and end all equal
//! to a gold span. Counts pool over all sentences for the micro scores and
//! per type for the breakdown. True negatives are recorded at the token level
//! for completeness but never enter precision/recall/F1. Cohen's kappa runs
//! over per-token tag decisions pooled across sentences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::Corpus;
use crate::schema::{decode_bio, EntitySpan, Tag};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AlignmentError: {0}")]
    AlignmentError(String),
    #[error("TokenMismatch: {0}")]
    TokenMismatch(String),
}

/// Raw confusion counts. `tn` is token-level bookkeeping only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Percent precision/recall/F1 with the usual zero-division conventions:
/// no predictions means P = 0, no gold means R = 0, P + R = 0 means F1 = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub counts: ConfusionCounts,
}

impl Score {
    fn from_counts(counts: ConfusionCounts) -> Self {
        let precision = if counts.tp + counts.fp > 0 {
            100.0 * counts.tp as f64 / (counts.tp + counts.fp) as f64
        } else {
            0.0
        };
        let recall = if counts.tp + counts.fn_ > 0 {
            100.0 * counts.tp as f64 / (counts.tp + counts.fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            support: counts.tp + counts.fn_,
            counts,
        }
    }
}

/// Micro scores plus the per-type breakdown, keyed by type name.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub micro: Score,
    pub per_type: BTreeMap<String, Score>,
}

impl EvaluationReport {
    /// Plain-text table: one row per type, micro line last.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>8} {:>8} {:>8} {:>8}", "type", "P", "R", "F1", "support");
        for (name, s) in &self.per_type {
            let _ = writeln!(
                out,
                "{:<20} {:>8.2} {:>8.2} {:>8.2} {:>8}",
                name, s.precision, s.recall, s.f1, s.support
            );
        }
        let _ = writeln!(
            out,
            "{:<20} {:>8.2} {:>8.2} {:>8.2} {:>8}",
            "micro", self.micro.precision, self.micro.recall, self.micro.f1, self.micro.support
        );
        out
    }
}

/// Inter-annotator agreement: token-level kappa plus span scores computed
/// with annotator A as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub cohen_kappa: f64,
    pub spans_vs_a: EvaluationReport,
}

fn span_sets(tags: &[Tag]) -> Vec<EntitySpan> {
    decode_bio(tags, true).expect("repairing decode cannot fail")
}

fn count_spans(
    gold: &[EntitySpan],
    pred: &[EntitySpan],
    per_type: &mut BTreeMap<String, ConfusionCounts>,
) {
    let gold_set: BTreeSet<&EntitySpan> = gold.iter().collect();
    let pred_set: BTreeSet<&EntitySpan> = pred.iter().collect();
    for span in pred {
        let slot = per_type.entry(span.entity_type.name().to_string()).or_default();
        if gold_set.contains(span) {
            slot.tp += 1;
        } else {
            slot.fp += 1;
        }
    }
    for span in gold {
        if !pred_set.contains(span) {
            per_type.entry(span.entity_type.name().to_string()).or_default().fn_ += 1;
        }
    }
}

fn count_token_negatives(
    gold_tags: &[Tag],
    pred_tags: &[Tag],
    per_type: &mut BTreeMap<String, ConfusionCounts>,
    pooled_tn: &mut usize,
) {
    for (g, p) in gold_tags.iter().zip(pred_tags) {
        if g.entity_type().is_none() && p.entity_type().is_none() {
            *pooled_tn += 1;
        }
        for (name, counts) in per_type.iter_mut() {
            let g_is = g.entity_type().map_or(false, |t| t.name() == name);
            let p_is = p.entity_type().map_or(false, |t| t.name() == name);
            if !g_is && !p_is {
                counts.tn += 1;
            }
        }
    }
}

/// Scores predicted tag sequences against a gold corpus. Spans are extracted
/// with stray-I repair on; micro scores pool counts over every type.
pub fn evaluate(gold: &Corpus, predicted: &[Vec<Tag>]) -> Result<EvaluationReport, EvalError> {
    if gold.sentences.len() != predicted.len() {
        return Err(EvalError::AlignmentError(format!(
            "{} gold sentences, {} predictions",
            gold.sentences.len(),
            predicted.len()
        )));
    }
    let mut per_type: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    // seed rows for every type either side mentions, so zero rows still render
    let mut aligned = Vec::with_capacity(predicted.len());
    for (sent, pred_tags) in gold.sentences.iter().zip(predicted) {
        if sent.tokens.len() != pred_tags.len() {
            return Err(EvalError::AlignmentError(format!(
                "sentence with {} tokens got {} predicted tags",
                sent.tokens.len(),
                pred_tags.len()
            )));
        }
        aligned.push((sent.tags(), pred_tags.clone()));
    }

    let mut pooled_tn = 0usize;
    for (gold_tags, pred_tags) in &aligned {
        count_spans(&span_sets(gold_tags), &span_sets(pred_tags), &mut per_type);
    }
    for (gold_tags, pred_tags) in &aligned {
        count_token_negatives(gold_tags, pred_tags, &mut per_type, &mut pooled_tn);
    }

    let mut pooled = ConfusionCounts::default();
    for counts in per_type.values() {
        pooled.add(&ConfusionCounts { tn: 0, ..*counts });
    }
    pooled.tn = pooled_tn;

    Ok(EvaluationReport {
        micro: Score::from_counts(pooled),
        per_type: per_type
            .into_iter()
            .map(|(k, v)| (k, Score::from_counts(v)))
            .collect(),
    })
}

/// Scores a predicted corpus against gold, insisting the token sequences
/// line up exactly.
pub fn evaluate_corpus(gold: &Corpus, pred: &Corpus) -> Result<EvaluationReport, EvalError> {
    check_aligned_tokens(gold, pred)?;
    let tags: Vec<Vec<Tag>> = pred.sentences.iter().map(|s| s.tags()).collect();
    evaluate(gold, &tags)
}

fn check_aligned_tokens(a: &Corpus, b: &Corpus) -> Result<(), EvalError> {
    if a.sentences.len() != b.sentences.len() {
        return Err(EvalError::TokenMismatch(format!(
            "{} vs {} sentences",
            a.sentences.len(),
            b.sentences.len()
        )));
    }
    for (i, (sa, sb)) in a.sentences.iter().zip(&b.sentences).enumerate() {
        if sa.surfaces() != sb.surfaces() {
            return Err(EvalError::TokenMismatch(format!(
                "sentence {} differs between the two corpora",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Cohen's kappa over pooled per-token tag decisions, plus span-level scores
/// treating annotator A as reference. Kappa is symmetric in the annotators.
pub fn cohens_kappa(ann_a: &Corpus, ann_b: &Corpus) -> Result<AgreementReport, EvalError> {
    check_aligned_tokens(ann_a, ann_b)?;

    let mut categories: BTreeMap<String, usize> = BTreeMap::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (sa, sb) in ann_a.sentences.iter().zip(&ann_b.sentences) {
        for (ta, tb) in sa.tags().iter().zip(sb.tags()) {
            let next = categories.len();
            let ia = *categories.entry(ta.to_string()).or_insert(next);
            let next = categories.len();
            let ib = *categories.entry(tb.to_string()).or_insert(next);
            pairs.push((ia, ib));
        }
    }
    let k = categories.len();
    let n = pairs.len() as f64;
    let mut row_a = vec![0.0; k];
    let mut row_b = vec![0.0; k];
    let mut agree = 0.0;
    for (ia, ib) in &pairs {
        row_a[*ia] += 1.0;
        row_b[*ib] += 1.0;
        if ia == ib {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = row_a
        .iter()
        .zip(&row_b)
        .map(|(a, b)| (a / n) * (b / n))
        .sum();
    let cohen_kappa = if (1.0 - p_e).abs() < 1e-15 {
        1.0 // both annotators constant and identical
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };

    let spans_vs_a = evaluate_corpus(ann_a, ann_b)?;
    Ok(AgreementReport {
        cohen_kappa,
        spans_vs_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Part, Sentence, Token};
    use crate::schema::{encode_bio, EntityType, LabelSchema};

    fn ty(name: &str) -> EntityType {
        EntityType::new(name).unwrap()
    }

    fn sentence(len: usize, spans: &[(&str, usize, usize)]) -> Sentence {
        let spans: Vec<EntitySpan> = spans
            .iter()
            .map(|(t, s, e)| EntitySpan::new(ty(t), *s, *e))
            .collect();
        let tags = encode_bio(&spans, len).unwrap();
        Sentence {
            tokens: tags
                .into_iter()
                .enumerate()
                .map(|(i, tag)| Token {
                    surface: format!("w{}", i),
                    tag,
                })
                .collect(),
            source: "test".into(),
            part: Part::Title,
        }
    }

    fn corpus_of(sentences: Vec<Sentence>) -> Corpus {
        Corpus {
            sentences,
            schema: LabelSchema::canonical(),
        }
    }

    fn tags_of(len: usize, spans: &[(&str, usize, usize)]) -> Vec<Tag> {
        sentence(len, spans).tags()
    }

    #[test]
    fn identical_predictions_score_hundred() {
        let gold = corpus_of(vec![
            sentence(5, &[("method", 0, 2)]),
            sentence(4, &[("dataset", 1, 2), ("method", 2, 4)]),
        ]);
        let pred: Vec<Vec<Tag>> = gold.sentences.iter().map(|s| s.tags()).collect();
        let report = evaluate(&gold, &pred).unwrap();
        assert_eq!(report.micro.precision, 100.0);
        assert_eq!(report.micro.recall, 100.0);
        assert_eq!(report.micro.f1, 100.0);
        for s in report.per_type.values() {
            assert_eq!(s.f1, 100.0);
        }
    }

    #[test]
    fn no_predictions_uses_zero_convention() {
        let gold = corpus_of(vec![sentence(5, &[("method", 0, 2)])]);
        let pred = vec![tags_of(5, &[])];
        let report = evaluate(&gold, &pred).unwrap();
        assert_eq!(report.micro.precision, 0.0);
        assert_eq!(report.micro.recall, 0.0);
        assert_eq!(report.micro.f1, 0.0);
    }

    #[test]
    fn boundary_miss_is_both_fp_and_fn() {
        let gold = corpus_of(vec![sentence(4, &[("method", 1, 3)])]);
        let pred = vec![tags_of(4, &[("method", 1, 2)])];
        let report = evaluate(&gold, &pred).unwrap();
        let m = &report.per_type["method"];
        assert_eq!((m.counts.tp, m.counts.fp, m.counts.fn_), (0, 1, 1));
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn alignment_errors_are_reported() {
        let gold = corpus_of(vec![sentence(4, &[])]);
        assert!(matches!(
            evaluate(&gold, &[]),
            Err(EvalError::AlignmentError(_))
        ));
        assert!(matches!(
            evaluate(&gold, &[tags_of(3, &[])]),
            Err(EvalError::AlignmentError(_))
        ));
    }

    /// The ten-sentence hand-computed oracle: per-type and micro scores were
    /// derived on paper from the confusion counts
    /// research-problem tp=4 fp=3 fn=2, method tp=3 fp=1 fn=0,
    /// dataset tp=0 fp=2 fn=1.
    #[test]
    fn hand_computed_ten_sentence_fixture() {
        let rp = "research-problem";
        let gold = corpus_of(vec![
            sentence(5, &[(rp, 0, 2)]),
            sentence(4, &[(rp, 1, 3)]),
            sentence(6, &[(rp, 0, 1), ("method", 3, 5)]),
            sentence(5, &[(rp, 2, 4)]),
            sentence(4, &[(rp, 0, 2)]),
            sentence(5, &[(rp, 3, 5)]),
            sentence(6, &[("method", 0, 2)]),
            sentence(5, &[("method", 2, 3)]),
            sentence(5, &[("dataset", 1, 3)]),
            sentence(4, &[]),
        ]);
        let pred = vec![
            tags_of(5, &[(rp, 0, 2)]),
            tags_of(4, &[(rp, 1, 3)]),
            tags_of(6, &[(rp, 0, 1), ("method", 3, 5)]),
            tags_of(5, &[(rp, 2, 5)]),
            tags_of(4, &[(rp, 1, 2)]),
            tags_of(5, &[(rp, 0, 1), (rp, 3, 5)]),
            tags_of(6, &[("method", 0, 2)]),
            tags_of(5, &[("method", 2, 3), ("method", 4, 5)]),
            tags_of(5, &[("dataset", 1, 2)]),
            tags_of(4, &[("dataset", 0, 1)]),
        ];
        let report = evaluate(&gold, &pred).unwrap();

        let r = &report.per_type[rp];
        assert_eq!((r.counts.tp, r.counts.fp, r.counts.fn_), (4, 3, 2));
        assert!((r.precision - 100.0 * 4.0 / 7.0).abs() < 1e-9);
        assert!((r.recall - 100.0 * 4.0 / 6.0).abs() < 1e-9);
        assert!((r.f1 - 100.0 * 8.0 / 13.0).abs() < 1e-9);
        assert_eq!(r.support, 6);

        let m = &report.per_type["method"];
        assert_eq!((m.counts.tp, m.counts.fp, m.counts.fn_), (3, 1, 0));
        assert!((m.precision - 75.0).abs() < 1e-9);
        assert!((m.recall - 100.0).abs() < 1e-9);
        assert!((m.f1 - 100.0 * 6.0 / 7.0).abs() < 1e-9);

        let d = &report.per_type["dataset"];
        assert_eq!((d.counts.tp, d.counts.fp, d.counts.fn_), (0, 2, 1));
        assert_eq!((d.precision, d.recall, d.f1), (0.0, 0.0, 0.0));

        // micro pools the counts: tp=7, fp=6, fn=3
        assert_eq!(
            (report.micro.counts.tp, report.micro.counts.fp, report.micro.counts.fn_),
            (7, 6, 3)
        );
        assert!((report.micro.precision - 100.0 * 7.0 / 13.0).abs() < 1e-9);
        assert!((report.micro.recall - 70.0).abs() < 1e-9);
        assert!((report.micro.f1 - 100.0 * 98.0 / 161.0).abs() < 1e-9);

        // pooled counts reconcile with the per-type sums
        let sums = report.per_type.values().fold((0, 0, 0), |acc, s| {
            (acc.0 + s.counts.tp, acc.1 + s.counts.fp, acc.2 + s.counts.fn_)
        });
        assert_eq!(sums, (7, 6, 3));
    }

    #[test]
    fn evaluation_is_invariant_under_sentence_order() {
        let gold = corpus_of(vec![
            sentence(5, &[("method", 0, 2)]),
            sentence(4, &[("dataset", 1, 2)]),
            sentence(6, &[("tool", 2, 4)]),
        ]);
        let pred = vec![
            tags_of(5, &[("method", 0, 2)]),
            tags_of(4, &[("dataset", 1, 3)]),
            tags_of(6, &[]),
        ];
        let report = evaluate(&gold, &pred).unwrap();

        let perm = [2usize, 0, 1];
        let gold2 = corpus_of(perm.iter().map(|&i| gold.sentences[i].clone()).collect());
        let pred2: Vec<Vec<Tag>> = perm.iter().map(|&i| pred[i].clone()).collect();
        let report2 = evaluate(&gold2, &pred2).unwrap();
        assert_eq!(report, report2);
    }

    #[test]
    fn kappa_of_identical_annotations_is_one() {
        let c = corpus_of(vec![
            sentence(5, &[("language", 0, 1)]),
            sentence(4, &[("method", 1, 3)]),
        ]);
        let report = cohens_kappa(&c, &c).unwrap();
        assert_eq!(report.cohen_kappa, 1.0);
        for s in report.spans_vs_a.per_type.values() {
            assert_eq!((s.precision, s.recall, s.f1), (100.0, 100.0, 100.0));
        }
    }

    #[test]
    fn perfectly_matching_type_scores_hundred_even_amid_disagreement() {
        // language spans agree everywhere; method spans do not
        let a = corpus_of(vec![sentence(6, &[("language", 0, 1), ("method", 2, 4)])]);
        let b = corpus_of(vec![sentence(6, &[("language", 0, 1), ("method", 2, 3)])]);
        let report = cohens_kappa(&a, &b).unwrap();
        let lang = &report.spans_vs_a.per_type["language"];
        assert_eq!((lang.precision, lang.recall, lang.f1), (100.0, 100.0, 100.0));
        assert!(report.spans_vs_a.per_type["method"].f1 < 100.0);
        assert!(report.cohen_kappa < 1.0);
    }

    /// Ten-token fixture with the 3x3 tag confusion table
    /// (O,O)=4 (B,B)=2 (I,I)=1 (B,O)=1 (I,B)=1 (O,B)=1:
    /// p_o = 0.7, p_e = 0.39, kappa = 0.31/0.61.
    #[test]
    fn kappa_matches_hand_formula() {
        let m = ty("method");
        let seq_a = [
            Tag::Outside,
            Tag::Begin(m.clone()),
            Tag::Inside(m.clone()),
            Tag::Outside,
            Tag::Begin(m.clone()),
            Tag::Inside(m.clone()),
            Tag::Outside,
            Tag::Begin(m.clone()),
            Tag::Outside,
            Tag::Outside,
        ];
        let seq_b = [
            Tag::Outside,
            Tag::Begin(m.clone()),
            Tag::Inside(m.clone()),
            Tag::Outside,
            Tag::Outside,
            Tag::Begin(m.clone()),
            Tag::Outside,
            Tag::Begin(m.clone()),
            Tag::Begin(m.clone()),
            Tag::Outside,
        ];
        let with_tags = |tags: &[Tag]| {
            corpus_of(vec![Sentence {
                tokens: tags
                    .iter()
                    .enumerate()
                    .map(|(i, t)| Token {
                        surface: format!("w{}", i),
                        tag: t.clone(),
                    })
                    .collect(),
                source: "iaa".into(),
                part: Part::Title,
            }])
        };
        let a = with_tags(&seq_a);
        let b = with_tags(&seq_b);
        let report = cohens_kappa(&a, &b).unwrap();
        assert!((report.cohen_kappa - 0.31 / 0.61).abs() < 1e-9);

        // symmetric in the annotators
        let flipped = cohens_kappa(&b, &a).unwrap();
        assert!((report.cohen_kappa - flipped.cohen_kappa).abs() < 1e-12);
    }

    #[test]
    fn kappa_rejects_mismatched_tokens() {
        let a = corpus_of(vec![sentence(4, &[])]);
        let mut b = corpus_of(vec![sentence(4, &[])]);
        b.sentences[0].tokens[2].surface = "different".into();
        assert!(matches!(
            cohens_kappa(&a, &b),
            Err(EvalError::TokenMismatch(_))
        ));
    }

    #[test]
    fn report_table_mentions_micro_line() {
        let gold = corpus_of(vec![sentence(5, &[("method", 0, 2)])]);
        let pred = vec![tags_of(5, &[("method", 0, 2)])];
        let table = evaluate(&gold, &pred).unwrap().render_table();
        assert!(table.contains("micro"));
        assert!(table.contains("100.00"));
    }
}
