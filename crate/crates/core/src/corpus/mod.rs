//! Tagged corpora: reading/writing, merging heterogeneous sources under one
//! schema, distance labeling from entity lexicons, stratified selection and
//! deterministic splitting.
//!
//! Files come in with arbitrary source label names ("task", "technique", ...);
//! [`merge_corpora`] folds them onto the canonical schema, deduplicates exact
//! surface repeats and drops spans whose types the schema excludes, reporting
//! every count. Corpora are immutable after construction.

mod conll;
mod tokenize;

pub use conll::{read_conll, write_conll};
pub use tokenize::tokenize;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::schema::{
    decode_bio, encode_bio, EntitySpan, EntityType, LabelSchema, SchemaError, Tag,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("MalformedLine: line {0}: {1:?} (expected token<TAB>tag)")]
    MalformedLine(usize, String),
    #[error("UnknownTag: {0:?}")]
    UnknownTag(String),
    #[error("BadPart: {0:?} (expected title|abstract)")]
    BadPart(String),
    #[error("BadRatios: {0}")]
    BadRatios(String),
    #[error("EmptyPhrase: lexicon phrases must be non-empty")]
    EmptyPhrase,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which zone of the article a sentence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Part {
    #[default]
    Title,
    Abstract,
}

impl Part {
    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        match s {
            "title" => Ok(Part::Title),
            "abstract" => Ok(Part::Abstract),
            other => Err(CorpusError::BadPart(other.to_string())),
        }
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Part::Title => "title",
            Part::Abstract => "abstract",
        })
    }
}

/// Token as read from disk: tag still a raw string, label not yet normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub surface: String,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSentence {
    pub tokens: Vec<RawToken>,
    pub source: String,
    pub part: Part,
}

/// Sentences exactly as parsed from a file, before schema interpretation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawCorpus {
    pub sentences: Vec<RawSentence>,
}

/// Validated token: surface plus a schema-typed tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub surface: String,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub source: String,
    pub part: Part,
}

impl Sentence {
    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.tokens.iter().map(|t| t.tag.clone()).collect()
    }

    pub fn spans(&self) -> Vec<EntitySpan> {
        decode_bio(&self.tags(), true).expect("repairing decode cannot fail")
    }

    fn mention_count(&self, ty: &EntityType) -> usize {
        self.spans().iter().filter(|s| &s.entity_type == ty).count()
    }
}

/// A set of sentences whose tags all live within one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub schema: LabelSchema,
}

impl Corpus {
    pub fn new(schema: LabelSchema) -> Self {
        Self {
            sentences: Vec::new(),
            schema,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Interprets raw sentences against a schema. Every tag must parse and its
    /// label must normalize; with `repair` off, stray I-tags are errors.
    pub fn from_raw(
        raw: &RawCorpus,
        schema: &LabelSchema,
        repair: bool,
    ) -> Result<Self, CorpusError> {
        let mut sentences = Vec::with_capacity(raw.sentences.len());
        for sent in &raw.sentences {
            let spans = raw_spans(sent, repair)?;
            let mut typed = Vec::with_capacity(spans.len());
            for rs in spans {
                let ty = schema.normalize_label(&rs.label)?;
                typed.push(EntitySpan::new(ty, rs.start, rs.end));
            }
            sentences.push(build_sentence(sent, &typed)?);
        }
        Ok(Self {
            sentences,
            schema: schema.clone(),
        })
    }

    /// Back to raw form for writing.
    pub fn to_raw(&self) -> RawCorpus {
        RawCorpus {
            sentences: self
                .sentences
                .iter()
                .map(|s| RawSentence {
                    tokens: s
                        .tokens
                        .iter()
                        .map(|t| RawToken {
                            surface: t.surface.clone(),
                            tag: t.tag.to_string(),
                        })
                        .collect(),
                    source: s.source.clone(),
                    part: s.part,
                })
                .collect(),
        }
    }
}

/// Span over raw tags, label not yet normalized.
#[derive(Debug, Clone)]
struct RawSpan {
    label: String,
    start: usize,
    end: usize,
}

/// Splits a raw tag string into its BIO kind and label part.
fn split_raw_tag(tag: &str) -> Result<(char, Option<&str>), CorpusError> {
    if tag == "O" {
        return Ok(('O', None));
    }
    match tag.split_once('-') {
        Some(("B", label)) if !label.is_empty() => Ok(('B', Some(label))),
        Some(("I", label)) if !label.is_empty() => Ok(('I', Some(label))),
        _ => Err(CorpusError::UnknownTag(tag.to_string())),
    }
}

/// Walks raw tags into spans, applying stray-I repair when asked.
fn raw_spans(sent: &RawSentence, repair: bool) -> Result<Vec<RawSpan>, CorpusError> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tok) in sent.tokens.iter().enumerate() {
        let (kind, label) = split_raw_tag(&tok.tag)?;
        match kind {
            'O' => {
                if let Some((label, start)) = open.take() {
                    spans.push(RawSpan { label, start, end: i });
                }
            }
            'B' => {
                if let Some((prev, start)) = open.take() {
                    spans.push(RawSpan { label: prev, start, end: i });
                }
                open = Some((label.unwrap().to_string(), i));
            }
            'I' => {
                let label = label.unwrap();
                match &open {
                    Some((prev, _)) if prev == label => {}
                    _ => {
                        if !repair {
                            return Err(SchemaError::InvalidTransition(tok.tag.clone(), i).into());
                        }
                        if let Some((prev, start)) = open.take() {
                            spans.push(RawSpan { label: prev, start, end: i });
                        }
                        open = Some((label.to_string(), i));
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    if let Some((label, start)) = open {
        spans.push(RawSpan {
            label,
            start,
            end: sent.tokens.len(),
        });
    }
    Ok(spans)
}

fn build_sentence(raw: &RawSentence, spans: &[EntitySpan]) -> Result<Sentence, CorpusError> {
    let tags = encode_bio(spans, raw.tokens.len())?;
    Ok(Sentence {
        tokens: raw
            .tokens
            .iter()
            .zip(tags)
            .map(|(t, tag)| Token {
                surface: t.surface.clone(),
                tag,
            })
            .collect(),
        source: raw.source.clone(),
        part: raw.part,
    })
}

/// Bookkeeping from a merge: inputs per provenance, duplicates removed, spans
/// dropped per excluded raw label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeReport {
    pub input_sentences: BTreeMap<String, usize>,
    pub duplicates_removed: usize,
    pub dropped_spans: BTreeMap<String, usize>,
    pub output_sentences: usize,
}

/// Unions raw corpora under one schema. Label names are normalized to
/// canonical types; spans whose labels the schema does not carry are dropped
/// and counted (or, with `strict`, reported as `UnknownLabel`). Sentences that
/// repeat an earlier surface sequence within the same part are removed,
/// keeping the first occurrence.
pub fn merge_corpora(
    parts: &[RawCorpus],
    schema: &LabelSchema,
    strict: bool,
) -> Result<(Corpus, MergeReport), CorpusError> {
    let mut report = MergeReport::default();
    let mut seen: BTreeSet<(Vec<String>, u8)> = BTreeSet::new();
    let mut out = Vec::new();

    for part in parts {
        for sent in &part.sentences {
            let provenance = if sent.source.is_empty() {
                "unknown".to_string()
            } else {
                sent.source.clone()
            };
            *report.input_sentences.entry(provenance).or_insert(0) += 1;

            let key = (
                sent.tokens.iter().map(|t| t.surface.clone()).collect(),
                sent.part as u8,
            );
            if !seen.insert(key) {
                report.duplicates_removed += 1;
                continue;
            }

            let mut kept = Vec::new();
            for rs in raw_spans(sent, true)? {
                match schema.normalize_label(&rs.label) {
                    Ok(ty) => kept.push(EntitySpan::new(ty, rs.start, rs.end)),
                    Err(SchemaError::UnknownLabel(label)) => {
                        if strict {
                            return Err(SchemaError::UnknownLabel(label).into());
                        }
                        *report
                            .dropped_spans
                            .entry(label.trim().to_lowercase())
                            .or_insert(0) += 1;
                    }
                    Err(other) => return Err(other.into()),
                }
            }
            out.push(build_sentence(sent, &kept)?);
        }
    }

    report.output_sentences = out.len();
    Ok((
        Corpus {
            sentences: out,
            schema: schema.clone(),
        },
        report,
    ))
}

/// Entity lexicon for distance labeling; phrases stored case-folded.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: Vec<(Vec<String>, String, EntityType)>, // (tokens, joined phrase, type)
    seen: BTreeSet<(String, EntityType)>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, phrase: &str, ty: EntityType) -> Result<(), CorpusError> {
        let folded = phrase.trim().to_lowercase();
        let tokens = tokenize(&folded);
        if tokens.is_empty() {
            return Err(CorpusError::EmptyPhrase);
        }
        let joined = tokens.join(" ");
        if self.seen.insert((joined.clone(), ty.clone())) {
            self.entries.push((tokens, joined, ty));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads `phrase<TAB>type` lines; type names are normalized through the
    /// schema.
    pub fn read<R: std::io::BufRead>(r: R, schema: &LabelSchema) -> Result<Self, CorpusError> {
        let mut lex = Self::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (phrase, ty) = line
                .split_once('\t')
                .ok_or_else(|| CorpusError::MalformedLine(lineno + 1, line.clone()))?;
            lex.insert(phrase, schema.normalize_label(ty)?)?;
        }
        Ok(lex)
    }
}

/// Projects lexicon phrases onto raw text: every maximal case-insensitive
/// token-aligned occurrence becomes a span. Longer matches win; among equal
/// lengths the leftmost wins; accepted matches block overlapping later ones.
pub fn distance_label(
    text: &str,
    lex: &Lexicon,
    source: &str,
    part: Part,
) -> Result<Sentence, CorpusError> {
    let surfaces = tokenize(text);
    let folded: Vec<String> = surfaces.iter().map(|s| s.to_lowercase()).collect();

    let mut candidates: Vec<(usize, usize, &EntityType)> = Vec::new(); // (start, len, type)
    for (ptoks, _, ty) in &lex.entries {
        if ptoks.len() > folded.len() {
            continue;
        }
        for start in 0..=(folded.len() - ptoks.len()) {
            if folded[start..start + ptoks.len()] == ptoks[..] {
                candidates.push((start, ptoks.len(), ty));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.1.cmp(&a.1) // longest first
            .then(a.0.cmp(&b.0)) // then leftmost
            .then(a.2.name().cmp(b.2.name()))
    });

    let mut taken = vec![false; folded.len()];
    let mut spans = Vec::new();
    for (start, len, ty) in candidates {
        if taken[start..start + len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        spans.push(EntitySpan::new(ty.clone(), start, start + len));
    }
    spans.sort();

    let tags = encode_bio(&spans, surfaces.len())?;
    Ok(Sentence {
        tokens: surfaces
            .into_iter()
            .zip(tags)
            .map(|(surface, tag)| Token { surface, tag })
            .collect(),
        source: source.to_string(),
        part,
    })
}

/// Inclusive count range for stratification rules; `max = None` means open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountRange {
    pub min: usize,
    pub max: Option<usize>,
}

impl CountRange {
    pub fn exact(n: usize) -> Self {
        Self {
            min: n,
            max: Some(n),
        }
    }

    pub fn between(lo: usize, hi: usize) -> Self {
        Self {
            min: lo,
            max: Some(hi),
        }
    }

    pub fn matches(&self, n: usize) -> bool {
        n >= self.min && self.max.map_or(true, |m| n <= m)
    }
}

/// One selection group: predicates over per-sentence mention counts of two
/// pivot types (research-problem and method in the shipped configuration).
#[derive(Debug, Clone)]
pub struct GroupRule {
    pub name: String,
    pub problems: CountRange,
    pub methods: CountRange,
}

/// Uniformly samples up to `caps[i]` sentences from each rule's group,
/// without replacement, deterministically for a fixed seed. Sentences match
/// the first rule that accepts them; empty groups simply contribute nothing.
pub fn stratify_select(
    corpus: &Corpus,
    rules: &[GroupRule],
    caps: &[usize],
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if rules.len() != caps.len() {
        return Err(CorpusError::BadRatios(format!(
            "{} rules but {} caps",
            rules.len(),
            caps.len()
        )));
    }
    let problem = EntityType::new("research-problem").expect("valid name");
    let method = EntityType::new("method").expect("valid name");

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); rules.len()];
    for (i, sent) in corpus.sentences.iter().enumerate() {
        let np = sent.mention_count(&problem);
        let nm = sent.mention_count(&method);
        if let Some(g) = rules
            .iter()
            .position(|r| r.problems.matches(np) && r.methods.matches(nm))
        {
            groups[g].push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for (group, &cap) in groups.iter().zip(caps) {
        if group.len() <= cap {
            selected.extend_from_slice(group);
        } else {
            let mut shuffled = group.clone();
            shuffled.shuffle(&mut rng);
            selected.extend_from_slice(&shuffled[..cap]);
        }
    }
    selected.sort_unstable();

    Ok(Corpus {
        sentences: selected
            .into_iter()
            .map(|i| corpus.sentences[i].clone())
            .collect(),
        schema: corpus.schema.clone(),
    })
}

/// Deterministic shuffled partition into train/dev/test. Ratios must be
/// positive and sum to one; each part's size is within one sentence of the
/// exact proportion.
pub fn split(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let (r1, r2, r3) = ratios;
    if r1 <= 0.0 || r2 <= 0.0 || r3 <= 0.0 {
        return Err(CorpusError::BadRatios("ratios must be positive".into()));
    }
    if (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(format!(
            "ratios sum to {}, expected 1",
            r1 + r2 + r3
        )));
    }
    let n = corpus.sentences.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let b1 = (r1 * n as f64).round() as usize;
    let b2 = ((r1 + r2) * n as f64).round() as usize;
    let pick = |range: &[usize]| Corpus {
        sentences: range.iter().map(|&i| corpus.sentences[i].clone()).collect(),
        schema: corpus.schema.clone(),
    };
    Ok((pick(&order[..b1]), pick(&order[b1..b2]), pick(&order[b2..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LabelSchema {
        LabelSchema::canonical()
    }

    fn raw_sentence(tokens: &[(&str, &str)], source: &str, part: Part) -> RawSentence {
        RawSentence {
            tokens: tokens
                .iter()
                .map(|(s, t)| RawToken {
                    surface: s.to_string(),
                    tag: t.to_string(),
                })
                .collect(),
            source: source.to_string(),
            part,
        }
    }

    fn title_corpus(sentences: Vec<RawSentence>) -> RawCorpus {
        RawCorpus { sentences }
    }

    #[test]
    fn from_raw_normalizes_alias_tags() {
        let raw = title_corpus(vec![raw_sentence(
            &[("Parsing", "B-task"), ("text", "O")],
            "NCG",
            Part::Title,
        )]);
        let c = Corpus::from_raw(&raw, &schema(), false).unwrap();
        assert_eq!(c.sentences[0].tokens[0].tag.to_string(), "B-research-problem");
    }

    #[test]
    fn from_raw_rejects_unknown_labels() {
        let raw = title_corpus(vec![raw_sentence(&[("x", "B-generic")], "SciERC", Part::Title)]);
        assert!(matches!(
            Corpus::from_raw(&raw, &schema(), false),
            Err(CorpusError::Schema(SchemaError::UnknownLabel(_)))
        ));
    }

    #[test]
    fn merge_disjoint_parts_sums_sizes() {
        let a = title_corpus(
            (0..10)
                .map(|i| raw_sentence(&[(&format!("a{}", i), "O")], "FTD", Part::Title))
                .collect(),
        );
        let b = title_corpus(
            (0..5)
                .map(|i| raw_sentence(&[(&format!("b{}", i), "O")], "NCG", Part::Title))
                .collect(),
        );
        let (merged, report) = merge_corpora(&[a, b], &schema(), false).unwrap();
        assert_eq!(merged.len(), 15);
        assert_eq!(report.duplicates_removed, 0);
        assert_eq!(report.input_sentences["FTD"], 10);
        assert_eq!(report.input_sentences["NCG"], 5);
    }

    #[test]
    fn merge_normalizes_task_to_research_problem() {
        let a = title_corpus(vec![raw_sentence(
            &[("QA", "B-task")],
            "PwC",
            Part::Title,
        )]);
        let (merged, _) = merge_corpora(&[a], &schema(), false).unwrap();
        assert_eq!(
            merged.sentences[0].tokens[0].tag.to_string(),
            "B-research-problem"
        );
    }

    #[test]
    fn merge_drops_and_counts_excluded_spans() {
        // 5 sentences; "generic" spans must drop with an exact count, kept
        // types must survive.
        let sents = vec![
            raw_sentence(&[("a", "B-generic"), ("b", "I-generic")], "SciERC", Part::Abstract),
            raw_sentence(&[("c", "B-generic"), ("d", "O")], "SciERC", Part::Abstract),
            raw_sentence(&[("e", "B-task"), ("f", "B-generic")], "SciERC", Part::Abstract),
            raw_sentence(&[("g", "O")], "SciERC", Part::Abstract),
            raw_sentence(&[("h", "B-generic"), ("i", "B-generic")], "SciERC", Part::Abstract),
        ];
        let (merged, report) = merge_corpora(&[title_corpus(sents)], &schema(), false).unwrap();
        assert_eq!(merged.len(), 5);
        assert_eq!(report.dropped_spans["generic"], 5);
        assert_eq!(merged.sentences[0].tokens[0].tag, Tag::Outside);
        assert_eq!(
            merged.sentences[2].tokens[0].tag.to_string(),
            "B-research-problem"
        );
        // strict mode propagates instead
        let sents = vec![raw_sentence(&[("a", "B-generic")], "SciERC", Part::Abstract)];
        assert!(merge_corpora(&[title_corpus(sents)], &schema(), true).is_err());
    }

    #[test]
    fn merge_deduplicates_same_surface_and_part() {
        let a = title_corpus(vec![
            raw_sentence(&[("Deep", "O"), ("QA", "B-task")], "FTD", Part::Title),
            raw_sentence(&[("Other", "O")], "FTD", Part::Title),
        ]);
        let b = title_corpus(vec![
            // same surfaces, different tags: still a duplicate; first kept
            raw_sentence(&[("Deep", "O"), ("QA", "O")], "NCG", Part::Title),
            // same surfaces but different part: not a duplicate
            raw_sentence(&[("Deep", "O"), ("QA", "O")], "NCG", Part::Abstract),
        ]);
        let (merged, report) = merge_corpora(&[a, b], &schema(), false).unwrap();
        assert_eq!(merged.len(), 3);
        assert_eq!(report.duplicates_removed, 1);
        assert_eq!(merged.sentences[0].tokens[1].tag.to_string(), "B-research-problem");
    }

    #[test]
    fn distance_label_marks_phrase_occurrences() {
        let mut lex = Lexicon::new();
        lex.insert("question answering", EntityType::new("research-problem").unwrap())
            .unwrap();
        let s = distance_label("A Survey of Question Answering", &lex, "PwC", Part::Title).unwrap();
        let tags: Vec<String> = s.tokens.iter().map(|t| t.tag.to_string()).collect();
        assert_eq!(
            tags,
            ["O", "O", "O", "B-research-problem", "I-research-problem"]
        );
    }

    #[test]
    fn distance_label_absent_phrase_gives_all_outside() {
        let mut lex = Lexicon::new();
        lex.insert("graph networks", EntityType::new("method").unwrap())
            .unwrap();
        let s = distance_label("Plain title here", &lex, "PwC", Part::Title).unwrap();
        assert!(s.tokens.iter().all(|t| t.tag == Tag::Outside));
    }

    #[test]
    fn distance_label_longest_match_wins() {
        let mut lex = Lexicon::new();
        let t1 = EntityType::new("method").unwrap();
        lex.insert("neural machine translation", t1.clone()).unwrap();
        lex.insert("machine translation", t1.clone()).unwrap();
        let s = distance_label(
            "Advances in neural machine translation today",
            &lex,
            "PwC",
            Part::Title,
        )
        .unwrap();
        assert_eq!(s.spans(), vec![EntitySpan::new(t1, 2, 5)]);
    }

    #[test]
    fn distance_label_equal_length_leftmost_wins() {
        let mut lex = Lexicon::new();
        let ty = EntityType::new("method").unwrap();
        lex.insert("alpha beta", ty.clone()).unwrap();
        lex.insert("beta gamma", ty.clone()).unwrap();
        let s = distance_label("alpha beta gamma", &lex, "x", Part::Title).unwrap();
        assert_eq!(s.spans(), vec![EntitySpan::new(ty, 0, 2)]);
    }

    #[test]
    fn distance_label_is_token_boundary_aligned() {
        let mut lex = Lexicon::new();
        lex.insert("art", EntityType::new("method").unwrap()).unwrap();
        let s = distance_label("state-of-the-art art", &lex, "x", Part::Title).unwrap();
        let tags: Vec<String> = s.tokens.iter().map(|t| t.tag.to_string()).collect();
        assert_eq!(tags, ["O", "B-method"]);
    }

    #[test]
    fn stratify_caps_and_determinism() {
        let problem = EntityType::new("research-problem").unwrap();
        let mut corpus = Corpus::new(schema());
        for i in 0..30 {
            let with_problem = i % 3 != 0; // 20 with, 10 without
            let tags = if with_problem {
                vec![Tag::Begin(problem.clone()), Tag::Outside]
            } else {
                vec![Tag::Outside, Tag::Outside]
            };
            corpus.sentences.push(Sentence {
                tokens: vec![
                    Token {
                        surface: format!("w{}", i),
                        tag: tags[0].clone(),
                    },
                    Token {
                        surface: "x".into(),
                        tag: tags[1].clone(),
                    },
                ],
                source: "t".into(),
                part: Part::Title,
            });
        }
        let rules = vec![
            GroupRule {
                name: "problems".into(),
                problems: CountRange { min: 1, max: None },
                methods: CountRange::exact(0),
            },
            GroupRule {
                name: "none".into(),
                problems: CountRange::exact(0),
                methods: CountRange::exact(0),
            },
        ];
        let picked = stratify_select(&corpus, &rules, &[5, 100], 42).unwrap();
        assert_eq!(picked.len(), 5 + 10);
        let again = stratify_select(&corpus, &rules, &[5, 100], 42).unwrap();
        assert_eq!(picked, again);
        let different = stratify_select(&corpus, &rules, &[5, 100], 43).unwrap();
        assert_ne!(picked, different);

        // cap 0 selects nothing from that group
        let none = stratify_select(&corpus, &rules, &[0, 0], 1).unwrap();
        assert!(none.is_empty());

        // cap >= group size returns the whole group as a set
        let all = stratify_select(&corpus, &rules, &[1000, 1000], 7).unwrap();
        assert_eq!(all.len(), 30);
    }

    #[test]
    fn split_partitions_deterministically() {
        let mut corpus = Corpus::new(schema());
        for i in 0..100 {
            corpus.sentences.push(Sentence {
                tokens: vec![Token {
                    surface: format!("w{}", i),
                    tag: Tag::Outside,
                }],
                source: "t".into(),
                part: Part::Title,
            });
        }
        let (tr, dv, te) = split(&corpus, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (80, 10, 10));

        let (tr2, dv2, te2) = split(&corpus, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(dv, dv2);
        assert_eq!(te, te2);

        // union = corpus, pairwise disjoint
        let mut all: Vec<String> = tr
            .sentences
            .iter()
            .chain(&dv.sentences)
            .chain(&te.sentences)
            .map(|s| s.tokens[0].surface.clone())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);

        assert!(matches!(
            split(&corpus, (0.5, 0.5, 0.5), 1),
            Err(CorpusError::BadRatios(_))
        ));
        assert!(matches!(
            split(&corpus, (1.0, 0.0, 0.0), 1),
            Err(CorpusError::BadRatios(_))
        ));
    }

    #[test]
    fn lexicon_rejects_empty_and_dedups() {
        let mut lex = Lexicon::new();
        let ty = EntityType::new("tool").unwrap();
        assert!(matches!(
            lex.insert("   ", ty.clone()),
            Err(CorpusError::EmptyPhrase)
        ));
        lex.insert("SpaCy", ty.clone()).unwrap();
        lex.insert("spacy", ty.clone()).unwrap(); // case-folds to the same entry
        assert_eq!(lex.len(), 1);
    }
}
