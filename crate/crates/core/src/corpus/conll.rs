//! Two-column CoNLL reader/writer.
//!
//! Format: `token<TAB>tag` lines, one blank line between sentences, optional
//! `#source=...` / `#part=...` comment lines ahead of each sentence. UTF-8,
//! LF line endings.

use std::io::{BufRead, Write};

use crate::schema::{repair_bio, Tag};

use super::{CorpusError, Part, RawCorpus, RawSentence, RawToken};

/// Parses a stream into sentences with raw (un-normalized) tag strings.
/// With `repair` on, stray I-tags are rewritten to B at load; off, they fail
/// validation downstream when tags are interpreted.
pub fn read_conll<R: BufRead>(reader: R, repair: bool) -> Result<RawCorpus, CorpusError> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<RawToken> = Vec::new();
    let mut source = String::new();
    let mut part = Part::Title;

    let mut flush = |tokens: &mut Vec<RawToken>,
                     source: &mut String,
                     part: &mut Part|
     -> Result<(), CorpusError> {
        if tokens.is_empty() {
            return Ok(());
        }
        sentences.push(RawSentence {
            tokens: std::mem::take(tokens),
            source: std::mem::take(source),
            part: *part,
        });
        *part = Part::Title;
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut source, &mut part)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            for kv in comment.split_whitespace() {
                match kv.split_once('=') {
                    Some(("source", v)) => source = v.to_string(),
                    Some(("part", v)) => part = Part::parse(v)?,
                    _ => {} // free-form comments pass through unparsed
                }
            }
            continue;
        }
        let mut cols = line.split('\t');
        let (surface, tag) = match (cols.next(), cols.next(), cols.next()) {
            (Some(s), Some(t), None) if !s.is_empty() && !t.is_empty() => (s, t),
            _ => return Err(CorpusError::MalformedLine(lineno, line.clone())),
        };
        tokens.push(RawToken {
            surface: surface.to_string(),
            tag: tag.to_string(),
        });
    }
    flush(&mut tokens, &mut source, &mut part)?;

    let mut corpus = RawCorpus { sentences };
    if repair {
        repair_raw_tags(&mut corpus)?;
    }
    Ok(corpus)
}

/// Rewrites each sentence's tag strings through BIO repair where they parse
/// as tags. Labels that are not B-/I-/O strings are left untouched (they fail
/// later, at normalization).
fn repair_raw_tags(corpus: &mut RawCorpus) -> Result<(), CorpusError> {
    for sent in &mut corpus.sentences {
        let parsed: Option<Vec<Tag>> = sent
            .tokens
            .iter()
            .map(|t| Tag::parse(&t.tag).ok())
            .collect();
        if let Some(tags) = parsed {
            for (tok, fixed) in sent.tokens.iter_mut().zip(repair_bio(&tags)) {
                tok.tag = fixed.to_string();
            }
        }
    }
    Ok(())
}

/// Writes sentences in canonical form: provenance comments, `token<TAB>tag`
/// lines, one blank line after each sentence.
pub fn write_conll<W: Write>(corpus: &RawCorpus, mut w: W) -> Result<(), CorpusError> {
    for sent in &corpus.sentences {
        if !sent.source.is_empty() {
            writeln!(w, "#source={}", sent.source)?;
        }
        writeln!(w, "#part={}", sent.part)?;
        for tok in &sent.tokens {
            writeln!(w, "{}\t{}", tok.surface, tok.tag)?;
        }
        writeln!(w)?;
    }
    Ok(())
}
