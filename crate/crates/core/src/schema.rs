//! Entity-type inventory, alias normalization and BIO tag algebra.
//!
//! The canonical registry holds the seven scholarly entity types the tagger
//! targets: research-problem, method, solution, tool, resource, dataset and
//! language. Source corpora name the same concepts differently ("task",
//! "technique", "focus", ...); [`LabelSchema::normalize_label`] folds those
//! aliases onto the canonical names. Types outside the registry (e.g.
//! "generic", "metric", "score") do not normalize and are rejected or dropped
//! by the callers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("UnknownLabel: {0:?} maps to no registered entity type")]
    UnknownLabel(String),
    #[error("UnknownTag: {0:?} is not a valid tag string")]
    UnknownTag(String),
    #[error("InvalidTypeName: {0:?} (expected lowercase hyphen-joined)")]
    InvalidTypeName(String),
    #[error("OverlapError: spans {0} and {1} overlap")]
    OverlapError(String, String),
    #[error("OutOfRange: span {0} exceeds sentence length {1}")]
    OutOfRange(String, usize),
    #[error("InvalidTransition: stray {0} at token {1} (repair disabled)")]
    InvalidTransition(String, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A registered entity type. Names are unique, lowercase and hyphen-joined.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityType(String);

impl EntityType {
    pub fn new(name: &str) -> Result<Self, SchemaError> {
        let ok = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
            && !name.starts_with('-')
            && !name.ends_with('-');
        if !ok {
            return Err(SchemaError::InvalidTypeName(name.to_string()));
        }
        Ok(Self(name.to_string()))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-token tag: outside any entity, or begin/inside of a typed span.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(EntityType),
    Inside(EntityType),
}

impl Tag {
    pub fn entity_type(&self) -> Option<&EntityType> {
        match self {
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
            Tag::Outside => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self, SchemaError> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let bad = || SchemaError::UnknownTag(s.to_string());
        let (prefix, rest) = s.split_once('-').ok_or_else(bad)?;
        let ty = EntityType::new(rest).map_err(|_| bad())?;
        match prefix {
            "B" => Ok(Tag::Begin(ty)),
            "I" => Ok(Tag::Inside(ty)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(t) => write!(f, "B-{}", t),
            Tag::Inside(t) => write!(f, "I-{}", t),
        }
    }
}

/// Typed half-open token range `[start, end)` naming one entity mention.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntitySpan {
    pub entity_type: EntityType,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(entity_type: EntityType, start: usize, end: usize) -> Self {
        debug_assert!(start < end, "span must be non-empty");
        Self {
            entity_type,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{})", self.entity_type, self.start, self.end)
    }
}

/// The entity-type registry plus the alias table used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSchema {
    types: Vec<EntityType>,
    // alias (case-folded) -> canonical index; BTreeMap keeps serialization stable
    aliases: BTreeMap<String, usize>,
}

/// The seven canonical types with the alias rows they absorb from prior
/// corpora. Aliases are matched case-insensitively.
const CANONICAL: &[(&str, &[&str])] = &[
    ("research-problem", &["domain", "application", "task", "research problem"]),
    ("method", &["technique", "technology and method"]),
    ("solution", &["focus"]),
    ("tool", &["tool and library"]),
    ("resource", &["language resource"]),
    ("dataset", &["language resource product"]),
    ("language", &[]),
];

impl LabelSchema {
    /// The canonical seven-type registry.
    pub fn canonical() -> Self {
        let mut schema = Self {
            types: Vec::new(),
            aliases: BTreeMap::new(),
        };
        for (name, aliases) in CANONICAL {
            let idx = schema.push_type(EntityType::new(name).expect("canonical names are valid"));
            for a in *aliases {
                schema.aliases.insert(a.to_string(), idx);
            }
        }
        schema
    }

    /// A registry over an explicit type list (schema is extensible by
    /// configuration); every type aliases itself.
    pub fn with_types(names: &[&str]) -> Result<Self, SchemaError> {
        let mut schema = Self {
            types: Vec::new(),
            aliases: BTreeMap::new(),
        };
        for name in names {
            let ty = EntityType::new(name)?;
            if schema.types.contains(&ty) {
                return Err(SchemaError::InvalidTypeName(format!("duplicate {}", name)));
            }
            schema.push_type(ty);
        }
        Ok(schema)
    }

    fn push_type(&mut self, ty: EntityType) -> usize {
        let idx = self.types.len();
        // the canonical name and its space-joined form always resolve
        self.aliases.insert(ty.name().to_string(), idx);
        self.aliases.insert(ty.name().replace('-', " "), idx);
        self.types.push(ty);
        idx
    }

    /// Adds an alias for an already-registered type.
    pub fn add_alias(&mut self, alias: &str, canonical: &str) -> Result<(), SchemaError> {
        let idx = self
            .types
            .iter()
            .position(|t| t.name() == canonical)
            .ok_or_else(|| SchemaError::UnknownLabel(canonical.to_string()))?;
        self.aliases.insert(alias.trim().to_lowercase(), idx);
        Ok(())
    }

    pub fn types(&self) -> &[EntityType] {
        &self.types
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn contains(&self, ty: &EntityType) -> bool {
        self.types.contains(ty)
    }

    /// Resolves a raw label name (any casing, alias or canonical) to its
    /// canonical type.
    pub fn normalize_label(&self, raw: &str) -> Result<EntityType, SchemaError> {
        let key = raw.trim().to_lowercase();
        self.aliases
            .get(&key)
            .map(|&i| self.types[i].clone())
            .ok_or_else(|| SchemaError::UnknownLabel(raw.to_string()))
    }

    /// Full tag inventory: O first, then B/I per type in registry order.
    /// Size is `2 * num_types + 1`.
    pub fn tags(&self) -> Vec<Tag> {
        let mut out = vec![Tag::Outside];
        for t in &self.types {
            out.push(Tag::Begin(t.clone()));
            out.push(Tag::Inside(t.clone()));
        }
        out
    }

    pub fn num_tags(&self) -> usize {
        2 * self.types.len() + 1
    }

    /// Dense index of a tag in the [`LabelSchema::tags`] order.
    pub fn tag_index(&self, tag: &Tag) -> Option<usize> {
        match tag {
            Tag::Outside => Some(0),
            Tag::Begin(t) => self.type_index(t).map(|i| 1 + 2 * i),
            Tag::Inside(t) => self.type_index(t).map(|i| 2 + 2 * i),
        }
    }

    pub fn type_index(&self, ty: &EntityType) -> Option<usize> {
        self.types.iter().position(|t| t == ty)
    }

    /// Writes one canonical type name per line.
    pub fn write_types<W: Write>(&self, mut w: W) -> Result<(), SchemaError> {
        for t in &self.types {
            writeln!(w, "{}", t)?;
        }
        Ok(())
    }

    /// Reads a type list written by [`LabelSchema::write_types`].
    pub fn read_types<R: BufRead>(r: R) -> Result<Self, SchemaError> {
        let mut names = Vec::new();
        for line in r.lines() {
            let line = line?;
            let name = line.trim();
            if !name.is_empty() {
                names.push(name.to_string());
            }
        }
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Self::with_types(&refs)
    }

    /// Writes the alias table as `alias<TAB>canonical` lines.
    pub fn write_aliases<W: Write>(&self, mut w: W) -> Result<(), SchemaError> {
        for (alias, idx) in &self.aliases {
            writeln!(w, "{}\t{}", alias, self.types[*idx])?;
        }
        Ok(())
    }

    /// Loads `alias<TAB>canonical` lines into this schema.
    pub fn read_aliases<R: BufRead>(&mut self, r: R) -> Result<(), SchemaError> {
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (alias, canonical) = line
                .split_once('\t')
                .ok_or_else(|| SchemaError::UnknownLabel(line.clone()))?;
            self.add_alias(alias, canonical.trim())?;
        }
        Ok(())
    }
}

/// Expands non-overlapping spans into one tag per token: B at each span
/// start, I inside, O elsewhere.
pub fn encode_bio(spans: &[EntitySpan], length: usize) -> Result<Vec<Tag>, SchemaError> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[0].overlaps(w[1]) {
            return Err(SchemaError::OverlapError(
                w[0].to_string(),
                w[1].to_string(),
            ));
        }
    }
    let mut tags = vec![Tag::Outside; length];
    for span in &sorted {
        if span.end > length {
            return Err(SchemaError::OutOfRange(span.to_string(), length));
        }
        tags[span.start] = Tag::Begin(span.entity_type.clone());
        for t in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *t = Tag::Inside(span.entity_type.clone());
        }
    }
    Ok(tags)
}

/// Recovers spans from a tag sequence. A stray `I-t` (no preceding `B-t`/`I-t`
/// of the same type) starts a new span when `repair` is on and is an
/// `InvalidTransition` error otherwise.
pub fn decode_bio(tags: &[Tag], repair: bool) -> Result<Vec<EntitySpan>, SchemaError> {
    let mut spans = Vec::new();
    let mut open: Option<(EntityType, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => {
                if let Some((ty, start)) = open.take() {
                    spans.push(EntitySpan::new(ty, start, i));
                }
            }
            Tag::Begin(ty) => {
                if let Some((prev, start)) = open.take() {
                    spans.push(EntitySpan::new(prev, start, i));
                }
                open = Some((ty.clone(), i));
            }
            Tag::Inside(ty) => match &open {
                Some((prev, _)) if prev == ty => {}
                _ => {
                    if !repair {
                        return Err(SchemaError::InvalidTransition(tag.to_string(), i));
                    }
                    if let Some((prev, start)) = open.take() {
                        spans.push(EntitySpan::new(prev, start, i));
                    }
                    open = Some((ty.clone(), i));
                }
            },
        }
    }
    if let Some((ty, start)) = open {
        spans.push(EntitySpan::new(ty, start, tags.len()));
    }
    Ok(spans)
}

/// Applies stray-I repair to a tag sequence in place of failing.
pub fn repair_bio(tags: &[Tag]) -> Vec<Tag> {
    let spans = decode_bio(tags, true).expect("repairing decode cannot fail");
    encode_bio(&spans, tags.len()).expect("decoded spans are valid")
}
