//! Column-formatted corpus ingestion, BIO tag handling, and entity-level scoring.
//!
//! The internal tagging scheme is BIO2: every entity opens with `B-TYPE` and
//! continues with `I-TYPE`; `O` marks non-entity tokens. IOB1 input is
//! converted on ingestion. Decoding of ill-formed sequences is permissive:
//! an `I-X` that does not continue a chunk opens a new one.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::CorpusError;

/// Index into a [`TagSet`]'s label list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelId(pub usize);

impl LabelId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Position part of a positive BIO label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Begin,
    Inside,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Begin => write!(f, "B"),
            Position::Inside => write!(f, "I"),
        }
    }
}

/// A label: either the single negative `O` or a position-type pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Outside,
    Entity { position: Position, type_index: usize },
}

/// The label alphabet. Label 0 is always `O`; each entity type contributes a
/// `B-` and an `I-` label, appended in first-appearance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSet {
    labels: Vec<Label>,
    types: Vec<String>,
}

impl TagSet {
    pub fn new() -> Self {
        TagSet {
            labels: vec![Label::Outside],
            types: Vec::new(),
        }
    }

    /// Build a tag set from a list of entity type names.
    pub fn with_types<S: AsRef<str>>(types: &[S]) -> Self {
        let mut ts = TagSet::new();
        for t in types {
            ts.ensure_type(t.as_ref());
        }
        ts
    }

    pub fn outside(&self) -> LabelId {
        LabelId(0)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always contains O
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn label(&self, id: LabelId) -> &Label {
        &self.labels[id.0]
    }

    pub fn is_positive(&self, id: LabelId) -> bool {
        !matches!(self.labels[id.0], Label::Outside)
    }

    pub fn position(&self, id: LabelId) -> Option<Position> {
        match self.labels[id.0] {
            Label::Outside => None,
            Label::Entity { position, .. } => Some(position),
        }
    }

    pub fn type_index(&self, id: LabelId) -> Option<usize> {
        match self.labels[id.0] {
            Label::Outside => None,
            Label::Entity { type_index, .. } => Some(type_index),
        }
    }

    pub fn type_name(&self, id: LabelId) -> Option<&str> {
        self.type_index(id).map(|t| self.types[t].as_str())
    }

    /// Register an entity type, returning its index. Adds `B-` and `I-`
    /// labels on first appearance.
    pub fn ensure_type(&mut self, ty: &str) -> usize {
        if let Some(i) = self.types.iter().position(|t| t == ty) {
            return i;
        }
        let type_index = self.types.len();
        self.types.push(ty.to_string());
        self.labels.push(Label::Entity {
            position: Position::Begin,
            type_index,
        });
        self.labels.push(Label::Entity {
            position: Position::Inside,
            type_index,
        });
        type_index
    }

    pub fn id_of(&self, position: Position, type_index: usize) -> LabelId {
        // O at 0, then (B, I) pairs per type.
        let off = match position {
            Position::Begin => 1,
            Position::Inside => 2,
        };
        LabelId(2 * type_index + off)
    }

    /// Parse a BIO tag string against this tag set, extending it with unseen
    /// types.
    pub fn intern_tag(&mut self, tag: &str) -> Result<LabelId, CorpusError> {
        if tag == "O" {
            return Ok(self.outside());
        }
        let (pos, ty) = split_tag(tag)?;
        let type_index = self.ensure_type(ty);
        Ok(self.id_of(pos, type_index))
    }

    /// Look up a BIO tag string without extending the tag set.
    pub fn lookup_tag(&self, tag: &str) -> Option<LabelId> {
        if tag == "O" {
            return Some(self.outside());
        }
        let (pos, ty) = split_tag(tag).ok()?;
        let type_index = self.types.iter().position(|t| t == ty)?;
        Some(self.id_of(pos, type_index))
    }

    pub fn tag_str(&self, id: LabelId) -> String {
        match &self.labels[id.0] {
            Label::Outside => "O".to_string(),
            Label::Entity {
                position,
                type_index,
            } => format!("{}-{}", position, self.types[*type_index]),
        }
    }

    /// Ids of all labels with the given position part.
    pub fn ids_with_position(&self, pos: Position) -> Vec<LabelId> {
        (0..self.len())
            .map(LabelId)
            .filter(|&id| self.position(id) == Some(pos))
            .collect()
    }

    /// Ids of all labels with the given type part (its B- and I- labels).
    pub fn ids_with_type(&self, type_index: usize) -> Vec<LabelId> {
        (0..self.len())
            .map(LabelId)
            .filter(|&id| self.type_index(id) == Some(type_index))
            .collect()
    }
}

impl Default for TagSet {
    fn default() -> Self {
        TagSet::new()
    }
}

fn split_tag(tag: &str) -> Result<(Position, &str), CorpusError> {
    let (prefix, ty) = tag
        .split_once('-')
        .ok_or_else(|| CorpusError::BadTag(tag.to_string()))?;
    let pos = match prefix {
        "B" => Position::Begin,
        "I" => Position::Inside,
        _ => return Err(CorpusError::BadTag(tag.to_string())),
    };
    if ty.is_empty() {
        return Err(CorpusError::BadTag(tag.to_string()));
    }
    Ok((pos, ty))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub observed: LabelId,
    pub gold: Option<LabelId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn observed_tags(&self) -> Vec<LabelId> {
        self.tokens.iter().map(|t| t.observed).collect()
    }

    pub fn gold_tags(&self) -> Option<Vec<LabelId>> {
        self.tokens.iter().map(|t| t.gold).collect()
    }
}

/// A maximal BIO chunk: token range `[start, end)` of one entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
    pub type_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub tagset: TagSet,
}

impl Corpus {
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    pub fn has_gold(&self) -> bool {
        self.sentences
            .iter()
            .all(|s| s.tokens.iter().all(|t| t.gold.is_some()))
    }

    /// Copy observed tags into the gold slot of every token.
    pub fn adopt_observed_as_gold(&mut self) {
        for s in &mut self.sentences {
            for t in &mut s.tokens {
                t.gold = Some(t.observed);
            }
        }
    }

    /// Drop gold tags, keeping only the observed annotation.
    pub fn strip_gold(&mut self) {
        for s in &mut self.sentences {
            for t in &mut s.tokens {
                t.gold = None;
            }
        }
    }

    pub fn observed_spans(&self) -> Vec<EntitySpan> {
        self.sentences
            .iter()
            .flat_map(|s| extract_spans_in(s.id, &s.observed_tags(), &self.tagset))
            .collect()
    }

    pub fn gold_spans(&self) -> Result<Vec<EntitySpan>, CorpusError> {
        let mut out = Vec::new();
        for s in &self.sentences {
            let gold = s.gold_tags().ok_or(CorpusError::MissingGold)?;
            out.extend(extract_spans_in(s.id, &gold, &self.tagset));
        }
        Ok(out)
    }
}

/// Parse CoNLL-style column text. Sentences are blank-line delimited; the
/// token and tag are taken from the given column indices. IOB1 tags are
/// normalized to BIO2. Lines whose token is `-DOCSTART-` are skipped.
pub fn parse_conll(text: &str, token_column: usize, tag_column: usize) -> Result<Corpus, CorpusError> {
    let mut tagset = TagSet::new();
    let mut sentences = Vec::new();
    let mut surfaces: Vec<String> = Vec::new();
    let mut tags: Vec<LabelId> = Vec::new();

    let mut flush = |surfaces: &mut Vec<String>, tags: &mut Vec<LabelId>, tagset: &TagSet| {
        if surfaces.is_empty() {
            return;
        }
        normalize_bio2(tags, tagset);
        let id = sentences.len();
        let tokens = surfaces
            .drain(..)
            .zip(tags.drain(..))
            .map(|(surface, observed)| Token {
                surface,
                observed,
                gold: None,
            })
            .collect();
        sentences.push(Sentence { id, tokens });
    };

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut surfaces, &mut tags, &tagset);
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let ncols = cols.len();
        let (token, tag) = match (cols.get(token_column), cols.get(tag_column)) {
            (Some(t), Some(g)) => (*t, *g),
            _ => {
                return Err(CorpusError::BadLine {
                    line: lineno + 1,
                    found: ncols,
                    needed: token_column.max(tag_column) + 1,
                })
            }
        };
        if token == "-DOCSTART-" {
            continue;
        }
        let id = tagset
            .intern_tag(tag)
            .map_err(|_| CorpusError::BadTagAt {
                line: lineno + 1,
                tag: tag.to_string(),
            })?;
        surfaces.push(token.to_string());
        tags.push(id);
    }
    flush(&mut surfaces, &mut tags, &tagset);

    Ok(Corpus { sentences, tagset })
}

/// Rewrite a tag sequence in place so it is valid BIO2: an `I-X` that does
/// not continue a chunk of type X becomes `B-X`. Valid BIO2 input is
/// unchanged; IOB1 input is converted.
pub fn normalize_bio2(tags: &mut [LabelId], tagset: &TagSet) {
    for i in 0..tags.len() {
        if tagset.position(tags[i]) != Some(Position::Inside) {
            continue;
        }
        let ty = tagset.type_index(tags[i]);
        let continues = i > 0 && tagset.is_positive(tags[i - 1]) && tagset.type_index(tags[i - 1]) == ty;
        if !continues {
            tags[i] = tagset.id_of(Position::Begin, ty.unwrap());
        }
    }
}

/// Extract maximal BIO chunks from a tag sequence. Permissive: an `I-X` not
/// preceded by `B-X`/`I-X` opens a new chunk.
pub fn extract_spans(tags: &[LabelId], tagset: &TagSet) -> Vec<EntitySpan> {
    extract_spans_in(0, tags, tagset)
}

pub fn extract_spans_in(sentence_id: usize, tags: &[LabelId], tagset: &TagSet) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (start, type)
    for (i, &tag) in tags.iter().enumerate() {
        match tagset.label(tag) {
            Label::Outside => {
                if let Some((start, ty)) = open.take() {
                    spans.push(EntitySpan {
                        sentence_id,
                        start,
                        end: i,
                        type_index: ty,
                    });
                }
            }
            Label::Entity {
                position,
                type_index,
            } => {
                let continues =
                    *position == Position::Inside && open.map(|(_, ty)| ty) == Some(*type_index);
                if !continues {
                    if let Some((start, ty)) = open.take() {
                        spans.push(EntitySpan {
                            sentence_id,
                            start,
                            end: i,
                            type_index: ty,
                        });
                    }
                    open = Some((i, *type_index));
                }
            }
        }
    }
    if let Some((start, ty)) = open {
        spans.push(EntitySpan {
            sentence_id,
            start,
            end: tags.len(),
            type_index: ty,
        });
    }
    spans
}

/// Write tags for a non-overlapping span set (inverse of [`extract_spans`]).
pub fn tags_of_spans(spans: &[EntitySpan], len: usize, tagset: &TagSet) -> Vec<LabelId> {
    let mut tags = vec![tagset.outside(); len];
    for span in spans {
        tags[span.start] = tagset.id_of(Position::Begin, span.type_index);
        for t in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *t = tagset.id_of(Position::Inside, span.type_index);
        }
    }
    tags
}

/// Re-intern a corpus into another tag set (tag ids depend on the order
/// types were first seen, so two parses of equivalent data may disagree).
/// Fails on tags whose type the target set does not know.
pub fn align_to(corpus: &Corpus, tagset: &TagSet) -> Result<Corpus, CorpusError> {
    if corpus.tagset == *tagset {
        return Ok(corpus.clone());
    }
    let remap = |id: LabelId| -> Result<LabelId, CorpusError> {
        let tag = corpus.tagset.tag_str(id);
        tagset.lookup_tag(&tag).ok_or(CorpusError::BadTag(tag))
    };
    let mut out = corpus.clone();
    out.tagset = tagset.clone();
    for sentence in &mut out.sentences {
        for token in &mut sentence.tokens {
            token.observed = remap(token.observed)?;
            token.gold = token.gold.map(remap).transpose()?;
        }
    }
    Ok(out)
}

/// Render a corpus back to two-column CoNLL text (observed tags).
pub fn serialize_conll(corpus: &Corpus) -> String {
    let mut out = String::new();
    for sentence in &corpus.sentences {
        for token in &sentence.tokens {
            out.push_str(&token.surface);
            out.push(' ');
            out.push_str(&corpus.tagset.tag_str(token.observed));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// P/R from counts with the 0/0 = 1.0 convention; F1 = 0 when P + R = 0.
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Prf {
        let precision = if predicted == 0 {
            1.0
        } else {
            matched as f64 / predicted as f64
        };
        let recall = if gold == 0 {
            1.0
        } else {
            matched as f64 / gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrfReport {
    pub overall: Prf,
    pub per_type: BTreeMap<String, Prf>,
}

/// Entity-level exact-match precision/recall/F1 over aligned tag sequences.
/// A span matches iff boundaries and type are both equal.
pub fn entity_prf(
    pred: &[Vec<LabelId>],
    gold: &[Vec<LabelId>],
    tagset: &TagSet,
) -> Result<PrfReport, CorpusError> {
    if pred.len() != gold.len() {
        return Err(CorpusError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut pred_spans = Vec::new();
    let mut gold_spans = Vec::new();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(CorpusError::LengthMismatch {
                pred: p.len(),
                gold: g.len(),
            });
        }
        pred_spans.extend(extract_spans_in(i, p, tagset));
        gold_spans.extend(extract_spans_in(i, g, tagset));
    }
    Ok(span_prf(&pred_spans, &gold_spans, tagset))
}

pub fn span_prf(pred_spans: &[EntitySpan], gold_spans: &[EntitySpan], tagset: &TagSet) -> PrfReport {
    let gold_set: std::collections::BTreeSet<&EntitySpan> = gold_spans.iter().collect();
    let matched = pred_spans.iter().filter(|s| gold_set.contains(s)).count();
    let overall = Prf::from_counts(matched, pred_spans.len(), gold_spans.len());

    let mut per_type = BTreeMap::new();
    for (ti, name) in tagset.types().iter().enumerate() {
        let p: Vec<&EntitySpan> = pred_spans.iter().filter(|s| s.type_index == ti).collect();
        let g: Vec<&EntitySpan> = gold_spans.iter().filter(|s| s.type_index == ti).collect();
        let m = p.iter().filter(|s| gold_set.contains(**s)).count();
        per_type.insert(name.clone(), Prf::from_counts(m, p.len(), g.len()));
    }
    PrfReport { overall, per_type }
}
