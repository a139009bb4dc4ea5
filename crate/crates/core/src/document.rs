//! OCR'd pages: tokens with page-pixel bounding boxes, the corpus file format,
//! reading order, and document-granular train/validation/test splits.
//!
//! Class indices are 1-based throughout the crate; 0 is reserved for ABSTAIN
//! and is never a legal gold label.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Checks the ordering and non-negativity invariants.
    pub fn check(&self) -> std::result::Result<(), String> {
        let c = [self.x0, self.y0, self.x1, self.y1];
        if c.iter().any(|v| !v.is_finite()) {
            return Err("bbox has a non-finite coordinate".into());
        }
        if c.iter().any(|&v| v < 0.0) {
            return Err("bbox has a negative coordinate".into());
        }
        if self.x1 < self.x0 {
            return Err(format!("bbox x1 ({}) < x0 ({})", self.x1, self.x0));
        }
        if self.y1 < self.y0 {
            return Err(format!("bbox y1 ({}) < y0 ({})", self.y1, self.y0));
        }
        Ok(())
    }
}

/// A bounding box divided by the page dimensions; every coordinate is in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Inclusive point containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn is_valid(&self) -> bool {
        let c = [self.x0, self.y0, self.x1, self.y1];
        c.iter().all(|v| (0.0..=1.0).contains(v)) && self.x0 <= self.x1 && self.y0 <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
    /// Gold class in `1..=K`.
    pub gold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub page_width: f64,
    pub page_height: f64,
    pub tokens: Vec<Token>,
}

impl Document {
    pub fn is_fully_labeled(&self) -> bool {
        self.tokens.iter().all(|t| t.gold.is_some())
    }

    /// Normalized boxes for every token, in token order.
    pub fn normalized_boxes(&self) -> Result<Vec<NormBBox>> {
        self.tokens
            .iter()
            .map(|t| normalize_bbox(&t.bbox, self.page_width, self.page_height))
            .collect()
    }

    /// Checks geometry, text and gold labels against `n_classes`.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let bad_doc = |reason: String| Error::InvalidDocument {
            doc_id: self.doc_id.clone(),
            reason,
        };
        if self.doc_id.is_empty() {
            return Err(bad_doc("empty doc_id".into()));
        }
        for (name, v) in [("width", self.page_width), ("height", self.page_height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad_doc(format!("page {name} must be positive, got {v}")));
            }
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            let bad = |reason: String| Error::InvalidToken {
                doc_id: self.doc_id.clone(),
                token: i,
                reason,
            };
            if tok.text.is_empty() {
                return Err(bad("empty text".into()));
            }
            if tok.text.contains(['\n', '\r']) {
                return Err(bad("text contains a newline".into()));
            }
            tok.bbox.check().map_err(bad)?;
            if tok.bbox.x1 > self.page_width || tok.bbox.y1 > self.page_height {
                return Err(bad(format!(
                    "bbox exceeds the {}x{} page",
                    self.page_width, self.page_height
                )));
            }
            if let Some(g) = tok.gold {
                if g == 0 || g > n_classes {
                    return Err(bad(format!("gold label {g} outside 1..={n_classes}")));
                }
            }
        }
        Ok(())
    }
}

/// Declared class names; name `i` maps to class index `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassVocab {
    names: Vec<String>,
}

impl ClassVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Config("empty class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(ClassVocab { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// 1-based class index of `name`.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    /// Name of 1-based class `k`.
    pub fn name(&self, k: usize) -> Option<&str> {
        k.checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: ClassVocab,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }

    /// Rows in corpus order, then reading order within each document.
    pub fn instances(&self) -> Vec<InstanceRef> {
        let mut out = Vec::with_capacity(self.n_tokens());
        for (d, doc) in self.documents.iter().enumerate() {
            for t in reading_order(doc) {
                out.push(InstanceRef { doc: d, token: t });
            }
        }
        out
    }

    /// Gold label of every instance, aligned with [`Corpus::instances`].
    pub fn gold_labels(&self) -> Vec<Option<usize>> {
        self.instances()
            .iter()
            .map(|r| self.documents[r.doc].tokens[r.token].gold)
            .collect()
    }
}

/// Position of one instance: document index within the corpus and token
/// index within the document's token list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub doc: usize,
    pub token: usize,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    classes: &'a [String],
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    doc_id: &'a str,
    width: f64,
    height: f64,
    tokens: Vec<TokenOut<'a>>,
}

#[derive(Serialize)]
struct TokenOut<'a> {
    text: &'a str,
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
}

/// Reads a corpus: a `{"classes": [...]}` header line followed by one
/// document object per line. Blank lines are skipped. An empty stream yields
/// an empty corpus.
pub fn parse_documents<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut classes: Option<ClassVocab> = None;
    let mut documents = Vec::new();
    let mut ids = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::parse(lineno, "<record>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse(lineno, "<record>", "expected a JSON object"))?;

        let Some(vocab) = &classes else {
            let names = obj
                .get("classes")
                .ok_or_else(|| Error::parse(lineno, "classes", "first record must be the class header"))?;
            let names: Vec<String> = serde_json::from_value(names.clone())
                .map_err(|e| Error::parse(lineno, "classes", e.to_string()))?;
            classes = Some(ClassVocab::new(names).map_err(|e| Error::parse(lineno, "classes", e.to_string()))?);
            continue;
        };

        let doc = parse_record(obj, vocab, lineno)?;
        doc.validate(vocab.len())?;
        if !ids.insert(doc.doc_id.clone()) {
            return Err(Error::InvalidDocument {
                doc_id: doc.doc_id,
                reason: format!("duplicate doc_id (line {lineno})"),
            });
        }
        documents.push(doc);
    }

    Ok(Corpus {
        classes: classes.unwrap_or_default(),
        documents,
    })
}

fn parse_record(obj: &Map<String, Value>, vocab: &ClassVocab, line: usize) -> Result<Document> {
    for key in obj.keys() {
        if !matches!(key.as_str(), "doc_id" | "width" | "height" | "tokens") {
            return Err(Error::parse(line, key.clone(), "unknown field"));
        }
    }
    let doc_id = obj
        .get("doc_id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(line, "doc_id", "missing or not a string"))?
        .to_string();
    let width = number(obj, "width", line)?;
    let height = number(obj, "height", line)?;
    let raw_tokens = obj
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(line, "tokens", "missing or not an array"))?;

    let mut tokens = Vec::with_capacity(raw_tokens.len());
    for (t, raw) in raw_tokens.iter().enumerate() {
        let field = |name: &str| format!("tokens[{t}].{name}");
        let tobj = raw
            .as_object()
            .ok_or_else(|| Error::parse(line, format!("tokens[{t}]"), "expected an object"))?;
        for key in tobj.keys() {
            if !matches!(key.as_str(), "text" | "bbox" | "label") {
                return Err(Error::parse(line, field(key), "unknown field"));
            }
        }
        let text = tobj
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse(line, field("text"), "missing or not a string"))?
            .to_string();
        let coords = tobj
            .get("bbox")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .ok_or_else(|| Error::parse(line, field("bbox"), "expected an array of 4 numbers"))?;
        let mut c = [0.0; 4];
        for (slot, v) in c.iter_mut().zip(coords) {
            *slot = v
                .as_f64()
                .ok_or_else(|| Error::parse(line, field("bbox"), "expected an array of 4 numbers"))?;
        }
        let gold = match tobj.get("label") {
            None | Some(Value::Null) => None,
            Some(Value::String(name)) => Some(vocab.index_of(name).ok_or_else(|| {
                Error::parse(line, field("label"), format!("undeclared class `{name}`"))
            })?),
            Some(_) => return Err(Error::parse(line, field("label"), "expected a string")),
        };
        tokens.push(Token {
            text,
            bbox: BBox::new(c[0], c[1], c[2], c[3]),
            gold,
        });
    }

    Ok(Document {
        doc_id,
        page_width: width,
        page_height: height,
        tokens,
    })
}

fn number(obj: &Map<String, Value>, key: &str, line: usize) -> Result<f64> {
    obj.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::parse(line, key, "missing or not a number"))
}

/// Writes the corpus in the same line format [`parse_documents`] reads.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &HeaderOut {
            classes: corpus.classes.names(),
        },
    )?;
    w.write_all(b"\n")?;
    for doc in &corpus.documents {
        let out = DocumentOut {
            doc_id: &doc.doc_id,
            width: doc.page_width,
            height: doc.page_height,
            tokens: doc
                .tokens
                .iter()
                .map(|t| TokenOut {
                    text: &t.text,
                    bbox: [t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1],
                    label: t.gold.and_then(|g| corpus.classes.name(g)),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &out)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn normalize_bbox(bbox: &BBox, page_width: f64, page_height: f64) -> Result<NormBBox> {
    if !(page_width.is_finite() && page_width > 0.0 && page_height.is_finite() && page_height > 0.0) {
        return Err(Error::Geometry(format!(
            "page dimensions must be positive, got {page_width}x{page_height}"
        )));
    }
    bbox.check().map_err(Error::Geometry)?;
    if bbox.x1 > page_width || bbox.y1 > page_height {
        return Err(Error::Geometry(format!(
            "bbox ({}, {}, {}, {}) is outside the {page_width}x{page_height} page",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )));
    }
    Ok(NormBBox {
        x0: bbox.x0 / page_width,
        y0: bbox.y0 / page_height,
        x1: bbox.x1 / page_width,
        y1: bbox.y1 / page_height,
    })
}

/// Token indices sorted top-to-bottom then left-to-right.
///
/// Lines are formed by bucketing `y0` with a bucket height equal to the
/// median token height; ties keep file order.
pub fn reading_order(doc: &Document) -> Vec<usize> {
    let n = doc.tokens.len();
    let mut order: Vec<usize> = (0..n).collect();
    if n < 2 {
        return order;
    }
    let mut heights: Vec<f64> = doc.tokens.iter().map(|t| t.bbox.height()).collect();
    heights.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        heights[n / 2]
    } else {
        (heights[n / 2 - 1] + heights[n / 2]) / 2.0
    };
    let bucket = |i: usize| -> f64 {
        let y0 = doc.tokens[i].bbox.y0;
        if median > 0.0 {
            (y0 / median).floor()
        } else {
            y0
        }
    };
    order.sort_by(|&a, &b| {
        bucket(a)
            .total_cmp(&bucket(b))
            .then(doc.tokens[a].bbox.x0.total_cmp(&doc.tokens[b].bbox.x0))
    });
    order
}

/// Fractions of the corpus (in documents) assigned to each gold-bearing part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub labeled: f64,
    pub validation: f64,
    pub test: f64,
}

/// Document-granular partition of a corpus, also expressed as instance rows.
///
/// Instance indices refer to rows of [`Corpus::instances`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub labeled_docs: Vec<usize>,
    pub unlabeled_docs: Vec<usize>,
    pub validation_docs: Vec<usize>,
    pub test_docs: Vec<usize>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

/// On-disk form of a split: document ids per part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

fn part_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Randomly assigns whole documents to labeled/validation/test; everything
/// left over is unlabeled.
///
/// Only fully gold-labeled documents are eligible for the three gold parts.
/// Counts are `floor(fraction * n_documents)`. The eligible documents are
/// shuffled once and consumed in the order labeled, validation, test, so for
/// a fixed seed these parts do not depend on anything downstream.
pub fn split_corpus(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<CorpusSplit> {
    let f = [fractions.labeled, fractions.validation, fractions.test];
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Split(format!("fractions must lie in [0, 1], got {f:?}")));
    }
    let total: f64 = f.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::Split(format!("fractions sum to {total}, which exceeds 1")));
    }

    let n = corpus.documents.len();
    let (n_l, n_v, n_t) = (part_count(f[0], n), part_count(f[1], n), part_count(f[2], n));
    let mut eligible: Vec<usize> = (0..n)
        .filter(|&d| corpus.documents[d].is_fully_labeled())
        .collect();
    if eligible.len() < n_l + n_v + n_t {
        return Err(Error::Split(format!(
            "need {} gold-labeled documents ({n_l} labeled, {n_v} validation, {n_t} test) but only {} are available",
            n_l + n_v + n_t,
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);

    let labeled_docs = eligible[..n_l].to_vec();
    let validation_docs = eligible[n_l..n_l + n_v].to_vec();
    let test_docs = eligible[n_l + n_v..n_l + n_v + n_t].to_vec();
    let taken: HashSet<usize> = eligible[..n_l + n_v + n_t].iter().copied().collect();
    let mut unlabeled_docs: Vec<usize> = eligible[n_l + n_v + n_t..].to_vec();
    unlabeled_docs.extend((0..n).filter(|d| !taken.contains(d) && !corpus.documents[*d].is_fully_labeled()));

    Ok(CorpusSplit::from_doc_parts(
        corpus,
        labeled_docs,
        unlabeled_docs,
        validation_docs,
        test_docs,
        seed,
        fractions,
    ))
}

impl CorpusSplit {
    /// Builds a split from explicit document parts.
    pub fn from_doc_parts(
        corpus: &Corpus,
        labeled_docs: Vec<usize>,
        unlabeled_docs: Vec<usize>,
        validation_docs: Vec<usize>,
        test_docs: Vec<usize>,
        seed: u64,
        fractions: SplitFractions,
    ) -> Self {
        let mut offsets = Vec::with_capacity(corpus.documents.len() + 1);
        offsets.push(0);
        for doc in &corpus.documents {
            offsets.push(offsets.last().unwrap() + doc.tokens.len());
        }
        let rows = |docs: &[usize]| -> Vec<usize> {
            let mut sorted = docs.to_vec();
            sorted.sort_unstable();
            sorted.iter().flat_map(|&d| offsets[d]..offsets[d + 1]).collect()
        };
        CorpusSplit {
            labeled: rows(&labeled_docs),
            unlabeled: rows(&unlabeled_docs),
            validation: rows(&validation_docs),
            test: rows(&test_docs),
            labeled_docs,
            unlabeled_docs,
            validation_docs,
            test_docs,
            seed,
            fractions,
        }
    }

    /// Keeps only the first `n_docs` unlabeled documents (in split order).
    pub fn with_unlabeled_limit(&self, corpus: &Corpus, n_docs: usize) -> Self {
        let keep = self.unlabeled_docs.iter().copied().take(n_docs).collect();
        CorpusSplit::from_doc_parts(
            corpus,
            self.labeled_docs.clone(),
            keep,
            self.validation_docs.clone(),
            self.test_docs.clone(),
            self.seed,
            self.fractions,
        )
    }

    /// The label view exposed to training: gold labels survive only on
    /// labeled and validation rows.
    pub fn training_labels(&self, gold: &[Option<usize>]) -> Vec<Option<usize>> {
        let mut out = vec![None; gold.len()];
        for &i in self.labeled.iter().chain(&self.validation) {
            out[i] = gold[i];
        }
        out
    }

    pub fn to_manifest(&self, corpus: &Corpus) -> SplitManifest {
        let ids = |docs: &[usize]| docs.iter().map(|&d| corpus.documents[d].doc_id.clone()).collect();
        SplitManifest {
            labeled: ids(&self.labeled_docs),
            unlabeled: ids(&self.unlabeled_docs),
            validation: ids(&self.validation_docs),
            test: ids(&self.test_docs),
            seed: self.seed,
            fractions: self.fractions,
        }
    }

    /// Rebuilds a split from a manifest, checking that it partitions the corpus.
    pub fn from_manifest(manifest: &SplitManifest, corpus: &Corpus) -> Result<Self> {
        let by_id: HashMap<&str, usize> = corpus
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.as_str(), i))
            .collect();
        let mut seen = HashSet::new();
        let mut resolve = |ids: &[String], part: &str, need_gold: bool| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    let &d = by_id
                        .get(id.as_str())
                        .ok_or_else(|| Error::Split(format!("{part}: unknown doc_id `{id}`")))?;
                    if !seen.insert(d) {
                        return Err(Error::Split(format!("doc_id `{id}` appears twice")));
                    }
                    if need_gold && !corpus.documents[d].is_fully_labeled() {
                        return Err(Error::Split(format!("{part}: doc_id `{id}` lacks gold labels")));
                    }
                    Ok(d)
                })
                .collect()
        };
        let labeled = resolve(&manifest.labeled, "labeled", true)?;
        let unlabeled = resolve(&manifest.unlabeled, "unlabeled", false)?;
        let validation = resolve(&manifest.validation, "validation", true)?;
        let test = resolve(&manifest.test, "test", true)?;
        if seen.len() != corpus.documents.len() {
            return Err(Error::Split(format!(
                "manifest covers {} of {} documents",
                seen.len(),
                corpus.documents.len()
            )));
        }
        Ok(CorpusSplit::from_doc_parts(
            corpus,
            labeled,
            unlabeled,
            validation,
            test,
            manifest.seed,
            manifest.fractions,
        ))
    }
}
