//! Synthetic receipt-like corpora with gold labels and calibrated LF suites.
//!
//! A document is a stack of blocks. Each block opens with one line holding a
//! phrase of every `header` class, followed by item lines holding a phrase of
//! every `item` class and, unless dropped, a phrase of every `amount` class
//! further right. Word classes draw from disjoint made-up vocabularies built
//! from one shared syllable pool, so character n-grams carry little class
//! signal and word identity carries most of it.
//!
//! LFs are real rule trees. Each one is calibrated against the generated
//! corpus: a knob narrows its base rule (lexicon share or a vertical band of
//! the page) until the correct firings match the target, and distractor words
//! from other classes are OR-ed in until the precision matches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{join, parse_list, parse_value, FlatConfig};
use crate::document::{BBox, ClassVocab, Corpus, CorpusSplit, Document, SplitFractions, Token};
use crate::error::{Error, Result};
use crate::eval;
use crate::features::predict;
use crate::lf::{
    apply_lf, build_label_matrix, compile_suite, context_of, normalize_keyword, ContextParams, ContextToken,
    Direction, LabelingFunction, LfSpec, MatchMode, PageLayout, RuleSpec,
};
use crate::train::{train, TrainConfig, TrainingData};

/// Regex used for amount-shaped tokens.
pub const AMOUNT_PATTERN: &str = r"^\d{1,3}[.,]\d{2}$";

const PAGE_WIDTH: f64 = 1000.0;
const PAGE_HEIGHT: f64 = 1400.0;
const CHAR_WIDTH: f64 = 9.0;
const TOKEN_HEIGHT: f64 = 16.0;
const WORD_GAP: f64 = 8.0;
const MAX_CALIBRATION_ROUNDS: usize = 50;
const CALIBRATION_TOLERANCE: f64 = 0.1;
const CALIBRATION_GOAL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Header,
    Item,
    Amount,
}

impl ClassKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "header" => Ok(ClassKind::Header),
            "item" => Ok(ClassKind::Item),
            "amount" => Ok(ClassKind::Amount),
            _ => Err(Error::Config(format!("unknown class kind `{s}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ClassKind::Header => "header",
            ClassKind::Item => "item",
            ClassKind::Amount => "amount",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LfKind {
    /// Lexicon drawn from the class vocabulary.
    Keyword,
    /// Amount-shaped text.
    AmountRegex,
    /// The class's horizontal region prior.
    Region,
    /// Immediately left of an amount-shaped token.
    BeforeAmount,
}

impl LfKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "keyword" => Ok(LfKind::Keyword),
            "amount_regex" => Ok(LfKind::AmountRegex),
            "region" => Ok(LfKind::Region),
            "before_amount" => Ok(LfKind::BeforeAmount),
            _ => Err(Error::Config(format!("unknown LF kind `{s}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            LfKind::Keyword => "keyword",
            LfKind::AmountRegex => "amount_regex",
            LfKind::Region => "region",
            LfKind::BeforeAmount => "before_amount",
        }
    }
}

/// Generator settings. Per-class and per-LF settings are parallel lists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub n_documents: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_items: usize,
    pub max_items: usize,
    pub classes: Vec<String>,
    pub class_kinds: Vec<ClassKind>,
    /// Vocabulary size per class; ignored for amount classes.
    pub vocab_sizes: Vec<usize>,
    pub phrase_min: Vec<usize>,
    pub phrase_max: Vec<usize>,
    /// Normalized x range in which a class's phrase starts.
    pub x_start_lo: Vec<f64>,
    pub x_start_hi: Vec<f64>,
    /// Probability that an item line has no amount.
    pub amount_dropout: f64,
    /// Probability that a token's text is corrupted.
    pub noise: f64,
    pub lf_kinds: Vec<LfKind>,
    pub lf_classes: Vec<String>,
    pub lf_coverage: Vec<f64>,
    pub lf_precision: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        SynthSpec {
            n_documents: 500,
            min_tokens: 30,
            max_tokens: 60,
            min_items: 2,
            max_items: 5,
            classes: s(&["Menu", "Dish", "Price"]),
            class_kinds: vec![ClassKind::Header, ClassKind::Item, ClassKind::Amount],
            vocab_sizes: vec![300, 1500, 0],
            phrase_min: vec![1, 1, 1],
            phrase_max: vec![3, 3, 1],
            x_start_lo: vec![0.05, 0.05, 0.72],
            x_start_hi: vec![0.2, 0.2, 0.8],
            amount_dropout: 0.3,
            noise: 0.03,
            lf_kinds: vec![
                LfKind::Keyword,
                LfKind::Keyword,
                LfKind::Keyword,
                LfKind::Keyword,
                LfKind::Keyword,
                LfKind::BeforeAmount,
                LfKind::AmountRegex,
                LfKind::Region,
            ],
            lf_classes: s(&["Menu", "Menu", "Menu", "Dish", "Dish", "Dish", "Price", "Price"]),
            lf_coverage: vec![0.06, 0.06, 0.05, 0.25, 0.25, 0.1, 0.2, 0.2],
            lf_precision: vec![0.9, 0.8, 0.7, 0.95, 0.85, 0.8, 0.95, 0.75],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.classes.len();
        if k < 2 {
            return bad(format!("need at least 2 classes, got {k}"));
        }
        let per_class = [
            ("class_kinds", self.class_kinds.len()),
            ("vocab_sizes", self.vocab_sizes.len()),
            ("phrase_min", self.phrase_min.len()),
            ("phrase_max", self.phrase_max.len()),
            ("x_start_lo", self.x_start_lo.len()),
            ("x_start_hi", self.x_start_hi.len()),
        ];
        for (name, n) in per_class {
            if n != k {
                return bad(format!("{name} has {n} entries for {k} classes"));
            }
        }
        ClassVocab::new(self.classes.clone())?;
        if !self.class_kinds.contains(&ClassKind::Header) || !self.class_kinds.contains(&ClassKind::Item) {
            return bad("need at least one header and one item class".into());
        }
        for c in 0..k {
            if self.class_kinds[c] != ClassKind::Amount && self.vocab_sizes[c] == 0 {
                return bad(format!("class `{}` has an empty vocabulary", self.classes[c]));
            }
            if self.phrase_min[c] == 0 || self.phrase_min[c] > self.phrase_max[c] {
                return bad(format!("class `{}`: bad phrase length range", self.classes[c]));
            }
            let (lo, hi) = (self.x_start_lo[c], self.x_start_hi[c]);
            if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                return bad(format!("class `{}`: bad x range [{lo}, {hi}]", self.classes[c]));
            }
        }
        if self.n_documents == 0 || self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("need n_documents >= 1 and 1 <= min_tokens <= max_tokens".into());
        }
        if self.min_items == 0 || self.min_items > self.max_items {
            return bad("need 1 <= min_items <= max_items".into());
        }
        for (name, p) in [("amount_dropout", self.amount_dropout), ("noise", self.noise)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        let m = self.lf_kinds.len();
        if m == 0 {
            return bad("need at least one LF".into());
        }
        for (name, n) in [
            ("lf_classes", self.lf_classes.len()),
            ("lf_coverage", self.lf_coverage.len()),
            ("lf_precision", self.lf_precision.len()),
        ] {
            if n != m {
                return bad(format!("{name} has {n} entries for {m} LFs"));
            }
        }
        for j in 0..m {
            let Some(c) = self.classes.iter().position(|x| *x == self.lf_classes[j]) else {
                return bad(format!("LF {j}: unknown class `{}`", self.lf_classes[j]));
            };
            let (cov, prec) = (self.lf_coverage[j], self.lf_precision[j]);
            if !(cov > 0.0 && cov <= 1.0) || !(prec > 0.0 && prec <= 1.0) {
                return bad(format!("LF {j}: coverage and precision must lie in (0, 1]"));
            }
            let word_class = self.class_kinds[c] != ClassKind::Amount;
            let ok = match self.lf_kinds[j] {
                LfKind::Keyword | LfKind::BeforeAmount => word_class,
                LfKind::AmountRegex => !word_class,
                LfKind::Region => true,
            };
            if !ok {
                return bad(format!(
                    "LF {j}: kind {} does not fit {} class `{}`",
                    self.lf_kinds[j].name(),
                    self.class_kinds[c].name(),
                    self.classes[c]
                ));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<ClassVocab> {
        ClassVocab::new(self.classes.clone())
    }
}

fn parse_kinds<T>(key: &str, value: &str, f: fn(&str) -> Result<T>) -> Result<Vec<T>> {
    parse_list::<String>(key, value)?.iter().map(|s| f(s)).collect()
}

impl FlatConfig for SynthSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_documents" => self.n_documents = parse_value(key, value)?,
            "min_tokens" => self.min_tokens = parse_value(key, value)?,
            "max_tokens" => self.max_tokens = parse_value(key, value)?,
            "min_items" => self.min_items = parse_value(key, value)?,
            "max_items" => self.max_items = parse_value(key, value)?,
            "classes" => self.classes = parse_list(key, value)?,
            "class_kinds" => self.class_kinds = parse_kinds(key, value, ClassKind::parse)?,
            "vocab_sizes" => self.vocab_sizes = parse_list(key, value)?,
            "phrase_min" => self.phrase_min = parse_list(key, value)?,
            "phrase_max" => self.phrase_max = parse_list(key, value)?,
            "x_start_lo" => self.x_start_lo = parse_list(key, value)?,
            "x_start_hi" => self.x_start_hi = parse_list(key, value)?,
            "amount_dropout" => self.amount_dropout = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "lf_kinds" => self.lf_kinds = parse_kinds(key, value, LfKind::parse)?,
            "lf_classes" => self.lf_classes = parse_list(key, value)?,
            "lf_coverage" => self.lf_coverage = parse_list(key, value)?,
            "lf_precision" => self.lf_precision = parse_list(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown synth key `{key}`"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let kinds = self.class_kinds.iter().map(|k| k.name()).collect::<Vec<_>>();
        let lf_kinds = self.lf_kinds.iter().map(|k| k.name()).collect::<Vec<_>>();
        vec![
            ("n_documents", self.n_documents.to_string()),
            ("min_tokens", self.min_tokens.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("min_items", self.min_items.to_string()),
            ("max_items", self.max_items.to_string()),
            ("classes", join(&self.classes)),
            ("class_kinds", join(&kinds)),
            ("vocab_sizes", join(&self.vocab_sizes)),
            ("phrase_min", join(&self.phrase_min)),
            ("phrase_max", join(&self.phrase_max)),
            ("x_start_lo", join(&self.x_start_lo)),
            ("x_start_hi", join(&self.x_start_hi)),
            ("amount_dropout", self.amount_dropout.to_string()),
            ("noise", self.noise.to_string()),
            ("lf_kinds", join(&lf_kinds)),
            ("lf_classes", join(&self.lf_classes)),
            ("lf_coverage", join(&self.lf_coverage)),
            ("lf_precision", join(&self.lf_precision)),
            ("seed", self.seed.to_string()),
        ]
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn make_vocabularies(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.classes.len());
    for (c, &kind) in spec.class_kinds.iter().enumerate() {
        if kind == ClassKind::Amount {
            out.push(Vec::new());
            continue;
        }
        let want = spec.vocab_sizes[c];
        let mut words = Vec::with_capacity(want);
        let mut attempts = 0usize;
        while words.len() < want {
            attempts += 1;
            if attempts > want * 100 + 1000 {
                return Err(Error::Infeasible(format!(
                    "cannot draw {want} distinct words for class `{}`",
                    spec.classes[c]
                )));
            }
            let n_syll = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..n_syll {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            if rng.gen_bool(0.3) {
                w.push_str(ONSETS.choose(rng).unwrap());
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        out.push(words);
    }
    Ok(out)
}

fn capitalize(w: &str) -> String {
    let mut cs = w.chars();
    match cs.next() {
        Some(f) => f.to_uppercase().chain(cs).collect(),
        None => String::new(),
    }
}

/// Replaces one character. Words get a digit and amounts a letter, so a
/// corrupted token never collides with a clean token of any class.
fn corrupt(text: &str, amount: bool, rng: &mut ChaCha8Rng) -> String {
    let mut cs: Vec<char> = text.chars().collect();
    let candidates: Vec<usize> = if amount {
        (0..cs.len()).filter(|&i| cs[i].is_ascii_digit()).collect()
    } else {
        (0..cs.len()).collect()
    };
    if let Some(&i) = candidates.choose(rng) {
        cs[i] = if amount {
            *['O', 'l', 'S', 'B'].choose(rng).unwrap()
        } else {
            char::from(b'0' + rng.gen_range(0..10u8))
        };
    }
    cs.into_iter().collect()
}

struct DocBuilder<'a> {
    spec: &'a SynthSpec,
    vocab: &'a [Vec<String>],
    tokens: Vec<Token>,
}

impl DocBuilder<'_> {
    fn phrase(&self, c: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        if self.spec.class_kinds[c] == ClassKind::Amount {
            let units = rng.gen_range(1..200);
            let cents = rng.gen_range(0..20) * 5;
            return vec![format!("{units}.{cents:02}")];
        }
        let n = rng.gen_range(self.spec.phrase_min[c]..=self.spec.phrase_max[c]);
        (0..n)
            .map(|_| capitalize(self.vocab[c].choose(rng).unwrap()))
            .collect()
    }

    /// Lays out a phrase starting at normalized `x`; returns the right edge.
    fn place(&mut self, c: usize, x: f64, y: f64, rng: &mut ChaCha8Rng) -> f64 {
        let amount = self.spec.class_kinds[c] == ClassKind::Amount;
        let mut px = x * PAGE_WIDTH;
        for word in self.phrase(c, rng) {
            let text = if rng.gen_bool(self.spec.noise) {
                corrupt(&word, amount, rng)
            } else {
                word
            };
            let w = (text.chars().count() as f64 * CHAR_WIDTH * rng.gen_range(0.9..1.1)).min(PAGE_WIDTH - px - 1.0);
            if w <= 0.0 {
                break;
            }
            let dy = rng.gen_range(-1.5..1.5);
            self.tokens.push(Token {
                text,
                bbox: BBox::new(px, y + dy, px + w, y + dy + TOKEN_HEIGHT),
                gold: Some(c + 1),
            });
            px += w + WORD_GAP;
        }
        px / PAGE_WIDTH
    }

    fn line(&mut self, classes: &[usize], y: f64, rng: &mut ChaCha8Rng) {
        let mut right = 0.0f64;
        for &c in classes {
            let (lo, hi) = (self.spec.x_start_lo[c], self.spec.x_start_hi[c]);
            let start = rng.gen_range(lo..=hi).max(right + WORD_GAP / PAGE_WIDTH);
            if start >= 0.98 {
                break;
            }
            right = self.place(c, start, y, rng);
        }
    }
}

fn make_document(spec: &SynthSpec, vocab: &[Vec<String>], index: usize, rng: &mut ChaCha8Rng) -> Document {
    let of_kind = |k: ClassKind| -> Vec<usize> { (0..spec.classes.len()).filter(|&c| spec.class_kinds[c] == k).collect() };
    let (headers, items, amounts) = (of_kind(ClassKind::Header), of_kind(ClassKind::Item), of_kind(ClassKind::Amount));
    let budget = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let mut b = DocBuilder {
        spec,
        vocab,
        tokens: Vec::new(),
    };
    let mut y = rng.gen_range(50.0..120.0);
    let bottom = PAGE_HEIGHT - 40.0;
    'blocks: while b.tokens.len() < budget {
        if y > bottom {
            break;
        }
        b.line(&headers, y, rng);
        y += rng.gen_range(26.0..32.0);
        for _ in 0..rng.gen_range(spec.min_items..=spec.max_items) {
            if y > bottom || b.tokens.len() >= budget {
                break 'blocks;
            }
            let mut line = items.clone();
            if !rng.gen_bool(spec.amount_dropout) {
                line.extend(&amounts);
            }
            b.line(&line, y, rng);
            y += rng.gen_range(24.0..30.0);
        }
        y += rng.gen_range(10.0..24.0);
    }
    Document {
        doc_id: format!("synth-{index:05}"),
        page_width: PAGE_WIDTH,
        page_height: PAGE_HEIGHT,
        tokens: b.tokens,
    }
}

/// A generated corpus with its LF suite and the calibration outcome.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub lfs: Vec<LabelingFunction>,
    pub calibration: Vec<LfCalibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LfCalibration {
    pub id: String,
    pub target_coverage: f64,
    pub target_precision: f64,
    pub coverage: f64,
    pub precision: f64,
    pub rounds: usize,
}

/// Per-token facts the calibration needs, aligned with corpus instances.
struct Observed {
    gold: Vec<usize>,
    /// Occurrences of each normalized word, per gold class (0-based).
    counts: HashMap<String, Vec<usize>>,
}

impl Observed {
    fn new(corpus: &Corpus) -> Self {
        let k = corpus.classes.len();
        let mut gold = Vec::with_capacity(corpus.n_tokens());
        let mut counts: HashMap<String, Vec<usize>> = HashMap::new();
        for r in corpus.instances() {
            let t = &corpus.documents[r.doc].tokens[r.token];
            let g = t.gold.unwrap_or(0);
            let w = normalize_keyword(&t.text);
            if g > 0 {
                counts.entry(w).or_insert_with(|| vec![0; k])[g - 1] += 1;
            }
            gold.push(g);
        }
        Observed { gold, counts }
    }

    fn count(&self, w: &str, c: usize) -> usize {
        self.counts.get(w).map_or(0, |v| v[c])
    }
}

struct Pages<'a> {
    pages: Vec<(PageLayout<'a>, Vec<Vec<ContextToken>>)>,
    params: ContextParams,
}

impl<'a> Pages<'a> {
    fn new(corpus: &'a Corpus, params: ContextParams) -> Result<Self> {
        let pages = corpus
            .documents
            .iter()
            .map(|d| {
                let page = PageLayout::new(d)?;
                let ctx = (0..d.tokens.len()).map(|t| context_of(&page, t, &params)).collect();
                Ok((page, ctx))
            })
            .collect::<Result<_>>()?;
        Ok(Pages { pages, params })
    }

    /// Firing indicator for every instance.
    fn fires(&self, lf: &LabelingFunction) -> Vec<bool> {
        let mut out = Vec::new();
        for (page, ctx) in &self.pages {
            for &t in &page.order {
                out.push(apply_lf(lf, page, t, &ctx[t], &self.params) != 0);
            }
        }
        out
    }
}

fn amount_rule() -> RuleSpec {
    RuleSpec::Regex {
        pattern: AMOUNT_PATTERN.to_string(),
    }
}

fn keyword(words: &[String]) -> RuleSpec {
    RuleSpec::Keyword {
        lexicon: words.to_vec(),
        match_mode: MatchMode::Exact,
    }
}

/// Calibration state of one LF under construction.
struct LfPlan {
    id: String,
    class: usize,
    kind: LfKind,
    target_cov: f64,
    target_prec: f64,
    /// Own-class words in lexicon order (keyword LFs).
    own_words: Vec<String>,
    /// Other-class words in distractor order.
    distractors: Vec<String>,
    region: (f64, f64),
}

impl LfPlan {
    /// Rule with `knob` (lexicon share or vertical band) and the first
    /// `n_distractors` distractor words.
    fn rule(&self, knob: f64, n_lexicon: usize, n_distractors: usize) -> RuleSpec {
        let base = match self.kind {
            LfKind::Keyword => keyword(&self.own_words[..n_lexicon.max(1)]),
            LfKind::AmountRegex => amount_rule(),
            LfKind::Region => RuleSpec::Region {
                x0: self.region.0,
                y0: 0.0,
                x1: self.region.1,
                y1: 1.0,
            },
            LfKind::BeforeAmount => RuleSpec::AllOf {
                children: vec![
                    RuleSpec::Not {
                        child: Box::new(amount_rule()),
                    },
                    RuleSpec::Neighbor {
                        direction: Direction::Right,
                        rule: Box::new(amount_rule()),
                    },
                ],
            },
        };
        let base = if self.kind != LfKind::Keyword && knob < 1.0 {
            RuleSpec::AllOf {
                children: vec![
                    base,
                    RuleSpec::Region {
                        x0: 0.0,
                        y0: 0.0,
                        x1: 1.0,
                        y1: knob,
                    },
                ],
            }
        } else {
            base
        };
        if n_distractors == 0 {
            base
        } else {
            RuleSpec::AnyOf {
                children: vec![base, keyword(&self.distractors[..n_distractors])],
            }
        }
    }
}

fn compile_one(id: &str, class: &str, rule: RuleSpec, classes: &ClassVocab) -> Result<LabelingFunction> {
    let spec = LfSpec {
        id: id.to_string(),
        class: class.to_string(),
        rule,
    };
    Ok(compile_suite(std::slice::from_ref(&spec), classes)?.remove(0))
}

/// Smallest prefix of `words` whose summed class-`c` counts reach `need`.
fn prefix_reaching(words: &[String], need: f64, count: impl Fn(&str) -> usize) -> usize {
    let mut acc = 0usize;
    for (i, w) in words.iter().enumerate() {
        if acc as f64 >= need {
            return i;
        }
        acc += count(w);
    }
    words.len()
}

fn calibrate(
    plan: &LfPlan,
    classes: &ClassVocab,
    pages: &Pages<'_>,
    obs: &Observed,
) -> Result<(LabelingFunction, LfCalibration)> {
    let n = obs.gold.len() as f64;
    let class_name = classes.name(plan.class).unwrap_or_default();
    let target_correct = plan.target_cov * plan.target_prec * n;
    let target_wrong = plan.target_cov * (1.0 - plan.target_prec) * n;
    let own = |w: &str| obs.count(w, plan.class - 1);
    let others = |w: &str| obs.counts.get(w).map_or(0, |v| v.iter().sum::<usize>() - v[plan.class - 1]);

    let mut knob = 1.0f64;
    let mut n_lex = prefix_reaching(&plan.own_words, target_correct, own);
    let mut best: Option<(f64, LabelingFunction, LfCalibration)> = None;
    for round in 1..=MAX_CALIBRATION_ROUNDS {
        // the base rule alone decides how many extra wrong firings are needed
        let base = compile_one(&plan.id, class_name, plan.rule(knob, n_lex, 0), classes)?;
        let fires = pages.fires(&base);
        let (mut b_fired, mut b_right) = (0usize, 0usize);
        for (i, &f) in fires.iter().enumerate() {
            if f {
                b_fired += 1;
                b_right += usize::from(obs.gold[i] == plan.class);
            }
        }
        let wrong_needed = target_wrong - (b_fired - b_right) as f64;
        // distractors fire only where the base does not, apart from corrupted
        // words, which never match a lexicon
        let remaining: Vec<String> = plan
            .distractors
            .iter()
            .filter(|w| {
                // skip words the base already covers
                plan.kind != LfKind::Keyword || !plan.own_words[..n_lex.max(1)].contains(w)
            })
            .cloned()
            .collect();
        let n_d = if wrong_needed > 0.5 {
            prefix_reaching(&remaining, wrong_needed, others)
        } else {
            0
        };
        let rule = plan.rule(knob, n_lex, n_d);
        let lf = compile_one(&plan.id, class_name, rule, classes)?;
        let fires = pages.fires(&lf);
        let (mut fired, mut right) = (0usize, 0usize);
        for (i, &f) in fires.iter().enumerate() {
            if f {
                fired += 1;
                right += usize::from(obs.gold[i] == plan.class);
            }
        }
        let cov = fired as f64 / n;
        let prec = if fired == 0 { 0.0 } else { right as f64 / fired as f64 };
        let err = (cov - plan.target_cov).abs().max((prec - plan.target_prec).abs());
        let record = LfCalibration {
            id: plan.id.clone(),
            target_coverage: plan.target_cov,
            target_precision: plan.target_prec,
            coverage: cov,
            precision: prec,
            rounds: round,
        };
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, lf, record));
        }
        if err <= CALIBRATION_GOAL {
            break;
        }
        // narrow or widen the base towards the target number of correct firings
        if b_right == 0 {
            knob = (knob * 2.0).min(1.0);
            n_lex = (n_lex * 2).clamp(1, plan.own_words.len().max(1));
            continue;
        }
        let ratio = target_correct / b_right as f64;
        match plan.kind {
            LfKind::Keyword => {
                let step = ((n_lex as f64) * ratio).round() as usize;
                let next = if step == n_lex {
                    if ratio > 1.0 {
                        n_lex + 1
                    } else {
                        n_lex.saturating_sub(1)
                    }
                } else {
                    step
                };
                n_lex = next.clamp(1, plan.own_words.len().max(1));
            }
            _ => knob = (knob * ratio).clamp(1e-3, 1.0),
        }
    }
    let (err, lf, record) = best.expect("at least one calibration round");
    if err > CALIBRATION_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "LF `{}` reached coverage {:.3} / precision {:.3} against targets {:.3} / {:.3} after {} rounds",
            plan.id, record.coverage, record.precision, plan.target_cov, plan.target_prec, record.rounds
        )));
    }
    Ok((lf, record))
}

/// Generates a corpus and a calibrated LF suite. Deterministic per `spec.seed`.
pub fn generate(spec: &SynthSpec, params: &ContextParams) -> Result<SynthOutput> {
    spec.validate()?;
    let classes = spec.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = make_vocabularies(spec, &mut rng)?;
    let documents = (0..spec.n_documents)
        .map(|i| make_document(spec, &vocab, i, &mut rng))
        .collect();
    let corpus = Corpus {
        classes: classes.clone(),
        documents,
    };

    let obs = Observed::new(&corpus);
    let pages = Pages::new(&corpus, *params)?;
    let mut lf_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut lfs = Vec::with_capacity(spec.lf_kinds.len());
    let mut calibration = Vec::with_capacity(spec.lf_kinds.len());
    let mut per_class_count: BTreeMap<usize, usize> = BTreeMap::new();
    for j in 0..spec.lf_kinds.len() {
        let class = classes.index_of(&spec.lf_classes[j]).expect("validated");
        let nth = per_class_count.entry(class).or_default();
        *nth += 1;
        let id = format!("{}_{}_{}", spec.lf_classes[j].to_lowercase(), spec.lf_kinds[j].name(), nth);
        let mut own_words = vocab[class - 1].clone();
        own_words.shuffle(&mut lf_rng);
        let mut distractors: Vec<String> = vocab
            .iter()
            .enumerate()
            .filter(|&(c, _)| c + 1 != class)
            .flat_map(|(_, v)| v.iter().cloned())
            .collect();
        distractors.shuffle(&mut lf_rng);
        let c = class - 1;
        let region = (
            (spec.x_start_lo[c] - 0.02).max(0.0),
            if spec.class_kinds[c] == ClassKind::Amount {
                1.0
            } else {
                (spec.x_start_hi[c] + 0.15).min(1.0)
            },
        );
        let plan = LfPlan {
            id,
            class,
            kind: spec.lf_kinds[j],
            target_cov: spec.lf_coverage[j],
            target_prec: spec.lf_precision[j],
            own_words,
            distractors,
            region,
        };
        let (lf, record) = calibrate(&plan, &classes, &pages, &obs)?;
        lfs.push(lf);
        calibration.push(record);
    }
    Ok(SynthOutput {
        corpus,
        lfs,
        calibration,
    })
}

/// Which cells a sweep runs and how each cell splits the corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPlan {
    /// Labeled share of the training pool.
    pub labeled: Vec<f64>,
    /// Unlabeled share of the training pool.
    pub unlabeled: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Shares of the whole corpus held out for validation and test.
    pub validation: f64,
    pub test: f64,
}

impl Default for SweepPlan {
    fn default() -> Self {
        SweepPlan {
            labeled: vec![0.01, 0.05, 0.1],
            unlabeled: vec![0.9],
            seeds: vec![0, 1, 2, 3, 4],
            validation: 0.05,
            test: 0.25,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.labeled.is_empty() || self.unlabeled.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs labeled, unlabeled and seed lists".into()));
        }
        if !self.labeled.iter().chain(&self.unlabeled).all(|&x| in_unit(x)) {
            return Err(Error::Config("sweep fractions must lie in [0, 1]".into()));
        }
        if !(self.validation > 0.0 && self.test > 0.0 && self.validation + self.test < 1.0) {
            return Err(Error::Config("validation and test shares must be positive and sum below 1".into()));
        }
        Ok(())
    }

    /// Document split for one cell. Validation and test depend only on
    /// `seed`; the labeled set for a smaller fraction is a prefix of the one
    /// for a larger fraction.
    pub fn split(&self, corpus: &Corpus, labeled: f64, unlabeled: f64, seed: u64) -> Result<CorpusSplit> {
        let n = corpus.documents.len();
        let count = |f: f64, of: usize| (f * of as f64).round() as usize;
        let mut docs: Vec<usize> = (0..n).collect();
        docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (n_t, n_v) = (count(self.test, n), count(self.validation, n));
        if n_t == 0 || n_v == 0 || n_t + n_v >= n {
            return Err(Error::Split(format!("{n} documents are too few for this sweep")));
        }
        let test = docs[..n_t].to_vec();
        let validation = docs[n_t..n_t + n_v].to_vec();
        let pool = &docs[n_t + n_v..];
        let n_l = count(labeled, pool.len()).max(1).min(pool.len());
        let n_u = count(unlabeled, pool.len()).min(pool.len() - n_l);
        if let Some(&d) = test.iter().chain(&validation).chain(&pool[..n_l]).find(|&&d| !corpus.documents[d].is_fully_labeled()) {
            return Err(Error::Split(format!(
                "document `{}` lacks gold labels",
                corpus.documents[d].doc_id
            )));
        }
        Ok(CorpusSplit::from_doc_parts(
            corpus,
            pool[..n_l].to_vec(),
            pool[n_l..n_l + n_u].to_vec(),
            validation,
            test,
            seed,
            SplitFractions {
                labeled: n_l as f64 / n as f64,
                validation: n_v as f64 / n as f64,
                test: n_t as f64 / n as f64,
            },
        ))
    }
}

impl FlatConfig for SweepPlan {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "labeled" => self.labeled = parse_list(key, value)?,
            "unlabeled" => self.unlabeled = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "validation" => self.validation = parse_value(key, value)?,
            "test" => self.test = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown sweep key `{key}`"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("labeled", join(&self.labeled)),
            ("unlabeled", join(&self.unlabeled)),
            ("seeds", join(&self.seeds)),
            ("validation", self.validation.to_string()),
            ("test", self.test.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub labeled: f64,
    pub unlabeled: f64,
    pub seed: u64,
    pub labeled_docs: usize,
    pub unlabeled_docs: usize,
    /// Test macro-F1 of the supervised-only baseline.
    pub baseline_f1: f64,
    /// Test macro-F1 of joint training.
    pub joint_f1: f64,
}

impl SweepCell {
    pub fn gap(&self) -> f64 {
        self.joint_f1 - self.baseline_f1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

/// Mean and population standard deviation.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub labeled: f64,
    pub unlabeled: f64,
    pub n_seeds: usize,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    pub joint_mean: f64,
    pub joint_sd: f64,
    /// Seeds on which joint training beat the baseline.
    pub wins: usize,
}

impl SweepSummary {
    pub fn gap(&self) -> f64 {
        self.joint_mean - self.baseline_mean
    }
}

impl SweepResult {
    /// One row per (labeled, unlabeled) pair, in first-seen order.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut keys: Vec<(f64, f64)> = Vec::new();
        for c in &self.cells {
            if !keys.contains(&(c.labeled, c.unlabeled)) {
                keys.push((c.labeled, c.unlabeled));
            }
        }
        keys.into_iter()
            .map(|(l, u)| {
                let cells: Vec<&SweepCell> = self.cells.iter().filter(|c| (c.labeled, c.unlabeled) == (l, u)).collect();
                let (bm, bs) = mean_sd(&cells.iter().map(|c| c.baseline_f1).collect::<Vec<_>>());
                let (jm, js) = mean_sd(&cells.iter().map(|c| c.joint_f1).collect::<Vec<_>>());
                SweepSummary {
                    labeled: l,
                    unlabeled: u,
                    n_seeds: cells.len(),
                    baseline_mean: bm,
                    baseline_sd: bs,
                    joint_mean: jm,
                    joint_sd: js,
                    wins: cells.iter().filter(|c| c.joint_f1 > c.baseline_f1).count(),
                }
            })
            .collect()
    }

    pub fn cells_at(&self, labeled: f64, unlabeled: f64) -> Vec<&SweepCell> {
        self.cells
            .iter()
            .filter(|c| c.labeled == labeled && c.unlabeled == unlabeled)
            .collect()
    }
}

impl fmt::Display for SweepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>6}  {:>6}  {:>15}  {:>15}  {:>7}  {:>5}",
            "L%", "U%", "supervised", "joint", "delta", "wins"
        )?;
        for s in self.summary() {
            write!(
                f,
                "\n{:>6.1}  {:>6.1}  {:>7.4} ± {:.3}  {:>7.4} ± {:.3}  {:>+7.4}  {:>2}/{}",
                s.labeled * 100.0,
                s.unlabeled * 100.0,
                s.baseline_mean,
                s.baseline_sd,
                s.joint_mean,
                s.joint_sd,
                s.gap(),
                s.wins,
                s.n_seeds
            )?;
        }
        Ok(())
    }
}

/// Test macro-F1 of the feature model trained under `config` on `split`.
pub fn train_and_score(
    corpus: &Corpus,
    features: &[crate::features::FeatureVector],
    matrix: &crate::lf::LabelMatrix,
    split: &CorpusSplit,
    config: &TrainConfig,
) -> Result<f64> {
    let gold = corpus.gold_labels();
    let labels = split.training_labels(&gold);
    let model = train(
        &TrainingData {
            features,
            matrix,
            labels: &labels,
            split,
        },
        config,
    )?;
    let mut g = Vec::with_capacity(split.test.len());
    let mut p = Vec::with_capacity(split.test.len());
    for &i in &split.test {
        if let Some(y) = gold[i] {
            g.push(y);
            p.push(predict(&model.phi, &features[i])?);
        }
    }
    Ok(eval::score(&g, &p, &corpus.classes)?.macro_avg.f1)
}

/// Trains the supervised-only baseline and joint mode for every
/// (seed, labeled, unlabeled) cell. Each cell's training seed is its sweep
/// seed, so cells are independent of execution order.
pub fn run_sweep(corpus: &Corpus, lfs: &[LabelingFunction], plan: &SweepPlan, config: &TrainConfig) -> Result<SweepResult> {
    plan.validate()?;
    config.validate()?;
    let params = config.context()?;
    let features = config.featurizer()?.featurize_corpus(corpus, &params)?;
    let matrix = build_label_matrix(lfs, corpus, &params)?;
    let mut cells = Vec::new();
    for &l in &plan.labeled {
        for &u in &plan.unlabeled {
            for &seed in &plan.seeds {
                let split = plan.split(corpus, l, u, seed)?;
                let joint_cfg = TrainConfig { seed, ..config.clone() };
                let base_cfg = joint_cfg.clone().supervised_only();
                cells.push(SweepCell {
                    labeled: l,
                    unlabeled: u,
                    seed,
                    labeled_docs: split.labeled_docs.len(),
                    unlabeled_docs: split.unlabeled_docs.len(),
                    baseline_f1: train_and_score(corpus, &features, &matrix, &split, &base_cfg)?,
                    joint_f1: train_and_score(corpus, &features, &matrix, &split, &joint_cfg)?,
                });
            }
        }
    }
    Ok(SweepResult { cells })
}
