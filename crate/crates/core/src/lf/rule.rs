//! Rule trees and labeling-function suites.
//!
//! A suite file is a JSON array of `{id, class, rule}` objects. Rules are
//! tagged by `type`:
//!
//! ```json
//! {"type": "all_of", "children": [
//!     {"type": "regex", "pattern": "^[0-9]+\\.[0-9]{2}$"},
//!     {"type": "region", "x0": 0.5, "y0": 0.0, "x1": 1.0, "y1": 0.3}
//! ]}
//! ```
//!
//! * `regex {pattern}`: unanchored search over the raw token text; anchor
//!   the pattern yourself for whole-token matches.
//! * `keyword {lexicon, match}`: the token text is lowercased and stripped of
//!   leading/trailing non-alphanumeric characters, then compared to the
//!   (equally normalized) lexicon. `match` is `exact` (default) or `prefix`.
//! * `region {x0, y0, x1, y1}`: page-relative box that must contain the
//!   token center (inclusive).
//! * `neighbor {direction, rule}`: applies `rule` to the nearest context
//!   token in `left`/`right`/`above`/`below`; false when there is none.
//! * `all_of {children}`, `any_of {children}`, `not {child}`.
//!
//! Trees deeper than [`MAX_RULE_DEPTH`] nodes are rejected.

use std::collections::{BTreeSet, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::context::{context_of, ContextParams, ContextToken, Direction, PageLayout};
use crate::document::{ClassVocab, NormBBox};
use crate::error::{Error, Result};

pub const MAX_RULE_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Exact,
    Prefix,
}

/// Serialized form of a rule, as it appears in suite files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    Regex {
        pattern: String,
    },
    Keyword {
        lexicon: Vec<String>,
        #[serde(rename = "match", default)]
        match_mode: MatchMode,
    },
    Region {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Neighbor {
        direction: Direction,
        rule: Box<RuleSpec>,
    },
    AllOf {
        children: Vec<RuleSpec>,
    },
    AnyOf {
        children: Vec<RuleSpec>,
    },
    Not {
        child: Box<RuleSpec>,
    },
}

impl RuleSpec {
    /// Number of nodes on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            RuleSpec::Regex { .. } | RuleSpec::Keyword { .. } | RuleSpec::Region { .. } => 1,
            RuleSpec::Neighbor { rule, .. } => 1 + rule.depth(),
            RuleSpec::Not { child } => 1 + child.depth(),
            RuleSpec::AllOf { children } | RuleSpec::AnyOf { children } => {
                1 + children.iter().map(RuleSpec::depth).max().unwrap_or(0)
            }
        }
    }
}

/// A compiled rule tree.
#[derive(Debug, Clone)]
pub enum Rule {
    Regex(Regex),
    Keyword {
        lexicon: BTreeSet<String>,
        mode: MatchMode,
    },
    Region(NormBBox),
    Neighbor {
        direction: Direction,
        inner: Box<Rule>,
    },
    AllOf(Vec<Rule>),
    AnyOf(Vec<Rule>),
    Not(Box<Rule>),
}

/// Lowercases and strips leading/trailing non-alphanumeric characters.
pub fn normalize_keyword(text: &str) -> String {
    text.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

impl Rule {
    pub fn compile(spec: &RuleSpec, lf_id: &str) -> Result<Rule> {
        let depth = spec.depth();
        if depth > MAX_RULE_DEPTH {
            return Err(Error::RuleDepth {
                lf_id: lf_id.to_string(),
                depth,
                limit: MAX_RULE_DEPTH,
            });
        }
        Self::compile_node(spec, lf_id)
    }

    fn compile_node(spec: &RuleSpec, lf_id: &str) -> Result<Rule> {
        Ok(match spec {
            RuleSpec::Regex { pattern } => Rule::Regex(Regex::new(pattern).map_err(|e| Error::BadRegex {
                lf_id: lf_id.to_string(),
                message: e.to_string(),
            })?),
            RuleSpec::Keyword { lexicon, match_mode } => Rule::Keyword {
                lexicon: lexicon
                    .iter()
                    .map(|w| normalize_keyword(w))
                    .filter(|w| !w.is_empty())
                    .collect(),
                mode: *match_mode,
            },
            RuleSpec::Region { x0, y0, x1, y1 } => {
                let region = NormBBox {
                    x0: *x0,
                    y0: *y0,
                    x1: *x1,
                    y1: *y1,
                };
                if !region.is_valid() {
                    return Err(Error::Config(format!(
                        "labeling function `{lf_id}`: region must be an ordered box inside the unit square"
                    )));
                }
                Rule::Region(region)
            }
            RuleSpec::Neighbor { direction, rule } => Rule::Neighbor {
                direction: *direction,
                inner: Box::new(Self::compile_node(rule, lf_id)?),
            },
            RuleSpec::AllOf { children } => Rule::AllOf(
                children
                    .iter()
                    .map(|c| Self::compile_node(c, lf_id))
                    .collect::<Result<_>>()?,
            ),
            RuleSpec::AnyOf { children } => Rule::AnyOf(
                children
                    .iter()
                    .map(|c| Self::compile_node(c, lf_id))
                    .collect::<Result<_>>()?,
            ),
            RuleSpec::Not { child } => Rule::Not(Box::new(Self::compile_node(child, lf_id)?)),
        })
    }

    pub fn to_spec(&self) -> RuleSpec {
        match self {
            Rule::Regex(re) => RuleSpec::Regex {
                pattern: re.as_str().to_string(),
            },
            Rule::Keyword { lexicon, mode } => RuleSpec::Keyword {
                lexicon: lexicon.iter().cloned().collect(),
                match_mode: *mode,
            },
            Rule::Region(r) => RuleSpec::Region {
                x0: r.x0,
                y0: r.y0,
                x1: r.x1,
                y1: r.y1,
            },
            Rule::Neighbor { direction, inner } => RuleSpec::Neighbor {
                direction: *direction,
                rule: Box::new(inner.to_spec()),
            },
            Rule::AllOf(c) => RuleSpec::AllOf {
                children: c.iter().map(Rule::to_spec).collect(),
            },
            Rule::AnyOf(c) => RuleSpec::AnyOf {
                children: c.iter().map(Rule::to_spec).collect(),
            },
            Rule::Not(c) => RuleSpec::Not {
                child: Box::new(c.to_spec()),
            },
        }
    }

    /// Evaluates the rule on `token` of `page`, given that token's context.
    pub fn eval(&self, page: &PageLayout<'_>, token: usize, context: &[ContextToken], params: &ContextParams) -> bool {
        match self {
            Rule::Regex(re) => re.is_match(&page.doc.tokens[token].text),
            Rule::Keyword { lexicon, mode } => {
                let norm = normalize_keyword(&page.doc.tokens[token].text);
                match mode {
                    MatchMode::Exact => lexicon.contains(&norm),
                    MatchMode::Prefix => lexicon.iter().any(|w| norm.starts_with(w.as_str())),
                }
            }
            Rule::Region(region) => {
                let (cx, cy) = page.norm[token].center();
                region.contains(cx, cy)
            }
            Rule::Neighbor { direction, inner } => match nearest_in(context, *direction) {
                Some(nb) => {
                    let nb_ctx = context_of(page, nb, params);
                    inner.eval(page, nb, &nb_ctx, params)
                }
                None => false,
            },
            Rule::AllOf(children) => children.iter().all(|c| c.eval(page, token, context, params)),
            Rule::AnyOf(children) => children.iter().any(|c| c.eval(page, token, context, params)),
            Rule::Not(child) => !child.eval(page, token, context, params),
        }
    }
}

/// Nearest context token in `direction`; context lists are sorted by
/// distance, so the first match wins.
fn nearest_in(context: &[ContextToken], direction: Direction) -> Option<usize> {
    context.iter().find(|c| c.direction == direction).map(|c| c.index)
}

#[derive(Debug, Clone)]
pub struct LabelingFunction {
    pub id: String,
    /// Attached class `k_j` in `1..=K`.
    pub class: usize,
    pub rule: Rule,
}

impl LabelingFunction {
    /// Returns the attached class when the rule holds, otherwise 0 (ABSTAIN).
    pub fn apply(&self, page: &PageLayout<'_>, token: usize, context: &[ContextToken], params: &ContextParams) -> usize {
        if self.rule.eval(page, token, context, params) {
            self.class
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfSpec {
    pub id: String,
    pub class: String,
    pub rule: RuleSpec,
}

/// Parses and validates a suite file against the class vocabulary.
pub fn parse_lf_suite(bytes: &[u8], classes: &ClassVocab) -> Result<Vec<LabelingFunction>> {
    let specs: Vec<LfSpec> = serde_json::from_slice(bytes)?;
    compile_suite(&specs, classes)
}

pub fn compile_suite(specs: &[LfSpec], classes: &ClassVocab) -> Result<Vec<LabelingFunction>> {
    let mut ids = HashSet::new();
    specs
        .iter()
        .map(|s| {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateLf(s.id.clone()));
            }
            let class = classes.index_of(&s.class).ok_or_else(|| Error::UnknownClass {
                lf_id: s.id.clone(),
                class: s.class.clone(),
            })?;
            Ok(LabelingFunction {
                id: s.id.clone(),
                class,
                rule: Rule::compile(&s.rule, &s.id)?,
            })
        })
        .collect()
}

/// Serializes a suite in the format [`parse_lf_suite`] reads.
pub fn suite_to_json(lfs: &[LabelingFunction], classes: &ClassVocab) -> Result<String> {
    let specs: Vec<LfSpec> = lfs
        .iter()
        .map(|lf| LfSpec {
            id: lf.id.clone(),
            class: classes.name(lf.class).unwrap_or_default().to_string(),
            rule: lf.rule.to_spec(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&specs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ClassVocab {
        ClassVocab::new(vec!["Menu".into(), "Dish".into(), "Price".into()]).unwrap()
    }

    #[test]
    fn keyword_suite_resolves_class() {
        let src = br#"[{"id":"price_kw","class":"Price","rule":{"type":"keyword","lexicon":["total"]}}]"#;
        let lfs = parse_lf_suite(src, &vocab()).unwrap();
        assert_eq!(lfs.len(), 1);
        assert_eq!(lfs[0].class, 3);
    }

    #[test]
    fn undeclared_class_names_the_lf() {
        let src = br#"[{"id":"t","class":"Total","rule":{"type":"keyword","lexicon":["total"]}}]"#;
        match parse_lf_suite(src, &vocab()) {
            Err(Error::UnknownClass { lf_id, class }) => {
                assert_eq!(lf_id, "t");
                assert_eq!(class, "Total");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nesting_beyond_limit_is_rejected() {
        let mut rule = r#"{"type":"regex","pattern":"x"}"#.to_string();
        for _ in 0..9 {
            rule = format!(r#"{{"type":"all_of","children":[{rule}]}}"#);
        }
        let src = format!(r#"[{{"id":"deep","class":"Menu","rule":{rule}}}]"#);
        assert!(matches!(
            parse_lf_suite(src.as_bytes(), &vocab()),
            Err(Error::RuleDepth { depth: 10, .. })
        ));
    }

    #[test]
    fn depth_limit_is_inclusive() {
        let mut spec = RuleSpec::Regex { pattern: "x".into() };
        for _ in 0..MAX_RULE_DEPTH - 1 {
            spec = RuleSpec::Not { child: Box::new(spec) };
        }
        assert_eq!(spec.depth(), MAX_RULE_DEPTH);
        assert!(Rule::compile(&spec, "ok").is_ok());
    }

    #[test]
    fn duplicate_ids_and_bad_regex() {
        let dup = br#"[{"id":"a","class":"Menu","rule":{"type":"regex","pattern":"x"}},
                       {"id":"a","class":"Dish","rule":{"type":"regex","pattern":"y"}}]"#;
        assert!(matches!(parse_lf_suite(dup, &vocab()), Err(Error::DuplicateLf(_))));
        let bad = br#"[{"id":"a","class":"Menu","rule":{"type":"regex","pattern":"(["}}]"#;
        assert!(matches!(parse_lf_suite(bad, &vocab()), Err(Error::BadRegex { .. })));
    }

    #[test]
    fn keyword_normalization() {
        assert_eq!(normalize_keyword("TOTAL:"), "total");
        assert_eq!(normalize_keyword("(Tea)"), "tea");
        assert_eq!(normalize_keyword("..."), "");
    }

    #[test]
    fn suite_serialization_reparses() {
        let src = br#"[{"id":"p","class":"Price","rule":{"type":"all_of","children":[
            {"type":"regex","pattern":"^[0-9]+\\.[0-9]{2}$"},
            {"type":"region","x0":0.5,"y0":0.0,"x1":1.0,"y1":0.3},
            {"type":"neighbor","direction":"left","rule":{"type":"keyword","lexicon":["Tea"],"match":"prefix"}}]}}]"#;
        let lfs = parse_lf_suite(src, &vocab()).unwrap();
        let json = suite_to_json(&lfs, &vocab()).unwrap();
        let again = parse_lf_suite(json.as_bytes(), &vocab()).unwrap();
        assert_eq!(again[0].rule.to_spec(), lfs[0].rule.to_spec());
    }
}
