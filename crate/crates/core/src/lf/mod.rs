//! Labeling functions: rule trees over a token and its spatial context, the
//! label matrix they produce, and coverage/overlap/conflict diagnostics.

mod context;
mod diagnostics;
mod matrix;
mod rule;

pub use context::{context_of, ContextParams, ContextToken, Direction, PageLayout};
pub use diagnostics::{diagnostics, LfDiagnostics, LfStats};
pub use matrix::{build_label_matrix, LabelMatrix, RowKey};
pub use rule::{
    compile_suite, normalize_keyword, parse_lf_suite, suite_to_json, LabelingFunction, LfSpec, MatchMode, Rule,
    RuleSpec, MAX_RULE_DEPTH,
};

/// Firing of `lf` on `token`: its attached class or 0 (ABSTAIN).
pub fn apply_lf(
    lf: &LabelingFunction,
    page: &PageLayout<'_>,
    token: usize,
    context: &[ContextToken],
    params: &ContextParams,
) -> usize {
    lf.apply(page, token, context, params)
}
