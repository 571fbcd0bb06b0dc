//! The two security checks every ticket passes before integration.

use std::collections::BTreeSet;

use crate::acl::UserId;
use crate::clock::Timestamp;
use crate::guardrail::{Policy, Stage};

use super::{CheckKind, CheckOutcome, CheckResult, CheckedBy};

pub const DEFAULT_FACT_THRESHOLD: f64 = 0.5;

/// Words ignored by the fact check. Matching is on lowercased tokens.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do", "does",
    "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he", "her",
    "here", "hers", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just", "may", "me",
    "might", "more", "most", "must", "my", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other",
    "our", "ours", "out", "over", "own", "same", "shall", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too", "under",
    "until", "up", "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why",
    "will", "with", "would", "you", "your", "yours",
];

/// Lowercased alphanumeric tokens minus stop words.
pub fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOP_WORDS.contains(&w.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckerConfig {
    pub fact_threshold: f64,
    /// A reviewer holding `approve_ticket` who accepts the revision's
    /// grounding regardless of the lexical score.
    pub fact_override: Option<UserId>,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        Self {
            fact_threshold: DEFAULT_FACT_THRESHOLD,
            fact_override: None,
        }
    }
}

/// Lexical containment of the revision's content words in the context.
pub fn fact_check(revision: &str, context: &[String], threshold: f64, at: Timestamp) -> CheckResult {
    let result = |outcome, score, evidence: String| CheckResult {
        check_kind: CheckKind::Fact,
        outcome,
        score,
        evidence,
        checked_by: CheckedBy::Rules,
        timestamp: at,
        overridden_by: None,
    };
    if context.iter().all(|c| c.trim().is_empty()) {
        return result(CheckOutcome::Fail, 0.0, "no grounding context".into());
    }
    let rev = content_words(revision);
    if rev.is_empty() {
        return result(CheckOutcome::Fail, 0.0, "revision has no content words".into());
    }
    let ctx: BTreeSet<String> = context.iter().flat_map(|c| content_words(c)).collect();
    let (grounded, ungrounded): (Vec<&String>, Vec<&String>) = rev.iter().partition(|w| ctx.contains(*w));
    let score = grounded.len() as f64 / rev.len() as f64;
    let mut evidence = format!("{}/{} content words grounded", grounded.len(), rev.len());
    if !ungrounded.is_empty() {
        let list: Vec<&str> = ungrounded.iter().map(|s| s.as_str()).collect();
        evidence.push_str(&format!("; ungrounded: {}", list.join(", ")));
    }
    let outcome = if score >= threshold {
        CheckOutcome::Pass
    } else {
        CheckOutcome::Fail
    };
    result(outcome, score, evidence)
}

/// Marks a fact-check result as accepted by a human reviewer.
pub fn override_fact(mut r: CheckResult, reviewer: &UserId) -> CheckResult {
    r.evidence = format!(
        "{} (computed outcome {:?}); accepted by {}",
        r.evidence, r.outcome, reviewer
    );
    r.outcome = CheckOutcome::Pass;
    r.checked_by = CheckedBy::Human;
    r.overridden_by = Some(reviewer.clone());
    r
}

/// Fails when any guardrail input rule or jailbreak rule matches any text,
/// or when a text's share of directive sentences reaches the policy ratio.
/// `texts` are labelled for the evidence string.
pub fn jailbreak_check(texts: &[(String, String)], policy: &Policy, at: Timestamp) -> CheckResult {
    let fail = |evidence: String| CheckResult {
        check_kind: CheckKind::Jailbreak,
        outcome: CheckOutcome::Fail,
        score: 0.0,
        evidence,
        checked_by: CheckedBy::Rules,
        timestamp: at,
        overridden_by: None,
    };
    for (label, text) in texts {
        let rules = policy
            .rules
            .iter()
            .filter(|r| r.stages.contains(&Stage::Input))
            .chain(&policy.jailbreak.rules);
        for rule in rules {
            if rule.is_match(text) {
                return fail(format!("rule {} matched in {label}", rule.id));
            }
        }
        let d = policy.jailbreak.density(text);
        if d.directives > 0 && d.ratio() >= policy.jailbreak.directive_ratio {
            return fail(format!(
                "directive density {}/{} sentences in {label}",
                d.directives, d.sentences
            ));
        }
    }
    CheckResult {
        check_kind: CheckKind::Jailbreak,
        outcome: CheckOutcome::Pass,
        score: 1.0,
        evidence: format!("no rule matched in {} text(s)", texts.len()),
        checked_by: CheckedBy::Rules,
        timestamp: at,
        overridden_by: None,
    }
}
