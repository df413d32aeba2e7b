//! ExactMatch and ROUGE-L scoring plus the held-out evaluation loop.

pub mod eval;
pub mod report;

use thiserror::Error;

pub use eval::{evaluate, instance_mask, predict, probe_probabilities, EvalError, EvalOptions, InstanceMask, ProbabilityProbe, SelectMode};
pub use report::{render_bar_svg, render_line_svg, Aggregate, EvalReport, TaskScore};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("at least one reference is required")]
    NoReferences,
}

/// Lowercase, drop ASCII punctuation, drop the articles `a`/`an`/`the`, and
/// collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    let lowered: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 100 if the normalized prediction equals any normalized reference, else 0.
pub fn exact_match(pred: &str, refs: &[String]) -> Result<f64, MetricError> {
    if refs.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let p = normalize_text(pred);
    Ok(if refs.iter().any(|r| normalize_text(r) == p) { 100.0 } else { 0.0 })
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over normalized whitespace tokens, ×100, best reference.
pub fn rouge_l(pred: &str, refs: &[String]) -> Result<f64, MetricError> {
    if refs.is_empty() {
        return Err(MetricError::NoReferences);
    }
    let p = normalize_text(pred);
    let pt: Vec<&str> = p.split_whitespace().collect();
    if pt.is_empty() {
        return Ok(0.0);
    }
    let mut best: f64 = 0.0;
    for r in refs {
        let rn = normalize_text(r);
        let rt: Vec<&str> = rn.split_whitespace().collect();
        if rt.is_empty() {
            continue;
        }
        let l = lcs_len(&pt, &rt) as f64;
        let (prec, rec) = (l / pt.len() as f64, l / rt.len() as f64);
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        best = best.max(f1);
    }
    Ok(100.0 * best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refs(r: &[&str]) -> Vec<String> {
        r.iter().map(|s| s.to_string()).collect()
    }

    /// Exponential-time LCS: the longest subsequence of `a` (by bitmask) that
    /// is also a subsequence of `b`.
    fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
        let is_subseq = |s: &[&str]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let sub: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&sub).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("Yes."), "yes");
        assert_eq!(normalize_text(" The Cat  sat "), "cat sat");
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("Yes.", &refs(&["yes"])).unwrap(), 100.0);
        assert_eq!(exact_match("entails", &refs(&["neutral"])).unwrap(), 0.0);
        assert_eq!(exact_match("", &refs(&["x"])).unwrap(), 0.0);
        assert!(exact_match("x", &[]).is_err());
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l("the cat sat", &refs(&["the cat sat"])).unwrap(), 100.0);
        assert_eq!(rouge_l("dog", &refs(&["the cat sat"])).unwrap(), 0.0);
        assert_eq!(rouge_l("", &refs(&["x"])).unwrap(), 0.0);
        let s = rouge_l("police kill the gunman", &refs(&["police killed the gunman"])).unwrap();
        assert!((s - 66.67).abs() < 0.01, "{s}");
        // max over references
        assert_eq!(rouge_l("b", &refs(&["c", "b"])).unwrap(), 100.0);
    }

    #[test]
    fn brute_force_oracle_on_worked_example() {
        let a = ["police", "kill", "gunman"];
        let b = ["police", "killed", "gunman"];
        assert_eq!(brute_lcs(&a, &b), 2);
        assert_eq!(lcs_len(&a, &b), 2);
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(
            a in prop::collection::vec(prop::sample::select(vec!["p", "q", "r", "s"]), 0..=8),
            b in prop::collection::vec(prop::sample::select(vec!["p", "q", "r", "s"]), 0..=8),
        ) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn normalize_is_idempotent(s in "[ -~]{0,30}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }

        #[test]
        fn self_scores_are_perfect(s in "[b-z]{1,6}( [b-z]{1,6}){0,4}") {
            let r = vec![s.clone()];
            prop_assert_eq!(exact_match(&s, &r).unwrap(), 100.0);
            if !normalize_text(&s).is_empty() {
                prop_assert_eq!(rouge_l(&s, &r).unwrap(), 100.0);
            }
        }
    }
}
