//! Surface-overlap diagnostics over lowercased whitespace tokens.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<String>,
}

impl TokenSeq {
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: text.split_whitespace().map(str::to_lowercase).collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Longest common subsequence length (two-row dynamic program).
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let lcs = lcs_len(&candidate.tokens, &reference.tokens);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngrams(seq: &TokenSeq, n: usize) -> HashSet<&[String]> {
    if n == 0 || seq.len() < n {
        return HashSet::new();
    }
    seq.tokens.windows(n).collect()
}

/// Jaccard similarity of contiguous n-gram sets; 0 when both sets are empty.
pub fn ngram_jaccard(a: &TokenSeq, b: &TokenSeq, n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be >= 1");
    let ga = ngrams(a, n);
    let gb = ngrams(b, n);
    let union = ga.union(&gb).count();
    if union == 0 {
        return 0.0;
    }
    ga.intersection(&gb).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &str) -> TokenSeq {
        TokenSeq::from_text(s)
    }

    /// Enumerates every subsequence of `a` and keeps the longest one that
    /// also appears in `b`.
    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        fn is_subseq(s: &[&String], b: &[String]) -> bool {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == *x))
        }
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            if sub.len() > best && is_subseq(&sub, b) {
                best = sub.len();
            }
        }
        best
    }

    #[test]
    fn tokenization_lowercases() {
        assert_eq!(seq("The  CAT\tsat").tokens(), ["the", "cat", "sat"]);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&seq("a b c"), &seq("a b c")), 1.0);
        assert_eq!(rouge_l(&seq("a b c"), &seq("x y z")), 0.0);
        assert_eq!(rouge_l(&seq(""), &seq("x y z")), 0.0);
        let f = rouge_l(&seq("the cat sat"), &seq("the cat ran fast"));
        assert!((f - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(ngram_jaccard(&seq("a b c d e f"), &seq("a b c d e f"), 5), 1.0);
        assert_eq!(ngram_jaccard(&seq("a b"), &seq("a b"), 5), 0.0);
        let j = ngram_jaccard(&seq("a b c d e f"), &seq("b c d e f g"), 5);
        assert!((j - 1.0 / 3.0).abs() < 1e-12);
    }

    fn short_seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..=10)
    }

    proptest! {
        #[test]
        fn lcs_matches_enumeration(a in short_seq(), b in short_seq()) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn metrics_are_symmetric_and_bounded(a in short_seq(), b in short_seq(), n in 1usize..4) {
            let (a, b) = (TokenSeq { tokens: a }, TokenSeq { tokens: b });
            let r = rouge_l(&a, &b);
            let j = ngram_jaccard(&a, &b, n);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert!((r - rouge_l(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(j, ngram_jaccard(&b, &a, n));
        }
    }
}
