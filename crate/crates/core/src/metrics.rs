//! BLEU, ROUGE and exact match over whitespace tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::align::lcs_len;
use crate::par;

fn ngrams<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if n == 0 || toks.len() < n {
        return m;
    }
    for w in toks.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram matches and the hypothesis n-gram count.
fn clipped<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], reference: &[U], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Sentence-level BLEU-n with uniform weights.
///
/// Orders `k >= 2` with no match use `(m + 1) / (c + 1)`; unigram precision
/// is never smoothed.
pub fn bleu_n<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], reference: &[U], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, c) = clipped(hyp, reference, k);
        let p = if k >= 2 && m == 0 {
            1.0 / (c + 1) as f64
        } else {
            m as f64 / c as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    brevity_penalty(hyp.len(), reference.len()) * (log_sum / n as f64).exp()
}

/// Corpus BLEU-n: counts are summed over all pairs before the geometric mean.
pub fn corpus_bleu<T: AsRef<str>, U: AsRef<str>>(pairs: &[(&[T], &[U])], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    let mut matches = vec![0usize; n];
    let mut counts = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in pairs {
        hyp_len += h.len();
        ref_len += r.len();
        for k in 1..=n {
            let (m, c) = clipped(h, r, k);
            matches[k - 1] += m;
            counts[k - 1] += c;
        }
    }
    let mut log_sum = 0.0;
    for (m, c) in matches.into_iter().zip(counts) {
        if m == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / c as f64).ln();
    }
    brevity_penalty(hyp_len, ref_len) * (log_sum / n as f64).exp()
}

fn f1(overlap: usize, hyp_count: usize, ref_count: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_count as f64;
    let r = overlap as f64 / ref_count as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-n F1 with clipped counts. When neither side has an n-gram the
/// score falls back to exact match.
pub fn rouge_n<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], reference: &[U], n: usize) -> f64 {
    assert!(n >= 1, "ROUGE order must be positive");
    let hc = hyp.len().saturating_sub(n - 1);
    let rc = reference.len().saturating_sub(n - 1);
    if hc == 0 && rc == 0 {
        return exact_match(hyp, reference);
    }
    if hc == 0 || rc == 0 {
        return 0.0;
    }
    let (m, _) = clipped(hyp, reference, n);
    f1(m, hc, rc)
}

/// LCS-based ROUGE-L F1.
pub fn rouge_l<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], reference: &[U]) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    f1(lcs_len(&h, &r), h.len(), r.len())
}

/// 1.0 iff the token sequences are identical (case-sensitive).
pub fn exact_match<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], reference: &[U]) -> f64 {
    let same = hyp.len() == reference.len()
        && hyp.iter().zip(reference).all(|(a, b)| a.as_ref() == b.as_ref());
    if same {
        1.0
    } else {
        0.0
    }
}

/// Per-example scores in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub em: f64,
}

impl ExampleScores {
    pub fn compute<T: AsRef<str>, U: AsRef<str>>(hyp: &[T], reference: &[U]) -> Self {
        Self {
            bleu_1: bleu_n(hyp, reference, 1),
            bleu_2: bleu_n(hyp, reference, 2),
            bleu_4: bleu_n(hyp, reference, 4),
            rouge_1: rouge_n(hyp, reference, 1),
            rouge_2: rouge_n(hyp, reference, 2),
            rouge_l: rouge_l(hyp, reference),
            em: exact_match(hyp, reference),
        }
    }
}

/// Corpus scores scaled to `[0, 100]`. BLEU is corpus-level; ROUGE and EM
/// are means of the per-example values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub em: f64,
}

impl ScoreReport {
    pub fn compute<T, U>(pairs: &[(&[T], &[U])]) -> (Self, Vec<ExampleScores>)
    where
        T: AsRef<str> + Sync,
        U: AsRef<str> + Sync,
    {
        let per: Vec<ExampleScores> = par::map(pairs, |(h, r)| ExampleScores::compute(h, r));
        let mean = |f: fn(&ExampleScores) -> f64| {
            if per.is_empty() {
                0.0
            } else {
                100.0 * per.iter().map(f).sum::<f64>() / per.len() as f64
            }
        };
        let report = Self {
            bleu_1: 100.0 * corpus_bleu(pairs, 1),
            bleu_2: 100.0 * corpus_bleu(pairs, 2),
            bleu_4: 100.0 * corpus_bleu(pairs, 4),
            rouge_1: mean(|s| s.rouge_1),
            rouge_2: mean(|s| s.rouge_2),
            rouge_l: mean(|s| s.rouge_l),
            em: mean(|s| s.em),
        };
        (report, per)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    const EPS: f64 = 1e-12;

    #[test]
    fn bleu_hand_values() {
        assert!((bleu_n(&t("a b c"), &t("a b d"), 1) - 2.0 / 3.0).abs() < EPS);
        assert!((bleu_n(&t("a"), &t("a b c d"), 1) - (-3.0f64).exp()).abs() < EPS);
        // p1 = 2/3, p2 = 1/2 with BP = 1.
        assert!((bleu_n(&t("a b c"), &t("a b d"), 2) - (1.0f64 / 3.0).sqrt()).abs() < EPS);
        // p2 has no match: (0 + 1) / (2 + 1).
        assert!((bleu_n(&t("a c b"), &t("a b c"), 2) - (1.0f64 / 3.0).sqrt()).abs() < EPS);
        assert_eq!(bleu_n::<&str, &str>(&[], &t("a"), 1), 0.0);
        assert_eq!(bleu_n(&t("x y"), &t("a b"), 4), 0.0);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let a = (t("a b c"), t("a b d"));
        let b = (t("x"), t("x"));
        let pairs = [(&a.0[..], &a.1[..]), (&b.0[..], &b.1[..])];
        assert!((corpus_bleu(&pairs, 1) - 3.0 / 4.0).abs() < EPS);
        // Bigrams: 1 match of 2.
        assert!((corpus_bleu(&pairs, 2) - (0.75f64 * 0.5).sqrt()).abs() < EPS);
    }

    #[test]
    fn rouge_hand_values() {
        assert!((rouge_n(&t("a b"), &t("b c"), 1) - 0.5).abs() < EPS);
        assert_eq!(rouge_n(&t("a b"), &t("c d"), 1), 0.0);
        assert_eq!(rouge_n::<&str, &str>(&[], &[], 1), 1.0);
        assert_eq!(rouge_n(&t("a"), &[] as &[&str], 1), 0.0);
        assert_eq!(rouge_n(&t("a"), &t("a"), 2), 1.0);
        assert_eq!(rouge_n(&t("a"), &t("b"), 2), 0.0);
        let hyp = t("it sleeps well , mostly at night .");
        let gold = t("the puppy sleeps well at night now .");
        assert!((rouge_l(&hyp, &gold) - 0.625).abs() < EPS);
    }

    #[test]
    fn exact_match_is_case_sensitive() {
        assert_eq!(exact_match(&t("a b"), &t("a b")), 1.0);
        assert_eq!(exact_match(&t("a B"), &t("a b")), 0.0);
        assert_eq!(exact_match(&t("a"), &t("a b")), 0.0);
    }

    #[test]
    fn report_scales_to_percent() {
        let a = (t("a b c d"), t("a b c d"));
        let b = (t("x y"), t("x z"));
        let pairs = [(&a.0[..], &a.1[..]), (&b.0[..], &b.1[..])];
        let (rep, per) = ScoreReport::compute(&pairs);
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].bleu_4, 1.0);
        assert!((rep.em - 50.0).abs() < EPS);
        assert!((rep.rouge_1 - 75.0).abs() < EPS);
    }

    proptest! {
        #[test]
        fn identical_pairs_score_one(v in proptest::collection::vec("[a-d]", 1..12)) {
            let s = ExampleScores::compute(&v, &v);
            for x in [s.bleu_1, s.bleu_2, s.bleu_4, s.rouge_1, s.rouge_2, s.rouge_l, s.em] {
                prop_assert!((x - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn bounded_and_rouge_l_symmetric(
            a in proptest::collection::vec("[a-d]", 0..10),
            b in proptest::collection::vec("[a-d]", 0..10),
        ) {
            let s = ExampleScores::compute(&a, &b);
            for x in [s.bleu_1, s.bleu_2, s.bleu_4, s.rouge_1, s.rouge_2, s.rouge_l, s.em] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
            }
            if a.len() == b.len() {
                prop_assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() < 1e-12);
            }
        }
    }
}
