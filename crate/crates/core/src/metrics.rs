//! Automatic evaluation: BLEU, Self-BLEU, distinct-n, precision/recall/F1,
//! and a topic-match relevance score over the synthetic corpus grammars.
//!
//! The BLEU variant is pinned so numbers reproduce bit-for-bit:
//! sentence-level BLEU-4 with multi-reference clipped counts, add-one
//! smoothing on zero-match orders above unigram (an order with no room for
//! n-grams smooths to 1), zero unigram overlap scoring 0, and the standard
//! brevity penalty against the closest reference length.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::TopicLexicon;
use crate::num;
use crate::{Error, Result, TopicId};

pub const DEFAULT_MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU against multiple references.
pub fn bleu_multi(hypothesis: &[String], references: &[&[String]], max_order: usize) -> Result<f64> {
    if hypothesis.is_empty() {
        return Err(Error::EmptyInput("bleu hypothesis"));
    }
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("bleu references"));
    }
    if max_order < 1 {
        return Err(Error::InvalidConfig("bleu max_order must be >= 1"));
    }

    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let hyp_counts = ngram_counts(hypothesis, n);
        let total: usize = hyp_counts.values().sum();
        let mut matched = 0usize;
        for (gram, &count) in &hyp_counts {
            let best_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            // no unigram overlap: the score is exactly zero
            return Ok(0.0);
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += num::ln(p);
    }

    let hyp_len = hypothesis.len() as f64;
    let closest_ref = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let diff = (len as i64 - hypothesis.len() as i64).abs();
            (diff, len)
        })
        .unwrap() as f64;
    let bp = if hyp_len >= closest_ref {
        1.0
    } else {
        num::exp(1.0 - closest_ref / hyp_len)
    };
    Ok(bp * num::exp(log_sum / max_order as f64))
}

/// Sentence BLEU against one reference.
pub fn bleu(hypothesis: &[String], reference: &[String], max_order: usize) -> Result<f64> {
    bleu_multi(hypothesis, &[reference], max_order)
}

/// Mean BLEU of each candidate against all the others as references.
/// Lower means more diverse output.
pub fn self_bleu(candidates: &[Vec<String>], max_order: usize) -> Result<f64> {
    if candidates.len() < 2 {
        return Err(Error::TooFewCandidates {
            needed: 2,
            got: candidates.len(),
        });
    }
    let mut total = 0.0;
    for (i, cand) in candidates.iter().enumerate() {
        let others: Vec<&[String]> = candidates
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, c)| c.as_slice())
            .collect();
        total += bleu_multi(cand, &others, max_order)?;
    }
    Ok(total / candidates.len() as f64)
}

/// Unique n-gram fraction pooled over all candidates. Higher means more
/// diverse output.
pub fn distinct_n(candidates: &[Vec<String>], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidConfig("distinct n must be >= 1"));
    }
    let pooled_tokens: usize = candidates.iter().map(|c| c.len()).sum();
    if pooled_tokens < n {
        return Err(Error::NgramTooShort {
            n,
            pooled_tokens,
        });
    }
    let mut unique: BTreeSet<&[String]> = BTreeSet::new();
    let mut total = 0usize;
    for cand in candidates {
        if cand.len() >= n {
            for gram in cand.windows(n) {
                unique.insert(gram);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NgramTooShort { n, pooled_tokens });
    }
    Ok(unique.len() as f64 / total as f64)
}

fn joined_set(items: &[Vec<String>]) -> BTreeSet<String> {
    items.iter().map(|toks| toks.join(" ")).collect()
}

/// Exact-string set precision/recall/F1 of generated bidwords against the
/// gold set. An empty generated set scores zero precision.
pub fn prf1(generated: &[Vec<String>], gold: &[Vec<String>]) -> Result<(f64, f64, f64)> {
    let gold_set = joined_set(gold);
    if gold_set.is_empty() {
        return Err(Error::EmptyInput("prf1 gold set"));
    }
    let gen_set = joined_set(generated);
    if gen_set.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let inter = gen_set.intersection(&gold_set).count() as f64;
    let p = inter / gen_set.len() as f64;
    let r = inter / gold_set.len() as f64;
    Ok((p, r, f1_of(p, r)))
}

/// Harmonic mean, zero when both components are zero.
pub fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Fraction of candidates whose strict-majority content-token topic equals
/// the source topic. Candidates with no content tokens (or a tie) never
/// match.
pub fn topic_relevance(candidates: &[Vec<String>], topic: TopicId, lexicon: &TopicLexicon) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let matching = candidates
        .iter()
        .filter(|c| lexicon.majority_topic(c) == Some(topic))
        .count();
    matching as f64 / candidates.len() as f64
}

/// One evaluation item: the candidates decoded for a source, the gold
/// bidwords for that source, and the source topic. `use_refs` gates the
/// reference-based metrics (BLEU, P/R/F1); items whose gold bidword is a
/// known noise substitution are typically excluded from those.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub candidates: Vec<Vec<String>>,
    pub gold: Vec<Vec<String>>,
    pub topic: TopicId,
    pub use_refs: bool,
}

/// Per-run metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub self_bleu: f64,
    pub distinct_3: f64,
    pub distinct_4: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub topic_relevance: f64,
    /// Items evaluated at all.
    pub n_items: usize,
    /// Items that participated in the reference-based metrics.
    pub n_ref_items: usize,
    /// Items that participated in the diversity metrics.
    pub n_diversity_items: usize,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let bounded = [
            self.bleu,
            self.self_bleu,
            self.distinct_3,
            self.distinct_4,
            self.precision,
            self.recall,
            self.f1,
            self.topic_relevance,
        ];
        if bounded.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("metric out of [0, 1]"));
        }
        Ok(())
    }

    /// Aligned plain-text table in relevance-then-diversity column order.
    pub fn as_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric            value\n");
        let rows = [
            ("bleu", self.bleu),
            ("topic_relevance", self.topic_relevance),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("self_bleu", self.self_bleu),
            ("distinct_3", self.distinct_3),
            ("distinct_4", self.distinct_4),
        ];
        for (name, value) in rows {
            out.push_str(&alloc::format!("{name:<17} {value:.4}\n"));
        }
        out.push_str(&alloc::format!(
            "items={} ref_items={} diversity_items={}\n",
            self.n_items, self.n_ref_items, self.n_diversity_items
        ));
        out
    }
}

/// Sentence-level aggregation: per-item scores averaged over the items a
/// metric is defined for (each diversity metric keeps its own eligible-item
/// count; short candidates can rule out distinct-4 but not Self-BLEU).
/// BLEU scores the top candidate against the gold references;
/// precision/recall run over the top `top_k_prf` candidates, with the
/// report F1 taken as the harmonic mean of the averaged P and R.
pub fn aggregate_metrics(
    items: &[EvalItem],
    lexicon: &TopicLexicon,
    top_k_prf: usize,
    max_order: usize,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptyInput("evaluation items"));
    }
    let mut bleu_sum = 0.0;
    let mut n_ref = 0usize;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut self_bleu_sum = 0.0;
    let mut d3_sum = 0.0;
    let mut d4_sum = 0.0;
    let mut n_div = 0usize;
    let mut n_sb = 0usize;
    let mut n_d3 = 0usize;
    let mut n_d4 = 0usize;
    let mut topic_sum = 0.0;

    for item in items {
        topic_sum += topic_relevance(&item.candidates, item.topic, lexicon);

        if item.use_refs && !item.gold.is_empty() {
            if let Some(top) = item.candidates.first().filter(|c| !c.is_empty()) {
                let refs: Vec<&[String]> = item.gold.iter().map(|g| g.as_slice()).collect();
                bleu_sum += bleu_multi(top, &refs, max_order)?;
                let top_k: Vec<Vec<String>> =
                    item.candidates.iter().take(top_k_prf).cloned().collect();
                let (p, r, _) = prf1(&top_k, &item.gold)?;
                p_sum += p;
                r_sum += r;
                n_ref += 1;
            }
        }

        let non_empty: Vec<Vec<String>> =
            item.candidates.iter().filter(|c| !c.is_empty()).cloned().collect();
        if non_empty.len() >= 2 {
            n_div += 1;
            if let Ok(sb) = self_bleu(&non_empty, max_order) {
                self_bleu_sum += sb;
                n_sb += 1;
            }
            if let Ok(d3) = distinct_n(&non_empty, 3) {
                d3_sum += d3;
                n_d3 += 1;
            }
            if let Ok(d4) = distinct_n(&non_empty, 4) {
                d4_sum += d4;
                n_d4 += 1;
            }
        }
    }

    let avg = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
    let precision = avg(p_sum, n_ref);
    let recall = avg(r_sum, n_ref);
    let report = MetricsReport {
        bleu: avg(bleu_sum, n_ref),
        self_bleu: avg(self_bleu_sum, n_sb),
        distinct_3: avg(d3_sum, n_d3),
        distinct_4: avg(d4_sum, n_d4),
        precision,
        recall,
        f1: f1_of(precision, recall),
        topic_relevance: topic_sum / items.len() as f64,
        n_items: items.len(),
        n_ref_items: n_ref,
        n_diversity_items: n_div,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    // ---- bleu -----------------------------------------------------------------

    #[test]
    fn identical_sequences_score_one() {
        let x = toks("a b c d");
        assert!((bleu(&x, &x, 4).unwrap() - 1.0).abs() < 1e-12);
        let short = toks("a");
        assert!((bleu(&short, &short, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_unigram_overlap_scores_zero() {
        let hyp = toks("x y z");
        let r = toks("a b c");
        assert_eq!(bleu(&hyp, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_three_token_case_matches_hand_value() {
        // p1 = 2/3, p2 = 1/2, p3 smoothed to (0+1)/(1+1), p4 smoothed to
        // (0+1)/(0+1) = 1 (no room for 4-grams), BP = 1:
        // bleu = (2/3 * 1/2 * 1/2 * 1)^(1/4) = (1/6)^(1/4)
        let hyp = toks("a b c");
        let r = toks("a b d");
        let expect = (1.0f64 / 6.0).powf(0.25);
        let got = bleu(&hyp, &r, 4).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn brevity_penalty_kicks_in_for_short_hypotheses() {
        let hyp = toks("a b");
        let r = toks("a b c d");
        // p1 = 1, p2 = 1, p3 = p4 = smoothed 1; BP = exp(1 - 4/2)
        let expect = (1.0f64 - 2.0).exp();
        let got = bleu(&hyp, &r, 4).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn multi_reference_clipping_uses_best_reference() {
        let hyp = toks("a a b");
        let r1 = toks("a b");
        let r2 = toks("a a c");
        // unigram matches: "a" clipped at max(1, 2) = 2, "b" at max(1, 0) = 1
        let refs: Vec<&[String]> = vec![&r1, &r2];
        let got = bleu_multi(&hyp, &refs, 1).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_error() {
        let x = toks("a");
        assert!(bleu(&[], &x, 4).is_err());
        assert!(bleu(&x, &[], 4).is_err());
    }

    #[test]
    fn bleu_of_random_sequences_with_themselves_is_one() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..100 {
            let len = 1 + rng.below(8);
            let seq: Vec<String> =
                (0..len).map(|_| alloc::format!("w{}", rng.below(12))).collect();
            assert!((bleu(&seq, &seq, 4).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    // ---- self-bleu -------------------------------------------------------------

    #[test]
    fn identical_candidates_have_self_bleu_one() {
        let cands = vec![toks("a b"), toks("a b"), toks("a b")];
        assert!((self_bleu(&cands, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_candidates_have_self_bleu_zero() {
        let cands = vec![toks("a b"), toks("x y")];
        assert!(self_bleu(&cands, 4).unwrap() < 0.05);
    }

    #[test]
    fn three_candidate_self_bleu_matches_hand_computation() {
        let cands = vec![toks("a b"), toks("a c"), toks("d e")];
        // candidate 0 vs {a c, d e}: p1 = 1/2 ("a"), p2 smoothed 1/2, BP 1
        let b0 = (0.5f64 * 0.5).sqrt();
        // candidate 1 vs {a b, d e}: same by symmetry
        let b1 = b0;
        // candidate 2 vs {a b, a c}: no unigram overlap
        let b2 = 0.0;
        let expect = (b0 + b1 + b2) / 3.0;
        let got = self_bleu(&cands, 2).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn self_bleu_is_permutation_invariant() {
        let mut cands = vec![toks("a b c"), toks("a c"), toks("b d"), toks("e f a")];
        let base = self_bleu(&cands, 4).unwrap();
        cands.reverse();
        assert!((self_bleu(&cands, 4).unwrap() - base).abs() < 1e-12);
        cands.swap(0, 2);
        assert!((self_bleu(&cands, 4).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn self_bleu_needs_two_candidates() {
        assert!(matches!(
            self_bleu(&[toks("a")], 4),
            Err(Error::TooFewCandidates { .. })
        ));
    }

    // ---- distinct-n -----------------------------------------------------------

    #[test]
    fn repeated_unigram_counts_once() {
        let cands = vec![toks("a a a a")];
        assert!((distinct_n(&cands, 1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn all_unique_ngrams_score_one() {
        let cands = vec![toks("a b c"), toks("d e f")];
        assert!((distinct_n(&cands, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_candidates_halve_distinct_1() {
        let cands = vec![toks("a b"), toks("a b")];
        assert!((distinct_n(&cands, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn appending_a_duplicate_never_raises_distinct_n() {
        let mut rng = crate::rng::Rng::new(9);
        for _ in 0..50 {
            let n_cands = 2 + rng.below(4);
            let cands: Vec<Vec<String>> = (0..n_cands)
                .map(|_| {
                    let len = 1 + rng.below(5);
                    (0..len).map(|_| alloc::format!("w{}", rng.below(6))).collect()
                })
                .collect();
            for n in 1..=2 {
                let before = distinct_n(&cands, n).unwrap();
                let mut extended = cands.clone();
                extended.push(cands[rng.below(cands.len())].clone());
                let after = distinct_n(&extended, n).unwrap();
                assert!(after <= before + 1e-12, "distinct-{n} rose: {before} -> {after}");
            }
        }
    }

    #[test]
    fn too_short_pools_error() {
        assert!(matches!(
            distinct_n(&[toks("a b")], 3),
            Err(Error::NgramTooShort { .. })
        ));
    }

    // ---- prf1 ------------------------------------------------------------------

    #[test]
    fn identical_sets_score_perfectly() {
        let set = vec![toks("a b"), toks("c")];
        assert_eq!(prf1(&set, &set).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_sets_score_zero() {
        assert_eq!(
            prf1(&[toks("a")], &[toks("b")]).unwrap(),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn partial_overlap_matches_arithmetic() {
        let generated = vec![toks("x"), toks("y"), toks("z")];
        let gold = vec![toks("x"), toks("w")];
        let (p, r, f) = prf1(&generated, &gold).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert!((r - 0.5).abs() < 1e-12);
        assert!((f - 0.4).abs() < 1e-12);
    }

    #[test]
    fn duplicates_do_not_change_set_semantics() {
        let generated = vec![toks("x"), toks("x"), toks("y")];
        let gold = vec![toks("x"), toks("x")];
        let (p, r, f) = prf1(&generated, &gold).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_generated_set_has_zero_precision() {
        assert_eq!(prf1(&[], &[toks("x")]).unwrap(), (0.0, 0.0, 0.0));
        assert!(prf1(&[toks("x")], &[]).is_err());
    }

    // ---- topic relevance ---------------------------------------------------------

    fn lexicon() -> TopicLexicon {
        crate::corpus::topic_lexicon(&crate::corpus::GenSpec::tiny(3, 10, 1))
    }

    #[test]
    fn on_topic_candidates_score_one() {
        let lex = lexicon();
        let pool: Vec<String> = lex.topic_tokens(1).iter().map(|s| s.to_string()).collect();
        let cands = vec![
            vec![pool[0].clone(), pool[1].clone()],
            vec![pool[2].clone()],
        ];
        assert_eq!(topic_relevance(&cands, 1, &lex), 1.0);
        assert_eq!(topic_relevance(&cands, 0, &lex), 0.0);
    }

    #[test]
    fn mixed_candidates_match_hand_count() {
        let lex = lexicon();
        let t0: Vec<String> = lex.topic_tokens(0).iter().map(|s| s.to_string()).collect();
        let t1: Vec<String> = lex.topic_tokens(1).iter().map(|s| s.to_string()).collect();
        let cands = vec![
            vec![t0[0].clone(), t0[1].clone(), t1[0].clone()], // majority topic 0
            vec![t1[0].clone()],                               // topic 1
            vec!["the".to_string()],                           // no content tokens
        ];
        let got = topic_relevance(&cands, 0, &lex);
        assert!((got - 1.0 / 3.0).abs() < 1e-12);
    }

    // ---- aggregation -----------------------------------------------------------

    #[test]
    fn aggregate_populates_every_field() {
        let lex = lexicon();
        let t0: Vec<String> = lex.topic_tokens(0).iter().map(|s| s.to_string()).collect();
        let items = vec![EvalItem {
            candidates: vec![
                vec![t0[0].clone(), t0[1].clone(), t0[2].clone(), t0[3].clone()],
                vec![t0[1].clone(), t0[4].clone(), t0[5].clone(), t0[6].clone()],
            ],
            gold: vec![vec![t0[0].clone(), t0[1].clone(), t0[2].clone(), t0[3].clone()]],
            topic: 0,
            use_refs: true,
        }];
        let report = aggregate_metrics(&items, &lex, 5, 4).unwrap();
        assert_eq!(report.n_items, 1);
        assert_eq!(report.n_ref_items, 1);
        assert_eq!(report.n_diversity_items, 1);
        assert!((report.bleu - 1.0).abs() < 1e-12);
        assert!((report.precision - 0.5).abs() < 1e-12);
        assert!((report.recall - 1.0).abs() < 1e-12);
        assert!((report.f1 - f1_of(0.5, 1.0)).abs() < 1e-12);
        assert_eq!(report.topic_relevance, 1.0);
        assert!(report.self_bleu < 1.0);
        assert!(report.distinct_3 > 0.0);
        report.validate().unwrap();
        assert!(!report.as_table().is_empty());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn token_seqs(max_cands: usize) -> impl Strategy<Value = Vec<Vec<String>>> {
            prop::collection::vec(
                prop::collection::vec(0usize..8, 1..8)
                    .prop_map(|ids| ids.into_iter().map(|i| alloc::format!("w{i}")).collect()),
                1..max_cands,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn bleu_is_bounded_and_reflexive(cands in token_seqs(3)) {
                let x = &cands[0];
                let r = cands.last().unwrap();
                let score = bleu(x, r, 4).unwrap();
                prop_assert!((0.0..=1.0).contains(&score));
                prop_assert!((bleu(x, x, 4).unwrap() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn self_bleu_is_permutation_invariant(mut cands in token_seqs(6), swap in 0usize..16) {
                prop_assume!(cands.len() >= 2);
                let base = self_bleu(&cands, 4).unwrap();
                let i = swap % cands.len();
                let j = (swap / 4) % cands.len();
                cands.swap(i, j);
                prop_assert!((self_bleu(&cands, 4).unwrap() - base).abs() < 1e-12);
            }

            #[test]
            fn appending_duplicates_never_raises_distinct(cands in token_seqs(5), pick in 0usize..8) {
                for n in 1..=2 {
                    if let Ok(before) = distinct_n(&cands, n) {
                        let mut extended = cands.clone();
                        extended.push(cands[pick % cands.len()].clone());
                        let after = distinct_n(&extended, n).unwrap();
                        prop_assert!(after <= before + 1e-12);
                    }
                }
            }

            #[test]
            fn prf1_ignores_duplicates(generated in token_seqs(5), gold in token_seqs(4)) {
                let base = prf1(&generated, &gold).unwrap();
                let mut dup_gen = generated.clone();
                dup_gen.extend(generated.iter().cloned());
                let mut dup_gold = gold.clone();
                dup_gold.extend(gold.iter().cloned());
                prop_assert_eq!(prf1(&dup_gen, &dup_gold).unwrap(), base);
            }
        }
    }

    #[test]
    fn noisy_items_can_be_excluded_from_reference_metrics() {
        let lex = lexicon();
        let t0: Vec<String> = lex.topic_tokens(0).iter().map(|s| s.to_string()).collect();
        let items = vec![
            EvalItem {
                candidates: vec![vec![t0[0].clone()]],
                gold: vec![vec![t0[0].clone()]],
                topic: 0,
                use_refs: true,
            },
            EvalItem {
                candidates: vec![vec![t0[1].clone()]],
                gold: vec![vec![t0[2].clone()]],
                topic: 0,
                use_refs: false,
            },
        ];
        let report = aggregate_metrics(&items, &lex, 5, 4).unwrap();
        assert_eq!(report.n_items, 2);
        assert_eq!(report.n_ref_items, 1);
        assert!((report.bleu - 1.0).abs() < 1e-12);
    }
}
