//! Synthetic keyword-bidding corpus.
//!
//! Real ad/query/bidword logs are proprietary, so the pipeline runs on a
//! topic-grammar simulation instead: each topic owns a disjoint pool of
//! content tokens, all topics share a small pool of function words, and
//! ads/queries/bidwords are sampled phrases whose lengths follow Poisson
//! draws around configurable means. The structural property the training
//! framework exploits is preserved: a bidword bridges an ad and a query
//! inside one topic.
//!
//! Noise mimics the keyword-bidding problem: with probability
//! `noise_prob` a pair's true bidword is replaced by a globally popular
//! one drawn from a Zipf-like popularity distribution, regardless of
//! topic. Ad/query pairs are never corrupted.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result, TopicId};

const FUNCTION_WORDS: [&str; 12] = [
    "the", "for", "and", "with", "best", "buy", "new", "top", "online", "shop", "now", "get",
];

/// Content tokens per topic pool.
const POOL_SIZE: usize = 24;

/// Globally popular bidwords available as noise replacements, per topic.
const POPULAR_PER_TOPIC: usize = 3;

/// Brand-like tokens that only ever appear in popular bidwords. Popular
/// bid terms are generic high-volume phrases, not topic vocabulary, which
/// is what makes them off-topic for every ad.
const BRAND_POOL: [&str; 10] = [
    "brandmax", "megadeal", "superbuy", "hotpick", "primego", "flashhit", "dealzone",
    "topmart", "gigasale", "ultrabuy",
];

const CONTENT_PROB_AD: f64 = 0.75;
const CONTENT_PROB_QUERY: f64 = 0.8;
const CONTENT_PROB_BIDWORD: f64 = 0.9;

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub n_topics: usize,
    pub aq_pairs_per_topic: usize,
    pub ab_pairs_per_topic: usize,
    pub qb_pairs_per_topic: usize,
    pub mean_len_ad: f64,
    pub mean_len_query: f64,
    pub mean_len_bidword: f64,
    /// Distinct clean bidword phrases per topic; real bidwords are a
    /// curated finite inventory, so pairs reuse phrases.
    pub bidwords_per_topic: usize,
    /// Probability that an ab/qb pair's bidword is replaced by a popular one.
    pub noise_prob: f64,
    /// Zipf exponent of the popular-bidword distribution; larger means the
    /// most popular bidword dominates replacements.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_topics: 4,
            aq_pairs_per_topic: 500,
            ab_pairs_per_topic: 500,
            qb_pairs_per_topic: 500,
            mean_len_ad: 16.0,
            mean_len_query: 5.0,
            mean_len_bidword: 3.0,
            bidwords_per_topic: 12,
            noise_prob: 0.3,
            popularity_skew: 1.5,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics < 2 {
            return Err(Error::TooFewTopics {
                n_topics: self.n_topics,
            });
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::InvalidConfig("noise_prob must be in [0, 1]"));
        }
        if self.aq_pairs_per_topic < 1 || self.ab_pairs_per_topic < 1 || self.qb_pairs_per_topic < 1
        {
            return Err(Error::InvalidConfig("pairs_per_topic must be >= 1"));
        }
        if self.bidwords_per_topic < 2 {
            return Err(Error::InvalidConfig("bidwords_per_topic must be >= 2"));
        }
        if self.mean_len_ad <= 0.0 || self.mean_len_query <= 0.0 || self.mean_len_bidword <= 0.0 {
            return Err(Error::InvalidConfig("mean lengths must be positive"));
        }
        if self.popularity_skew < 0.0 {
            return Err(Error::InvalidConfig("popularity_skew must be >= 0"));
        }
        Ok(())
    }

    /// A compact spec for smoke tests and toy runs.
    pub fn tiny(n_topics: usize, pairs_per_topic: usize, seed: u64) -> GenSpec {
        GenSpec {
            n_topics,
            aq_pairs_per_topic: pairs_per_topic,
            ab_pairs_per_topic: pairs_per_topic,
            qb_pairs_per_topic: pairs_per_topic,
            mean_len_ad: 6.0,
            mean_len_query: 4.0,
            mean_len_bidword: 2.5,
            bidwords_per_topic: 8,
            noise_prob: 0.3,
            popularity_skew: 1.5,
            seed,
        }
    }

    #[doc(hidden)]
    pub fn default_for_tests(n_topics: usize, pairs_per_topic: usize) -> GenSpec {
        GenSpec::tiny(n_topics, pairs_per_topic, 7)
    }
}

/// One source/target pair with its (source-side) topic and noise flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriPair {
    pub src: Vec<String>,
    pub dst: Vec<String>,
    pub topic: TopicId,
    pub noisy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// The three paired datasets with per-pair split assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct TriCorpus {
    pub aq: Vec<TriPair>,
    pub ab: Vec<TriPair>,
    pub qb: Vec<TriPair>,
    pub aq_split: Vec<Split>,
    pub ab_split: Vec<Split>,
    pub qb_split: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    AQ,
    AB,
    QB,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::AQ, Dataset::AB, Dataset::QB];

    pub fn name(&self) -> &'static str {
        match self {
            Dataset::AQ => "aq",
            Dataset::AB => "ab",
            Dataset::QB => "qb",
        }
    }
}

impl TriCorpus {
    pub fn pairs(&self, ds: Dataset) -> &[TriPair] {
        match ds {
            Dataset::AQ => &self.aq,
            Dataset::AB => &self.ab,
            Dataset::QB => &self.qb,
        }
    }

    pub fn splits(&self, ds: Dataset) -> &[Split] {
        match ds {
            Dataset::AQ => &self.aq_split,
            Dataset::AB => &self.ab_split,
            Dataset::QB => &self.qb_split,
        }
    }

    /// Pairs of `ds` assigned to `split`, in corpus order.
    pub fn split_pairs(&self, ds: Dataset, split: Split) -> Vec<&TriPair> {
        self.pairs(ds)
            .iter()
            .zip(self.splits(ds))
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p)
            .collect()
    }

    /// All token lists of training pairs, across datasets and sides.
    pub fn train_token_streams(&self) -> impl Iterator<Item = &Vec<String>> {
        Dataset::ALL.into_iter().flat_map(move |ds| {
            self.pairs(ds)
                .iter()
                .zip(self.splits(ds))
                .filter(|(_, s)| **s == Split::Train)
                .flat_map(|(p, _)| [&p.src, &p.dst])
        })
    }

    /// Builds an aq-only corpus from whitespace token strings; handy in
    /// unit tests that only need text.
    pub fn from_aq_lines(lines: &[(&str, &str)]) -> TriCorpus {
        let aq: Vec<TriPair> = lines
            .iter()
            .map(|(a, q)| TriPair {
                src: a.split_whitespace().map(|t| t.to_string()).collect(),
                dst: q.split_whitespace().map(|t| t.to_string()).collect(),
                topic: 0,
                noisy: false,
            })
            .collect();
        let n = aq.len();
        TriCorpus {
            aq,
            ab: Vec::new(),
            qb: Vec::new(),
            aq_split: alloc::vec![Split::Train; n],
            ab_split: Vec::new(),
            qb_split: Vec::new(),
        }
    }
}

/// Token-to-topic assignments of the generator's grammars, used by the
/// topic-relevance metric. Function words and popular brand tokens carry
/// no topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicLexicon {
    pub n_topics: usize,
    token_topic: BTreeMap<String, TopicId>,
    function_words: BTreeSet<String>,
    #[serde(default)]
    popular_words: BTreeSet<String>,
}

impl TopicLexicon {
    pub fn topic_of(&self, token: &str) -> Option<TopicId> {
        self.token_topic.get(token).copied()
    }

    pub fn is_function_word(&self, token: &str) -> bool {
        self.function_words.contains(token)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_topic.contains_key(token)
            || self.function_words.contains(token)
            || self.popular_words.contains(token)
    }

    pub fn is_popular_word(&self, token: &str) -> bool {
        self.popular_words.contains(token)
    }

    pub fn topic_tokens(&self, topic: TopicId) -> Vec<&str> {
        self.token_topic
            .iter()
            .filter(|(_, t)| **t == topic)
            .map(|(tok, _)| tok.as_str())
            .collect()
    }

    /// The topic holding a strict majority of the content tokens, if any.
    /// Function words and unknown tokens do not vote; ties mean no topic.
    pub fn majority_topic(&self, tokens: &[String]) -> Option<TopicId> {
        let mut counts: BTreeMap<TopicId, usize> = BTreeMap::new();
        for tok in tokens {
            if let Some(t) = self.topic_of(tok) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let best = counts.iter().max_by_key(|(_, c)| **c)?;
        let tied = counts.values().filter(|c| *c == best.1).count() > 1;
        if tied {
            None
        } else {
            Some(*best.0)
        }
    }
}

/// The grammar is a pure function of the spec: topic `t` owns content
/// tokens `t{t}w{i}` and every topic shares the function-word pool.
pub fn topic_lexicon(spec: &GenSpec) -> TopicLexicon {
    let mut token_topic = BTreeMap::new();
    for t in 0..spec.n_topics {
        for i in 0..POOL_SIZE {
            token_topic.insert(format!("t{t}w{i:02}"), t);
        }
    }
    TopicLexicon {
        n_topics: spec.n_topics,
        token_topic,
        function_words: FUNCTION_WORDS.iter().map(|w| w.to_string()).collect(),
        popular_words: BRAND_POOL.iter().map(|w| w.to_string()).collect(),
    }
}

/// A popular bidword. Inventory order is popularity order: index 0 is the
/// most popular.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularBidword {
    pub tokens: Vec<String>,
}

/// Per-topic inventories of clean bidword phrases, deterministic for a
/// fixed spec. Pairs draw their bidword from the pair topic's inventory.
pub fn bidword_inventory(spec: &GenSpec) -> Vec<Vec<Vec<String>>> {
    let lexicon = topic_lexicon(spec);
    let mut rng = Rng::substream(spec.seed, "corpus.bidwords");
    (0..spec.n_topics)
        .map(|topic| {
            (0..spec.bidwords_per_topic)
                .map(|_| {
                    sample_phrase(
                        &mut rng,
                        &lexicon,
                        topic,
                        spec.mean_len_bidword,
                        CONTENT_PROB_BIDWORD,
                        1,
                    )
                })
                .collect()
        })
        .collect()
}

/// The global popular-bidword inventory: short phrases over the brand
/// pool, deterministic for a fixed spec. Brand tokens belong to no topic,
/// so a substituted bidword is always off-topic for its pair.
pub fn popular_inventory(spec: &GenSpec) -> Vec<PopularBidword> {
    let mut rng = Rng::substream(spec.seed, "corpus.popular");
    let mut inventory = Vec::new();
    for _ in 0..spec.n_topics * POPULAR_PER_TOPIC {
        let len = 1 + rng.below(3);
        let tokens = (0..len)
            .map(|_| BRAND_POOL[rng.below(BRAND_POOL.len())].to_string())
            .collect();
        inventory.push(PopularBidword { tokens });
    }
    inventory
}

fn sample_phrase(
    rng: &mut Rng,
    lexicon: &TopicLexicon,
    topic: TopicId,
    mean_len: f64,
    content_prob: f64,
    min_len: usize,
) -> Vec<String> {
    let max_len = (2.0 * mean_len) as usize;
    let len = rng.poisson(mean_len).clamp(min_len, max_len.max(min_len));
    let pool = lexicon.topic_tokens(topic);
    let mut phrase: Vec<String> = (0..len)
        .map(|_| {
            if rng.coin(content_prob) {
                pool[rng.below(pool.len())].to_string()
            } else {
                FUNCTION_WORDS[rng.below(FUNCTION_WORDS.len())].to_string()
            }
        })
        .collect();
    // A phrase of only function words carries no topic; pin one content
    // token so bidwords always identify their topic.
    if phrase.iter().all(|t| lexicon.topic_of(t).is_none()) {
        let at = rng.below(phrase.len());
        phrase[at] = pool[rng.below(pool.len())].to_string();
    }
    phrase
}

/// Generates the three paired datasets. Ad/query pairs are always
/// topic-consistent; ab/qb pairs pass through [`inject_noise`]. The result
/// is bitwise reproducible for a fixed spec; every pair starts in the
/// training split.
pub fn generate_corpus(spec: &GenSpec) -> Result<TriCorpus> {
    spec.validate()?;
    let lexicon = topic_lexicon(spec);
    let inventory = popular_inventory(spec);
    let bidwords = bidword_inventory(spec);

    let make_pairs = |stream: &str,
                      per_topic: usize,
                      src_mean: f64,
                      src_prob: f64,
                      src_min: usize,
                      dst_from_inventory: bool,
                      dst_mean: f64,
                      dst_prob: f64,
                      dst_min: usize| {
        let mut rng = Rng::substream(spec.seed, stream);
        let mut pairs = Vec::with_capacity(per_topic * spec.n_topics);
        for topic in 0..spec.n_topics {
            for _ in 0..per_topic {
                let src = sample_phrase(&mut rng, &lexicon, topic, src_mean, src_prob, src_min);
                let dst = if dst_from_inventory {
                    bidwords[topic][rng.below(bidwords[topic].len())].clone()
                } else {
                    sample_phrase(&mut rng, &lexicon, topic, dst_mean, dst_prob, dst_min)
                };
                pairs.push(TriPair {
                    src,
                    dst,
                    topic,
                    noisy: false,
                });
            }
        }
        pairs
    };

    let aq = make_pairs(
        "corpus.aq",
        spec.aq_pairs_per_topic,
        spec.mean_len_ad,
        CONTENT_PROB_AD,
        3,
        false,
        spec.mean_len_query,
        CONTENT_PROB_QUERY,
        2,
    );
    let mut ab = make_pairs(
        "corpus.ab",
        spec.ab_pairs_per_topic,
        spec.mean_len_ad,
        CONTENT_PROB_AD,
        3,
        true,
        spec.mean_len_bidword,
        CONTENT_PROB_BIDWORD,
        1,
    );
    let mut qb = make_pairs(
        "corpus.qb",
        spec.qb_pairs_per_topic,
        spec.mean_len_query,
        CONTENT_PROB_QUERY,
        2,
        true,
        spec.mean_len_bidword,
        CONTENT_PROB_BIDWORD,
        1,
    );

    let mut noise_rng = Rng::substream(spec.seed, "corpus.noise");
    inject_noise(&mut ab, spec.noise_prob, spec.popularity_skew, &inventory, &mut noise_rng);
    inject_noise(&mut qb, spec.noise_prob, spec.popularity_skew, &inventory, &mut noise_rng);

    let (na, nb, nq) = (aq.len(), ab.len(), qb.len());
    Ok(TriCorpus {
        aq,
        ab,
        qb,
        aq_split: alloc::vec![Split::Train; na],
        ab_split: alloc::vec![Split::Train; nb],
        qb_split: alloc::vec![Split::Train; nq],
    })
}

/// Replaces each pair's bidword, with probability `noise_prob`, by an
/// inventory entry drawn from a Zipf(`popularity_skew`) rank distribution.
/// Replaced pairs are flagged noisy; the pair's topic id (its source side)
/// is left untouched.
pub fn inject_noise(
    pairs: &mut [TriPair],
    noise_prob: f64,
    popularity_skew: f64,
    inventory: &[PopularBidword],
    rng: &mut Rng,
) {
    if inventory.is_empty() {
        return;
    }
    for pair in pairs.iter_mut() {
        if rng.coin(noise_prob) {
            let rank = rng.zipf(inventory.len(), popularity_skew);
            pair.dst = inventory[rank].tokens.clone();
            pair.noisy = true;
        }
    }
}

/// Assigns `valid_n` validation and `test_n` test pairs per dataset,
/// uniformly at random and deterministically for a fixed seed; everything
/// else stays in the training split.
pub fn split_corpus(mut corpus: TriCorpus, valid_n: usize, test_n: usize, seed: u64) -> Result<TriCorpus> {
    for ds in Dataset::ALL {
        let n = corpus.pairs(ds).len();
        if valid_n + test_n >= n && !(valid_n == 0 && test_n == 0) {
            return Err(Error::SplitTooLarge {
                dataset: ds.name(),
                requested: valid_n + test_n,
                available: n,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::substream(seed, ds.name());
        rng.shuffle(&mut order);
        let assign = match ds {
            Dataset::AQ => &mut corpus.aq_split,
            Dataset::AB => &mut corpus.ab_split,
            Dataset::QB => &mut corpus.qb_split,
        };
        for slot in assign.iter_mut() {
            *slot = Split::Train;
        }
        for (i, &idx) in order.iter().enumerate() {
            if i < valid_n {
                assign[idx] = Split::Valid;
            } else if i < valid_n + test_n {
                assign[idx] = Split::Test;
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec::tiny(3, 40, 11);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_single_topic() {
        let spec = GenSpec::tiny(1, 10, 0);
        assert!(matches!(
            generate_corpus(&spec),
            Err(Error::TooFewTopics { n_topics: 1 })
        ));
    }

    #[test]
    fn zero_noise_keeps_pairs_clean_and_on_topic() {
        let mut spec = GenSpec::tiny(3, 50, 5);
        spec.noise_prob = 0.0;
        let c = generate_corpus(&spec).unwrap();
        let lex = topic_lexicon(&spec);
        for pair in c.ab.iter().chain(c.qb.iter()) {
            assert!(!pair.noisy);
            assert_eq!(lex.majority_topic(&pair.dst), Some(pair.topic));
        }
    }

    #[test]
    fn full_noise_flags_every_pair() {
        let mut spec = GenSpec::tiny(2, 30, 5);
        spec.noise_prob = 1.0;
        let c = generate_corpus(&spec).unwrap();
        assert!(c.ab.iter().all(|p| p.noisy));
        assert!(c.qb.iter().all(|p| p.noisy));
    }

    #[test]
    fn aq_pairs_are_never_corrupted() {
        let mut spec = GenSpec::tiny(3, 60, 2);
        spec.noise_prob = 1.0;
        let c = generate_corpus(&spec).unwrap();
        let lex = topic_lexicon(&spec);
        for p in &c.aq {
            assert!(!p.noisy);
            for tok in p.src.iter().chain(p.dst.iter()) {
                assert!(lex.contains(tok));
            }
        }
    }

    #[test]
    fn noise_rate_matches_probability() {
        // 10k ab pairs at noise_prob 0.3. The binomial standard deviation is
        // sqrt(0.3 * 0.7 / 10000) ~ 0.0046, so +/-0.02 is a > 4 sigma band
        // and +/-3 sigma is the statistical property bound.
        let mut spec = GenSpec::tiny(4, 2500, 17);
        spec.noise_prob = 0.3;
        let c = generate_corpus(&spec).unwrap();
        let noisy = c.ab.iter().filter(|p| p.noisy).count();
        let rate = noisy as f64 / c.ab.len() as f64;
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
        let sigma = (0.3f64 * 0.7 / c.ab.len() as f64).sqrt();
        assert!((rate - 0.3).abs() <= 3.0 * sigma, "rate {rate} beyond 3 sigma");
    }

    #[test]
    fn extreme_skew_collapses_to_most_popular() {
        let spec = GenSpec::tiny(3, 10, 23);
        let inventory = popular_inventory(&spec);
        let mut pairs: Vec<TriPair> = (0..200)
            .map(|i| TriPair {
                src: alloc::vec!["x".to_string()],
                dst: alloc::vec!["y".to_string()],
                topic: i % 3,
                noisy: false,
            })
            .collect();
        let mut rng = Rng::new(99);
        inject_noise(&mut pairs, 1.0, 1e6, &inventory, &mut rng);
        for p in &pairs {
            assert!(p.noisy);
            assert_eq!(p.dst, inventory[0].tokens);
        }
    }

    #[test]
    fn inject_noise_on_empty_input_is_a_no_op() {
        let spec = GenSpec::tiny(2, 10, 1);
        let inventory = popular_inventory(&spec);
        let mut pairs: Vec<TriPair> = Vec::new();
        let mut rng = Rng::new(1);
        inject_noise(&mut pairs, 0.5, 1.0, &inventory, &mut rng);
        assert!(pairs.is_empty());
    }

    #[test]
    fn zero_noise_is_identity() {
        let spec = GenSpec::tiny(2, 10, 1);
        let inventory = popular_inventory(&spec);
        let mut pairs: Vec<TriPair> = (0..50)
            .map(|_| TriPair {
                src: alloc::vec!["a".to_string()],
                dst: alloc::vec!["b".to_string()],
                topic: 0,
                noisy: false,
            })
            .collect();
        let before = pairs.clone();
        let mut rng = Rng::new(4);
        inject_noise(&mut pairs, 0.0, 1.0, &inventory, &mut rng);
        assert_eq!(pairs, before);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = GenSpec::tiny(2, 50, 3);
        let c = generate_corpus(&spec).unwrap();
        let s1 = split_corpus(c.clone(), 10, 10, 77).unwrap();
        let s2 = split_corpus(c.clone(), 10, 10, 77).unwrap();
        assert_eq!(s1, s2);
        for ds in Dataset::ALL {
            assert_eq!(s1.split_pairs(ds, Split::Valid).len(), 10);
            assert_eq!(s1.split_pairs(ds, Split::Test).len(), 10);
            assert_eq!(s1.split_pairs(ds, Split::Train).len(), 80);
        }
    }

    #[test]
    fn zero_split_sizes_keep_everything_in_train() {
        let spec = GenSpec::tiny(2, 10, 3);
        let c = generate_corpus(&spec).unwrap();
        let s = split_corpus(c, 0, 0, 5).unwrap();
        for ds in Dataset::ALL {
            assert!(s.splits(ds).iter().all(|x| *x == Split::Train));
        }
    }

    #[test]
    fn oversized_split_is_an_error() {
        let spec = GenSpec::tiny(2, 10, 3);
        let c = generate_corpus(&spec).unwrap();
        assert!(matches!(
            split_corpus(c, 15, 15, 5),
            Err(Error::SplitTooLarge { .. })
        ));
    }

    #[test]
    fn majority_topic_requires_strict_majority() {
        let spec = GenSpec::tiny(2, 10, 3);
        let lex = topic_lexicon(&spec);
        let t0 = lex.topic_tokens(0)[0].to_string();
        let t1 = lex.topic_tokens(1)[0].to_string();
        assert_eq!(lex.majority_topic(&[t0.clone(), t0.clone(), t1.clone()]), Some(0));
        assert_eq!(lex.majority_topic(&[t0.clone(), t1.clone()]), None);
        assert_eq!(lex.majority_topic(&["the".to_string()]), None);
    }
}
