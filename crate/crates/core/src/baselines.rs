//! Matching-based retrieval baselines.
//!
//! Each training pair's source side becomes an indexed feature vector;
//! generation for a new input is retrieval of the bidwords whose sources
//! score the highest cosine similarity. Three vectorizers: term tf-idf,
//! and mean/max pooling over word embeddings. Instead of pretrained
//! vectors, embeddings come from the corpus itself: positive PMI
//! co-occurrence followed by rank-k spectral truncation.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::num;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorizerMode {
    TfIdf,
    MeanPool,
    MaxPool,
}

impl VectorizerMode {
    pub fn name(&self) -> &'static str {
        match self {
            VectorizerMode::TfIdf => "tfidf",
            VectorizerMode::MeanPool => "mean_pool",
            VectorizerMode::MaxPool => "max_pool",
        }
    }
}

/// Word embeddings with their token index.
#[derive(Debug, Clone)]
pub struct WordEmbeddings {
    pub table: Mat,
    pub index: BTreeMap<String, usize>,
}

/// Retrieval index over the training pairs.
#[derive(Debug, Clone)]
pub struct MatchIndex {
    mode: VectorizerMode,
    /// tf-idf dimension per term, in sorted term order.
    term_dims: BTreeMap<String, usize>,
    idf: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    bidwords: Vec<Vec<String>>,
    embeddings: Option<WordEmbeddings>,
}

/// Ranked retrieval output. `zero_input` marks an input that vectorized to
/// the zero vector (e.g. fully out-of-vocabulary under tf-idf); such inputs
/// return no matches rather than an arbitrary entry.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub ranked: Vec<(Vec<String>, f64)>,
    pub zero_input: bool,
}

fn tf_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for tok in tokens {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Returns the pooled vector and how many tokens were covered by the
/// embedding index.
fn pooled_vector(mode: VectorizerMode, tokens: &[String], emb: &WordEmbeddings) -> (Vec<f64>, usize) {
    let d = emb.table.cols();
    let mut out = alloc::vec![0.0; d];
    let mut found = 0usize;
    for tok in tokens {
        let Some(&row) = emb.index.get(tok) else {
            continue;
        };
        found += 1;
        for (c, v) in out.iter_mut().enumerate() {
            let e = emb.table.get(row, c);
            match mode {
                VectorizerMode::MeanPool => *v += e,
                VectorizerMode::MaxPool => {
                    if found == 1 || e > *v {
                        *v = e;
                    }
                }
                VectorizerMode::TfIdf => unreachable!(),
            }
        }
    }
    if mode == VectorizerMode::MeanPool && found > 0 {
        for v in out.iter_mut() {
            *v /= found as f64;
        }
    }
    (out, found)
}

fn norm(v: &[f64]) -> f64 {
    num::sqrt(v.iter().map(|x| x * x).sum())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Builds the index over (source tokens, bidword tokens) training pairs.
/// Pooling modes require an embedding table; idf statistics come from the
/// indexed entries only.
pub fn build_index(
    pairs: &[(Vec<String>, Vec<String>)],
    mode: VectorizerMode,
    embeddings: Option<WordEmbeddings>,
) -> Result<MatchIndex> {
    if pairs.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut index = MatchIndex {
        mode,
        term_dims: BTreeMap::new(),
        idf: Vec::new(),
        vectors: Vec::new(),
        bidwords: pairs.iter().map(|(_, b)| b.clone()).collect(),
        embeddings: None,
    };
    match mode {
        VectorizerMode::TfIdf => {
            let mut df: BTreeMap<String, usize> = BTreeMap::new();
            for (src, _) in pairs {
                let mut seen: Vec<&str> = src.iter().map(|t| t.as_str()).collect();
                seen.sort_unstable();
                seen.dedup();
                for term in seen {
                    *df.entry(term.to_string()).or_insert(0) += 1;
                }
            }
            for (dim, term) in df.keys().enumerate() {
                index.term_dims.insert(term.clone(), dim);
            }
            let n = pairs.len() as f64;
            index.idf = alloc::vec![0.0; df.len()];
            for (term, &count) in &df {
                index.idf[index.term_dims[term]] = num::ln(n / count as f64);
            }
            for (src, _) in pairs {
                index.vectors.push(index.tfidf_vector(src).0);
            }
        }
        VectorizerMode::MeanPool | VectorizerMode::MaxPool => {
            let emb = embeddings.ok_or(Error::MissingEmbeddings)?;
            for (src, _) in pairs {
                index.vectors.push(pooled_vector(mode, src, &emb).0);
            }
            index.embeddings = Some(emb);
        }
    }
    Ok(index)
}

impl MatchIndex {
    pub fn mode(&self) -> VectorizerMode {
        self.mode
    }

    /// Terms in tf-idf dimension order (empty for pooling modes).
    pub fn terms(&self) -> Vec<&str> {
        let mut out = alloc::vec![""; self.term_dims.len()];
        for (term, &dim) in &self.term_dims {
            out[dim] = term.as_str();
        }
        out
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn bidwords(&self) -> &[Vec<String>] {
        &self.bidwords
    }

    pub fn embeddings(&self) -> Option<&WordEmbeddings> {
        self.embeddings.as_ref()
    }

    /// Reassembles an index from persisted parts.
    pub fn from_parts(
        mode: VectorizerMode,
        terms: Vec<String>,
        idf: Vec<f64>,
        vectors: Vec<Vec<f64>>,
        bidwords: Vec<Vec<String>>,
        embeddings: Option<WordEmbeddings>,
    ) -> Result<MatchIndex> {
        if vectors.len() != bidwords.len() {
            return Err(Error::ShapeMismatch("index vectors/bidwords counts"));
        }
        if terms.len() != idf.len() {
            return Err(Error::ShapeMismatch("index terms/idf lengths"));
        }
        if matches!(mode, VectorizerMode::MeanPool | VectorizerMode::MaxPool)
            && embeddings.is_none()
        {
            return Err(Error::MissingEmbeddings);
        }
        Ok(MatchIndex {
            mode,
            term_dims: terms
                .into_iter()
                .enumerate()
                .map(|(dim, term)| (term, dim))
                .collect(),
            idf,
            vectors,
            bidwords,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn entry_vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Returns the tf-idf vector and how many tokens hit the term index.
    fn tfidf_vector(&self, tokens: &[String]) -> (Vec<f64>, usize) {
        let mut v = alloc::vec![0.0; self.idf.len()];
        let mut covered = 0usize;
        for (term, count) in tf_counts(tokens) {
            if let Some(&dim) = self.term_dims.get(term) {
                covered += count;
                v[dim] = count as f64 * self.idf[dim];
            }
        }
        (v, covered)
    }

    fn input_vector(&self, tokens: &[String]) -> (Vec<f64>, usize) {
        match self.mode {
            VectorizerMode::TfIdf => self.tfidf_vector(tokens),
            _ => pooled_vector(self.mode, tokens, self.embeddings.as_ref().unwrap()),
        }
    }

    /// Retrieves the bidwords of the `top_k` most similar entries, cosine
    /// ties broken by entry insertion order. An input with no term in the
    /// index vocabulary at all vectorizes to zero and returns the flagged
    /// empty result; an input of known terms always ranks (zero-weight
    /// vectors fall back to the insertion-order tie-break).
    pub fn match_top_k(&self, input: &[String], top_k: usize) -> Result<MatchOutcome> {
        if top_k < 1 {
            return Err(Error::InvalidConfig("top_k must be >= 1"));
        }
        let (v, covered) = self.input_vector(input);
        if covered == 0 {
            return Ok(MatchOutcome {
                ranked: Vec::new(),
                zero_input: true,
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(&v, e)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(top_k);
        Ok(MatchOutcome {
            ranked: scored
                .into_iter()
                .map(|(i, s)| (self.bidwords[i].clone(), s))
                .collect(),
            zero_input: false,
        })
    }
}

/// Positive-PMI co-occurrence embeddings with rank-k spectral truncation.
/// Co-occurrences are counted inside a symmetric window over each
/// document; the PPMI matrix is factored by orthogonal iteration (applied
/// twice per round, so eigenvalue signs cannot flip the subspace), and the
/// embedding scales each basis vector by |eigenvalue|^(1/2).
pub fn ppmi_embeddings(docs: &[Vec<String>], window: usize, dim: usize, seed: u64) -> Result<WordEmbeddings> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if window < 1 || dim < 1 {
        return Err(Error::InvalidConfig("ppmi window/dim must be >= 1"));
    }
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        for tok in doc {
            let next = index.len();
            index.entry(tok.clone()).or_insert(next);
        }
    }
    let v = index.len();
    let k = dim.min(v);

    let mut counts = Mat::zeros(v, v);
    let mut totals = alloc::vec![0.0f64; v];
    let mut grand_total = 0.0f64;
    for doc in docs {
        let ids: Vec<usize> = doc.iter().map(|t| index[t]).collect();
        for (i, &a) in ids.iter().enumerate() {
            let hi = (i + window + 1).min(ids.len());
            for &b in &ids[i + 1..hi] {
                counts.set(a, b, counts.get(a, b) + 1.0);
                counts.set(b, a, counts.get(b, a) + 1.0);
                totals[a] += 1.0;
                totals[b] += 1.0;
                grand_total += 2.0;
            }
        }
    }
    let mut ppmi = Mat::zeros(v, v);
    for r in 0..v {
        for c in 0..v {
            let joint = counts.get(r, c);
            if joint > 0.0 {
                let pmi = num::ln(joint * grand_total / (totals[r] * totals[c]));
                if pmi > 0.0 {
                    ppmi.set(r, c, pmi);
                }
            }
        }
    }

    // orthogonal iteration on ppmi^2
    let mut rng = Rng::substream(seed, "ppmi.init");
    let mut q = Mat::uniform(v, k, -1.0, 1.0, &mut rng);
    gram_schmidt(&mut q);
    for _ in 0..30 {
        let z = ppmi.matmul(&ppmi.matmul(&q)?)?;
        q = z;
        gram_schmidt(&mut q);
    }
    // scale columns by |rayleigh quotient|^(1/2)
    let mq = ppmi.matmul(&q)?;
    let mut table = Mat::zeros(v, k);
    for c in 0..k {
        let lambda: f64 = (0..v).map(|r| q.get(r, c) * mq.get(r, c)).sum();
        let scale = num::sqrt(lambda.abs().max(1e-12));
        for r in 0..v {
            table.set(r, c, q.get(r, c) * scale);
        }
    }
    Ok(WordEmbeddings { table, index })
}

/// Modified Gram-Schmidt over the columns of `q`.
fn gram_schmidt(q: &mut Mat) {
    let (rows, cols) = (q.rows(), q.cols());
    for c in 0..cols {
        for prev in 0..c {
            let dot: f64 = (0..rows).map(|r| q.get(r, c) * q.get(r, prev)).sum();
            for r in 0..rows {
                let v = q.get(r, c) - dot * q.get(r, prev);
                q.set(r, c, v);
            }
        }
        let len: f64 = num::sqrt((0..rows).map(|r| q.get(r, c) * q.get(r, c)).sum());
        if len > 1e-12 {
            for r in 0..rows {
                let v = q.get(r, c) / len;
                q.set(r, c, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn three_entry_index() -> MatchIndex {
        // entry sources chosen so idf values differ
        let pairs = vec![
            (toks("apple fruit sweet"), toks("buy apple")),
            (toks("apple pie recipe"), toks("bake pie")),
            (toks("stock market fruit"), toks("trade stock")),
        ];
        build_index(&pairs, VectorizerMode::TfIdf, None).unwrap()
    }

    #[test]
    fn single_entry_index_retrieves_its_bidword() {
        // In a single-entry index every term has idf ln(1/1) = 0, so the
        // ranking falls back to the insertion-order tie-break; any query
        // with a known term still retrieves the only bidword.
        let pairs = vec![(toks("green tea leaves"), toks("tea"))];
        let index = build_index(&pairs, VectorizerMode::TfIdf, None).unwrap();
        let out = index.match_top_k(&toks("green tea"), 3).unwrap();
        assert!(!out.zero_input);
        assert_eq!(out.ranked.len(), 1);
        assert_eq!(out.ranked[0].0, toks("tea"));
    }

    #[test]
    fn ubiquitous_terms_get_zero_idf_weight() {
        let pairs = vec![
            (toks("common alpha"), toks("a")),
            (toks("common beta"), toks("b")),
        ];
        let index = build_index(&pairs, VectorizerMode::TfIdf, None).unwrap();
        // "common" appears in every entry: idf = ln(2/2) = 0
        let (v, covered) = index.tfidf_vector(&toks("common common common"));
        assert!(covered > 0);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tfidf_vectors_match_hand_computation() {
        let index = three_entry_index();
        // df: apple 2, fruit 2, others 1 over N = 3 entries
        let idf_apple = (3.0f64 / 2.0).ln();
        let idf_sweet = 3.0f64.ln();
        let v = index.entry_vector(0);
        let dim_apple = index.term_dims["apple"];
        let dim_sweet = index.term_dims["sweet"];
        let dim_stock = index.term_dims["stock"];
        assert!((v[dim_apple] - idf_apple).abs() < 1e-12);
        assert!((v[dim_sweet] - idf_sweet).abs() < 1e-12);
        assert_eq!(v[dim_stock], 0.0);
    }

    #[test]
    fn cosine_ranking_matches_hand_computation() {
        let index = three_entry_index();
        let input = toks("apple fruit");
        let out = index.match_top_k(&input, 3).unwrap();
        // independent cosine computation against each entry vector
        let (q, _) = index.tfidf_vector(&input);
        let mut sims: Vec<(usize, f64)> = (0..3)
            .map(|i| (i, super::cosine(&q, index.entry_vector(i))))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for ((bid, score), (idx, sim)) in out.ranked.iter().zip(&sims) {
            assert!((score - sim).abs() < 1e-12);
            assert_eq!(
                bid,
                &index.bidwords[*idx],
                "ranking mismatch"
            );
        }
        assert_eq!(out.ranked[0].0, toks("buy apple"));
    }

    #[test]
    fn exact_entry_input_ranks_first_with_unit_cosine() {
        let index = three_entry_index();
        let out = index.match_top_k(&toks("apple pie recipe"), 1).unwrap();
        assert_eq!(out.ranked[0].0, toks("bake pie"));
        assert!((out.ranked[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fully_oov_input_is_flagged_empty() {
        let index = three_entry_index();
        let out = index.match_top_k(&toks("zebra unicorn"), 2).unwrap();
        assert!(out.zero_input);
        assert!(out.ranked.is_empty());
    }

    #[test]
    fn ranking_is_scale_invariant() {
        let index = three_entry_index();
        let once = index.match_top_k(&toks("apple fruit"), 3).unwrap();
        // repeating the input scales every tf count by 3
        let thrice = index
            .match_top_k(&toks("apple fruit apple fruit apple fruit"), 3)
            .unwrap();
        let order_once: Vec<&Vec<String>> = once.ranked.iter().map(|(b, _)| b).collect();
        let order_thrice: Vec<&Vec<String>> = thrice.ranked.iter().map(|(b, _)| b).collect();
        assert_eq!(order_once, order_thrice);
        for (a, b) in once.ranked.iter().zip(&thrice.ranked) {
            assert!((a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_pairs_and_missing_embeddings_error() {
        assert!(matches!(
            build_index(&[], VectorizerMode::TfIdf, None),
            Err(Error::EmptyIndex)
        ));
        let pairs = vec![(toks("a"), toks("b"))];
        assert!(matches!(
            build_index(&pairs, VectorizerMode::MeanPool, None),
            Err(Error::MissingEmbeddings)
        ));
    }

    fn tiny_embeddings() -> WordEmbeddings {
        let mut index = BTreeMap::new();
        index.insert("a".to_string(), 0);
        index.insert("b".to_string(), 1);
        index.insert("c".to_string(), 2);
        WordEmbeddings {
            table: Mat::from_rows(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]),
            index,
        }
    }

    #[test]
    fn max_pool_dominates_mean_pool_for_nonnegative_embeddings() {
        let emb = tiny_embeddings();
        let tokens = toks("a b c");
        let (mean, _) = pooled_vector(VectorizerMode::MeanPool, &tokens, &emb);
        let (max, _) = pooled_vector(VectorizerMode::MaxPool, &tokens, &emb);
        for (m, x) in mean.iter().zip(&max) {
            assert!(x >= m);
        }
        assert_eq!(max, vec![3.0, 2.0]);
        assert!((mean[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_index_retrieves_by_embedding_similarity() {
        let emb = tiny_embeddings();
        let pairs = vec![
            (toks("a"), toks("alpha")),
            (toks("b"), toks("beta")),
        ];
        let index = build_index(&pairs, VectorizerMode::MeanPool, Some(emb)).unwrap();
        let out = index.match_top_k(&toks("a a"), 1).unwrap();
        assert_eq!(out.ranked[0].0, toks("alpha"));
    }

    #[test]
    fn ppmi_embeddings_capture_topical_cooccurrence() {
        // two "topics" that never co-occur
        let docs: Vec<Vec<String>> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    toks("car road wheel drive")
                } else {
                    toks("fish sea boat water")
                }
            })
            .collect();
        let emb = ppmi_embeddings(&docs, 3, 4, 7).unwrap();
        let row = |t: &str| emb.table.row(emb.index[t]).to_vec();
        let same = super::cosine(&row("car"), &row("wheel"));
        let cross = super::cosine(&row("car"), &row("fish"));
        assert!(
            same > cross + 0.3,
            "same-topic {same} vs cross-topic {cross}"
        );
    }

    #[test]
    fn ppmi_embeddings_are_deterministic() {
        let docs = vec![toks("x y z"), toks("y z w")];
        let a = ppmi_embeddings(&docs, 2, 3, 5).unwrap();
        let b = ppmi_embeddings(&docs, 2, 3, 5).unwrap();
        assert_eq!(a.table, b.table);
    }
}
