//! Two-phase triangular training.
//!
//! Phase 1 fits the two ad/query models by descending the negation of a
//! mutual-information lower bound: each pair's log-likelihood is weighted
//! by the model's own length-normalized sequence probability, detached
//! from the gradient. Phase 2 freezes those two models and trains the four
//! bidword-adjacent models on a composite of the direct likelihood loss
//! over the noisy pairs and a triangular cross-entropy that matches the
//! frozen direct probabilities against a bridge marginal: the probability
//! of reaching the far side of the triangle through a bidword.
//!
//! Two estimators approximate the (intractable) bridge marginal:
//!
//! * `A` — a soft greedy decode produces a fixed-length sequence of
//!   expected embeddings under the source model, which the downstream
//!   model consumes as dense encoder input.
//! * `S` — a set of bridge sequences is sampled with Gumbel perturbations,
//!   and the marginal is the log-sum-exp of per-candidate joint scores.
//!   Gradients flow through the exact per-candidate log-probabilities with
//!   the sampled tokens held fixed, so finite differences reproduce them.
//!
//! Everything is deterministic for a fixed seed.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Split, TriCorpus, TriPair};
use crate::mat::Mat;
use crate::model::{
    self, register_model, sequence_logprob, sequence_logprob_given_enc, sequence_logprob_node,
    ModelBundle, ModelConfig, ModelNodes, ModelParams,
};
use crate::num;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::vocab::{Vocab, BOS, EOS};
use crate::{Error, Result, TokenId, TopicId};

/// Bridge-marginal estimator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Expected word-embedding bridge (soft greedy decoding).
    #[serde(rename = "A")]
    ExpectedEmbedding,
    /// Gumbel-sampled candidate set.
    #[serde(rename = "S")]
    Sampled,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::ExpectedEmbedding => "A",
            Estimator::Sampled => "S",
        }
    }
}

/// Hyper-parameters for both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the likelihood loss against the triangular loss.
    pub lambda: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Bridge length in tokens.
    pub bridge_len: usize,
    /// Candidate-set size for the sampled estimator.
    pub sample_size: usize,
    pub gumbel_tau: f64,
    pub tau_anneal_every: usize,
    pub tau_anneal_factor: f64,
    pub tau_floor: f64,
    pub max_steps_phase1: usize,
    pub max_steps_phase2: usize,
    /// Validation cadence (steps) for the convergence check.
    pub eval_every: usize,
    /// Evaluations without improvement before a phase stops early.
    pub patience: usize,
    pub seed: u64,
    pub estimator: Estimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.6,
            lr: 1e-3,
            warmup_steps: 100,
            batch_size: 32,
            bridge_len: 4,
            sample_size: 5,
            gumbel_tau: 1.0,
            tau_anneal_every: 100,
            tau_anneal_factor: 0.9,
            tau_floor: 0.1,
            max_steps_phase1: 400,
            max_steps_phase2: 400,
            eval_every: 25,
            patience: 5,
            seed: 0,
            estimator: Estimator::ExpectedEmbedding,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must be in [0, 1]"));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive"));
        }
        if self.bridge_len < 1 {
            return Err(Error::InvalidConfig("bridge_len must be >= 1"));
        }
        if self.sample_size < 1 {
            return Err(Error::InvalidConfig("sample_size must be >= 1"));
        }
        if self.gumbel_tau <= 0.0 || self.tau_floor <= 0.0 {
            return Err(Error::InvalidConfig("gumbel temperatures must be positive"));
        }
        if !(0.0 < self.tau_anneal_factor && self.tau_anneal_factor <= 1.0) {
            return Err(Error::InvalidConfig("tau_anneal_factor must be in (0, 1]"));
        }
        if self.batch_size < 1 || self.eval_every < 1 || self.patience < 1 {
            return Err(Error::InvalidConfig("batch_size/eval_every/patience must be >= 1"));
        }
        if self.tau_anneal_every < 1 {
            return Err(Error::InvalidConfig("tau_anneal_every must be >= 1"));
        }
        Ok(())
    }

    fn tau_at(&self, phase2_step: usize) -> f64 {
        let n = phase2_step / self.tau_anneal_every;
        let mut tau = self.gumbel_tau;
        for _ in 0..n {
            tau *= self.tau_anneal_factor;
        }
        tau.max(self.tau_floor)
    }
}

/// One encoded pair; `topic` and `noisy` ride along for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct IdPair {
    pub src: Vec<TokenId>,
    pub dst: Vec<TokenId>,
    pub topic: TopicId,
    pub noisy: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SplitPairs {
    pub train: Vec<IdPair>,
    pub valid: Vec<IdPair>,
    pub test: Vec<IdPair>,
}

/// The three datasets, encoded and split.
#[derive(Debug, Clone, Default)]
pub struct TriData {
    pub aq: SplitPairs,
    pub ab: SplitPairs,
    pub qb: SplitPairs,
}

fn encode_pair(vocab: &Vocab, pair: &TriPair) -> IdPair {
    IdPair {
        src: vocab.encode(&pair.src),
        dst: vocab.encode(&pair.dst),
        topic: pair.topic,
        noisy: pair.noisy,
    }
}

/// Encodes a corpus; pairs with an empty encoded side are dropped.
pub fn encode_corpus(corpus: &TriCorpus, vocab: &Vocab) -> TriData {
    let mut data = TriData::default();
    for (ds, out) in [
        (crate::corpus::Dataset::AQ, &mut data.aq),
        (crate::corpus::Dataset::AB, &mut data.ab),
        (crate::corpus::Dataset::QB, &mut data.qb),
    ] {
        for (pair, split) in corpus.pairs(ds).iter().zip(corpus.splits(ds)) {
            let enc = encode_pair(vocab, pair);
            if enc.src.is_empty() || enc.dst.is_empty() {
                continue;
            }
            match split {
                Split::Train => out.train.push(enc),
                Split::Valid => out.valid.push(enc),
                Split::Test => out.test.push(enc),
            }
        }
    }
    data
}

fn with_eos(tgt: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(tgt.len() + 1);
    v.extend_from_slice(tgt);
    v.push(EOS);
    v
}

/// exp(logp / steps): the length-normalized sequence probability used as a
/// detached cross-entropy weight.
fn length_normalized_weight(logp: f64, steps: usize) -> f64 {
    num::exp(logp / steps.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Phase-1 objective
// ---------------------------------------------------------------------------

/// Per-pair detached weights (w_q, w_a) under the given ad/query models.
pub fn mi_pair_weights(
    cfg: &ModelConfig,
    theta_aq: &ModelParams,
    theta_qa: &ModelParams,
    batch: &[IdPair],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(batch.len());
    for pair in batch {
        let tq = with_eos(&pair.dst);
        let ta = with_eos(&pair.src);
        let lp_q = sequence_logprob(cfg, theta_aq, &pair.src, &tq)?;
        let lp_a = sequence_logprob(cfg, theta_qa, &pair.dst, &ta)?;
        out.push((
            length_normalized_weight(lp_q, tq.len()),
            length_normalized_weight(lp_a, ta.len()),
        ));
    }
    Ok(out)
}

/// The phase-1 loss with caller-provided weights: the negation of
/// sum(w_q * logP(q|a) + w_a * logP(a|q)). Weights enter as constants, so
/// the gradient of this node is exactly what the optimizer applies.
pub fn mi_bound_loss_node_weighted(
    tape: &mut Tape,
    cfg: &ModelConfig,
    aq: &ModelNodes,
    qa: &ModelNodes,
    batch: &[IdPair],
    weights: &[(f64, f64)],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("mi_bound_loss"));
    }
    if batch.len() != weights.len() {
        return Err(Error::ShapeMismatch("mi_bound_loss weights length"));
    }
    let mut terms = Vec::with_capacity(batch.len() * 2);
    let mut coeffs = Vec::with_capacity(batch.len() * 2);
    for (pair, (w_q, w_a)) in batch.iter().zip(weights) {
        let tq = with_eos(&pair.dst);
        let ta = with_eos(&pair.src);
        terms.push(sequence_logprob_node(tape, cfg, aq, &pair.src, &tq)?);
        coeffs.push(-w_q);
        terms.push(sequence_logprob_node(tape, cfg, qa, &pair.dst, &ta)?);
        coeffs.push(-w_a);
    }
    tape.weighted_sum(&terms, &coeffs)
}

/// The phase-1 loss with self-computed weights: each sequence probability
/// is read off the freshly built forward value, length-normalized, and
/// detached. Also returns the batch per-step cross-entropy, which the
/// trainer logs and monitors.
pub fn mi_bound_loss_node_with_nll(
    tape: &mut Tape,
    cfg: &ModelConfig,
    aq: &ModelNodes,
    qa: &ModelNodes,
    batch: &[IdPair],
) -> Result<(NodeId, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("mi_bound_loss"));
    }
    let mut terms = Vec::with_capacity(batch.len() * 2);
    let mut coeffs = Vec::with_capacity(batch.len() * 2);
    let mut nll = 0.0;
    let mut steps = 0usize;
    for pair in batch {
        let tq = with_eos(&pair.dst);
        let ta = with_eos(&pair.src);
        let lp_q = sequence_logprob_node(tape, cfg, aq, &pair.src, &tq)?;
        let lp_a = sequence_logprob_node(tape, cfg, qa, &pair.dst, &ta)?;
        nll -= tape.scalar_value(lp_q) + tape.scalar_value(lp_a);
        steps += tq.len() + ta.len();
        terms.push(lp_q);
        coeffs.push(-length_normalized_weight(tape.scalar_value(lp_q), tq.len()));
        terms.push(lp_a);
        coeffs.push(-length_normalized_weight(tape.scalar_value(lp_a), ta.len()));
    }
    let loss = tape.weighted_sum(&terms, &coeffs)?;
    Ok((loss, nll / steps.max(1) as f64))
}

/// The phase-1 loss node alone.
pub fn mi_bound_loss_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    aq: &ModelNodes,
    qa: &ModelNodes,
    batch: &[IdPair],
) -> Result<NodeId> {
    Ok(mi_bound_loss_node_with_nll(tape, cfg, aq, qa, batch)?.0)
}

/// Forward-only phase-1 loss value.
pub fn mi_bound_loss(
    cfg: &ModelConfig,
    theta_aq: &ModelParams,
    theta_qa: &ModelParams,
    batch: &[IdPair],
) -> Result<f64> {
    let mut tape = Tape::new();
    let aq = register_model(&mut tape, theta_aq);
    let qa = register_model(&mut tape, theta_qa);
    let loss = mi_bound_loss_node(&mut tape, cfg, &aq, &qa, batch)?;
    Ok(tape.scalar_value(loss))
}

// ---------------------------------------------------------------------------
// Likelihood loss over the noisy pairs
// ---------------------------------------------------------------------------

/// Tape handles for the four bidword-adjacent models.
pub struct BidwordNodes {
    pub ab: ModelNodes,
    pub ba: ModelNodes,
    pub qb: ModelNodes,
    pub bq: ModelNodes,
}

pub fn register_bidword_models(tape: &mut Tape, bundle: &ModelBundle) -> BidwordNodes {
    BidwordNodes {
        ab: register_model(tape, &bundle.ab),
        ba: register_model(tape, &bundle.ba),
        qb: register_model(tape, &bundle.qb),
        bq: register_model(tape, &bundle.bq),
    }
}

/// Negative sum of the four directional sequence log-likelihoods over the
/// two noisy batches. Every target is scored through its terminating EOS.
pub fn mle_loss_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    models: &BidwordNodes,
    batch_ab: &[IdPair],
    batch_qb: &[IdPair],
) -> Result<NodeId> {
    if batch_ab.is_empty() && batch_qb.is_empty() {
        return Err(Error::EmptyBatch("mle_loss"));
    }
    let mut terms = Vec::new();
    for pair in batch_ab {
        terms.push(sequence_logprob_node(tape, cfg, &models.ab, &pair.src, &with_eos(&pair.dst))?);
        terms.push(sequence_logprob_node(tape, cfg, &models.ba, &pair.dst, &with_eos(&pair.src))?);
    }
    for pair in batch_qb {
        terms.push(sequence_logprob_node(tape, cfg, &models.qb, &pair.src, &with_eos(&pair.dst))?);
        terms.push(sequence_logprob_node(tape, cfg, &models.bq, &pair.dst, &with_eos(&pair.src))?);
    }
    let coeffs = vec![-1.0; terms.len()];
    tape.weighted_sum(&terms, &coeffs)
}

/// Forward-only likelihood loss value.
pub fn mle_loss(
    cfg: &ModelConfig,
    bundle: &ModelBundle,
    batch_ab: &[IdPair],
    batch_qb: &[IdPair],
) -> Result<f64> {
    let mut tape = Tape::new();
    let models = register_bidword_models(&mut tape, bundle);
    let loss = mle_loss_node(&mut tape, cfg, &models, batch_ab, batch_qb)?;
    Ok(tape.scalar_value(loss))
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax
// ---------------------------------------------------------------------------

/// Draws one Gumbel-Softmax sample: the relaxed vector
/// softmax((logits + g) / tau) and the hard index argmax(logits + g).
/// By the Gumbel-max property the hard index is distributed as
/// softmax(logits) regardless of tau.
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, rng: &mut Rng) -> Result<(Vec<f64>, usize)> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("gumbel tau must be positive"));
    }
    if logits.is_empty() {
        return Err(Error::EmptySequence("gumbel logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel logits"));
    }
    let perturbed: Vec<f64> = logits.iter().map(|&l| l + rng.gumbel()).collect();
    let hard = argmax(&perturbed);
    let mut soft: Vec<f64> = perturbed.iter().map(|&p| p / tau).collect();
    crate::mat::softmax_in_place(&mut soft);
    Ok((soft, hard))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Bridge estimators
// ---------------------------------------------------------------------------

/// Soft greedy decoding of a bridge: at step j the source model's
/// next-token distribution weights every vocabulary embedding. The
/// source model's own rows feed back into its decoder; the downstream
/// embedding table (`emb_dst`) forms the returned rows, so the bridge
/// lives in the downstream model's input space. Returns a
/// `bridge_len x d_model` node, each row a convex combination of
/// `emb_dst` rows.
pub fn expected_embedding_bridge_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    src_model: &ModelNodes,
    emb_dst: NodeId,
    src: &[TokenId],
    bridge_len: usize,
) -> Result<NodeId> {
    if bridge_len < 1 {
        return Err(Error::InvalidConfig("bridge_len must be >= 1"));
    }
    let enc_out = model::encode_ids_node(tape, cfg, src_model, src)?;
    let bos_row = tape.gather_rows(src_model.emb, &[BOS])?;
    let mut feedback = vec![bos_row];
    let mut out_rows = Vec::with_capacity(bridge_len);
    for j in 0..bridge_len {
        let dec_raw = tape.concat_rows(&feedback)?;
        let dec_out = model::decode_from_rows_node(tape, cfg, src_model, enc_out, dec_raw)?;
        let last = tape.slice_rows(dec_out, j, 1)?;
        let logits = tape.matmul(last, src_model.w_out)?;
        let dist = tape.softmax_rows(logits);
        let fb = tape.matmul(dist, src_model.emb)?;
        let out = tape.matmul(dist, emb_dst)?;
        feedback.push(fb);
        out_rows.push(out);
    }
    tape.concat_rows(&out_rows)
}

/// Forward-only expected-embedding bridge.
pub fn expected_embedding_bridge(
    cfg: &ModelConfig,
    theta_src: &ModelParams,
    emb_dst: &Mat,
    src: &[TokenId],
    bridge_len: usize,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let src_model = register_model(&mut tape, theta_src);
    let dst_emb = tape.leaf(emb_dst.clone());
    let rows = expected_embedding_bridge_node(&mut tape, cfg, &src_model, dst_emb, src, bridge_len)?;
    Ok(tape.value(rows).clone())
}

/// Expected-embedding bridge marginal: the downstream model consumes the
/// bridge rows as dense encoder input. Differentiable through both models.
pub fn bridge_logprob_a_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    src_model: &ModelNodes,
    dst_model: &ModelNodes,
    src: &[TokenId],
    tgt: &[TokenId],
    bridge_len: usize,
) -> Result<NodeId> {
    let bridge = expected_embedding_bridge_node(tape, cfg, src_model, dst_model.emb, src, bridge_len)?;
    model::forward_from_embeddings_node(tape, cfg, dst_model, bridge, tgt)
}

pub fn bridge_logprob_a(
    cfg: &ModelConfig,
    theta_src: &ModelParams,
    theta_dst: &ModelParams,
    src: &[TokenId],
    tgt: &[TokenId],
    bridge_len: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let src_model = register_model(&mut tape, theta_src);
    let dst_model = register_model(&mut tape, theta_dst);
    let lp = bridge_logprob_a_node(&mut tape, cfg, &src_model, &dst_model, src, tgt, bridge_len)?;
    Ok(tape.scalar_value(lp))
}

/// The marginal over an explicit candidate set:
/// log sum_{b in C} P(tgt|b; dst) * P(b|src; src), in log space. Candidate
/// probabilities are truncated at their given length (no EOS term). With C
/// an exhaustive enumeration this is the exact bridge marginal.
pub fn bridge_logprob_with_candidates_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    src_model: &ModelNodes,
    dst_model: &ModelNodes,
    src: &[TokenId],
    tgt: &[TokenId],
    candidates: &[Vec<TokenId>],
) -> Result<NodeId> {
    if candidates.is_empty() {
        return Err(Error::EmptyBatch("bridge candidate set"));
    }
    let enc_src = model::encode_ids_node(tape, cfg, src_model, src)?;
    let mut terms = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let s_src = sequence_logprob_given_enc(tape, cfg, src_model, enc_src, cand)?;
        let s_dst = sequence_logprob_node(tape, cfg, dst_model, cand, tgt)?;
        terms.push(tape.weighted_sum(&[s_src, s_dst], &[1.0, 1.0])?);
    }
    tape.log_sum_exp(&terms)
}

pub fn bridge_logprob_with_candidates(
    cfg: &ModelConfig,
    theta_src: &ModelParams,
    theta_dst: &ModelParams,
    src: &[TokenId],
    tgt: &[TokenId],
    candidates: &[Vec<TokenId>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let src_model = register_model(&mut tape, theta_src);
    let dst_model = register_model(&mut tape, theta_dst);
    let lp = bridge_logprob_with_candidates_node(
        &mut tape, cfg, &src_model, &dst_model, src, tgt, candidates,
    )?;
    Ok(tape.scalar_value(lp))
}

/// Samples `sample_size` bridge sequences of length `bridge_len` from the
/// source model with Gumbel-perturbed, temperature-scaled logits, then
/// deduplicates them into a candidate set. tau = 1 samples the model
/// distribution itself; smaller tau concentrates candidates on the greedy
/// decode. The final sampling pass doubles as the teacher-forced scoring
/// pass, so each candidate's source log-probability node comes for free.
#[allow(clippy::too_many_arguments)]
fn sample_bridge_candidates(
    tape: &mut Tape,
    cfg: &ModelConfig,
    src_model: &ModelNodes,
    enc_src: NodeId,
    bridge_len: usize,
    sample_size: usize,
    tau: f64,
    rng: &mut Rng,
) -> Result<Vec<(Vec<TokenId>, NodeId)>> {
    let mut seen = BTreeSet::new();
    let mut candidates = Vec::new();
    for _ in 0..sample_size {
        let mut prefix: Vec<TokenId> = Vec::with_capacity(bridge_len);
        let mut score = None;
        for j in 0..bridge_len {
            let mut dec_ids = Vec::with_capacity(j + 1);
            dec_ids.push(BOS);
            dec_ids.extend_from_slice(&prefix);
            let dec_out = model::decode_from_ids_node(tape, cfg, src_model, enc_src, &dec_ids)?;
            let logits = tape.matmul(dec_out, src_model.w_out)?;
            let scaled: Vec<f64> = tape.value(logits).row(j).iter().map(|&l| l / tau).collect();
            let (_, hard) = gumbel_softmax_sample(&scaled, 1.0, rng)?;
            prefix.push(hard);
            if j + 1 == bridge_len {
                // rows 0..bridge_len of this pass predict exactly the
                // sampled tokens: score the candidate off the same pass
                let log_dists = tape.log_softmax_rows(logits);
                let picks: Vec<(usize, usize)> =
                    prefix.iter().copied().enumerate().collect();
                score = Some(tape.pick_sum(log_dists, &picks)?);
            }
        }
        if seen.insert(prefix.clone()) {
            candidates.push((prefix, score.expect("bridge_len >= 1")));
        }
    }
    Ok(candidates)
}

/// Sampled bridge marginal: Gumbel-sampled candidates scored through both
/// models and combined by log-sum-exp. Gradients are exact for the sampled
/// candidate set.
#[allow(clippy::too_many_arguments)]
pub fn bridge_logprob_s_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    src_model: &ModelNodes,
    dst_model: &ModelNodes,
    src: &[TokenId],
    tgt: &[TokenId],
    bridge_len: usize,
    sample_size: usize,
    tau: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    if sample_size < 1 {
        return Err(Error::InvalidConfig("sample_size must be >= 1"));
    }
    let enc_src = model::encode_ids_node(tape, cfg, src_model, src)?;
    let candidates =
        sample_bridge_candidates(tape, cfg, src_model, enc_src, bridge_len, sample_size, tau, rng)?;
    let mut terms = Vec::with_capacity(candidates.len());
    for (cand, s_src) in &candidates {
        let s_dst = sequence_logprob_node(tape, cfg, dst_model, cand, tgt)?;
        terms.push(tape.weighted_sum(&[*s_src, s_dst], &[1.0, 1.0])?);
    }
    tape.log_sum_exp(&terms)
}

#[allow(clippy::too_many_arguments)]
pub fn bridge_logprob_s(
    cfg: &ModelConfig,
    theta_src: &ModelParams,
    theta_dst: &ModelParams,
    src: &[TokenId],
    tgt: &[TokenId],
    bridge_len: usize,
    sample_size: usize,
    tau: f64,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let src_model = register_model(&mut tape, theta_src);
    let dst_model = register_model(&mut tape, theta_dst);
    let mut rng = Rng::substream(seed, "bridge.s");
    let lp = bridge_logprob_s_node(
        &mut tape, cfg, &src_model, &dst_model, src, tgt, bridge_len, sample_size, tau, &mut rng,
    )?;
    Ok(tape.scalar_value(lp))
}

// ---------------------------------------------------------------------------
// Triangular loss
// ---------------------------------------------------------------------------

/// Per-pair detached weights from the frozen phase-1 models, identical in
/// form to the phase-1 weights.
pub fn tri_pair_weights(
    cfg: &ModelConfig,
    theta_aq: &ModelParams,
    theta_qa: &ModelParams,
    batch: &[IdPair],
) -> Result<Vec<(f64, f64)>> {
    mi_pair_weights(cfg, theta_aq, theta_qa, batch)
}

/// Rescales a batch of triangular weights by their common mean, so the
/// triangular term keeps a magnitude comparable to the likelihood term.
/// Length-normalized sequence probabilities top out around
/// exp(-per-token-entropy), which would otherwise shrink the triangular
/// gradient by that constant factor and make the loss weight meaningless;
/// the relative per-pair weighting (confident pairs supervise more) is
/// unchanged.
pub fn normalize_tri_weights(weights: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = (weights.len() * 2).max(1) as f64;
    let mean: f64 = weights.iter().map(|(a, b)| a + b).sum::<f64>() / n;
    if mean <= 0.0 {
        return weights.to_vec();
    }
    weights.iter().map(|(a, b)| (a / mean, b / mean)).collect()
}

/// The triangular cross-entropy over an ad/query batch with caller-provided
/// frozen weights: -sum(w_aq * log ~P(q|a) + w_qa * log ~P(a|q)), where the
/// bridge marginal ~P runs through the chosen estimator.
#[allow(clippy::too_many_arguments)]
pub fn tri_loss_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    train: &TrainConfig,
    models: &BidwordNodes,
    batch: &[IdPair],
    weights: &[(f64, f64)],
    estimator: Estimator,
    tau: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("tri_loss"));
    }
    if batch.len() != weights.len() {
        return Err(Error::ShapeMismatch("tri_loss weights length"));
    }
    let mut terms = Vec::with_capacity(batch.len() * 2);
    let mut coeffs = Vec::with_capacity(batch.len() * 2);
    for (pair, (w_aq, w_qa)) in batch.iter().zip(weights) {
        let tq = with_eos(&pair.dst);
        let ta = with_eos(&pair.src);
        let (lp_q, lp_a) = match estimator {
            Estimator::ExpectedEmbedding => (
                bridge_logprob_a_node(tape, cfg, &models.ab, &models.bq, &pair.src, &tq, train.bridge_len)?,
                bridge_logprob_a_node(tape, cfg, &models.qb, &models.ba, &pair.dst, &ta, train.bridge_len)?,
            ),
            Estimator::Sampled => (
                bridge_logprob_s_node(
                    tape, cfg, &models.ab, &models.bq, &pair.src, &tq, train.bridge_len,
                    train.sample_size, tau, rng,
                )?,
                bridge_logprob_s_node(
                    tape, cfg, &models.qb, &models.ba, &pair.dst, &ta, train.bridge_len,
                    train.sample_size, tau, rng,
                )?,
            ),
        };
        terms.push(lp_q);
        coeffs.push(-w_aq);
        terms.push(lp_a);
        coeffs.push(-w_qa);
    }
    tape.weighted_sum(&terms, &coeffs)
}

/// Forward-only triangular loss; weights come from the frozen models and
/// are batch-mean normalized.
pub fn tri_loss(
    cfg: &ModelConfig,
    train: &TrainConfig,
    bundle: &ModelBundle,
    batch: &[IdPair],
    estimator: Estimator,
    seed: u64,
) -> Result<f64> {
    let weights = normalize_tri_weights(&tri_pair_weights(cfg, &bundle.aq, &bundle.qa, batch)?);
    let mut tape = Tape::new();
    let models = register_bidword_models(&mut tape, bundle);
    let mut rng = Rng::substream(seed, "tri.gumbel");
    let loss = tri_loss_node(
        &mut tape, cfg, train, &models, batch, &weights, estimator, train.gumbel_tau, &mut rng,
    )?;
    Ok(tape.scalar_value(loss))
}

/// The composite objective: lambda * mle + (1 - lambda) * tri.
pub fn total_loss(mle: f64, tri: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig("lambda must be in [0, 1]"));
    }
    Ok(lambda * mle + (1.0 - lambda) * tri)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with per-matrix moment state.
pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[&Mat]) -> Adam {
        Adam {
            m: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update; `grads[i] = None` is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Option<&Mat>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - num::powf(self.beta1, self.t as f64);
        let bc2 = 1.0 - num::powf(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let g = grads[i].map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (num::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Linear warmup to `base`, then linear decay to zero at `horizon`.
pub fn lr_at(step: usize, base: f64, warmup: usize, horizon: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        base * step as f64 / warmup as f64
    } else {
        let denom = horizon.saturating_sub(warmup).max(1) as f64;
        let remain = horizon.saturating_sub(step) as f64;
        base * (remain / denom).clamp(0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

/// One history row; phase-1 rows leave the component losses at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub phase: u8,
    pub mle: f64,
    pub tri: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
}

struct Batcher {
    order: Vec<usize>,
    at: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Batcher {
        Batcher {
            order: (0..n).collect(),
            at: n, // force a shuffle on first use
            rng,
        }
    }

    fn next(&mut self, want: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.at >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

fn gather(pairs: &[IdPair], idxs: &[usize]) -> Vec<IdPair> {
    idxs.iter().map(|&i| pairs[i].clone()).collect()
}

struct EarlyStop {
    best: f64,
    misses: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> EarlyStop {
        EarlyStop {
            best: f64::INFINITY,
            misses: 0,
            patience,
        }
    }

    /// Returns true when the phase should stop.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - 1e-9 {
            self.best = loss;
            self.misses = 0;
            false
        } else {
            self.misses += 1;
            self.misses >= self.patience
        }
    }
}

/// Mean per-step validation cross-entropy of the two ad/query directions.
/// The bound objective itself is not monotone in model quality (its
/// detached weights grow as the models sharpen), so convergence is
/// monitored on this quantity instead.
fn phase1_validation_nll(
    cfg: &ModelConfig,
    theta_aq: &ModelParams,
    theta_qa: &ModelParams,
    pairs: &[IdPair],
) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0usize;
    for pair in pairs {
        let tq = with_eos(&pair.dst);
        let ta = with_eos(&pair.src);
        total -= sequence_logprob(cfg, theta_aq, &pair.src, &tq)?;
        total -= sequence_logprob(cfg, theta_qa, &pair.dst, &ta)?;
        steps += tq.len() + ta.len();
    }
    Ok(total / steps.max(1) as f64)
}

/// Phase 1: optimize the two ad/query models on the bound objective until
/// the validation cross-entropy stops improving or `max_steps_phase1` is
/// reached. History rows carry the batch per-step cross-entropy in the
/// likelihood column and the bound loss per pair in the total column.
pub fn run_phase1(
    cfg: &ModelConfig,
    train: &TrainConfig,
    bundle: &mut ModelBundle,
    data: &TriData,
) -> Result<Vec<LossRecord>> {
    train.validate()?;
    if data.aq.train.is_empty() {
        return Err(Error::EmptyBatch("phase 1 aq train split"));
    }
    let mut history = Vec::new();
    let mut batcher = Batcher::new(
        data.aq.train.len(),
        Rng::substream(train.seed, "phase1.batch"),
    );
    let mut adam = {
        let mut refs: Vec<&Mat> = bundle.aq.named_params().into_iter().map(|(_, m)| m).collect();
        refs.extend(bundle.qa.named_params().into_iter().map(|(_, m)| m));
        Adam::new(&refs)
    };
    let mut stopper = EarlyStop::new(train.patience);

    for step in 1..=train.max_steps_phase1 {
        let batch = gather(&data.aq.train, &batcher.next(train.batch_size));
        let mut tape = Tape::new();
        let aq_nodes = register_model(&mut tape, &bundle.aq);
        let qa_nodes = register_model(&mut tape, &bundle.qa);
        let (loss, batch_nll) =
            mi_bound_loss_node_with_nll(&mut tape, cfg, &aq_nodes, &qa_nodes, &batch)?;
        let loss_value = tape.scalar_value(loss);
        let grads = tape.backward(loss);

        let nodes: Vec<NodeId> = aq_nodes
            .node_list()
            .into_iter()
            .chain(qa_nodes.node_list())
            .collect();
        let grad_refs: Vec<Option<&Mat>> = nodes.iter().map(|n| grads.get(*n)).collect();
        let mut param_refs = bundle.aq.params_mut();
        param_refs.extend(bundle.qa.params_mut());
        adam.step(
            &mut param_refs,
            &grad_refs,
            lr_at(step, train.lr, train.warmup_steps, train.max_steps_phase1),
        );

        history.push(LossRecord {
            step,
            phase: 1,
            mle: batch_nll,
            tri: 0.0,
            total: loss_value / batch.len() as f64,
        });

        if step % train.eval_every == 0 && !data.aq.valid.is_empty() {
            let vnll = phase1_validation_nll(cfg, &bundle.aq, &bundle.qa, &data.aq.valid)?;
            if stopper.observe(vnll) {
                break;
            }
        }
    }
    Ok(history)
}

/// Upper bound on validation pairs scored per phase-2 evaluation.
const PHASE2_VALID_CAP: usize = 64;

/// Phase 2: freeze the ad/query models and optimize the four bidword
/// models on the composite loss. The frozen models only contribute the
/// detached triangular weights, which are cached per pair.
pub fn run_phase2(
    cfg: &ModelConfig,
    train: &TrainConfig,
    bundle: &mut ModelBundle,
    data: &TriData,
) -> Result<Vec<LossRecord>> {
    train.validate()?;
    if data.ab.train.is_empty() || data.qb.train.is_empty() {
        return Err(Error::EmptyBatch("phase 2 ab/qb train splits"));
    }
    let use_tri = train.lambda < 1.0;
    let use_mle = train.lambda > 0.0;
    if use_tri && data.aq.train.is_empty() {
        return Err(Error::EmptyBatch("phase 2 aq train split"));
    }

    let mut history = Vec::new();
    let mut aq_batcher = Batcher::new(data.aq.train.len(), Rng::substream(train.seed, "phase2.aq"));
    let mut ab_batcher = Batcher::new(data.ab.train.len(), Rng::substream(train.seed, "phase2.ab"));
    let mut qb_batcher = Batcher::new(data.qb.train.len(), Rng::substream(train.seed, "phase2.qb"));
    let mut gumbel_rng = Rng::substream(train.seed, "phase2.gumbel");

    // Detached weights from the frozen models, filled in lazily.
    let mut weight_cache: Vec<Option<(f64, f64)>> = vec![None; data.aq.train.len()];
    let mut valid_weights: Option<Vec<(f64, f64)>> = None;

    let mut adam = {
        let mut refs: Vec<&Mat> = Vec::new();
        for m in [&bundle.ab, &bundle.ba, &bundle.qb, &bundle.bq] {
            refs.extend(m.named_params().into_iter().map(|(_, mat)| mat));
        }
        Adam::new(&refs)
    };
    let mut stopper = EarlyStop::new(train.patience);

    for step in 1..=train.max_steps_phase2 {
        let tau = train.tau_at(step);
        let batch_ab = gather(&data.ab.train, &ab_batcher.next(train.batch_size));
        let batch_qb = gather(&data.qb.train, &qb_batcher.next(train.batch_size));

        let mut tape = Tape::new();
        let models = register_bidword_models(&mut tape, bundle);

        let mle_node = if use_mle {
            Some(mle_loss_node(&mut tape, cfg, &models, &batch_ab, &batch_qb)?)
        } else {
            None
        };
        let tri_node = if use_tri {
            let idxs = aq_batcher.next(train.batch_size);
            let batch_aq = gather(&data.aq.train, &idxs);
            let mut weights = Vec::with_capacity(idxs.len());
            for (&i, pair) in idxs.iter().zip(&batch_aq) {
                if weight_cache[i].is_none() {
                    weight_cache[i] = Some(
                        mi_pair_weights(cfg, &bundle.aq, &bundle.qa, core::slice::from_ref(pair))?[0],
                    );
                }
                weights.push(weight_cache[i].unwrap());
            }
            let weights = normalize_tri_weights(&weights);
            Some(tri_loss_node(
                &mut tape, cfg, train, &models, &batch_aq, &weights, train.estimator, tau,
                &mut gumbel_rng,
            )?)
        } else {
            None
        };

        let (loss, mle_value, tri_value) = match (mle_node, tri_node) {
            (Some(m), Some(t)) => {
                let l = tape.weighted_sum(&[m, t], &[train.lambda, 1.0 - train.lambda])?;
                (l, tape.scalar_value(m), tape.scalar_value(t))
            }
            (Some(m), None) => (m, tape.scalar_value(m), 0.0),
            (None, Some(t)) => (t, 0.0, tape.scalar_value(t)),
            (None, None) => return Err(Error::InvalidConfig("lambda excludes both losses")),
        };
        let loss_value = tape.scalar_value(loss);
        let grads = tape.backward(loss);

        let nodes: Vec<NodeId> = [&models.ab, &models.ba, &models.qb, &models.bq]
            .iter()
            .flat_map(|m| m.node_list())
            .collect();
        let grad_refs: Vec<Option<&Mat>> = nodes.iter().map(|n| grads.get(*n)).collect();
        let mut param_refs = bundle.ab.params_mut();
        param_refs.extend(bundle.ba.params_mut());
        param_refs.extend(bundle.qb.params_mut());
        param_refs.extend(bundle.bq.params_mut());
        adam.step(
            &mut param_refs,
            &grad_refs,
            lr_at(step, train.lr, train.warmup_steps, train.max_steps_phase2),
        );

        let n = train.batch_size as f64;
        history.push(LossRecord {
            step,
            phase: 2,
            mle: mle_value / n,
            tri: tri_value / n,
            total: loss_value / n,
        });

        if step % train.eval_every == 0 {
            let vloss = phase2_validation_loss(cfg, train, bundle, data, &mut valid_weights)?;
            if let Some(v) = vloss {
                if stopper.observe(v) {
                    break;
                }
            }
        }
    }
    Ok(history)
}

/// Deterministic composite validation loss over capped validation subsets;
/// `None` when there is no validation data at all.
fn phase2_validation_loss(
    cfg: &ModelConfig,
    train: &TrainConfig,
    bundle: &ModelBundle,
    data: &TriData,
    valid_weights: &mut Option<Vec<(f64, f64)>>,
) -> Result<Option<f64>> {
    let cap = |pairs: &[IdPair]| -> Vec<IdPair> { pairs.iter().take(PHASE2_VALID_CAP).cloned().collect() };
    let ab = cap(&data.ab.valid);
    let qb = cap(&data.qb.valid);
    let aq = cap(&data.aq.valid);

    let mut total = 0.0;
    let mut have_any = false;
    if train.lambda > 0.0 && !(ab.is_empty() && qb.is_empty()) {
        let mle = mle_loss(cfg, bundle, &ab, &qb)?;
        total += train.lambda * mle / (ab.len() + qb.len()).max(1) as f64;
        have_any = true;
    }
    if train.lambda < 1.0 && !aq.is_empty() {
        if valid_weights.is_none() {
            *valid_weights = Some(normalize_tri_weights(&tri_pair_weights(
                cfg, &bundle.aq, &bundle.qa, &aq,
            )?));
        }
        let weights = valid_weights.as_ref().unwrap();
        let mut tape = Tape::new();
        let models = register_bidword_models(&mut tape, bundle);
        let mut rng = Rng::substream(train.seed, "phase2.valid.gumbel");
        let tri = tri_loss_node(
            &mut tape, cfg, train, &models, &aq, weights, train.estimator, train.tau_floor, &mut rng,
        )?;
        total += (1.0 - train.lambda) * tape.scalar_value(tri) / aq.len() as f64;
        have_any = true;
    }
    Ok(if have_any { Some(total) } else { None })
}

/// Runs both phases in sequence on one bundle.
pub fn run_training(
    cfg: &ModelConfig,
    train: &TrainConfig,
    bundle: &mut ModelBundle,
    data: &TriData,
) -> Result<TrainOutcome> {
    let mut history = run_phase1(cfg, train, bundle, data)?;
    history.extend(run_phase2(cfg, train, bundle, data)?);
    Ok(TrainOutcome { history })
}

/// Formats one history row for the loss CSV.
pub fn loss_csv_row(rec: &LossRecord) -> String {
    alloc::format!(
        "{},{},{:.6},{:.6},{:.6}",
        rec.step, rec.phase, rec.mle, rec.tri, rec.total
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testkit::{naive_soft_greedy_bridge, tiny_model};

    fn pair(src: &[TokenId], dst: &[TokenId]) -> IdPair {
        IdPair {
            src: src.to_vec(),
            dst: dst.to_vec(),
            topic: 0,
            noisy: false,
        }
    }

    fn tiny_bundle(seed: u64, vocab: usize) -> (ModelConfig, ModelBundle) {
        let (cfg, _) = tiny_model(seed, vocab);
        let bundle = ModelBundle::init(cfg.clone(), seed).unwrap();
        (cfg, bundle)
    }

    // ---- phase-1 objective --------------------------------------------------

    #[test]
    fn mi_loss_matches_compositional_oracle() {
        let (cfg, bundle) = tiny_bundle(3, 8);
        let batch = vec![pair(&[4, 5], &[6]), pair(&[6, 7], &[4, 5])];
        let got = mi_bound_loss(&cfg, &bundle.aq, &bundle.qa, &batch).unwrap();
        let mut expect = 0.0;
        for p in &batch {
            let tq = with_eos(&p.dst);
            let ta = with_eos(&p.src);
            let lp_q = sequence_logprob(&cfg, &bundle.aq, &p.src, &tq).unwrap();
            let lp_a = sequence_logprob(&cfg, &bundle.qa, &p.dst, &ta).unwrap();
            expect -= (lp_q / tq.len() as f64).exp() * lp_q;
            expect -= (lp_a / ta.len() as f64).exp() * lp_a;
        }
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn zero_weights_zero_the_loss() {
        let (cfg, bundle) = tiny_bundle(5, 8);
        let batch = vec![pair(&[4], &[5]), pair(&[5], &[6])];
        let mut tape = Tape::new();
        let aq = register_model(&mut tape, &bundle.aq);
        let qa = register_model(&mut tape, &bundle.qa);
        let loss =
            mi_bound_loss_node_weighted(&mut tape, &cfg, &aq, &qa, &batch, &[(0.0, 0.0); 2]).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (cfg, bundle) = tiny_bundle(5, 8);
        assert!(matches!(
            mi_bound_loss(&cfg, &bundle.aq, &bundle.qa, &[]),
            Err(Error::EmptyBatch(_))
        ));
    }

    // Helpers indexing the concatenated aq+qa parameter list.
    fn shape_of(bundle: &mut ModelBundle, pi: usize) -> (usize, usize) {
        let n_aq = bundle.aq.params_mut().len();
        if pi < n_aq {
            let ps = bundle.aq.params_mut();
            (ps[pi].rows(), ps[pi].cols())
        } else {
            let ps = bundle.qa.params_mut();
            (ps[pi - n_aq].rows(), ps[pi - n_aq].cols())
        }
    }

    fn read_entry(bundle: &mut ModelBundle, pi: usize, r: usize, c: usize) -> f64 {
        let n_aq = bundle.aq.params_mut().len();
        if pi < n_aq {
            bundle.aq.params_mut()[pi].get(r, c)
        } else {
            bundle.qa.params_mut()[pi - n_aq].get(r, c)
        }
    }

    fn write_entry(bundle: &mut ModelBundle, pi: usize, r: usize, c: usize, v: f64) {
        let n_aq = bundle.aq.params_mut().len();
        if pi < n_aq {
            bundle.aq.params_mut()[pi].set(r, c, v);
        } else {
            bundle.qa.params_mut()[pi - n_aq].set(r, c, v);
        }
    }

    #[test]
    fn mi_gradient_matches_finite_differences_with_frozen_weights() {
        // The applied gradient treats the weights as constants; finite
        // differences of the weighted functional must reproduce it.
        let (cfg, mut bundle) = tiny_bundle(7, 7);
        let batch = vec![pair(&[4, 6], &[5]), pair(&[5], &[6, 4])];
        let weights = mi_pair_weights(&cfg, &bundle.aq, &bundle.qa, &batch).unwrap();

        let mut tape = Tape::new();
        let aq = register_model(&mut tape, &bundle.aq);
        let qa = register_model(&mut tape, &bundle.qa);
        let loss = mi_bound_loss_node_weighted(&mut tape, &cfg, &aq, &qa, &batch, &weights).unwrap();
        let grads = tape.backward(loss);
        let nodes: Vec<NodeId> = aq.node_list().into_iter().chain(qa.node_list()).collect();
        let analytic: Vec<Option<Mat>> = nodes.iter().map(|n| grads.get(*n).cloned()).collect();

        let eval = |bundle: &ModelBundle| {
            let mut tape = Tape::new();
            let aq = register_model(&mut tape, &bundle.aq);
            let qa = register_model(&mut tape, &bundle.qa);
            let loss =
                mi_bound_loss_node_weighted(&mut tape, &cfg, &aq, &qa, &batch, &weights).unwrap();
            tape.scalar_value(loss)
        };

        let h = 1e-4;
        let mut rng = Rng::new(11);
        #[allow(clippy::needless_range_loop)]
        for pi in 0..nodes.len() {
            // spot-check a few entries per parameter
            let (rows, cols) = shape_of(&mut bundle, pi);
            for _ in 0..2 {
                let r = rng.below(rows);
                let c = rng.below(cols);
                let orig = read_entry(&mut bundle, pi, r, c);
                write_entry(&mut bundle, pi, r, c, orig + h);
                let fp = eval(&bundle);
                write_entry(&mut bundle, pi, r, c, orig - h);
                let fm = eval(&bundle);
                write_entry(&mut bundle, pi, r, c, orig);
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[pi].as_ref().map_or(0.0, |m| m.get(r, c));
                let denom = a.abs().max(numeric.abs()).max(1e-5);
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "param {pi} ({r},{c}): {a} vs {numeric}"
                );
            }
        }
    }

    // ---- likelihood loss ------------------------------------------------------

    #[test]
    fn mle_matches_sum_of_sequence_logprobs() {
        let (cfg, bundle) = tiny_bundle(9, 8);
        let batch_ab = vec![pair(&[4, 5], &[6])];
        let batch_qb = vec![pair(&[6], &[7]), pair(&[7], &[4])];
        let got = mle_loss(&cfg, &bundle, &batch_ab, &batch_qb).unwrap();
        let mut expect = 0.0;
        for p in &batch_ab {
            expect -= sequence_logprob(&cfg, &bundle.ab, &p.src, &with_eos(&p.dst)).unwrap();
            expect -= sequence_logprob(&cfg, &bundle.ba, &p.dst, &with_eos(&p.src)).unwrap();
        }
        for p in &batch_qb {
            expect -= sequence_logprob(&cfg, &bundle.qb, &p.src, &with_eos(&p.dst)).unwrap();
            expect -= sequence_logprob(&cfg, &bundle.bq, &p.dst, &with_eos(&p.src)).unwrap();
        }
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn uniform_models_give_total_length_times_log_vocab() {
        let (cfg, mut bundle) = tiny_bundle(11, 6);
        for dir in [
            crate::model::Direction::AB,
            crate::model::Direction::BA,
            crate::model::Direction::QB,
            crate::model::Direction::BQ,
        ] {
            bundle.model_mut(dir).w_out = Mat::zeros(cfg.d_model, cfg.vocab_size);
        }
        let batch_ab = vec![pair(&[4, 5], &[4, 5])]; // both targets score 3 steps with EOS
        let batch_qb = vec![pair(&[5], &[4])]; // both targets score 2 steps with EOS
        let got = mle_loss(&cfg, &bundle, &batch_ab, &batch_qb).unwrap();
        let total_steps = (3 + 3 + 2 + 2) as f64;
        let expect = total_steps * (cfg.vocab_size as f64).ln();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    // ---- gumbel ---------------------------------------------------------------

    #[test]
    fn gumbel_sample_lies_on_simplex() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let (soft, hard) = gumbel_softmax_sample(&[0.5, -1.0, 2.0, 0.0], 0.7, &mut rng).unwrap();
            let sum: f64 = soft.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(hard < 4);
            assert_eq!(hard, argmax(&soft));
        }
    }

    #[test]
    fn low_temperature_concentrates_on_dominant_logit() {
        let mut rng = Rng::new(5);
        let logits = [10.0, 0.0, 0.0];
        let n = 10_000;
        let mut sharp = 0;
        for _ in 0..n {
            let (soft, _) = gumbel_softmax_sample(&logits, 0.01, &mut rng).unwrap();
            if (soft[0] - 1.0).abs() < 1e-3 && soft[1] < 1e-3 && soft[2] < 1e-3 {
                sharp += 1;
            }
        }
        assert!(sharp as f64 >= 0.99 * n as f64, "only {sharp}/{n} sharp draws");
    }

    #[test]
    fn hard_index_frequencies_match_softmax() {
        let mut rng = Rng::new(15);
        let logits = [1.0, 0.0, -0.5, 0.5];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let n = 20_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (_, hard) = gumbel_softmax_sample(&logits, 1.0, &mut rng).unwrap();
            counts[hard] += 1;
        }
        for i in 0..4 {
            let p = logits[i].exp() / z;
            let expect = p * n as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (counts[i] as f64 - expect).abs() <= 3.0 * sigma,
                "index {i}: {} vs {expect}",
                counts[i]
            );
        }
    }

    #[test]
    fn non_finite_logits_error() {
        let mut rng = Rng::new(1);
        assert!(gumbel_softmax_sample(&[1.0, f64::NAN], 1.0, &mut rng).is_err());
        assert!(gumbel_softmax_sample(&[1.0, f64::INFINITY], 1.0, &mut rng).is_err());
    }

    // ---- bridges ---------------------------------------------------------------

    #[test]
    fn uniform_source_bridge_is_downstream_column_mean() {
        let (cfg, mut bundle) = tiny_bundle(13, 7);
        bundle.ab.w_out = Mat::zeros(cfg.d_model, cfg.vocab_size);
        let bridge = expected_embedding_bridge(&cfg, &bundle.ab, &bundle.bq.emb, &[4, 5], 3).unwrap();
        for j in 0..3 {
            for c in 0..cfg.d_model {
                let mean: f64 = (0..cfg.vocab_size).map(|w| bundle.bq.emb.get(w, c)).sum::<f64>()
                    / cfg.vocab_size as f64;
                assert!((bridge.get(j, c) - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bridge_matches_naive_soft_greedy_oracle() {
        let (cfg, bundle) = tiny_bundle(17, 7);
        let src = vec![4, 6];
        let got = expected_embedding_bridge(&cfg, &bundle.ab, &bundle.bq.emb, &src, 2).unwrap();
        let expect = naive_soft_greedy_bridge(&cfg, &bundle.ab, &bundle.bq.emb, &src, 2);
        for (a, b) in got.data().iter().zip(expect.data().iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn bridge_rows_stay_in_embedding_convex_hull() {
        let (cfg, bundle) = tiny_bundle(19, 7);
        let bridge = expected_embedding_bridge(&cfg, &bundle.ab, &bundle.bq.emb, &[5], 4).unwrap();
        for j in 0..bridge.rows() {
            for c in 0..cfg.d_model {
                let col: Vec<f64> = (0..cfg.vocab_size).map(|w| bundle.bq.emb.get(w, c)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = bridge.get(j, c);
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn bridge_a_logprob_is_nonpositive() {
        let (cfg, bundle) = tiny_bundle(23, 7);
        let lp = bridge_logprob_a(&cfg, &bundle.ab, &bundle.bq, &[4, 5], &[6, EOS], 3).unwrap();
        assert!(lp <= 0.0);
    }

    #[test]
    fn single_candidate_marginal_decomposes() {
        // With C = {b*}: log ~P = logP(b*|src) + logP(tgt|b*).
        let (cfg, bundle) = tiny_bundle(29, 7);
        let src = vec![4, 5];
        let tgt = vec![6, EOS];
        let cand = vec![vec![5, 6]];
        let got = bridge_logprob_with_candidates(&cfg, &bundle.ab, &bundle.bq, &src, &tgt, &cand).unwrap();
        let expect = sequence_logprob(&cfg, &bundle.ab, &src, &cand[0]).unwrap()
            + sequence_logprob(&cfg, &bundle.bq, &cand[0], &tgt).unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    fn all_bridges(vocab: usize, len: usize) -> Vec<Vec<TokenId>> {
        let mut out: Vec<Vec<TokenId>> = vec![Vec::new()];
        for _ in 0..len {
            let mut next = Vec::with_capacity(out.len() * vocab);
            for prefix in &out {
                for w in 0..vocab {
                    let mut p = prefix.clone();
                    p.push(w);
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }

    /// Brute-force marginal in log space via independent sequence scores.
    fn brute_force_marginal(
        cfg: &ModelConfig,
        src_m: &ModelParams,
        dst_m: &ModelParams,
        src: &[TokenId],
        tgt: &[TokenId],
        bridges: &[Vec<TokenId>],
    ) -> f64 {
        let scores: Vec<f64> = bridges
            .iter()
            .map(|b| {
                sequence_logprob(cfg, src_m, src, b).unwrap()
                    + sequence_logprob(cfg, dst_m, b, tgt).unwrap()
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }

    #[test]
    fn exhaustive_candidates_equal_brute_force_marginal() {
        let (cfg, bundle) = tiny_bundle(31, 7);
        let src = vec![4, 6];
        let tgt = vec![5, EOS];
        let bridges = all_bridges(cfg.vocab_size, 2);
        let got =
            bridge_logprob_with_candidates(&cfg, &bundle.ab, &bundle.bq, &src, &tgt, &bridges).unwrap();
        let expect = brute_force_marginal(&cfg, &bundle.ab, &bundle.bq, &src, &tgt, &bridges);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn many_samples_approach_the_marginal() {
        let (cfg, bundle) = tiny_bundle(37, 7);
        let src = vec![4];
        let tgt = vec![5, EOS];
        let bridges = all_bridges(cfg.vocab_size, 2);
        let exact = brute_force_marginal(&cfg, &bundle.ab, &bundle.bq, &src, &tgt, &bridges);
        let sampled =
            bridge_logprob_s(&cfg, &bundle.ab, &bundle.bq, &src, &tgt, 2, 1000, 1.0, 41).unwrap();
        // compare in probability space at 5% relative
        let rel = ((sampled - exact).exp() - 1.0).abs();
        assert!(rel < 0.05, "sampled {sampled} vs exact {exact} (rel {rel})");
    }

    #[test]
    fn sampled_bridge_is_deterministic_per_seed() {
        let (cfg, bundle) = tiny_bundle(41, 7);
        let a = bridge_logprob_s(&cfg, &bundle.ab, &bundle.bq, &[4], &[5], 2, 5, 1.0, 7).unwrap();
        let b = bridge_logprob_s(&cfg, &bundle.ab, &bundle.bq, &[4], &[5], 2, 5, 1.0, 7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    // ---- triangular loss ---------------------------------------------------------

    #[test]
    fn tri_loss_matches_hand_composition() {
        let (cfg, bundle) = tiny_bundle(43, 7);
        let train = TrainConfig {
            bridge_len: 2,
            ..TrainConfig::default()
        };
        let batch = vec![pair(&[4, 5], &[6]), pair(&[6], &[5, 4])];
        let got = tri_loss(&cfg, &train, &bundle, &batch, Estimator::ExpectedEmbedding, 0).unwrap();
        let weights = normalize_tri_weights(&tri_pair_weights(&cfg, &bundle.aq, &bundle.qa, &batch).unwrap());
        let mut expect = 0.0;
        for (p, (w_aq, w_qa)) in batch.iter().zip(&weights) {
            let lp_q =
                bridge_logprob_a(&cfg, &bundle.ab, &bundle.bq, &p.src, &with_eos(&p.dst), 2).unwrap();
            let lp_a =
                bridge_logprob_a(&cfg, &bundle.qb, &bundle.ba, &p.dst, &with_eos(&p.src), 2).unwrap();
            expect -= w_aq * lp_q + w_qa * lp_a;
        }
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn tri_loss_zero_weights_vanish() {
        let (cfg, bundle) = tiny_bundle(47, 7);
        let train = TrainConfig {
            bridge_len: 2,
            ..TrainConfig::default()
        };
        let batch = vec![pair(&[4], &[5])];
        let mut tape = Tape::new();
        let models = register_bidword_models(&mut tape, &bundle);
        let mut rng = Rng::new(0);
        let loss = tri_loss_node(
            &mut tape, &cfg, &train, &models, &batch, &[(0.0, 0.0)],
            Estimator::ExpectedEmbedding, 1.0, &mut rng,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(5.0, 3.0, 1.0).unwrap(), 5.0);
        assert_eq!(total_loss(5.0, 3.0, 0.0).unwrap(), 3.0);
        assert!((total_loss(2.0, 1.0, 0.6).unwrap() - 1.6).abs() < 1e-12);
        assert!(total_loss(1.0, 1.0, 1.5).is_err());
    }

    // ---- gradient integrity of the triangular loss -----------------------------

    fn model_by_index(bundle: &mut ModelBundle, i: usize) -> &mut ModelParams {
        match i {
            0 => &mut bundle.ab,
            1 => &mut bundle.ba,
            2 => &mut bundle.qb,
            _ => &mut bundle.bq,
        }
    }

    fn tri_grad_check(estimator: Estimator, seed: u64) {
        let (cfg, mut bundle) = tiny_bundle(seed, 7);
        let train = TrainConfig {
            bridge_len: 2,
            sample_size: 3,
            ..TrainConfig::default()
        };
        let batch = vec![pair(&[4, 6], &[5])];
        let weights = tri_pair_weights(&cfg, &bundle.aq, &bundle.qa, &batch).unwrap();

        let eval = |bundle: &ModelBundle| {
            let mut tape = Tape::new();
            let models = register_bidword_models(&mut tape, bundle);
            let mut rng = Rng::new(1234);
            let loss = tri_loss_node(
                &mut tape, &cfg, &train, &models, &batch, &weights, estimator, 1.0, &mut rng,
            )
            .unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let models = register_bidword_models(&mut tape, &bundle);
        let mut rng = Rng::new(1234);
        let loss = tri_loss_node(
            &mut tape, &cfg, &train, &models, &batch, &weights, estimator, 1.0, &mut rng,
        )
        .unwrap();
        let grads = tape.backward(loss);
        let nodes: Vec<NodeId> = [&models.ab, &models.ba, &models.qb, &models.bq]
            .iter()
            .flat_map(|m| m.node_list())
            .collect();
        let analytic: Vec<Option<Mat>> = nodes.iter().map(|n| grads.get(*n).cloned()).collect();

        // spot-check entries across the four models
        let h = 1e-4;
        let mut check_rng = Rng::new(99 + seed);
        let n_per_model = bundle.ab.params_mut().len();
        for probe in 0..24 {
            let model_i = probe % 4;
            let pi = check_rng.below(n_per_model);
            let global_pi = model_i * n_per_model + pi;
            let (rows, cols) = {
                let m = model_by_index(&mut bundle, model_i);
                let ps = m.params_mut();
                (ps[pi].rows(), ps[pi].cols())
            };
            let r = check_rng.below(rows);
            let c = check_rng.below(cols);
            let orig = {
                let m = model_by_index(&mut bundle, model_i);
                m.params_mut()[pi].get(r, c)
            };
            {
                let m = model_by_index(&mut bundle, model_i);
                m.params_mut()[pi].set(r, c, orig + h);
            }
            let fp = eval(&bundle);
            {
                let m = model_by_index(&mut bundle, model_i);
                m.params_mut()[pi].set(r, c, orig - h);
            }
            let fm = eval(&bundle);
            {
                let m = model_by_index(&mut bundle, model_i);
                m.params_mut()[pi].set(r, c, orig);
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[global_pi].as_ref().map_or(0.0, |m| m.get(r, c));
            let denom = a.abs().max(numeric.abs()).max(1e-5);
            assert!(
                (a - numeric).abs() / denom < 1e-3,
                "{:?} model {model_i} param {pi} ({r},{c}): {a} vs {numeric}",
                estimator
            );
        }
    }

    #[test]
    fn tri_gradients_match_finite_differences_expected_embedding() {
        tri_grad_check(Estimator::ExpectedEmbedding, 53);
    }

    #[test]
    fn tri_gradients_match_finite_differences_sampled() {
        tri_grad_check(Estimator::Sampled, 59);
    }

    // ---- schedule / optimizer -----------------------------------------------------

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let base = 1e-3;
        assert!((lr_at(1, base, 10, 100) - base * 0.1).abs() < 1e-12);
        assert!((lr_at(10, base, 10, 100) - base).abs() < 1e-12);
        assert!((lr_at(55, base, 10, 100) - base * 0.5).abs() < 1e-12);
        assert_eq!(lr_at(100, base, 10, 100), 0.0);
        assert_eq!(lr_at(200, base, 10, 100), 0.0);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Mat::from_vec(1, 2, vec![3.0, -2.0]);
        let mut adam = Adam::new(&[&p]);
        for _ in 0..500 {
            let g = Mat::from_vec(1, 2, vec![2.0 * p.get(0, 0), 2.0 * p.get(0, 1)]);
            adam.step(&mut [&mut p], &[Some(&g)], 0.05);
        }
        assert!(p.get(0, 0).abs() < 0.05 && p.get(0, 1).abs() < 0.05);
    }

    // ---- training driver ------------------------------------------------------------

    fn toy_data(seed: u64) -> (ModelConfig, TriData) {
        let spec = crate::corpus::GenSpec::tiny(2, 50, seed);
        let corpus = crate::corpus::generate_corpus(&spec).unwrap();
        let corpus = crate::corpus::split_corpus(corpus, 8, 8, seed).unwrap();
        let vocab = crate::vocab::Vocab::build(&corpus, 1).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            max_len: 24,
            vocab_size: vocab.size(),
        };
        (cfg.clone(), encode_corpus(&corpus, &vocab))
    }

    fn smoke_train_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            warmup_steps: 10,
            max_steps_phase1: 200,
            max_steps_phase2: 200,
            eval_every: 50,
            patience: 10,
            bridge_len: 2,
            sample_size: 2,
            ..TrainConfig::default()
        }
    }

    fn tail_mean(records: &[LossRecord], n: usize) -> f64 {
        let tail = &records[records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64
    }

    #[test]
    fn training_descends_and_freezes_phase1_models() {
        let (cfg, data) = toy_data(5);
        let train = smoke_train_config();
        let mut bundle = ModelBundle::init(cfg.clone(), 5).unwrap();
        let h1 = run_phase1(&cfg, &train, &mut bundle, &data).unwrap();
        let h1_tail_nll: f64 =
            h1[h1.len() - 10..].iter().map(|r| r.mle).sum::<f64>() / 10.0;
        assert!(h1_tail_nll < h1.first().unwrap().mle);

        let aq_before = bundle.aq.clone();
        let qa_before = bundle.qa.clone();
        let h2 = run_phase2(&cfg, &train, &mut bundle, &data).unwrap();
        assert_eq!(bundle.aq, aq_before, "phase 2 must not touch theta_aq");
        assert_eq!(bundle.qa, qa_before, "phase 2 must not touch theta_qa");
        assert!(tail_mean(&h2, 10) < h2.first().unwrap().total);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (cfg, data) = toy_data(7);
        let train = smoke_train_config();
        let mut b1 = ModelBundle::init(cfg.clone(), 7).unwrap();
        let mut b2 = ModelBundle::init(cfg.clone(), 7).unwrap();
        let o1 = run_training(&cfg, &train, &mut b1, &data).unwrap();
        let o2 = run_training(&cfg, &train, &mut b2, &data).unwrap();
        assert_eq!(o1.history, o2.history);
        assert_eq!(b1, b2);
    }

    #[test]
    fn missing_splits_error() {
        let (cfg, mut data) = toy_data(9);
        let train = smoke_train_config();
        data.aq.train.clear();
        let mut bundle = ModelBundle::init(cfg.clone(), 9).unwrap();
        assert!(matches!(
            run_phase1(&cfg, &train, &mut bundle, &data),
            Err(Error::EmptyBatch(_))
        ));
    }
}

