//! Beam search and the diversity-constrained variant.
//!
//! Both decoders return hypotheses wrapped in BOS...EOS whose score is the
//! full cumulative log-probability including the terminating EOS (appended
//! with its log-probability when a hypothesis runs into the length limit),
//! so a hypothesis score always reproduces the teacher-forced score of its
//! own tokens. Neither decoder ever selects EOS as the first generated
//! token; an empty bidword is useless.
//!
//! The constrained variant forces the candidates' first tokens to be the
//! top distinct entries of the first-step distribution and completes each
//! head greedily, which trades a little likelihood for head-word
//! diversity.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{encode_source, next_dist_with_encoded, Encoded, ModelConfig, ModelParams};
use crate::num::ln_clamped;
use crate::vocab::{BOS, EOS};
use crate::{Error, Result, TokenId};

/// Decoder settings as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum generated content tokens (the terminating EOS is extra).
    pub max_len: usize,
    pub constrained: bool,
    /// Rank hypotheses by score / length instead of raw score.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 32,
            max_len: 8,
            constrained: true,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// BOS ... EOS, inclusive.
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability of every generated token including EOS.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated content tokens (without BOS/EOS).
    pub fn content(&self) -> &[TokenId] {
        let end = self.tokens.len() - usize::from(self.tokens.last() == Some(&EOS));
        &self.tokens[1..end]
    }

    fn rank_score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.score / (self.tokens.len() - 1).max(1) as f64
        } else {
            self.score
        }
    }
}

/// Decoder output plus a flag for a beam width that had to be clamped to
/// the available first tokens.
#[derive(Debug, Clone)]
pub struct BeamOutcome {
    pub hyps: Vec<Hypothesis>,
    pub clamped: bool,
}

fn sort_hyps(hyps: &mut [Hypothesis], length_normalize: bool) {
    hyps.sort_by(|a, b| {
        b.rank_score(length_normalize)
            .total_cmp(&a.rank_score(length_normalize))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

fn check_limits(cfg: &ModelConfig, n: usize, max_len: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidConfig("beam width must be >= 1"));
    }
    if max_len < 1 {
        return Err(Error::InvalidConfig("decode max_len must be >= 1"));
    }
    if max_len + 1 > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: max_len + 1,
            max_len: cfg.max_len,
        });
    }
    Ok(())
}

/// Appends EOS (with its log-probability) to an unfinished hypothesis.
fn finalize(
    cfg: &ModelConfig,
    params: &ModelParams,
    enc: &Encoded,
    hyp: &mut Hypothesis,
) -> Result<()> {
    if hyp.finished {
        return Ok(());
    }
    let dist = next_dist_with_encoded(cfg, params, enc, &hyp.tokens[1..])?;
    hyp.score += ln_clamped(dist[EOS]);
    hyp.tokens.push(EOS);
    hyp.finished = true;
    Ok(())
}

/// Standard length-wise beam search keeping the top-`n` prefixes by
/// cumulative log-probability, with ties broken by token sequence. Asking
/// for a wider beam than the vocabulary can seed sets the clamped flag.
pub fn beam_search(
    cfg: &ModelConfig,
    params: &ModelParams,
    src: &[TokenId],
    n: usize,
    max_len: usize,
) -> Result<BeamOutcome> {
    check_limits(cfg, n, max_len)?;
    let enc = encode_source(cfg, params, src)?;
    let first_token_choices = cfg.vocab_size - 1; // EOS is not a head
    let clamped = n > first_token_choices;

    let mut beams = alloc::vec![Hypothesis {
        tokens: alloc::vec![BOS],
        score: 0.0,
        finished: false,
    }];
    for step in 0..max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut cands: Vec<Hypothesis> = Vec::with_capacity(beams.len() * cfg.vocab_size);
        for hyp in &beams {
            if hyp.finished {
                cands.push(hyp.clone());
                continue;
            }
            let dist = next_dist_with_encoded(cfg, params, &enc, &hyp.tokens[1..])?;
            for (tok, &p) in dist.iter().enumerate() {
                if step == 0 && tok == EOS {
                    continue;
                }
                let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
                tokens.extend_from_slice(&hyp.tokens);
                tokens.push(tok);
                cands.push(Hypothesis {
                    tokens,
                    score: hyp.score + ln_clamped(p),
                    finished: tok == EOS,
                });
            }
        }
        sort_hyps(&mut cands, false);
        cands.truncate(n);
        beams = cands;
    }
    for hyp in beams.iter_mut() {
        finalize(cfg, params, &enc, hyp)?;
    }
    sort_hyps(&mut beams, false);
    Ok(BeamOutcome { hyps: beams, clamped })
}

/// Constrained beam search: the candidates' first tokens are the top
/// `min(n, V - 1)` entries of the first-step distribution (EOS excluded),
/// each completed by greedy decoding and re-ranked by total score.
pub fn constrained_beam_search(
    cfg: &ModelConfig,
    params: &ModelParams,
    src: &[TokenId],
    n: usize,
    max_len: usize,
) -> Result<BeamOutcome> {
    check_limits(cfg, n, max_len)?;
    let enc = encode_source(cfg, params, src)?;
    let first = next_dist_with_encoded(cfg, params, &enc, &[])?;
    let mut order: Vec<TokenId> = (0..cfg.vocab_size).filter(|&t| t != EOS).collect();
    order.sort_by(|&a, &b| first[b].total_cmp(&first[a]).then_with(|| a.cmp(&b)));
    let clamped = n > order.len();
    let heads = &order[..n.min(order.len())];

    let mut hyps = Vec::with_capacity(heads.len());
    for &head in heads {
        let mut hyp = Hypothesis {
            tokens: alloc::vec![BOS, head],
            score: ln_clamped(first[head]),
            finished: false,
        };
        while !hyp.finished && hyp.tokens.len() - 1 < max_len {
            let dist = next_dist_with_encoded(cfg, params, &enc, &hyp.tokens[1..])?;
            let mut best = 0;
            for (tok, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = tok;
                }
            }
            hyp.score += ln_clamped(dist[best]);
            hyp.tokens.push(best);
            hyp.finished = best == EOS;
        }
        finalize(cfg, params, &enc, &mut hyp)?;
        hyps.push(hyp);
    }
    sort_hyps(&mut hyps, false);
    Ok(BeamOutcome { hyps, clamped })
}

/// Dispatches on the configured decoder.
pub fn decode(
    cfg: &ModelConfig,
    params: &ModelParams,
    src: &[TokenId],
    dc: &DecodeConfig,
) -> Result<BeamOutcome> {
    let mut outcome = if dc.constrained {
        constrained_beam_search(cfg, params, src, dc.beam, dc.max_len)?
    } else {
        beam_search(cfg, params, src, dc.beam, dc.max_len)?
    };
    if dc.length_normalize {
        sort_hyps(&mut outcome.hyps, true);
    }
    Ok(outcome)
}
