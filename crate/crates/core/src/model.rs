//! Transformer encoder-decoder core shared by all six directional models.
//!
//! The architecture is the standard post-norm encoder-decoder: sinusoidal
//! positional encodings, per-head attention projections, position-wise
//! feed-forward blocks, residual connections wrapped in layer norm, and an
//! untied output projection. Forward passes run on the autodiff [`Tape`],
//! so the same code path serves scoring, training, and decoding.
//!
//! Two input paths exist on the encoder side: token ids (the usual
//! embedding lookup) and caller-provided dense rows that are treated
//! exactly like looked-up embeddings. The latter lets a bridge sequence of
//! expected embeddings stand in for real tokens and stay differentiable.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use serde::{Deserialize, Serialize};

use crate::mat::{softmax_in_place, Mat};
use crate::num;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::vocab::{BOS, SPECIALS};
use crate::{Error, Result, TokenId};

const INIT_RANGE: f64 = 0.08;
const ATTN_MASK: f64 = -1e30;

/// Shared architecture configuration for the six models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Filled in once the vocabulary is built.
    #[serde(default)]
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            max_len: 64,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.d_model < 1 || self.heads < 1 || self.d_ff < 1 {
            return Err(Error::InvalidConfig("model dimensions must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig("d_model must be divisible by heads"));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len must be >= 2"));
        }
        if self.vocab_size <= SPECIALS {
            return Err(Error::InvalidConfig("vocab_size must exceed the specials"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Mat,
    pub bias: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttnParams,
    pub ln_attn: LayerNormParams,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub ln_self: LayerNormParams,
    pub cross_attn: AttnParams,
    pub ln_cross: LayerNormParams,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

/// All parameters of one directional model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub emb: Mat,
    pub enc: Vec<EncoderLayer>,
    pub dec: Vec<DecoderLayer>,
    pub w_out: Mat,
}

fn init_attn(cfg: &ModelConfig, rng: &mut Rng) -> AttnParams {
    let d = cfg.d_model;
    let dk = cfg.d_k();
    let proj = |rng: &mut Rng| Mat::uniform(d, dk, -INIT_RANGE, INIT_RANGE, rng);
    AttnParams {
        wq: (0..cfg.heads).map(|_| proj(rng)).collect(),
        wk: (0..cfg.heads).map(|_| proj(rng)).collect(),
        wv: (0..cfg.heads).map(|_| proj(rng)).collect(),
        wo: Mat::uniform(d, d, -INIT_RANGE, INIT_RANGE, rng),
    }
}

fn init_ln(cfg: &ModelConfig) -> LayerNormParams {
    LayerNormParams {
        gain: Mat::filled(1, cfg.d_model, 1.0),
        bias: Mat::zeros(1, cfg.d_model),
    }
}

fn init_ffn(cfg: &ModelConfig, rng: &mut Rng) -> FfnParams {
    FfnParams {
        w1: Mat::uniform(cfg.d_model, cfg.d_ff, -INIT_RANGE, INIT_RANGE, rng),
        b1: Mat::zeros(1, cfg.d_ff),
        w2: Mat::uniform(cfg.d_ff, cfg.d_model, -INIT_RANGE, INIT_RANGE, rng),
        b2: Mat::zeros(1, cfg.d_model),
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> ModelParams {
        ModelParams {
            emb: Mat::uniform(cfg.vocab_size, cfg.d_model, -INIT_RANGE, INIT_RANGE, rng),
            enc: (0..cfg.layers)
                .map(|_| EncoderLayer {
                    attn: init_attn(cfg, rng),
                    ln_attn: init_ln(cfg),
                    ffn: init_ffn(cfg, rng),
                    ln_ffn: init_ln(cfg),
                })
                .collect(),
            dec: (0..cfg.layers)
                .map(|_| DecoderLayer {
                    self_attn: init_attn(cfg, rng),
                    ln_self: init_ln(cfg),
                    cross_attn: init_attn(cfg, rng),
                    ln_cross: init_ln(cfg),
                    ffn: init_ffn(cfg, rng),
                    ln_ffn: init_ln(cfg),
                })
                .collect(),
            w_out: Mat::uniform(cfg.d_model, cfg.vocab_size, -INIT_RANGE, INIT_RANGE, rng),
        }
    }

    /// All parameter matrices with stable names, in a fixed traversal
    /// order. Checkpoints, the optimizer, and gradient readout all rely on
    /// this order being deterministic.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        out.push((String::from("emb"), &self.emb));
        for (i, layer) in self.enc.iter().enumerate() {
            push_attn(&mut out, format!("enc.{i}.attn"), &layer.attn);
            push_ln(&mut out, format!("enc.{i}.ln_attn"), &layer.ln_attn);
            push_ffn(&mut out, format!("enc.{i}.ffn"), &layer.ffn);
            push_ln(&mut out, format!("enc.{i}.ln_ffn"), &layer.ln_ffn);
        }
        for (i, layer) in self.dec.iter().enumerate() {
            push_attn(&mut out, format!("dec.{i}.self_attn"), &layer.self_attn);
            push_ln(&mut out, format!("dec.{i}.ln_self"), &layer.ln_self);
            push_attn(&mut out, format!("dec.{i}.cross_attn"), &layer.cross_attn);
            push_ln(&mut out, format!("dec.{i}.ln_cross"), &layer.ln_cross);
            push_ffn(&mut out, format!("dec.{i}.ffn"), &layer.ffn);
            push_ln(&mut out, format!("dec.{i}.ln_ffn"), &layer.ln_ffn);
        }
        out.push((String::from("w_out"), &self.w_out));
        out
    }

    /// Mutable view in exactly the [`ModelParams::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.push(&mut self.emb);
        for layer in self.enc.iter_mut() {
            collect_attn_mut(&mut out, &mut layer.attn);
            out.push(&mut layer.ln_attn.gain);
            out.push(&mut layer.ln_attn.bias);
            collect_ffn_mut(&mut out, &mut layer.ffn);
            out.push(&mut layer.ln_ffn.gain);
            out.push(&mut layer.ln_ffn.bias);
        }
        for layer in self.dec.iter_mut() {
            collect_attn_mut(&mut out, &mut layer.self_attn);
            out.push(&mut layer.ln_self.gain);
            out.push(&mut layer.ln_self.bias);
            collect_attn_mut(&mut out, &mut layer.cross_attn);
            out.push(&mut layer.ln_cross.gain);
            out.push(&mut layer.ln_cross.bias);
            collect_ffn_mut(&mut out, &mut layer.ffn);
            out.push(&mut layer.ln_ffn.gain);
            out.push(&mut layer.ln_ffn.bias);
        }
        out.push(&mut self.w_out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: String, attn: &'a AttnParams) {
    for (h, m) in attn.wq.iter().enumerate() {
        out.push((format!("{prefix}.wq.{h}"), m));
    }
    for (h, m) in attn.wk.iter().enumerate() {
        out.push((format!("{prefix}.wk.{h}"), m));
    }
    for (h, m) in attn.wv.iter().enumerate() {
        out.push((format!("{prefix}.wv.{h}"), m));
    }
    out.push((format!("{prefix}.wo"), &attn.wo));
}

fn push_ln<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: String, ln: &'a LayerNormParams) {
    out.push((format!("{prefix}.gain"), &ln.gain));
    out.push((format!("{prefix}.bias"), &ln.bias));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: String, ffn: &'a FfnParams) {
    out.push((format!("{prefix}.w1"), &ffn.w1));
    out.push((format!("{prefix}.b1"), &ffn.b1));
    out.push((format!("{prefix}.w2"), &ffn.w2));
    out.push((format!("{prefix}.b2"), &ffn.b2));
}

fn collect_attn_mut<'a>(out: &mut Vec<&'a mut Mat>, attn: &'a mut AttnParams) {
    for m in attn.wq.iter_mut() {
        out.push(m);
    }
    for m in attn.wk.iter_mut() {
        out.push(m);
    }
    for m in attn.wv.iter_mut() {
        out.push(m);
    }
    out.push(&mut attn.wo);
}

fn collect_ffn_mut<'a>(out: &mut Vec<&'a mut Mat>, ffn: &'a mut FfnParams) {
    out.push(&mut ffn.w1);
    out.push(&mut ffn.b1);
    out.push(&mut ffn.w2);
    out.push(&mut ffn.b2);
}

/// The six directional generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AQ,
    QA,
    AB,
    BA,
    QB,
    BQ,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::AQ,
        Direction::QA,
        Direction::AB,
        Direction::BA,
        Direction::QB,
        Direction::BQ,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Direction::AQ => "aq",
            Direction::QA => "qa",
            Direction::AB => "ab",
            Direction::BA => "ba",
            Direction::QB => "qb",
            Direction::BQ => "bq",
        }
    }

    pub fn from_name(name: &str) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.name() == name)
    }
}

/// Six parameter sets over one shared config and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub aq: ModelParams,
    pub qa: ModelParams,
    pub ab: ModelParams,
    pub ba: ModelParams,
    pub qb: ModelParams,
    pub bq: ModelParams,
}

impl ModelBundle {
    /// Initializes all six models with per-direction seed substreams.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelBundle> {
        config.validate()?;
        let make = |dir: &str| {
            let mut rng = Rng::substream(seed, &format!("init.{dir}"));
            ModelParams::init(&config, &mut rng)
        };
        Ok(ModelBundle {
            aq: make("aq"),
            qa: make("qa"),
            ab: make("ab"),
            ba: make("ba"),
            qb: make("qb"),
            bq: make("bq"),
            config,
        })
    }

    pub fn model(&self, dir: Direction) -> &ModelParams {
        match dir {
            Direction::AQ => &self.aq,
            Direction::QA => &self.qa,
            Direction::AB => &self.ab,
            Direction::BA => &self.ba,
            Direction::QB => &self.qb,
            Direction::BQ => &self.bq,
        }
    }

    pub fn model_mut(&mut self, dir: Direction) -> &mut ModelParams {
        match dir {
            Direction::AQ => &mut self.aq,
            Direction::QA => &mut self.qa,
            Direction::AB => &mut self.ab,
            Direction::BA => &mut self.ba,
            Direction::QB => &mut self.qb,
            Direction::BQ => &mut self.bq,
        }
    }
}

/// Tape handles of one registered model, mirroring [`ModelParams`].
pub struct ModelNodes {
    pub emb: NodeId,
    pub enc: Vec<EncLayerNodes>,
    pub dec: Vec<DecLayerNodes>,
    pub w_out: NodeId,
}

pub struct AttnNodes {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: NodeId,
}

pub struct EncLayerNodes {
    pub attn: AttnNodes,
    pub ln_attn: (NodeId, NodeId),
    pub ffn: FfnNodes,
    pub ln_ffn: (NodeId, NodeId),
}

pub struct DecLayerNodes {
    pub self_attn: AttnNodes,
    pub ln_self: (NodeId, NodeId),
    pub cross_attn: AttnNodes,
    pub ln_cross: (NodeId, NodeId),
    pub ffn: FfnNodes,
    pub ln_ffn: (NodeId, NodeId),
}

pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

fn register_attn(tape: &mut Tape, attn: &AttnParams) -> AttnNodes {
    AttnNodes {
        wq: attn.wq.iter().map(|m| tape.leaf(m.clone())).collect(),
        wk: attn.wk.iter().map(|m| tape.leaf(m.clone())).collect(),
        wv: attn.wv.iter().map(|m| tape.leaf(m.clone())).collect(),
        wo: tape.leaf(attn.wo.clone()),
    }
}

fn register_ffn(tape: &mut Tape, ffn: &FfnParams) -> FfnNodes {
    FfnNodes {
        w1: tape.leaf(ffn.w1.clone()),
        b1: tape.leaf(ffn.b1.clone()),
        w2: tape.leaf(ffn.w2.clone()),
        b2: tape.leaf(ffn.b2.clone()),
    }
}

fn register_ln(tape: &mut Tape, ln: &LayerNormParams) -> (NodeId, NodeId) {
    (tape.leaf(ln.gain.clone()), tape.leaf(ln.bias.clone()))
}

/// Registers every parameter of `params` as tape leaves, in
/// [`ModelParams::named_params`] order.
pub fn register_model(tape: &mut Tape, params: &ModelParams) -> ModelNodes {
    ModelNodes {
        emb: tape.leaf(params.emb.clone()),
        enc: params
            .enc
            .iter()
            .map(|l| EncLayerNodes {
                attn: register_attn(tape, &l.attn),
                ln_attn: register_ln(tape, &l.ln_attn),
                ffn: register_ffn(tape, &l.ffn),
                ln_ffn: register_ln(tape, &l.ln_ffn),
            })
            .collect(),
        dec: params
            .dec
            .iter()
            .map(|l| DecLayerNodes {
                self_attn: register_attn(tape, &l.self_attn),
                ln_self: register_ln(tape, &l.ln_self),
                cross_attn: register_attn(tape, &l.cross_attn),
                ln_cross: register_ln(tape, &l.ln_cross),
                ffn: register_ffn(tape, &l.ffn),
                ln_ffn: register_ln(tape, &l.ln_ffn),
            })
            .collect(),
        w_out: tape.leaf(params.w_out.clone()),
    }
}

impl ModelNodes {
    /// Node handles in exactly the [`ModelParams::named_params`] order.
    pub fn node_list(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        out.push(self.emb);
        let push_attn = |out: &mut Vec<NodeId>, a: &AttnNodes| {
            out.extend(a.wq.iter().copied());
            out.extend(a.wk.iter().copied());
            out.extend(a.wv.iter().copied());
            out.push(a.wo);
        };
        let push_ffn = |out: &mut Vec<NodeId>, f: &FfnNodes| {
            out.push(f.w1);
            out.push(f.b1);
            out.push(f.w2);
            out.push(f.b2);
        };
        for l in &self.enc {
            push_attn(&mut out, &l.attn);
            out.push(l.ln_attn.0);
            out.push(l.ln_attn.1);
            push_ffn(&mut out, &l.ffn);
            out.push(l.ln_ffn.0);
            out.push(l.ln_ffn.1);
        }
        for l in &self.dec {
            push_attn(&mut out, &l.self_attn);
            out.push(l.ln_self.0);
            out.push(l.ln_self.1);
            push_attn(&mut out, &l.cross_attn);
            out.push(l.ln_cross.0);
            out.push(l.ln_cross.1);
            push_ffn(&mut out, &l.ffn);
            out.push(l.ln_ffn.0);
            out.push(l.ln_ffn.1);
        }
        out.push(self.w_out);
        out
    }
}

/// Sinusoidal positional encodings for positions 0..n.
pub fn positional_encoding(n: usize, d_model: usize) -> Mat {
    let mut pe = Mat::zeros(n, d_model);
    for pos in 0..n {
        for k in 0..d_model.div_ceil(2) {
            let rate = num::powf(10_000.0, -(2.0 * k as f64) / d_model as f64);
            let angle = pos as f64 * rate;
            pe.set(pos, 2 * k, num::sin(angle));
            if 2 * k + 1 < d_model {
                pe.set(pos, 2 * k + 1, num::cos(angle));
            }
        }
    }
    pe
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat, d_k: usize) -> Result<Mat> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch("attention query/key widths"));
    }
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch("attention key/value row counts"));
    }
    if d_k == 0 {
        return Err(Error::InvalidConfig("d_k must be >= 1"));
    }
    let mut scores = q.matmul_t(k)?;
    scores.scale_assign(1.0 / num::sqrt(d_k as f64));
    for r in 0..scores.rows() {
        softmax_in_place(scores.row_mut(r));
    }
    scores.matmul(v)
}

/// Multi-head attention: per-head scaled dot-product attention over
/// projected inputs, concatenated and projected once more.
pub fn multi_head_attention(q: &Mat, k: &Mat, v: &Mat, params: &AttnParams) -> Result<Mat> {
    if params.wq.is_empty() || params.wq.len() != params.wk.len() || params.wk.len() != params.wv.len() {
        return Err(Error::ShapeMismatch("attention head counts"));
    }
    let d_k = params.wq[0].cols();
    let mut heads = Vec::with_capacity(params.wq.len());
    for h in 0..params.wq.len() {
        let qh = q.matmul(&params.wq[h])?;
        let kh = k.matmul(&params.wk[h])?;
        let vh = v.matmul(&params.wv[h])?;
        heads.push(scaled_dot_attention(&qh, &kh, &vh, d_k)?);
    }
    let rows = heads[0].rows();
    let total_cols: usize = heads.iter().map(|h| h.cols()).sum();
    let mut cat = Mat::zeros(rows, total_cols);
    let mut at = 0;
    for h in &heads {
        for r in 0..rows {
            cat.row_mut(r)[at..at + h.cols()].copy_from_slice(h.row(r));
        }
        at += h.cols();
    }
    cat.matmul(&params.wo)
}

fn causal_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for r in 0..n {
        for c in (r + 1)..n {
            m.set(r, c, ATTN_MASK);
        }
    }
    m
}

fn mha_nodes(
    tape: &mut Tape,
    x_q: NodeId,
    x_kv: NodeId,
    attn: &AttnNodes,
    d_k: usize,
    causal: bool,
) -> Result<NodeId> {
    let scale = 1.0 / num::sqrt(d_k as f64);
    let mask = if causal {
        let n = tape.value(x_q).rows();
        Some(tape.leaf(causal_mask(n)))
    } else {
        None
    };
    let mut heads = Vec::with_capacity(attn.wq.len());
    for h in 0..attn.wq.len() {
        let qh = tape.matmul(x_q, attn.wq[h])?;
        let kh = tape.matmul(x_kv, attn.wk[h])?;
        let vh = tape.matmul(x_kv, attn.wv[h])?;
        let scores = tape.matmul_t(qh, kh)?;
        let mut scaled = tape.scale(scores, scale);
        if let Some(m) = mask {
            scaled = tape.add(scaled, m)?;
        }
        let weights = tape.softmax_rows(scaled);
        heads.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, attn.wo)
}

fn ffn_nodes_forward(tape: &mut Tape, x: NodeId, ffn: &FfnNodes) -> Result<NodeId> {
    let h = tape.matmul(x, ffn.w1)?;
    let h = tape.add_row(h, ffn.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, ffn.w2)?;
    tape.add_row(o, ffn.b2)
}

/// Embeds token ids: lookup, scale by sqrt(d_model), add positions.
fn embed_ids(tape: &mut Tape, cfg: &ModelConfig, model: &ModelNodes, ids: &[TokenId]) -> Result<NodeId> {
    let rows = tape.gather_rows(model.emb, ids)?;
    embed_rows(tape, cfg, rows)
}

/// Treats caller-provided dense rows exactly like looked-up embeddings.
fn embed_rows(tape: &mut Tape, cfg: &ModelConfig, rows: NodeId) -> Result<NodeId> {
    let n = tape.value(rows).rows();
    if tape.value(rows).cols() != cfg.d_model {
        return Err(Error::ShapeMismatch("embedding rows width"));
    }
    if n > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max_len: cfg.max_len,
        });
    }
    let scaled = tape.scale(rows, num::sqrt(cfg.d_model as f64));
    let pe = tape.leaf(positional_encoding(n, cfg.d_model));
    tape.add(scaled, pe)
}

fn encoder_nodes(tape: &mut Tape, cfg: &ModelConfig, model: &ModelNodes, input: NodeId) -> Result<NodeId> {
    let mut x = input;
    for layer in &model.enc {
        let a = mha_nodes(tape, x, x, &layer.attn, cfg.d_k(), false)?;
        let res = tape.add(x, a)?;
        x = tape.layer_norm(res, layer.ln_attn.0, layer.ln_attn.1)?;
        let f = ffn_nodes_forward(tape, x, &layer.ffn)?;
        let res = tape.add(x, f)?;
        x = tape.layer_norm(res, layer.ln_ffn.0, layer.ln_ffn.1)?;
    }
    Ok(x)
}

fn decoder_nodes(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    enc_out: NodeId,
    dec_input: NodeId,
) -> Result<NodeId> {
    let mut y = dec_input;
    for layer in &model.dec {
        let a = mha_nodes(tape, y, y, &layer.self_attn, cfg.d_k(), true)?;
        let res = tape.add(y, a)?;
        y = tape.layer_norm(res, layer.ln_self.0, layer.ln_self.1)?;
        let c = mha_nodes(tape, y, enc_out, &layer.cross_attn, cfg.d_k(), false)?;
        let res = tape.add(y, c)?;
        y = tape.layer_norm(res, layer.ln_cross.0, layer.ln_cross.1)?;
        let f = ffn_nodes_forward(tape, y, &layer.ffn)?;
        let res = tape.add(y, f)?;
        y = tape.layer_norm(res, layer.ln_ffn.0, layer.ln_ffn.1)?;
    }
    Ok(y)
}

/// Decoder forward over raw embedding-space rows (scaled and positioned
/// inside, like a token lookup). Used by the expected-embedding bridge to
/// feed soft rows back autoregressively.
pub(crate) fn decode_from_rows_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    enc_out: NodeId,
    dec_raw_rows: NodeId,
) -> Result<NodeId> {
    let dec_in = embed_rows(tape, cfg, dec_raw_rows)?;
    decoder_nodes(tape, cfg, model, enc_out, dec_in)
}

/// Decoder forward over token ids; returns the feature sequence.
pub(crate) fn decode_from_ids_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    enc_out: NodeId,
    dec_ids: &[TokenId],
) -> Result<NodeId> {
    let dec_in = embed_ids(tape, cfg, model, dec_ids)?;
    decoder_nodes(tape, cfg, model, enc_out, dec_in)
}

/// Encoder forward from token ids; returns the feature-sequence node.
pub fn encode_ids_node(tape: &mut Tape, cfg: &ModelConfig, model: &ModelNodes, src: &[TokenId]) -> Result<NodeId> {
    if src.is_empty() {
        return Err(Error::EmptySequence("encoder source"));
    }
    let input = embed_ids(tape, cfg, model, src)?;
    encoder_nodes(tape, cfg, model, input)
}

/// Encoder forward from dense embedding rows.
pub fn encode_rows_node(tape: &mut Tape, cfg: &ModelConfig, model: &ModelNodes, rows: NodeId) -> Result<NodeId> {
    if tape.value(rows).rows() == 0 {
        return Err(Error::EmptySequence("encoder source rows"));
    }
    let input = embed_rows(tape, cfg, rows)?;
    encoder_nodes(tape, cfg, model, input)
}

/// Log-softmax rows of next-token logits for a teacher-forced target.
/// Row `j` is the distribution over token `j` of `tgt` given `tgt[..j]`.
fn target_log_dists(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    enc_out: NodeId,
    tgt: &[TokenId],
) -> Result<NodeId> {
    if tgt.is_empty() {
        return Err(Error::EmptySequence("target"));
    }
    let mut dec_ids = Vec::with_capacity(tgt.len());
    dec_ids.push(BOS);
    dec_ids.extend_from_slice(&tgt[..tgt.len() - 1]);
    let dec_in = embed_ids(tape, cfg, model, &dec_ids)?;
    let dec_out = decoder_nodes(tape, cfg, model, enc_out, dec_in)?;
    let logits = tape.matmul(dec_out, model.w_out)?;
    Ok(tape.log_softmax_rows(logits))
}

/// Teacher-forced log-probability of exactly the given target tokens.
///
/// The decoder input is the BOS-shifted target; every token of `tgt` is
/// scored, so callers that want termination mass must append EOS
/// themselves. The returned node is a 1 x 1 scalar <= 0.
pub fn sequence_logprob_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    src: &[TokenId],
    tgt: &[TokenId],
) -> Result<NodeId> {
    let enc_out = encode_ids_node(tape, cfg, model, src)?;
    sequence_logprob_given_enc(tape, cfg, model, enc_out, tgt)
}

/// As [`sequence_logprob_node`] with a pre-computed encoder output node.
pub fn sequence_logprob_given_enc(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    enc_out: NodeId,
    tgt: &[TokenId],
) -> Result<NodeId> {
    let log_dists = target_log_dists(tape, cfg, model, enc_out, tgt)?;
    let picks: Vec<(usize, usize)> = tgt.iter().copied().enumerate().collect();
    for &(_, id) in &picks {
        if id >= cfg.vocab_size {
            return Err(Error::TokenIdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    tape.pick_sum(log_dists, &picks)
}

/// Convenience wrapper: builds a throwaway tape and returns the value.
pub fn sequence_logprob(cfg: &ModelConfig, params: &ModelParams, src: &[TokenId], tgt: &[TokenId]) -> Result<f64> {
    let mut tape = Tape::new();
    let model = register_model(&mut tape, params);
    let lp = sequence_logprob_node(&mut tape, cfg, &model, src, tgt)?;
    Ok(tape.scalar_value(lp))
}

/// Teacher-forced log-probability with the encoder's embedding lookup
/// replaced by caller-provided dense rows (`src_rows`, one per source
/// position). Identical to [`sequence_logprob_node`] when the rows are the
/// model's own embedding rows, and differentiable with respect to them.
pub fn forward_from_embeddings_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    model: &ModelNodes,
    src_rows: NodeId,
    tgt: &[TokenId],
) -> Result<NodeId> {
    let enc_out = encode_rows_node(tape, cfg, model, src_rows)?;
    sequence_logprob_given_enc(tape, cfg, model, enc_out, tgt)
}

pub fn forward_from_embeddings(
    cfg: &ModelConfig,
    params: &ModelParams,
    src_rows: &Mat,
    tgt: &[TokenId],
) -> Result<f64> {
    let mut tape = Tape::new();
    let model = register_model(&mut tape, params);
    let rows = tape.leaf(src_rows.clone());
    let lp = forward_from_embeddings_node(&mut tape, cfg, &model, rows, tgt)?;
    Ok(tape.scalar_value(lp))
}

/// A cached encoder output for repeated decoding against one source.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub out: Mat,
}

pub fn encode_source(cfg: &ModelConfig, params: &ModelParams, src: &[TokenId]) -> Result<Encoded> {
    let mut tape = Tape::new();
    let model = register_model(&mut tape, params);
    let enc = encode_ids_node(&mut tape, cfg, &model, src)?;
    Ok(Encoded {
        out: tape.value(enc).clone(),
    })
}

/// Next-token distribution given a cached encoder output and a generated
/// prefix (without BOS). Sums to 1 within 1e-6; every entry positive for
/// finite parameters.
pub fn next_dist_with_encoded(
    cfg: &ModelConfig,
    params: &ModelParams,
    enc: &Encoded,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    if prefix.len() + 1 > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: prefix.len() + 1,
            max_len: cfg.max_len,
        });
    }
    let mut tape = Tape::new();
    let model = register_model(&mut tape, params);
    let enc_out = tape.leaf(enc.out.clone());
    let mut dec_ids = Vec::with_capacity(prefix.len() + 1);
    dec_ids.push(BOS);
    dec_ids.extend_from_slice(prefix);
    let dec_in = embed_ids(&mut tape, cfg, &model, &dec_ids)?;
    let dec_out = decoder_nodes(&mut tape, cfg, &model, enc_out, dec_in)?;
    let last = tape.slice_rows(dec_out, dec_ids.len() - 1, 1)?;
    let logits = tape.matmul(last, model.w_out)?;
    let dist = tape.softmax_rows(logits);
    Ok(tape.value(dist).row(0).to_vec())
}

/// Distribution over the next token after `prefix`, decoding from `src`.
pub fn next_token_dist(
    cfg: &ModelConfig,
    params: &ModelParams,
    src: &[TokenId],
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    let enc = encode_source(cfg, params, src)?;
    next_dist_with_encoded(cfg, params, &enc, prefix)
}

/// Test-only oracle: a from-scratch naive forward pass with plain matrix
/// loops and no tape, shared by the test modules that need an independent
/// reference for the transformer computation.
#[cfg(test)]
pub(crate) mod testkit {
    use super::*;

    pub(crate) fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            max_len: 16,
            vocab_size,
        }
    }

    pub(crate) fn tiny_model(seed: u64, vocab_size: usize) -> (ModelConfig, ModelParams) {
        let cfg = tiny_config(vocab_size);
        let mut rng = Rng::new(seed);
        (cfg.clone(), ModelParams::init(&cfg, &mut rng))
    }

    pub(crate) fn naive_softmax(row: &[f64]) -> Vec<f64> {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub(crate) fn naive_attention(q: &Mat, k: &Mat, v: &Mat, d_k: usize, causal: bool) -> Mat {
        let mut out = Mat::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let mut scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(k.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (d_k as f64).sqrt()
                })
                .collect();
            if causal {
                for (j, s) in scores.iter_mut().enumerate() {
                    if j > i {
                        *s = ATTN_MASK;
                    }
                }
            }
            let w = naive_softmax(&scores);
            for (j, &wj) in w.iter().enumerate() {
                for c in 0..v.cols() {
                    let cur = out.get(i, c);
                    out.set(i, c, cur + wj * v.get(j, c));
                }
            }
        }
        out
    }

    pub(crate) fn naive_mha(x_q: &Mat, x_k: &Mat, x_v: &Mat, p: &AttnParams, d_k: usize, causal: bool) -> Mat {
        let mut heads = Vec::new();
        for h in 0..p.wq.len() {
            let q = x_q.matmul(&p.wq[h]).unwrap();
            let k = x_k.matmul(&p.wk[h]).unwrap();
            let v = x_v.matmul(&p.wv[h]).unwrap();
            heads.push(naive_attention(&q, &k, &v, d_k, causal));
        }
        let rows = heads[0].rows();
        let mut cat = Mat::zeros(rows, heads.iter().map(|h| h.cols()).sum());
        let mut at = 0;
        for h in &heads {
            for r in 0..rows {
                cat.row_mut(r)[at..at + h.cols()].copy_from_slice(h.row(r));
            }
            at += h.cols();
        }
        cat.matmul(&p.wo).unwrap()
    }

    pub(crate) fn naive_ln(x: &Mat, ln: &LayerNormParams) -> Mat {
        let mut out = x.clone();
        for r in 0..x.rows() {
            let m = x.cols() as f64;
            let mean = x.row(r).iter().sum::<f64>() / m;
            let var = x.row(r).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for c in 0..x.cols() {
                out.set(r, c, (x.get(r, c) - mean) * rstd * ln.gain.get(0, c) + ln.bias.get(0, c));
            }
        }
        out
    }

    pub(crate) fn naive_ffn(x: &Mat, f: &FfnParams) -> Mat {
        let mut h = x.matmul(&f.w1).unwrap();
        for r in 0..h.rows() {
            for (c, v) in h.row_mut(r).iter_mut().enumerate() {
                *v = (*v + f.b1.get(0, c)).max(0.0);
            }
        }
        let mut o = h.matmul(&f.w2).unwrap();
        for r in 0..o.rows() {
            for (c, v) in o.row_mut(r).iter_mut().enumerate() {
                *v += f.b2.get(0, c);
            }
        }
        o
    }

    pub(crate) fn naive_embed(cfg: &ModelConfig, emb: &Mat, ids: &[TokenId]) -> Mat {
        let pe = positional_encoding(ids.len(), cfg.d_model);
        let mut x = Mat::zeros(ids.len(), cfg.d_model);
        for (r, &id) in ids.iter().enumerate() {
            for c in 0..cfg.d_model {
                x.set(r, c, emb.get(id, c) * (cfg.d_model as f64).sqrt() + pe.get(r, c));
            }
        }
        x
    }

    pub(crate) fn naive_encode(cfg: &ModelConfig, p: &ModelParams, src: &[TokenId]) -> Mat {
        let mut x = naive_embed(cfg, &p.emb, src);
        for l in &p.enc {
            let mut a = naive_mha(&x, &x, &x, &l.attn, cfg.d_k(), false);
            a.add_assign(&x);
            x = naive_ln(&a, &l.ln_attn);
            let mut f = naive_ffn(&x, &l.ffn);
            f.add_assign(&x);
            x = naive_ln(&f, &l.ln_ffn);
        }
        x
    }

    /// Per-step next-token distributions for the whole target, computed
    /// with plain matrix code and no tape.
    pub(crate) fn naive_step_dists(cfg: &ModelConfig, p: &ModelParams, src: &[TokenId], tgt: &[TokenId]) -> Vec<Vec<f64>> {
        let enc = naive_encode(cfg, p, src);
        let mut dec_ids = vec![BOS];
        dec_ids.extend_from_slice(&tgt[..tgt.len() - 1]);
        let mut y = naive_embed(cfg, &p.emb, &dec_ids);
        for l in &p.dec {
            let mut a = naive_mha(&y, &y, &y, &l.self_attn, cfg.d_k(), true);
            a.add_assign(&y);
            y = naive_ln(&a, &l.ln_self);
            let mut c = naive_mha(&y, &enc, &enc, &l.cross_attn, cfg.d_k(), false);
            c.add_assign(&y);
            y = naive_ln(&c, &l.ln_cross);
            let mut f = naive_ffn(&y, &l.ffn);
            f.add_assign(&y);
            y = naive_ln(&f, &l.ln_ffn);
        }
        let logits = y.matmul(&p.w_out).unwrap();
        (0..logits.rows()).map(|r| naive_softmax(logits.row(r))).collect()
    }

    fn naive_embed_rows(cfg: &ModelConfig, raw: &Mat) -> Mat {
        let pe = positional_encoding(raw.rows(), cfg.d_model);
        let mut x = raw.scaled((cfg.d_model as f64).sqrt());
        x.add_assign(&pe);
        x
    }

    fn naive_decode_features(cfg: &ModelConfig, p: &ModelParams, enc: &Mat, dec_in: &Mat) -> Mat {
        let mut y = dec_in.clone();
        for l in &p.dec {
            let mut a = naive_mha(&y, &y, &y, &l.self_attn, cfg.d_k(), true);
            a.add_assign(&y);
            y = naive_ln(&a, &l.ln_self);
            let mut c = naive_mha(&y, enc, enc, &l.cross_attn, cfg.d_k(), false);
            c.add_assign(&y);
            y = naive_ln(&c, &l.ln_cross);
            let mut f = naive_ffn(&y, &l.ffn);
            f.add_assign(&y);
            y = naive_ln(&f, &l.ln_ffn);
        }
        y
    }

    /// Naive soft-greedy decoding: at each step the next-token distribution
    /// weights every embedding row (an explicit double loop), the source
    /// model's own rows feed back into its decoder, and the downstream
    /// model's rows form the output bridge sequence.
    pub(crate) fn naive_soft_greedy_bridge(
        cfg: &ModelConfig,
        p_src: &ModelParams,
        emb_dst: &Mat,
        src: &[TokenId],
        t_b: usize,
    ) -> Mat {
        let enc = naive_encode(cfg, p_src, src);
        let mut feedback: Vec<Vec<f64>> = vec![p_src.emb.row(BOS).to_vec()];
        let mut out = Mat::zeros(t_b, cfg.d_model);
        for j in 0..t_b {
            let raw = Mat::from_rows(&feedback.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
            let dec_in = naive_embed_rows(cfg, &raw);
            let y = naive_decode_features(cfg, p_src, &enc, &dec_in);
            let logits = y.matmul(&p_src.w_out).unwrap();
            let dist = naive_softmax(logits.row(j));
            let mut fb = vec![0.0; cfg.d_model];
            for (w, &pw) in dist.iter().enumerate() {
                for (c, slot) in fb.iter_mut().enumerate() {
                    *slot += pw * p_src.emb.get(w, c);
                    let cur = out.get(j, c);
                    out.set(j, c, cur + pw * emb_dst.get(w, c));
                }
            }
            feedback.push(fb);
        }
        out
    }
}
