//! Pipeline subcommands. Every command writes its artifacts into the
//! configured output directory plus a manifest with the resolved config,
//! the seed, and a hash per artifact, so a run can be reproduced exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trident_core::corpus::{self, Dataset, Split};
use trident_core::decoding::{decode, DecodeConfig};
use trident_core::metrics::{aggregate_metrics, EvalItem, MetricsReport, DEFAULT_MAX_ORDER};
use trident_core::model::{Direction, ModelBundle, ModelConfig, ModelParams};
use trident_core::rng;
use trident_core::training::{self, IdPair, TriData};
use trident_core::vocab::Vocab;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::files;

/// Maps items in parallel, preserving order. Results are deterministic
/// because every worker only reads shared state.
pub(crate) fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<R>> = Vec::with_capacity(items.len());
    out.resize_with(items.len(), || None);
    let slots: Vec<(usize, &[T])> = items.chunks(chunk).enumerate().collect();
    let fref = &f;
    let results: Vec<(usize, Vec<R>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = slots
            .into_iter()
            .map(|(i, part)| scope.spawn(move || (i, part.iter().map(fref).collect::<Vec<R>>())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, part) in results {
        for (j, r) in part.into_iter().enumerate() {
            out[i * chunk + j] = Some(r);
        }
    }
    out.into_iter().map(|r| r.expect("slot filled")).collect()
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Generates the synthetic corpus, splits it, and persists the nine pair
/// TSVs, the topic lexicon, and the resolved generator spec.
pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let corpus = corpus::generate_corpus(&cfg.gen)?;
    let corpus = corpus::split_corpus(corpus, cfg.split.valid_n, cfg.split.test_n, cfg.split_seed())?;

    let mut artifacts = files::write_corpus(&out, &corpus)?;
    let lexicon_path = out.join("topics.json");
    files::write_lexicon(&lexicon_path, &corpus::topic_lexicon(&cfg.gen))?;
    artifacts.push(lexicon_path);
    let spec_path = out.join("genspec.json");
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(&cfg.gen).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    artifacts.push(spec_path);
    files::write_manifest(&out, "gen-data", cfg, &artifacts)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Builds the vocabulary, trains both phases, and writes the per-phase
/// checkpoints plus the loss history CSV.
pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let corpus = files::read_corpus(&out)?;
    let vocab = Vocab::build_with_merges(&corpus, cfg.vocab.min_freq, cfg.vocab.merges)?;
    let vocab_path = out.join("vocab.txt");
    files::write_vocab(&vocab_path, &vocab)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size();
    model_cfg.validate()?;

    let data = training::encode_corpus(&corpus, &vocab);
    let mut bundle = ModelBundle::init(model_cfg.clone(), cfg.init_seed())?;

    let mut history = training::run_phase1(&model_cfg, &cfg.train, &mut bundle, &data)?;
    let phase1_path = out.join("phase1.ckpt");
    files::write_checkpoint(&phase1_path, &bundle, &[Direction::AQ, Direction::QA])?;

    history.extend(training::run_phase2(&model_cfg, &cfg.train, &mut bundle, &data)?);
    let phase2_path = out.join("phase2.ckpt");
    files::write_checkpoint(&phase2_path, &bundle, &Direction::ALL)?;

    let loss_path = out.join("loss.csv");
    files::write_loss_csv(&loss_path, &history)?;

    files::write_manifest(
        &out,
        "train",
        cfg,
        &[vocab_path, phase1_path, phase2_path, loss_path],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// One decoded source with its ranked candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub source: String,
    /// (score, candidate tokens), best first.
    pub candidates: Vec<(f64, Vec<String>)>,
}

pub fn candidates_file_name(direction: Direction) -> String {
    format!("candidates.{}.tsv", direction.name())
}

pub fn write_candidates(path: &Path, groups: &[CandidateGroup]) -> Result<(), CliError> {
    let mut out = String::new();
    for group in groups {
        for (rank, (score, tokens)) in group.candidates.iter().enumerate() {
            out.push_str(&group.source);
            out.push('\t');
            out.push_str(&rank.to_string());
            out.push('\t');
            out.push_str(&format!("{score:.6}"));
            out.push('\t');
            out.push_str(&tokens.join(" "));
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateGroup>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut groups: Vec<CandidateGroup> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CliError::MissingArtifact(format!(
                "{} line {}: expected 4 fields",
                path.display(),
                lineno + 1
            )));
        }
        let rank: usize = fields[1].parse().map_err(|_| {
            CliError::MissingArtifact(format!("{} line {}: bad rank", path.display(), lineno + 1))
        })?;
        let score: f64 = fields[2].parse().map_err(|_| {
            CliError::MissingArtifact(format!("{} line {}: bad score", path.display(), lineno + 1))
        })?;
        let tokens: Vec<String> = fields[3].split_whitespace().map(str::to_string).collect();
        if rank == 0 {
            groups.push(CandidateGroup {
                source: fields[0].to_string(),
                candidates: Vec::new(),
            });
        }
        let Some(group) = groups.last_mut() else {
            return Err(CliError::MissingArtifact(format!(
                "{} line {}: rank {} before any rank-0 row",
                path.display(),
                lineno + 1,
                rank
            )));
        };
        group.candidates.push((score, tokens));
    }
    Ok(groups)
}

/// Decodes candidates for every source (in parallel) and returns them as
/// string groups.
pub fn decode_sources(
    model_cfg: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocab,
    sources: &[Vec<String>],
    dc: &DecodeConfig,
) -> Result<Vec<CandidateGroup>, CliError> {
    let results = parallel_map(sources, |tokens| -> Result<CandidateGroup, CliError> {
        let ids = vocab.encode(tokens);
        let outcome = decode(model_cfg, params, &ids, dc)?;
        let mut candidates = Vec::with_capacity(outcome.hyps.len());
        for hyp in &outcome.hyps {
            candidates.push((hyp.score, vocab.decode(hyp.content())?));
        }
        Ok(CandidateGroup {
            source: tokens.join(" "),
            candidates,
        })
    });
    results.into_iter().collect()
}

fn load_sources(cfg: &RunConfig, out: &Path, direction: Direction) -> Result<Vec<Vec<String>>, CliError> {
    let path = match &cfg.decode.source_file {
        Some(p) => PathBuf::from(p),
        None => out.join(files::pair_file_name(
            match direction {
                Direction::AB => Dataset::AB,
                _ => Dataset::QB,
            },
            Split::Test,
        )),
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut sources = Vec::new();
    for line in text.lines() {
        let first_field = line.split('\t').next().unwrap_or("");
        let tokens: Vec<String> = first_field.split_whitespace().map(str::to_string).collect();
        if !tokens.is_empty() {
            sources.push(tokens);
        }
    }
    if let Some(cap) = cfg.decode.max_sources {
        sources.truncate(cap);
    }
    Ok(sources)
}

/// Retrieval baseline: index the direction's training pairs and rank the
/// bidwords of the most similar sources. Returns the candidate groups and
/// persists the index in the container format.
fn baseline_candidates(
    cfg: &RunConfig,
    out: &Path,
    direction: Direction,
    mode: trident_core::baselines::VectorizerMode,
    sources: &[Vec<String>],
) -> Result<Vec<CandidateGroup>, CliError> {
    let corpus = files::read_corpus(out)?;
    let ds = match direction {
        Direction::AB => Dataset::AB,
        _ => Dataset::QB,
    };
    let entries: Vec<(Vec<String>, Vec<String>)> = corpus
        .split_pairs(ds, Split::Train)
        .into_iter()
        .map(|p| (p.src.clone(), p.dst.clone()))
        .collect();
    let embeddings = if mode == trident_core::baselines::VectorizerMode::TfIdf {
        None
    } else {
        let docs: Vec<Vec<String>> = corpus.train_token_streams().cloned().collect();
        Some(trident_core::baselines::ppmi_embeddings(
            &docs,
            3,
            32,
            rng::derive(cfg.seed, "ppmi"),
        )?)
    };
    let index = trident_core::baselines::build_index(&entries, mode, embeddings)?;
    files::write_match_index(&out.join(format!("match_index.{}.idx", mode.name())), &index)?;

    let groups = parallel_map(sources, |tokens| {
        let outcome = index
            .match_top_k(tokens, cfg.decode.settings.beam)
            .expect("top_k validated");
        let candidates = if outcome.zero_input {
            // keep one empty row so candidate groups stay aligned with
            // the source file
            vec![(0.0, Vec::new())]
        } else {
            outcome.ranked.into_iter().map(|(b, sim)| (sim, b)).collect()
        };
        CandidateGroup {
            source: tokens.join(" "),
            candidates,
        }
    });
    Ok(groups)
}

/// Decodes (or retrieves, for the baseline methods) bidword candidates for
/// the configured direction's source file.
pub fn generate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    let direction = cfg.decode.direction()?;
    let sources = load_sources(cfg, &out, direction)?;
    let groups = match cfg.decode.method()? {
        Some(mode) => baseline_candidates(cfg, &out, direction, mode, &sources)?,
        None => {
            let vocab = files::read_vocab(&out.join("vocab.txt"))?;
            let bundle = files::read_bundle(&out.join("phase2.ckpt"))?;
            if bundle.config.vocab_size != vocab.size() {
                return Err(CliError::MissingArtifact(format!(
                    "checkpoint vocab size {} does not match vocab.txt ({})",
                    bundle.config.vocab_size,
                    vocab.size()
                )));
            }
            decode_sources(
                &bundle.config,
                bundle.model(direction),
                &vocab,
                &sources,
                &cfg.decode.settings,
            )?
        }
    };
    let path = out.join(candidates_file_name(direction));
    write_candidates(&path, &groups)?;
    files::write_manifest(&out, "generate", cfg, std::slice::from_ref(&path))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Builds evaluation items by aligning candidate groups with test pairs.
fn align_items(
    groups: &[CandidateGroup],
    test_pairs: &[corpus::TriPair],
    exclude_noisy_refs: bool,
    max_items: Option<usize>,
) -> Result<Vec<EvalItem>, CliError> {
    let n = groups.len().min(test_pairs.len());
    let n = max_items.map_or(n, |cap| n.min(cap));
    let mut items = Vec::with_capacity(n);
    for (group, pair) in groups.iter().zip(test_pairs).take(n) {
        let source = pair.src.join(" ");
        if group.source != source {
            return Err(CliError::MissingArtifact(format!(
                "candidate file does not align with the test TSV: {:?} vs {:?}",
                group.source, source
            )));
        }
        items.push(EvalItem {
            candidates: group.candidates.iter().map(|(_, t)| t.clone()).collect(),
            gold: vec![pair.dst.clone()],
            topic: pair.topic,
            use_refs: !(pair.noisy && exclude_noisy_refs),
        });
    }
    Ok(items)
}

/// Scores a candidate file against the direction's test split and writes
/// the metrics report.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let out = cfg.out_dir();
    let direction = cfg.decode.direction()?;
    let lexicon = files::read_lexicon(&out.join("topics.json"))?;
    let groups = read_candidates(&out.join(candidates_file_name(direction)))?;
    let test_pairs = files::read_pairs_tsv(&out.join(files::pair_file_name(
        match direction {
            Direction::AB => Dataset::AB,
            _ => Dataset::QB,
        },
        Split::Test,
    )))?;
    let items = align_items(&groups, &test_pairs, cfg.eval.exclude_noisy_refs, cfg.eval.max_items)?;
    let report = aggregate_metrics(&items, &lexicon, cfg.eval.top_k_prf, DEFAULT_MAX_ORDER)?;
    let stem = format!("metrics.{}", direction.name());
    let artifacts = files::write_metrics(&out, &stem, &report)?;
    files::write_manifest(&out, "evaluate", cfg, &artifacts)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// shared in-memory evaluation (sweep / ablation / tests)
// ---------------------------------------------------------------------------

/// Decodes a direction's test pairs and assembles evaluation items without
/// touching the filesystem.
#[allow(clippy::too_many_arguments)]
pub fn eval_items_in_memory(
    model_cfg: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocab,
    test_pairs: &[IdPair],
    dc: &DecodeConfig,
    max_sources: usize,
    exclude_noisy_refs: bool,
) -> Result<Vec<EvalItem>, CliError> {
    let capped = &test_pairs[..test_pairs.len().min(max_sources)];
    let results = parallel_map(capped, |pair| -> Result<EvalItem, CliError> {
        let outcome = decode(model_cfg, params, &pair.src, dc)?;
        let mut candidates = Vec::with_capacity(outcome.hyps.len());
        for hyp in &outcome.hyps {
            candidates.push(vocab.decode(hyp.content())?);
        }
        Ok(EvalItem {
            candidates,
            gold: vec![vocab.decode(&pair.dst)?],
            topic: pair.topic,
            use_refs: !(pair.noisy && exclude_noisy_refs),
        })
    });
    results.into_iter().collect()
}

/// Decodes and scores one direction of a trained bundle.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_direction(
    bundle: &ModelBundle,
    vocab: &Vocab,
    data: &TriData,
    direction: Direction,
    dc: &DecodeConfig,
    lexicon: &corpus::TopicLexicon,
    max_sources: usize,
    eval_cfg: &crate::config::EvalConfig,
) -> Result<MetricsReport, CliError> {
    let test_pairs = match direction {
        Direction::AB => &data.ab.test,
        _ => &data.qb.test,
    };
    let items = eval_items_in_memory(
        &bundle.config,
        bundle.model(direction),
        vocab,
        test_pairs,
        dc,
        max_sources,
        eval_cfg.exclude_noisy_refs,
    )?;
    aggregate_metrics(&items, lexicon, eval_cfg.top_k_prf, DEFAULT_MAX_ORDER).map_err(CliError::Core)
}

// ---------------------------------------------------------------------------
// sweep-aq-size
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub direction: String,
    pub report: MetricsReport,
}

/// Subsamples the ad/query training pairs to `fraction`, nested across
/// fractions for one seed (a seed's 25% set is a subset of its 50% set).
pub fn subsample_aq(data: &TriData, fraction: f64, seed: u64) -> TriData {
    let mut out = data.clone();
    let n = data.aq.train.len();
    let keep = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = trident_core::rng::Rng::substream(seed, "sweep.subsample");
    rng.shuffle(&mut order);
    out.aq.train = order[..keep].iter().map(|&i| data.aq.train[i].clone()).collect();
    out
}

/// Trains one bundle on (possibly subsampled) data and scores both bidword
/// directions.
#[allow(clippy::too_many_arguments)]
pub fn train_and_score(
    model_cfg: &ModelConfig,
    train_cfg: &trident_core::training::TrainConfig,
    data: &TriData,
    vocab: &Vocab,
    lexicon: &corpus::TopicLexicon,
    init_seed: u64,
    dc: &DecodeConfig,
    max_sources: usize,
    eval_cfg: &crate::config::EvalConfig,
) -> Result<(ModelBundle, Vec<(Direction, MetricsReport)>), CliError> {
    let mut bundle = ModelBundle::init(model_cfg.clone(), init_seed)?;
    training::run_phase1(model_cfg, train_cfg, &mut bundle, data)?;
    training::run_phase2(model_cfg, train_cfg, &mut bundle, data)?;
    let mut reports = Vec::new();
    for direction in [Direction::QB, Direction::AB] {
        let report =
            evaluate_direction(&bundle, vocab, data, direction, dc, lexicon, max_sources, eval_cfg)?;
        reports.push((direction, report));
    }
    Ok((bundle, reports))
}

/// Re-trains over the configured ad/query data fractions and seeds, and
/// reports per-run metrics for both bidword directions.
pub fn sweep_aq_size(cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    let out = cfg.out_dir();
    let corpus = files::read_corpus(&out)?;
    let lexicon = files::read_lexicon(&out.join("topics.json"))?;
    let vocab = Vocab::build_with_merges(&corpus, cfg.vocab.min_freq, cfg.vocab.merges)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size();
    model_cfg.validate()?;
    let data = training::encode_corpus(&corpus, &vocab);

    let mut rows = Vec::new();
    for &seed in &cfg.sweep.seeds {
        for &fraction in &cfg.sweep.fractions {
            let sub = subsample_aq(&data, fraction, rng::derive(cfg.seed, &format!("sweep.{seed}")));
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = rng::derive(cfg.seed, &format!("sweep.train.{seed}"));
            let init_seed = rng::derive(cfg.seed, &format!("sweep.init.{seed}"));
            let (_, reports) = train_and_score(
                &model_cfg,
                &train_cfg,
                &sub,
                &vocab,
                &lexicon,
                init_seed,
                &cfg.decode.settings,
                cfg.sweep.max_sources,
                &cfg.eval,
            )?;
            for (direction, report) in reports {
                rows.push(SweepRow {
                    fraction,
                    seed,
                    direction: direction.name().to_string(),
                    report,
                });
            }
        }
    }

    let csv_path = out.join("sweep.csv");
    let mut csv = String::from(
        "fraction,seed,direction,topic_relevance,f1,bleu,self_bleu,distinct_3,distinct_4\n",
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.fraction,
            row.seed,
            row.direction,
            row.report.topic_relevance,
            row.report.f1,
            row.report.bleu,
            row.report.self_bleu,
            row.report.distinct_3,
            row.report.distinct_4
        ));
    }
    std::fs::write(&csv_path, csv)?;
    let json_path = out.join("sweep.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&rows).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    files::write_manifest(&out, "sweep-aq-size", cfg, &[csv_path, json_path])?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// ablate-beam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateOutcome {
    pub beam_search: MetricsReport,
    pub constrained_beam_search: MetricsReport,
}

/// Scores the trained model's configured direction under plain and
/// constrained beam search with the same beam width.
pub fn ablate_beam(cfg: &RunConfig) -> Result<AblateOutcome, CliError> {
    let out = cfg.out_dir();
    let direction = cfg.decode.direction()?;
    let corpus = files::read_corpus(&out)?;
    let lexicon = files::read_lexicon(&out.join("topics.json"))?;
    let vocab = files::read_vocab(&out.join("vocab.txt"))?;
    let bundle = files::read_bundle(&out.join("phase2.ckpt"))?;
    let data = training::encode_corpus(&corpus, &vocab);

    let run = |constrained: bool| -> Result<MetricsReport, CliError> {
        let dc = DecodeConfig {
            constrained,
            ..cfg.decode.settings.clone()
        };
        evaluate_direction(
            &bundle,
            &vocab,
            &data,
            direction,
            &dc,
            &lexicon,
            cfg.ablate.max_sources,
            &cfg.eval,
        )
    };
    let outcome = AblateOutcome {
        beam_search: run(false)?,
        constrained_beam_search: run(true)?,
    };

    let json_path = out.join("ablate.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&outcome).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    let txt_path = out.join("ablate.txt");
    let mut txt = String::from("== beam search ==\n");
    txt.push_str(&outcome.beam_search.as_table());
    txt.push_str("\n== constrained beam search ==\n");
    txt.push_str(&outcome.constrained_beam_search.as_table());
    std::fs::write(&txt_path, txt)?;
    files::write_manifest(&out, "ablate-beam", cfg, &[json_path, txt_path])?;
    Ok(outcome)
}
