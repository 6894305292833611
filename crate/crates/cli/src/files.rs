//! On-disk artifact formats.
//!
//! * pair TSV: `source<TAB>target<TAB>topic<TAB>noisy` per line, tokens
//!   space-joined, file per dataset and split (`{aq|ab|qb}.{train|valid|test}.tsv`)
//! * vocabulary: one token per line, line number = id - 4, specials implicit
//! * checkpoint container: one line of JSON (format version, model config,
//!   named tensor shapes) followed by the tensors' little-endian f32 data
//!   concatenated in header order
//! * loss history CSV, metrics reports (JSON + aligned text), and a
//!   manifest (config snapshot, seed, artifact hashes) per command

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trident_core::corpus::{Dataset, Split, TopicLexicon, TriCorpus, TriPair};
use trident_core::mat::Mat;
use trident_core::metrics::MetricsReport;
use trident_core::model::{Direction, ModelBundle, ModelConfig, ModelParams};
use trident_core::rng::Rng;
use trident_core::training::LossRecord;
use trident_core::vocab::Vocab;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| missing_or_io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| missing_or_io(path, e))
}

fn missing_or_io(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingArtifact(format!("{} not found", path.display()))
    } else {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

// ---------------------------------------------------------------------------
// pair TSVs
// ---------------------------------------------------------------------------

pub fn pair_file_name(ds: Dataset, split: Split) -> String {
    let split_name = match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    };
    format!("{}.{split_name}.tsv", ds.name())
}

pub fn write_pairs_tsv(path: &Path, pairs: &[&TriPair]) -> Result<(), CliError> {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&pair.src.join(" "));
        out.push('\t');
        out.push_str(&pair.dst.join(" "));
        out.push('\t');
        out.push_str(&pair.topic.to_string());
        out.push('\t');
        out.push_str(if pair.noisy { "1" } else { "0" });
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pairs_tsv(path: &Path) -> Result<Vec<TriPair>, CliError> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(CliError::MissingArtifact(format!(
                "{} line {}: expected 4 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let topic = fields[2].parse().map_err(|_| {
            CliError::MissingArtifact(format!(
                "{} line {}: bad topic id {:?}",
                path.display(),
                lineno + 1,
                fields[2]
            ))
        })?;
        pairs.push(TriPair {
            src: fields[0].split_whitespace().map(str::to_string).collect(),
            dst: fields[1].split_whitespace().map(str::to_string).collect(),
            topic,
            noisy: fields[3] == "1",
        });
    }
    Ok(pairs)
}

/// Writes the nine split files of a corpus into `dir`.
pub fn write_corpus(dir: &Path, corpus: &TriCorpus) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for ds in Dataset::ALL {
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = dir.join(pair_file_name(ds, split));
            write_pairs_tsv(&path, &corpus.split_pairs(ds, split))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reassembles a corpus from the nine split files in `dir`.
pub fn read_corpus(dir: &Path) -> Result<TriCorpus, CliError> {
    let load = |ds: Dataset| -> Result<(Vec<TriPair>, Vec<Split>), CliError> {
        let mut pairs = Vec::new();
        let mut tags = Vec::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let loaded = read_pairs_tsv(&dir.join(pair_file_name(ds, split)))?;
            tags.extend(std::iter::repeat_n(split, loaded.len()));
            pairs.extend(loaded);
        }
        Ok((pairs, tags))
    };
    let (aq, aq_split) = load(Dataset::AQ)?;
    let (ab, ab_split) = load(Dataset::AB)?;
    let (qb, qb_split) = load(Dataset::QB)?;
    Ok(TriCorpus {
        aq,
        ab,
        qb,
        aq_split,
        ab_split,
        qb_split,
    })
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<(), CliError> {
    let mut out = String::new();
    for token in vocab.tokens() {
        out.push_str(token);
        out.push('\n');
    }
    fs::write(path, out)?;
    if !vocab.merges().is_empty() {
        let merges: String = vocab
            .merges()
            .iter()
            .map(|(a, b)| format!("{a}\t{b}\n"))
            .collect();
        fs::write(path.with_extension("merges.txt"), merges)?;
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocab, CliError> {
    let text = read_text(path)?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    let merges_path = path.with_extension("merges.txt");
    let merges = if merges_path.exists() {
        read_text(&merges_path)?
            .lines()
            .filter_map(|line| {
                let mut it = line.split('\t');
                Some((it.next()?.to_string(), it.next()?.to_string()))
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Vocab::from_tokens(tokens, merges))
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

fn direction_tensors(bundle: &ModelBundle, dirs: &[Direction]) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    for &dir in dirs {
        for (name, mat) in bundle.model(dir).named_params() {
            out.push((format!("{}.{name}", dir.name()), mat.clone()));
        }
    }
    out
}

/// Writes the given directions of a bundle into the container format.
pub fn write_checkpoint(path: &Path, bundle: &ModelBundle, dirs: &[Direction]) -> Result<(), CliError> {
    let tensors = direction_tensors(bundle, dirs);
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: bundle.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, mat)| TensorMeta {
                name: name.clone(),
                rows: mat.rows(),
                cols: mat.cols(),
            })
            .collect(),
    };
    let mut file = fs::File::create(path)?;
    let mut header_line = serde_json::to_string(&header)
        .map_err(|e| CliError::Io(format!("checkpoint header: {e}")))?;
    header_line.push('\n');
    file.write_all(header_line.as_bytes())?;
    let mut blob = Vec::new();
    for (_, mat) in &tensors {
        for &v in mat.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&blob)?;
    Ok(())
}

/// Reads a checkpoint container into per-direction parameter sets.
pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, BTreeMap<String, ModelParams>), CliError> {
    let bytes = read_bytes(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::MissingArtifact(format!("{}: missing header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CliError::MissingArtifact(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CliError::MissingArtifact(format!(
            "{}: unsupported format version {}",
            path.display(),
            header.format_version
        )));
    }

    let mut cursor = &bytes[newline + 1..];
    let mut named: BTreeMap<String, Vec<(String, Mat)>> = BTreeMap::new();
    for meta in &header.tensors {
        let count = meta.rows * meta.cols;
        if cursor.len() < count * 4 {
            return Err(CliError::MissingArtifact(format!(
                "{}: truncated tensor data for {}",
                path.display(),
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 4];
            cursor.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let (dir, param) = meta.name.split_once('.').ok_or_else(|| {
            CliError::MissingArtifact(format!("{}: tensor name {:?}", path.display(), meta.name))
        })?;
        named
            .entry(dir.to_string())
            .or_default()
            .push((param.to_string(), Mat::from_vec(meta.rows, meta.cols, data)));
    }

    let mut models = BTreeMap::new();
    for (dir, tensors) in named {
        models.insert(dir.clone(), params_from_tensors(&header.config, &dir, tensors)?);
    }
    Ok((header.config, models))
}

/// Rebuilds one model's parameter struct from its named tensors, relying
/// on the canonical traversal order and verifying names and shapes.
fn params_from_tensors(
    config: &ModelConfig,
    dir: &str,
    tensors: Vec<(String, Mat)>,
) -> Result<ModelParams, CliError> {
    let mut skeleton = ModelParams::init(config, &mut Rng::new(0));
    let expected: Vec<String> = skeleton
        .named_params()
        .into_iter()
        .map(|(name, _)| name)
        .collect();
    if expected.len() != tensors.len() {
        return Err(CliError::MissingArtifact(format!(
            "direction {dir}: expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut slots = skeleton.params_mut();
    for (i, (name, mat)) in tensors.into_iter().enumerate() {
        if name != expected[i] {
            return Err(CliError::MissingArtifact(format!(
                "direction {dir}: tensor {i} is {name:?}, expected {:?}",
                expected[i]
            )));
        }
        if slots[i].rows() != mat.rows() || slots[i].cols() != mat.cols() {
            return Err(CliError::MissingArtifact(format!(
                "direction {dir}: tensor {name:?} has shape {}x{}, expected {}x{}",
                mat.rows(),
                mat.cols(),
                slots[i].rows(),
                slots[i].cols()
            )));
        }
        *slots[i] = mat;
    }
    drop(slots);
    Ok(skeleton)
}

/// Loads a checkpoint that must contain all six directions.
pub fn read_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    let (config, mut models) = read_checkpoint(path)?;
    let mut take = |dir: Direction| {
        models.remove(dir.name()).ok_or_else(|| {
            CliError::MissingArtifact(format!(
                "{}: direction {} missing from checkpoint",
                path.display(),
                dir.name()
            ))
        })
    };
    Ok(ModelBundle {
        aq: take(Direction::AQ)?,
        qa: take(Direction::QA)?,
        ab: take(Direction::AB)?,
        ba: take(Direction::BA)?,
        qb: take(Direction::QB)?,
        bq: take(Direction::BQ)?,
        config,
    })
}

// ---------------------------------------------------------------------------
// loss history, metrics, lexicon
// ---------------------------------------------------------------------------

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), CliError> {
    let mut out = String::from("step,phase,l_mle,l_tri,l\n");
    for rec in history {
        out.push_str(&trident_core::training::loss_csv_row(rec));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_metrics(dir: &Path, stem: &str, report: &MetricsReport) -> Result<Vec<PathBuf>, CliError> {
    let json_path = dir.join(format!("{stem}.json"));
    let txt_path = dir.join(format!("{stem}.txt"));
    fs::write(
        &json_path,
        serde_json::to_string_pretty(report).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    fs::write(&txt_path, report.as_table())?;
    Ok(vec![json_path, txt_path])
}

pub fn write_lexicon(path: &Path, lexicon: &TopicLexicon) -> Result<(), CliError> {
    fs::write(
        path,
        serde_json::to_string_pretty(lexicon).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    Ok(())
}

pub fn read_lexicon(path: &Path) -> Result<TopicLexicon, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::MissingArtifact(format!("{}: bad lexicon: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// file name -> fnv1a64 hash of the file bytes, hex
    pub artifacts: BTreeMap<String, String>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashes the artifacts and writes `manifest-<command>.json` beside them.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    artifacts: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let mut hashed = BTreeMap::new();
    for path in artifacts {
        let bytes = read_bytes(path)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        hashed.insert(name, format!("{:016x}", fnv1a64(&bytes)));
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        command: command.to_string(),
        seed: config.seed,
        config: config.clone(),
        artifacts: hashed,
    };
    let path = dir.join(format!("manifest-{command}.json"));
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::MissingArtifact(format!("{}: bad manifest: {e}", path.display())))
}


// ---------------------------------------------------------------------------
// match index container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MatchIndexHeader {
    format_version: u32,
    kind: String,
    mode: trident_core::baselines::VectorizerMode,
    terms: Vec<String>,
    bidwords: Vec<Vec<String>>,
    emb_tokens: Vec<String>,
    tensors: Vec<TensorMeta>,
}

/// Persists a retrieval index in the checkpoint container layout: a JSON
/// header line, then the named tensors as little-endian f32 in order.
pub fn write_match_index(path: &Path, index: &trident_core::baselines::MatchIndex) -> Result<(), CliError> {
    let n = index.len();
    let dim = if n > 0 { index.entry_vector(0).len() } else { 0 };
    let mut tensors = vec![
        TensorMeta {
            name: "idf".to_string(),
            rows: 1,
            cols: index.idf().len(),
        },
        TensorMeta {
            name: "entries".to_string(),
            rows: n,
            cols: dim,
        },
    ];
    let mut emb_tokens = Vec::new();
    if let Some(emb) = index.embeddings() {
        let mut by_row: Vec<(usize, &String)> = emb.index.iter().map(|(t, &r)| (r, t)).collect();
        by_row.sort_unstable();
        emb_tokens = by_row.into_iter().map(|(_, t)| t.clone()).collect();
        tensors.push(TensorMeta {
            name: "embeddings".to_string(),
            rows: emb.table.rows(),
            cols: emb.table.cols(),
        });
    }
    let header = MatchIndexHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: "match_index".to_string(),
        mode: index.mode(),
        terms: index.terms().into_iter().map(str::to_string).collect(),
        bidwords: index.bidwords().to_vec(),
        emb_tokens,
        tensors,
    };
    let mut file = fs::File::create(path)?;
    let mut line = serde_json::to_string(&header).map_err(|e| CliError::Io(e.to_string()))?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    let mut blob: Vec<u8> = Vec::new();
    for &v in index.idf() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for i in 0..n {
        for &v in index.entry_vector(i) {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(emb) = index.embeddings() {
        for &v in emb.table.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&blob)?;
    Ok(())
}

pub fn read_match_index(path: &Path) -> Result<trident_core::baselines::MatchIndex, CliError> {
    let bytes = read_bytes(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::MissingArtifact(format!("{}: missing header", path.display())))?;
    let header: MatchIndexHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CliError::MissingArtifact(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION || header.kind != "match_index" {
        return Err(CliError::MissingArtifact(format!(
            "{}: not a match-index container",
            path.display()
        )));
    }
    let mut cursor = &bytes[newline + 1..];
    let mut read_tensor = |meta: &TensorMeta| -> Result<Vec<f64>, CliError> {
        let count = meta.rows * meta.cols;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 4];
            cursor
                .read_exact(&mut buf)
                .map_err(|_| CliError::MissingArtifact(format!("{}: truncated", path.display())))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Ok(data)
    };
    let mut idf = Vec::new();
    let mut entries: Vec<Vec<f64>> = Vec::new();
    let mut emb_table: Option<Mat> = None;
    for meta in &header.tensors {
        let data = read_tensor(meta)?;
        match meta.name.as_str() {
            "idf" => idf = data,
            "entries" => {
                entries = data.chunks(meta.cols.max(1)).map(|c| c.to_vec()).collect();
                if meta.rows == 0 {
                    entries.clear();
                }
            }
            "embeddings" => emb_table = Some(Mat::from_vec(meta.rows, meta.cols, data)),
            other => {
                return Err(CliError::MissingArtifact(format!(
                    "{}: unknown tensor {other:?}",
                    path.display()
                )))
            }
        }
    }
    let embeddings = emb_table.map(|table| trident_core::baselines::WordEmbeddings {
        table,
        index: header
            .emb_tokens
            .iter()
            .enumerate()
            .map(|(r, t)| (t.clone(), r))
            .collect(),
    });
    trident_core::baselines::MatchIndex::from_parts(
        header.mode,
        header.terms,
        idf,
        entries,
        header.bidwords,
        embeddings,
    )
    .map_err(CliError::Core)
}
