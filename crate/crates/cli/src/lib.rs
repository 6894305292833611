//! Pipeline driver for the triangular bidword generator: configuration,
//! file formats, and the CLI subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;

use std::path::PathBuf;

use config::RunConfig;
use error::CliError;

pub const USAGE: &str = "\
usage: trident <command> --config PATH [--set key=value ...]

commands:
  gen-data        generate the synthetic corpus TSVs and topic lexicon
  train           build the vocabulary and run both training phases
  generate        decode bidword candidates for a source file
  evaluate        score a candidate file against the test split
  sweep-aq-size   re-train across ad/query data fractions and seeds
  ablate-beam     compare constrained beam search against beam search

options:
  --config PATH   JSON run configuration (required)
  --set key=val   dotted-path config override, repeatable
";

struct Invocation {
    command: String,
    config_path: PathBuf,
    overrides: Vec<(String, String)>,
}

fn parse_args(args: &[String]) -> Result<Invocation, CliError> {
    let mut it = args.iter();
    let command = it
        .next()
        .ok_or_else(|| CliError::Usage("missing subcommand".to_string()))?
        .clone();
    let known = [
        "gen-data",
        "train",
        "generate",
        "evaluate",
        "sweep-aq-size",
        "ablate-beam",
    ];
    if !known.contains(&command.as_str()) {
        return Err(CliError::Usage(format!("unknown subcommand {command:?}")));
    }
    let mut config_path = None;
    let mut overrides = Vec::new();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let path = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--config needs a path".to_string()))?;
                config_path = Some(PathBuf::from(path));
            }
            "--set" => {
                let kv = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--set needs key=value".to_string()))?;
                let (key, value) = kv
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--set {kv:?} is not key=value")))?;
                overrides.push((key.to_string(), value.to_string()));
            }
            other => return Err(CliError::Usage(format!("unexpected argument {other:?}"))),
        }
    }
    Ok(Invocation {
        command,
        config_path: config_path
            .ok_or_else(|| CliError::Usage("--config is required".to_string()))?,
        overrides,
    })
}

fn dispatch(inv: &Invocation) -> Result<(), CliError> {
    let cfg = RunConfig::load(&inv.config_path, &inv.overrides)?;
    std::fs::create_dir_all(cfg.out_dir())?;
    match inv.command.as_str() {
        "gen-data" => commands::gen_data(&cfg)?,
        "train" => commands::train(&cfg)?,
        "generate" => {
            let path = commands::generate(&cfg)?;
            println!("candidates written to {}", path.display());
        }
        "evaluate" => {
            let report = commands::evaluate(&cfg)?;
            print!("{}", report.as_table());
        }
        "sweep-aq-size" => {
            let rows = commands::sweep_aq_size(&cfg)?;
            for row in &rows {
                println!(
                    "fraction {:.2} seed {} {}: topic_relevance {:.4} f1 {:.4}",
                    row.fraction, row.seed, row.direction, row.report.topic_relevance, row.report.f1
                );
            }
        }
        "ablate-beam" => {
            let outcome = commands::ablate_beam(&cfg)?;
            println!(
                "beam search:             self_bleu {:.4} distinct_3 {:.4} distinct_4 {:.4}",
                outcome.beam_search.self_bleu,
                outcome.beam_search.distinct_3,
                outcome.beam_search.distinct_4
            );
            println!(
                "constrained beam search: self_bleu {:.4} distinct_3 {:.4} distinct_4 {:.4}",
                outcome.constrained_beam_search.self_bleu,
                outcome.constrained_beam_search.distinct_3,
                outcome.constrained_beam_search.distinct_4
            );
        }
        _ => unreachable!("validated in parse_args"),
    }
    Ok(())
}

/// Runs the CLI with pre-split arguments (no program name) and returns the
/// process exit code. Exit codes: 0 success, 2 usage, 3 config, 4 missing
/// or malformed artifact, 5 io, 1 internal.
pub fn run(args: &[String]) -> i32 {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        eprint!("{USAGE}");
        return if args.is_empty() { error::EXIT_USAGE } else { 0 };
    }
    let inv = match parse_args(args) {
        Ok(inv) => inv,
        Err(e) => {
            eprintln!("{e}");
            eprint!("{USAGE}");
            return e.exit_code();
        }
    };
    match dispatch(&inv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
