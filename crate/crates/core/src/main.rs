use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use disco::checkpoint::Checkpoint;
use disco::config::TrainConfig;
use disco::data::{synth_generate, Catalog, SynthSpec};
use disco::pipeline::{evaluate, export_patterns, prepare, restore, run_metadata, DataPaths};
use disco::semkb::{build_kb, FileEncoder, StubEncoder, TextEncoder};
use disco::training::Trainer;
use disco::{Error, Result};

#[derive(Parser)]
#[command(
    name = "disco",
    version,
    about = "CTR prediction with collaborating tabular and semantic representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderKind {
    Stub,
    File,
}

#[derive(Subcommand)]
enum Command {
    /// Encode every catalog item into a knowledge-base file.
    BuildKb {
        #[arg(long)]
        items: PathBuf,
        #[arg(long, value_enum, default_value = "stub")]
        encoder: EncoderKind,
        /// Precomputed embeddings (`#dim=N` header, `key<TAB>v1,v2,...` rows); required with `--encoder file`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Output dimension of the stub encoder.
        #[arg(long, default_value_t = StubEncoder::DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noun used in item prompts.
        #[arg(long, default_value = "item")]
        noun: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with a known click model.
    Synth {
        /// key=value spec; defaults are used for absent keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a configuration key, e.g. `--set alpha=0.05`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Add a report slice for the least frequent 10% of items.
        #[arg(long)]
        long_tail: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the four pattern vectors of every sample in a split.
    ExportPatterns {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::path(path, e))
}

fn echo_config(cfg: &TrainConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.to_kv());
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::format("--set", format!("`{s}` is not key=value")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildKb {
            items,
            encoder,
            embeddings,
            dim,
            seed,
            noun,
            out,
        } => {
            let catalog = Catalog::load(&items)?;
            let enc: Box<dyn TextEncoder> = match encoder {
                EncoderKind::Stub => Box::new(StubEncoder::new(dim, seed)),
                EncoderKind::File => {
                    let path = embeddings.ok_or_else(|| {
                        Error::format("build-kb", "--encoder file needs --embeddings")
                    })?;
                    Box::new(FileEncoder::open(&path)?)
                }
            };
            println!("# resolved configuration");
            println!(
                "encoder={}\ndim={}\nseed={seed}\nnoun={noun}",
                enc.name(),
                enc.output_dim()
            );
            let kb = build_kb(catalog.items(), enc.as_ref(), &noun)?;
            kb.save(&out)?;
            println!(
                "wrote {} entries of dim {} to {}",
                kb.len(),
                kb.dim(),
                out.display()
            );
        }
        Command::Synth { spec, out_dir } => {
            let spec = match spec {
                Some(p) => SynthSpec::from_kv(&read_text(&p)?)?,
                None => SynthSpec::default(),
            };
            println!("# resolved configuration");
            print!("{}", spec.to_kv());
            let data = synth_generate(&spec)?;
            data.write_dir(&out_dir)?;
            println!(
                "wrote {} interactions over {} items to {}",
                data.log.len(),
                data.catalog.len(),
                out_dir.display()
            );
        }
        Command::Train {
            interactions,
            items,
            kb,
            config,
            overrides,
            out,
            log,
        } => {
            let file = config.as_deref().map(read_text).transpose()?;
            let cfg = TrainConfig::resolve(file.as_deref(), &parse_overrides(&overrides)?)?;
            echo_config(&cfg);
            let paths = DataPaths {
                interactions,
                items,
                kb,
            };
            let (events, catalog, kb) = paths.load()?;
            let prepared = prepare(&events, catalog, kb, &cfg)?;
            let meta = run_metadata(&cfg, &paths)?;
            let mut trainer = Trainer::new(&cfg, &prepared.features)?;
            let file = fs::File::create(&log).map_err(|e| Error::path(&log, e))?;
            let mut log_out = BufWriter::new(file);
            let summary = trainer.fit(
                &prepared.features,
                &prepared.split.train,
                &prepared.split.valid,
                &mut log_out,
                &mut |store| Checkpoint::from_store(store, meta.clone()).save(&out),
            )?;
            log_out.flush().map_err(|e| Error::path(&log, e))?;
            println!(
                "epochs: {}\nbest_epoch: {}\nbest_valid_auc: {:.6}",
                summary.epochs_run, summary.best_epoch, summary.best_auc
            );
            let report = evaluate(
                &trainer.model,
                &trainer.store,
                &prepared,
                &prepared.split.test,
                false,
            )?;
            print!("{}", prefixed("test.", &report.to_string()));
        }
        Command::Eval {
            checkpoint,
            split,
            long_tail,
            report,
        } => {
            let r = restore(&Checkpoint::load(&checkpoint)?)?;
            echo_config(&r.config);
            let samples = r.prepared.samples(&split)?;
            let rep = evaluate(&r.model, &r.store, &r.prepared, samples, long_tail)?;
            let text = format!("split: {split}\n{rep}");
            print!("{text}");
            if let Some(p) = report {
                fs::write(&p, text).map_err(|e| Error::path(&p, e))?;
            }
        }
        Command::ExportPatterns {
            checkpoint,
            out,
            split,
        } => {
            let r = restore(&Checkpoint::load(&checkpoint)?)?;
            echo_config(&r.config);
            let samples = r.prepared.samples(&split)?;
            export_patterns(&r.model, &r.store, &r.prepared.features, samples, &out)?;
            println!("wrote {} rows to {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn prefixed(prefix: &str, text: &str) -> String {
    text.lines().map(|l| format!("{prefix}{l}\n")).collect()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
