use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gmsa::checkpoint::{self, TrainingSnapshot};
use gmsa::compressor::{bundle_from_bytes, bundle_to_bytes, compress};
use gmsa::config::{RunConfig, Stage, Variant};
use gmsa::data::{generate_synthetic_dataset, read_dataset, write_jsonl, CorpusKind, SampleRecord};
use gmsa::error::{Error, Result};
use gmsa::flops::{speedup_report, write_sweep};
use gmsa::metrics::{evaluate_batch, Prediction, Task};
use gmsa::model::Model;
use gmsa::pipeline::{answer_record, prediction, restore_artifact, run_stage};
use gmsa::tokenizer::{decode, encode};
use gmsa::train::{pretrain_examples, Example};

#[derive(Parser, Debug)]
#[command(version, about = "Soft-token context compression: training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic JSONL corpus.
    GenCorpus {
        #[arg(long, value_parser = parse_kind)]
        kind: CorpusKind,
        #[arg(long)]
        count: usize,
        /// Context bytes (restoration) or key-value pairs per context (kv-qa).
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a decoder from scratch on the configured corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Autoencoder training of a new compressor on top of a pretrained decoder.
    TrainAe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "gmsa")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune the decoder's Q/K/V projections on question-answer records.
    TrainKeft {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress every context of a JSONL file into an artifact bundle.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rate: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the original text from an artifact bundle.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value_t = 512)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer each record's question from its compressed context.
    Answer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rate: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the inference cost report for the `[flops]` section.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated context lengths to sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<u64>>,
        /// Comma-separated rates for the sweep.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        rates: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<CorpusKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn training_records(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("[data] train is not set".into()))?;
    read_dataset(path)
}

fn train(
    model: &mut Model,
    stage: Stage,
    cfg: &RunConfig,
    data: &[Example],
    log: Option<&PathBuf>,
    out: &Path,
) -> Result<()> {
    let mut writer = log.map(|p| create(p)).transpose()?;
    let rates = cfg.compression.allowed_rates.clone();
    let (trainer, logs) = run_stage(model, stage, cfg.stage(stage).clone(), rates, data, writer.as_mut())?;
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io("<step log>", e))?;
    }
    if let Some(last) = logs.last() {
        eprintln!("{stage}: {} steps, final loss {:.4}", logs.len(), last.loss);
    }
    checkpoint::save(out, model, Some(&TrainingSnapshot::of(&trainer)))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            kind,
            count,
            len,
            seed,
            out,
        } => write_jsonl(&out, &generate_synthetic_dataset(kind, count, len, seed)?),
        Command::Pretrain { config, out, log } => {
            let cfg = RunConfig::load(&config)?;
            let records = training_records(&cfg)?;
            let mut model = Model::new(cfg.model.clone())?;
            let data = pretrain_examples(&records, &cfg.data);
            train(&mut model, Stage::Pretrain, &cfg, &data, log.as_ref(), &out)
        }
        Command::TrainAe {
            config,
            init,
            variant,
            out,
            log,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut model = checkpoint::load(&init)?.model;
            if model.compressor.is_none() {
                model.attach_compressor(variant)?;
            } else if model.variant() != Some(variant) {
                return Err(Error::State(format!("checkpoint already holds a {:?} compressor", model.variant())));
            }
            let data: Vec<Example> = training_records(&cfg)?.iter().map(Example::ae).collect();
            train(&mut model, Stage::Ae, &cfg, &data, log.as_ref(), &out)
        }
        Command::TrainKeft { config, init, out, log } => {
            let cfg = RunConfig::load(&config)?;
            let mut model = checkpoint::load(&init)?.model;
            let data = training_records(&cfg)?
                .iter()
                .map(Example::keft)
                .collect::<Result<Vec<_>>>()?;
            train(&mut model, Stage::Keft, &cfg, &data, log.as_ref(), &out)
        }
        Command::Compress {
            ckpt,
            rate,
            input,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?.model;
            let entries = read_dataset(&input)?
                .iter()
                .map(|r| Ok((r.id.clone(), compress(&model, &encode(&r.context), rate)?)))
                .collect::<Result<Vec<_>>>()?;
            fs::write(&out, bundle_to_bytes(&entries)?).map_err(|e| Error::io(&out, e))
        }
        Command::Restore {
            ckpt,
            artifacts,
            max_len,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?.model;
            let bytes = fs::read(&artifacts).map_err(|e| Error::io(&artifacts, e))?;
            let preds = bundle_from_bytes(&bytes)?
                .iter()
                .map(|(id, art)| Ok(prediction(id, decode(&restore_artifact(&model, art, max_len)?))))
                .collect::<Result<Vec<Prediction>>>()?;
            write_jsonl(&out, &preds)
        }
        Command::Answer {
            ckpt,
            rate,
            input,
            out,
            max_len,
        } => {
            let model = checkpoint::load(&ckpt)?.model;
            let preds = read_dataset(&input)?
                .iter()
                .map(|r| Ok(prediction(&r.id, answer_record(&model, r, rate, max_len)?)))
                .collect::<Result<Vec<Prediction>>>()?;
            write_jsonl(&out, &preds)
        }
        Command::Evaluate {
            task,
            pred,
            reference,
            out,
        } => {
            let text = fs::read_to_string(&pred).map_err(|e| Error::io(&pred, e))?;
            let preds = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| Error::Malformed {
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<Prediction>>>()?;
            let rows = evaluate_batch(task, &preds, &read_dataset(&reference)?)?;
            if let Some(agg) = rows.last() {
                println!("{agg}");
            }
            write_jsonl(&out, &rows)
        }
        Command::Flops {
            config,
            sweep,
            rates,
            csv,
        } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", speedup_report(&cfg.flops)?);
            if let Some(lengths) = sweep {
                match csv {
                    Some(path) => {
                        let mut w = create(&path)?;
                        write_sweep(&mut w, &cfg.flops, &lengths, &rates)?;
                        w.flush().map_err(|e| Error::io(&path, e))?;
                    }
                    None => write_sweep(&mut std::io::stdout().lock(), &cfg.flops, &lengths, &rates)?,
                }
            }
            Ok(())
        }
    }
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
