use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hialign_core::data::{generate_corpus, load_corpus, save_corpus, Corpus};
use hialign_core::train::{self, Checkpoint, RunConfig};
use hialign_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "hialign", version, about = "Hierarchical feature alignment for gloss-free sign language translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoders with the alignment objectives.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured prototype-loss weight.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Fine-tune the translation model in two stages.
    Finetune(FinetuneArgs),
    /// Translate one feature file (HFAT, `[frames, dim]`).
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Decode and score a split; writes the JSON report to `--out` and the
    /// decoded sentences next to it.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["dev", "test"])]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every loss gradient against central differences at tiny sizes.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "start")]
struct FinetuneStart {
    /// Pre-training checkpoint to start from.
    #[arg(long, group = "start")]
    init: Option<PathBuf>,
    /// Start from freshly initialized encoders instead.
    #[arg(long, group = "start")]
    random_init: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    start: FinetuneStart,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn flush(w: &mut BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    let corpus = load_corpus(dir)?;
    if let Some(d) = corpus.input_dim() {
        if d != cfg.encoder.input_dim {
            return Err(Error::Config(format!(
                "corpus features have width {d} but the config expects {}",
                cfg.encoder.input_dim
            )));
        }
    }
    Ok(corpus)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = generate_corpus(&cfg.corpus)?;
            create_dir(&out)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} train / {} dev / {} test samples to {}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::Pretrain {
            config,
            data,
            out,
            lambda,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(l) = lambda {
                cfg.train.lambda = l;
                cfg.validate()?;
            }
            let corpus = load_data(&cfg, &data)?;
            create_dir(&out)?;
            let log_path = out.join("pretrain.log.jsonl");
            let mut log = create_file(&log_path)?;
            let outcome = train::pretrain(&cfg, &corpus, &mut log)?;
            flush(&mut log, &log_path)?;
            let ckpt = out.join("best.ckpt");
            outcome.best.save(&ckpt)?;
            println!(
                "best epoch {} val_loss {:.6}; checkpoint {}",
                outcome.best.meta.epoch,
                outcome.best.meta.best_value,
                ckpt.display()
            );
        }
        Command::Finetune(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let corpus = load_data(&cfg, &args.data)?;
            let init = match &args.start.init {
                Some(p) => {
                    let c = Checkpoint::load(p)?;
                    if let Some(w) = c.config_warning(Some(&cfg)) {
                        eprintln!("{w}");
                    }
                    Some(c)
                }
                None => None,
            };
            create_dir(&args.out)?;
            let log_path = args.out.join("finetune.log.jsonl");
            let mut log = create_file(&log_path)?;
            let outcome = train::finetune(&cfg, &corpus, init.as_ref(), &mut log)?;
            flush(&mut log, &log_path)?;
            let ckpt = args.out.join("best.ckpt");
            outcome.best.save(&ckpt)?;
            println!(
                "best epoch {} dev BLEU-4 {:.2}; checkpoint {}",
                outcome.best.meta.epoch,
                outcome.best.meta.best_value,
                ckpt.display()
            );
        }
        Command::Translate { ckpt, features } => {
            let c = Checkpoint::load(&ckpt)?;
            if let Some(w) = c.config_warning(None) {
                eprintln!("{w}");
            }
            let frames = Tensor::<f32>::load_hfat(&features)?;
            println!("{}", train::translate_features(&c, &frames)?.join(" "));
        }
        Command::Evaluate {
            ckpt,
            data,
            split,
            out,
        } => {
            let c = Checkpoint::load(&ckpt)?;
            if let Some(w) = c.config_warning(None) {
                eprintln!("{w}");
            }
            let corpus = load_data(&c.meta.config, &data)?;
            let eval = train::evaluate(&c, &corpus, &split)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_file(&out, &eval.report_json())?;
            let hyp = out.with_extension("hyp.txt");
            write_file(&hyp, &eval.hypotheses_text())?;
            print!("{}", eval.report_json());
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let summary = train::run_gradcheck(&cfg)?;
            for c in &summary.checks {
                println!(
                    "{:<20} max_rel_err {:.3e}  params {:>3}  worst {:<28} {}",
                    c.loss,
                    c.max_rel_err,
                    c.params_checked,
                    c.worst_param.as_deref().unwrap_or("-"),
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            if !summary.passed() {
                return Err(Error::Contract(format!(
                    "gradient check failed (tolerance {:e})",
                    summary.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
