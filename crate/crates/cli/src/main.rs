mod args;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use muscl_core::data::write_corpus_to_disk;
use muscl_core::harness::{
    ablate, build_corpus, build_probe_corpus, export_embeddings, export_weights, finetune_head, linear_probe,
    mean_accuracy, output_dir, pretrain, save_run, write_ablation_csv, write_embeddings_csv, write_report_csv,
    write_weights_csv, Checkpoint, RunConfig, CHECKPOINT_FILE,
};

use args::{Command, Invocation, UsageError};

const USAGE_EXIT: u8 = 1;
const RUNTIME_EXIT: u8 = 2;
const DEFAULT_PAIRS_PER_VIDEO: usize = 8;

enum Failure {
    Usage(String),
    Runtime(muscl_core::Error),
}

impl From<muscl_core::Error> for Failure {
    fn from(e: muscl_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprint!("{msg}");
            ExitCode::from(USAGE_EXIT)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME_EXIT)
        }
    }
}

fn run(argv: &[String]) -> Result<(), Failure> {
    let inv = args::parse(argv)?;
    if let Some(help) = &inv.help {
        print!("{help}");
        return Ok(());
    }
    let cmd = inv.command.expect("parse guarantees a command");
    let ckpt = match &inv.checkpoint {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let base = ckpt.as_ref().map_or_else(RunConfig::default, |c| c.config.clone());
    let cfg = configure(base, &inv, cmd)?;
    match cmd {
        Command::GenData => gen_data(&cfg, &inv),
        Command::Pretrain => {
            let out = pretrain(&cfg)?;
            let dir = output_dir(&cfg);
            save_run(&out, &dir)?;
            let cfg_path = dir.join("config.cfg");
            std::fs::write(&cfg_path, cfg.to_kv()).map_err(|e| io_err(&cfg_path, e))?;
            if let Some(last) = out.log.last() {
                log::info!(
                    "epoch {} train loss {:.4} valid loss {:.4}",
                    last.epoch,
                    last.train_loss,
                    last.valid_loss
                );
            }
            log::info!("wrote {}", dir.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Command::Probe => {
            let ckpt = ckpt.expect("checked by parse");
            let report = linear_probe(&ckpt, &build_probe_corpus(&cfg)?, &cfg.probe)?;
            log::info!("accuracy {:.4} macro F1 {:.4}", report.accuracy, report.macro_f1);
            with_output(inv.out.as_deref(), |w| write_report_csv(&report, w))
        }
        Command::Finetune => {
            let ckpt = ckpt.expect("checked by parse");
            let tuned = finetune_head(&ckpt, &build_probe_corpus(&cfg)?, &cfg.probe)?;
            log::info!(
                "accuracy {:.4} macro F1 {:.4}",
                tuned.report.accuracy,
                tuned.report.macro_f1
            );
            let dir = output_dir(&cfg);
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let path = dir.join("finetuned.bin");
            Checkpoint {
                theta_m: tuned.theta_m,
                ..ckpt
            }
            .save(&path)?;
            log::info!("wrote {}", path.display());
            with_output(inv.out.as_deref(), |w| write_report_csv(&tuned.report, w))
        }
        Command::ExportWeights => {
            let ckpt = ckpt.expect("checked by parse");
            let k = inv.pairs_per_video.unwrap_or(DEFAULT_PAIRS_PER_VIDEO);
            let seed = inv.seeds.first().copied().unwrap_or(cfg.seed);
            let rows = export_weights(&ckpt, &build_corpus(&cfg)?, k, seed)?;
            with_output(inv.out.as_deref(), |w| write_weights_csv(&rows, w))
        }
        Command::ExportEmbeddings => {
            let ckpt = ckpt.expect("checked by parse");
            let rows = export_embeddings(&ckpt, &build_corpus(&cfg)?)?;
            with_output(inv.out.as_deref(), |w| write_embeddings_csv(&rows, w))
        }
        Command::Ablate => {
            let rows = ablate(&cfg, &inv.seeds)?;
            for (rung, acc) in mean_accuracy(&rows) {
                log::info!("{rung}: mean accuracy {acc:.4}");
            }
            with_output(inv.out.as_deref(), |w| write_ablation_csv(&rows, w))
        }
    }
}

/// Checkpoint or default config, then the config file, then flag overrides.
fn configure(mut cfg: RunConfig, inv: &Invocation, cmd: Command) -> Result<RunConfig, Failure> {
    if let Some(path) = &inv.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        cfg.apply_kv(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for (key, value) in &inv.overrides {
        cfg.set(key, value)
            .map_err(|e| usage(format!("--{key}: {e}")))?;
    }
    if let Some(&seed) = inv.seeds.first() {
        match cmd {
            Command::Probe | Command::Finetune => cfg.probe.seed = seed,
            Command::ExportWeights => {}
            _ => {
                cfg.seed = seed;
                cfg.probe.seed = seed;
            }
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    UsageError::new(msg).into()
}

fn gen_data(cfg: &RunConfig, inv: &Invocation) -> Result<(), Failure> {
    let synthetic = RunConfig {
        data: None,
        ..cfg.clone()
    };
    let clips = build_corpus(&synthetic)?;
    let root = inv
        .out
        .clone()
        .unwrap_or_else(|| output_dir(cfg).join("corpus"));
    write_corpus_to_disk(&clips, &root)?;
    log::info!("wrote {} videos to {}", clips.len(), root.display());
    Ok(())
}

fn io_err(path: &Path, e: io::Error) -> muscl_core::Error {
    muscl_core::Error::Io {
        path: PathBuf::from(path),
        source: e,
    }
}

fn with_output(
    path: Option<&Path>,
    write: impl FnOnce(&mut dyn Write) -> muscl_core::Result<()>,
) -> Result<(), Failure> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            let file = File::create(p).map_err(|e| io_err(p, e))?;
            let mut w = BufWriter::new(file);
            write(&mut w)?;
            w.flush().map_err(|e| io_err(p, e))?;
        }
        None => write(&mut io::stdout().lock())?,
    }
    Ok(())
}
