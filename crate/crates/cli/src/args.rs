//! Argument parsing. Every config key is also a `--key` flag.

use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches};
use muscl_core::harness::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Probe,
    Finetune,
    ExportWeights,
    ExportEmbeddings,
    Ablate,
}

impl Command {
    pub const ALL: [(&'static str, Command, &'static str); 7] = [
        ("gen-data", Command::GenData, "write the synthetic corpus"),
        ("pretrain", Command::Pretrain, "pre-train and save checkpoint.bin and train_log.csv"),
        ("probe", Command::Probe, "linear probe on h"),
        ("finetune", Command::Finetune, "train the last encoder layer and a classifier"),
        ("export-weights", Command::ExportWeights, "weighting-net scores as CSV"),
        ("export-embeddings", Command::ExportEmbeddings, "h for every frame-set frame as CSV"),
        ("ablate", Command::Ablate, "probe accuracy for each ladder rung and seed as CSV"),
    ];

    fn from_name(name: &str) -> Option<Command> {
        Self::ALL.iter().find(|(n, ..)| *n == name).map(|&(_, c, _)| c)
    }

    /// Commands that fit parameters and so need an explicit seed.
    pub fn needs_seed(self) -> bool {
        matches!(self, Command::Pretrain | Command::Probe | Command::Finetune | Command::Ablate)
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(
            self,
            Command::Probe | Command::Finetune | Command::ExportWeights | Command::ExportEmbeddings
        )
    }
}

/// A rendered usage error, ready for stderr.
#[derive(Debug, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl UsageError {
    pub fn new(msg: impl fmt::Display) -> Self {
        let e = cli().error(ErrorKind::InvalidValue, msg);
        UsageError(e.render().to_string())
    }
}

#[derive(Debug, Default, PartialEq)]
pub struct Invocation {
    pub command: Option<Command>,
    /// Rendered help text when help was requested.
    pub help: Option<String>,
    pub config: Option<PathBuf>,
    /// Config keys set on the command line, in order.
    pub overrides: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pairs_per_video: Option<usize>,
}

/// Config keys exposed as plain flags; `seed` has its own list form.
fn key_flags() -> impl Iterator<Item = &'static str> {
    RunConfig::KEYS.iter().copied().filter(|k| *k != "seed")
}

fn flag(key: &'static str) -> Arg {
    let dashed = key.replace('_', "-");
    let arg = Arg::new(key).long(key).value_name("VALUE").action(ArgAction::Set);
    if dashed == key {
        arg
    } else {
        arg.alias(dashed)
    }
}

fn shared_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value config file, applied before flag overrides"),
        Arg::new("seed")
            .long("seed")
            .value_name("N[,N...]")
            .value_delimiter(',')
            .value_parser(clap::value_parser!(u64))
            .help("run seed; ablate takes a list"),
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("checkpoint to read"),
        Arg::new("out")
            .long("out")
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help("output file or directory; CSV goes to stdout when absent"),
        Arg::new("pairs_per_video")
            .long("pairs-per-video")
            .alias("pairs_per_video")
            .value_name("K")
            .value_parser(clap::value_parser!(usize))
            .help("pairs drawn per video by export-weights (8)"),
    ];
    args.extend(key_flags().map(|k| flag(k).hide(true)));
    args
}

pub fn cli() -> clap::Command {
    let subcommands = Command::ALL
        .iter()
        .map(|&(name, _, about)| clap::Command::new(name).about(about).args(shared_args()));
    clap::Command::new("muscl")
        .about("Contrastive pre-training with a meta-learned pair-weighting net")
        .subcommand_required(true)
        .subcommands(subcommands)
        .after_help(
            "Every config key is also a flag: --KEY VALUE, with '-' or '_' separators.\n\
             MUSCL_OUTPUT_DIR overrides output_dir when set.",
        )
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let mut set: Vec<(usize, String, String)> = Vec::new();
    for key in key_flags() {
        if let (Some(values), Some(idx)) = (m.get_many::<String>(key), m.indices_of(key)) {
            for (v, i) in values.zip(idx) {
                set.push((i, key.to_string(), v.clone()));
            }
        }
    }
    set.sort_by_key(|(i, ..)| *i);
    set.into_iter().map(|(_, k, v)| (k, v)).collect()
}

pub fn parse(args: &[String]) -> Result<Invocation, UsageError> {
    let argv = std::iter::once("muscl".to_string()).chain(args.iter().cloned());
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(Invocation {
                help: Some(e.render().to_string()),
                ..Invocation::default()
            })
        }
        Err(e) => return Err(UsageError(e.render().to_string())),
    };
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let cmd = Command::from_name(name).expect("every subcommand is a Command");
    let inv = Invocation {
        command: Some(cmd),
        help: None,
        config: m.get_one::<PathBuf>("config").cloned(),
        overrides: overrides(m),
        seeds: m.get_many::<u64>("seed").map(|s| s.copied().collect()).unwrap_or_default(),
        checkpoint: m.get_one::<PathBuf>("checkpoint").cloned(),
        out: m.get_one::<PathBuf>("out").cloned(),
        pairs_per_video: m.get_one::<usize>("pairs_per_video").copied(),
    };
    if cmd.needs_seed() && inv.seeds.is_empty() {
        return Err(UsageError::new(format!("{name} requires --seed")));
    }
    if cmd != Command::Ablate && inv.seeds.len() > 1 {
        return Err(UsageError::new(format!("{name} takes a single --seed")));
    }
    if cmd.needs_checkpoint() && inv.checkpoint.is_none() {
        return Err(UsageError::new(format!("{name} requires --checkpoint")));
    }
    Ok(inv)
}
