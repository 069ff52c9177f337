use std::io::Write;

use super::config::RunConfig;
use super::probe::linear_probe;
use super::train::{build_corpus, build_probe_corpus, pretrain_on};
use crate::error::{Error, Result};
use crate::meta::Mode;
use crate::pairgen::Strategy;

/// One rung of the pair-strategy ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rung {
    pub strategy: Strategy,
    pub mode: Mode,
}

impl Rung {
    pub const LADDER: [Rung; 5] = [
        Rung { strategy: Strategy::SimClrStyle, mode: Mode::Plain },
        Rung { strategy: Strategy::S1, mode: Mode::Plain },
        Rung { strategy: Strategy::S2, mode: Mode::Plain },
        Rung { strategy: Strategy::S3, mode: Mode::Plain },
        Rung { strategy: Strategy::S3, mode: Mode::Meta },
    ];

    pub fn label(&self) -> String {
        match self.mode {
            Mode::Plain => self.strategy.as_str().to_string(),
            Mode::Meta => format!("meta+{}", self.strategy.as_str()),
        }
    }

    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.pairgen.strategy = self.strategy;
        cfg.optim.mode = self.mode;
        cfg.seed = seed;
        cfg.probe.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub rung: String,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Pre-trains and probes one ladder cell on a shared corpus.
pub fn run_cell(base: &RunConfig, rung: Rung, seed: u64) -> Result<AblationRow> {
    let cfg = rung.apply(base, seed);
    let clips = build_corpus(&cfg)?;
    let probe_clips = build_probe_corpus(&cfg)?;
    let out = pretrain_on(&cfg, &clips)?;
    let report = linear_probe(&out.checkpoint, &probe_clips, &cfg.probe)?;
    Ok(AblationRow {
        rung: rung.label(),
        seed,
        accuracy: report.accuracy,
        macro_f1: report.macro_f1,
    })
}

/// Every rung of the ladder over the same seeds. Corpus, augmentation, and
/// probe set are shared, so only the pair mechanism varies. Rows come out
/// in ladder order, then seed order.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(seeds.len() * Rung::LADDER.len());
    for rung in Rung::LADDER {
        for &seed in seeds {
            let row = run_cell(base, rung, seed)?;
            log::info!("{} seed {}: accuracy {:.3}", row.rung, seed, row.accuracy);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean accuracy per rung label, in first-seen order.
pub fn mean_accuracy(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(l, _, _)| *l == r.rung) {
            Some(e) => {
                e.1 += r.accuracy;
                e.2 += 1;
            }
            None => out.push((r.rung.clone(), r.accuracy, 1)),
        }
    }
    out.into_iter().map(|(l, s, n)| (l, s / n as f64)).collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "seed", "accuracy", "macro_f1"])?;
    for r in rows {
        w.write_record([r.rung.clone(), r.seed.to_string(), r.accuracy.to_string(), r.macro_f1.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_labels() {
        let labels: Vec<String> = Rung::LADDER.iter().map(Rung::label).collect();
        assert_eq!(labels, ["simclr", "s1", "s2", "s3", "meta+s3"]);
    }

    #[test]
    fn means_group_by_rung() {
        let row = |rung: &str, acc| AblationRow {
            rung: rung.into(),
            seed: 0,
            accuracy: acc,
            macro_f1: acc,
        };
        let m = mean_accuracy(&[row("a", 0.5), row("b", 1.0), row("a", 0.7)]);
        assert_eq!(m.len(), 2);
        assert!((m[0].1 - 0.6).abs() < 1e-15);
        assert_eq!(m[1], ("b".to_string(), 1.0));
    }
}
