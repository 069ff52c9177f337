use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::data::{
    extract_all, generate_synthetic_corpus, load_corpus_from_disk, splice_corrupted, FrameSet, SynthConfig, VideoClip,
};
use crate::error::{Error, Result};
use crate::meta::{batch_loss, meta_train_step, plain_train_step, Mode, TrainState};
use crate::nets::init_params;
use crate::pairgen::{make_batch, PairBatch};
use crate::tensor::Rng;

/// Sub-stream ids under the run seed.
pub(crate) mod streams {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EPOCH: u64 = 3;
    pub const PAIRS: u64 = 4;
    pub const VALID: u64 = 5;
    pub const EXPORT: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const CORRUPT: u64 = 8;
    pub const EVAL: u64 = 9;
}

pub const LOG_HEADER: [&str; 6] = ["epoch", "steps", "train_loss", "valid_loss", "weight_mean", "weight_std"];

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Steps completed at the end of the epoch.
    pub steps: u64,
    /// Mean unweighted loss over the epoch's training batches.
    pub train_loss: f64,
    /// Unweighted loss on a held-out batch after the epoch.
    pub valid_loss: f64,
    /// Mean and std of the weights used in the epoch (meta mode).
    pub weight_stats: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
}

/// Training corpus: disk or synthetic, plus any spliced videos.
pub fn build_corpus(cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    let mut clips = match &cfg.data {
        Some(path) => load_corpus_from_disk(path)?,
        None => generate_synthetic_corpus(&cfg.synth)?,
    };
    inject_corrupted(&mut clips, cfg.corrupt_fraction, cfg.seed)?;
    Ok(clips)
}

/// Appends spliced videos so that they make up `fraction` of the result.
/// Each splice joins two clips of different latent classes when classes
/// are known, otherwise two distinct clips.
pub fn inject_corrupted(clips: &mut Vec<VideoClip>, fraction: f64, seed: u64) -> Result<usize> {
    if fraction <= 0.0 {
        return Ok(0);
    }
    let clean = clips.len();
    if clean < 2 {
        return Err(Error::invalid("splicing needs at least two videos"));
    }
    let count = ((fraction * clean as f64) / (1.0 - fraction)).round() as usize;
    let mut rng = Rng::stream(seed, streams::CORRUPT);
    for j in 0..count {
        let a = rng.below(clean);
        let mut b = rng.below(clean - 1);
        if b >= a {
            b += 1;
        }
        if let (Some(ca), Some(_)) = (clips[a].latent_class, clips[b].latent_class) {
            let others: Vec<usize> = (0..clean)
                .filter(|&k| clips[k].latent_class.is_some_and(|c| c != ca))
                .collect();
            if !others.is_empty() {
                b = others[rng.below(others.len())];
            }
        }
        let spliced = splice_corrupted(&clips[a], &clips[b], format!("corrupt_{j:04}"))?;
        clips.push(spliced);
    }
    Ok(count)
}

/// Labelled corpus for probes: the disk corpus when `data` is set,
/// otherwise a synthetic corpus independent of the training one.
pub fn build_probe_corpus(cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    if let Some(path) = &cfg.data {
        return load_corpus_from_disk(path);
    }
    let synth = SynthConfig {
        n_videos: cfg.probe_videos,
        seed: cfg.probe_seed,
        ..cfg.synth.clone()
    };
    generate_synthetic_corpus(&synth)
}

/// Video-level shuffle split; returns (train, valid) index lists.
pub fn split_videos(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::stream(seed, streams::SPLIT).shuffle(&mut idx);
    let n_train = ((n as f64) * ratio).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "split ratio {ratio} leaves an empty side for {n} videos"
        )));
    }
    let valid = idx.split_off(n_train);
    Ok((idx, valid))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn valid_batch(sets: &[FrameSet], n: usize, cfg: &RunConfig, rng: &mut Rng) -> Result<PairBatch> {
    make_batch(sets, n.min(sets.len()), &cfg.pairgen, rng)
}

/// Pre-trains from scratch on the configured corpus.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainOutput> {
    let clips = build_corpus(cfg)?;
    pretrain_on(cfg, &clips)
}

/// Pre-trains on `clips`. Labels are never read: only label-free frame sets
/// reach the training loop.
pub fn pretrain_on(cfg: &RunConfig, clips: &[VideoClip]) -> Result<PretrainOutput> {
    cfg.validate()?;
    let n = cfg.optim.batch_size;
    let sets = extract_all(clips, cfg.samples_per_second)?;
    let (train_idx, valid_idx) = split_videos(sets.len(), cfg.split, cfg.seed)?;
    if train_idx.len() < n {
        return Err(Error::invalid(format!(
            "{} training videos cannot fill a batch of {n}",
            train_idx.len()
        )));
    }
    let train: Vec<FrameSet> = train_idx.iter().map(|&i| sets[i].clone()).collect();
    let valid: Vec<FrameSet> = valid_idx.iter().map(|&i| sets[i].clone()).collect();

    let (theta_m, theta_c) = init_params(&cfg.arch, &mut Rng::stream(cfg.seed, streams::INIT))?;
    let mut state = TrainState::new(cfg.arch.clone(), theta_m, theta_c, &cfg.optim)?;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::stream_path(cfg.seed, &[streams::EPOCH, e]).shuffle(&mut order);
        let mut losses = Vec::new();
        let mut weights = Vec::new();
        for (b, chunk) in order.chunks(n).enumerate() {
            // a short tail batch still has negatives with two videos
            if chunk.len() < 2 {
                continue;
            }
            let chunk_sets: Vec<FrameSet> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut pair_rng = Rng::stream_path(cfg.seed, &[streams::PAIRS, e, b as u64]);
            let batch = make_batch(&chunk_sets, chunk.len(), &cfg.pairgen, &mut pair_rng)?;
            let report = match cfg.optim.mode {
                Mode::Meta => {
                    let mut vrng = Rng::stream_path(cfg.seed, &[streams::VALID, e, b as u64]);
                    let vb = valid_batch(&valid, n, cfg, &mut vrng)?;
                    meta_train_step(&mut state, &batch, &vb, &cfg.optim)?
                }
                Mode::Plain => plain_train_step(&mut state, &batch, &cfg.optim)?,
            };
            losses.push(report.train_loss);
            weights.extend(report.weights);
        }
        let mut erng = Rng::stream_path(cfg.seed, &[streams::EVAL, e]);
        let eval = valid_batch(&valid, n, cfg, &mut erng)?;
        let valid_loss = batch_loss(&state.arch, &state.theta_m, &eval, cfg.optim.tau)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            steps: state.step,
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            valid_loss,
            weight_stats: (!weights.is_empty()).then(|| mean_std(&weights)),
        };
        log::debug!(
            "epoch {} steps {} train {:.4} valid {:.4}",
            entry.epoch,
            entry.steps,
            entry.train_loss,
            entry.valid_loss
        );
        log.push(entry);
    }

    let ids = |idx: &[usize]| idx.iter().map(|&i| sets[i].video_id.clone()).collect();
    Ok(PretrainOutput {
        checkpoint: Checkpoint::from_state(cfg, &state),
        log,
        train_ids: ids(&train_idx),
        valid_ids: ids(&valid_idx),
    })
}

pub fn write_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    w.write_record(LOG_HEADER)?;
    for r in log {
        let (wm, ws) = match r.weight_stats {
            Some((m, s)) => (m.to_string(), s.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            r.epoch.to_string(),
            r.steps.to_string(),
            r.train_loss.to_string(),
            r.valid_loss.to_string(),
            wm,
            ws,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Output directory, with `MUSCL_OUTPUT_DIR` taking precedence when set.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("MUSCL_OUTPUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";

/// Writes `checkpoint.bin` and `train_log.csv` under `dir`.
pub fn save_run(out: &PretrainOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    write_log(&out.log, &dir.join(LOG_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = split_videos(60, 0.8, 4).unwrap();
        assert_eq!((a.len(), b.len()), (48, 12));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert!(split_videos(3, 0.1, 0).is_err());
    }

    #[test]
    fn injection_hits_the_requested_share() {
        let mut clips = generate_synthetic_corpus(&SynthConfig {
            n_videos: 40,
            frames_per_video: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let added = inject_corrupted(&mut clips, 0.2, 9).unwrap();
        assert_eq!(added, 10);
        assert_eq!(clips.len(), 50);
        let bad = clips.iter().filter(|c| c.source_tag == crate::data::TAG_CORRUPTED).count();
        assert_eq!(bad, 10);
    }
}
