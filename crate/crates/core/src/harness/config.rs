//! Run configuration and its `key = value` text form.
//!
//! Keys (defaults in parentheses):
//!
//! | key | meaning |
//! |---|---|
//! | `data` | corpus directory; empty means synthetic (empty) |
//! | `n_videos`, `frames_per_video`, `fps`, `image_size`, `n_classes`, `speckle`, `drift`, `data_seed` | synthetic corpus |
//! | `corrupt_fraction` | share of spliced two-class videos added to the corpus (0) |
//! | `probe_seed`, `probe_videos` | independent labelled corpus for probes |
//! | `strategy` | `simclr`, `s1`, `s2`, `s3` (s3) |
//! | `beta_alpha`, `beta_beta` | mixing prior (2, 2) |
//! | `crop_min_ratio`, `flip_prob`, `jitter_strength`, `blur` | augmentation |
//! | `allow_fallback` | degrade S3 on short frame sets (false) |
//! | `samples_per_second` | frame-set rate (3) |
//! | `mode` | `meta` or `plain` (meta) |
//! | `alpha1`, `alpha2`, `adam_lr`, `weight_decay`, `tau`, `batch_size` | optimizer |
//! | `conv_channels`, `repr_dim`, `proj_dim`, `weight_hidden` | architecture |
//! | `epochs`, `split`, `seed`, `output_dir` | run |
//! | `probe_epochs`, `probe_lr`, `probe_folds`, `fold_seed` | evaluation |

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::meta::{Mode, OptimConfig};
use crate::nets::ArchConfig;
use crate::pairgen::{AugmentConfig, PairGenConfig, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Stratified video-level folds; every video is tested once.
    pub folds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.01,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Corpus directory; `None` selects the synthetic generator.
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub corrupt_fraction: f64,
    pub probe_seed: u64,
    pub probe_videos: usize,
    pub pairgen: PairGenConfig,
    pub samples_per_second: f64,
    pub optim: OptimConfig,
    pub arch: ArchConfig,
    pub epochs: usize,
    pub split: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            synth: SynthConfig::default(),
            corrupt_fraction: 0.0,
            probe_seed: 1_000_003,
            probe_videos: 60,
            pairgen: PairGenConfig::default(),
            samples_per_second: 3.0,
            optim: OptimConfig::default(),
            arch: ArchConfig::default(),
            epochs: 10,
            split: 0.8,
            seed: 0,
            output_dir: PathBuf::from("out"),
            probe: ProbeConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for key {key}, expected true or false"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "adam_lr",
        "allow_fallback",
        "alpha1",
        "alpha2",
        "batch_size",
        "beta_alpha",
        "beta_beta",
        "blur",
        "conv_channels",
        "corrupt_fraction",
        "crop_min_ratio",
        "data",
        "data_seed",
        "drift",
        "epochs",
        "flip_prob",
        "fold_seed",
        "fps",
        "frames_per_video",
        "image_size",
        "jitter_strength",
        "mode",
        "n_classes",
        "n_videos",
        "output_dir",
        "probe_epochs",
        "probe_folds",
        "probe_lr",
        "probe_seed",
        "probe_videos",
        "proj_dim",
        "repr_dim",
        "samples_per_second",
        "seed",
        "speckle",
        "split",
        "strategy",
        "tau",
        "weight_decay",
        "weight_hidden",
    ];

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "n_videos" => self.synth.n_videos = parse(key, v)?,
            "frames_per_video" => self.synth.frames_per_video = parse(key, v)?,
            "fps" => self.synth.fps = parse(key, v)?,
            "image_size" => {
                let s: usize = parse(key, v)?;
                self.synth.height = s;
                self.synth.width = s;
            }
            "n_classes" => self.synth.n_classes = parse(key, v)?,
            "speckle" => self.synth.speckle = parse(key, v)?,
            "drift" => self.synth.drift = parse(key, v)?,
            "data_seed" => self.synth.seed = parse(key, v)?,
            "corrupt_fraction" => self.corrupt_fraction = parse(key, v)?,
            "probe_seed" => self.probe_seed = parse(key, v)?,
            "probe_videos" => self.probe_videos = parse(key, v)?,
            "strategy" => self.pairgen.strategy = v.parse::<Strategy>()?,
            "beta_alpha" => self.pairgen.beta_alpha = parse(key, v)?,
            "beta_beta" => self.pairgen.beta_beta = parse(key, v)?,
            "crop_min_ratio" => self.pairgen.augment.crop_min_ratio = parse(key, v)?,
            "flip_prob" => self.pairgen.augment.flip_prob = parse(key, v)?,
            "jitter_strength" => self.pairgen.augment.jitter_strength = parse(key, v)?,
            "blur" => self.pairgen.augment.blur_enabled = parse_bool(key, v)?,
            "allow_fallback" => self.pairgen.allow_fallback = parse_bool(key, v)?,
            "samples_per_second" => self.samples_per_second = parse(key, v)?,
            "mode" => self.optim.mode = v.parse::<Mode>()?,
            "alpha1" => self.optim.alpha1 = parse(key, v)?,
            "alpha2" => self.optim.alpha2 = parse(key, v)?,
            "adam_lr" => self.optim.adam_lr = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "tau" => self.optim.tau = parse(key, v)?,
            "batch_size" => self.optim.batch_size = parse(key, v)?,
            "conv_channels" => {
                self.arch.conv_channels = v
                    .split(',')
                    .map(|c| parse::<usize>(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "repr_dim" => self.arch.repr_dim = parse(key, v)?,
            "proj_dim" => self.arch.proj_dim = parse(key, v)?,
            "weight_hidden" => self.arch.weight_hidden = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "split" => self.split = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "probe_epochs" => self.probe.epochs = parse(key, v)?,
            "probe_lr" => self.probe.lr = parse(key, v)?,
            "probe_folds" => self.probe.folds = parse(key, v)?,
            "fold_seed" => self.probe.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn values(&self) -> BTreeMap<&'static str, String> {
        let a = &self.pairgen.augment;
        let o = &self.optim;
        let s = &self.synth;
        let channels: Vec<String> = self.arch.conv_channels.iter().map(usize::to_string).collect();
        let pairs: Vec<(&'static str, String)> = vec![
            ("adam_lr", o.adam_lr.to_string()),
            ("allow_fallback", self.pairgen.allow_fallback.to_string()),
            ("alpha1", o.alpha1.to_string()),
            ("alpha2", o.alpha2.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("beta_alpha", self.pairgen.beta_alpha.to_string()),
            ("beta_beta", self.pairgen.beta_beta.to_string()),
            ("blur", a.blur_enabled.to_string()),
            ("conv_channels", channels.join(",")),
            ("corrupt_fraction", self.corrupt_fraction.to_string()),
            ("crop_min_ratio", a.crop_min_ratio.to_string()),
            ("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data_seed", s.seed.to_string()),
            ("drift", s.drift.to_string()),
            ("epochs", self.epochs.to_string()),
            ("flip_prob", a.flip_prob.to_string()),
            ("fold_seed", self.probe.seed.to_string()),
            ("fps", s.fps.to_string()),
            ("frames_per_video", s.frames_per_video.to_string()),
            ("image_size", s.height.to_string()),
            ("jitter_strength", a.jitter_strength.to_string()),
            ("mode", o.mode.as_str().to_string()),
            ("n_classes", s.n_classes.to_string()),
            ("n_videos", s.n_videos.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("probe_epochs", self.probe.epochs.to_string()),
            ("probe_lr", self.probe.lr.to_string()),
            ("probe_seed", self.probe_seed.to_string()),
            ("probe_folds", self.probe.folds.to_string()),
            ("probe_videos", self.probe_videos.to_string()),
            ("proj_dim", self.arch.proj_dim.to_string()),
            ("repr_dim", self.arch.repr_dim.to_string()),
            ("samples_per_second", self.samples_per_second.to_string()),
            ("seed", self.seed.to_string()),
            ("speckle", s.speckle.to_string()),
            ("split", self.split.to_string()),
            ("strategy", self.pairgen.strategy.as_str().to_string()),
            ("tau", o.tau.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("weight_hidden", self.arch.weight_hidden.to_string()),
        ];
        pairs.into_iter().collect()
    }

    /// Canonical text form: every key, sorted, one `key = value` per line.
    pub fn to_kv(&self) -> String {
        self.values().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split must lie in (0, 1), got {}", self.split)));
        }
        if !(0.0..1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config(format!(
                "corrupt_fraction must lie in [0, 1), got {}",
                self.corrupt_fraction
            )));
        }
        if self.probe.folds < 2 {
            return Err(Error::Config("probe_folds must be at least 2".into()));
        }
        if !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe_lr must be positive".into()));
        }
        if self.data.is_none() {
            self.synth.validate()?;
        }
        self.pairgen.validate()?;
        self.optim.validate()?;
        self.arch.validate()
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.pairgen.augment
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("strategy", "s2").unwrap();
        cfg.set("conv_channels", "4, 8").unwrap();
        cfg.set("alpha2", "0.001").unwrap();
        cfg.set("blur", "true").unwrap();
        let text = cfg.to_kv();
        assert_eq!(RunConfig::from_kv(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn keys_table_matches_canonical_form() {
        let cfg = RunConfig::default();
        let keys: Vec<&str> = cfg.values().keys().copied().collect();
        assert_eq!(keys, RunConfig::KEYS);
        for k in RunConfig::KEYS {
            let mut c = RunConfig::default();
            let v = cfg.values()[k].clone();
            c.set(k, &v).unwrap();
        }
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = RunConfig::from_kv("# header\nepochs = 3 # trailing\n\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        let err = RunConfig::from_kv("epoch = 3").unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
        assert!(RunConfig::from_kv("epochs 3").is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = RunConfig {
            epochs: 0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
