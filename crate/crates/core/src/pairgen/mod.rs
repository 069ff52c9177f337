//! Positive pairs from frame sets under four strategies.
//!
//! Each generator takes one `Rng` and splits it into three sub-streams:
//! selection (frame choice and mixing coefficients) and one augmentation
//! stream per view. Two strategies that pick the same frame therefore see
//! identical augmentations.

mod augment;

pub use augment::{augment, AugmentConfig};

use std::fmt;
use std::str::FromStr;

use crate::data::{FrameSet, Image};
use crate::error::{Error, Result};
use crate::tensor::{beta_sample, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// One image from the flattened pool, augmented twice.
    SimClrStyle,
    /// One frame of one video, augmented twice.
    S1,
    /// Two distinct frames of one video.
    S2,
    /// Positive pair interpolation over three frames.
    S3,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::SimClrStyle, Strategy::S1, Strategy::S2, Strategy::S3];

    /// Frames a video needs for this strategy.
    pub fn min_frames(self) -> usize {
        match self {
            Strategy::SimClrStyle | Strategy::S1 => 1,
            Strategy::S2 => 2,
            Strategy::S3 => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SimClrStyle => "simclr",
            Strategy::S1 => "s1",
            Strategy::S2 => "s2",
            Strategy::S3 => "s3",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" | "simclr-style" | "simclrstyle" => Ok(Strategy::SimClrStyle),
            "s1" => Ok(Strategy::S1),
            "s2" => Ok(Strategy::S2),
            "s3" | "ppi" => Ok(Strategy::S3),
            _ => Err(Error::Config(format!("unknown pair strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairGenConfig {
    pub strategy: Strategy,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub augment: AugmentConfig,
    /// Degrade S3 to S2 or S1 for short frame sets instead of failing.
    pub allow_fallback: bool,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            strategy: Strategy::S3,
            beta_alpha: 2.0,
            beta_beta: 2.0,
            augment: AugmentConfig::default(),
            allow_fallback: false,
        }
    }
}

impl PairGenConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        PairGenConfig {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return Err(Error::invalid(format!(
                "beta parameters must be positive, got ({}, {})",
                self.beta_alpha, self.beta_beta
            )));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositivePair {
    pub x1: Image,
    pub x2: Image,
    pub video_id: String,
    /// Source indices of the frames used, chronological for S3.
    pub frame_indices: Vec<usize>,
    pub xi1: f64,
    pub xi2: f64,
    /// Strategy that actually produced the pair (differs from the
    /// configured one only after a fallback).
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<PositivePair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Views in row order `x1, x2` of pair 0, then pair 1, and so on.
    pub fn images(&self) -> Vec<&Image> {
        self.pairs.iter().flat_map(|p| [&p.x1, &p.x2]).collect()
    }

    pub fn video_ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.video_id.as_str()).collect()
    }
}

struct Streams {
    select: Rng,
    view1: Rng,
    view2: Rng,
}

fn split(rng: &mut Rng) -> Streams {
    let base = rng.next_u64();
    Streams {
        select: Rng::stream(base, 0),
        view1: Rng::stream(base, 1),
        view2: Rng::stream(base, 2),
    }
}

/// Pixel-wise `xi * anchor + (1 - xi) * other`.
pub fn mix(anchor: &Image, other: &Image, xi: f64) -> Result<Image> {
    if anchor.dims() != other.dims() {
        return Err(Error::invalid(format!(
            "cannot mix {:?} with {:?}",
            anchor.dims(),
            other.dims()
        )));
    }
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::invalid(format!("mixing coefficient {xi} outside [0, 1]")));
    }
    let (h, w) = anchor.dims();
    let px = anchor
        .pixels()
        .iter()
        .zip(other.pixels())
        .map(|(a, b)| (xi * a + (1.0 - xi) * b).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_raw(h, w, px))
}

fn short_set_error(fs: &FrameSet, strategy: Strategy) -> Error {
    let hint = match fs.k() {
        0 => "",
        1 => "; use S1 for single-frame sets",
        _ => "; fall back to S2 (K = 2) or S1 (K = 1) explicitly",
    };
    Error::invalid(format!(
        "{strategy} needs at least {} frames, video {} has K = {}{hint}",
        strategy.min_frames(),
        fs.video_id,
        fs.k()
    ))
}

/// S3 with mixing coefficients drawn from `Beta(alpha, beta)`.
pub fn ppi_generate(fs: &FrameSet, cfg: &PairGenConfig, rng: &mut Rng) -> Result<PositivePair> {
    ppi_impl(fs, cfg, rng, None)
}

/// S3 with caller-supplied mixing coefficients. Frame choice and
/// augmentation use the same streams as [`ppi_generate`].
pub fn ppi_generate_with(fs: &FrameSet, cfg: &PairGenConfig, rng: &mut Rng, xi1: f64, xi2: f64) -> Result<PositivePair> {
    ppi_impl(fs, cfg, rng, Some((xi1, xi2)))
}

fn ppi_impl(fs: &FrameSet, cfg: &PairGenConfig, rng: &mut Rng, forced: Option<(f64, f64)>) -> Result<PositivePair> {
    if fs.k() < 3 {
        return Err(short_set_error(fs, Strategy::S3));
    }
    let mut st = split(rng);
    let mut pos = st.select.choose_distinct(fs.k(), 3);
    pos.sort_unstable();
    let (xi1, xi2) = match forced {
        Some(x) => x,
        None => (
            beta_sample(cfg.beta_alpha, cfg.beta_beta, &mut st.select)?,
            beta_sample(cfg.beta_alpha, cfg.beta_beta, &mut st.select)?,
        ),
    };
    let frames = fs.frames();
    let anchor = &frames[pos[1]];
    let x1 = mix(anchor, &frames[pos[0]], xi1)?;
    let x2 = mix(anchor, &frames[pos[2]], xi2)?;
    Ok(PositivePair {
        x1: augment(&x1, &cfg.augment, &mut st.view1),
        x2: augment(&x2, &cfg.augment, &mut st.view2),
        video_id: fs.video_id.clone(),
        frame_indices: pos.iter().map(|&p| fs.source_indices()[p]).collect(),
        xi1,
        xi2,
        strategy: Strategy::S3,
    })
}

pub fn s1_generate(fs: &FrameSet, cfg: &PairGenConfig, rng: &mut Rng) -> Result<PositivePair> {
    if fs.k() == 0 {
        return Err(short_set_error(fs, Strategy::S1));
    }
    let mut st = split(rng);
    let p = st.select.below(fs.k());
    let frame = &fs.frames()[p];
    Ok(PositivePair {
        x1: augment(frame, &cfg.augment, &mut st.view1),
        x2: augment(frame, &cfg.augment, &mut st.view2),
        video_id: fs.video_id.clone(),
        frame_indices: vec![fs.source_indices()[p]],
        xi1: 1.0,
        xi2: 1.0,
        strategy: Strategy::S1,
    })
}

pub fn s2_generate(fs: &FrameSet, cfg: &PairGenConfig, rng: &mut Rng) -> Result<PositivePair> {
    if fs.k() < 2 {
        return Err(short_set_error(fs, Strategy::S2));
    }
    let mut st = split(rng);
    let pos = st.select.choose_distinct(fs.k(), 2);
    Ok(PositivePair {
        x1: augment(&fs.frames()[pos[0]], &cfg.augment, &mut st.view1),
        x2: augment(&fs.frames()[pos[1]], &cfg.augment, &mut st.view2),
        video_id: fs.video_id.clone(),
        frame_indices: pos.iter().map(|&p| fs.source_indices()[p]).collect(),
        xi1: 1.0,
        xi2: 1.0,
        strategy: Strategy::S2,
    })
}

/// One frame of the flattened image pool.
#[derive(Clone, Copy, Debug)]
pub struct PoolImage<'a> {
    pub video_id: &'a str,
    pub source_index: usize,
    pub image: &'a Image,
}

pub fn image_pool(sets: &[FrameSet]) -> Vec<PoolImage<'_>> {
    sets.iter()
        .flat_map(|fs| {
            fs.frames().iter().zip(fs.source_indices()).map(|(image, &source_index)| PoolImage {
                video_id: &fs.video_id,
                source_index,
                image,
            })
        })
        .collect()
}

/// One pool image augmented twice. Video identity is ignored, so a batch
/// may hold several pairs from one video.
pub fn simclr_generate(pool: &[PoolImage<'_>], cfg: &PairGenConfig, rng: &mut Rng) -> Result<PositivePair> {
    if pool.is_empty() {
        return Err(Error::invalid("image pool is empty"));
    }
    let mut st = split(rng);
    let item = pool[st.select.below(pool.len())];
    Ok(PositivePair {
        x1: augment(item.image, &cfg.augment, &mut st.view1),
        x2: augment(item.image, &cfg.augment, &mut st.view2),
        video_id: item.video_id.to_string(),
        frame_indices: vec![item.source_index],
        xi1: 1.0,
        xi2: 1.0,
        strategy: Strategy::SimClrStyle,
    })
}

/// The strategy a frame set of size `k` is served with.
fn effective_strategy(requested: Strategy, k: usize, allow_fallback: bool) -> Option<Strategy> {
    if k >= requested.min_frames() {
        return Some(requested);
    }
    if !allow_fallback || k == 0 {
        return None;
    }
    Some(if k >= 2 { Strategy::S2 } else { Strategy::S1 })
}

fn generate_one(fs: &FrameSet, strategy: Strategy, cfg: &PairGenConfig, rng: &mut Rng) -> Result<PositivePair> {
    match strategy {
        Strategy::S1 => s1_generate(fs, cfg, rng),
        Strategy::S2 => s2_generate(fs, cfg, rng),
        Strategy::S3 => ppi_generate(fs, cfg, rng),
        Strategy::SimClrStyle => unreachable!("pool strategy is batched separately"),
    }
}

/// `n` pairs: one per distinct video for S1/S2/S3, `n` pool draws for the
/// SimCLR-style strategy. Pair `i` uses sub-stream `i` of a seed drawn from
/// `rng`.
pub fn make_batch(sets: &[FrameSet], n: usize, cfg: &PairGenConfig, rng: &mut Rng) -> Result<PairBatch> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let pair_seed = rng.next_u64();
    if cfg.strategy == Strategy::SimClrStyle {
        let pool = image_pool(sets);
        let pairs = (0..n)
            .map(|i| simclr_generate(&pool, cfg, &mut Rng::stream(pair_seed, i as u64)))
            .collect::<Result<_>>()?;
        return Ok(PairBatch { pairs });
    }

    let eligible: Vec<(usize, Strategy)> = sets
        .iter()
        .enumerate()
        .filter_map(|(i, fs)| effective_strategy(cfg.strategy, fs.k(), cfg.allow_fallback).map(|s| (i, s)))
        .collect();
    if eligible.len() < n {
        return Err(Error::invalid(format!(
            "batch of {n} needs {n} eligible videos for {}, only {} available",
            cfg.strategy,
            eligible.len()
        )));
    }
    let chosen = rng.choose_distinct(eligible.len(), n);
    let mut pairs = Vec::with_capacity(n);
    for (i, &c) in chosen.iter().enumerate() {
        let (set, strategy) = eligible[c];
        if strategy != cfg.strategy {
            log::info!(
                "video {} has K = {}; using {strategy} instead of {}",
                sets[set].video_id,
                sets[set].k(),
                cfg.strategy
            );
        }
        pairs.push(generate_one(&sets[set], strategy, cfg, &mut Rng::stream(pair_seed, i as u64))?);
    }
    Ok(PairBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_set(k: usize, h: usize, seed: u64) -> FrameSet {
        let mut rng = Rng::new(seed);
        let frames = (0..k)
            .map(|_| Image::new(h, h, (0..h * h).map(|_| rng.uniform()).collect()).unwrap())
            .collect();
        FrameSet::new(format!("v{seed}"), frames, (0..k).map(|i| i * 6).collect()).unwrap()
    }

    fn plain(strategy: Strategy) -> PairGenConfig {
        PairGenConfig {
            augment: AugmentConfig::disabled(),
            ..PairGenConfig::with_strategy(strategy)
        }
    }

    #[test]
    fn ppi_forced_one_gives_anchor() {
        let fs = frame_set(5, 4, 1);
        let mut rng = Rng::new(3);
        let p = ppi_generate_with(&fs, &plain(Strategy::S3), &mut rng, 1.0, 1.0).unwrap();
        assert_eq!(p.x1, p.x2);
        let anchor = fs.source_indices().iter().position(|&s| s == p.frame_indices[1]).unwrap();
        assert_eq!(p.x1, fs.frames()[anchor]);
    }

    #[test]
    fn ppi_forced_zero_gives_earliest() {
        let fs = frame_set(5, 4, 2);
        let p = ppi_generate_with(&fs, &plain(Strategy::S3), &mut Rng::new(4), 0.0, 0.0).unwrap();
        let first = fs.source_indices().iter().position(|&s| s == p.frame_indices[0]).unwrap();
        let last = fs.source_indices().iter().position(|&s| s == p.frame_indices[2]).unwrap();
        assert_eq!(p.x1, fs.frames()[first]);
        assert_eq!(p.x2, fs.frames()[last]);
    }

    #[test]
    fn ppi_short_set_names_fallback() {
        let err = ppi_generate(&frame_set(2, 3, 1), &plain(Strategy::S3), &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("S2"), "{err}");
        assert!(s2_generate(&frame_set(1, 3, 1), &plain(Strategy::S2), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn ppi_indices_are_chronological() {
        let fs = frame_set(6, 3, 1);
        let mut rng = Rng::new(8);
        for _ in 0..500 {
            let p = ppi_generate(&fs, &PairGenConfig::default(), &mut rng).unwrap();
            assert!(p.frame_indices[0] < p.frame_indices[1] && p.frame_indices[1] < p.frame_indices[2]);
            assert!((0.0..=1.0).contains(&p.xi1) && (0.0..=1.0).contains(&p.xi2));
        }
    }

    #[test]
    fn s3_at_one_matches_s1_on_same_anchor_and_streams() {
        // K = 3 forces the anchor to be the middle frame for S3
        let fs = frame_set(3, 5, 9);
        let cfg = PairGenConfig::default();
        let s3 = ppi_generate_with(&fs, &cfg, &mut Rng::new(77), 1.0, 1.0).unwrap();
        let mid = FrameSet::new("v9", vec![fs.frames()[1].clone()], vec![fs.source_indices()[1]]).unwrap();
        let s1 = s1_generate(&mid, &cfg, &mut Rng::new(77)).unwrap();
        assert_eq!(s3.x1, s1.x1);
        assert_eq!(s3.x2, s1.x2);
    }

    #[test]
    fn s1_disabled_augment_duplicates_frame() {
        let fs = frame_set(4, 3, 5);
        let p = s1_generate(&fs, &plain(Strategy::S1), &mut Rng::new(1)).unwrap();
        assert_eq!(p.x1, p.x2);
        let a = s1_generate(&fs, &PairGenConfig::default(), &mut Rng::new(1)).unwrap();
        let b = s1_generate(&fs, &PairGenConfig::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn s2_with_two_frames() {
        let fs = frame_set(2, 3, 6);
        let p = s2_generate(&fs, &plain(Strategy::S2), &mut Rng::new(2)).unwrap();
        let mut got = [p.x1.clone(), p.x2.clone()];
        if got[0] != fs.frames()[0] {
            got.swap(0, 1);
        }
        assert_eq!(&got[..], fs.frames());
    }

    #[test]
    fn batch_distinct_videos() {
        let sets: Vec<FrameSet> = (0..40).map(|i| frame_set(4, 3, i)).collect();
        let mut rng = Rng::new(0);
        let b = make_batch(&sets, 32, &PairGenConfig::default(), &mut rng).unwrap();
        let mut ids = b.video_ids();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 32);
        assert_eq!(make_batch(&sets, 1, &PairGenConfig::default(), &mut rng).unwrap().len(), 1);
        assert!(make_batch(&sets, 41, &PairGenConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn fallback_is_opt_in() {
        let sets = vec![frame_set(4, 3, 1), frame_set(2, 3, 2), frame_set(1, 3, 3)];
        let cfg = PairGenConfig::default();
        assert!(make_batch(&sets, 3, &cfg, &mut Rng::new(0)).is_err());
        let cfg = PairGenConfig {
            allow_fallback: true,
            ..cfg
        };
        let b = make_batch(&sets, 3, &cfg, &mut Rng::new(0)).unwrap();
        for p in &b.pairs {
            let expected = match p.video_id.as_str() {
                "v1" => Strategy::S3,
                "v2" => Strategy::S2,
                _ => Strategy::S1,
            };
            assert_eq!(p.strategy, expected);
        }
    }

    #[test]
    fn simclr_batches_repeat_videos() {
        let sets: Vec<FrameSet> = (0..5).map(|i| frame_set(3, 3, i)).collect();
        let b = make_batch(&sets, 32, &plain(Strategy::SimClrStyle), &mut Rng::new(1)).unwrap();
        let mut ids = b.video_ids();
        ids.sort_unstable();
        ids.dedup();
        assert!(ids.len() < 32);
        assert!(b.pairs.iter().all(|p| p.x1 == p.x2));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("s4".parse::<Strategy>().is_err());
    }
}
