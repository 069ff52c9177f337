//! Frame sequences, frame-set extraction, and the corpus sources: a
//! synthetic ultrasound-like generator and an on-disk PGM loader.

mod disk;
mod synth;

pub use disk::{load_corpus_from_disk, write_corpus_to_disk};
pub use synth::{generate_synthetic_corpus, splice_corrupted, SynthConfig};

use crate::error::{Error, Result};

/// Tag carried by clips made by the synthetic generator.
pub const TAG_SYNTHETIC: &str = "synthetic";
/// Tag carried by spliced two-class clips.
pub const TAG_CORRUPTED: &str = "corrupted";

/// Single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Image { height, width, pixels })
    }

    /// Trusted constructor for values already known to lie in `[0, 1]`.
    pub(crate) fn from_raw(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        debug_assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        Image { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub video_id: String,
    pub fps: f64,
    frames: Vec<Image>,
    /// Ground-truth class for evaluation. Never read by pre-training.
    pub latent_class: Option<usize>,
    /// Sub-corpus tag used in weight exports.
    pub source_tag: String,
}

impl VideoClip {
    pub fn new(
        video_id: impl Into<String>,
        fps: f64,
        frames: Vec<Image>,
        latent_class: Option<usize>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::invalid(format!("video {video_id}: fps must be positive, got {fps}")));
        }
        if let Some(first) = frames.first() {
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != first.dims()) {
                return Err(Error::invalid(format!(
                    "video {video_id}: frame {i} is {:?}, frame 0 is {:?}",
                    f.dims(),
                    first.dims()
                )));
            }
        }
        Ok(VideoClip {
            video_id,
            fps,
            frames,
            latent_class,
            source_tag: TAG_SYNTHETIC.to_string(),
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Image::dims)
    }
}

/// Frames sampled from one clip. Carries no label.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub video_id: String,
    frames: Vec<Image>,
    source_indices: Vec<usize>,
}

impl FrameSet {
    pub fn new(video_id: impl Into<String>, frames: Vec<Image>, source_indices: Vec<usize>) -> Result<Self> {
        let video_id = video_id.into();
        if frames.len() != source_indices.len() {
            return Err(Error::invalid(format!(
                "frame set {video_id}: {} frames but {} indices",
                frames.len(),
                source_indices.len()
            )));
        }
        if source_indices.windows(2).any(|w| w[1] < w[0] + MIN_INTERVAL) {
            return Err(Error::invalid(format!(
                "frame set {video_id}: indices {source_indices:?} need gaps of at least {MIN_INTERVAL}"
            )));
        }
        Ok(FrameSet { video_id, frames, source_indices })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// Number of sampled frames.
    pub fn k(&self) -> usize {
        self.frames.len()
    }
}

/// Smallest allowed gap between sampled frame indices.
pub const MIN_INTERVAL: usize = 6;

pub const DEFAULT_SAMPLES_PER_SECOND: f64 = 3.0;

/// Every `step`-th frame from index 0, `step = max(6, floor(fps / rate))`.
/// Frames after the last full step at the clip tail are dropped.
pub fn extract_frame_set(clip: &VideoClip, samples_per_second: f64) -> Result<FrameSet> {
    if clip.is_empty() {
        return Err(Error::invalid(format!("video {} has no frames", clip.video_id)));
    }
    if !(samples_per_second > 0.0) || !samples_per_second.is_finite() {
        return Err(Error::invalid(format!(
            "samples_per_second must be positive, got {samples_per_second}"
        )));
    }
    let step = frame_step(clip.fps, samples_per_second);
    let source_indices: Vec<usize> = (0..clip.len()).step_by(step).collect();
    let frames = source_indices.iter().map(|&i| clip.frames[i].clone()).collect();
    FrameSet::new(clip.video_id.clone(), frames, source_indices)
}

pub fn frame_step(fps: f64, samples_per_second: f64) -> usize {
    let raw = (fps / samples_per_second).floor();
    // saturating float->int cast; very large ratios just give one frame
    (raw as usize).max(MIN_INTERVAL)
}

pub fn extract_all(clips: &[VideoClip], samples_per_second: f64) -> Result<Vec<FrameSet>> {
    clips.iter().map(|c| extract_frame_set(c, samples_per_second)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(fps: f64, n: usize) -> VideoClip {
        let frames = (0..n).map(|_| Image::filled(2, 2, 0.5).unwrap()).collect();
        VideoClip::new("v", fps, frames, None).unwrap()
    }

    #[test]
    fn extraction_examples() {
        let fs = extract_frame_set(&clip(23.0, 230), 3.0).unwrap();
        assert_eq!(fs.k(), 33);
        assert_eq!(fs.source_indices()[1], 7);
        assert_eq!(*fs.source_indices().last().unwrap(), 224);

        let fs = extract_frame_set(&clip(17.0, 17), 3.0).unwrap();
        assert_eq!(fs.source_indices(), &[0, 6, 12]);

        let fs = extract_frame_set(&clip(30.0, 1), 3.0).unwrap();
        assert_eq!(fs.source_indices(), &[0]);
    }

    #[test]
    fn empty_clip_is_rejected() {
        assert!(extract_frame_set(&clip(30.0, 0), 3.0).is_err());
    }

    #[test]
    fn mixed_frame_sizes_are_rejected() {
        let frames = vec![Image::filled(2, 2, 0.0).unwrap(), Image::filled(2, 3, 0.0).unwrap()];
        let err = VideoClip::new("x", 10.0, frames, None).unwrap_err();
        assert!(err.to_string().contains("frame 1"));
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.0, f64::NAN]).is_err());
    }
}
