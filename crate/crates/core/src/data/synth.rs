use super::{Image, VideoClip, TAG_CORRUPTED};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Smallest image side that still holds the minimum lesion plus a margin.
pub const MIN_SYNTH_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Base speckle standard deviation.
    pub speckle: f64,
    /// Typical lesion displacement per frame, in pixels.
    pub drift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_videos: 60,
            frames_per_video: 60,
            fps: 18.0,
            height: 16,
            width: 16,
            n_classes: 2,
            speckle: 0.12,
            drift: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::invalid("n_videos and frames_per_video must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if self.height < MIN_SYNTH_SIDE || self.width < MIN_SYNTH_SIDE {
            return Err(Error::invalid(format!(
                "image {}x{} cannot hold the minimum lesion; need at least {MIN_SYNTH_SIDE}x{MIN_SYNTH_SIDE}",
                self.height, self.width
            )));
        }
        if !(self.speckle >= 0.0 && self.drift >= 0.0) || !self.speckle.is_finite() || !self.drift.is_finite() {
            return Err(Error::invalid("speckle and drift must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-video appearance. Class lives only in the speckle amplitude of the
/// lesion interior, low for class 0 and high for the last class. Brightness,
/// contrast, grain, shape, motion and the background texture are nuisance.
struct Appearance {
    background: f64,
    contrast: f64,
    gain: f64,
    bg_speckle: f64,
    /// Period and phase of the slow background texture drift.
    bg_period: f64,
    bg_phase: f64,
    in_speckle: f64,
    in_grain: f64,
    edge_width: f64,
    semi_y: f64,
    semi_x: f64,
    angle: f64,
}

fn draw_appearance(cfg: &SynthConfig, class: usize, rng: &mut Rng) -> Appearance {
    let t = class as f64 / (cfg.n_classes - 1) as f64;
    let side = cfg.height.min(cfg.width) as f64;
    Appearance {
        background: 0.5 + rng.uniform_range(-0.03, 0.03),
        contrast: 0.25 + rng.uniform_range(-0.03, 0.03),
        gain: 1.0 + rng.uniform_range(-0.06, 0.06),
        bg_speckle: cfg.speckle * rng.uniform_range(0.85, 1.15),
        bg_period: rng.uniform_range(20.0, 40.0),
        bg_phase: rng.uniform_range(0.0, std::f64::consts::TAU),
        in_speckle: cfg.speckle * (0.5 + t) * rng.uniform_range(0.8, 1.2),
        in_grain: rng.uniform(),
        edge_width: rng.uniform_range(0.5, 1.5),
        semi_y: side * rng.uniform_range(0.2, 0.32),
        semi_x: side * rng.uniform_range(0.2, 0.32),
        angle: rng.uniform_range(0.0, std::f64::consts::PI),
    }
}

const SPECKLE_RHO: f64 = 0.9;

/// 3×3 box average with replicated borders, rescaled to unit variance for
/// unit-variance white input.
fn coarse(noise: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let rr = (r + dy).clamp(0, h as isize - 1) as usize;
                    let cc = (c + dx).clamp(0, w as isize - 1) as usize;
                    acc += noise[rr * w + cc];
                }
            }
            out.push(acc / 3.0);
        }
    }
    out
}

/// Unit-variance blend of white noise `n` and its coarse version `s`;
/// `cov(n, s) = 1/3` away from the borders.
fn grain_mix(n: f64, s: f64, g: f64) -> f64 {
    let var = (1.0 - g).powi(2) + g * g + 2.0 / 3.0 * g * (1.0 - g);
    ((1.0 - g) * n + g * s) / var.sqrt()
}

fn render_clip(cfg: &SynthConfig, index: usize) -> Result<VideoClip> {
    let mut rng = Rng::stream(cfg.seed, index as u64);
    let class = index % cfg.n_classes;
    let app = draw_appearance(cfg, class, &mut rng);
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);

    let margin_y = (app.semi_y * 0.8).min(hf / 2.0 - 1.0);
    let margin_x = (app.semi_x * 0.8).min(wf / 2.0 - 1.0);
    let mut cy = rng.uniform_range(margin_y, hf - margin_y);
    let mut cx = rng.uniform_range(margin_x, wf - margin_x);
    let (mut vy, mut vx) = (0.0, 0.0);
    let scale_phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let scale_period = rng.uniform_range(30.0, 90.0);

    let mut noise: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let innov = (1.0 - SPECKLE_RHO * SPECKLE_RHO).sqrt();
    let (sin_a, cos_a) = app.angle.sin_cos();

    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    for t in 0..cfg.frames_per_video {
        if t > 0 {
            vy = 0.8 * vy + 0.6 * cfg.drift * rng.normal();
            vx = 0.8 * vx + 0.6 * cfg.drift * rng.normal();
            cy += vy;
            cx += vx;
            // reflect at the margins so the lesion stays in view
            if cy < margin_y || cy > hf - margin_y {
                vy = -vy;
                cy = cy.clamp(margin_y, hf - margin_y);
            }
            if cx < margin_x || cx > wf - margin_x {
                vx = -vx;
                cx = cx.clamp(margin_x, wf - margin_x);
            }
            for n in noise.iter_mut() {
                *n = SPECKLE_RHO * *n + innov * rng.normal();
            }
        }
        let smooth = coarse(&noise, h, w);
        // background texture breathes slowly in amplitude and grain
        let ph = std::f64::consts::TAU * t as f64 / app.bg_period + app.bg_phase;
        let bg_amp = app.bg_speckle * (1.0 + 0.6 * ph.sin());
        let bg_grain = 0.5 + 0.5 * (ph * 1.7).cos();
        let scale = 1.0 + 0.35 * (std::f64::consts::TAU * t as f64 / scale_period + scale_phase).sin();
        let (ay, ax) = (app.semi_y * scale, app.semi_x * scale);
        let radius = 0.5 * (ay + ax);

        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let u = cos_a * dy + sin_a * dx;
                let v = -sin_a * dy + cos_a * dx;
                let d = ((u / ay).powi(2) + (v / ax).powi(2)).sqrt();
                // signed distance to the rim in pixels, softened by the edge width
                let inside = crate::tensor::sigmoid((1.0 - d) * radius / app.edge_width);
                let (n, sm) = (noise[r * w + c], smooth[r * w + c]);
                let tex = bg_amp * (1.0 - inside) * grain_mix(n, sm, bg_grain)
                    + app.in_speckle * inside * grain_mix(n, sm, app.in_grain);
                let value = app.background + app.contrast * inside + tex;
                pixels.push((app.gain * value).clamp(0.0, 1.0));
            }
        }
        frames.push(Image::from_raw(h, w, pixels));
    }
    VideoClip::new(format!("{index:04}"), cfg.fps, frames, Some(class))
}

/// Renders `cfg.n_videos` clips, class `i % n_classes` for clip `i`. Clip `i`
/// draws only from sub-stream `(seed, i)`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<VideoClip>> {
    cfg.validate()?;
    (0..cfg.n_videos).map(|i| render_clip(cfg, i)).collect()
}

/// A clip whose first half comes from `a` and second half from `b`.
pub fn splice_corrupted(a: &VideoClip, b: &VideoClip, video_id: impl Into<String>) -> Result<VideoClip> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "cannot splice {} {:?} with {} {:?}",
            a.video_id,
            a.dims(),
            b.video_id,
            b.dims()
        )));
    }
    let n = a.len().min(b.len());
    if n < 2 {
        return Err(Error::invalid("splicing needs at least two frames per clip"));
    }
    let half = n / 2;
    let frames = a.frames()[..half]
        .iter()
        .chain(&b.frames()[half..n])
        .cloned()
        .collect();
    Ok(VideoClip::new(video_id, a.fps, frames, None)?.with_tag(TAG_CORRUPTED))
}
