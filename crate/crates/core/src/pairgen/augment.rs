use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_min_ratio: f64,
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub blur_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min_ratio: 0.85,
            flip_prob: 0.5,
            jitter_strength: 0.6,
            blur_enabled: false,
        }
    }
}

impl AugmentConfig {
    /// The identity transform.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop_min_ratio: 1.0,
            flip_prob: 0.0,
            jitter_strength: 0.0,
            blur_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min_ratio > 0.0 && self.crop_min_ratio <= 1.0) {
            return Err(Error::invalid(format!("crop_min_ratio {} outside (0, 1]", self.crop_min_ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::invalid(format!(
                "jitter_strength {} outside [0, 1]",
                self.jitter_strength
            )));
        }
        Ok(())
    }
}

/// Crop, flip, brightness/contrast jitter, then optional blur.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Image {
    let (h, w) = img.dims();
    let mut px = random_crop(img, cfg.crop_min_ratio, rng);
    if rng.bernoulli(cfg.flip_prob) {
        for row in px.chunks_mut(w) {
            row.reverse();
        }
    }
    let s = cfg.jitter_strength;
    if s > 0.0 {
        let c = rng.uniform_range(1.0 - s, 1.0 + s);
        let b = rng.uniform_range(-s, s);
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        for p in px.iter_mut() {
            *p = (c * (*p - mean) + mean + b).clamp(0.0, 1.0);
        }
    }
    if cfg.blur_enabled {
        px = blur3(&px, h, w);
    }
    Image::from_raw(h, w, px)
}

/// Area ratio `r ~ U[min_ratio, 1]`, aspect kept, resized back bilinearly.
fn random_crop(img: &Image, min_ratio: f64, rng: &mut Rng) -> Vec<f64> {
    let (h, w) = img.dims();
    let r = rng.uniform_range(min_ratio, 1.0);
    let side = r.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.below(h - ch + 1);
    let left = rng.below(w - cw + 1);
    if ch == h && cw == w {
        return img.pixels().to_vec();
    }
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        // pixel-centre alignment, clamped to the crop window
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let fy = y - y0 as f64;
        for j in 0..w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let fx = x - x0 as f64;
            let p = |yy: usize, xx: usize| img.get(top + yy, left + xx);
            let top_row = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom_row = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push((top_row * (1.0 - fy) + bottom_row * fy).clamp(0.0, 1.0));
        }
    }
    out
}

fn blur3(px: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = [(-1.0f64 / (2.0 * 0.25)).exp(), 1.0, (-1.0f64 / (2.0 * 0.25)).exp()];
    let norm: f64 = g.iter().sum();
    let k = g.map(|v| v / norm);
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        px[r * w + c]
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    acc += ky * kx * at(r + dy as isize - 1, c + dx as isize - 1);
                }
            }
            out.push(acc.clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
        Image::new(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let img = random_image(9, 13, &mut rng);
            assert_eq!(augment(&img, &AugmentConfig::disabled(), &mut rng), img);
        }
    }

    #[test]
    fn one_pixel_image_passes_crop() {
        let mut rng = Rng::new(2);
        let img = Image::filled(1, 1, 0.3).unwrap();
        let cfg = AugmentConfig {
            crop_min_ratio: 0.1,
            jitter_strength: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(augment(&img, &cfg, &mut rng), img);
    }

    #[test]
    fn flip_mirrors_rows() {
        let img = Image::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::disabled()
        };
        let out = augment(&img, &cfg, &mut Rng::new(0));
        assert_eq!(out.pixels(), &[0.3, 0.2, 0.1]);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = Image::filled(5, 5, 0.4).unwrap();
        let cfg = AugmentConfig {
            blur_enabled: true,
            ..AugmentConfig::disabled()
        };
        let out = augment(&img, &cfg, &mut Rng::new(0));
        for p in out.pixels() {
            assert!((p - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_bad_ranges() {
        let bad = AugmentConfig {
            crop_min_ratio: 0.0,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            jitter_strength: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn output_in_range_and_same_size(
            h in 1usize..12, w in 1usize..12,
            crop in 0.05f64..=1.0, flip in 0.0f64..=1.0, jitter in 0.0f64..=1.0,
            blur in any::<bool>(), seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let img = random_image(h, w, &mut rng);
            let cfg = AugmentConfig { crop_min_ratio: crop, flip_prob: flip, jitter_strength: jitter, blur_enabled: blur };
            let out = augment(&img, &cfg, &mut rng);
            prop_assert_eq!(out.dims(), (h, w));
            prop_assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
