//! `root/video_<id>/frame_<%05d>.pgm` plus `root/video_<id>/meta`.
//!
//! `meta` holds `key=value` lines: `fps` (required), `class` and `tag`
//! (optional). Frames are binary PGM (P5) with maxval 255.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Image, VideoClip};
use crate::error::{Error, Result};

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn load_corpus_from_disk(root: impl AsRef<Path>) -> Result<Vec<VideoClip>> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("video_") {
            if entry.path().is_dir() {
                dirs.push((id.to_string(), entry.path()));
            }
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(data_err(root, "no video_* directories found"));
    }
    dirs.iter().map(|(id, dir)| load_clip(id, dir)).collect()
}

fn load_clip(id: &str, dir: &Path) -> Result<VideoClip> {
    let meta_path = dir.join("meta");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut fps = None;
    let mut class = None;
    let mut tag = None;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| data_err(&meta_path, format!("expected key=value, got {line:?}")))?;
        let v = v.trim();
        match k.trim() {
            "fps" => {
                fps = Some(v.parse::<f64>().map_err(|_| data_err(&meta_path, format!("bad fps {v:?}")))?)
            }
            "class" => {
                class = Some(v.parse::<usize>().map_err(|_| data_err(&meta_path, format!("bad class {v:?}")))?)
            }
            "tag" => tag = Some(v.to_string()),
            other => return Err(data_err(&meta_path, format!("unknown meta key {other:?}"))),
        }
    }
    let fps = fps.ok_or_else(|| data_err(&meta_path, "missing fps"))?;

    let mut frame_paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(data_err(dir, "no .pgm frames"));
    }

    let mut frames: Vec<Image> = Vec::with_capacity(frame_paths.len());
    for p in &frame_paths {
        let img = read_pgm(p)?;
        if let Some(first) = frames.first() {
            if first.dims() != img.dims() {
                return Err(data_err(
                    p,
                    format!("frame is {:?}, earlier frames are {:?}", img.dims(), first.dims()),
                ));
            }
        }
        frames.push(img);
    }
    let clip = VideoClip::new(id, fps, frames, class).map_err(|e| data_err(&meta_path, e.to_string()))?;
    Ok(match tag {
        Some(t) => clip.with_tag(t),
        None => clip,
    })
}

fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err(data_err(path, "not a binary PGM (missing P5)"));
    }
    pos += 2;
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| data_err(path, "malformed PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(data_err(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(data_err(path, "zero-sized PGM"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| data_err(path, "truncated PGM raster"))?;
    let pixels = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image::from_raw(height, width, pixels))
}

fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes clips in the layout [`load_corpus_from_disk`] reads.
pub fn write_corpus_to_disk(clips: &[VideoClip], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for clip in clips {
        let dir = root.join(format!("video_{}", clip.video_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut meta = format!("fps={}\n", clip.fps);
        if let Some(c) = clip.latent_class {
            meta.push_str(&format!("class={c}\n"));
        }
        meta.push_str(&format!("tag={}\n", clip.source_tag));
        let meta_path = dir.join("meta");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        for (i, frame) in clip.frames().iter().enumerate() {
            write_pgm(&dir.join(format!("frame_{i:05}.pgm")), frame)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SynthConfig};

    #[test]
    fn three_frame_video() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("video_a");
        fs::create_dir(&v).unwrap();
        fs::write(v.join("meta"), "fps=23\n").unwrap();
        for i in 0..3 {
            let mut raw = b"P5\n# comment\n16 16\n255\n".to_vec();
            raw.extend(std::iter::repeat_n(if i == 0 { 255u8 } else { 0 }, 256));
            fs::write(v.join(format!("frame_{i:05}.pgm")), raw).unwrap();
        }
        let clips = load_corpus_from_disk(dir.path()).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].len(), 3);
        assert_eq!(clips[0].fps, 23.0);
        assert_eq!(clips[0].frames()[0].get(3, 3), 1.0);
        assert_eq!(clips[0].frames()[1].get(3, 3), 0.0);
    }

    #[test]
    fn round_trip_within_quantization() {
        let cfg = SynthConfig {
            n_videos: 3,
            frames_per_video: 7,
            seed: 5,
            ..SynthConfig::default()
        };
        let clips = generate_synthetic_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus_to_disk(&clips, dir.path()).unwrap();
        let back = load_corpus_from_disk(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        let mut worst: f64 = 0.0;
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.latent_class, b.latent_class);
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                for (x, y) in fa.pixels().iter().zip(fb.pixels()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        assert!(worst <= 1.0 / 510.0 + 1e-15, "worst {worst}");
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("video_b");
        fs::create_dir(&v).unwrap();
        let err = load_corpus_from_disk(dir.path()).unwrap_err().to_string();
        assert!(err.contains("meta"), "{err}");

        fs::write(v.join("meta"), "fps=10\n").unwrap();
        fs::write(v.join("frame_00000.pgm"), b"P6\n1 1\n255\n\0").unwrap();
        let err = load_corpus_from_disk(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_00000.pgm"), "{err}");

        let mut ok = b"P5 2 2 255\n".to_vec();
        ok.extend([0u8; 4]);
        fs::write(v.join("frame_00000.pgm"), &ok).unwrap();
        let mut big = b"P5 3 3 255\n".to_vec();
        big.extend([0u8; 9]);
        fs::write(v.join("frame_00001.pgm"), &big).unwrap();
        let err = load_corpus_from_disk(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_00001.pgm"), "{err}");
    }
}
