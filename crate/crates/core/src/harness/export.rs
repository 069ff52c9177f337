use std::io::Write;

use super::checkpoint::Checkpoint;
use super::train::streams;
use crate::data::{extract_all, VideoClip};
use crate::error::{Error, Result};
use crate::loss::cosine_sim;
use crate::nets::{encode, weigh_batch};
use crate::pairgen::make_batch;
use crate::tensor::{Rng, Tensor};

pub const WEIGHTS_HEADER: [&str; 6] = ["video_id", "tag", "frame_indices", "xi1", "xi2", "weight"];

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub video_id: String,
    pub tag: String,
    pub frame_indices: Vec<usize>,
    pub xi1: f64,
    pub xi2: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub video_id: String,
    pub frame_index: usize,
    pub h: Vec<f64>,
}

/// Weighting-net scores for `pairs_per_video` pairs from every video, drawn
/// with the checkpoint's pair strategy. Pair `j` of video `v` uses its own
/// sub-stream, so rows do not depend on corpus order or size.
pub fn export_weights(ckpt: &Checkpoint, clips: &[VideoClip], pairs_per_video: usize, seed: u64) -> Result<Vec<WeightRow>> {
    let theta_c = ckpt.weight_net()?;
    let cfg = &ckpt.config;
    let sets = extract_all(clips, cfg.samples_per_second)?;
    let mut rows = Vec::with_capacity(sets.len() * pairs_per_video);
    for (v, (fs, clip)) in sets.iter().zip(clips).enumerate() {
        let mut pairs = Vec::with_capacity(pairs_per_video);
        for j in 0..pairs_per_video {
            let mut rng = Rng::stream_path(seed, &[streams::EXPORT, v as u64, j as u64]);
            let mut b = make_batch(std::slice::from_ref(fs), 1, &cfg.pairgen, &mut rng)?;
            pairs.push(b.pairs.remove(0));
        }
        if pairs.is_empty() {
            continue;
        }
        let images: Vec<_> = pairs.iter().flat_map(|p| [&p.x1, &p.x2]).collect();
        let h = encode(&ckpt.theta_m, &cfg.arch, &images)?;
        let w = weigh_batch(theta_c, &h)?;
        for (p, w) in pairs.into_iter().zip(w) {
            rows.push(WeightRow {
                video_id: p.video_id,
                tag: clip.source_tag.clone(),
                frame_indices: p.frame_indices,
                xi1: p.xi1,
                xi2: p.xi2,
                weight: w,
            });
        }
    }
    Ok(rows)
}

/// `h` for every frame-set frame, in corpus then frame order.
pub fn export_embeddings(ckpt: &Checkpoint, clips: &[VideoClip]) -> Result<Vec<EmbeddingRow>> {
    let cfg = &ckpt.config;
    let sets = extract_all(clips, cfg.samples_per_second)?;
    let mut rows = Vec::new();
    for fs in &sets {
        let images: Vec<_> = fs.frames().iter().collect();
        let h = encode(&ckpt.theta_m, &cfg.arch, &images)?;
        for (r, &idx) in fs.source_indices().iter().enumerate() {
            rows.push(EmbeddingRow {
                video_id: fs.video_id.clone(),
                frame_index: idx,
                h: h.row(r).to_vec(),
            });
        }
    }
    Ok(rows)
}

fn csv_err(e: std::io::Error) -> Error {
    Error::io("<csv output>", e)
}

pub fn write_weights_csv(rows: &[WeightRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WEIGHTS_HEADER)?;
    for r in rows {
        let idx: Vec<String> = r.frame_indices.iter().map(usize::to_string).collect();
        w.write_record([
            r.video_id.clone(),
            r.tag.clone(),
            idx.join(";"),
            r.xi1.to_string(),
            r.xi2.to_string(),
            r.weight.to_string(),
        ])?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_embeddings_csv(rows: &[EmbeddingRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = rows.first().map_or(0, |r| r.h.len());
    let mut header = vec!["video_id".to_string(), "frame_index".to_string()];
    header.extend((1..=dim).map(|k| format!("h{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.video_id.clone(), r.frame_index.to_string()];
        rec.extend(r.h.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv_err)
}

/// Mean cosine similarity of `h` over frame pairs from the same video and
/// over pairs from different videos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterStats {
    pub intra: f64,
    pub inter: f64,
}

impl ClusterStats {
    pub fn margin(&self) -> f64 {
        self.intra - self.inter
    }
}

pub fn cluster_stats(rows: &[EmbeddingRow]) -> Result<ClusterStats> {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s = cosine_sim(&rows[i].h, &rows[j].h);
            if rows[i].video_id == rows[j].video_id {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::invalid("need two videos with at least two frames each"));
    }
    Ok(ClusterStats {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}

/// Embedding rows as a `[rows, D]` tensor.
pub fn embedding_matrix(rows: &[EmbeddingRow]) -> Result<Tensor> {
    let dim = rows.first().map_or(0, |r| r.h.len());
    Tensor::new(vec![rows.len(), dim], rows.iter().flat_map(|r| r.h.iter().copied()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &str, h: &[f64]) -> EmbeddingRow {
        EmbeddingRow {
            video_id: v.into(),
            frame_index: 0,
            h: h.to_vec(),
        }
    }

    #[test]
    fn cluster_stats_by_hand() {
        let rows = [row("a", &[1.0, 0.0]), row("a", &[1.0, 0.0]), row("b", &[0.0, 1.0])];
        let s = cluster_stats(&rows).unwrap();
        assert_eq!(s.intra, 1.0);
        assert_eq!(s.inter, 0.0);
        assert!(cluster_stats(&rows[..2]).is_err());
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_embeddings_csv(&[row("a", &[0.5, 1.0])], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "video_id,frame_index,h1,h2\na,0,0.5,1\n");
        let mut buf = Vec::new();
        write_weights_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "video_id,tag,frame_indices,xi1,xi2,weight\n");
    }
}
