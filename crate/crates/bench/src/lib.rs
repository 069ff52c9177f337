//! Fixtures shared by the criterion benches.

use muscl_core::data::{extract_all, generate_synthetic_corpus, SynthConfig};
use muscl_core::pairgen::{make_batch, PairBatch, PairGenConfig};
use muscl_core::{Result, Rng};

/// A training batch and a validation batch of `n` S3 pairs each, drawn from
/// disjoint halves of a `2n`-video synthetic corpus.
pub fn batches(n: usize, seed: u64) -> Result<(PairBatch, PairBatch)> {
    let clips = generate_synthetic_corpus(&SynthConfig {
        n_videos: 2 * n,
        seed,
        ..SynthConfig::default()
    })?;
    let sets = extract_all(&clips, 3.0)?;
    let pairgen = PairGenConfig::default();
    let mut rng = Rng::new(seed);
    let train = make_batch(&sets[..n], n, &pairgen, &mut rng)?;
    let valid = make_batch(&sets[n..], n, &pairgen, &mut rng)?;
    Ok((train, valid))
}
