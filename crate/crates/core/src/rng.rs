//! Per-sample random streams.
//!
//! Every Monte Carlo sample draws from its own ChaCha stream selected by
//! `(seed, index)`, so ensembles are reproducible regardless of how samples
//! are scheduled across workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn sample_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Fixed decomposition of `0..count` into chunks reduced in index order.
///
/// Chunks are evaluated in parallel a batch at a time and merged
/// sequentially, so floating-point sums do not depend on the thread count.
pub(crate) fn ordered_chunk_reduce<A, Init, Work, Merge>(
    count: usize,
    chunk: usize,
    init: Init,
    work: Work,
    mut merge: Merge,
) -> A
where
    A: Send,
    Init: Fn() -> A + Sync,
    Work: Fn(&mut A, usize) + Sync,
    Merge: FnMut(&mut A, A),
{
    use rayon::prelude::*;
    const BATCH: usize = 16;
    let chunks = count.div_ceil(chunk);
    let mut total = init();
    let mut start_chunk = 0;
    while start_chunk < chunks {
        let end_chunk = (start_chunk + BATCH).min(chunks);
        let partials: Vec<A> = (start_chunk..end_chunk)
            .into_par_iter()
            .map(|c| {
                let mut acc = init();
                for i in c * chunk..((c + 1) * chunk).min(count) {
                    work(&mut acc, i);
                }
                acc
            })
            .collect();
        for p in partials {
            merge(&mut total, p);
        }
        start_chunk = end_chunk;
    }
    total
}
