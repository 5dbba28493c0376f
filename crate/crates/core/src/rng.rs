//! Seeded random streams.
//!
//! Every stochastic routine takes one user seed and derives an independent
//! ChaCha8 stream per work item (trajectory, grid point, shot) by using the
//! item index as the ChaCha stream id. Results therefore do not depend on how
//! work items are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
