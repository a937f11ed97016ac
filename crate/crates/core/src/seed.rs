//! Counter-based random streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream keyed by the
//! master seed and addressed by `(node, step, purpose)`. The address is packed
//! injectively into the 64-bit ChaCha stream id, so distinct triples never
//! share a keystream and the same triple always replays the same draws,
//! regardless of evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the stream address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Compression = 3,
    Partition = 4,
    Problem = 5,
    Probe = 6,
    Script = 7,
}

const NODE_BITS: u32 = 24;
const STEP_BITS: u32 = 32;

/// Returns the stream for `(node, step, purpose)` under `master_seed`.
///
/// Panics if `node >= 2^24` or `step >= 2^32`; both are far outside the
/// desk-scale regime this simulator targets.
pub fn seed_stream(master_seed: u64, node: usize, step: usize, purpose: Purpose) -> ChaCha8Rng {
    assert!(
        (node as u64) < (1 << NODE_BITS),
        "node index {node} too large"
    );
    assert!(
        (step as u64) < (1 << STEP_BITS),
        "step index {step} too large"
    );
    let stream =
        ((purpose as u64) << (NODE_BITS + STEP_BITS)) | ((node as u64) << STEP_BITS) | step as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}
