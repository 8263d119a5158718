//! Counter-based seeds: every random draw is a pure function of the run
//! seed, a stream name and integer coordinates, so a resumed run replays
//! exactly without carrying generator state.

/// 64-bit seed for `(seed, stream, coords)`.
pub fn stream_seed(seed: u64, stream: &str, coords: &[u64]) -> u64 {
    let mut h = blake3::Hasher::new();
    h.update(&seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(&[0]);
    for c in coords {
        h.update(&c.to_le_bytes());
    }
    let bytes = h.finalize();
    u64::from_le_bytes(bytes.as_bytes()[..8].try_into().expect("8 bytes"))
}
