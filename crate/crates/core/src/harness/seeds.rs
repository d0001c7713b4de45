//! Counter-based seed derivation. All randomness in a run is a pure
//! function of (master seed, purpose tag, counters), so replay and resume
//! are exact and independent of worker count.

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Tag {
    Connectivity = 0x636f6e6e,
    ParamInit = 0x696e6974,
    TrainEpisode = 0x74726169,
    EvalEpisode = 0x6576616c,
    Split = 0x73706c74,
    Gradcheck = 0x67726164,
}

/// splitmix64 over the concatenated words.
pub fn mix(seed: u64, tag: u64, counter: u64) -> u64 {
    let mut z = seed;
    for w in [tag, counter] {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(w);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

/// Two counters (e.g. update index and episode index).
pub fn mix2(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, tag, a), tag, b)
}
