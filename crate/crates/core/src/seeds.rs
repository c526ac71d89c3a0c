//! Named substreams of one master seed, so that adding a consumer of
//! randomness never shifts the draws of another.

use sha2::{Digest, Sha256};

pub const SUBSAMPLE: &str = "subsample";
pub const SAMPLING: &str = "sampling";
pub const SWEEPS: &str = "sweeps";
pub const EMBED_TEXT: &str = "embed-text";
pub const EMBED_IMAGE: &str = "embed-image";

pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
