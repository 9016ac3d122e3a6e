//! Deterministic expander: SHA-256 in counter mode, rejection-sampled into `[1, m]`.
//!
//! Block `i` is `SHA-256("JJE-PRG" || seed || len(tag) || tag || i)` with the
//! length and counter big-endian (4 and 8 bytes). Each block yields four
//! big-endian `u64` words. A word `x` is accepted iff `x < ⌊2⁶⁴/m⌋·m` and
//! maps to `x mod m + 1`, so the output carries no modulo bias.

use std::collections::BTreeSet;

use super::{sha256, CryptoError};

const PRG_TAG: &[u8] = b"JJE-PRG";

/// Infinite stream of uniform words for one `(seed, tag)` pair.
pub struct PrgStream {
    seed: [u8; 32],
    tag: Vec<u8>,
    counter: u64,
    block: [u8; 32],
    offset: usize,
}

impl PrgStream {
    pub fn new(seed: &[u8; 32], domain_tag: &[u8]) -> Self {
        PrgStream {
            seed: *seed,
            tag: domain_tag.to_vec(),
            counter: 0,
            block: [0u8; 32],
            offset: 32,
        }
    }

    pub fn next_word(&mut self) -> u64 {
        if self.offset == 32 {
            let tag_len = u32::try_from(self.tag.len()).expect("tag shorter than 4 GiB");
            self.block = sha256(&[
                PRG_TAG,
                &self.seed,
                &tag_len.to_be_bytes(),
                &self.tag,
                &self.counter.to_be_bytes(),
            ]);
            self.counter += 1;
            self.offset = 0;
        }
        let word = u64::from_be_bytes(
            self.block[self.offset..self.offset + 8]
                .try_into()
                .expect("8-byte window"),
        );
        self.offset += 8;
        word
    }

    /// Next uniform integer in `[1, modulus]`. `modulus` must be non-zero.
    pub fn next_in_range(&mut self, modulus: u64) -> u64 {
        debug_assert!(modulus >= 1);
        let zone = (u64::MAX / modulus) * modulus;
        loop {
            let x = self.next_word();
            if x < zone {
                return x % modulus + 1;
            }
        }
    }
}

/// `count` independent uniform integers in `[1, modulus]`.
pub fn prg_expand(
    seed: &[u8; 32],
    domain_tag: &[u8],
    count: usize,
    modulus: u64,
) -> Result<Vec<u64>, CryptoError> {
    if modulus == 0 {
        return Err(CryptoError::InvalidParameter(
            "modulus must be at least 1".into(),
        ));
    }
    let mut stream = PrgStream::new(seed, domain_tag);
    Ok((0..count).map(|_| stream.next_in_range(modulus)).collect())
}

/// The first `count` distinct values of the [`prg_expand`] stream, in stream order.
pub fn prg_distinct(
    seed: &[u8; 32],
    domain_tag: &[u8],
    count: usize,
    modulus: u64,
) -> Result<Vec<u64>, CryptoError> {
    if modulus == 0 || count as u64 > modulus {
        return Err(CryptoError::InvalidParameter(format!(
            "cannot draw {count} distinct values from [1, {modulus}]"
        )));
    }
    let mut stream = PrgStream::new(seed, domain_tag);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v = stream.next_in_range(modulus);
        if seen.insert(v) {
            out.push(v);
        }
    }
    Ok(out)
}
