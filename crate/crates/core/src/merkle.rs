//! Binary Merkle tree with domain-separated hashing.
//!
//! Leaf hash is `H(0x00 || leaf)`, internal node `H(0x01 || left || right)`.
//! When a level has an odd number of nodes the last one is paired with
//! itself. Leaf indices are 1-based throughout.
//!
//! A [`MerklePathProof`] serializes as
//! `leaf_index (8 BE) || sibling count (4 BE) || (side (1) || hash (32))*`,
//! with side `0` meaning the sibling is on the left and `1` on the right.

use std::fmt;

use thiserror::Error;

use crate::crypto::sha256;

const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("cannot build a Merkle tree over an empty list")]
    Empty,
    #[error("leaf index {index} outside [1, {len}]")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("malformed proof encoding: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MerkleRoot(pub [u8; 32]);

impl MerkleRoot {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for MerkleRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MerkleRoot({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for MerkleRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerklePathProof {
    pub leaf_index: u64,
    pub siblings: Vec<(Side, [u8; 32])>,
}

impl MerklePathProof {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 33 * self.siblings.len());
        out.extend_from_slice(&self.leaf_index.to_be_bytes());
        out.extend_from_slice(&(self.siblings.len() as u32).to_be_bytes());
        for (side, hash) in &self.siblings {
            out.push(match side {
                Side::Left => 0,
                Side::Right => 1,
            });
            out.extend_from_slice(hash);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MerkleError> {
        if bytes.len() < 12 {
            return Err(MerkleError::Malformed("proof header truncated"));
        }
        let leaf_index = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
        let count = u32::from_be_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() != count * 33 {
            return Err(MerkleError::Malformed(
                "sibling count does not match length",
            ));
        }
        let siblings = body
            .chunks_exact(33)
            .map(|chunk| {
                let side = match chunk[0] {
                    0 => Side::Left,
                    1 => Side::Right,
                    _ => return Err(MerkleError::Malformed("side byte must be 0 or 1")),
                };
                Ok((side, chunk[1..].try_into().expect("32 bytes")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MerklePathProof {
            leaf_index,
            siblings,
        })
    }
}

pub fn leaf_hash(leaf: &[u8]) -> [u8; 32] {
    sha256(&[&[LEAF_PREFIX], leaf])
}

pub fn node_hash(left: &[u8; 32], right: &[u8; 32]) -> [u8; 32] {
    sha256(&[&[NODE_PREFIX], left, right])
}

/// Fully materialized tree; `levels[0]` holds the leaf hashes.
#[derive(Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<[u8; 32]>>,
}

impl MerkleTree {
    pub fn build<L: AsRef<[u8]>>(leaves: &[L]) -> Result<Self, MerkleError> {
        Self::from_leaf_hashes(leaves.iter().map(|l| leaf_hash(l.as_ref())).collect())
    }

    pub fn from_leaf_hashes(hashes: Vec<[u8; 32]>) -> Result<Self, MerkleError> {
        if hashes.is_empty() {
            return Err(MerkleError::Empty);
        }
        let mut levels = vec![hashes];
        while levels.last().expect("non-empty").len() > 1 {
            let level = levels.last().expect("non-empty");
            let next = level
                .chunks(2)
                .map(|pair| match pair {
                    [l, r] => node_hash(l, r),
                    [only] => node_hash(only, only),
                    _ => unreachable!(),
                })
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { levels })
    }

    pub fn root(&self) -> MerkleRoot {
        MerkleRoot(self.levels.last().expect("non-empty")[0])
    }

    pub fn len(&self) -> u64 {
        self.levels[0].len() as u64
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn path(&self, index: u64) -> Result<MerklePathProof, MerkleError> {
        let len = self.len();
        if index == 0 || index > len {
            return Err(MerkleError::IndexOutOfRange { index, len });
        }
        let mut pos = (index - 1) as usize;
        let mut siblings = Vec::with_capacity(self.levels.len() - 1);
        for level in &self.levels[..self.levels.len() - 1] {
            if pos.is_multiple_of(2) {
                let sibling = level.get(pos + 1).unwrap_or(&level[pos]);
                siblings.push((Side::Right, *sibling));
            } else {
                siblings.push((Side::Left, level[pos - 1]));
            }
            pos /= 2;
        }
        Ok(MerklePathProof {
            leaf_index: index,
            siblings,
        })
    }
}

impl fmt::Debug for MerkleTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MerkleTree")
            .field("leaves", &self.len())
            .field("root", &self.root())
            .finish()
    }
}

pub fn merkle_digest<L: AsRef<[u8]>>(leaves: &[L]) -> Result<MerkleRoot, MerkleError> {
    MerkleTree::build(leaves).map(|t| t.root())
}

pub fn merkle_path<L: AsRef<[u8]>>(
    leaves: &[L],
    index: u64,
) -> Result<MerklePathProof, MerkleError> {
    MerkleTree::build(leaves)?.path(index)
}

/// Accepts iff `leaf` sits at `proof.leaf_index` under `root`.
///
/// Sibling sides must agree with the bits of `leaf_index - 1`, and the index
/// may not carry bits above the proof height.
pub fn merkle_verify(proof: &MerklePathProof, leaf: &[u8], root: &MerkleRoot) -> bool {
    if proof.leaf_index == 0 || proof.siblings.len() >= 64 {
        return false;
    }
    let pos = proof.leaf_index - 1;
    if pos >> proof.siblings.len() != 0 {
        return false;
    }
    let mut acc = leaf_hash(leaf);
    for (level, (side, sibling)) in proof.siblings.iter().enumerate() {
        let bit = (pos >> level) & 1;
        acc = match (side, bit) {
            (Side::Right, 0) => node_hash(&acc, sibling),
            (Side::Left, 1) => node_hash(sibling, &acc),
            _ => return false,
        };
    }
    acc == root.0
}
