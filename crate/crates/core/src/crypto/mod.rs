//! Cryptographic primitives shared by every role.
//!
//! * [`sig`]: EUF-CMA signatures (Ed25519) for devices and the manufacturer.
//! * [`threshold`]: n-of-n threshold ElGamal encryption and n-of-n Schnorr
//!   group signatures for the custodian group, keyed by a trusted dealer.
//! * [`prg`]: a SHA-256 counter-mode expander producing uniform integers.
//!
//! Every operation is a pure function of its inputs plus an injected RNG.

pub mod prg;
pub mod sig;
pub mod threshold;

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use prg::{prg_distinct, prg_expand, PrgStream};
pub use sig::{
    keygen, sign, unlock_message, verify, verify_batch, SigKeyPair, Signature, VerifyKey,
};
pub use threshold::{
    aggregate_signature, combine, group_sign, partial_decrypt, threshold_encrypt, threshold_keygen,
    Ciphertext, CustodianKeyMaterial, EncryptionKey, GroupSignature, GroupVerifyKey, KeyShare,
    PartialDecryption, PartialSignature, SigningCommitment, SigningNonce,
};

/// Length in bytes of an unlock nonce.
pub const NONCE_LEN: usize = 32;

/// SHA-256 over the concatenation of `parts`.
pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Fresh 32-byte nonce `r` bound into every unlock signature.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut bytes);
        Nonce(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for Nonce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Nonce({})", hex::encode(&self.0[..8]))
    }
}

/// Why a threshold combine could not produce a plaintext.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CombineFailure {
    #[error("expected {need} partial decryptions, got {have}")]
    Missing { have: usize, need: usize },
    #[error("duplicate partial decryption from share {0}")]
    Duplicate(u32),
    #[error("partial decryption from share {0} is malformed")]
    MalformedPartial(u32),
    #[error("ciphertext was produced under a different public key")]
    WrongKey,
    #[error("ciphertext is malformed")]
    MalformedCiphertext,
    #[error("authentication failed: a partial decryption or the ciphertext is corrupted")]
    Authentication,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("combine failure: {0}")]
    Combine(#[from] CombineFailure),
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error("group signing failed: {0}")]
    GroupSigning(String),
}
