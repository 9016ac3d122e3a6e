//! Ed25519 signatures for delegate devices and the manufacturer.

use std::cmp::Ordering;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};

use super::{CryptoError, Nonce};

/// Domain tag prefixed to every delegate signature over an unlock nonce.
pub const UNLOCK_TAG: &[u8] = b"JJE-UNLOCK";

/// Public verification key (`vk_d` or `vk_M`).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct VerifyKey(VerifyingKey);

impl VerifyKey {
    pub const LEN: usize = 32;

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CryptoError::Malformed("verify key must be 32 bytes"))?;
        VerifyingKey::from_bytes(&arr)
            .map(VerifyKey)
            .map_err(|_| CryptoError::Malformed("verify key is not a curve point"))
    }
}

impl Ord for VerifyKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.as_bytes().cmp(other.as_bytes())
    }
}

impl PartialOrd for VerifyKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({})", hex::encode(&self.as_bytes()[..8]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(ed25519_dalek::Signature);

impl Signature {
    pub const LEN: usize = 64;

    pub fn to_bytes(&self) -> [u8; 64] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 64] = bytes
            .try_into()
            .map_err(|_| CryptoError::Malformed("signature must be 64 bytes"))?;
        Ok(Signature(ed25519_dalek::Signature::from_bytes(&arr)))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.to_bytes()[..8]))
    }
}

/// Signing/verification key pair. The signing half never leaves its owner.
#[derive(Clone)]
pub struct SigKeyPair {
    signing: SigningKey,
}

impl SigKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        SigKeyPair {
            signing: SigningKey::generate(rng),
        }
    }

    /// Deterministic key pair from a 32-byte secret seed.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        SigKeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn verify_key(&self) -> VerifyKey {
        VerifyKey(self.signing.verifying_key())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message))
    }
}

impl fmt::Debug for SigKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigKeyPair")
            .field("verify_key", &self.verify_key())
            .finish_non_exhaustive()
    }
}

pub fn keygen<R: RngCore + CryptoRng>(rng: &mut R) -> SigKeyPair {
    SigKeyPair::generate(rng)
}

pub fn sign(keypair: &SigKeyPair, message: &[u8]) -> Signature {
    keypair.sign(message)
}

/// Strict Ed25519 verification (rejects small-order keys and non-canonical `S`).
pub fn verify(key: &VerifyKey, message: &[u8], signature: &Signature) -> bool {
    key.0.verify_strict(message, &signature.0).is_ok()
}

/// Batch verification; `true` only if every triple verifies.
///
/// Batch acceptance is slightly weaker than [`verify`] for adversarial
/// small-order inputs, so callers that get `false` should fall back to
/// per-item checks to locate the culprit.
pub fn verify_batch(keys: &[VerifyKey], messages: &[&[u8]], signatures: &[Signature]) -> bool {
    if keys.is_empty() {
        return true;
    }
    let keys: Vec<VerifyingKey> = keys.iter().map(|k| k.0).collect();
    let sigs: Vec<ed25519_dalek::Signature> = signatures.iter().map(|s| s.0).collect();
    ed25519_dalek::verify_batch(messages, &sigs, &keys).is_ok()
}

/// The string a delegate signs for an unlock request: `"JJE-UNLOCK" || epoch || r`.
pub fn unlock_message(epoch: u64, nonce: &Nonce) -> Vec<u8> {
    let mut msg = Vec::with_capacity(UNLOCK_TAG.len() + 8 + nonce.0.len());
    msg.extend_from_slice(UNLOCK_TAG);
    msg.extend_from_slice(&epoch.to_be_bytes());
    msg.extend_from_slice(&nonce.0);
    msg
}
