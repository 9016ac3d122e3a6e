//! n-of-n threshold primitives for the custodian group over Ristretto255.
//!
//! Encryption is hashed ElGamal: `R = rG`, shared point `S = r·PK`, payload
//! sealed with ChaCha20-Poly1305 under `SHA-256(R || S)`. The group secret is
//! additively shared, `sk = Σ skᵢ`, so each custodian's partial decryption is
//! `Sᵢ = skᵢ·R` and `S = Σ Sᵢ`. Missing or corrupted partials produce the
//! wrong `S` and the AEAD tag rejects.
//!
//! Group signatures are two-round Schnorr with additive key shares: each
//! custodian commits `Rᵢ = kᵢG`, then answers `sᵢ = kᵢ + c·xᵢ` where
//! `c = H(R || X || m)` and `R = Σ Rᵢ`. A single abstaining custodian blocks
//! both operations.
//!
//! Key generation uses a trusted dealer in place of a DKG run.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{
    CompressedRistretto, RistrettoBasepointTable, RistrettoPoint, VartimeRistrettoPrecomputation,
};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::VartimePrecomputedMultiscalarMul;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};

use super::{sha256, CombineFailure, CryptoError};

const KEM_TAG: &[u8] = b"JJE-KEM";
const PK_TAG: &[u8] = b"JJE-PKJ";
const GSIG_TAG: &[u8] = b"JJE-GSIG";
const AEAD_NONCE: [u8; 12] = [0u8; 12];
const AEAD_OVERHEAD: usize = 16;

/// Group public encryption key `pk_J` and the number of shares it was split into.
///
/// Clones share one precomputed multiplication table, so every device can
/// hold the key cheaply and encrypt with fixed-base speed.
#[derive(Clone)]
pub struct EncryptionKey {
    point: RistrettoPoint,
    parties: u32,
    compressed: [u8; 32],
    tag: [u8; 32],
    table: Arc<RistrettoBasepointTable>,
}

impl PartialEq for EncryptionKey {
    fn eq(&self, other: &Self) -> bool {
        self.compressed == other.compressed && self.parties == other.parties
    }
}

impl Eq for EncryptionKey {}

impl EncryptionKey {
    fn new(point: RistrettoPoint, parties: u32) -> Self {
        let compressed = point.compress().to_bytes();
        EncryptionKey {
            point,
            parties,
            compressed,
            tag: sha256(&[PK_TAG, &compressed, &parties.to_be_bytes()]),
            table: Arc::new(RistrettoBasepointTable::create(&point)),
        }
    }

    pub fn parties(&self) -> u32 {
        self.parties
    }

    /// Identifies this key inside ciphertexts.
    pub fn tag(&self) -> [u8; 32] {
        self.tag
    }

    pub fn to_bytes(&self) -> [u8; 36] {
        let mut out = [0u8; 36];
        out[..32].copy_from_slice(&self.compressed);
        out[32..].copy_from_slice(&self.parties.to_be_bytes());
        out
    }
}

impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "EncryptionKey({}, k={})",
            hex::encode(&self.point.compress().as_bytes()[..8]),
            self.parties
        )
    }
}

/// Group verification key `vk_J`.
///
/// Carries a shared precomputation over `(G, X)` for verification.
#[derive(Clone)]
pub struct GroupVerifyKey {
    parties: u32,
    compressed: [u8; 32],
    precomputed: Arc<VartimeRistrettoPrecomputation>,
}

impl PartialEq for GroupVerifyKey {
    fn eq(&self, other: &Self) -> bool {
        self.compressed == other.compressed && self.parties == other.parties
    }
}

impl Eq for GroupVerifyKey {}

impl GroupVerifyKey {
    fn new(point: RistrettoPoint, parties: u32) -> Self {
        GroupVerifyKey {
            parties,
            compressed: point.compress().to_bytes(),
            precomputed: Arc::new(VartimeRistrettoPrecomputation::new([
                RISTRETTO_BASEPOINT_POINT,
                point,
            ])),
        }
    }

    pub fn parties(&self) -> u32 {
        self.parties
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.compressed
    }

    pub fn verify(&self, message: &[u8], signature: &GroupSignature) -> bool {
        let Some(r) = CompressedRistretto(signature.r).decompress() else {
            return false;
        };
        let Some(s) = Option::<Scalar>::from(Scalar::from_canonical_bytes(signature.s)) else {
            return false;
        };
        let c = challenge_scalar(&signature.r, &self.to_bytes(), message);
        // sG - cX == R
        self.precomputed.vartime_multiscalar_mul([s, -c]) == r
    }
}

impl fmt::Debug for GroupVerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupVerifyKey({})", hex::encode(&self.to_bytes()[..8]))
    }
}

/// One custodian's secret material: its additive shares of the group
/// decryption and signing keys.
#[derive(Clone)]
pub struct KeyShare {
    index: u32,
    enc: Scalar,
    sig: Scalar,
}

impl KeyShare {
    /// 1-based custodian index.
    pub fn index(&self) -> u32 {
        self.index
    }
}

impl fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyShare")
            .field("index", &self.index)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct CustodianKeyMaterial {
    pub public_enc_key: EncryptionKey,
    pub group_verify_key: GroupVerifyKey,
    pub shares: Vec<KeyShare>,
}

/// Trusted-dealer key generation for `k` custodians.
pub fn threshold_keygen<R: RngCore + CryptoRng>(
    k: u32,
    rng: &mut R,
) -> Result<CustodianKeyMaterial, CryptoError> {
    if k == 0 {
        return Err(CryptoError::InvalidParameter(
            "custodian count must be at least 1".into(),
        ));
    }
    let shares: Vec<KeyShare> = (1..=k)
        .map(|index| KeyShare {
            index,
            enc: Scalar::random(rng),
            sig: Scalar::random(rng),
        })
        .collect();
    let enc_secret: Scalar = shares.iter().map(|s| s.enc).sum();
    let sig_secret: Scalar = shares.iter().map(|s| s.sig).sum();
    Ok(CustodianKeyMaterial {
        public_enc_key: EncryptionKey::new(RistrettoPoint::mul_base(&enc_secret), k),
        group_verify_key: GroupVerifyKey::new(RistrettoPoint::mul_base(&sig_secret), k),
        shares,
    })
}

/// Randomized threshold ciphertext.
#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    key_tag: [u8; 32],
    ephemeral: [u8; 32],
    body: Vec<u8>,
}

impl Ciphertext {
    pub fn key_tag(&self) -> &[u8; 32] {
        &self.key_tag
    }

    /// `key_tag (32) || ephemeral point (32) || sealed body`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.body.len());
        out.extend_from_slice(&self.key_tag);
        out.extend_from_slice(&self.ephemeral);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 64 + AEAD_OVERHEAD {
            return Err(CryptoError::Malformed("ciphertext too short"));
        }
        Ok(Ciphertext {
            key_tag: bytes[..32].try_into().expect("length checked"),
            ephemeral: bytes[32..64].try_into().expect("length checked"),
            body: bytes[64..].to_vec(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        64 + self.body.len()
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Ciphertext({}.., {} bytes)",
            hex::encode(&self.ephemeral[..6]),
            self.encoded_len()
        )
    }
}

fn kem_key(ephemeral: &[u8; 32], shared: &RistrettoPoint) -> [u8; 32] {
    sha256(&[KEM_TAG, ephemeral, shared.compress().as_bytes()])
}

pub fn threshold_encrypt<R: RngCore + CryptoRng>(
    pk: &EncryptionKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Ciphertext {
    let r = Scalar::random(rng);
    let ephemeral = RistrettoPoint::mul_base(&r).compress().to_bytes();
    let shared = &r * &*pk.table;
    let key_tag = pk.tag();
    let cipher = ChaCha20Poly1305::new(&kem_key(&ephemeral, &shared).into());
    let body = cipher
        .encrypt(
            &AEAD_NONCE.into(),
            Payload {
                msg: plaintext,
                aad: &key_tag,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    Ciphertext {
        key_tag,
        ephemeral,
        body,
    }
}

/// One custodian's contribution `Sᵢ = skᵢ·R`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PartialDecryption {
    pub index: u32,
    pub point: [u8; 32],
}

impl PartialDecryption {
    pub fn to_bytes(&self) -> [u8; 36] {
        let mut out = [0u8; 36];
        out[..4].copy_from_slice(&self.index.to_be_bytes());
        out[4..].copy_from_slice(&self.point);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 36 {
            return Err(CryptoError::Malformed(
                "partial decryption must be 36 bytes",
            ));
        }
        Ok(PartialDecryption {
            index: u32::from_be_bytes(bytes[..4].try_into().expect("length checked")),
            point: bytes[4..].try_into().expect("length checked"),
        })
    }
}

impl fmt::Debug for PartialDecryption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PartialDecryption({}, {})",
            self.index,
            hex::encode(&self.point[..6])
        )
    }
}

pub fn partial_decrypt(
    share: &KeyShare,
    ciphertext: &Ciphertext,
) -> Result<PartialDecryption, CryptoError> {
    let ephemeral = CompressedRistretto(ciphertext.ephemeral)
        .decompress()
        .ok_or(CryptoError::Malformed(
            "ephemeral point does not decompress",
        ))?;
    Ok(PartialDecryption {
        index: share.index,
        point: (share.enc * ephemeral).compress().to_bytes(),
    })
}

/// Recombine exactly `k` distinct partials and open the ciphertext.
pub fn combine(
    pk: &EncryptionKey,
    partials: &[PartialDecryption],
    ciphertext: &Ciphertext,
) -> Result<Vec<u8>, CombineFailure> {
    if ciphertext.key_tag != pk.tag() {
        return Err(CombineFailure::WrongKey);
    }
    let need = pk.parties as usize;
    if partials.len() != need {
        return Err(CombineFailure::Missing {
            have: partials.len(),
            need,
        });
    }
    let mut seen = BTreeSet::new();
    let mut shared = RistrettoPoint::default();
    for p in partials {
        if p.index == 0 || p.index > pk.parties {
            return Err(CombineFailure::MalformedPartial(p.index));
        }
        if !seen.insert(p.index) {
            return Err(CombineFailure::Duplicate(p.index));
        }
        let point = CompressedRistretto(p.point)
            .decompress()
            .ok_or(CombineFailure::MalformedPartial(p.index))?;
        shared += point;
    }
    if CompressedRistretto(ciphertext.ephemeral)
        .decompress()
        .is_none()
    {
        return Err(CombineFailure::MalformedCiphertext);
    }
    let cipher = ChaCha20Poly1305::new(&kem_key(&ciphertext.ephemeral, &shared).into());
    cipher
        .decrypt(
            &AEAD_NONCE.into(),
            Payload {
                msg: &ciphertext.body,
                aad: &ciphertext.key_tag,
            },
        )
        .map_err(|_| CombineFailure::Authentication)
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupSignature {
    r: [u8; 32],
    s: [u8; 32],
}

impl GroupSignature {
    pub const LEN: usize = 64;

    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.r);
        out[32..].copy_from_slice(&self.s);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 64 {
            return Err(CryptoError::Malformed("group signature must be 64 bytes"));
        }
        Ok(GroupSignature {
            r: bytes[..32].try_into().expect("length checked"),
            s: bytes[32..].try_into().expect("length checked"),
        })
    }
}

impl fmt::Debug for GroupSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupSignature({})", hex::encode(&self.r[..8]))
    }
}

fn challenge_scalar(r: &[u8; 32], vk: &[u8; 32], message: &[u8]) -> Scalar {
    let mut h = Sha512::new();
    h.update(GSIG_TAG);
    h.update(r);
    h.update(vk);
    h.update(message);
    Scalar::from_bytes_mod_order_wide(&h.finalize().into())
}

/// Secret per-signature nonce from round one. Consumed by [`KeyShare::sign_partial`].
pub struct SigningNonce {
    index: u32,
    k: Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SigningCommitment {
    pub index: u32,
    pub point: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartialSignature {
    pub index: u32,
    s: [u8; 32],
}

fn aggregate_commitments(
    vk: &GroupVerifyKey,
    commitments: &[SigningCommitment],
) -> Result<[u8; 32], CryptoError> {
    let mut seen = BTreeSet::new();
    let mut r = RistrettoPoint::default();
    for c in commitments {
        if c.index == 0 || c.index > vk.parties || !seen.insert(c.index) {
            return Err(CryptoError::GroupSigning(format!(
                "bad or duplicate commitment from {}",
                c.index
            )));
        }
        r += CompressedRistretto(c.point).decompress().ok_or_else(|| {
            CryptoError::GroupSigning(format!("malformed commitment {}", c.index))
        })?;
    }
    if seen.len() != vk.parties as usize {
        return Err(CryptoError::GroupSigning(format!(
            "{} of {} custodians committed",
            seen.len(),
            vk.parties
        )));
    }
    Ok(r.compress().to_bytes())
}

impl KeyShare {
    /// Round one: fresh nonce and its public commitment.
    pub fn commit<R: RngCore + CryptoRng>(&self, rng: &mut R) -> (SigningNonce, SigningCommitment) {
        let k = Scalar::random(rng);
        let point = RistrettoPoint::mul_base(&k).compress().to_bytes();
        (
            SigningNonce {
                index: self.index,
                k,
            },
            SigningCommitment {
                index: self.index,
                point,
            },
        )
    }

    /// Round two: this custodian's response over the full commitment set.
    pub fn sign_partial(
        &self,
        nonce: SigningNonce,
        commitments: &[SigningCommitment],
        vk: &GroupVerifyKey,
        message: &[u8],
    ) -> Result<PartialSignature, CryptoError> {
        if nonce.index != self.index {
            return Err(CryptoError::GroupSigning(
                "nonce belongs to another share".into(),
            ));
        }
        let r = aggregate_commitments(vk, commitments)?;
        let c = challenge_scalar(&r, &vk.to_bytes(), message);
        Ok(PartialSignature {
            index: self.index,
            s: (nonce.k + c * self.sig).to_bytes(),
        })
    }
}

/// Sum all `k` partial responses into a signature and check it.
pub fn aggregate_signature(
    vk: &GroupVerifyKey,
    commitments: &[SigningCommitment],
    partials: &[PartialSignature],
    message: &[u8],
) -> Result<GroupSignature, CryptoError> {
    let r = aggregate_commitments(vk, commitments)?;
    let signers: BTreeSet<u32> = partials.iter().map(|p| p.index).collect();
    let committed: BTreeSet<u32> = commitments.iter().map(|c| c.index).collect();
    if signers != committed || partials.len() != signers.len() {
        return Err(CryptoError::GroupSigning(format!(
            "{} of {} custodians responded",
            signers.len(),
            vk.parties
        )));
    }
    let mut s = Scalar::ZERO;
    for p in partials {
        s += Option::<Scalar>::from(Scalar::from_canonical_bytes(p.s)).ok_or_else(|| {
            CryptoError::GroupSigning(format!("non-canonical response from {}", p.index))
        })?;
    }
    let sig = GroupSignature { r, s: s.to_bytes() };
    if !vk.verify(message, &sig) {
        return Err(CryptoError::GroupSigning(
            "aggregate signature does not verify".into(),
        ));
    }
    Ok(sig)
}

/// Both signing rounds run locally over every share. Used by tests and by
/// the dealer-side signer; custodians run the rounds themselves.
pub fn group_sign<R: RngCore + CryptoRng>(
    shares: &[KeyShare],
    vk: &GroupVerifyKey,
    message: &[u8],
    rng: &mut R,
) -> Result<GroupSignature, CryptoError> {
    let (nonces, commitments): (Vec<_>, Vec<_>) = shares.iter().map(|s| s.commit(rng)).unzip();
    let partials = shares
        .iter()
        .zip(nonces)
        .map(|(share, nonce)| share.sign_partial(nonce, &commitments, vk, message))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate_signature(vk, &commitments, &partials, message)
}
