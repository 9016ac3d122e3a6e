//! Software model of a device's secure enclave.
//!
//! [`Enclave`] is the whole mailbox interface: every request goes through a
//! method and nothing else of the internal state is reachable. The delegation
//! selection `L` only ever leaves inside a threshold ciphertext.
//!
//! Wire formats:
//!
//! ```text
//! sealed selection  = count (4 BE) || index (8 BE)* || nonce (32)
//! sealed seed       = 0xFFFFFFFF   || seed (32)     || nonce (32)
//! challenge         = epoch (8 BE) || len (4 BE) || ciphertext
//! unlock response   = count (4 BE) || (index (8) || len || entry || signature (64) || len || proof)*
//!                     || has_jurisdiction (1) [|| len || name || root (32) || N (8) || len || proof]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{seq::index, CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::crypto::{
    self, prg_distinct, threshold_encrypt, unlock_message, Ciphertext, CryptoError, EncryptionKey,
    GroupSignature, GroupVerifyKey, Nonce, SigKeyPair, Signature, VerifyKey, NONCE_LEN,
};
use crate::merkle::{MerklePathProof, MerkleRoot};
use crate::registry::{
    verify_entry, verify_header, DelegateEntry, DeviceId, JurisdictionBinding, JurisdictionRoot,
    KeyDbHeader, Reader, RegistryError,
};

/// Simulation steps are days.
pub const STEPS_PER_MONTH: u64 = 30;
pub const DEFAULT_EPOCH_LENGTH: u64 = 7;
pub const DEFAULT_FREEZE_PERIOD: u64 = DEFAULT_EPOCH_LENGTH;
pub const DEFAULT_FAILSAFE_TIMEOUT: u64 = 6 * STEPS_PER_MONTH;

const SEED_MARKER: u32 = u32::MAX;
const FAILSAFE_TAG: &[u8] = b"JJE-FAILSAFE";

/// Delegation size `D` and unlock threshold `t`, with `1 ≤ t ≤ D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelegationParams {
    size: usize,
    threshold: usize,
}

impl DelegationParams {
    pub fn new(size: usize, threshold: usize) -> Result<Self, DeviceError> {
        if threshold == 0 || threshold > size {
            return Err(DeviceError::InvalidParams { size, threshold });
        }
        Ok(DelegationParams { size, threshold })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EnclaveConfig {
    pub params: DelegationParams,
    pub freeze_period: u64,
    pub failsafe_timeout: u64,
}

impl EnclaveConfig {
    pub fn new(params: DelegationParams) -> Self {
        EnclaveConfig {
            params,
            freeze_period: DEFAULT_FREEZE_PERIOD,
            failsafe_timeout: DEFAULT_FAILSAFE_TIMEOUT,
        }
    }
}

/// Public keys provisioned at manufacture.
#[derive(Debug, Clone)]
pub struct TrustAnchors {
    pub manufacturer: VerifyKey,
    pub custodian_enc: EncryptionKey,
    pub custodian_vk: GroupVerifyKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("invalid delegation parameters D={size}, t={threshold}")]
    InvalidParams { size: usize, threshold: usize },
    #[error("header signature does not verify under the custodian key")]
    HeaderSignature,
    #[error("list of {n} devices is smaller than the delegation size {d}")]
    Population { n: u64, d: usize },
    #[error("epoch updates are frozen until step {until}")]
    Frozen { until: u64 },
    #[error("header epoch {offered} is not newer than current epoch {current}")]
    StaleEpoch { current: u64, offered: u64 },
    #[error("no delegation has been selected")]
    NoSelection,
    #[error("no key registered for epoch {0}")]
    UnknownEpoch(u64),
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl From<RegistryError> for DeviceError {
    fn from(e: RegistryError) -> Self {
        DeviceError::Malformed(e.to_string())
    }
}

impl From<CryptoError> for DeviceError {
    fn from(e: CryptoError) -> Self {
        DeviceError::Malformed(e.to_string())
    }
}

/// Why `DeviceUnlock` or the failsafe output `⊥`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UnlockRejection {
    #[error("no outstanding challenge")]
    NoChallenge,
    #[error("{have} signatures, threshold is {need}")]
    TooFewSignatures { have: usize, need: usize },
    #[error("index {0} appears twice")]
    DuplicateIndex(u64),
    #[error("index {0} is outside the list")]
    IndexOutOfRange(u64),
    #[error("index {0} is not in the delegation")]
    NotInDelegation(u64),
    #[error("Merkle proof for index {0} does not verify")]
    BadProof(u64),
    #[error("signature at index {0} does not verify")]
    BadSignature(u64),
    #[error("jurisdiction binding rejected: {0}")]
    Jurisdiction(&'static str),
    #[error("failsafe timeout has not elapsed")]
    Premature,
    #[error("password not used since the last epoch update")]
    PasswordNotUsed,
    #[error("failsafe request is not signed by the custodians")]
    BadRequestSignature,
}

/// Secret released on a verified unlock.
#[derive(Clone, PartialEq, Eq)]
pub struct UnlockToken(pub Vec<u8>);

impl fmt::Debug for UnlockToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("UnlockToken(..)")
    }
}

/// The plaintext inside a challenge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SealedSelection {
    /// Sorted, distinct 1-based indices into the epoch list.
    Indices(Vec<u64>),
    /// Jurisdiction mode: indices derive from this seed per presented list.
    Seed([u8; 32]),
}

impl SealedSelection {
    pub fn encode(&self, nonce: &Nonce) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            SealedSelection::Indices(l) => {
                out.extend_from_slice(&(l.len() as u32).to_be_bytes());
                for j in l {
                    out.extend_from_slice(&j.to_be_bytes());
                }
            }
            SealedSelection::Seed(seed) => {
                out.extend_from_slice(&SEED_MARKER.to_be_bytes());
                out.extend_from_slice(seed);
            }
        }
        out.extend_from_slice(nonce.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(SealedSelection, Nonce), DeviceError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()?;
        let selection = if count == SEED_MARKER {
            SealedSelection::Seed(r.take(32)?.try_into().expect("32 bytes"))
        } else {
            let mut l = Vec::with_capacity(count.min(4096) as usize);
            for _ in 0..count {
                l.push(r.u64()?);
            }
            SealedSelection::Indices(l)
        };
        let nonce = Nonce(r.take(NONCE_LEN)?.try_into().expect("32 bytes"));
        r.finish()?;
        Ok((selection, nonce))
    }
}

/// `chal = Enc_pkJ(L || r)` tagged with the epoch whose list `L` indexes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub epoch: u64,
    pub ciphertext: Ciphertext,
}

impl Challenge {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ct = self.ciphertext.to_bytes();
        let mut out = Vec::with_capacity(12 + ct.len());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&(ct.len() as u32).to_be_bytes());
        out.extend_from_slice(&ct);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DeviceError> {
        let mut r = Reader::new(bytes);
        let epoch = r.u64()?;
        let ciphertext = Ciphertext::from_bytes(r.len_prefixed()?)?;
        r.finish()?;
        Ok(Challenge { epoch, ciphertext })
    }
}

/// One element of `S`: index, entry, signature over the nonce, and its Merkle proof.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEntry {
    pub index: u64,
    pub entry: DelegateEntry,
    pub signature: Signature,
    pub proof: MerklePathProof,
}

/// `(S, M)` handed to `DeviceUnlock`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnlockResponse {
    pub entries: Vec<SignedEntry>,
    pub jurisdiction: Option<JurisdictionBinding>,
}

impl UnlockResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.index.to_be_bytes());
            let entry = e.entry.to_bytes();
            out.extend_from_slice(&(entry.len() as u32).to_be_bytes());
            out.extend_from_slice(&entry);
            out.extend_from_slice(&e.signature.to_bytes());
            let proof = e.proof.to_bytes();
            out.extend_from_slice(&(proof.len() as u32).to_be_bytes());
            out.extend_from_slice(&proof);
        }
        match &self.jurisdiction {
            None => out.push(0),
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.jurisdiction.name.len() as u32).to_be_bytes());
                out.extend_from_slice(b.jurisdiction.name.as_bytes());
                out.extend_from_slice(b.jurisdiction.root.as_bytes());
                out.extend_from_slice(&b.jurisdiction.device_count.to_be_bytes());
                let proof = b.proof.to_bytes();
                out.extend_from_slice(&(proof.len() as u32).to_be_bytes());
                out.extend_from_slice(&proof);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DeviceError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let index = r.u64()?;
            let entry = DelegateEntry::from_bytes(r.len_prefixed()?)?;
            let signature = Signature::from_bytes(r.take(Signature::LEN)?)?;
            let proof = MerklePathProof::from_bytes(r.len_prefixed()?)
                .map_err(|e| DeviceError::Malformed(e.to_string()))?;
            entries.push(SignedEntry {
                index,
                entry,
                signature,
                proof,
            });
        }
        let jurisdiction = match r.take(1)?[0] {
            0 => None,
            1 => {
                let name = String::from_utf8(r.len_prefixed()?.to_vec())
                    .map_err(|_| DeviceError::Malformed("jurisdiction name is not UTF-8".into()))?;
                let root = MerkleRoot(r.take(32)?.try_into().expect("32 bytes"));
                let device_count = r.u64()?;
                let proof = MerklePathProof::from_bytes(r.len_prefixed()?)
                    .map_err(|e| DeviceError::Malformed(e.to_string()))?;
                Some(JurisdictionBinding {
                    jurisdiction: JurisdictionRoot {
                        name,
                        root,
                        device_count,
                    },
                    proof,
                })
            }
            _ => return Err(DeviceError::Malformed("bad jurisdiction flag".into())),
        };
        r.finish()?;
        Ok(UnlockResponse {
            entries,
            jurisdiction,
        })
    }
}

/// `D` distinct uniform indices in `[1, n]`, sorted.
pub fn sample_delegation<R: Rng + ?Sized>(rng: &mut R, n: u64, d: usize) -> Vec<u64> {
    let n_usize = usize::try_from(n).expect("list size fits in usize");
    let mut l: Vec<u64> = index::sample(rng, n_usize, d)
        .into_iter()
        .map(|i| i as u64 + 1)
        .collect();
    l.sort_unstable();
    l
}

/// Seed-mode delegation over one jurisdiction's list, sorted.
pub fn delegation_indices(
    seed: &[u8; 32],
    jurisdiction_root: &MerkleRoot,
    d: usize,
    n: u64,
) -> Result<Vec<u64>, CryptoError> {
    let mut l = prg_distinct(seed, jurisdiction_root.as_bytes(), d, n)?;
    l.sort_unstable();
    Ok(l)
}

/// What the custodians sign to authorize a failsafe unlock of one challenge.
pub fn failsafe_message(epoch: u64, nonce: &Nonce) -> Vec<u8> {
    let mut msg = Vec::with_capacity(FAILSAFE_TAG.len() + 8 + NONCE_LEN);
    msg.extend_from_slice(FAILSAFE_TAG);
    msg.extend_from_slice(&epoch.to_be_bytes());
    msg.extend_from_slice(nonce.as_bytes());
    msg
}

#[derive(Clone)]
enum Selection {
    Indices(BTreeSet<u64>),
    Seed([u8; 32]),
}

#[derive(Clone)]
struct PendingChallenge {
    epoch: u64,
    nonce: Nonce,
}

/// Enclave state. All fields are private to the mailbox methods.
#[derive(Clone)]
pub struct Enclave {
    device_id: DeviceId,
    keys: BTreeMap<u64, SigKeyPair>,
    header: Option<KeyDbHeader>,
    selection: Option<Selection>,
    challenge: Option<PendingChallenge>,
    token: UnlockToken,
    frozen_until: Option<u64>,
    last_update_step: u64,
    last_password_step: Option<u64>,
    config: EnclaveConfig,
    trust: TrustAnchors,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("device_id", &self.device_id)
            .field("epoch", &self.current_epoch())
            .finish_non_exhaustive()
    }
}

impl Enclave {
    pub fn new(
        device_id: DeviceId,
        token: UnlockToken,
        trust: TrustAnchors,
        config: EnclaveConfig,
    ) -> Self {
        Enclave {
            device_id,
            keys: BTreeMap::new(),
            header: None,
            selection: None,
            challenge: None,
            token,
            frozen_until: None,
            last_update_step: 0,
            last_password_step: None,
            config,
            trust,
        }
    }

    pub fn device_id(&self) -> &DeviceId {
        &self.device_id
    }

    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn header(&self) -> Option<&KeyDbHeader> {
        self.header.as_ref()
    }

    pub fn current_epoch(&self) -> Option<u64> {
        self.header.map(|h| h.epoch)
    }

    pub fn is_frozen(&self, step: u64) -> bool {
        self.frozen_until.is_some_and(|until| step < until)
    }

    pub fn has_key_for(&self, epoch: u64) -> bool {
        self.keys.contains_key(&epoch)
    }

    /// `DelegateRegister`: fresh key pair for `target_epoch`, IMEI sealed to the custodians.
    pub fn delegate_register<R: RngCore + CryptoRng>(
        &mut self,
        target_epoch: u64,
        certify: &dyn Fn(&VerifyKey, &Ciphertext) -> Signature,
        rng: &mut R,
    ) -> DelegateEntry {
        let keys = SigKeyPair::generate(rng);
        let verify_key = keys.verify_key();
        let enc_device_id =
            threshold_encrypt(&self.trust.custodian_enc, self.device_id.as_bytes(), rng);
        self.keys.insert(target_epoch, keys);
        DelegateEntry {
            verify_key,
            manufacturer_sig: certify(&verify_key, &enc_device_id),
            enc_device_id,
        }
    }

    fn accept_header(&self, header: &KeyDbHeader, step: u64) -> Result<(), DeviceError> {
        if let Some(until) = self.frozen_until.filter(|&u| step < u) {
            return Err(DeviceError::Frozen { until });
        }
        if !verify_header(header, &self.trust.custodian_vk) {
            return Err(DeviceError::HeaderSignature);
        }
        if let Some(current) = self.current_epoch() {
            if header.epoch <= current {
                return Err(DeviceError::StaleEpoch {
                    current,
                    offered: header.epoch,
                });
            }
        }
        Ok(())
    }

    fn install(&mut self, header: &KeyDbHeader, selection: Selection, step: u64) {
        self.header = Some(*header);
        self.selection = Some(selection);
        self.challenge = None;
        self.frozen_until = None;
        self.last_update_step = step;
    }

    /// `SelectDelegation`: verify the header and draw `D` distinct indices.
    pub fn select_delegation<R: RngCore + CryptoRng>(
        &mut self,
        header: &KeyDbHeader,
        step: u64,
        rng: &mut R,
    ) -> Result<(), DeviceError> {
        self.accept_header(header, step)?;
        let d = self.config.params.size;
        if header.device_count < d as u64 {
            return Err(DeviceError::Population {
                n: header.device_count,
                d,
            });
        }
        let l = sample_delegation(rng, header.device_count, d);
        self.install(header, Selection::Indices(l.into_iter().collect()), step);
        Ok(())
    }

    /// Jurisdiction mode: verify the super-root header and store a random seed.
    pub fn select_delegation_seeded<R: RngCore + CryptoRng>(
        &mut self,
        super_header: &KeyDbHeader,
        step: u64,
        rng: &mut R,
    ) -> Result<(), DeviceError> {
        self.accept_header(super_header, step)?;
        let d = self.config.params.size;
        if super_header.device_count < d as u64 {
            return Err(DeviceError::Population {
                n: super_header.device_count,
                d,
            });
        }
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        self.install(super_header, Selection::Seed(seed), step);
        Ok(())
    }

    /// `RevealChallenge`: fresh nonce, sealed `(L, r)`, and an update freeze.
    pub fn reveal_challenge<R: RngCore + CryptoRng>(
        &mut self,
        step: u64,
        rng: &mut R,
    ) -> Result<Challenge, DeviceError> {
        let (Some(selection), Some(header)) = (&self.selection, &self.header) else {
            return Err(DeviceError::NoSelection);
        };
        let nonce = Nonce::random(rng);
        let sealed = match selection {
            Selection::Indices(l) => SealedSelection::Indices(l.iter().copied().collect()),
            Selection::Seed(s) => SealedSelection::Seed(*s),
        };
        let ciphertext = threshold_encrypt(&self.trust.custodian_enc, &sealed.encode(&nonce), rng);
        let epoch = header.epoch;
        self.challenge = Some(PendingChallenge { epoch, nonce });
        self.frozen_until = Some(step + self.config.freeze_period);
        Ok(Challenge { epoch, ciphertext })
    }

    /// `DelegateSignRequest`: sign `"JJE-UNLOCK" || epoch || r` with that epoch's key.
    /// The device stays locked.
    pub fn delegate_sign_request(
        &self,
        nonce: &Nonce,
        epoch: u64,
    ) -> Result<Signature, DeviceError> {
        let keys = self
            .keys
            .get(&epoch)
            .ok_or(DeviceError::UnknownEpoch(epoch))?;
        Ok(keys.sign(&unlock_message(epoch, nonce)))
    }

    /// `DeviceUnlock`: checks threshold, Merkle membership at `j`, `j ∈ L`,
    /// and each signature over the outstanding nonce.
    pub fn device_unlock(
        &mut self,
        response: &UnlockResponse,
    ) -> Result<UnlockToken, UnlockRejection> {
        let pending = self
            .challenge
            .as_ref()
            .ok_or(UnlockRejection::NoChallenge)?;
        let (Some(header), Some(selection)) = (&self.header, &self.selection) else {
            return Err(UnlockRejection::NoChallenge);
        };
        let params = self.config.params;

        let mut seen = BTreeSet::new();
        for e in &response.entries {
            if !seen.insert(e.index) {
                return Err(UnlockRejection::DuplicateIndex(e.index));
            }
        }
        if seen.len() < params.threshold {
            return Err(UnlockRejection::TooFewSignatures {
                have: seen.len(),
                need: params.threshold,
            });
        }

        let (root, n, delegation): (MerkleRoot, u64, BTreeSet<u64>) = match selection {
            Selection::Indices(l) => (header.merkle_root, header.device_count, l.clone()),
            Selection::Seed(seed) => {
                let binding =
                    response
                        .jurisdiction
                        .as_ref()
                        .ok_or(UnlockRejection::Jurisdiction(
                            "missing jurisdiction binding",
                        ))?;
                if !binding.verify(&header.merkle_root) {
                    return Err(UnlockRejection::Jurisdiction("binding does not verify"));
                }
                let j = &binding.jurisdiction;
                let l = delegation_indices(seed, &j.root, params.size, j.device_count)
                    .map_err(|_| UnlockRejection::Jurisdiction("list smaller than delegation"))?;
                (j.root, j.device_count, l.into_iter().collect())
            }
        };

        let message = unlock_message(pending.epoch, &pending.nonce);
        for e in &response.entries {
            if e.index == 0 || e.index > n {
                return Err(UnlockRejection::IndexOutOfRange(e.index));
            }
            if !verify_entry(&root, e.index, &e.entry, &e.proof) {
                return Err(UnlockRejection::BadProof(e.index));
            }
            if !delegation.contains(&e.index) {
                return Err(UnlockRejection::NotInDelegation(e.index));
            }
            if !crypto::verify(&e.entry.verify_key, &message, &e.signature) {
                return Err(UnlockRejection::BadSignature(e.index));
            }
        }
        self.challenge = None;
        Ok(self.token.clone())
    }

    pub fn record_password_use(&mut self, step: u64) {
        self.last_password_step = Some(step);
    }

    /// Custodian-signed unlock after a long lapse in epoch updates, provided the
    /// owner kept using the password during the lapse.
    pub fn failsafe_unlock(
        &mut self,
        request: &GroupSignature,
        step: u64,
    ) -> Result<UnlockToken, UnlockRejection> {
        let pending = self
            .challenge
            .as_ref()
            .ok_or(UnlockRejection::NoChallenge)?;
        if step.saturating_sub(self.last_update_step) <= self.config.failsafe_timeout {
            return Err(UnlockRejection::Premature);
        }
        if !self
            .last_password_step
            .is_some_and(|p| p > self.last_update_step)
        {
            return Err(UnlockRejection::PasswordNotUsed);
        }
        if !self
            .trust
            .custodian_vk
            .verify(&failsafe_message(pending.epoch, &pending.nonce), request)
        {
            return Err(UnlockRejection::BadRequestSignature);
        }
        self.challenge = None;
        Ok(self.token.clone())
    }

    /// Simulation-only: the adversary breaks this device and takes its keys.
    pub fn compromise(&self) -> BTreeMap<u64, SigKeyPair> {
        self.keys.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{combine, partial_decrypt, threshold_keygen, CustodianKeyMaterial};
    use crate::registry::{build_header, DealerSigner, KeyDb, Manufacturer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct World {
        rng: ChaCha20Rng,
        keys: CustodianKeyMaterial,
        manufacturer: Manufacturer,
        devices: Vec<Enclave>,
        db: Option<KeyDb>,
        header: Option<KeyDbHeader>,
    }

    impl World {
        fn new(seed: u64, n: usize, d: usize, t: usize) -> Self {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let keys = threshold_keygen(3, &mut rng).unwrap();
            let manufacturer = Manufacturer::new(&mut rng);
            let trust = TrustAnchors {
                manufacturer: manufacturer.verify_key(),
                custodian_enc: keys.public_enc_key.clone(),
                custodian_vk: keys.group_verify_key.clone(),
            };
            let config = EnclaveConfig::new(DelegationParams::new(d, t).unwrap());
            let devices = (0..n as u64)
                .map(|i| {
                    Enclave::new(
                        DeviceId::from_serial(i).unwrap(),
                        UnlockToken(format!("pw-{i}").into_bytes()),
                        trust.clone(),
                        config,
                    )
                })
                .collect();
            World {
                rng,
                keys,
                manufacturer,
                devices,
                db: None,
                header: None,
            }
        }

        fn publish(&mut self, epoch: u64, step: u64) {
            let m = &self.manufacturer;
            let certify = |vk: &VerifyKey, ct: &Ciphertext| m.certify(vk, ct);
            let entries: Vec<_> = self
                .devices
                .iter_mut()
                .map(|d| d.delegate_register(epoch, &certify, &mut self.rng))
                .collect();
            let db = KeyDb::new(epoch, entries).unwrap();
            let mut signer = DealerSigner {
                shares: &self.keys.shares,
                vk: self.keys.group_verify_key.clone(),
                rng: ChaCha20Rng::seed_from_u64(epoch),
            };
            let header = build_header(&db, &mut signer).unwrap();
            for d in &mut self.devices {
                d.select_delegation(&header, step, &mut self.rng).unwrap();
            }
            self.db = Some(db);
            self.header = Some(header);
        }

        fn open(&self, chal: &Challenge) -> (SealedSelection, Nonce) {
            let partials: Vec<_> = self
                .keys
                .shares
                .iter()
                .map(|s| partial_decrypt(s, &chal.ciphertext).unwrap())
                .collect();
            let plain = combine(&self.keys.public_enc_key, &partials, &chal.ciphertext).unwrap();
            SealedSelection::decode(&plain).unwrap()
        }

        fn device_index(&self, id: &DeviceId) -> usize {
            self.devices
                .iter()
                .position(|d| d.device_id() == id)
                .unwrap()
        }

        fn id_at(&self, j: u64) -> DeviceId {
            let entry = self.db.as_ref().unwrap().entry(j).unwrap();
            let partials: Vec<_> = self
                .keys
                .shares
                .iter()
                .map(|s| partial_decrypt(s, &entry.enc_device_id).unwrap())
                .collect();
            DeviceId::from_bytes(
                &combine(&self.keys.public_enc_key, &partials, &entry.enc_device_id).unwrap(),
            )
            .unwrap()
        }

        fn signed_entry(&self, j: u64, nonce: &Nonce, epoch: u64) -> SignedEntry {
            let (entry, proof) = self.db.as_ref().unwrap().entry_at(j).unwrap();
            let holder = self.device_index(&self.id_at(j));
            SignedEntry {
                index: j,
                entry: entry.clone(),
                signature: self.devices[holder]
                    .delegate_sign_request(nonce, epoch)
                    .unwrap(),
                proof,
            }
        }
    }

    #[test]
    fn params_validation() {
        assert!(DelegationParams::new(3, 0).is_err());
        assert!(DelegationParams::new(3, 4).is_err());
        assert!(DelegationParams::new(3, 3).is_ok());
    }

    #[test]
    fn fresh_keys_each_epoch() {
        let mut w = World::new(1, 3, 1, 1);
        let m = Manufacturer::new(&mut w.rng);
        let certify = |vk: &VerifyKey, ct: &Ciphertext| m.certify(vk, ct);
        let a = w.devices[0].delegate_register(1, &certify, &mut w.rng);
        let b = w.devices[0].delegate_register(2, &certify, &mut w.rng);
        assert_ne!(a.verify_key, b.verify_key);
        assert!(a.manufacturer_signed(&m.verify_key()));
        let partials: Vec<_> = w
            .keys
            .shares
            .iter()
            .map(|s| partial_decrypt(s, &a.enc_device_id).unwrap())
            .collect();
        assert_eq!(
            combine(&w.keys.public_enc_key, &partials, &a.enc_device_id).unwrap(),
            w.devices[0].device_id().as_bytes()
        );
    }

    #[test]
    fn forced_selection_with_one_device() {
        let mut w = World::new(2, 1, 1, 1);
        w.publish(0, 0);
        let chal = w.devices[0].reveal_challenge(1, &mut w.rng).unwrap();
        let (sel, _) = w.open(&chal);
        assert_eq!(sel, SealedSelection::Indices(vec![1]));
    }

    #[test]
    fn pinned_selection_for_seeded_rng() {
        // N=10, D=3 with ChaCha20Rng seeded from 2024: sampler output frozen on first run.
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        assert_eq!(sample_delegation(&mut rng, 10, 3), vec![4, 8, 9]);
    }

    #[test]
    fn tampered_header_leaves_state_unchanged() {
        let mut w = World::new(3, 4, 2, 1);
        w.publish(0, 0);
        let before = w.devices[0].header().copied();
        let mut forged = w.header.unwrap();
        forged.epoch = 1;
        assert_eq!(
            w.devices[0].select_delegation(&forged, 5, &mut w.rng),
            Err(DeviceError::HeaderSignature)
        );
        assert_eq!(w.devices[0].header().copied(), before);
    }

    #[test]
    fn population_too_small() {
        let mut w = World::new(4, 2, 3, 2);
        let m = &w.manufacturer;
        let certify = |vk: &VerifyKey, ct: &Ciphertext| m.certify(vk, ct);
        let entries: Vec<_> = w
            .devices
            .iter_mut()
            .map(|d| d.delegate_register(0, &certify, &mut w.rng))
            .collect();
        let db = KeyDb::new(0, entries).unwrap();
        let mut signer = DealerSigner {
            shares: &w.keys.shares,
            vk: w.keys.group_verify_key,
            rng: ChaCha20Rng::seed_from_u64(0),
        };
        let header = build_header(&db, &mut signer).unwrap();
        assert_eq!(
            w.devices[0].select_delegation(&header, 0, &mut w.rng),
            Err(DeviceError::Population { n: 2, d: 3 })
        );
    }

    #[test]
    fn challenge_round_trip_and_freshness() {
        let mut w = World::new(5, 12, 4, 2);
        w.publish(0, 0);
        let c1 = w.devices[3].reveal_challenge(1, &mut w.rng).unwrap();
        let c2 = w.devices[3].reveal_challenge(1, &mut w.rng).unwrap();
        let (s1, r1) = w.open(&c1);
        let (s2, r2) = w.open(&c2);
        assert_eq!(s1, s2);
        assert_ne!(r1, r2);
        assert_ne!(c1.ciphertext, c2.ciphertext);
        assert_eq!(Challenge::from_bytes(&c1.to_bytes()).unwrap(), c1);
        match s1 {
            SealedSelection::Indices(l) => {
                assert_eq!(l.len(), 4);
                assert!(l.windows(2).all(|w| w[0] < w[1]));
                assert!(l.iter().all(|&j| (1..=12).contains(&j)));
            }
            SealedSelection::Seed(_) => panic!("expected indices"),
        }
    }

    #[test]
    fn frozen_after_challenge() {
        let mut w = World::new(6, 5, 2, 1);
        w.publish(0, 0);
        w.devices[0].reveal_challenge(10, &mut w.rng).unwrap();
        let until = 10 + DEFAULT_FREEZE_PERIOD;
        // Publish epoch 1 for everyone else, then offer it to the frozen device.
        let m = &w.manufacturer;
        let certify = |vk: &VerifyKey, ct: &Ciphertext| m.certify(vk, ct);
        let entries: Vec<_> = w
            .devices
            .iter_mut()
            .map(|d| d.delegate_register(1, &certify, &mut w.rng))
            .collect();
        let db = KeyDb::new(1, entries).unwrap();
        let mut signer = DealerSigner {
            shares: &w.keys.shares,
            vk: w.keys.group_verify_key,
            rng: ChaCha20Rng::seed_from_u64(1),
        };
        let header = build_header(&db, &mut signer).unwrap();
        assert_eq!(
            w.devices[0].select_delegation(&header, until - 1, &mut w.rng),
            Err(DeviceError::Frozen { until })
        );
        assert!(w.devices[0]
            .select_delegation(&header, until, &mut w.rng)
            .is_ok());
    }

    #[test]
    fn sign_request_needs_epoch_key() {
        let mut w = World::new(7, 3, 1, 1);
        w.publish(4, 0);
        let r = Nonce::random(&mut w.rng);
        assert_eq!(
            w.devices[0].delegate_sign_request(&r, 3),
            Err(DeviceError::UnknownEpoch(3))
        );
        let sig = w.devices[0].delegate_sign_request(&r, 4).unwrap();
        let (j, _) =
            w.db.as_ref()
                .unwrap()
                .entries()
                .iter()
                .enumerate()
                .find(|(_, e)| crypto::verify(&e.verify_key, &unlock_message(4, &r), &sig))
                .unwrap();
        assert_eq!(w.id_at(j as u64 + 1), *w.devices[0].device_id());
        let other = Nonce::random(&mut w.rng);
        let e = &w.db.as_ref().unwrap().entries()[j];
        assert!(!crypto::verify(
            &e.verify_key,
            &unlock_message(4, &other),
            &sig
        ));
    }

    fn unlock_setup(seed: u64) -> (World, usize, Vec<u64>, Nonce) {
        let mut w = World::new(seed, 10, 3, 2);
        w.publish(0, 0);
        let target = 6;
        let chal = w.devices[target].reveal_challenge(1, &mut w.rng).unwrap();
        let (sel, r) = w.open(&chal);
        let SealedSelection::Indices(l) = sel else {
            unreachable!()
        };
        (w, target, l, r)
    }

    #[test]
    fn honest_unlock_releases_token() {
        let (mut w, target, l, r) = unlock_setup(8);
        let response = UnlockResponse {
            entries: l[..2].iter().map(|&j| w.signed_entry(j, &r, 0)).collect(),
            jurisdiction: None,
        };
        let bytes = response.to_bytes();
        assert_eq!(UnlockResponse::from_bytes(&bytes).unwrap(), response);
        let token = w.devices[target].device_unlock(&response).unwrap();
        assert_eq!(token.0, b"pw-6");
    }

    #[test]
    fn one_short_of_threshold() {
        let (mut w, target, l, r) = unlock_setup(9);
        let response = UnlockResponse {
            entries: vec![w.signed_entry(l[0], &r, 0)],
            jurisdiction: None,
        };
        assert_eq!(
            w.devices[target].device_unlock(&response),
            Err(UnlockRejection::TooFewSignatures { have: 1, need: 2 })
        );
    }

    #[test]
    fn outsider_with_valid_proof_rejected() {
        let (mut w, target, l, r) = unlock_setup(10);
        let outsider = (1..=10).find(|j| !l.contains(j)).unwrap();
        let response = UnlockResponse {
            entries: vec![w.signed_entry(l[0], &r, 0), w.signed_entry(outsider, &r, 0)],
            jurisdiction: None,
        };
        assert_eq!(
            w.devices[target].device_unlock(&response),
            Err(UnlockRejection::NotInDelegation(outsider))
        );
    }

    #[test]
    fn duplicate_index_rejected() {
        let (mut w, target, l, r) = unlock_setup(11);
        let e = w.signed_entry(l[0], &r, 0);
        let response = UnlockResponse {
            entries: vec![e.clone(), e],
            jurisdiction: None,
        };
        assert_eq!(
            w.devices[target].device_unlock(&response),
            Err(UnlockRejection::DuplicateIndex(l[0]))
        );
    }

    #[test]
    fn failsafe_rules() {
        let mut w = World::new(12, 4, 1, 1);
        w.publish(0, 0);
        let chal = w.devices[0].reveal_challenge(1, &mut w.rng).unwrap();
        let (_, r) = w.open(&chal);
        let msg = failsafe_message(0, &r);
        let good =
            crypto::group_sign(&w.keys.shares, &w.keys.group_verify_key, &msg, &mut w.rng).unwrap();
        let rogue = threshold_keygen(3, &mut w.rng).unwrap();
        let forged =
            crypto::group_sign(&rogue.shares, &rogue.group_verify_key, &msg, &mut w.rng).unwrap();

        let d = &mut w.devices[0];
        d.record_password_use(20);
        assert_eq!(
            d.failsafe_unlock(&good, STEPS_PER_MONTH),
            Err(UnlockRejection::Premature)
        );
        let stale = 7 * STEPS_PER_MONTH;
        assert_eq!(
            d.failsafe_unlock(&forged, stale),
            Err(UnlockRejection::BadRequestSignature)
        );
        assert_eq!(d.failsafe_unlock(&good, stale).unwrap().0, b"pw-0");
    }

    #[test]
    fn failsafe_needs_password_use() {
        let mut w = World::new(13, 4, 1, 1);
        w.publish(0, 5);
        let chal = w.devices[1].reveal_challenge(6, &mut w.rng).unwrap();
        let (_, r) = w.open(&chal);
        let good = crypto::group_sign(
            &w.keys.shares,
            &w.keys.group_verify_key,
            &failsafe_message(0, &r),
            &mut w.rng,
        )
        .unwrap();
        assert_eq!(
            w.devices[1].failsafe_unlock(&good, 7 * STEPS_PER_MONTH),
            Err(UnlockRejection::PasswordNotUsed)
        );
    }

    #[test]
    fn sealed_selection_codec() {
        let r = Nonce([3u8; 32]);
        let s = SealedSelection::Indices(vec![2, 9, 11]);
        let bytes = s.encode(&r);
        assert_eq!(bytes.len(), 4 + 3 * 8 + 32);
        assert_eq!(SealedSelection::decode(&bytes).unwrap(), (s, r));
        let seed = SealedSelection::Seed([8u8; 32]);
        assert_eq!(
            SealedSelection::decode(&seed.encode(&r)).unwrap(),
            (seed, r)
        );
        assert!(SealedSelection::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn seeded_indices_are_deterministic_per_jurisdiction() {
        let seed = [4u8; 32];
        let a = MerkleRoot([1u8; 32]);
        let b = MerkleRoot([2u8; 32]);
        assert_eq!(
            delegation_indices(&seed, &a, 5, 40).unwrap(),
            delegation_indices(&seed, &a, 5, 40).unwrap()
        );
        let la = delegation_indices(&seed, &a, 5, 40).unwrap();
        let lb = delegation_indices(&seed, &b, 5, 60).unwrap();
        assert_ne!(la, lb);
        assert!(lb.iter().all(|&j| (1..=60).contains(&j)));
    }
}
