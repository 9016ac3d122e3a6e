//! The public delegate list (KeyDB), its signed epoch headers, and the
//! per-jurisdiction super-root.
//!
//! Entries are ordered by verification-key bytes before indexing, so every
//! custodian derives the same list from the same union. Index `j` is 1-based
//! and is committed inside the leaf:
//!
//! ```text
//! leaf(j) = j (8 BE) || len(vk) (4 BE) || vk || len(ct) (4 BE) || Enc(IMEI)
//! ```
//!
//! Persisted lists are `"JJEDB1" || epoch (8 BE) || N (8 BE)` followed by one
//! record per entry: `leaf(j) || len(sig) (4 BE) || manufacturer signature`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{
    self, group_sign, Ciphertext, CryptoError, GroupSignature, GroupVerifyKey, KeyShare,
    SigKeyPair, Signature, VerifyKey,
};
use crate::merkle::{merkle_verify, MerkleError, MerklePathProof, MerkleRoot, MerkleTree};

pub const KEYDB_MAGIC: &[u8; 6] = b"JJEDB1";
const HEADER_TAG: &[u8] = b"JJE-HEADER";
const MANUFACTURER_TAG: &[u8] = b"JJE-MANUFACTURER";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("invalid IMEI {0:?}: expected exactly 15 decimal digits")]
    InvalidImei(String),
    #[error("duplicate verification key in list")]
    DuplicateKey,
    #[error("index {index} outside [1, {len}]")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("list is empty")]
    Empty,
    #[error("epoch {new} does not follow published epoch {last}")]
    NonMonotonicEpoch { last: u64, new: u64 },
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error("unknown jurisdiction {0:?}")]
    UnknownJurisdiction(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl From<MerkleError> for RegistryError {
    fn from(e: MerkleError) -> Self {
        match e {
            MerkleError::Empty => RegistryError::Empty,
            MerkleError::IndexOutOfRange { index, len } => {
                RegistryError::IndexOutOfRange { index, len }
            }
            MerkleError::Malformed(m) => RegistryError::Malformed(m.into()),
        }
    }
}

/// 15-digit IMEI.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceId(String);

impl DeviceId {
    pub const LEN: usize = 15;

    pub fn parse(s: &str) -> Result<Self, RegistryError> {
        if s.len() == Self::LEN && s.bytes().all(|b| b.is_ascii_digit()) {
            Ok(DeviceId(s.to_owned()))
        } else {
            Err(RegistryError::InvalidImei(s.to_owned()))
        }
    }

    /// Zero-padded IMEI for a simulation serial number below 10¹⁵.
    pub fn from_serial(serial: u64) -> Result<Self, RegistryError> {
        Self::parse(&format!("{serial:015}"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RegistryError> {
        let s = std::str::from_utf8(bytes)
            .map_err(|_| RegistryError::InvalidImei(hex::encode(bytes)))?;
        Self::parse(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({})", self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// What the manufacturer signs to vouch for a row: the device key and its
/// sealed IMEI together, so nobody can re-pair the key with another ciphertext.
pub fn manufacturer_message(vk: &VerifyKey, enc_device_id: &Ciphertext) -> Vec<u8> {
    [
        MANUFACTURER_TAG,
        vk.as_bytes().as_slice(),
        &enc_device_id.to_bytes(),
    ]
    .concat()
}

/// The manufacturer's signing service (`SystemSetup` key `sk_M`).
pub struct Manufacturer {
    keys: SigKeyPair,
}

impl Manufacturer {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Manufacturer {
            keys: SigKeyPair::generate(rng),
        }
    }

    pub fn verify_key(&self) -> VerifyKey {
        self.keys.verify_key()
    }

    pub fn certify(&self, vk: &VerifyKey, enc_device_id: &Ciphertext) -> Signature {
        self.keys.sign(&manufacturer_message(vk, enc_device_id))
    }

    /// A complete signed row.
    pub fn endorse(&self, verify_key: VerifyKey, enc_device_id: Ciphertext) -> DelegateEntry {
        let manufacturer_sig = self.certify(&verify_key, &enc_device_id);
        DelegateEntry {
            verify_key,
            enc_device_id,
            manufacturer_sig,
        }
    }
}

/// One row of KeyDB: `(vk_d, Enc(IMEI))` plus the manufacturer's endorsement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelegateEntry {
    pub verify_key: VerifyKey,
    pub enc_device_id: Ciphertext,
    pub manufacturer_sig: Signature,
}

fn put_len_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Cursor over a byte slice for the length-prefixed encodings.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], RegistryError> {
        if self.bytes.len() - self.pos < n {
            return Err(RegistryError::Malformed(format!(
                "needed {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, RegistryError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, RegistryError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn len_prefixed(&mut self) -> Result<&'a [u8], RegistryError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn finish(self) -> Result<(), RegistryError> {
        if self.is_done() {
            Ok(())
        } else {
            Err(RegistryError::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

impl DelegateEntry {
    pub fn manufacturer_signed(&self, vk_m: &VerifyKey) -> bool {
        crypto::verify(
            vk_m,
            &manufacturer_message(&self.verify_key, &self.enc_device_id),
            &self.manufacturer_sig,
        )
    }

    /// Canonical Merkle leaf binding this entry to 1-based `index`.
    pub fn leaf_encoding(&self, index: u64) -> Vec<u8> {
        let ct = self.enc_device_id.to_bytes();
        let mut out = Vec::with_capacity(8 + 4 + 32 + 4 + ct.len());
        out.extend_from_slice(&index.to_be_bytes());
        put_len_prefixed(&mut out, self.verify_key.as_bytes());
        put_len_prefixed(&mut out, &ct);
        out
    }

    /// `len || vk || len || Enc(IMEI) || len || manufacturer signature`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_len_prefixed(&mut out, self.verify_key.as_bytes());
        put_len_prefixed(&mut out, &self.enc_device_id.to_bytes());
        put_len_prefixed(&mut out, &self.manufacturer_sig.to_bytes());
        out
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, RegistryError> {
        Ok(DelegateEntry {
            verify_key: VerifyKey::from_bytes(r.len_prefixed()?)?,
            enc_device_id: Ciphertext::from_bytes(r.len_prefixed()?)?,
            manufacturer_sig: Signature::from_bytes(r.len_prefixed()?)?,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RegistryError> {
        let mut r = Reader::new(bytes);
        let entry = Self::read(&mut r)?;
        r.finish()?;
        Ok(entry)
    }
}

/// Published delegate list for one epoch. Immutable once built.
#[derive(Clone)]
pub struct KeyDb {
    epoch: u64,
    entries: Vec<DelegateEntry>,
    tree: MerkleTree,
}

impl KeyDb {
    /// Sorts `entries` by verification key and commits to them.
    pub fn new(epoch: u64, mut entries: Vec<DelegateEntry>) -> Result<Self, RegistryError> {
        entries.sort_by_key(|e| e.verify_key);
        if entries
            .windows(2)
            .any(|w| w[0].verify_key == w[1].verify_key)
        {
            return Err(RegistryError::DuplicateKey);
        }
        let hashes = entries
            .iter()
            .enumerate()
            .map(|(i, e)| crate::merkle::leaf_hash(&e.leaf_encoding(i as u64 + 1)))
            .collect();
        let tree = MerkleTree::from_leaf_hashes(hashes)?;
        Ok(KeyDb {
            epoch,
            entries,
            tree,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DelegateEntry] {
        &self.entries
    }

    pub fn root(&self) -> MerkleRoot {
        self.tree.root()
    }

    pub fn entry(&self, index: u64) -> Result<&DelegateEntry, RegistryError> {
        if index == 0 || index > self.len() {
            return Err(RegistryError::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(&self.entries[index as usize - 1])
    }

    /// Position of a verification key, if listed.
    pub fn index_of(&self, vk: &VerifyKey) -> Option<u64> {
        self.entries
            .binary_search_by(|e| e.verify_key.cmp(vk))
            .ok()
            .map(|i| i as u64 + 1)
    }

    pub fn entry_at(&self, index: u64) -> Result<(&DelegateEntry, MerklePathProof), RegistryError> {
        let entry = self.entry(index)?;
        Ok((entry, self.tree.path(index)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(KEYDB_MAGIC);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.len().to_be_bytes());
        for (i, e) in self.entries.iter().enumerate() {
            out.extend_from_slice(&e.leaf_encoding(i as u64 + 1));
            put_len_prefixed(&mut out, &e.manufacturer_sig.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RegistryError> {
        let mut r = Reader::new(bytes);
        if r.take(6)? != KEYDB_MAGIC {
            return Err(RegistryError::Malformed("bad magic".into()));
        }
        let epoch = r.u64()?;
        let n = r.u64()?;
        let mut entries = Vec::with_capacity(n.min(1 << 20) as usize);
        for expected in 1..=n {
            let index = r.u64()?;
            if index != expected {
                return Err(RegistryError::Malformed(format!(
                    "record {expected} carries index {index}"
                )));
            }
            entries.push(DelegateEntry {
                verify_key: VerifyKey::from_bytes(r.len_prefixed()?)?,
                enc_device_id: Ciphertext::from_bytes(r.len_prefixed()?)?,
                manufacturer_sig: Signature::from_bytes(r.len_prefixed()?)?,
            });
        }
        r.finish()?;
        let db = KeyDb::new(epoch, entries)?;
        // Records must already be in canonical order.
        if db.to_bytes() != bytes {
            return Err(RegistryError::Malformed(
                "records are not in canonical order".into(),
            ));
        }
        Ok(db)
    }
}

impl fmt::Debug for KeyDb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyDb")
            .field("epoch", &self.epoch)
            .field("len", &self.len())
            .field("root", &self.root())
            .finish()
    }
}

/// Free-function form of [`KeyDb::entry_at`].
pub fn entry_at(
    db: &KeyDb,
    index: u64,
) -> Result<(&DelegateEntry, MerklePathProof), RegistryError> {
    db.entry_at(index)
}

/// Signed epoch header `H_e = (root, N, e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyDbHeader {
    pub merkle_root: MerkleRoot,
    pub device_count: u64,
    pub epoch: u64,
    pub custodian_group_sig: GroupSignature,
}

pub const HEADER_LEN: usize = 8 + 8 + 32 + GroupSignature::LEN;

impl KeyDbHeader {
    pub fn signing_message(merkle_root: &MerkleRoot, device_count: u64, epoch: u64) -> Vec<u8> {
        let mut msg = Vec::with_capacity(HEADER_TAG.len() + 48);
        msg.extend_from_slice(HEADER_TAG);
        msg.extend_from_slice(&epoch.to_be_bytes());
        msg.extend_from_slice(&device_count.to_be_bytes());
        msg.extend_from_slice(merkle_root.as_bytes());
        msg
    }

    /// `epoch (8) || N (8) || root (32) || group signature (64)`.
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(&self.epoch.to_be_bytes());
        out[8..16].copy_from_slice(&self.device_count.to_be_bytes());
        out[16..48].copy_from_slice(self.merkle_root.as_bytes());
        out[48..].copy_from_slice(&self.custodian_group_sig.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RegistryError> {
        if bytes.len() != HEADER_LEN {
            return Err(RegistryError::Malformed(format!(
                "header must be {HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(KeyDbHeader {
            epoch: u64::from_be_bytes(bytes[..8].try_into().expect("8")),
            device_count: u64::from_be_bytes(bytes[8..16].try_into().expect("8")),
            merkle_root: MerkleRoot(bytes[16..48].try_into().expect("32")),
            custodian_group_sig: GroupSignature::from_bytes(&bytes[48..])?,
        })
    }
}

/// Anything that can produce the custodians' collective signature.
pub trait GroupSigner {
    fn group_sign(&mut self, message: &[u8]) -> Result<GroupSignature, CryptoError>;
}

/// Signs with every share in one place; stands in for a custodian quorum in tests.
pub struct DealerSigner<'a, R> {
    pub shares: &'a [KeyShare],
    pub vk: GroupVerifyKey,
    pub rng: R,
}

impl<R: RngCore + CryptoRng> GroupSigner for DealerSigner<'_, R> {
    fn group_sign(&mut self, message: &[u8]) -> Result<GroupSignature, CryptoError> {
        group_sign(self.shares, &self.vk, message, &mut self.rng)
    }
}

pub fn sign_header(
    merkle_root: MerkleRoot,
    device_count: u64,
    epoch: u64,
    signer: &mut dyn GroupSigner,
) -> Result<KeyDbHeader, CryptoError> {
    let sig = signer.group_sign(&KeyDbHeader::signing_message(
        &merkle_root,
        device_count,
        epoch,
    ))?;
    Ok(KeyDbHeader {
        merkle_root,
        device_count,
        epoch,
        custodian_group_sig: sig,
    })
}

pub fn build_header(db: &KeyDb, signer: &mut dyn GroupSigner) -> Result<KeyDbHeader, CryptoError> {
    sign_header(db.root(), db.len(), db.epoch(), signer)
}

pub fn verify_header(header: &KeyDbHeader, vk_j: &GroupVerifyKey) -> bool {
    vk_j.verify(
        &KeyDbHeader::signing_message(&header.merkle_root, header.device_count, header.epoch),
        &header.custodian_group_sig,
    )
}

/// Checks a `(entry, proof)` pair against a header root at index `j`.
pub fn verify_entry(
    header_root: &MerkleRoot,
    index: u64,
    entry: &DelegateEntry,
    proof: &MerklePathProof,
) -> bool {
    proof.leaf_index == index && merkle_verify(proof, &entry.leaf_encoding(index), header_root)
}

/// Every list the custodians have published, by epoch.
#[derive(Debug, Clone, Default)]
pub struct PublishedEpochs {
    epochs: BTreeMap<u64, (KeyDb, KeyDbHeader)>,
}

impl PublishedEpochs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a newly published epoch; epochs must strictly increase.
    pub fn publish(&mut self, db: KeyDb, header: KeyDbHeader) -> Result<(), RegistryError> {
        if let Some(&last) = self.epochs.keys().next_back() {
            if header.epoch <= last {
                return Err(RegistryError::NonMonotonicEpoch {
                    last,
                    new: header.epoch,
                });
            }
        }
        self.epochs.insert(header.epoch, (db, header));
        Ok(())
    }

    pub fn get(&self, epoch: u64) -> Option<&(KeyDb, KeyDbHeader)> {
        self.epochs.get(&epoch)
    }

    pub fn latest(&self) -> Option<&(KeyDb, KeyDbHeader)> {
        self.epochs.values().next_back()
    }

    pub fn headers(&self) -> Vec<KeyDbHeader> {
        self.epochs.values().map(|(_, h)| *h).collect()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// One jurisdiction's commitment inside the super-root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JurisdictionRoot {
    pub name: String,
    pub root: MerkleRoot,
    pub device_count: u64,
}

impl JurisdictionRoot {
    /// `position (8) || len(name) (4) || name || root (32) || N (8)`.
    pub fn leaf_encoding(&self, position: u64) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&position.to_be_bytes());
        put_len_prefixed(&mut out, self.name.as_bytes());
        out.extend_from_slice(self.root.as_bytes());
        out.extend_from_slice(&self.device_count.to_be_bytes());
        out
    }
}

/// Proof that a jurisdiction's list is committed under a super-root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JurisdictionBinding {
    pub jurisdiction: JurisdictionRoot,
    pub proof: MerklePathProof,
}

impl JurisdictionBinding {
    pub fn verify(&self, super_root: &MerkleRoot) -> bool {
        merkle_verify(
            &self.proof,
            &self.jurisdiction.leaf_encoding(self.proof.leaf_index),
            super_root,
        )
    }
}

/// Per-jurisdiction lists for one epoch with a single super-root over
/// `(name, root, N)` in name order.
#[derive(Debug, Clone)]
pub struct JurisdictionRegistry {
    epoch: u64,
    lists: BTreeMap<String, KeyDb>,
    tree: MerkleTree,
}

impl JurisdictionRegistry {
    pub fn new(epoch: u64, lists: BTreeMap<String, KeyDb>) -> Result<Self, RegistryError> {
        let leaves: Vec<Vec<u8>> = lists
            .iter()
            .enumerate()
            .map(|(i, (name, db))| {
                JurisdictionRoot {
                    name: name.clone(),
                    root: db.root(),
                    device_count: db.len(),
                }
                .leaf_encoding(i as u64 + 1)
            })
            .collect();
        let tree = MerkleTree::build(&leaves)?;
        Ok(JurisdictionRegistry { epoch, lists, tree })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn super_root(&self) -> MerkleRoot {
        self.tree.root()
    }

    pub fn total_devices(&self) -> u64 {
        self.lists.values().map(KeyDb::len).sum()
    }

    pub fn list(&self, name: &str) -> Option<&KeyDb> {
        self.lists.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.lists.keys().map(String::as_str)
    }

    pub fn binding(&self, name: &str) -> Result<JurisdictionBinding, RegistryError> {
        let position = self
            .lists
            .keys()
            .position(|n| n == name)
            .ok_or_else(|| RegistryError::UnknownJurisdiction(name.to_owned()))?
            as u64
            + 1;
        let db = &self.lists[name];
        Ok(JurisdictionBinding {
            jurisdiction: JurisdictionRoot {
                name: name.to_owned(),
                root: db.root(),
                device_count: db.len(),
            },
            proof: self.tree.path(position)?,
        })
    }

    /// Header over the super-root; `device_count` is the total across jurisdictions.
    pub fn build_header(&self, signer: &mut dyn GroupSigner) -> Result<KeyDbHeader, CryptoError> {
        sign_header(self.super_root(), self.total_devices(), self.epoch, signer)
    }
}

/// Rejects duplicate keys and unsigned rows. Returns the offending position on failure.
pub fn validate_entries(
    entries: &[DelegateEntry],
    vk_m: &VerifyKey,
) -> Result<(), (usize, ListFault)> {
    let mut seen = BTreeSet::new();
    for (i, e) in entries.iter().enumerate() {
        if !seen.insert(e.verify_key) {
            return Err((i, ListFault::Duplicate));
        }
        if !e.manufacturer_signed(vk_m) {
            return Err((i, ListFault::Unsigned));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ListFault {
    Unsigned,
    Duplicate,
}
