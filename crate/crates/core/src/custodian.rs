//! Custodian nodes: registration intake, epoch consensus, challenge
//! decryption and identity reveal.
//!
//! Every custodian holds one additive share of the group keys, so every
//! collective action (publishing a list, opening a challenge, revealing a
//! delegate) needs all of them. A single honest custodian can therefore veto.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, Write};

use rand::{CryptoRng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{
    aggregate_signature, combine, partial_decrypt, sha256, verify_batch, Ciphertext, CryptoError,
    EncryptionKey, GroupSignature, GroupVerifyKey, KeyShare, Nonce, VerifyKey,
};
use crate::device::{failsafe_message, Challenge, SealedSelection};
use crate::registry::{
    manufacturer_message, DelegateEntry, DeviceId, GroupSigner, KeyDb, KeyDbHeader, ListFault,
};

/// Decides whether a decryption request carries valid legal process.
pub type AuthorizationPolicy = Box<dyn Fn(&[u8]) -> bool + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEventType {
    ConsensusPublished,
    ConsensusAborted,
    DecryptionApproved,
    DecryptionRefused,
    IdentityRevealed,
    RevealRefused,
    FailsafeSigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEvent {
    pub epoch: u64,
    pub event_type: AuditEventType,
    pub request_id: String,
    pub timestamp_step: u64,
}

/// Append-only per-custodian record, written as JSON lines.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    events: Vec<AuditEvent>,
}

impl AuditLog {
    pub fn record(&mut self, event: AuditEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Ways a custodian can be told to deviate, for simulation.
#[derive(Debug, Clone, Default)]
pub struct Misbehavior {
    /// Extra rows appended to this custodian's prospective list.
    pub inject: Vec<DelegateEntry>,
    /// Publish an empty prospective list regardless of what was received.
    pub drop_registrations: bool,
    /// Never take part in group signing.
    pub refuse_signature: bool,
    /// Never release a partial decryption.
    pub withhold_decryption: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegistrationOutcome {
    Accepted,
    Rejected(ListFault),
}

pub struct CustodianNode {
    id: u32,
    share: KeyShare,
    enc_key: EncryptionKey,
    group_vk: GroupVerifyKey,
    manufacturer: VerifyKey,
    pending: BTreeMap<VerifyKey, DelegateEntry>,
    validated: HashSet<[u8; 32]>,
    misbehavior: Misbehavior,
    policy: AuthorizationPolicy,
    audit: AuditLog,
}

impl fmt::Debug for CustodianNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustodianNode")
            .field("id", &self.id)
            .field("pending", &self.pending.len())
            .field("misbehavior", &self.misbehavior)
            .finish_non_exhaustive()
    }
}

impl CustodianNode {
    /// New honest custodian that approves every request until a policy is set.
    pub fn new(
        share: KeyShare,
        enc_key: EncryptionKey,
        group_vk: GroupVerifyKey,
        manufacturer: VerifyKey,
    ) -> Self {
        CustodianNode {
            id: share.index(),
            share,
            enc_key,
            group_vk,
            manufacturer,
            pending: BTreeMap::new(),
            validated: HashSet::new(),
            misbehavior: Misbehavior::default(),
            policy: Box::new(|_| true),
            audit: AuditLog::default(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn set_policy(&mut self, policy: AuthorizationPolicy) {
        self.policy = policy;
    }

    pub fn set_misbehavior(&mut self, misbehavior: Misbehavior) {
        self.misbehavior = misbehavior;
    }

    pub fn misbehavior(&self) -> &Misbehavior {
        &self.misbehavior
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn log(&mut self, epoch: u64, event_type: AuditEventType, request_id: &str, step: u64) {
        self.audit.record(AuditEvent {
            epoch,
            event_type,
            request_id: request_id.to_string(),
            timestamp_step: step,
        });
    }

    fn cache_key(e: &DelegateEntry) -> [u8; 32] {
        sha256(&[&e.to_bytes()])
    }

    /// Rows this node already checked: its own intake, or an earlier list this epoch.
    fn is_known_valid(&self, e: &DelegateEntry) -> bool {
        self.pending.get(&e.verify_key).is_some_and(|p| p == e)
            || self.validated.contains(&Self::cache_key(e))
    }

    /// Checks manufacturer signatures on `entries`, batching where possible.
    /// Returns one flag per entry. With `remember`, valid rows are cached for later lists.
    fn check_signatures(&mut self, entries: &[&DelegateEntry], remember: bool) -> Vec<bool> {
        let todo: Vec<usize> = (0..entries.len())
            .filter(|&i| !self.is_known_valid(entries[i]))
            .collect();
        let mut ok = vec![true; entries.len()];
        if todo.is_empty() {
            return ok;
        }
        let mut keys = Vec::with_capacity(todo.len());
        let mut messages = Vec::with_capacity(todo.len());
        let mut sigs = Vec::with_capacity(todo.len());
        for &i in &todo {
            let e = entries[i];
            keys.push(self.manufacturer);
            messages.push(manufacturer_message(&e.verify_key, &e.enc_device_id));
            sigs.push(e.manufacturer_sig);
        }
        let msg_refs: Vec<&[u8]> = messages.iter().map(Vec::as_slice).collect();
        if !verify_batch(&keys, &msg_refs, &sigs) {
            for &i in &todo {
                ok[i] = entries[i].manufacturer_signed(&self.manufacturer);
            }
        }
        if remember {
            for &i in &todo {
                if ok[i] {
                    self.validated.insert(Self::cache_key(entries[i]));
                }
            }
        }
        ok
    }

    /// Accepts a manufacturer-signed entry whose key is new this epoch.
    pub fn receive_registration(&mut self, entry: DelegateEntry) -> RegistrationOutcome {
        self.receive_registrations(vec![entry])[0]
    }

    /// Batch intake; one outcome per entry, in order.
    pub fn receive_registrations(
        &mut self,
        entries: Vec<DelegateEntry>,
    ) -> Vec<RegistrationOutcome> {
        let refs: Vec<&DelegateEntry> = entries.iter().collect();
        let signed = self.check_signatures(&refs, false);
        let mut out = Vec::with_capacity(entries.len());
        for (entry, signed) in entries.into_iter().zip(signed) {
            if !signed {
                out.push(RegistrationOutcome::Rejected(ListFault::Unsigned));
            } else if let Entry::Vacant(slot) = self.pending.entry(entry.verify_key) {
                slot.insert(entry);
                out.push(RegistrationOutcome::Accepted);
            } else {
                out.push(RegistrationOutcome::Rejected(ListFault::Duplicate));
            }
        }
        out
    }

    /// This custodian's prospective list for the epoch, sorted by key.
    pub fn proposal(&self) -> Vec<DelegateEntry> {
        if self.misbehavior.drop_registrations {
            return self.misbehavior.inject.clone();
        }
        let mut list: Vec<DelegateEntry> = self.pending.values().cloned().collect();
        list.extend(self.misbehavior.inject.iter().cloned());
        list
    }

    /// Duplicate keys and unsigned rows in another custodian's list.
    pub fn validate_list(&mut self, entries: &[DelegateEntry]) -> Result<(), (usize, ListFault)> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.verify_key) {
                return Err((i, ListFault::Duplicate));
            }
        }
        let refs: Vec<&DelegateEntry> = entries.iter().collect();
        match self.check_signatures(&refs, true).iter().position(|ok| !ok) {
            Some(i) => Err((i, ListFault::Unsigned)),
            None => Ok(()),
        }
    }

    /// Simulation-only: a colluding custodian hands its share to the adversary.
    pub fn compromise(&self) -> KeyShare {
        self.share.clone()
    }

    fn decrypt_share(&self, ct: &Ciphertext) -> Option<crate::crypto::PartialDecryption> {
        if self.misbehavior.withhold_decryption {
            return None;
        }
        partial_decrypt(&self.share, ct).ok()
    }
}

/// One custodian's published prospective list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub custodian: u32,
    pub entries: Vec<DelegateEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AbortReason {
    #[error(
        "custodian {accuser} found {fault:?} at position {position} of custodian {offender}'s list"
    )]
    InvalidList {
        accuser: u32,
        offender: u32,
        position: usize,
        fault: ListFault,
    },
    #[error("custodian {0} refused to sign")]
    RefusedToSign(u32),
    #[error("no entries were registered")]
    Empty,
    #[error("group signing failed: {0}")]
    Signing(String),
}

#[derive(Debug, Clone)]
pub enum ConsensusOutcome {
    Published {
        db: KeyDb,
        header: KeyDbHeader,
        /// Keys dropped because custodians received different rows for them.
        conflicting: Vec<VerifyKey>,
    },
    Aborted {
        epoch: u64,
        proposals: Vec<Proposal>,
        reasons: Vec<AbortReason>,
    },
}

impl ConsensusOutcome {
    pub fn is_published(&self) -> bool {
        matches!(self, ConsensusOutcome::Published { .. })
    }
}

/// Union of proposals by key. A key that arrives with different rows at
/// different custodians came from a misbehaving device and is dropped.
fn union(proposals: &[Proposal]) -> (Vec<DelegateEntry>, Vec<VerifyKey>) {
    let mut merged: BTreeMap<VerifyKey, Option<&DelegateEntry>> = BTreeMap::new();
    for p in proposals {
        for e in &p.entries {
            merged
                .entry(e.verify_key)
                .and_modify(|slot| {
                    if slot.is_some_and(|prev| prev != e) {
                        *slot = None;
                    }
                })
                .or_insert(Some(e));
        }
    }
    let mut entries = Vec::with_capacity(merged.len());
    let mut conflicting = Vec::new();
    for (vk, slot) in merged {
        match slot {
            Some(e) => entries.push(e.clone()),
            None => conflicting.push(vk),
        }
    }
    (entries, conflicting)
}

/// Two-round group signature where every node participates or the call fails.
pub fn collective_sign<R: RngCore + CryptoRng>(
    nodes: &[CustodianNode],
    message: &[u8],
    rng: &mut R,
) -> Result<GroupSignature, AbortReason> {
    if let Some(n) = nodes.iter().find(|n| n.misbehavior.refuse_signature) {
        return Err(AbortReason::RefusedToSign(n.id));
    }
    let vk = nodes[0].group_vk.clone();
    let (nonces, commitments): (Vec<_>, Vec<_>) = nodes.iter().map(|n| n.share.commit(rng)).unzip();
    let partials = nodes
        .iter()
        .zip(nonces)
        .map(|(n, nonce)| n.share.sign_partial(nonce, &commitments, &vk, message))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AbortReason::Signing(e.to_string()))?;
    aggregate_signature(&vk, &commitments, &partials, message)
        .map_err(|e| AbortReason::Signing(e.to_string()))
}

/// [`GroupSigner`] backed by live custodian nodes.
pub struct NodeSigner<'a, R> {
    pub nodes: &'a [CustodianNode],
    pub rng: &'a mut R,
}

impl<R: RngCore + CryptoRng> GroupSigner for NodeSigner<'_, R> {
    fn group_sign(&mut self, message: &[u8]) -> Result<GroupSignature, CryptoError> {
        collective_sign(self.nodes, message, self.rng)
            .map_err(|e| CryptoError::GroupSigning(e.to_string()))
    }
}

/// One epoch of list agreement: broadcast, cross-validate, union, sign.
pub fn custodian_consensus<R: RngCore + CryptoRng>(
    nodes: &mut [CustodianNode],
    epoch: u64,
    step: u64,
    rng: &mut R,
) -> ConsensusOutcome {
    let proposals: Vec<Proposal> = nodes
        .iter()
        .map(|n| Proposal {
            custodian: n.id,
            entries: n.proposal(),
        })
        .collect();

    let mut reasons = Vec::new();
    for node in nodes.iter_mut() {
        for p in &proposals {
            if let Err((position, fault)) = node.validate_list(&p.entries) {
                reasons.push(AbortReason::InvalidList {
                    accuser: node.id,
                    offender: p.custodian,
                    position,
                    fault,
                });
            }
        }
    }

    let mut published = None;
    if reasons.is_empty() {
        let (entries, conflicting) = union(&proposals);
        match KeyDb::new(epoch, entries) {
            Err(_) => reasons.push(AbortReason::Empty),
            Ok(db) => {
                let msg = KeyDbHeader::signing_message(&db.root(), db.len(), epoch);
                match collective_sign(nodes, &msg, rng) {
                    Ok(sig) => {
                        let header = KeyDbHeader {
                            merkle_root: db.root(),
                            device_count: db.len(),
                            epoch,
                            custodian_group_sig: sig,
                        };
                        published = Some((db, header, conflicting));
                    }
                    Err(reason) => reasons.push(reason),
                }
            }
        }
    }

    for node in nodes.iter_mut() {
        node.pending.clear();
        node.validated.clear();
        let event = if published.is_some() {
            AuditEventType::ConsensusPublished
        } else {
            AuditEventType::ConsensusAborted
        };
        node.log(epoch, event, &format!("epoch-{epoch}"), step);
    }

    match published {
        Some((db, header, conflicting)) => ConsensusOutcome::Published {
            db,
            header,
            conflicting,
        },
        None => ConsensusOutcome::Aborted {
            epoch,
            proposals,
            reasons,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Refusal {
    #[error("custodian {0} refused the request")]
    Refused(u32),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("index {0} is outside the list")]
    IndexOutOfRange(u64),
}

/// The custodians' view of an opened challenge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedChallenge {
    pub epoch: u64,
    pub selection: SealedSelection,
    pub nonce: Nonce,
}

fn approve_all(
    nodes: &mut [CustodianNode],
    epoch: u64,
    authorization: &[u8],
    request_id: &str,
    step: u64,
) -> Result<(), Refusal> {
    let mut refused = None;
    for node in nodes.iter_mut() {
        if (node.policy)(authorization) && !node.misbehavior.withhold_decryption {
            node.log(epoch, AuditEventType::DecryptionApproved, request_id, step);
        } else {
            node.log(epoch, AuditEventType::DecryptionRefused, request_id, step);
            refused.get_or_insert(node.id);
        }
    }
    match refused {
        Some(id) => Err(Refusal::Refused(id)),
        None => Ok(()),
    }
}

fn joint_decrypt(nodes: &[CustodianNode], ct: &Ciphertext) -> Result<Vec<u8>, Refusal> {
    let mut partials = Vec::with_capacity(nodes.len());
    for node in nodes {
        partials.push(node.decrypt_share(ct).ok_or(Refusal::Refused(node.id))?);
    }
    combine(&nodes[0].enc_key, &partials, ct).map_err(|e| Refusal::Malformed(e.to_string()))
}

/// Each custodian checks `authorization` and logs; all must approve to open.
pub fn decrypt_challenge(
    nodes: &mut [CustodianNode],
    challenge: &Challenge,
    authorization: &[u8],
    request_id: &str,
    step: u64,
) -> Result<OpenedChallenge, Refusal> {
    approve_all(nodes, challenge.epoch, authorization, request_id, step)?;
    let plain = joint_decrypt(nodes, &challenge.ciphertext)?;
    let (selection, nonce) =
        SealedSelection::decode(&plain).map_err(|e| Refusal::Malformed(e.to_string()))?;
    Ok(OpenedChallenge {
        epoch: challenge.epoch,
        selection,
        nonce,
    })
}

/// Opens the IMEIs behind list positions so delegates can be located.
pub fn reveal_delegate_ids(
    nodes: &mut [CustodianNode],
    db: &KeyDb,
    indices: &[u64],
    request_id: &str,
    step: u64,
) -> Result<Vec<(u64, DeviceId)>, Refusal> {
    let mut out = Vec::with_capacity(indices.len());
    for &j in indices {
        let entry = db.entry(j).map_err(|_| Refusal::IndexOutOfRange(j))?;
        let result = joint_decrypt(nodes, &entry.enc_device_id).and_then(|bytes| {
            DeviceId::from_bytes(&bytes).map_err(|e| Refusal::Malformed(e.to_string()))
        });
        let event = if result.is_ok() {
            AuditEventType::IdentityRevealed
        } else {
            AuditEventType::RevealRefused
        };
        for node in nodes.iter_mut() {
            node.log(db.epoch(), event, request_id, step);
        }
        out.push((j, result?));
    }
    Ok(out)
}

/// Opens the challenge and signs the failsafe request bound to its nonce.
pub fn failsafe_request<R: RngCore + CryptoRng>(
    nodes: &mut [CustodianNode],
    challenge: &Challenge,
    authorization: &[u8],
    request_id: &str,
    step: u64,
    rng: &mut R,
) -> Result<GroupSignature, Refusal> {
    let opened = decrypt_challenge(nodes, challenge, authorization, request_id, step)?;
    let sig = collective_sign(nodes, &failsafe_message(opened.epoch, &opened.nonce), rng).map_err(
        |e| match e {
            AbortReason::RefusedToSign(id) => Refusal::Refused(id),
            other => Refusal::Malformed(other.to_string()),
        },
    )?;
    for node in nodes.iter_mut() {
        node.log(
            opened.epoch,
            AuditEventType::FailsafeSigned,
            request_id,
            step,
        );
    }
    Ok(sig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GrowthAudit {
    Ok,
    Alarm {
        epoch: u64,
        previous: u64,
        current: u64,
    },
}

/// Flags the first epoch whose list grew by more than `spike_factor` over the previous one.
pub fn audit_epoch_growth(headers: &[KeyDbHeader], spike_factor: f64) -> GrowthAudit {
    for pair in headers.windows(2) {
        let (prev, cur) = (pair[0].device_count, pair[1].device_count);
        if cur as f64 > prev as f64 * spike_factor {
            return GrowthAudit::Alarm {
                epoch: pair[1].epoch,
                previous: prev,
                current: cur,
            };
        }
    }
    GrowthAudit::Ok
}
