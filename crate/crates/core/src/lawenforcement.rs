//! The requester's side of an exceptional-access case.
//!
//! An [`AccessCase`] walks one seized device through the five steps in order:
//! read the challenge, have the custodians open it and name the delegates,
//! build Merkle proofs, collect `t` signatures, submit. Calling a step out of order fails with
//! [`CaseError::WrongState`] and leaves the case untouched.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::{CryptoRng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{unlock_message, verify, Nonce, Signature};
use crate::custodian::{
    decrypt_challenge, reveal_delegate_ids, CustodianNode, OpenedChallenge, Refusal,
};
use crate::device::{
    delegation_indices, Challenge, DelegationParams, DeviceError, Enclave, SealedSelection,
    SignedEntry, UnlockRejection, UnlockResponse, UnlockToken,
};
use crate::merkle::MerklePathProof;
use crate::registry::{
    DelegateEntry, DeviceId, JurisdictionBinding, JurisdictionRegistry, KeyDb, PublishedEpochs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CaseState {
    Init,
    ChallengeRead,
    DelegationRevealed,
    Collecting,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaseError {
    #[error("step requires state {expected:?}, case is in {actual:?}")]
    WrongState {
        expected: CaseState,
        actual: CaseState,
    },
    #[error("device refused: {0}")]
    Device(#[from] DeviceError),
    #[error("custodians refused: {0}")]
    Custodian(#[from] Refusal),
    #[error("investigators do not hold the device")]
    NoPossession,
    #[error("Merkle proofs have not been built")]
    ProofsNotBuilt,
    #[error("Merkle proofs were already built")]
    ProofsAlreadyBuilt,
    #[error("no published list for epoch {0}")]
    UnknownEpoch(u64),
    #[error("selection mode does not match the list source")]
    ListMismatch,
    #[error("collected {collected} of {need} signatures before running out of delegates")]
    Exhausted { collected: usize, need: usize },
    #[error("device rejected the unlock: {0}")]
    Unlock(#[from] UnlockRejection),
}

/// What happened when investigators approached one delegate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocateOutcome {
    Signed(Signature),
    Unreachable,
    Refused,
}

/// Finds a delegate device and asks it to sign the unlock request.
pub trait DelegateLocator {
    fn request_signature(&mut self, device: &DeviceId, epoch: u64, nonce: &Nonce) -> LocateOutcome;
}

/// Order in which delegates are approached, as positions into `delegates`.
pub trait CollectionStrategy {
    fn order(&mut self, delegates: &[(u64, DeviceId)]) -> Vec<usize>;
}

/// Approach delegates by ascending list index until `t` have signed.
#[derive(Debug, Clone, Copy, Default)]
pub struct AscendingIndex;

impl CollectionStrategy for AscendingIndex {
    fn order(&mut self, delegates: &[(u64, DeviceId)]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..delegates.len()).collect();
        order.sort_by_key(|&i| delegates[i].0);
        order
    }
}

/// Where the published lists come from.
#[derive(Debug, Clone, Copy)]
pub enum ListSource<'a> {
    Epochs(&'a PublishedEpochs),
    Jurisdiction {
        registry: &'a JurisdictionRegistry,
        name: &'a str,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEvent {
    pub request_id: String,
    pub step: u64,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AccessCase {
    request_id: String,
    params: DelegationParams,
    state: CaseState,
    failure: Option<CaseError>,
    challenge: Option<Challenge>,
    opened: Option<OpenedChallenge>,
    delegates: Vec<(u64, DeviceId)>,
    proofs: BTreeMap<u64, (DelegateEntry, MerklePathProof)>,
    proofs_built: bool,
    binding: Option<JurisdictionBinding>,
    collected: Vec<SignedEntry>,
    effort: u64,
    transcript: Vec<TranscriptEvent>,
}

/// The list a challenge's indices point into, resolved from `lists`.
pub(crate) fn resolve<'a>(
    lists: ListSource<'a>,
    opened: &OpenedChallenge,
    d: usize,
) -> Result<(&'a KeyDb, Vec<u64>, Option<JurisdictionBinding>), CaseError> {
    match (lists, &opened.selection) {
        (ListSource::Epochs(epochs), SealedSelection::Indices(l)) => epochs
            .get(opened.epoch)
            .map(|(db, _)| (db, l.clone(), None))
            .ok_or(CaseError::UnknownEpoch(opened.epoch)),
        (ListSource::Jurisdiction { registry, name }, SealedSelection::Seed(seed)) => {
            if registry.epoch() != opened.epoch {
                return Err(CaseError::UnknownEpoch(opened.epoch));
            }
            let (Some(db), Ok(binding)) = (registry.list(name), registry.binding(name)) else {
                return Err(CaseError::ListMismatch);
            };
            let l = delegation_indices(seed, &db.root(), d, db.len())
                .map_err(|_| CaseError::ListMismatch)?;
            Ok((db, l, Some(binding)))
        }
        _ => Err(CaseError::ListMismatch),
    }
}

impl AccessCase {
    pub fn new(request_id: impl Into<String>, params: DelegationParams) -> Self {
        AccessCase {
            request_id: request_id.into(),
            params,
            state: CaseState::Init,
            failure: None,
            challenge: None,
            opened: None,
            delegates: Vec::new(),
            proofs: BTreeMap::new(),
            proofs_built: false,
            binding: None,
            collected: Vec::new(),
            effort: 0,
            transcript: Vec::new(),
        }
    }

    pub fn state(&self) -> CaseState {
        self.state
    }

    /// Why the case ended in [`CaseState::Failed`].
    pub fn failure(&self) -> Option<&CaseError> {
        self.failure.as_ref()
    }

    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    /// Delegates approached so far, including ones that could not help.
    pub fn effort(&self) -> u64 {
        self.effort
    }

    pub fn challenge(&self) -> Option<&Challenge> {
        self.challenge.as_ref()
    }

    pub fn opened(&self) -> Option<&OpenedChallenge> {
        self.opened.as_ref()
    }

    pub fn delegates(&self) -> &[(u64, DeviceId)] {
        &self.delegates
    }

    pub fn proofs(&self) -> &BTreeMap<u64, (DelegateEntry, MerklePathProof)> {
        &self.proofs
    }

    pub fn collected(&self) -> &[SignedEntry] {
        &self.collected
    }

    pub fn transcript(&self) -> &[TranscriptEvent] {
        &self.transcript
    }

    pub fn write_transcript<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.transcript {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn expect(&self, expected: CaseState) -> Result<(), CaseError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(CaseError::WrongState {
                expected,
                actual: self.state,
            })
        }
    }

    fn note(&mut self, step: u64, event: &str, index: Option<u64>, detail: Option<String>) {
        self.transcript.push(TranscriptEvent {
            request_id: self.request_id.clone(),
            step,
            event: event.to_string(),
            index,
            detail,
        });
    }

    fn fail<E: Into<CaseError>>(&mut self, step: u64, err: E) -> CaseError {
        let err = err.into();
        self.state = CaseState::Failed;
        self.failure = Some(err.clone());
        self.note(step, "failed", None, Some(err.to_string()));
        err
    }

    /// Step 1: have the seized device emit its challenge. `None` means the
    /// investigators do not physically hold the device.
    pub fn read_challenge<R: RngCore + CryptoRng>(
        &mut self,
        device: Option<&mut Enclave>,
        step: u64,
        rng: &mut R,
    ) -> Result<&Challenge, CaseError> {
        self.expect(CaseState::Init)?;
        let device = device.ok_or(CaseError::NoPossession)?;
        match device.reveal_challenge(step, rng) {
            Ok(chal) => {
                self.note(
                    step,
                    "challenge_read",
                    None,
                    Some(format!("epoch {}", chal.epoch)),
                );
                self.challenge = Some(chal);
                self.state = CaseState::ChallengeRead;
                Ok(self.challenge.as_ref().expect("just set"))
            }
            Err(e) => Err(self.fail(step, e)),
        }
    }

    /// Step 2: custodians open the challenge and reveal who the delegates are.
    pub fn request_decryption(
        &mut self,
        custodians: &mut [CustodianNode],
        lists: ListSource<'_>,
        authorization: &[u8],
        step: u64,
    ) -> Result<&[(u64, DeviceId)], CaseError> {
        self.expect(CaseState::ChallengeRead)?;
        let chal = self.challenge.clone().expect("set in ChallengeRead");
        let opened =
            match decrypt_challenge(custodians, &chal, authorization, &self.request_id, step) {
                Ok(o) => o,
                Err(e) => return Err(self.fail(step, e)),
            };
        self.note(step, "challenge_opened", None, None);
        let (db, indices, _) = match resolve(lists, &opened, self.params.size()) {
            Ok(r) => r,
            Err(e) => return Err(self.fail(step, e)),
        };
        let delegates = match reveal_delegate_ids(custodians, db, &indices, &self.request_id, step)
        {
            Ok(d) => d,
            Err(e) => return Err(self.fail(step, e)),
        };
        for (j, _) in &delegates {
            self.note(step, "delegate_revealed", Some(*j), None);
        }
        self.opened = Some(opened);
        self.delegates = delegates;
        self.state = CaseState::DelegationRevealed;
        Ok(&self.delegates)
    }

    /// Step 3: Merkle proofs for every delegate index against the public list.
    pub fn build_proofs(&mut self, lists: ListSource<'_>, step: u64) -> Result<usize, CaseError> {
        self.expect(CaseState::DelegationRevealed)?;
        if self.proofs_built {
            return Err(CaseError::ProofsAlreadyBuilt);
        }
        let opened = self.opened.clone().expect("set in DelegationRevealed");
        let (db, indices, binding) = match resolve(lists, &opened, self.params.size()) {
            Ok(r) => r,
            Err(e) => return Err(self.fail(step, e)),
        };
        if indices.iter().ne(self.delegates.iter().map(|(j, _)| j)) {
            return Err(self.fail(step, CaseError::ListMismatch));
        }
        for &j in &indices {
            let (entry, proof) = db.entry_at(j).expect("revealed indices are in range");
            self.proofs.insert(j, (entry.clone(), proof));
        }
        self.binding = binding;
        self.proofs_built = true;
        self.note(
            step,
            "proofs_built",
            None,
            Some(format!("{} proofs", indices.len())),
        );
        Ok(self.proofs.len())
    }

    /// Step 4: approach delegates in strategy order until `t` valid signatures are in hand.
    pub fn collect(
        &mut self,
        locator: &mut dyn DelegateLocator,
        strategy: &mut dyn CollectionStrategy,
        step: u64,
    ) -> Result<&[SignedEntry], CaseError> {
        self.expect(CaseState::DelegationRevealed)?;
        if !self.proofs_built {
            return Err(CaseError::ProofsNotBuilt);
        }
        self.state = CaseState::Collecting;
        let opened = self.opened.clone().expect("set in DelegationRevealed");
        let message = unlock_message(opened.epoch, &opened.nonce);
        let need = self.params.threshold();
        for pos in strategy.order(&self.delegates) {
            if self.collected.len() >= need {
                break;
            }
            let (j, id) = self.delegates[pos].clone();
            self.effort += 1;
            let outcome = locator.request_signature(&id, opened.epoch, &opened.nonce);
            let (entry, proof) = self.proofs[&j].clone();
            match outcome {
                LocateOutcome::Signed(sig) if verify(&entry.verify_key, &message, &sig) => {
                    self.collected.push(SignedEntry {
                        index: j,
                        entry,
                        signature: sig,
                        proof,
                    });
                    self.note(step, "signature_collected", Some(j), None);
                }
                LocateOutcome::Signed(_) => self.note(step, "signature_invalid", Some(j), None),
                LocateOutcome::Unreachable => {
                    self.note(step, "delegate_unreachable", Some(j), None)
                }
                LocateOutcome::Refused => self.note(step, "delegate_refused", Some(j), None),
            }
        }
        if self.collected.len() < need {
            let collected = self.collected.len();
            return Err(self.fail(step, CaseError::Exhausted { collected, need }));
        }
        Ok(&self.collected)
    }

    /// The `(S, M)` message that [`AccessCase::submit`] hands to the device.
    pub fn unlock_response(&self) -> UnlockResponse {
        UnlockResponse {
            entries: self.collected.clone(),
            jurisdiction: self.binding.clone(),
        }
    }

    /// Step 5: hand the signatures to the seized device.
    pub fn submit(&mut self, device: &mut Enclave, step: u64) -> Result<UnlockToken, CaseError> {
        self.expect(CaseState::Collecting)?;
        match device.device_unlock(&self.unlock_response()) {
            Ok(token) => {
                self.state = CaseState::Complete;
                self.note(
                    step,
                    "unlocked",
                    None,
                    Some(format!("effort {}", self.effort)),
                );
                Ok(token)
            }
            Err(e) => Err(self.fail(step, e)),
        }
    }
}
