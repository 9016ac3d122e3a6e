use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use super::config::WorldConfig;
use super::network::{Endpoint, Network};
use super::{SimError, Transcript};
use crate::crypto::{
    threshold_keygen, unlock_message, Ciphertext, KeyShare, Nonce, SigKeyPair, VerifyKey,
};
use crate::custodian::{
    audit_epoch_growth, custodian_consensus, decrypt_challenge, failsafe_request, ConsensusOutcome,
    CustodianNode, GrowthAudit, NodeSigner, OpenedChallenge, Refusal,
};
use crate::device::{
    Challenge, DelegationParams, DeviceError, Enclave, EnclaveConfig, SignedEntry, TrustAnchors,
    UnlockRejection, UnlockResponse, UnlockToken,
};
use crate::lawenforcement::{
    resolve, AccessCase, AscendingIndex, CaseError, DelegateLocator, ListSource, LocateOutcome,
};
use crate::registry::{
    DelegateEntry, DeviceId, JurisdictionRegistry, KeyDb, KeyDbHeader, Manufacturer,
    PublishedEpochs,
};

/// Growth factor between consecutive epochs that trips the sybil audit.
pub const SPIKE_FACTOR: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct SimDevice {
    pub enclave: Enclave,
    /// Ground-truth secret, for checking released tokens.
    pub token: UnlockToken,
    pub corrupted: bool,
    pub reachable: bool,
    /// Kept out of every epoch cycle regardless of the dropout draw.
    pub offline: bool,
    pub jurisdiction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub step: u64,
    pub published: bool,
    pub entries: u64,
    pub inactive: usize,
    pub updated: usize,
    pub frozen: usize,
    pub reasons: Vec<String>,
    pub audit: GrowthAudit,
}

#[derive(Debug, Clone, Default)]
pub struct UnlockPlan {
    pub authorization: Vec<u8>,
    /// How many of the revealed delegates, by ascending index, cannot be found.
    pub lost_delegates: usize,
    /// Jurisdiction whose list the requester presents. Defaults to the target's own.
    pub jurisdiction: Option<String>,
}

#[derive(Debug, Clone)]
pub struct UnlockOutcome {
    pub case: AccessCase,
    pub token: Option<UnlockToken>,
    pub error: Option<CaseError>,
}

impl UnlockOutcome {
    pub fn unlocked(&self) -> bool {
        self.token.is_some()
    }
}

/// One covert unlock attempt: the adversary holds every corrupted device's
/// keys and gets the target's challenge opened for free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AdversaryOutcome {
    pub target: usize,
    pub corrupted_delegates: usize,
    pub unlocked: bool,
}

/// Every key the adversary has extracted from corrupted devices, by public key.
pub type Keyring = HashMap<VerifyKey, SigKeyPair>;

struct WorldLocator<'a> {
    devices: &'a [SimDevice],
    ownership: &'a BTreeMap<DeviceId, usize>,
}

impl DelegateLocator for WorldLocator<'_> {
    fn request_signature(&mut self, device: &DeviceId, epoch: u64, nonce: &Nonce) -> LocateOutcome {
        let Some(&i) = self.ownership.get(device) else {
            return LocateOutcome::Unreachable;
        };
        let d = &self.devices[i];
        if !d.reachable {
            return LocateOutcome::Unreachable;
        }
        match d.enclave.delegate_sign_request(nonce, epoch) {
            Ok(sig) => LocateOutcome::Signed(sig),
            Err(_) => LocateOutcome::Refused,
        }
    }
}

pub struct World {
    config: WorldConfig,
    rng: ChaCha20Rng,
    step: u64,
    next_epoch: u64,
    manufacturer: Manufacturer,
    trust: TrustAnchors,
    params: DelegationParams,
    custodians: Vec<CustodianNode>,
    colluding: Vec<KeyShare>,
    devices: Vec<SimDevice>,
    ownership: BTreeMap<DeviceId, usize>,
    epochs: PublishedEpochs,
    jurisdiction_epochs: BTreeMap<u64, JurisdictionRegistry>,
    headers: Vec<KeyDbHeader>,
    network: Network<DelegateEntry>,
    transcript: Transcript,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let keys = threshold_keygen(config.custodians, &mut rng)?;
        let manufacturer = Manufacturer::new(&mut rng);
        let trust = TrustAnchors {
            manufacturer: manufacturer.verify_key(),
            custodian_enc: keys.public_enc_key.clone(),
            custodian_vk: keys.group_verify_key.clone(),
        };
        let params = DelegationParams::new(config.delegation, config.threshold)?;
        let custodians: Vec<CustodianNode> = keys
            .shares
            .iter()
            .cloned()
            .map(|s| {
                CustodianNode::new(
                    s,
                    keys.public_enc_key.clone(),
                    keys.group_verify_key.clone(),
                    trust.manufacturer,
                )
            })
            .collect();
        // The last k - honest custodians collude.
        let colluding = keys.shares[config.honest_custodians as usize..].to_vec();

        let mut world = World {
            rng,
            step: 0,
            next_epoch: 0,
            manufacturer,
            trust,
            params,
            custodians,
            colluding,
            devices: Vec::new(),
            ownership: BTreeMap::new(),
            epochs: PublishedEpochs::new(),
            jurisdiction_epochs: BTreeMap::new(),
            headers: Vec::new(),
            network: Network::default(),
            transcript: Transcript::default(),
            config,
        };
        let jurisdictions: Vec<Option<String>> = if world.config.jurisdictions.is_empty() {
            vec![None; world.config.devices as usize]
        } else {
            world
                .config
                .jurisdictions
                .iter()
                .flat_map(|(name, n)| std::iter::repeat_n(Some(name.clone()), *n as usize))
                .collect()
        };
        for j in jurisdictions {
            world.add_device(false, j);
        }
        let n = world.devices.len();
        let c = world.config.corrupted_count() as usize;
        for i in index::sample(&mut world.rng, n, c) {
            world.devices[i].corrupted = true;
        }
        world.transcript.record(&json!({
            "event": "world_created",
            "devices": n,
            "corrupted": c,
            "custodians": world.config.custodians,
            "colluding": world.colluding.len(),
            "seed": world.config.seed,
        }));
        Ok(world)
    }

    /// Adds a device with a fresh IMEI and returns its position.
    pub fn add_device(&mut self, corrupted: bool, jurisdiction: Option<String>) -> usize {
        let i = self.devices.len();
        let id = DeviceId::from_serial(i as u64).expect("fewer than 10^15 devices");
        let mut secret = vec![0u8; 16];
        self.rng.fill_bytes(&mut secret);
        let token = UnlockToken(secret);
        let mut enclave_cfg = EnclaveConfig::new(self.params);
        enclave_cfg.freeze_period = self.config.epoch_length;
        enclave_cfg.failsafe_timeout = self.config.failsafe_timeout;
        self.devices.push(SimDevice {
            enclave: Enclave::new(id.clone(), token.clone(), self.trust.clone(), enclave_cfg),
            token,
            corrupted,
            reachable: true,
            offline: false,
            jurisdiction,
        });
        self.ownership.insert(id, i);
        i
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn params(&self) -> DelegationParams {
        self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn advance(&mut self, steps: u64) {
        self.step += steps;
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn trust(&self) -> &TrustAnchors {
        &self.trust
    }

    pub fn manufacturer(&self) -> &Manufacturer {
        &self.manufacturer
    }

    pub fn devices(&self) -> &[SimDevice] {
        &self.devices
    }

    pub fn device_mut(&mut self, i: usize) -> &mut SimDevice {
        &mut self.devices[i]
    }

    pub fn device_index(&self, id: &DeviceId) -> Option<usize> {
        self.ownership.get(id).copied()
    }

    pub fn custodians(&self) -> &[CustodianNode] {
        &self.custodians
    }

    pub fn custodians_mut(&mut self) -> &mut [CustodianNode] {
        &mut self.custodians
    }

    /// Shares the adversary holds through colluding custodians.
    pub fn colluding_shares(&self) -> &[KeyShare] {
        &self.colluding
    }

    pub fn epochs(&self) -> &PublishedEpochs {
        &self.epochs
    }

    pub fn jurisdiction_registry(&self, epoch: u64) -> Option<&JurisdictionRegistry> {
        self.jurisdiction_epochs.get(&epoch)
    }

    pub fn headers(&self) -> &[KeyDbHeader] {
        &self.headers
    }

    pub fn network(&self) -> &Network<DelegateEntry> {
        &self.network
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }

    /// Registration over the network, then consensus among the custodians.
    fn register_and_agree(&mut self, members: &[usize], epoch: u64) -> ConsensusOutcome {
        let manufacturer = &self.manufacturer;
        let certify = |vk: &VerifyKey, ct: &Ciphertext| manufacturer.certify(vk, ct);
        let ids: Vec<u32> = self.custodians.iter().map(CustodianNode::id).collect();
        for &i in members {
            let entry = self.devices[i]
                .enclave
                .delegate_register(epoch, &certify, &mut self.rng);
            for &c in &ids {
                self.network
                    .send(Endpoint::Device(i), Endpoint::Custodian(c), entry.clone());
            }
        }
        let mut inbox: BTreeMap<u32, Vec<DelegateEntry>> = BTreeMap::new();
        for env in self.network.deliver_all() {
            if let Endpoint::Custodian(c) = env.to {
                inbox.entry(c).or_default().push(env.payload);
            }
        }
        for node in &mut self.custodians {
            node.receive_registrations(inbox.remove(&node.id()).unwrap_or_default());
        }
        custodian_consensus(&mut self.custodians, epoch, self.step, &mut self.rng)
    }

    /// Advances one epoch: dropout draw, registration, consensus, device updates.
    /// An aborted consensus leaves the previous epoch in force.
    pub fn run_epoch_cycle(&mut self) -> EpochReport {
        self.step += self.config.epoch_length;
        let epoch = self.next_epoch;
        let n = self.devices.len();
        let dropout =
            crate::analysis::corrupted_count(n as u64, self.config.dropout_fraction) as usize;
        let mut inactive: BTreeSet<usize> = index::sample(&mut self.rng, n, dropout)
            .into_iter()
            .collect();
        inactive.extend((0..n).filter(|&i| self.devices[i].offline));
        let active: Vec<usize> = (0..n).filter(|i| !inactive.contains(i)).collect();

        let mut reasons = Vec::new();
        let mut published: Option<(KeyDbHeader, bool)> = None;
        if self.config.jurisdictions.is_empty() {
            match self.register_and_agree(&active, epoch) {
                ConsensusOutcome::Published {
                    db,
                    header,
                    conflicting,
                } => {
                    if !conflicting.is_empty() {
                        reasons.push(format!("{} conflicting keys dropped", conflicting.len()));
                    }
                    self.epochs
                        .publish(db, header)
                        .expect("epochs are published in order");
                    published = Some((header, false));
                }
                ConsensusOutcome::Aborted { reasons: r, .. } => {
                    reasons.extend(r.iter().map(ToString::to_string))
                }
            }
        } else {
            let mut lists = BTreeMap::new();
            let names: Vec<String> = self
                .config
                .jurisdictions
                .iter()
                .map(|(n, _)| n.clone())
                .collect();
            for name in names {
                let members: Vec<usize> = active
                    .iter()
                    .copied()
                    .filter(|&i| self.devices[i].jurisdiction.as_deref() == Some(name.as_str()))
                    .collect();
                match self.register_and_agree(&members, epoch) {
                    ConsensusOutcome::Published { db, .. } => {
                        lists.insert(name, db);
                    }
                    ConsensusOutcome::Aborted { reasons: r, .. } => {
                        reasons.extend(r.iter().map(|x| format!("{name}: {x}")));
                    }
                }
            }
            if reasons.is_empty() {
                let registry = JurisdictionRegistry::new(epoch, lists).expect("non-empty lists");
                let mut signer = NodeSigner {
                    nodes: &self.custodians,
                    rng: &mut self.rng,
                };
                match registry.build_header(&mut signer) {
                    Ok(header) => {
                        self.jurisdiction_epochs.insert(epoch, registry);
                        published = Some((header, true));
                    }
                    Err(e) => reasons.push(e.to_string()),
                }
            }
        }

        let (mut updated, mut frozen) = (0, 0);
        let mut entries = 0;
        let mut audit = GrowthAudit::Ok;
        if let Some((header, seeded)) = published {
            entries = header.device_count;
            self.headers.push(header);
            let k = self.headers.len();
            audit = audit_epoch_growth(&self.headers[k.saturating_sub(2)..], SPIKE_FACTOR);
            for &i in &active {
                let enclave = &mut self.devices[i].enclave;
                let result = if seeded {
                    enclave.select_delegation_seeded(&header, self.step, &mut self.rng)
                } else {
                    enclave.select_delegation(&header, self.step, &mut self.rng)
                };
                match result {
                    Ok(()) => updated += 1,
                    Err(DeviceError::Frozen { .. }) => frozen += 1,
                    Err(e) => reasons.push(format!("device {i}: {e}")),
                }
            }
            self.next_epoch += 1;
        }
        let report = EpochReport {
            epoch,
            step: self.step,
            published: published.is_some(),
            entries,
            inactive: inactive.len(),
            updated,
            frozen,
            reasons,
            audit,
        };
        self.transcript
            .record(&json!({ "event": "epoch_cycle", "report": &report }));
        report
    }

    /// All five access steps against device `target`.
    pub fn unlock(&mut self, target: usize, request_id: &str, plan: &UnlockPlan) -> UnlockOutcome {
        self.run_case(target, request_id, plan, true)
    }

    /// Steps 1 to 4 only; the case is left holding its collected response.
    pub fn prepare(&mut self, target: usize, request_id: &str, plan: &UnlockPlan) -> UnlockOutcome {
        self.run_case(target, request_id, plan, false)
    }

    fn run_case(
        &mut self,
        target: usize,
        request_id: &str,
        plan: &UnlockPlan,
        submit: bool,
    ) -> UnlockOutcome {
        let mut case = AccessCase::new(request_id, self.params);
        let mut lost = Vec::new();
        let mut result = self.drive_case(&mut case, target, plan, &mut lost);
        for i in lost {
            self.devices[i].reachable = true;
        }
        if submit && result.is_ok() {
            result = case
                .submit(&mut self.devices[target].enclave, self.step)
                .map(Some);
        }
        for line in case.transcript() {
            self.transcript.record(line);
        }
        let (token, error) = match result {
            Ok(t) => (t, None),
            Err(e) => (None, Some(e)),
        };
        UnlockOutcome { case, token, error }
    }

    fn drive_case(
        &mut self,
        case: &mut AccessCase,
        target: usize,
        plan: &UnlockPlan,
        lost: &mut Vec<usize>,
    ) -> Result<Option<UnlockToken>, CaseError> {
        let step = self.step;
        case.read_challenge(Some(&mut self.devices[target].enclave), step, &mut self.rng)?;
        let epoch = case.challenge().expect("just read").epoch;
        let name = plan
            .jurisdiction
            .clone()
            .or_else(|| self.devices[target].jurisdiction.clone())
            .unwrap_or_default();
        let lists = if self.config.jurisdictions.is_empty() {
            ListSource::Epochs(&self.epochs)
        } else {
            let registry = self
                .jurisdiction_epochs
                .get(&epoch)
                .ok_or(CaseError::UnknownEpoch(epoch))?;
            ListSource::Jurisdiction {
                registry,
                name: &name,
            }
        };
        case.request_decryption(&mut self.custodians, lists, &plan.authorization, step)?;
        let mut revealed: Vec<u64> = case.delegates().iter().map(|(j, _)| *j).collect();
        revealed.sort_unstable();
        for (j, id) in case.delegates() {
            if revealed[..plan.lost_delegates.min(revealed.len())].contains(j) {
                let i = self.ownership[id];
                if self.devices[i].reachable {
                    self.devices[i].reachable = false;
                    lost.push(i);
                }
            }
        }
        case.build_proofs(lists, step)?;
        let mut locator = WorldLocator {
            devices: &self.devices,
            ownership: &self.ownership,
        };
        case.collect(&mut locator, &mut AscendingIndex, step)?;
        Ok(None)
    }

    /// Hands an arbitrary response to device `target`.
    pub fn submit_response(
        &mut self,
        target: usize,
        response: &UnlockResponse,
    ) -> Result<UnlockToken, UnlockRejection> {
        self.devices[target].enclave.device_unlock(response)
    }

    pub fn reveal_challenge(&mut self, target: usize) -> Result<Challenge, DeviceError> {
        self.devices[target]
            .enclave
            .reveal_challenge(self.step, &mut self.rng)
    }

    pub fn open_challenge(
        &mut self,
        challenge: &Challenge,
        authorization: &[u8],
        request_id: &str,
    ) -> Result<OpenedChallenge, Refusal> {
        decrypt_challenge(
            &mut self.custodians,
            challenge,
            authorization,
            request_id,
            self.step,
        )
    }

    /// Fresh challenge from `target`, custodian-signed failsafe request, device check.
    pub fn failsafe_unlock(
        &mut self,
        target: usize,
        authorization: &[u8],
        request_id: &str,
    ) -> Result<UnlockToken, SimError> {
        let step = self.step;
        let chal = self.devices[target]
            .enclave
            .reveal_challenge(step, &mut self.rng)?;
        let sig = failsafe_request(
            &mut self.custodians,
            &chal,
            authorization,
            request_id,
            step,
            &mut self.rng,
        )?;
        let token = self.devices[target].enclave.failsafe_unlock(&sig, step)?;
        self.transcript.record(&json!({ "event": "failsafe_unlock", "request_id": request_id, "target": target, "step": step }));
        Ok(token)
    }

    /// Keys extracted from every corrupted device, all epochs.
    pub fn adversary_keyring(&self) -> Keyring {
        let mut ring = Keyring::new();
        for d in self.devices.iter().filter(|d| d.corrupted) {
            for keys in d.enclave.compromise().into_values() {
                ring.insert(keys.verify_key(), keys);
            }
        }
        ring
    }

    /// The adversary seizes `target`, has its challenge opened for free and
    /// signs with every corrupted delegate it holds keys for.
    pub fn adversary_attempt(
        &mut self,
        target: usize,
        keyring: &Keyring,
    ) -> Result<AdversaryOutcome, SimError> {
        let step = self.step;
        let chal = self.devices[target]
            .enclave
            .reveal_challenge(step, &mut self.rng)?;
        let opened = decrypt_challenge(&mut self.custodians, &chal, b"", "adversary", step)?;
        let name = self.devices[target]
            .jurisdiction
            .clone()
            .unwrap_or_default();
        let lists = match self.jurisdiction_epochs.get(&opened.epoch) {
            Some(registry) => ListSource::Jurisdiction {
                registry,
                name: &name,
            },
            None => ListSource::Epochs(&self.epochs),
        };
        let (db, indices, binding): (&KeyDb, _, _) = resolve(lists, &opened, self.params.size())?;
        let message = unlock_message(opened.epoch, &opened.nonce);
        let mut signed = Vec::new();
        for j in indices {
            let (entry, proof) = db.entry_at(j).expect("delegation indices are in range");
            if let Some(keys) = keyring.get(&entry.verify_key) {
                signed.push(SignedEntry {
                    index: j,
                    entry: entry.clone(),
                    signature: keys.sign(&message),
                    proof,
                });
            }
        }
        let corrupted_delegates = signed.len();
        let unlocked = corrupted_delegates >= self.params.threshold()
            && self.devices[target]
                .enclave
                .device_unlock(&UnlockResponse {
                    entries: signed,
                    jurisdiction: binding,
                })
                .is_ok();
        Ok(AdversaryOutcome {
            target,
            corrupted_delegates,
            unlocked,
        })
    }
}
