//! Named end-to-end scripts. Each builds its own world from a seed, drives
//! it, and evaluates a fixed list of assertions against the outcome.

use serde::Serialize;
use serde_json::json;

use super::world::{UnlockPlan, World};
use super::{SimError, Transcript, WorldConfig};
use crate::crypto::unlock_message;
use crate::custodian::Refusal;
use crate::custodian::{AuditEventType, GrowthAudit};
use crate::device::{
    SealedSelection, SignedEntry, UnlockRejection, UnlockResponse, STEPS_PER_MONTH,
};
use crate::lawenforcement::{CaseError, CaseState};

pub const SCENARIOS: [&str; 9] = [
    "honest-unlock",
    "custodian-veto",
    "sybil-spike",
    "swapped-delegation",
    "replay",
    "jurisdiction-cross-border",
    "failsafe",
    "lost-delegates",
    "mass-surveillance",
];

/// Devices targeted by the mass-surveillance script.
pub const SURVEILLANCE_TARGETS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub assertions: Vec<Assertion>,
    pub transcript: Transcript,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }
}

struct Script {
    world: World,
    assertions: Vec<Assertion>,
}

impl Script {
    fn new(config: WorldConfig) -> Result<Self, SimError> {
        Ok(Script {
            world: World::new(config)?,
            assertions: Vec::new(),
        })
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        let a = Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        };
        self.world
            .transcript_mut()
            .record(&json!({ "event": "assertion", "assertion": &a }));
        self.assertions.push(a);
    }

    fn finish(self, name: &str, seed: u64) -> ScenarioReport {
        ScenarioReport {
            name: name.to_string(),
            seed,
            assertions: self.assertions,
            transcript: self.world.transcript().clone(),
        }
    }
}

fn config(seed: u64, devices: u64, delegation: usize, threshold: usize) -> WorldConfig {
    WorldConfig {
        devices,
        custodians: 3,
        delegation,
        threshold,
        honest_custodians: 3,
        seed,
        ..Default::default()
    }
}

pub fn run_scenario(name: &str, seed: u64) -> Result<ScenarioReport, SimError> {
    let script = match name {
        "honest-unlock" => honest_unlock(seed)?,
        "custodian-veto" => custodian_veto(seed)?,
        "sybil-spike" => sybil_spike(seed)?,
        "swapped-delegation" => swapped_delegation(seed)?,
        "replay" => replay(seed)?,
        "jurisdiction-cross-border" => cross_border(seed)?,
        "failsafe" => failsafe(seed)?,
        "lost-delegates" => lost_delegates(seed)?,
        "mass-surveillance" => mass_surveillance(seed)?,
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    Ok(script.finish(name, seed))
}

fn honest_unlock(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(config(seed, 64, 6, 4))?;
    let r = s.world.run_epoch_cycle();
    s.check(
        "epoch published",
        r.published && r.entries == 64,
        format!("{} entries", r.entries),
    );
    let out = s.world.unlock(0, "honest-1", &UnlockPlan::default());
    let expected = s.world.devices()[0].token.clone();
    s.check(
        "case complete",
        out.case.state() == CaseState::Complete,
        format!("{:?}", out.error),
    );
    s.check("correct token", out.token.as_ref() == Some(&expected), "");
    s.check(
        "effort equals t",
        out.case.effort() == 4,
        format!("effort {}", out.case.effort()),
    );
    Ok(s)
}

fn custodian_veto(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(config(seed, 32, 4, 3))?;
    s.world.run_epoch_cycle();
    s.world.custodians_mut()[1].set_policy(Box::new(|auth| auth == b"warrant"));
    let denied = s.world.unlock(
        0,
        "veto-1",
        &UnlockPlan {
            authorization: b"none".to_vec(),
            ..Default::default()
        },
    );
    s.check(
        "refused by custodian 2",
        denied.case.state() == CaseState::Failed
            && denied.error == Some(CaseError::Custodian(Refusal::Refused(2))),
        format!("{:?}", denied.error),
    );
    let logged = s.world.custodians()[1]
        .audit_log()
        .events()
        .iter()
        .any(|e| e.event_type == AuditEventType::DecryptionRefused && e.request_id == "veto-1");
    s.check("refusal audited", logged, "");
    let allowed = s.world.unlock(
        1,
        "veto-2",
        &UnlockPlan {
            authorization: b"warrant".to_vec(),
            ..Default::default()
        },
    );
    s.check(
        "warranted request completes",
        allowed.unlocked(),
        format!("{:?}", allowed.error),
    );
    Ok(s)
}

fn sybil_spike(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(config(seed, 40, 4, 3))?;
    let first = s.world.run_epoch_cycle();
    let steady = s.world.run_epoch_cycle();
    s.check(
        "no alarm at steady size",
        first.audit == GrowthAudit::Ok && steady.audit == GrowthAudit::Ok,
        "",
    );
    for _ in 0..40 {
        s.world.add_device(true, None);
    }
    let spike = s.world.run_epoch_cycle();
    s.check(
        "alarm on doubled list",
        matches!(
            spike.audit,
            GrowthAudit::Alarm {
                previous: 40,
                current: 80,
                ..
            }
        ),
        format!("{:?}", spike.audit),
    );
    Ok(s)
}

fn swapped_delegation(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(WorldConfig {
        corruption_fraction: 0.5,
        ..config(seed, 32, 4, 3)
    })?;
    s.world.run_epoch_cycle();
    let ring = s.world.adversary_keyring();
    let target = (0..32)
        .find(|&i| !s.world.devices()[i].corrupted)
        .expect("honest device");
    let chal = s.world.reveal_challenge(target)?;
    let opened = s.world.open_challenge(&chal, b"", "swap-1")?;
    let SealedSelection::Indices(l) = opened.selection else {
        unreachable!("single-list world")
    };
    let (db, _) = s.world.epochs().get(opened.epoch).expect("published");
    let message = unlock_message(opened.epoch, &opened.nonce);
    // Corrupted devices outside the delegation, each with a genuine proof.
    let outsiders: Vec<SignedEntry> = (1..=db.len())
        .filter(|j| !l.contains(j))
        .filter_map(|j| {
            let (entry, proof) = db.entry_at(j).ok()?;
            let keys = ring.get(&entry.verify_key)?;
            Some(SignedEntry {
                index: j,
                entry: entry.clone(),
                signature: keys.sign(&message),
                proof,
            })
        })
        .take(3)
        .collect();
    let swapped = UnlockResponse {
        entries: outsiders.clone(),
        jurisdiction: None,
    };
    let r = s.world.submit_response(target, &swapped);
    s.check(
        "outsiders rejected",
        matches!(r, Err(UnlockRejection::NotInDelegation(_))),
        format!("{r:?}"),
    );
    // Same signatures relabelled with indices from L: proofs no longer bind.
    let relabelled = UnlockResponse {
        entries: outsiders
            .into_iter()
            .zip(&l)
            .map(|(mut e, &j)| {
                e.index = j;
                e
            })
            .collect(),
        jurisdiction: None,
    };
    let r = s.world.submit_response(target, &relabelled);
    s.check(
        "relabelled indices rejected",
        matches!(r, Err(UnlockRejection::BadProof(_))),
        format!("{r:?}"),
    );
    Ok(s)
}

fn replay(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(config(seed, 32, 4, 3))?;
    s.world.run_epoch_cycle();
    let first = s.world.unlock(2, "replay-1", &UnlockPlan::default());
    s.check(
        "original unlock",
        first.unlocked(),
        format!("{:?}", first.error),
    );
    let stale = first.case.unlock_response();
    let r = s.world.submit_response(2, &stale);
    s.check(
        "replay without challenge",
        r == Err(UnlockRejection::NoChallenge),
        format!("{r:?}"),
    );
    s.world.reveal_challenge(2)?;
    let r = s.world.submit_response(2, &stale);
    s.check(
        "replay against fresh nonce",
        matches!(r, Err(UnlockRejection::BadSignature(_))),
        format!("{r:?}"),
    );
    s.world.advance(s.world.config().epoch_length);
    s.world.run_epoch_cycle();
    s.world.reveal_challenge(2)?;
    let r = s.world.submit_response(2, &stale);
    s.check("replay in later epoch", r.is_err(), format!("{r:?}"));
    Ok(s)
}

fn cross_border(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(WorldConfig {
        jurisdictions: vec![("north".into(), 24), ("south".into(), 24)],
        ..config(seed, 48, 4, 3)
    })?;
    let r = s.world.run_epoch_cycle();
    s.check(
        "super-root published",
        r.published && r.entries == 48,
        format!("{r:?}"),
    );
    let abroad = s.world.unlock(
        0,
        "border-1",
        &UnlockPlan {
            jurisdiction: Some("south".into()),
            ..Default::default()
        },
    );
    s.check(
        "unlock with foreign list",
        abroad.unlocked(),
        format!("{:?}", abroad.error),
    );
    let all_south = abroad.case.delegates().iter().all(|(_, id)| {
        let i = s.world.device_index(id).expect("known device");
        s.world.devices()[i].jurisdiction.as_deref() == Some("south")
    });
    s.check(
        "delegates drawn from presenting jurisdiction",
        all_south,
        "",
    );
    let home = s.world.unlock(1, "border-2", &UnlockPlan::default());
    s.check(
        "unlock with home list",
        home.unlocked(),
        format!("{:?}", home.error),
    );

    let prepared = s.world.prepare(
        2,
        "border-3",
        &UnlockPlan {
            jurisdiction: Some("south".into()),
            ..Default::default()
        },
    );
    let mut forged = prepared.case.unlock_response();
    if let Some(b) = forged.jurisdiction.as_mut() {
        b.jurisdiction.device_count += 8;
    }
    let r = s.world.submit_response(2, &forged);
    s.check(
        "inflated jurisdiction count rejected",
        matches!(r, Err(UnlockRejection::Jurisdiction(_))),
        format!("{r:?}"),
    );
    Ok(s)
}

fn failsafe(seed: u64) -> Result<Script, SimError> {
    let mut s = Script::new(config(seed, 16, 3, 2))?;
    s.world.run_epoch_cycle();
    s.world.device_mut(0).offline = true;
    s.world.device_mut(1).offline = true;
    let early = s.world.step() + STEPS_PER_MONTH;
    s.world.device_mut(0).enclave.record_password_use(early);
    while s.world.step() < 2 * STEPS_PER_MONTH {
        s.world.run_epoch_cycle();
    }
    let r = s.world.failsafe_unlock(0, b"", "failsafe-early");
    s.check(
        "premature request rejected",
        r == Err(SimError::Unlock(UnlockRejection::Premature)),
        format!("{r:?}"),
    );
    let timeout = s.world.config().failsafe_timeout;
    while s.world.step() <= timeout + s.world.config().epoch_length {
        s.world.run_epoch_cycle();
    }
    let expected = s.world.devices()[0].token.clone();
    let r = s.world.failsafe_unlock(0, b"", "failsafe-1");
    s.check(
        "failsafe unlock after lapse",
        r.as_ref() == Ok(&expected),
        format!("{r:?}"),
    );
    let r = s.world.failsafe_unlock(1, b"", "failsafe-2");
    s.check(
        "no password use, no failsafe",
        r == Err(SimError::Unlock(UnlockRejection::PasswordNotUsed)),
        format!("{r:?}"),
    );
    Ok(s)
}

fn lost_delegates(seed: u64) -> Result<Script, SimError> {
    let (d, t) = (6, 4);
    let mut s = Script::new(config(seed, 48, d, t))?;
    s.world.run_epoch_cycle();
    let tolerable = s.world.unlock(
        0,
        "lost-1",
        &UnlockPlan {
            lost_delegates: d - t,
            ..Default::default()
        },
    );
    s.check(
        "D - t lost still unlocks",
        tolerable.unlocked(),
        format!("{:?}", tolerable.error),
    );
    s.check(
        "effort counts lost delegates",
        tolerable.case.effort() == d as u64,
        format!("{}", tolerable.case.effort()),
    );
    let too_many = s.world.unlock(
        1,
        "lost-2",
        &UnlockPlan {
            lost_delegates: d - t + 1,
            ..Default::default()
        },
    );
    s.check(
        "D - t + 1 lost fails",
        too_many.error
            == Some(CaseError::Exhausted {
                collected: t - 1,
                need: t,
            }),
        format!("{:?}", too_many.error),
    );
    Ok(s)
}

fn mass_surveillance(seed: u64) -> Result<Script, SimError> {
    let (d, t) = (6, 4);
    let mut s = Script::new(config(seed, 200, d, t))?;
    s.world.run_epoch_cycle();
    let mut effort = 0;
    let mut unlocked = 0;
    for target in 0..SURVEILLANCE_TARGETS {
        let out = s
            .world
            .unlock(target, &format!("mass-{target}"), &UnlockPlan::default());
        effort += out.case.effort();
        unlocked += usize::from(out.unlocked());
    }
    let required = (SURVEILLANCE_TARGETS * t) as u64;
    s.world.transcript_mut().record(&json!({
        "event": "surveillance_report",
        "targets": SURVEILLANCE_TARGETS,
        "unlocked": unlocked,
        "total_effort": effort,
        "minimum_effort": required,
    }));
    s.check(
        "every target unlocked",
        unlocked == SURVEILLANCE_TARGETS,
        format!("{unlocked}"),
    );
    s.check(
        "effort at least m·t",
        effort >= required,
        format!("{effort} ≥ {required}"),
    );
    Ok(s)
}
