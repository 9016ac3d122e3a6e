//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --test acceptance`.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use jje::analysis::{corrupted_count, exact_corruption_probability, Model, SWEEP_POPULATION};
use jje::crypto::{
    combine, partial_decrypt, prg_distinct, sha256, threshold_encrypt, threshold_keygen,
    Ciphertext, Nonce, PartialDecryption, SigKeyPair, Signature,
};
use jje::custodian::{
    custodian_consensus, AbortReason, ConsensusOutcome, CustodianNode, Misbehavior,
};
use jje::device::{
    delegation_indices, sample_delegation, SealedSelection, SignedEntry, UnlockResponse,
};
use jje::registry::{verify_entry, DelegateEntry, DeviceId, KeyDb, Manufacturer};
use jje::sim::{monte_carlo_unlock_without_honest, run_scenario, World, WorldConfig};

// Pinned tolerances and budgets.
const AC1_BUDGET: Duration = Duration::from_secs(1);
const AC1_BOUND_035: f64 = 0.01;
const AC1_BOUND_015: f64 = 1e-6;
const AC2_TRIALS: u64 = 100_000;
const AC2_SIGMAS: f64 = 3.0;
const AC2_BUDGET: Duration = Duration::from_secs(120);
const AC3_BUDGET: Duration = Duration::from_secs(5);
const AC4_RUNS: u64 = 100;
const AC5_TRIALS: u64 = 10_000;
const AC5_SIGMAS: f64 = 3.0;
const AC6_ATTEMPTS: u64 = 10_000;
const AC7_DEVICES: u64 = 10_000;
const AC7_BOUND: f64 = 0.01;
const AC7_ALPHA: f64 = 0.01;
const AC8_TARGETS: u64 = 50;
const AC10_DEVICES: u64 = 100_000;
const AC10_BUDGET: Duration = Duration::from_secs(30);
const AC10_MIN_PROOF_RATE: f64 = 1e4;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Hypergeometric tail from the pmf recurrence
/// `pmf(i+1)/pmf(i) = (C-i)(D-i) / ((i+1)(N-C-D+i+1))`, independent of the
/// binomial-coefficient route in the library.
fn hypergeometric_by_recurrence(n: u64, c: u64, d: u64, t: u64) -> BigRational {
    let lo = d.saturating_sub(n - c);
    // pmf(lo) = C(C,lo) C(N-C,D-lo) / C(N,D) written as a running product.
    let mut pmf = BigRational::one();
    for j in 0..lo {
        pmf *= ratio(c - j, j + 1);
    }
    for j in 0..(d - lo) {
        pmf *= ratio(n - c - j, j + 1);
    }
    for j in 0..d {
        pmf *= ratio(j + 1, n - j);
    }
    let mut total = BigRational::zero();
    let hi = d.min(c);
    for i in lo..=hi {
        if i >= t {
            total += &pmf;
        }
        if i < hi {
            pmf *= ratio((c - i) * (d - i), (i + 1) * (n - c - d + i + 1));
        }
    }
    total
}

/// Binomial tail via Horner-style accumulation of `q^i (1-q)^{D-i}` with a
/// running coefficient.
fn binomial_by_recurrence(n: u64, c: u64, d: u64, t: u64) -> BigRational {
    let q = ratio(c, n);
    let p = BigRational::one() - &q;
    let mut coeff = BigRational::one();
    let mut total = BigRational::zero();
    for i in 0..=d {
        if i >= t {
            total += &coeff
                * num_traits::pow(q.clone(), i as usize)
                * num_traits::pow(p.clone(), (d - i) as usize);
        }
        coeff *= ratio(d - i, i + 1);
    }
    total
}

/// Enumerates every size-`d` subset of `[0, n)` with the first `c` elements corrupted.
fn enumerate(n: u64, c: u64, d: u64, t: u64) -> BigRational {
    let mut hits = 0u64;
    let mut total = 0u64;
    for mask in 0u64..(1 << n) {
        if mask.count_ones() as u64 != d {
            continue;
        }
        total += 1;
        if (mask & ((1 << c) - 1)).count_ones() as u64 >= t {
            hits += 1;
        }
    }
    ratio(hits, total)
}

type Criterion = (&'static str, &'static str, fn() -> Check);

fn ac1() -> Check {
    let start = Instant::now();
    let n = SWEEP_POPULATION;
    let mut report = Vec::new();
    for (f, bound) in [(0.35, AC1_BOUND_035), (0.15, AC1_BOUND_015)] {
        let c = corrupted_count(n, f);
        for model in [Model::Binomial, Model::Hypergeometric] {
            let got =
                exact_corruption_probability(n, c, 18, 12, model).map_err(|e| e.to_string())?;
            let oracle = match model {
                Model::Binomial => binomial_by_recurrence(n, c, 18, 12),
                Model::Hypergeometric => hypergeometric_by_recurrence(n, c, 18, 12),
            };
            ensure(got.p == oracle, || {
                format!("{model:?} f={f}: second route disagrees")
            })?;
            let p = got.p_f64();
            ensure(p < bound, || {
                format!("{model:?} f={f}: p={p:e} not below {bound:e}")
            })?;
            report.push(format!("{model:?}@{f}={p:.4e}"));
        }
    }
    // Stated figures at D=18, t=12.
    let pinned = exact_corruption_probability(n, corrupted_count(n, 0.35), 18, 12, Model::Binomial)
        .map_err(|e| e.to_string())?;
    ensure(
        pinned.p
            == BigRational::new(
                "202146869062202066933".parse().unwrap(),
                "32768000000000000000000".parse().unwrap(),
            ),
        || format!("binomial value drifted: {}", pinned.p),
    )?;
    let mut enumerated = 0;
    for c in 0..=12 {
        for d in 1..=12 {
            for t in 1..=d {
                let exact = exact_corruption_probability(12, c, d, t, Model::Hypergeometric)
                    .map_err(|e| e.to_string())?;
                ensure(exact.p == enumerate(12, c, d, t), || {
                    format!("N=12 C={c} D={d} t={t} differs from enumeration")
                })?;
                enumerated += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < AC1_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{}; {enumerated} N=12 points enumerated; {elapsed:.2?}",
        report.join(" ")
    ))
}

fn ac2() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut seed = 0;
    for n in [1_000u64, 10_000] {
        for f in [0.15, 0.25, 0.35] {
            for (d, t) in [(18usize, 12usize), (10, 7)] {
                seed += 1;
                let cfg = WorldConfig {
                    devices: n,
                    corruption_fraction: f,
                    delegation: d,
                    threshold: t,
                    seed,
                    ..Default::default()
                };
                let est = monte_carlo_unlock_without_honest(&cfg, AC2_TRIALS);
                let p = exact_corruption_probability(
                    n,
                    cfg.corrupted_count(),
                    d as u64,
                    t as u64,
                    Model::Hypergeometric,
                )
                .map_err(|e| e.to_string())?
                .p_f64();
                let z = (est.p_hat() - p).abs() / est.sigma(p);
                worst = worst.max(z);
                if !est.within_sigmas(p, AC2_SIGMAS) {
                    failures.push(format!(
                        "N={n} f={f} D={d} t={t}: {}/{} vs p={p:.4e} ({z:.2}σ)",
                        est.successes, est.trials
                    ));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(failures.is_empty(), || failures.join("; "))?;
    ensure(elapsed < AC2_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "12 configs within {AC2_SIGMAS}σ, worst {worst:.2}σ; {elapsed:.2?}"
    ))
}

fn ac3() -> Check {
    let start = Instant::now();
    let a = run_scenario("honest-unlock", 42).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(a.passed(), || format!("{:?}", a.failures()))?;
    let b = run_scenario("honest-unlock", 42).map_err(|e| e.to_string())?;
    ensure(a.transcript.to_jsonl() == b.transcript.to_jsonl(), || {
        "transcripts differ under one seed".into()
    })?;
    let steps: BTreeSet<String> = a
        .transcript
        .lines()
        .iter()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v.get("request_id").is_some())
        .filter_map(|v| v.get("event").and_then(|s| s.as_str()).map(str::to_string))
        .collect();
    ensure(elapsed < AC3_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "N=64 k=3 D=6 t=4 token released, deterministic, {} transcript lines{}; {elapsed:.2?}",
        a.transcript.lines().len(),
        if steps.is_empty() {
            String::new()
        } else {
            format!(", case events {steps:?}")
        }
    ))
}

/// How the malicious custodian deviates in one consensus run.
#[derive(Debug, Clone, Copy)]
enum Attack {
    Unsigned,
    SwappedRow,
    Duplicate,
    Censor,
    CensorAndInject,
}

fn ac4() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut aborted = 0;
    let mut published = 0;
    let mut violations = Vec::new();
    for run in 0..AC4_RUNS {
        let k: u32 = rng.gen_range(2..=5);
        let n: u64 = rng.gen_range(4..=40);
        let bad: u32 = rng.gen_range(1..=k);
        let attack = [
            Attack::Unsigned,
            Attack::SwappedRow,
            Attack::Duplicate,
            Attack::Censor,
            Attack::CensorAndInject,
        ][rng.gen_range(0..5)];
        let keys = threshold_keygen(k, &mut rng).map_err(|e| e.to_string())?;
        let manufacturer = Manufacturer::new(&mut rng);
        let mut nodes: Vec<CustodianNode> = keys
            .shares
            .iter()
            .map(|s| {
                CustodianNode::new(
                    s.clone(),
                    keys.public_enc_key.clone(),
                    keys.group_verify_key.clone(),
                    manufacturer.verify_key(),
                )
            })
            .collect();

        let mut honest_active = Vec::new();
        let mut registered = Vec::new();
        for serial in 0..n {
            let kp = SigKeyPair::generate(&mut rng);
            let id = DeviceId::from_serial(serial).unwrap();
            let entry = manufacturer.endorse(
                kp.verify_key(),
                threshold_encrypt(&keys.public_enc_key, id.as_bytes(), &mut rng),
            );
            // Each device reaches a random nonempty subset of custodians.
            let reach: Vec<u32> = (1..=k).filter(|_| rng.gen_bool(0.7)).collect();
            let reach = if reach.is_empty() {
                vec![rng.gen_range(1..=k)]
            } else {
                reach
            };
            if reach.iter().any(|&c| c != bad) {
                honest_active.push(entry.verify_key);
            }
            for &c in &reach {
                nodes[c as usize - 1].receive_registration(entry.clone());
            }
            registered.push(entry);
        }

        let victim = registered.choose(&mut rng).expect("n ≥ 4").clone();
        let mut misbehavior = Misbehavior::default();
        match attack {
            Attack::Unsigned => {
                let rogue = SigKeyPair::generate(&mut rng);
                misbehavior.inject.push(DelegateEntry {
                    verify_key: rogue.verify_key(),
                    enc_device_id: victim.enc_device_id.clone(),
                    manufacturer_sig: SigKeyPair::generate(&mut rng).sign(b"not the manufacturer"),
                });
            }
            Attack::SwappedRow => {
                let mut swapped = victim.clone();
                swapped.enc_device_id =
                    threshold_encrypt(&keys.public_enc_key, b"999999999999999", &mut rng);
                misbehavior.drop_registrations = true;
                misbehavior.inject.push(swapped);
            }
            Attack::Duplicate => {
                misbehavior.drop_registrations = true;
                misbehavior.inject = vec![victim.clone(), victim.clone()];
            }
            Attack::Censor => misbehavior.drop_registrations = true,
            Attack::CensorAndInject => {
                misbehavior.drop_registrations = true;
                // A genuine manufacturer signature lifted onto a sybil key.
                let rogue = SigKeyPair::generate(&mut rng);
                misbehavior.inject.push(DelegateEntry {
                    verify_key: rogue.verify_key(),
                    enc_device_id: victim.enc_device_id.clone(),
                    manufacturer_sig: victim.manufacturer_sig,
                });
            }
        }
        nodes[bad as usize - 1].set_misbehavior(misbehavior);

        match custodian_consensus(&mut nodes, run, 0, &mut rng) {
            ConsensusOutcome::Aborted {
                proposals, reasons, ..
            } => {
                aborted += 1;
                let offender_listed = proposals.iter().any(|p| p.custodian == bad);
                let blames_offender = !reasons.is_empty()
                    && reasons
                        .iter()
                        .all(|r| matches!(r, AbortReason::InvalidList { offender, .. } if *offender == bad));
                if !(offender_listed && blames_offender) {
                    violations.push(format!(
                        "run {run} ({attack:?}): abort without attribution: {reasons:?}"
                    ));
                }
            }
            ConsensusOutcome::Published { db, .. } => {
                published += 1;
                let present: BTreeSet<[u8; 32]> = db
                    .entries()
                    .iter()
                    .map(|e| e.verify_key.to_bytes())
                    .collect();
                if let Some(missing) = honest_active
                    .iter()
                    .find(|vk| !present.contains(&vk.to_bytes()))
                {
                    violations.push(format!(
                        "run {run} ({attack:?}): honest device {missing:?} missing"
                    ));
                }
                if let Some(bad_row) = db
                    .entries()
                    .iter()
                    .position(|e| !e.manufacturer_signed(&manufacturer.verify_key()))
                {
                    violations.push(format!("run {run} ({attack:?}): invalid row at {bad_row}"));
                }
            }
        }
    }
    ensure(violations.is_empty(), || violations.join("; "))?;
    Ok(format!("{AC4_RUNS} runs: {aborted} aborted with offender named, {published} published complete; 0 violations"))
}

fn ac5() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (n, d) = (64u64, 6usize);
    let keys = threshold_keygen(3, &mut rng).map_err(|e| e.to_string())?;
    // Custodian 1 is honest and withholds; the adversary holds shares 2 and 3.
    let adversary_shares = &keys.shares[1..];
    let mut hits = 0u64;
    let mut recoveries = 0u64;
    for _ in 0..AC5_TRIALS {
        let l = sample_delegation(&mut rng, n, d);
        let nonce = Nonce::random(&mut rng);
        let ct = threshold_encrypt(
            &keys.public_enc_key,
            &SealedSelection::Indices(l.clone()).encode(&nonce),
            &mut rng,
        );
        let mut partials: Vec<PartialDecryption> = adversary_shares
            .iter()
            .map(|s| partial_decrypt(s, &ct).expect("well-formed ciphertext"))
            .collect();
        // Stand-in for the withheld share: a random group element.
        let filler = threshold_encrypt(&keys.public_enc_key, b"", &mut rng).to_bytes();
        partials.push(PartialDecryption {
            index: 1,
            point: filler[32..64].try_into().unwrap(),
        });
        if combine(&keys.public_enc_key, &partials, &ct).is_ok() {
            recoveries += 1;
        }
        // Best-effort guess keyed on everything the adversary sees.
        let mut transcript = ct.to_bytes();
        for p in &partials {
            transcript.extend_from_slice(&p.to_bytes());
        }
        let guess =
            prg_distinct(&sha256(&[&transcript]), b"guess", d, n).map_err(|e| e.to_string())?;
        hits += guess.iter().filter(|g| l.binary_search(g).is_ok()).count() as u64;
    }
    let (nf, df, tf) = (n as f64, d as f64, AC5_TRIALS as f64);
    let mean = tf * df * df / nf;
    let var = tf * df * (df / nf) * (1.0 - df / nf) * (nf - df) / (nf - 1.0);
    let z = (hits as f64 - mean) / var.sqrt();
    ensure(z.abs() <= AC5_SIGMAS, || {
        format!("guess hits {hits} vs {mean:.1} ({z:.2}σ)")
    })?;
    ensure(recoveries == 0, || {
        format!("{recoveries} recoveries without the honest share")
    })?;

    // Tampering: flip one bit anywhere and open with every share.
    let mut tamper_recoveries = 0u64;
    for _ in 0..AC5_TRIALS {
        let nonce = Nonce::random(&mut rng);
        let sel = SealedSelection::Indices(sample_delegation(&mut rng, n, d));
        let mut bytes =
            threshold_encrypt(&keys.public_enc_key, &sel.encode(&nonce), &mut rng).to_bytes();
        let bit = rng.gen_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        let Ok(ct) = Ciphertext::from_bytes(&bytes) else {
            continue;
        };
        let partials: Result<Vec<_>, _> = keys
            .shares
            .iter()
            .map(|s| partial_decrypt(s, &ct))
            .collect();
        if let Ok(partials) = partials {
            if combine(&keys.public_enc_key, &partials, &ct).is_ok() {
                tamper_recoveries += 1;
            }
        }
    }
    ensure(tamper_recoveries == 0, || {
        format!("{tamper_recoveries} tampered ciphertexts opened")
    })?;
    Ok(format!(
        "per-index hit rate {:.5} vs chance {:.5} ({z:+.2}σ); 0 recoveries over {AC5_TRIALS} withheld and {AC5_TRIALS} tampered",
        hits as f64 / (tf * df),
        df / nf
    ))
}

fn sign_entry(db: &KeyDb, index: u64, keys: &SigKeyPair, msg: &[u8]) -> SignedEntry {
    let (entry, proof) = db.entry_at(index).expect("index in range");
    SignedEntry {
        index,
        entry: entry.clone(),
        signature: keys.sign(msg),
        proof,
    }
}

fn ac6() -> Check {
    let mut world = World::new(WorldConfig {
        devices: 64,
        delegation: 6,
        threshold: 4,
        seed: 6,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    world.run_epoch_cycle();
    let target = 0;
    let (t, d) = (4usize, 6usize);
    let epoch = world.epochs().latest().expect("published").1.epoch;
    let db = world.epochs().get(epoch).expect("published").0.clone();
    // The adversary holds every device key, then loses all but t-1 of the delegation's.
    let mut all_keys = Vec::new();
    for dev in world.devices() {
        all_keys.push(dev.enclave.compromise().remove(&epoch).expect("registered"));
    }
    let key_at = |j: u64| -> &SigKeyPair {
        let vk = db.entry(j).expect("in range").verify_key;
        all_keys
            .iter()
            .find(|k| k.verify_key() == vk)
            .expect("every row is some device")
    };
    let mut rng = ChaCha20Rng::seed_from_u64(66);
    let mut counts = [0u64; 5];
    let mut accepted = 0u64;
    let mut previous: Option<Nonce> = None;
    let mut attempts = 0u64;
    while attempts < AC6_ATTEMPTS {
        let chal = world.reveal_challenge(target).map_err(|e| e.to_string())?;
        let opened = world
            .open_challenge(&chal, b"", "ac6")
            .map_err(|e| e.to_string())?;
        let l: Vec<u64> = match &opened.selection {
            SealedSelection::Indices(l) => l.clone(),
            SealedSelection::Seed(s) => {
                delegation_indices(s, &db.root(), d, db.len()).map_err(|e| e.to_string())?
            }
        };
        let outside: Vec<u64> = (1..=db.len()).filter(|j| !l.contains(j)).collect();
        let msg = jje::crypto::unlock_message(opened.epoch, &opened.nonce);
        for _ in 0..100 {
            let kind = (attempts % 5) as usize;
            let mut held: Vec<u64> = l.clone();
            held.shuffle(&mut rng);
            held.truncate(t - 1);
            let mut entries: Vec<SignedEntry> = held
                .iter()
                .map(|&j| sign_entry(&db, j, key_at(j), &msg))
                .collect();
            let rest: Vec<u64> = l.iter().copied().filter(|j| !held.contains(j)).collect();
            match kind {
                // Forged signatures for the missing delegates, valid proofs.
                0 => {
                    for &j in &rest {
                        let mut e = sign_entry(&db, j, &SigKeyPair::generate(&mut rng), &msg);
                        if rng.gen_bool(0.5) {
                            let mut raw = [0u8; 64];
                            rng.fill(&mut raw[..]);
                            e.signature = Signature::from_bytes(&raw).unwrap_or(e.signature);
                        }
                        entries.push(e);
                    }
                }
                // Genuine signatures from non-delegates, with their own valid proofs.
                1 => {
                    for _ in 0..(d - t + 1) {
                        let j = *outside.choose(&mut rng).unwrap();
                        if entries.iter().all(|e| e.index != j) {
                            entries.push(sign_entry(&db, j, key_at(j), &msg));
                        }
                    }
                }
                // Non-delegate rows relabelled with delegate indices.
                2 => {
                    for &j in &rest {
                        let o = *outside.choose(&mut rng).unwrap();
                        let mut e = sign_entry(&db, o, key_at(o), &msg);
                        e.index = j;
                        entries.push(e);
                    }
                }
                // Every delegate, signing a stale nonce.
                3 => {
                    let stale = previous.unwrap_or_else(|| Nonce::random(&mut rng));
                    let old = jje::crypto::unlock_message(opened.epoch, &stale);
                    entries = l
                        .iter()
                        .map(|&j| sign_entry(&db, j, key_at(j), &old))
                        .collect();
                }
                // Held signatures repeated to pad the count.
                _ => {
                    while entries.len() < t {
                        let again = entries[rng.gen_range(0..entries.len())].clone();
                        entries.push(again);
                    }
                }
            }
            entries.shuffle(&mut rng);
            let response = UnlockResponse {
                entries,
                jurisdiction: None,
            };
            if world.submit_response(target, &response).is_ok() {
                accepted += 1;
            }
            counts[kind] += 1;
            attempts += 1;
        }
        previous = Some(opened.nonce);
    }
    // Control: the genuine response still works on the last challenge.
    let chal = world.reveal_challenge(target).map_err(|e| e.to_string())?;
    let opened = world
        .open_challenge(&chal, b"", "ac6-control")
        .map_err(|e| e.to_string())?;
    let SealedSelection::Indices(l) = opened.selection else {
        return Err("expected index-mode selection".into());
    };
    let msg = jje::crypto::unlock_message(opened.epoch, &opened.nonce);
    let genuine = UnlockResponse {
        entries: l[..t]
            .iter()
            .map(|&j| sign_entry(&db, j, key_at(j), &msg))
            .collect(),
        jurisdiction: None,
    };
    let control = world.submit_response(target, &genuine).is_ok();
    ensure(accepted == 0, || {
        format!("{accepted} of {attempts} forged responses accepted")
    })?;
    ensure(control, || "genuine response rejected".into())?;
    Ok(format!(
        "{attempts} attempts rejected (forged {}, outsiders {}, relabelled {}, stale nonce {}, duplicates {}); genuine control accepted",
        counts[0], counts[1], counts[2], counts[3], counts[4]
    ))
}

fn bin(corrupted: usize) -> usize {
    match corrupted {
        0..=5 => 0,
        6..=7 => 1,
        _ => 2,
    }
}

fn ac7() -> Check {
    let start = Instant::now();
    let mut world = World::new(WorldConfig {
        devices: AC7_DEVICES,
        corruption_fraction: 0.35,
        delegation: 18,
        threshold: 12,
        seed: 7,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    world.run_epoch_cycle();
    let keyring = world.adversary_keyring();
    let targets: Vec<usize> = (0..world.devices().len())
        .filter(|&i| !world.devices()[i].corrupted)
        .collect();
    let mut outcomes = Vec::with_capacity(targets.len());
    for &i in &targets {
        outcomes.push(
            world
                .adversary_attempt(i, &keyring)
                .map_err(|e| e.to_string())?,
        );
    }
    let unlocked = outcomes.iter().filter(|o| o.unlocked).count();
    let fraction = unlocked as f64 / outcomes.len() as f64;

    // Pairwise independence of neighbouring targets' corrupted-delegate counts.
    let mut table = [[0f64; 3]; 3];
    for pair in outcomes.chunks_exact(2) {
        table[bin(pair[0].corrupted_delegates)][bin(pair[1].corrupted_delegates)] += 1.0;
    }
    let total: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..3).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let expected = rows[i] * cols[j] / total;
            chi2 += (table[i][j] - expected).powi(2) / expected;
        }
    }
    let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(1.0 - AC7_ALPHA);
    let elapsed = start.elapsed();
    ensure(fraction < AC7_BOUND, || {
        format!("{unlocked}/{} unlockable", outcomes.len())
    })?;
    ensure(chi2 < critical, || {
        format!("chi-squared {chi2:.2} ≥ {critical:.2}")
    })?;
    Ok(format!(
        "{unlocked}/{} honest devices unlockable ({fraction:.4}); pairwise chi-squared {chi2:.2} < {critical:.2} (df=4); {elapsed:.2?}",
        outcomes.len()
    ))
}

fn ac8() -> Check {
    let report = run_scenario("mass-surveillance", 8).map_err(|e| e.to_string())?;
    ensure(report.passed(), || format!("{:?}", report.failures()))?;
    let summary = report
        .transcript
        .lines()
        .iter()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .find(|v| v["event"] == "surveillance_report")
        .ok_or("no surveillance report in transcript")?;
    let targets = summary["targets"].as_u64().unwrap_or(0);
    let effort = summary["total_effort"].as_u64().unwrap_or(0);
    let t = 4;
    ensure(targets == AC8_TARGETS, || format!("{targets} targets"))?;
    ensure(effort >= AC8_TARGETS * t, || {
        format!("effort {effort} < {}", AC8_TARGETS * t)
    })?;
    Ok(format!(
        "{targets} devices unlocked with total effort {effort} ≥ {}; report in transcript",
        AC8_TARGETS * t
    ))
}

fn ac9() -> Check {
    let report = run_scenario("lost-delegates", 9).map_err(|e| e.to_string())?;
    ensure(report.passed(), || format!("{:?}", report.failures()))?;
    let names: Vec<&str> = report.assertions.iter().map(|a| a.name.as_str()).collect();
    Ok(names.join("; "))
}

fn ac10() -> Check {
    let mut world = World::new(WorldConfig {
        devices: AC10_DEVICES,
        delegation: 18,
        threshold: 12,
        seed: 10,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = world.run_epoch_cycle();
    let cycle = start.elapsed();
    ensure(report.published && report.entries == AC10_DEVICES, || {
        format!("{report:?}")
    })?;
    ensure(cycle < AC10_BUDGET, || {
        format!("epoch cycle took {cycle:?}")
    })?;

    let (db, header) = world.epochs().latest().expect("published").clone();
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let picks: Vec<u64> = index::sample(&mut rng, db.len() as usize, 10_000)
        .into_iter()
        .map(|i| i as u64 + 1)
        .collect();
    let proofs: Vec<_> = picks
        .iter()
        .map(|&j| (j, db.entry_at(j).expect("in range")))
        .collect();
    let start = Instant::now();
    let mut ok = 0;
    for (j, (entry, proof)) in &proofs {
        ok += usize::from(verify_entry(&header.merkle_root, *j, entry, proof));
    }
    let verify = start.elapsed();
    let rate = proofs.len() as f64 / verify.as_secs_f64();
    ensure(ok == proofs.len(), || {
        format!("{} proofs failed", proofs.len() - ok)
    })?;
    ensure(rate > AC10_MIN_PROOF_RATE, || format!("{rate:.0} proofs/s"))?;
    Ok(format!(
        "N={AC10_DEVICES} epoch cycle {cycle:.2?}; {rate:.0} proofs/s verified"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("AC1", "exact corruption probability", ac1),
        ("AC2", "sampling agrees with formula", ac2),
        ("AC3", "honest end-to-end unlock", ac3),
        ("AC4", "consensus with a malicious custodian", ac4),
        ("AC5", "challenge secrecy under one honest custodian", ac5),
        ("AC6", "unlock unforgeability", ac6),
        ("AC7", "adversary at 35% corruption", ac7),
        ("AC8", "mass unlock effort", ac8),
        ("AC9", "lost delegate tolerance", ac9),
        ("AC10", "desk-scale performance", ac10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{id:<5} PASS  {title} [{secs:.2}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id:<5} FAIL  {title} [{secs:.2}s]: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
