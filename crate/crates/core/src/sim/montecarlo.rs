//! Sampling estimate of the chance that a device's delegation holds at least
//! `t` corrupted members.
//!
//! Each trial draws a delegation with the same sampler the enclave uses and
//! counts how many of its members fall in a fixed corrupted set of
//! `⌊fraction · N⌋` devices. The adversary holding those keys and a decrypted
//! challenge succeeds exactly when that count reaches `t`; the end-to-end
//! version with real signatures is [`World::adversary_attempt`](super::World::adversary_attempt).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::WorldConfig;
use crate::device::sample_delegation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Estimate {
    pub successes: u64,
    pub trials: u64,
}

impl Estimate {
    pub fn p_hat(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    /// Standard error of the mean under the reference probability `p`.
    pub fn sigma(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    pub fn within_sigmas(&self, p: f64, k: f64) -> bool {
        (self.p_hat() - p).abs() <= k * self.sigma(p)
    }
}

pub fn monte_carlo_unlock_without_honest(config: &WorldConfig, trials: u64) -> Estimate {
    assert!(trials >= 1, "at least one trial");
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let n = config.devices as usize;
    let mut corrupted = vec![false; n + 1];
    for i in index::sample(&mut rng, n, config.corrupted_count() as usize) {
        corrupted[i + 1] = true;
    }
    let mut successes = 0;
    for _ in 0..trials {
        let hits = sample_delegation(&mut rng, config.devices, config.delegation)
            .into_iter()
            .filter(|&j| corrupted[j as usize])
            .count();
        if hits >= config.threshold {
            successes += 1;
        }
    }
    Estimate { successes, trials }
}
