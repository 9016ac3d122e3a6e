//! Exact probability that an adversary holding `C` of `N` devices also holds
//! at least `t` of a device's `D` delegates.
//!
//! Two models:
//!
//! * binomial: each delegate is independently corrupted with probability `C/N`,
//!   `p = Σ_{i=t}^{D} C(D,i) (C/N)^i (1 − C/N)^{D−i}`;
//! * hypergeometric: delegates are `D` distinct indices drawn without
//!   replacement, `p = Σ_{i=t}^{D} C(C,i) C(N−C,D−i) / C(N,D)`.
//!
//! Both are evaluated as exact rationals and only rendered to `f64` at the end.

use std::io::{self, Write};

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;
use thiserror::Error;

/// Population used for the hypergeometric column of the sweep CSV.
pub const SWEEP_POPULATION: u64 = 1_000_000;

/// Delegation curves emitted by default: five representative `(D, t)` pairs.
pub const DEFAULT_PAIRS: [(u64, u64); 5] = [(6, 4), (10, 7), (14, 9), (18, 12), (24, 16)];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("invalid parameters: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Binomial,
    Hypergeometric,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPoint {
    pub n: u64,
    pub c: u64,
    pub d: u64,
    pub t: u64,
    pub model: Model,
    pub p: BigRational,
}

impl ParamPoint {
    pub fn p_f64(&self) -> f64 {
        rational_to_f64(&self.p)
    }
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Corrupted count for a fraction of `n`. The epsilon absorbs binary
/// representation error so that e.g. `0.35 · 1000` gives 350.
pub fn corrupted_count(n: u64, fraction: f64) -> u64 {
    ((fraction * n as f64) + 1e-9).floor() as u64
}

pub fn binomial_coefficient(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

fn check(n: u64, c: u64, d: u64, t: u64) -> Result<(), AnalysisError> {
    if c > n || t == 0 || t > d || d > n {
        return Err(AnalysisError::InvalidParameter(format!(
            "need 0 ≤ C ≤ N and 1 ≤ t ≤ D ≤ N, got N={n}, C={c}, D={d}, t={t}"
        )));
    }
    Ok(())
}

fn ratio(num: BigUint, den: BigUint) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn exact_corruption_probability(
    n: u64,
    c: u64,
    d: u64,
    t: u64,
    model: Model,
) -> Result<ParamPoint, AnalysisError> {
    check(n, c, d, t)?;
    let p = match model {
        Model::Binomial => {
            let (cn, hn) = (BigUint::from(c), BigUint::from(n - c));
            let num: BigUint = (t..=d)
                .map(|i| binomial_coefficient(d, i) * cn.pow(i as u32) * hn.pow((d - i) as u32))
                .sum();
            ratio(num, BigUint::from(n).pow(d as u32))
        }
        Model::Hypergeometric => {
            let num: BigUint = (t..=d)
                .map(|i| binomial_coefficient(c, i) * binomial_coefficient(n - c, d - i))
                .sum();
            ratio(num, binomial_coefficient(n, d))
        }
    };
    Ok(ParamPoint {
        n,
        c,
        d,
        t,
        model,
        p,
    })
}

/// `(C/N)^D`: every delegate corrupted, the `t = D` case of the binomial model.
pub fn lemma4_bound(n: u64, c: u64, d: u64) -> Result<BigRational, AnalysisError> {
    check(n, c, d.max(1), d.max(1))?;
    Ok(ratio(
        BigUint::from(c).pow(d as u32),
        BigUint::from(n).pow(d as u32),
    ))
}

/// Smallest `D ≤ d_max` for which some `t` reaches `p ≤ target`, paired with
/// the smallest such `t`.
pub fn search_parameters(
    n: u64,
    c: u64,
    target: f64,
    d_max: u64,
    model: Model,
) -> Result<Option<(u64, u64)>, AnalysisError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "target probability must be in (0, 1], got {target}"
        )));
    }
    if c > n {
        return Err(AnalysisError::InvalidParameter(format!(
            "C={c} exceeds N={n}"
        )));
    }
    let target = BigRational::from_float(target).expect("finite target");
    for d in 1..=d_max.min(n) {
        // p is nonincreasing in t, so t = D decides feasibility for this D.
        if exact_corruption_probability(n, c, d, d, model)?.p > target {
            continue;
        }
        for t in 1..=d {
            if exact_corruption_probability(n, c, d, t, model)?.p <= target {
                return Ok(Some((d, t)));
            }
        }
    }
    Ok(None)
}

/// `0, 0.05, …, 1`.
pub fn default_fraction_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d: u64,
    pub t: u64,
    pub fraction: f64,
    pub p_binomial: f64,
    pub p_hypergeometric: f64,
}

/// Both models over every `(D, t)` pair and fraction, at `N = 10⁶`.
pub fn figure2_rows(
    pairs: &[(u64, u64)],
    fractions: &[f64],
) -> Result<Vec<SweepRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(pairs.len() * fractions.len());
    for &(d, t) in pairs {
        for &fraction in fractions {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(AnalysisError::InvalidParameter(format!(
                    "fraction {fraction} outside [0, 1]"
                )));
            }
            let c = corrupted_count(SWEEP_POPULATION, fraction);
            let b = exact_corruption_probability(SWEEP_POPULATION, c, d, t, Model::Binomial)?;
            let h = exact_corruption_probability(SWEEP_POPULATION, c, d, t, Model::Hypergeometric)?;
            rows.push(SweepRow {
                d,
                t,
                fraction,
                p_binomial: b.p_f64(),
                p_hypergeometric: h.p_f64(),
            });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "D,t,fraction,p_binomial,p_hypergeometric";

/// Writes the sweep as CSV with header [`CSV_HEADER`].
pub fn emit_figure2_data<W: Write>(
    pairs: &[(u64, u64)],
    fractions: &[f64],
    mut out: W,
) -> io::Result<()> {
    let rows = figure2_rows(pairs, fractions)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:e},{:e}",
            r.d, r.t, r.fraction, r.p_binomial, r.p_hypergeometric
        )?;
    }
    Ok(())
}
