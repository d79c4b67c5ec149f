//! Per-epoch protocol constants, the size-estimate search and round schedules.
//!
//! Everything here is a pure function of `(k, ell, epsilon, mode)`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Additive margin placed on top of the strict lower bound for the exponent `delta`.
pub const DELTA_MARGIN: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("estimate k={k} must exceed the black-node count ell={ell}")]
    EstimateTooSmall { k: u64, ell: u64 },
    #[error("ell must be at least 1")]
    NoBlackNodes,
    #[error("epsilon must be a positive finite number, got {0}")]
    BadEpsilon(f64),
    #[error("scale factors must lie in (0, 1], got s_p={s_p}, s_r={s_r}")]
    BadScale { s_p: f64, s_r: f64 },
    #[error("network size n={n} must exceed ell={ell}")]
    TooFewNodes { n: u64, ell: u64 },
    #[error("estimate search became empty (min={min} > max={max})")]
    InconsistentEstimate { min: u64, max: u64 },
}

/// How `p` and `r` are derived.
///
/// `Scaled` shrinks phases and rounds by the given multipliers. It carries no
/// correctness guarantee and exists only to make large configurations tractable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Paper,
    Scaled { s_p: f64, s_r: f64 },
}

impl Mode {
    pub fn validate(&self) -> Result<(), ParamError> {
        match *self {
            Mode::Paper => Ok(()),
            Mode::Scaled { s_p, s_r } => {
                let ok = |s: f64| s.is_finite() && s > 0.0 && s <= 1.0;
                if ok(s_p) && ok(s_r) {
                    Ok(())
                } else {
                    Err(ParamError::BadScale { s_p, s_r })
                }
            }
        }
    }

    pub fn guarantees_correctness(&self) -> bool {
        matches!(self, Mode::Paper)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Paper => write!(f, "paper"),
            Mode::Scaled { s_p, s_r } => write!(f, "scaled(s_p={s_p}, s_r={s_r})"),
        }
    }
}

/// All constants of one epoch, i.e. one trial of the size estimate `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochParams {
    pub k: u64,
    pub ell: u64,
    pub epsilon: f64,
    /// Neighbor cap; a node seeing `d` or more neighbors raises an alarm.
    pub d: u64,
    /// Phases per epoch.
    pub p: u64,
    /// Rounds per phase.
    pub r: u64,
    /// Potential threshold checked at the end of phase 1.
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Outcome of checking the four exponent conditions after derivation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    pub gamma_above_log_d_minus_1: bool,
    pub alpha_at_least_bound: bool,
    pub beta_at_least_bound: bool,
    pub delta_above_bound: bool,
}

impl ConditionReport {
    pub fn all_hold(&self) -> bool {
        self.gamma_above_log_d_minus_1
            && self.alpha_at_least_bound
            && self.beta_at_least_bound
            && self.delta_above_bound
    }
}

fn log_base(k: f64, x: f64) -> f64 {
    x.ln() / k.ln()
}

/// `ceil(k^(1+epsilon))`, snapping values within 1e-9 (relative) of an integer
/// so that exact powers such as `2^2` are not pushed up by rounding noise.
fn neighbor_cap(k: u64, epsilon: f64) -> u64 {
    let x = (k as f64).powf(1.0 + epsilon);
    let nearest = x.round();
    let d = if (x - nearest).abs() <= 1e-9 * x {
        nearest
    } else {
        x.ceil()
    };
    (d as u64).max(k + 1)
}

fn scale_count(value: u64, factor: f64) -> u64 {
    // the small offset absorbs products like 100 * 0.29 = 28.999999999999996
    let scaled = (value as f64 * factor + 1e-9).floor();
    (scaled as u64).max(1)
}

pub fn derive_epoch_params(
    k: u64,
    ell: u64,
    epsilon: f64,
    mode: Mode,
) -> Result<EpochParams, ParamError> {
    if ell == 0 {
        return Err(ParamError::NoBlackNodes);
    }
    if k <= ell {
        return Err(ParamError::EstimateTooSmall { k, ell });
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(ParamError::BadEpsilon(epsilon));
    }
    mode.validate()?;

    let kf = k as f64;
    let lnk = kf.ln();
    let d = neighbor_cap(k, epsilon);
    let df = d as f64;

    let gamma = log_base(kf, df);
    let alpha = 1.0 + gamma + log_base(kf, 3.0);
    // With gamma = log_k d the delta condition reduces to delta > 2 log_k d.
    let delta = 2.0 * gamma + DELTA_MARGIN;
    let beta = log_base(kf, df * (2.0 * kf.powf(delta) + 1.0));

    let phase_term = f64::max(
        gamma / (1.0 / kf + kf.powf(-alpha)),
        delta / (1.0 / df + kf.powf(-beta)),
    );
    let p = (2.0 * lnk / ell as f64 * phase_term).ceil() as u64;

    let round_term = alpha
        .max(beta * kf.powf(2.0 * epsilon))
        .max(2.0 + epsilon - (kf.powf(epsilon) - 1.0).ln() / lnk);
    let r = (2.0 * df * kf * kf * lnk * round_term).ceil() as u64;

    let tau = ell as f64 * (1.0 - ell as f64 / kf.powf(1.0 + epsilon));

    let (p, r) = match mode {
        Mode::Paper => (p.max(1), r.max(1)),
        Mode::Scaled { s_p, s_r } => (scale_count(p, s_p), scale_count(r, s_r)),
    };

    Ok(EpochParams {
        k,
        ell,
        epsilon,
        d,
        p,
        r,
        tau,
        alpha,
        beta,
        gamma,
        delta,
    })
}

impl EpochParams {
    /// Rounds in one epoch: `p` phases of `r` rounds, then `d` dissemination rounds.
    pub fn epoch_rounds(&self) -> u64 {
        self.p.saturating_mul(self.r).saturating_add(self.d)
    }

    pub fn averaging_rounds(&self) -> u64 {
        self.p.saturating_mul(self.r)
    }

    /// Band `[(k-ell)(1-k^-gamma), (k-ell)(1+k^-gamma)]` for the accumulator.
    pub fn rho_band(&self) -> (f64, f64) {
        let base = (self.k - self.ell) as f64;
        let slack = (self.k as f64).powf(-self.gamma);
        (base * (1.0 - slack), base * (1.0 + slack))
    }

    pub fn conditions(&self) -> ConditionReport {
        let kf = self.k as f64;
        let df = self.d as f64;
        let k_gamma = kf.powf(self.gamma);
        ConditionReport {
            gamma_above_log_d_minus_1: self.gamma > log_base(kf, df - 1.0),
            alpha_at_least_bound: self.alpha >= 1.0 + self.gamma + log_base(kf, 3.0),
            beta_at_least_bound: self.beta >= log_base(kf, df * (2.0 * kf.powf(self.delta) + 1.0)),
            delta_above_bound: self.delta > log_base(kf, df * k_gamma / (k_gamma + 1.0 - df)),
        }
    }
}

/// Upper end of the estimate search range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bound {
    Finite(u64),
    Infinite,
}

impl Serialize for Bound {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bound::Finite(v) => s.serialize_u64(*v),
            Bound::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(Bound::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Bound::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected integer or \"inf\", got {t:?}"
            ))),
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(v) => write!(f, "{v}"),
            Bound::Infinite => write!(f, "inf"),
        }
    }
}

/// Direction reported at the end of a failed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EstimateState {
    pub k: u64,
    pub min: u64,
    pub max: Bound,
}

impl EstimateState {
    pub fn initial(ell: u64) -> Self {
        let k = ell + 1;
        EstimateState {
            k,
            min: k,
            max: Bound::Infinite,
        }
    }
}

/// Doubling while no upper bound is known, binary search afterwards.
pub fn update_estimate(verdict: Verdict, s: EstimateState) -> Result<EstimateState, ParamError> {
    let next = match verdict {
        Verdict::Low => {
            let min = s.k + 1;
            let k = match s.max {
                Bound::Infinite => s.k * 2,
                Bound::Finite(max) => (min + max) / 2,
            };
            EstimateState { k, min, max: s.max }
        }
        Verdict::High => {
            let max = s.k.saturating_sub(1);
            EstimateState {
                k: (s.min + max) / 2,
                min: s.min,
                max: Bound::Finite(max),
            }
        }
    };
    if let Bound::Finite(max) = next.max {
        if next.min > max {
            return Err(ParamError::InconsistentEstimate { min: next.min, max });
        }
    }
    Ok(next)
}

/// Estimates visited by a correct run on `n` nodes, stopping early once the
/// estimate would exceed `cap`.
pub fn search_sequence(n: u64, ell: u64, cap: Option<u64>) -> Vec<u64> {
    let mut s = EstimateState::initial(ell);
    let mut seen = Vec::new();
    loop {
        if cap.is_some_and(|c| s.k > c) {
            return seen;
        }
        seen.push(s.k);
        if s.k == n {
            return seen;
        }
        let verdict = if s.k < n { Verdict::Low } else { Verdict::High };
        match update_estimate(verdict, s) {
            Ok(next) => s = next,
            Err(_) => return seen,
        }
    }
}

/// Worst-case estimate schedule: doubling set `E` and binary-search set `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(rename = "E")]
    pub doubling: Vec<u64>,
    #[serde(rename = "B")]
    pub search: Vec<u64>,
    pub per_epoch_rounds: BTreeMap<u64, u64>,
    pub total_bound: u64,
}

/// Smallest `L` with `2^L >= ceil(n / (ell+1))`.
fn doubling_exponent(n: u64, ell: u64) -> u32 {
    n.div_ceil(ell + 1).next_power_of_two().trailing_zeros()
}

pub fn worst_case_schedule(
    n: u64,
    ell: u64,
    epsilon: f64,
    mode: Mode,
) -> Result<Schedule, ParamError> {
    if ell == 0 {
        return Err(ParamError::NoBlackNodes);
    }
    if n <= ell {
        return Err(ParamError::TooFewNodes { n, ell });
    }
    let top = doubling_exponent(n, ell);
    let base = ell + 1;
    let doubling: Vec<u64> = (0..=top).map(|i| (1u64 << i) * base).collect();
    let search: Vec<u64> = (0..top.saturating_sub(1))
        .map(|i| ((1u64 << top) - (1u64 << i)) * base)
        .collect();

    let mut per_epoch_rounds = BTreeMap::new();
    for &k in doubling.iter().chain(search.iter()) {
        let params = derive_epoch_params(k, ell, epsilon, mode)?;
        per_epoch_rounds.insert(k, params.epoch_rounds());
    }
    let total_bound = per_epoch_rounds
        .values()
        .fold(0u64, |acc, &v| acc.saturating_add(v));
    Ok(Schedule {
        doubling,
        search,
        per_epoch_rounds,
        total_bound,
    })
}

/// Total rounds of the epochs in `estimates`.
pub fn rounds_for_sequence(
    estimates: &[u64],
    ell: u64,
    epsilon: f64,
    mode: Mode,
) -> Result<u64, ParamError> {
    estimates.iter().try_fold(0u64, |acc, &k| {
        Ok(acc.saturating_add(derive_epoch_params(k, ell, epsilon, mode)?.epoch_rounds()))
    })
}

/// Largest number of rounds any correct run can take among all network sizes
/// that share the doubling prefix of `n`. Unlike [`worst_case_schedule`] this
/// follows the actual binary search, so it bounds every estimate it visits.
pub fn exhaustive_round_bound(
    n: u64,
    ell: u64,
    epsilon: f64,
    mode: Mode,
) -> Result<u64, ParamError> {
    if ell == 0 {
        return Err(ParamError::NoBlackNodes);
    }
    if n <= ell {
        return Err(ParamError::TooFewNodes { n, ell });
    }
    let top = doubling_exponent(n, ell);
    let base = ell + 1;
    let hi = (1u64 << top) * base;
    let lo = if top == 0 { ell } else { (1u64 << (top - 1)) * base };
    let mut worst = 0;
    for m in (lo + 1)..=hi {
        let seq = search_sequence(m, ell, None);
        worst = worst.max(rounds_for_sequence(&seq, ell, epsilon, mode)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instance_matches_hand_values() {
        let p = derive_epoch_params(2, 1, 1.0, Mode::Paper).unwrap();
        assert_eq!(p.d, 4);
        assert!((p.gamma - 2.0).abs() < 1e-12);
        assert!((p.tau - 0.75).abs() < 1e-15);
        assert!((p.delta - 4.05).abs() < 1e-12);
    }

    #[test]
    fn scaled_mode_only_touches_p_and_r() {
        let paper = derive_epoch_params(2, 1, 1.0, Mode::Paper).unwrap();
        let scaled = derive_epoch_params(2, 1, 1.0, Mode::Scaled { s_p: 0.01, s_r: 0.01 }).unwrap();
        assert_eq!(scaled.p, 1);
        assert_eq!(scaled.r, 6);
        assert_eq!(
            EpochParams {
                p: paper.p,
                r: paper.r,
                ..scaled
            },
            paper
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            derive_epoch_params(3, 3, 0.5, Mode::Paper),
            Err(ParamError::EstimateTooSmall { k: 3, ell: 3 })
        );
        assert!(matches!(
            derive_epoch_params(4, 1, 0.0, Mode::Paper),
            Err(ParamError::BadEpsilon(_))
        ));
        assert!(matches!(
            derive_epoch_params(4, 1, -1.0, Mode::Paper),
            Err(ParamError::BadEpsilon(_))
        ));
        assert!(matches!(
            derive_epoch_params(4, 1, 0.5, Mode::Scaled { s_p: 0.0, s_r: 0.5 }),
            Err(ParamError::BadScale { .. })
        ));
    }

    #[test]
    fn estimate_updates() {
        let s = EstimateState { k: 4, min: 3, max: Bound::Infinite };
        let s = update_estimate(Verdict::Low, s).unwrap();
        assert_eq!(s, EstimateState { k: 8, min: 5, max: Bound::Infinite });
        let s = update_estimate(Verdict::High, s).unwrap();
        assert_eq!(s, EstimateState { k: 6, min: 5, max: Bound::Finite(7) });
        let s = update_estimate(Verdict::Low, s).unwrap();
        assert_eq!(s, EstimateState { k: 7, min: 7, max: Bound::Finite(7) });
    }

    #[test]
    fn estimate_search_can_run_dry() {
        let s = EstimateState { k: 2, min: 2, max: Bound::Infinite };
        assert_eq!(
            update_estimate(Verdict::High, s),
            Err(ParamError::InconsistentEstimate { min: 2, max: 1 })
        );
    }

    #[test]
    fn infinite_bound_serializes_as_inf() {
        let s = EstimateState::initial(1);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"k":2,"min":2,"max":"inf"}"#);
        let back: EstimateState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let finite: EstimateState = serde_json::from_str(r#"{"k":6,"min":5,"max":7}"#).unwrap();
        assert_eq!(finite.max, Bound::Finite(7));
        assert!(serde_json::from_str::<Bound>(r#""nan""#).is_err());
    }

    #[test]
    fn schedule_sets() {
        let s = worst_case_schedule(8, 1, 0.5, Mode::Paper).unwrap();
        assert_eq!(s.doubling, vec![2, 4, 8]);
        assert_eq!(s.search, vec![6]);
        let s = worst_case_schedule(2, 1, 0.5, Mode::Paper).unwrap();
        assert_eq!(s.doubling, vec![2]);
        assert!(s.search.is_empty());
        assert!(worst_case_schedule(3, 3, 0.5, Mode::Paper).is_err());
    }

    #[test]
    fn search_sequences() {
        assert_eq!(search_sequence(5, 1, None), vec![2, 4, 8, 6, 5]);
        assert_eq!(search_sequence(8, 2, None), vec![3, 6, 12, 9, 7, 8]);
        assert_eq!(search_sequence(5, 1, Some(4)), vec![2, 4]);
        assert_eq!(search_sequence(2, 1, None), vec![2]);
    }

    #[test]
    fn exhaustive_bound_covers_every_size_sharing_the_prefix() {
        for ell in 1..4u64 {
            for n in (ell + 1)..=12 {
                let bound = exhaustive_round_bound(n, ell, 0.5, Mode::Paper).unwrap();
                let seq = search_sequence(n, ell, None);
                let actual = rounds_for_sequence(&seq, ell, 0.5, Mode::Paper).unwrap();
                assert!(actual <= bound, "n={n} ell={ell}");
            }
        }
    }
}
