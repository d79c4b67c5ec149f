//! Leaderless randomized counting.
//!
//! [`run_mmct`] is the deterministic protocol trimmed at an estimate cap `K`,
//! extended with a black-existence flag and padded to a common horizon so that
//! many instances can share rounds. [`llmc_step`] runs one iteration of the
//! randomized driver: `f(K)` such instances ("threads") with freshly sampled
//! black nodes, all in lockstep over the same topologies.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmc::{Lifecycle, MmcError, Observer, ProtocolConfig, Step, World};
use crate::netsim::{stream_rng, tags, Adversary, AdversarySpec, NetError, Role};
use crate::params::{
    rounds_for_sequence, search_sequence, worst_case_schedule, Mode, ParamError,
};

#[derive(Debug, Error)]
pub enum LlmcError {
    #[error("zeta must be a positive finite number, got {0}")]
    BadZeta(f64),
    #[error("cap K={0} is too small (need at least 2)")]
    BadCap(u64),
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mmc(#[from] MmcError),
    #[error("simulation budget of {budget} executed rounds exhausted at round {round}")]
    Budget { budget: u64, round: u64 },
}

/// Smallest power of two strictly greater than `12 / zeta`.
pub fn initial_k(zeta: f64) -> Result<u64, LlmcError> {
    if !(zeta.is_finite() && zeta > 0.0) {
        return Err(LlmcError::BadZeta(zeta));
    }
    let x = 12.0 / zeta;
    let mut k: u64 = 1;
    while (k as f64) <= x {
        k = k.checked_mul(2).ok_or(LlmcError::BadZeta(zeta))?;
    }
    Ok(k)
}

/// `f(K) = ceil(64 ln(K/zeta) / ln(e/(e-2)))` threads per iteration.
pub fn thread_count(k_cap: u64, zeta: f64) -> u64 {
    let e = std::f64::consts::E;
    let ratio = 1.0 - (e - 2.0).ln();
    (64.0 * (k_cap as f64 / zeta).ln() / ratio).ceil() as u64
}

/// Probability `1/g(K) = 2/K` that a node turns black in a thread.
pub fn black_probability(k_cap: u64) -> f64 {
    2.0 / k_cap as f64
}

/// Synchronization horizon for the trimmed protocol with cap `K`.
///
/// This is the larger of the full worst-case schedule for size `K` and the
/// longest estimate sequence any node can actually walk before exceeding `K`
/// (every verdict sequence is a prefix of the search for some size in
/// `ell'+1 ..= K+1`).
pub fn mmct_round_max(k_cap: u64, ell_prime: u64, epsilon: f64, mode: Mode) -> Result<u64, LlmcError> {
    if k_cap <= ell_prime {
        return Err(LlmcError::BadCap(k_cap));
    }
    let mut worst = worst_case_schedule(k_cap, ell_prime, epsilon, mode)?.total_bound;
    for m in (ell_prime + 1)..=(k_cap + 1) {
        let seq = search_sequence(m, ell_prime, Some(k_cap));
        worst = worst.max(rounds_for_sequence(&seq, ell_prime, epsilon, mode)?);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmctConfig {
    pub k_cap: u64,
    pub ell_prime: u64,
    pub round_max: u64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl MmctConfig {
    pub fn new(k_cap: u64, ell_prime: u64, epsilon: f64, mode: Mode) -> Result<Self, LlmcError> {
        Ok(MmctConfig {
            k_cap,
            ell_prime,
            round_max: mmct_round_max(k_cap, ell_prime, epsilon, mode)?,
            epsilon,
            mode,
        })
    }

    fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            ell: self.ell_prime,
            epsilon: self.epsilon,
            mode: self.mode,
            cap: Some(self.k_cap),
            trimmed: true,
        }
    }
}

/// What one node returns from one trimmed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmctOutcome {
    pub count: u64,
    pub b: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmctRun {
    pub outcomes: Vec<MmctOutcome>,
    /// Rounds elapsed per node; always `round_max`.
    pub rounds: u64,
    pub executed_rounds: u64,
    /// Nodes that had not finished by the horizon.
    pub truncated: usize,
}

fn lane_outcomes(world: &World, lane: usize) -> (Vec<MmctOutcome>, usize) {
    let mut truncated = 0;
    let outcomes = world.lanes()[lane]
        .nodes
        .iter()
        .map(|s| {
            let count = match s.life {
                Lifecycle::Finished { output, .. } => output.unwrap_or(0),
                Lifecycle::Running => {
                    truncated += 1;
                    0
                }
            };
            MmctOutcome { count, b: s.b }
        })
        .collect();
    (outcomes, truncated)
}

/// Drives `world` to its horizon.
fn run_to_horizon(
    world: &mut World,
    observers: &mut [&mut dyn Observer],
    budget: Option<u64>,
) -> Result<(), LlmcError> {
    world.notify_start(observers);
    loop {
        if let Some(b) = budget {
            if world.executed_rounds() >= b {
                return Err(LlmcError::Budget {
                    budget: b,
                    round: world.round(),
                });
            }
        }
        if world.step(observers)? == Step::Idle {
            return Ok(());
        }
    }
}

/// One trimmed run with fixed roles.
pub fn run_mmct(
    cfg: &MmctConfig,
    roles: &[Role],
    adversary: AdversarySpec,
    fast_forward: bool,
    observers: &mut [&mut dyn Observer],
) -> Result<MmctRun, LlmcError> {
    if roles.len() < 2 {
        return Err(LlmcError::TooFewNodes(roles.len()));
    }
    let adv = Adversary::new(adversary, roles.len())?;
    let mut world = World::new(cfg.protocol(), &[roles.to_vec()], adv, Some(cfg.round_max))?;
    world.set_fast_forward(fast_forward);
    run_to_horizon(&mut world, observers, None)?;
    let (outcomes, truncated) = lane_outcomes(&world, 0);
    Ok(MmctRun {
        outcomes,
        rounds: world.round(),
        executed_rounds: world.executed_rounds(),
        truncated,
    })
}

/// Per-node driver state.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LlmcNode {
    pub count: u64,
    pub count_set: BTreeSet<u64>,
    pub empty_threads: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub k_cap: u64,
    pub threads: u64,
    pub round_max: u64,
    pub executed_rounds: u64,
    /// Black nodes sampled in each thread.
    pub blacks_per_thread: Vec<u32>,
    pub empty_threads: Vec<u64>,
    pub counts_after: Vec<u64>,
    pub truncated_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmcSettings {
    pub epsilon: f64,
    pub mode: Mode,
    pub seed: u64,
    pub fast_forward: bool,
    /// Abort an iteration after this many simulated rounds.
    pub executed_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmcState {
    pub n: usize,
    pub zeta: f64,
    /// Cap of the last completed iteration (the initial value before any).
    pub k_cap: u64,
    pub nodes: Vec<LlmcNode>,
    /// Rounds elapsed over all completed iterations.
    pub clock: u64,
    pub iterations: Vec<IterationReport>,
}

impl LlmcState {
    pub fn new(n: usize, zeta: f64) -> Result<Self, LlmcError> {
        if n < 2 {
            return Err(LlmcError::TooFewNodes(n));
        }
        Ok(LlmcState {
            n,
            zeta,
            k_cap: initial_k(zeta)?,
            nodes: vec![LlmcNode::default(); n],
            clock: 0,
            iterations: Vec::new(),
        })
    }

    pub fn counts(&self) -> Vec<u64> {
        self.nodes.iter().map(|s| s.count).collect()
    }
}

/// Roles of every thread of iteration `K`, from independent per-(K, thread, node) streams.
pub fn sample_roles(seed: u64, k_cap: u64, threads: u64, n: usize) -> Vec<Vec<Role>> {
    let p = black_probability(k_cap);
    (0..threads)
        .map(|t| {
            (0..n)
                .map(|v| {
                    let mut rng = stream_rng(seed, tags::BLACK_SELECTION, &[k_cap, t, v as u64]);
                    if rng.gen_bool(p) {
                        Role::Black
                    } else {
                        Role::White
                    }
                })
                .collect()
        })
        .collect()
}

/// One iteration: double `K`, run `f(K)` threads in lockstep, aggregate per node.
pub fn llmc_step(
    state: &mut LlmcState,
    adversary: Adversary,
    settings: &LlmcSettings,
    observers: &mut [&mut dyn Observer],
) -> Result<Adversary, LlmcError> {
    let k_cap = state.k_cap * 2;
    let threads = thread_count(k_cap, state.zeta);
    let cfg = MmctConfig::new(k_cap, 1, settings.epsilon, settings.mode)?;
    let roles = sample_roles(settings.seed, k_cap, threads, state.n);
    let blacks_per_thread: Vec<u32> = roles
        .iter()
        .map(|r| r.iter().filter(|x| **x == Role::Black).count() as u32)
        .collect();
    info!(
        "iteration K={k_cap}: {threads} threads, round_max={}, {} threads with exactly one black",
        cfg.round_max,
        blacks_per_thread.iter().filter(|&&b| b == 1).count()
    );

    let mut world = World::new(cfg.protocol(), &roles, adversary, Some(cfg.round_max))?;
    world.set_fast_forward(settings.fast_forward);
    world.set_clock_offset(state.clock);
    run_to_horizon(&mut world, observers, settings.executed_budget)?;

    for node in &mut state.nodes {
        node.count_set.clear();
        node.empty_threads = 0;
    }
    let mut truncated_nodes = 0;
    for lane in 0..threads as usize {
        let (outcomes, truncated) = lane_outcomes(&world, lane);
        truncated_nodes += truncated;
        for (node, out) in state.nodes.iter_mut().zip(outcomes) {
            if out.count > 0 {
                node.count_set.insert(out.count);
            }
            if !out.b {
                node.empty_threads += 1;
            }
        }
    }
    for node in &mut state.nodes {
        if let Some(&best) = node.count_set.iter().next_back() {
            if node.empty_threads as f64 > threads as f64 / 2.0 {
                node.count = node.count.max(best);
            }
        }
    }
    let executed_rounds = world.executed_rounds();
    debug!("iteration K={k_cap} simulated {executed_rounds} of {} rounds", cfg.round_max);
    state.k_cap = k_cap;
    state.clock = state.clock.saturating_add(cfg.round_max);
    state.iterations.push(IterationReport {
        k_cap,
        threads,
        round_max: cfg.round_max,
        executed_rounds,
        blacks_per_thread,
        empty_threads: state.nodes.iter().map(|s| s.empty_threads).collect(),
        counts_after: state.counts(),
        truncated_nodes,
    });
    Ok(world.into_adversary())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmcRun {
    /// `trajectories[node][i]` is the node's count after iteration `i`.
    pub trajectories: Vec<Vec<u64>>,
    pub state: LlmcState,
}

/// Runs `iterations` iterations. The protocol itself never terminates.
pub fn run_llmc(
    n: usize,
    zeta: f64,
    adversary: AdversarySpec,
    settings: &LlmcSettings,
    iterations: usize,
) -> Result<LlmcRun, LlmcError> {
    let mut state = LlmcState::new(n, zeta)?;
    let mut adv = Adversary::new(adversary, n)?;
    for _ in 0..iterations {
        adv = llmc_step(&mut state, adv, settings, &mut [])?;
    }
    let trajectories = (0..n)
        .map(|v| state.iterations.iter().map(|it| it.counts_after[v]).collect())
        .collect();
    Ok(LlmcRun {
        trajectories,
        state,
    })
}
