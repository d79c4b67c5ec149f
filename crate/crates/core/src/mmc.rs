//! Deterministic counting with black nodes: the per-node state machine and the
//! round engine shared with the trimmed variant used by the randomized protocol.
//!
//! The engine runs any number of independent *lanes* (protocol instances) over a
//! single shared topology per round. A lane whose next rounds are provably no-ops
//! under every admissible topology is fast-forwarded to the next round where
//! something can change; see [`World::step`].

use std::cmp::Ordering;
use std::collections::HashMap;

use log::{debug, trace};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{
    stream_rng, tags, Adjacency, Adversary, AdversarySpec, NetError, Payload, Role, Topology,
    WorldView,
};
use crate::params::{
    derive_epoch_params, update_estimate, EpochParams, EstimateState, Mode, ParamError, Verdict,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Probing,
    Low,
    High,
    Done,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Probing => 0,
            Status::Low => 1,
            Status::High => 2,
            Status::Done => 3,
        }
    }

    fn verdict(self) -> Option<Verdict> {
        match self {
            Status::Low => Some(Verdict::Low),
            Status::High => Some(Verdict::High),
            _ => None,
        }
    }
}

/// What a node broadcasts in an averaging round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmcMessage {
    pub phi: f64,
    pub status: Status,
}

/// Full wire payload. The black flag is only meaningful in the trimmed variant;
/// plain runs always send `false`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wire {
    pub phi: f64,
    pub status: Status,
    pub b: bool,
}

impl Wire {
    pub fn message(&self) -> MmcMessage {
        MmcMessage {
            phi: self.phi,
            status: self.status,
        }
    }
}

impl Payload for Wire {
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.phi
            .total_cmp(&other.phi)
            .then(self.status.cmp(&other.status))
            .then(self.b.cmp(&other.b))
    }
}

impl Payload for MmcMessage {
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.phi
            .total_cmp(&other.phi)
            .then(self.status.cmp(&other.status))
    }
}

/// `phi + sum(phi_i - phi) / d`, summing over the inbox in ascending order.
///
/// Written in difference form so that equal potentials are an exact fixpoint.
pub fn potential_update(phi: f64, inbox_phis: &[f64], d: u64) -> f64 {
    let mut sorted = inbox_phis.to_vec();
    sorted.sort_by(f64::total_cmp);
    apply_update(phi, sorted.iter().map(|x| x - phi).sum(), d)
}

#[inline]
fn apply_update(phi: f64, diff_sum: f64, d: u64) -> f64 {
    phi + diff_sum / d as f64
}

/// Classifies a black node's accumulator at epoch end. Band edges count as done.
pub fn classify_rho(rho: f64, k: u64, ell: u64, gamma: f64) -> Status {
    let base = (k - ell) as f64;
    let slack = (k as f64).powf(-gamma);
    if rho < base * (1.0 - slack) {
        Status::High
    } else if rho > base * (1.0 + slack) {
        Status::Low
    } else {
        Status::Done
    }
}

/// Position of a node inside its current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pc {
    /// Number of epochs started so far, starting at 1.
    pub epoch: u32,
    /// Offset of the next round inside the epoch: `0..p*r` averaging, then `d` dissemination rounds.
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "where")]
pub enum Position {
    /// 1-based phase and round.
    Averaging { phase: u64, round: u64 },
    /// 1-based dissemination round.
    Dissemination { round: u64 },
}

pub fn position(params: &EpochParams, offset: u64) -> Position {
    let avg = params.averaging_rounds();
    if offset < avg {
        Position::Averaging {
            phase: offset / params.r + 1,
            round: offset % params.r + 1,
        }
    } else {
        Position::Dissemination {
            round: offset - avg + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum Lifecycle {
    Running,
    /// Stopped (plain protocol) or idling until the synchronization horizon
    /// (trimmed protocol). `output` is the count if the node ended in done.
    Finished { output: Option<u64>, round: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub role: Role,
    pub phi: f64,
    pub rho: f64,
    pub status: Status,
    pub est: EstimateState,
    pub pc: Pc,
    pub params: EpochParams,
    /// Black-existence flag; only maintained by the trimmed protocol.
    pub b: bool,
    pub life: Lifecycle,
}

impl NodeState {
    pub fn is_black(&self) -> bool {
        self.role == Role::Black
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.life, Lifecycle::Finished { .. })
    }

    pub fn wire(&self) -> Wire {
        Wire {
            phi: self.phi,
            status: self.status,
            b: self.b,
        }
    }

    pub fn position(&self) -> Position {
        position(&self.params, self.pc.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum EventKind {
    AlarmThreshold { phi: f64 },
    AlarmDegree { degree: usize },
    AlarmReceived,
    Consume { amount: f64 },
    Classify { k: u64, rho: f64, result: Status },
    /// A white adopted a status during dissemination.
    Adopt { status: Status },
    /// A white reached epoch end without hearing any status.
    Unheard,
    EpochEnd { k: u64, status: Status },
    Stop { output: Option<u64> },
    StatusConflict { own: Status, heard: Status },
    EmptySearch { min: u64, max: u64 },
    /// Node had not finished when the synchronization horizon was reached.
    Truncated,
    /// The lane skipped rounds `from..to` (exclusive) as provably quiescent.
    FastForward { from: u64, to: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// `None` for lane-level events.
    pub node: Option<u32>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum MmcError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round budget of {budget} exhausted")]
    BudgetExhausted { budget: u64, partial: Box<RunResult> },
    #[error("node {node} heard status {heard:?} while holding {own:?} in round {round}")]
    StatusConflict { round: u64, node: u32, own: Status, heard: Status },
    #[error("estimate search ran dry at node {node} in round {round}: {source}")]
    EmptySearch { round: u64, node: u32, source: ParamError },
    #[error("nodes lost synchronization in round {round}: {detail}")]
    Desync { round: u64, detail: String },
}

/// Protocol configuration shared by every node of a world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Black count the parameters are configured for (`ell`, or `ell'` when trimmed).
    pub ell: u64,
    pub epsilon: f64,
    pub mode: Mode,
    /// Trim: stop iterating once the estimate exceeds this cap.
    pub cap: Option<u64>,
    /// Trimmed variant: maintain the black flag, idle until `round_max` and
    /// treat inconsistencies as events instead of errors.
    pub trimmed: bool,
}

/// Memoized [`derive_epoch_params`] for one configuration.
#[derive(Debug, Clone, Default)]
pub struct ParamCache {
    map: HashMap<u64, EpochParams>,
}

impl ParamCache {
    pub fn get(&mut self, k: u64, cfg: &ProtocolConfig) -> Result<EpochParams, ParamError> {
        if let Some(p) = self.map.get(&k) {
            return Ok(*p);
        }
        let p = derive_epoch_params(k, cfg.ell, cfg.epsilon, cfg.mode)?;
        self.map.insert(k, p);
        Ok(p)
    }
}

pub fn initial_node(role: Role, cfg: &ProtocolConfig, cache: &mut ParamCache) -> Result<NodeState, ParamError> {
    let est = EstimateState::initial(cfg.ell);
    let params = cache.get(est.k, cfg)?;
    let mut st = NodeState {
        role,
        phi: 0.0,
        rho: 0.0,
        status: Status::Probing,
        est,
        pc: Pc { epoch: 0, offset: 0 },
        params,
        b: cfg.trimmed && role == Role::Black,
        life: Lifecycle::Running,
    };
    start_epoch(&mut st, cfg, params);
    Ok(st)
}

fn start_epoch(st: &mut NodeState, cfg: &ProtocolConfig, params: EpochParams) {
    st.params = params;
    st.status = Status::Probing;
    st.phi = if st.is_black() { 0.0 } else { cfg.ell as f64 };
    st.rho = 0.0;
    st.pc = Pc {
        epoch: st.pc.epoch + 1,
        offset: 0,
    };
}

/// Per-round context handed to [`mmc_round`].
pub struct RoundCtx<'a> {
    pub cfg: &'a ProtocolConfig,
    pub cache: &'a mut ParamCache,
    /// Global round number being executed (1-based).
    pub round: u64,
    pub node: u32,
    pub events: &'a mut Vec<Event>,
}

impl RoundCtx<'_> {
    fn emit(&mut self, kind: EventKind) {
        self.events.push(Event {
            node: Some(self.node),
            kind,
        });
    }
}

fn raise_alarm(st: &mut NodeState, ell: u64) {
    st.status = Status::Low;
    st.phi = ell as f64;
}

/// One round of one node. `inbox` must be sorted canonically (see [`Payload`]).
/// Returns the message the node broadcast in this round, i.e. its state at
/// round start.
pub fn mmc_round(st: &mut NodeState, inbox: &[Wire], ctx: &mut RoundCtx<'_>) -> Result<Wire, MmcError> {
    let sent = st.wire();
    let cfg = *ctx.cfg;
    if cfg.trimmed && !st.b && inbox.iter().any(|w| w.b) {
        st.b = true;
    }
    if st.is_finished() {
        return Ok(sent);
    }
    let params = st.params;
    let avg = params.averaging_rounds();
    let offset = st.pc.offset;

    if offset < avg {
        let d = params.d;
        let quiet = inbox.iter().all(|w| w.status == Status::Probing);
        if st.status == Status::Probing && (inbox.len() as u64) < d && quiet {
            let diff: f64 = inbox.iter().map(|w| w.phi - st.phi).sum();
            st.phi = apply_update(st.phi, diff, d);
        } else {
            if st.status == Status::Probing {
                if inbox.len() as u64 >= d {
                    ctx.emit(EventKind::AlarmDegree { degree: inbox.len() });
                } else {
                    ctx.emit(EventKind::AlarmReceived);
                }
            }
            raise_alarm(st, cfg.ell);
        }
        if offset % params.r == params.r - 1 {
            if offset / params.r == 0 && st.phi > params.tau {
                if st.status == Status::Probing {
                    ctx.emit(EventKind::AlarmThreshold { phi: st.phi });
                }
                raise_alarm(st, cfg.ell);
            }
            if st.is_black() && st.status == Status::Probing {
                ctx.emit(EventKind::Consume { amount: st.phi });
                st.rho += st.phi;
                st.phi = 0.0;
                if offset == avg - 1 {
                    let result = classify_rho(st.rho, params.k, params.ell, params.gamma);
                    ctx.emit(EventKind::Classify {
                        k: params.k,
                        rho: st.rho,
                        result,
                    });
                    st.status = result;
                }
            }
        }
        st.pc.offset += 1;
        return Ok(sent);
    }

    // dissemination
    if !st.is_black() {
        let heard = if st.status == Status::Probing {
            let first = inbox.iter().find(|w| w.status != Status::Probing).map(|w| w.status);
            if let Some(status) = first {
                st.status = status;
                ctx.emit(EventKind::Adopt { status });
            }
            first.is_some()
        } else {
            // the trimmed variant only checks consistency when adopting, so that a
            // node holding a verdict never depends on what it hears
            !cfg.trimmed
        };
        if heard {
            if let Some(w) = inbox
                .iter()
                .find(|w| w.status != Status::Probing && w.status != st.status)
            {
                ctx.emit(EventKind::StatusConflict {
                    own: st.status,
                    heard: w.status,
                });
                if !cfg.trimmed {
                    return Err(MmcError::StatusConflict {
                        round: ctx.round,
                        node: ctx.node,
                        own: st.status,
                        heard: w.status,
                    });
                }
            }
        }
    }
    if offset + 1 < params.epoch_rounds() {
        st.pc.offset += 1;
        return Ok(sent);
    }

    // epoch end
    if st.status == Status::Probing {
        // blacks always classify, so only an uninformed white can get here
        ctx.emit(EventKind::Unheard);
        st.status = Status::Low;
    }
    ctx.emit(EventKind::EpochEnd {
        k: params.k,
        status: st.status,
    });
    let verdict = match st.status.verdict() {
        Some(v) => v,
        None => {
            st.life = Lifecycle::Finished {
                output: Some(params.k),
                round: ctx.round,
            };
            ctx.emit(EventKind::Stop {
                output: Some(params.k),
            });
            st.pc.offset += 1;
            return Ok(sent);
        }
    };
    match update_estimate(verdict, st.est) {
        Ok(next) => {
            st.est = next;
            if cfg.cap.is_some_and(|cap| next.k > cap) {
                st.life = Lifecycle::Finished {
                    output: None,
                    round: ctx.round,
                };
                ctx.emit(EventKind::Stop { output: None });
                st.pc.offset += 1;
            } else {
                let params = ctx.cache.get(next.k, &cfg)?;
                start_epoch(st, &cfg, params);
            }
        }
        Err(source) => {
            if let ParamError::InconsistentEstimate { min, max } = source {
                ctx.emit(EventKind::EmptySearch { min, max });
            }
            if !cfg.trimmed {
                return Err(MmcError::EmptySearch {
                    round: ctx.round,
                    node: ctx.node,
                    source,
                });
            }
            st.life = Lifecycle::Finished {
                output: None,
                round: ctx.round,
            };
            ctx.emit(EventKind::Stop { output: None });
            st.pc.offset += 1;
        }
    }
    Ok(sent)
}

// ---------------------------------------------------------------------------
// engine

/// Read-only view of one executed round of one lane.
pub struct RoundView<'a> {
    pub round: u64,
    pub lane: usize,
    pub topology: &'a Topology,
    /// Messages broadcast in this round, i.e. node states at round start.
    pub sent: &'a [Wire],
    /// Node states after the round.
    pub nodes: &'a [NodeState],
    pub events: &'a [Event],
}

pub trait Observer {
    fn on_start(&mut self, _lane: usize, _nodes: &[NodeState]) {}
    fn on_round(&mut self, _view: &RoundView<'_>) {}
    /// Rounds `from..to` of `lane` were skipped; states did not change except for
    /// their program counters.
    fn on_skip(&mut self, _lane: usize, _from: u64, _to: u64) {}
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub nodes: Vec<NodeState>,
    /// Next round this lane must execute.
    next_round: u64,
}

impl Lane {
    pub fn all_finished(&self) -> bool {
        self.nodes.iter().all(|s| s.is_finished())
    }

    pub fn any_finished(&self) -> bool {
        self.nodes.iter().any(|s| s.is_finished())
    }
}

struct LanesView<'a>(&'a [Lane]);

impl WorldView for LanesView<'_> {
    fn n(&self) -> usize {
        self.0.first().map_or(0, |l| l.nodes.len())
    }
    fn lanes(&self) -> usize {
        self.0.len()
    }
    fn potential(&self, lane: usize, node: usize) -> f64 {
        self.0[lane].nodes[node].phi
    }
    fn is_black(&self, lane: usize, node: usize) -> bool {
        self.0[lane].nodes[node].is_black()
    }
    fn status_code(&self, lane: usize, node: usize) -> u8 {
        self.0[lane].nodes[node].status.code()
    }
}

/// Outcome of one call to [`World::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// A round was executed for at least one lane.
    Executed(u64),
    /// Every lane was quiescent; the clock jumped forward to just before this round.
    Jumped(u64),
    /// Nothing left to do (every lane reached its horizon).
    Idle,
}

/// A set of lanes sharing one adversary and one round clock.
pub struct World {
    n: usize,
    cfg: ProtocolConfig,
    cache: ParamCache,
    lanes: Vec<Lane>,
    adversary: Adversary,
    round: u64,
    executed: u64,
    horizon: Option<u64>,
    fast_forward: bool,
    adj: Adjacency,
    sent: Vec<Wire>,
    inbox: Vec<Wire>,
    events: Vec<Event>,
    static_adj: Option<Adjacency>,
    scratch: std::cell::RefCell<Vec<Wire>>,
    clock_offset: u64,
}

impl World {
    /// `roles[lane][node]`. With a `horizon`, lanes idle after finishing and stop
    /// exactly at that round.
    pub fn new(
        cfg: ProtocolConfig,
        roles: &[Vec<Role>],
        adversary: Adversary,
        horizon: Option<u64>,
    ) -> Result<Self, MmcError> {
        let n = adversary.n();
        if roles.iter().any(|r| r.len() != n) {
            return Err(MmcError::Config(format!("every lane needs {n} roles")));
        }
        let mut cache = ParamCache::default();
        let mut lanes = Vec::with_capacity(roles.len());
        for lane_roles in roles {
            let nodes = lane_roles
                .iter()
                .map(|&role| initial_node(role, &cfg, &mut cache))
                .collect::<Result<Vec<_>, _>>()?;
            lanes.push(Lane {
                nodes,
                next_round: 1,
            });
        }
        let static_adj = adversary.static_topology().map(|t| t.adjacency());
        Ok(World {
            static_adj,
            scratch: Default::default(),
            clock_offset: 0,
            n,
            cfg,
            cache,
            lanes,
            adversary,
            round: 0,
            executed: 0,
            horizon,
            fast_forward: true,
            adj: Adjacency::default(),
            sent: Vec::with_capacity(n),
            inbox: Vec::with_capacity(n),
            events: Vec::new(),
        })
    }

    pub fn set_fast_forward(&mut self, on: bool) {
        self.fast_forward = on;
    }

    /// Round `r` of this world is round `offset + r` for the adversary, so that
    /// consecutive worlds sharing one adversary see one continuous timeline.
    pub fn set_clock_offset(&mut self, offset: u64) {
        self.clock_offset = offset;
    }

    /// Returns the adversary, e.g. to hand it to the next world.
    pub fn into_adversary(self) -> Adversary {
        self.adversary
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    /// Rounds elapsed on the global clock (including fast-forwarded ones).
    pub fn round(&self) -> u64 {
        self.round
    }

    /// Rounds that were actually simulated.
    pub fn executed_rounds(&self) -> u64 {
        self.executed
    }

    pub fn param_cache(&mut self) -> &mut ParamCache {
        &mut self.cache
    }

    pub fn notify_start(&self, observers: &mut [&mut dyn Observer]) {
        for (i, lane) in self.lanes.iter().enumerate() {
            for o in observers.iter_mut() {
                o.on_start(i, &lane.nodes);
            }
        }
    }

    fn lane_live(&self, lane: &Lane) -> bool {
        match self.horizon {
            Some(h) => lane.next_round <= h,
            None => !lane.all_finished(),
        }
    }

    /// Whether every lane is done: reached the horizon, or (without a horizon)
    /// all of its nodes finished.
    pub fn is_complete(&self) -> bool {
        self.lanes.iter().all(|l| !self.lane_live(l))
    }

    /// Advances the clock by one executed round, or jumps over rounds in which
    /// every live lane is provably quiescent.
    pub fn step(&mut self, observers: &mut [&mut dyn Observer]) -> Result<Step, MmcError> {
        let r = self.round + 1;
        if self.fast_forward {
            for li in 0..self.lanes.len() {
                if !self.lane_live(&self.lanes[li]) || self.lanes[li].next_round != r {
                    continue;
                }
                if let Some(to) = self.quiescent_until(li, r) {
                    let lane = &mut self.lanes[li];
                    for st in lane.nodes.iter_mut().filter(|s| !s.is_finished()) {
                        st.pc.offset += to - r;
                    }
                    lane.next_round = to;
                    trace!("lane {li}: fast-forward {r} -> {to}");
                    for o in observers.iter_mut() {
                        o.on_skip(li, r, to);
                    }
                }
            }
        }
        let mut next = u64::MAX;
        for lane in &self.lanes {
            if self.lane_live(lane) {
                next = next.min(lane.next_round);
            }
        }
        if next == u64::MAX {
            // lanes that jumped past the horizon idled through it
            if let Some(h) = self.horizon {
                self.round = self.round.max(h);
            }
            return Ok(Step::Idle);
        }
        if next > r {
            self.round = next - 1;
            return Ok(Step::Jumped(next));
        }

        let topology = self
            .adversary
            .next_topology(self.clock_offset.saturating_add(r), &LanesView(&self.lanes))?;
        self.adj.rebuild(self.n, &topology.edges);
        for li in 0..self.lanes.len() {
            let live = match self.horizon {
                Some(h) => self.lanes[li].next_round <= h,
                None => !self.lanes[li].all_finished(),
            };
            if !live || self.lanes[li].next_round != r {
                continue;
            }
            self.events.clear();
            self.sent.clear();
            self.sent.extend(self.lanes[li].nodes.iter().map(|s| s.wire()));
            for v in 0..self.n {
                self.inbox.clear();
                self.inbox
                    .extend(self.adj.neighbors(v).iter().map(|&u| self.sent[u as usize]));
                insertion_sort(&mut self.inbox);
                let mut ctx = RoundCtx {
                    cfg: &self.cfg,
                    cache: &mut self.cache,
                    round: r,
                    node: v as u32,
                    events: &mut self.events,
                };
                mmc_round(&mut self.lanes[li].nodes[v], &self.inbox, &mut ctx)?;
            }
            if self.horizon == Some(r) {
                for (v, st) in self.lanes[li].nodes.iter().enumerate() {
                    if !st.is_finished() {
                        self.events.push(Event {
                            node: Some(v as u32),
                            kind: EventKind::Truncated,
                        });
                    }
                }
            }
            self.lanes[li].next_round = r + 1;
            if !observers.is_empty() {
                let view = RoundView {
                    round: r,
                    lane: li,
                    topology,
                    sent: &self.sent,
                    nodes: &self.lanes[li].nodes,
                    events: &self.events,
                };
                for o in observers.iter_mut() {
                    o.on_round(&view);
                }
            }
        }
        self.round = r;
        self.executed += 1;
        Ok(Step::Executed(r))
    }

    /// If lane `li` is provably unaffected by rounds `r..to` under any connected
    /// topology, returns `to`, the next round it must execute.
    fn quiescent_until(&self, li: usize, r: u64) -> Option<u64> {
        let scratch = &self.scratch;
        let nodes = &self.lanes[li].nodes;
        let first = nodes[0];
        if self.cfg.trimmed && nodes.iter().any(|s| s.b != first.b) {
            return None;
        }
        if nodes.iter().all(|s| s.is_finished()) {
            // idle nodes only relay the flag, which is already uniform
            return self.horizon.map(|h| h + 1).filter(|&to| to > r);
        }
        if self.cfg.trimmed && nodes.iter().all(|s| s.is_finished() || s.status != Status::Probing) {
            // a node holding a verdict ignores its inbox until its epoch ends
            let to = nodes
                .iter()
                .filter(|s| !s.is_finished())
                .map(|s| r + (s.params.epoch_rounds() - 1 - s.pc.offset))
                .min()
                .expect("some node is running");
            let to = self.horizon.map_or(to, |h| to.min(h));
            return (to > r).then_some(to);
        }
        if nodes
            .iter()
            .any(|s| s.is_finished() || s.est.k != first.est.k || s.pc != first.pc)
        {
            return None;
        }
        let params = first.params;
        let offset = first.pc.offset;
        let avg = params.averaging_rounds();
        let last = params.epoch_rounds() - 1;
        let uniform_status = nodes.iter().all(|s| s.status == first.status);

        let target = if uniform_status && first.status == Status::Low {
            // alarms only re-assert low; nothing else happens until the epoch's last round
            last
        } else if offset >= avg {
            // with a single status in circulation nobody adopts or conflicts
            if !uniform_status {
                return None;
            }
            last
        } else if uniform_status && first.status == Status::Probing {
            let fixed = match &self.static_adj {
                Some(adj) => static_fixpoint(nodes, adj, params.d, &mut scratch.borrow_mut()),
                None => {
                    let bound = self.adversary.degree_bound();
                    (bound as u64) < params.d && averaging_fixpoint(nodes, params.d, bound)
                }
            };
            if !fixed {
                return None;
            }
            offset - offset % params.r + params.r - 1
        } else {
            return None;
        };
        if target <= offset {
            return None;
        }
        let to = r + (target - offset);
        Some(match self.horizon {
            Some(h) => to.min(h),
            None => to,
        })
        .filter(|&to| to > r)
    }
}

fn insertion_sort(v: &mut [Wire]) {
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1].canonical_cmp(&v[j]) == Ordering::Greater {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
}

/// True when one averaging round leaves every potential bit-identical for every
/// possible inbox of at most `degree_bound` messages drawn from the other nodes.
///
/// Potentials must agree to within 2^-40 relative spread, so every difference
/// and every partial sum of differences is computed exactly. The update is then
/// monotone in the exact difference sum, and checking the two extreme sums (the
/// `degree_bound` most negative and most positive differences) covers every
/// admissible neighbourhood.
pub fn averaging_fixpoint(nodes: &[NodeState], d: u64, degree_bound: usize) -> bool {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in nodes {
        lo = lo.min(s.phi);
        hi = hi.max(s.phi);
    }
    if nodes.iter().all(|s| s.phi.to_bits() == lo.to_bits()) {
        return apply_update(lo, 0.0, d).to_bits() == lo.to_bits();
    }
    if lo.is_nan() || lo <= 0.0 || hi - lo > hi * f64::powi(2.0, -40) {
        return false;
    }
    let mut diffs = Vec::with_capacity(nodes.len());
    nodes.iter().enumerate().all(|(i, s)| {
        diffs.clear();
        diffs.extend(
            nodes
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, t)| t.phi - s.phi),
        );
        diffs.sort_by(f64::total_cmp);
        let neg: f64 = diffs.iter().take(degree_bound).filter(|x| **x < 0.0).sum();
        let pos: f64 = diffs.iter().rev().take(degree_bound).filter(|x| **x > 0.0).sum();
        apply_update(s.phi, neg, d).to_bits() == s.phi.to_bits()
            && apply_update(s.phi, pos, d).to_bits() == s.phi.to_bits()
    })
}

/// True when one averaging round on the fixed topology `adj` leaves every node
/// bit-identical; the same round then repeats verbatim.
fn static_fixpoint(nodes: &[NodeState], adj: &Adjacency, d: u64, inbox: &mut Vec<Wire>) -> bool {
    (0..nodes.len()).all(|v| {
        inbox.clear();
        inbox.extend(adj.neighbors(v).iter().map(|&u| nodes[u as usize].wire()));
        if inbox.len() as u64 >= d {
            return false;
        }
        insertion_sort(inbox);
        let phi = nodes[v].phi;
        let diff: f64 = inbox.iter().map(|w| w.phi - phi).sum();
        apply_update(phi, diff, d).to_bits() == phi.to_bits()
    })
}

// ---------------------------------------------------------------------------
// plain runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmcConfig {
    pub n: usize,
    pub ell: u64,
    pub epsilon: f64,
    pub mode: Mode,
    pub adversary: AdversarySpec,
    /// Explicit roles; defaults to the first `ell` nodes black.
    pub roles: Option<Vec<Role>>,
    pub round_budget: Option<u64>,
    pub fast_forward: bool,
}

impl MmcConfig {
    pub fn new(n: usize, ell: u64, epsilon: f64, adversary: AdversarySpec, mode: Mode) -> Self {
        MmcConfig {
            n,
            ell,
            epsilon,
            mode,
            adversary,
            roles: None,
            round_budget: None,
            fast_forward: true,
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        self.roles
            .clone()
            .unwrap_or_else(|| prefix_roles(self.n, self.ell as usize))
    }
}

pub fn prefix_roles(n: usize, blacks: usize) -> Vec<Role> {
    (0..n)
        .map(|i| if i < blacks { Role::Black } else { Role::White })
        .collect()
}

/// `blacks` black nodes at positions drawn uniformly from a seeded stream.
pub fn seeded_roles(n: usize, blacks: usize, seed: u64) -> Vec<Role> {
    let mut roles = vec![Role::White; n];
    let mut rng = stream_rng(seed, tags::PLACEMENT, &[n as u64, blacks as u64]);
    for i in sample(&mut rng, n, blacks.min(n)) {
        roles[i] = Role::Black;
    }
    roles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub k: u64,
    pub start_round: u64,
    pub end_round: u64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub n: usize,
    pub ell: u64,
    pub counts: Vec<Option<u64>>,
    pub stop_rounds: Vec<Option<u64>>,
    pub total_rounds: u64,
    pub executed_rounds: u64,
    pub epochs: Vec<EpochSummary>,
    pub guaranteed: bool,
}

impl RunResult {
    /// The common output if every node stopped with the same count in the same round.
    pub fn agreed_count(&self) -> Option<u64> {
        let first = self.counts.first().copied().flatten()?;
        let round = self.stop_rounds.first().copied().flatten()?;
        (self.counts.iter().all(|c| *c == Some(first))
            && self.stop_rounds.iter().all(|r| *r == Some(round)))
        .then_some(first)
    }
}

/// Tracks epoch boundaries of node 0 for the run summary.
#[derive(Default)]
struct EpochLog {
    epochs: Vec<EpochSummary>,
    start: u64,
}

impl Observer for EpochLog {
    fn on_round(&mut self, view: &RoundView<'_>) {
        for e in view.events {
            if let (Some(0), EventKind::EpochEnd { k, status }) = (e.node, e.kind) {
                self.epochs.push(EpochSummary {
                    k,
                    start_round: self.start + 1,
                    end_round: view.round,
                    status,
                });
                self.start = view.round;
            }
        }
    }
}

pub fn run_mmc(cfg: &MmcConfig, observers: &mut [&mut dyn Observer]) -> Result<RunResult, MmcError> {
    if cfg.ell == 0 {
        return Err(MmcError::Params(ParamError::NoBlackNodes));
    }
    if cfg.n < 2 || cfg.n as u64 <= cfg.ell {
        return Err(MmcError::Params(ParamError::TooFewNodes {
            n: cfg.n as u64,
            ell: cfg.ell,
        }));
    }
    let roles = cfg.roles();
    if roles.len() != cfg.n {
        return Err(MmcError::Config(format!(
            "{} roles given for {} nodes",
            roles.len(),
            cfg.n
        )));
    }
    let proto = ProtocolConfig {
        ell: cfg.ell,
        epsilon: cfg.epsilon,
        mode: cfg.mode,
        cap: None,
        trimmed: false,
    };
    let adversary = Adversary::new(cfg.adversary.clone(), cfg.n)?;
    let mut world = World::new(proto, &[roles], adversary, None)?;
    world.set_fast_forward(cfg.fast_forward);
    let mut log = EpochLog::default();
    world.notify_start(observers);

    let summarize = |world: &World, log: &EpochLog| {
        let nodes = &world.lanes()[0].nodes;
        RunResult {
            n: cfg.n,
            ell: cfg.ell,
            counts: nodes
                .iter()
                .map(|s| match s.life {
                    Lifecycle::Finished { output, .. } => output,
                    Lifecycle::Running => None,
                })
                .collect(),
            stop_rounds: nodes
                .iter()
                .map(|s| match s.life {
                    Lifecycle::Finished { round, .. } => Some(round),
                    Lifecycle::Running => None,
                })
                .collect(),
            total_rounds: world.round(),
            executed_rounds: world.executed_rounds(),
            epochs: log.epochs.clone(),
            guaranteed: cfg.mode.guarantees_correctness(),
        }
    };

    let mut exhausted = None;
    {
        let mut obs: Vec<&mut dyn Observer> = Vec::with_capacity(observers.len() + 1);
        obs.push(&mut log);
        for o in observers.iter_mut() {
            obs.push(&mut **o);
        }
        loop {
            let lane = &world.lanes()[0];
            if lane.any_finished() {
                if !lane.all_finished() {
                    return Err(MmcError::Desync {
                        round: world.round(),
                        detail: "some nodes stopped while others kept running".into(),
                    });
                }
                break;
            }
            if let Some(budget) = cfg.round_budget {
                if world.round() >= budget {
                    exhausted = Some(budget);
                    break;
                }
            }
            world.step(&mut obs)?;
        }
    }
    if let Some(budget) = exhausted {
        return Err(MmcError::BudgetExhausted {
            budget,
            partial: Box::new(summarize(&world, &log)),
        });
    }
    let result = summarize(&world, &log);
    debug!(
        "mmc n={} ell={} finished after {} rounds ({} simulated)",
        cfg.n, cfg.ell, result.total_rounds, result.executed_rounds
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn potential_update_examples() {
        assert_eq!(potential_update(1.0, &[0.0], 4), 0.75);
        assert_eq!(potential_update(0.3, &[0.3, 0.3], 7), 0.3);
        let a = potential_update(1.0, &[0.0], 4);
        let b = potential_update(0.0, &[1.0], 4);
        assert_eq!((a, b), (0.75, 0.25));
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_rho(3.0, 4, 1, 2.0), Status::Done);
        assert_eq!(classify_rho(2.0, 4, 1, 2.0), Status::High);
        assert_eq!(classify_rho(3.5, 4, 1, 2.0), Status::Low);
        // band edges are inclusive
        assert_eq!(classify_rho(2.8125, 4, 1, 2.0), Status::Done);
        assert_eq!(classify_rho(3.1875, 4, 1, 2.0), Status::Done);
    }

    fn cfg() -> ProtocolConfig {
        ProtocolConfig {
            ell: 1,
            epsilon: 1.0,
            mode: Mode::Paper,
            cap: None,
            trimmed: false,
        }
    }

    #[test]
    fn white_alarm_on_too_many_neighbors() {
        let c = cfg();
        let mut cache = ParamCache::default();
        let mut st = initial_node(Role::White, &c, &mut cache).unwrap();
        st.phi = 0.2;
        let d = st.params.d as usize;
        let inbox = vec![
            Wire {
                phi: 0.1,
                status: Status::Probing,
                b: false
            };
            d
        ];
        let mut events = Vec::new();
        let mut ctx = RoundCtx {
            cfg: &c,
            cache: &mut cache,
            round: 1,
            node: 0,
            events: &mut events,
        };
        mmc_round(&mut st, &inbox, &mut ctx).unwrap();
        assert_eq!(st.status, Status::Low);
        assert_eq!(st.phi, 1.0);
        assert!(matches!(events[0].kind, EventKind::AlarmDegree { degree } if degree == d));
    }

    #[test]
    fn positions() {
        let p = derive_epoch_params(2, 1, 1.0, Mode::Scaled { s_p: 0.1, s_r: 0.01 }).unwrap();
        assert_eq!((p.p, p.r, p.d), (2, 6, 4));
        assert_eq!(position(&p, 0), Position::Averaging { phase: 1, round: 1 });
        assert_eq!(position(&p, 6), Position::Averaging { phase: 2, round: 1 });
        assert_eq!(position(&p, 12), Position::Dissemination { round: 1 });
    }

    #[test]
    fn fixpoint_detection() {
        let c = cfg();
        let mut cache = ParamCache::default();
        let mut nodes = vec![initial_node(Role::White, &c, &mut cache).unwrap(); 3];
        assert!(averaging_fixpoint(&nodes, 4, 2));
        nodes[1].phi = 1.0 - f64::EPSILON / 2.0;
        // one ulp below 1: with d = 4 the upward pull on the low node is exactly half
        // its spacing and rounds to even (up to 1.0); with d = 8 it vanishes
        assert!(!averaging_fixpoint(&nodes, 4, 2));
        assert!(averaging_fixpoint(&nodes, 8, 2));
        // a single neighbour pulls only half as hard
        assert!(averaging_fixpoint(&nodes, 4, 1));
        nodes[2].phi = 0.5;
        assert!(!averaging_fixpoint(&nodes, 4, 2));
    }

    #[test]
    fn tiny_run_counts() {
        let r = run_mmc(
            &MmcConfig::new(2, 1, 1.0, AdversarySpec::StaticPath, Mode::Paper),
            &mut [],
        )
        .unwrap();
        assert_eq!(r.agreed_count(), Some(2));
    }

    #[test]
    fn rejects_too_many_blacks() {
        let err = run_mmc(
            &MmcConfig::new(3, 3, 0.5, AdversarySpec::StaticPath, Mode::Paper),
            &mut [],
        )
        .unwrap_err();
        assert!(matches!(err, MmcError::Params(ParamError::TooFewNodes { n: 3, ell: 3 })));
    }
}
