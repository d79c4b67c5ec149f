//! Traces, invariant checkers and dynamic-graph diagnostics.
//!
//! Checkers are streaming: they consume [`Line`]s one at a time, either live from
//! a [`TraceTap`] attached to a running world or from a JSONL trace file, so a
//! run never has to be held in memory.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::mmc::{
    Event, EventKind, Lifecycle, NodeState, Observer, ProtocolConfig, RoundView, Status,
};
use crate::netsim::{deliver, Role, Topology};
use crate::params::EpochParams;

pub const CONSERVATION_TOL: f64 = 1e-9;
pub const BOUND_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// trace records

/// Node state after a round (or at start).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub phi: f64,
    pub rho: f64,
    pub status: Status,
    pub b: bool,
    /// Current estimate and position of the next round.
    pub k: u64,
    pub epoch: u32,
    pub offset: u64,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<u64>,
}

impl From<&NodeState> for NodeRecord {
    fn from(s: &NodeState) -> Self {
        let (finished, output) = match s.life {
            Lifecycle::Running => (false, None),
            Lifecycle::Finished { output, .. } => (true, output),
        };
        NodeRecord {
            phi: s.phi,
            rho: s.rho,
            status: s.status,
            b: s.b,
            k: s.params.k,
            epoch: s.pc.epoch,
            offset: s.pc.offset,
            finished,
            output,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub lane: usize,
    /// Estimate and epoch offset of node 0 during this round.
    pub k: u64,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(u32, u32)>>,
    pub nodes: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub protocol: ProtocolConfig,
    pub n: usize,
    pub lanes: usize,
    /// Free-form snapshot of the experiment configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// One line of a JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Start {
        lane: usize,
        roles: Vec<Role>,
        nodes: Vec<NodeRecord>,
    },
    Round(RoundRecord),
    Skip {
        lane: usize,
        from: u64,
        to: u64,
    },
}

/// Borrowed form of [`TraceLine`]; serializes identically.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Line<'a> {
    Header(&'a TraceHeader),
    Start {
        lane: usize,
        roles: &'a [Role],
        nodes: &'a [NodeRecord],
    },
    Round(&'a RoundRecord),
    Skip {
        lane: usize,
        from: u64,
        to: u64,
    },
}

impl TraceLine {
    pub fn as_line(&self) -> Line<'_> {
        match self {
            TraceLine::Header(h) => Line::Header(h),
            TraceLine::Start { lane, roles, nodes } => Line::Start {
                lane: *lane,
                roles,
                nodes,
            },
            TraceLine::Round(r) => Line::Round(r),
            TraceLine::Skip { lane, from, to } => Line::Skip {
                lane: *lane,
                from: *from,
                to: *to,
            },
        }
    }
}

/// A fully loaded trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub lines: Vec<TraceLine>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trace does not start with a header")]
    MissingHeader,
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
}

impl RunTrace {
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine =
                serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            match parsed {
                TraceLine::Header(h) if header.is_none() => header = Some(h),
                TraceLine::Header(_) => {
                    return Err(TraceError::Malformed {
                        line: i + 1,
                        detail: "second header".into(),
                    })
                }
                _ if header.is_none() => return Err(TraceError::MissingHeader),
                other => lines.push(other),
            }
        }
        Ok(RunTrace {
            header: header.ok_or(TraceError::MissingHeader)?,
            lines,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &Line::Header(&self.header))?;
        out.write_all(b"\n")?;
        for l in &self.lines {
            serde_json::to_writer(&mut out, &l.as_line())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rounds are strictly increasing per lane and every record covers all nodes.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut last: HashMap<usize, u64> = HashMap::new();
        for (i, l) in self.lines.iter().enumerate() {
            let (lane, round, count) = match l {
                TraceLine::Round(r) => (r.lane, r.round, r.nodes.len()),
                TraceLine::Start { lane, nodes, .. } => (*lane, 0, nodes.len()),
                _ => continue,
            };
            if count != self.header.n {
                return Err(TraceError::Malformed {
                    line: i + 2,
                    detail: format!("{count} node records, expected {}", self.header.n),
                });
            }
            if let Some(&prev) = last.get(&lane) {
                if round <= prev {
                    return Err(TraceError::Malformed {
                        line: i + 2,
                        detail: format!("round {round} after {prev} in lane {lane}"),
                    });
                }
            }
            last.insert(lane, round);
        }
        Ok(())
    }
}

pub trait LineSink {
    fn line(&mut self, line: Line<'_>);
}

/// Writes JSONL. I/O errors are kept and reported by [`JsonlWriter::finish`].
pub struct JsonlWriter<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlWriter { out, error: None }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> LineSink for JsonlWriter<W> {
    fn line(&mut self, line: Line<'_>) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }
}

/// SHA-256 over the JSONL serialization of every line seen.
#[derive(Default, Clone)]
pub struct TraceDigest {
    hasher: Sha256,
}

impl TraceDigest {
    pub fn hex(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

impl LineSink for TraceDigest {
    fn line(&mut self, line: Line<'_>) {
        serde_json::to_writer(&mut self.hasher, &line).expect("hashing cannot fail");
        self.hasher.update(b"\n");
    }
}

/// What a [`TraceTap`] puts into round records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    /// States and events only.
    #[default]
    States,
    /// Also a topology id per round.
    TopologyIds,
    /// Also the full edge list per round.
    Full,
}

/// Turns engine callbacks into trace lines for a set of sinks.
pub struct TraceTap<'a> {
    sinks: Vec<&'a mut dyn LineSink>,
    verbosity: Verbosity,
    buf: RoundRecord,
    /// Estimate, next offset and finished flag of node 0 per lane.
    node0: HashMap<usize, (u64, u64, bool)>,
}

impl<'a> TraceTap<'a> {
    pub fn new(verbosity: Verbosity, sinks: Vec<&'a mut dyn LineSink>) -> Self {
        TraceTap {
            sinks,
            verbosity,
            buf: RoundRecord::default(),
            node0: HashMap::new(),
        }
    }

    pub fn header(&mut self, header: &TraceHeader) {
        for s in &mut self.sinks {
            s.line(Line::Header(header));
        }
    }
}

pub fn topology_id(t: &Topology) -> String {
    hex::encode(&Sha256::digest(t.canonical_bytes())[..8])
}

impl Observer for TraceTap<'_> {
    fn on_start(&mut self, lane: usize, nodes: &[NodeState]) {
        let roles: Vec<Role> = nodes.iter().map(|s| s.role).collect();
        let recs: Vec<NodeRecord> = nodes.iter().map(NodeRecord::from).collect();
        self.node0.insert(lane, (nodes[0].params.k, nodes[0].pc.offset, nodes[0].is_finished()));
        for s in &mut self.sinks {
            s.line(Line::Start {
                lane,
                roles: &roles,
                nodes: &recs,
            });
        }
    }

    fn on_round(&mut self, view: &RoundView<'_>) {
        let (k, offset, _) = self.node0.get(&view.lane).copied().unwrap_or_default();
        let s0 = &view.nodes[0];
        self.node0.insert(view.lane, (s0.params.k, s0.pc.offset, s0.is_finished()));
        let b = &mut self.buf;
        b.round = view.round;
        b.lane = view.lane;
        b.k = k;
        b.offset = offset;
        b.topology_id = match self.verbosity {
            Verbosity::States => None,
            _ => Some(topology_id(view.topology)),
        };
        b.edges = (self.verbosity == Verbosity::Full).then(|| view.topology.edges.clone());
        b.nodes.clear();
        b.nodes.extend(view.nodes.iter().map(NodeRecord::from));
        b.events.clear();
        b.events.extend_from_slice(view.events);
        for s in &mut self.sinks {
            s.line(Line::Round(&self.buf));
        }
    }

    fn on_skip(&mut self, lane: usize, from: u64, to: u64) {
        if let Some((_, offset, false)) = self.node0.get_mut(&lane) {
            *offset += to - from;
        }
        for s in &mut self.sinks {
            s.line(Line::Skip { lane, from, to });
        }
    }
}

// ---------------------------------------------------------------------------
// checkers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_violation_round: Option<u64>,
    pub details: serde_json::Value,
}

/// Per-lane context handed to checkers: node states before the round.
pub struct LaneCtx<'a> {
    pub lane: usize,
    pub roles: &'a [Role],
    pub before: &'a [NodeRecord],
    pub params: &'a mut ParamLookup,
}

/// Epoch parameters by estimate, for the traced configuration.
pub struct ParamLookup {
    cfg: ProtocolConfig,
    cache: crate::mmc::ParamCache,
}

impl ParamLookup {
    pub fn new(cfg: ProtocolConfig) -> Self {
        ParamLookup {
            cfg,
            cache: Default::default(),
        }
    }

    pub fn get(&mut self, k: u64) -> Option<EpochParams> {
        self.cache.get(k, &self.cfg).ok()
    }
}

pub trait Check {
    fn name(&self) -> &'static str;
    fn start(&mut self, _ctx: &mut LaneCtx<'_>) {}
    fn round(&mut self, ctx: &mut LaneCtx<'_>, rec: &RoundRecord);
    fn report(&self) -> CheckReport;
}

/// Records the first violation and a few examples.
#[derive(Debug, Default)]
struct Violations {
    first: Option<u64>,
    count: u64,
    examples: Vec<serde_json::Value>,
}

impl Violations {
    fn add(&mut self, round: u64, detail: serde_json::Value) {
        self.first.get_or_insert(round);
        self.count += 1;
        if self.examples.len() < 5 {
            self.examples.push(detail);
        }
    }

    fn report(&self, check: &str, mut details: serde_json::Value) -> CheckReport {
        details["violations"] = json!(self.count);
        if !self.examples.is_empty() {
            details["examples"] = json!(self.examples);
        }
        CheckReport {
            check: check.to_string(),
            pass: self.count == 0,
            first_violation_round: self.first,
            details,
        }
    }
}

fn whites(roles: &[Role]) -> u64 {
    roles.iter().filter(|r| **r == Role::White).count() as u64
}

fn consumed(rec: &RoundRecord, node: usize) -> f64 {
    rec.events
        .iter()
        .filter(|e| e.node == Some(node as u32))
        .map(|e| match e.kind {
            EventKind::Consume { amount } => amount,
            _ => 0.0,
        })
        .sum()
}

fn is_alarm(kind: &EventKind) -> bool {
    matches!(
        kind,
        EventKind::AlarmThreshold { .. } | EventKind::AlarmDegree { .. } | EventKind::AlarmReceived
    )
}

/// Common position of all running nodes before the round, if they agree.
fn lockstep(before: &[NodeRecord]) -> Option<(u64, u32, u64)> {
    let mut it = before.iter().filter(|s| !s.finished);
    let first = it.next()?;
    it.all(|s| (s.k, s.epoch, s.offset) == (first.k, first.epoch, first.offset))
        .then_some((first.k, first.epoch, first.offset))
}

/// Total potential is preserved inside alarm-free stretches of a phase, and
/// every epoch starts from the initial potentials.
#[derive(Default)]
pub struct Conservation {
    ell: f64,
    window: HashMap<usize, f64>,
    checked_rounds: u64,
    epoch_starts: u64,
    worst_rel: f64,
    bad: Violations,
}

impl Conservation {
    pub fn new(ell: u64) -> Self {
        Conservation {
            ell: ell as f64,
            ..Default::default()
        }
    }

    fn epoch_start(&mut self, round: u64, lane: usize, roles: &[Role], nodes: &[NodeRecord]) {
        if nodes.iter().any(|s| s.finished || s.offset != 0) {
            // not a common epoch start; check the restarted nodes individually
            for (v, s) in nodes.iter().enumerate() {
                if !s.finished && s.offset == 0 {
                    let want = if roles[v] == Role::White { self.ell } else { 0.0 };
                    if s.phi != want {
                        self.bad.add(round, json!({"lane": lane, "node": v, "phi": s.phi, "expected": want}));
                    }
                }
            }
            return;
        }
        self.epoch_starts += 1;
        let total: f64 = nodes.iter().map(|s| s.phi).sum();
        let want = self.ell * whites(roles) as f64;
        if total != want {
            self.bad.add(round, json!({"lane": lane, "epoch_start_total": total, "expected": want}));
        }
    }
}

impl Check for Conservation {
    fn name(&self) -> &'static str {
        "conservation"
    }

    fn start(&mut self, ctx: &mut LaneCtx<'_>) {
        self.epoch_start(0, ctx.lane, ctx.roles, ctx.before);
    }

    fn round(&mut self, ctx: &mut LaneCtx<'_>, rec: &RoundRecord) {
        let lane = ctx.lane;
        let Some((k, _, offset)) = lockstep(ctx.before) else {
            self.window.remove(&lane);
            return;
        };
        let Some(params) = ctx.params.get(k) else {
            return;
        };
        let avg = params.averaging_rounds();
        if offset < avg
            && offset % params.r == 0
            && ctx.before.iter().all(|s| !s.finished && s.status == Status::Probing)
        {
            self.window.insert(lane, ctx.before.iter().map(|s| s.phi).sum());
        }
        if let Some(&start) = self.window.get(&lane) {
            let alarmed = rec.events.iter().any(|e| is_alarm(&e.kind));
            if offset >= avg || alarmed {
                self.window.remove(&lane);
            } else {
                let total: f64 = rec
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(v, s)| s.phi + consumed(rec, v))
                    .sum();
                let rel = (total - start).abs() / start.abs().max(f64::MIN_POSITIVE);
                self.checked_rounds += 1;
                self.worst_rel = self.worst_rel.max(rel);
                if rel > CONSERVATION_TOL {
                    self.bad.add(rec.round, json!({"lane": lane, "total": total, "phase_start": start}));
                }
                if offset % params.r == params.r - 1 {
                    self.window.remove(&lane);
                }
            }
        }
        if rec.nodes.iter().any(|s| !s.finished && s.offset == 0) {
            self.epoch_start(rec.round, lane, ctx.roles, &rec.nodes);
        }
    }

    fn report(&self) -> CheckReport {
        self.bad.report(
            self.name(),
            json!({
                "checked_rounds": self.checked_rounds,
                "epoch_starts": self.epoch_starts,
                "max_relative_drift": self.worst_rel,
                "tolerance": CONSERVATION_TOL,
            }),
        )
    }
}

/// `0 <= phi <= ell` at every node and round, up to [`BOUND_TOL`].
#[derive(Default)]
pub struct PotentialBounds {
    ell: f64,
    min: f64,
    max: f64,
    bad: Violations,
}

impl PotentialBounds {
    pub fn new(ell: u64) -> Self {
        PotentialBounds {
            ell: ell as f64,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            bad: Violations::default(),
        }
    }

    fn scan(&mut self, round: u64, lane: usize, nodes: &[NodeRecord]) {
        for (v, s) in nodes.iter().enumerate() {
            self.min = self.min.min(s.phi);
            self.max = self.max.max(s.phi);
            if !(s.phi >= -BOUND_TOL && s.phi <= self.ell + BOUND_TOL) {
                self.bad.add(round, json!({"lane": lane, "node": v, "phi": s.phi}));
            }
        }
    }
}

impl Check for PotentialBounds {
    fn name(&self) -> &'static str {
        "potential_bounds"
    }

    fn start(&mut self, ctx: &mut LaneCtx<'_>) {
        self.scan(0, ctx.lane, ctx.before);
    }

    fn round(&mut self, ctx: &mut LaneCtx<'_>, rec: &RoundRecord) {
        self.scan(rec.round, ctx.lane, &rec.nodes);
    }

    fn report(&self) -> CheckReport {
        self.bad.report(
            self.name(),
            json!({"min_phi": self.min, "max_phi": self.max, "ell": self.ell, "tolerance": BOUND_TOL}),
        )
    }
}

/// Where a black node's accumulated consumption must fall, given `k` vs `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoRegion {
    /// `k = n`: inside the classification band.
    Band { lo: f64, hi: f64 },
    /// `k < n`: above the band.
    Above { hi: f64 },
    /// `k > n`: below the band.
    Below { lo: f64 },
}

impl RhoRegion {
    pub fn predicted(k: u64, n: u64, ell: u64, gamma: f64) -> Self {
        let base = (k - ell) as f64;
        let lo = base * (1.0 - (k as f64).powf(-gamma));
        let hi = base * (1.0 + (k as f64).powf(-gamma));
        match k.cmp(&n) {
            std::cmp::Ordering::Equal => RhoRegion::Band { lo, hi },
            std::cmp::Ordering::Less => RhoRegion::Above { hi },
            std::cmp::Ordering::Greater => RhoRegion::Below { lo },
        }
    }

    pub fn contains(&self, rho: f64) -> bool {
        match *self {
            RhoRegion::Band { lo, hi } => lo <= rho && rho <= hi,
            RhoRegion::Above { hi } => rho > hi,
            RhoRegion::Below { lo } => rho < lo,
        }
    }
}

/// Classified epochs: black accumulators lie in the predicted region.
///
/// Only lanes whose actual black count equals the configured one are checked.
#[derive(Default)]
pub struct RhoRange {
    ell: u64,
    n: u64,
    checked: u64,
    skipped_lanes: BTreeSet<usize>,
    by_k: HashMap<u64, (f64, f64)>,
    bad: Violations,
}

impl RhoRange {
    pub fn new(n: usize, ell: u64) -> Self {
        RhoRange {
            n: n as u64,
            ell,
            ..Default::default()
        }
    }
}

impl Check for RhoRange {
    fn name(&self) -> &'static str {
        "rho_range"
    }

    fn round(&mut self, ctx: &mut LaneCtx<'_>, rec: &RoundRecord) {
        for e in &rec.events {
            let EventKind::Classify { k, rho, .. } = e.kind else {
                continue;
            };
            if ctx.roles.len() as u64 - whites(ctx.roles) != self.ell {
                self.skipped_lanes.insert(ctx.lane);
                continue;
            }
            let Some(params) = ctx.params.get(k) else {
                continue;
            };
            let region = RhoRegion::predicted(k, self.n, self.ell, params.gamma);
            self.checked += 1;
            let span = self.by_k.entry(k).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            span.0 = span.0.min(rho);
            span.1 = span.1.max(rho);
            if !region.contains(rho) {
                self.bad.add(
                    rec.round,
                    json!({"lane": ctx.lane, "node": e.node, "k": k, "rho": rho, "region": region}),
                );
            }
        }
    }

    fn report(&self) -> CheckReport {
        let mut spans: Vec<_> = self.by_k.iter().map(|(k, (lo, hi))| json!({"k": k, "min": lo, "max": hi})).collect();
        spans.sort_by_key(|v| v["k"].as_u64());
        self.bad.report(
            self.name(),
            json!({"classifications": self.checked, "rho_by_k": spans, "skipped_lanes": self.skipped_lanes}),
        )
    }
}

#[derive(Debug, Clone, Default)]
struct EpochWatch {
    k: u64,
    epoch: u32,
    /// Largest potential (before consumption) at the end of the first phase.
    phase1_max: Option<f64>,
    /// Offset of the first round after which every node held low.
    all_low_at: Option<u64>,
}

/// Underestimates raise alarms that reach everyone early in phase 2;
/// estimates at least `n` never trip the threshold.
#[derive(Default)]
pub struct AlarmLemmas {
    n: u64,
    ell: u64,
    epsilon: f64,
    watch: HashMap<usize, EpochWatch>,
    epochs_low: u64,
    epochs_high: u64,
    bad: Violations,
}

impl AlarmLemmas {
    pub fn new(n: usize, ell: u64, epsilon: f64) -> Self {
        AlarmLemmas {
            n: n as u64,
            ell,
            epsilon,
            ..Default::default()
        }
    }

    fn close(&mut self, round: u64, lane: usize, w: EpochWatch, params: &EpochParams) {
        let kpow = (w.k as f64).powf(1.0 + self.epsilon);
        let r = params.r;
        if kpow < self.n as f64 {
            self.epochs_low += 1;
            let low_early = w.all_low_at.is_some_and(|o| o < r);
            let tripped = w.phase1_max.is_some_and(|m| m > params.tau) || low_early;
            let spread = w.all_low_at.is_some_and(|o| o < r || (o - r + 1) as f64 <= kpow);
            if !tripped || !spread {
                self.bad.add(
                    round,
                    json!({"lane": lane, "k": w.k, "epoch": w.epoch, "phase1_max": w.phase1_max,
                           "tau": params.tau, "all_low_offset": w.all_low_at, "r": r}),
                );
            }
        } else if w.k >= self.n {
            self.epochs_high += 1;
            if w.phase1_max.is_none_or(|m| m > params.tau) {
                self.bad.add(
                    round,
                    json!({"lane": lane, "k": w.k, "epoch": w.epoch, "phase1_max": w.phase1_max, "tau": params.tau}),
                );
            }
        }
    }
}

impl Check for AlarmLemmas {
    fn name(&self) -> &'static str {
        "alarm_lemmas"
    }

    fn round(&mut self, ctx: &mut LaneCtx<'_>, rec: &RoundRecord) {
        if ctx.roles.len() as u64 - whites(ctx.roles) != self.ell {
            return;
        }
        let Some((k, epoch, offset)) = lockstep(ctx.before) else {
            self.watch.remove(&ctx.lane);
            return;
        };
        let Some(params) = ctx.params.get(k) else {
            return;
        };
        let w = self.watch.entry(ctx.lane).or_default();
        if (w.k, w.epoch) != (k, epoch) {
            *w = EpochWatch {
                k,
                epoch,
                ..Default::default()
            };
        }
        if offset == params.r - 1 {
            let m = rec
                .nodes
                .iter()
                .enumerate()
                .map(|(v, s)| s.phi + consumed(rec, v))
                .fold(f64::NEG_INFINITY, f64::max);
            w.phase1_max = Some(m);
        }
        if w.all_low_at.is_none() && rec.nodes.iter().all(|s| s.status == Status::Low) {
            w.all_low_at = Some(offset);
        }
        if offset + 1 == params.epoch_rounds() {
            let w = self.watch.remove(&ctx.lane).expect("watched");
            self.close(rec.round, ctx.lane, w, &params);
        }
    }

    fn report(&self) -> CheckReport {
        self.bad.report(
            self.name(),
            json!({"underestimate_epochs": self.epochs_low, "estimate_at_least_n_epochs": self.epochs_high}),
        )
    }
}

/// Plain runs: all nodes share one program counter, and all stop together
/// with the same output.
#[derive(Default)]
pub struct Lockstep {
    stops: HashMap<usize, (u64, Option<u64>, usize)>,
    bad: Violations,
}

impl Check for Lockstep {
    fn name(&self) -> &'static str {
        "lockstep"
    }

    fn round(&mut self, ctx: &mut LaneCtx<'_>, rec: &RoundRecord) {
        if ctx.before.iter().any(|s| s.finished) {
            self.bad.add(rec.round, json!({"lane": ctx.lane, "detail": "round after a node stopped"}));
        } else if lockstep(ctx.before).is_none() {
            self.bad.add(rec.round, json!({"lane": ctx.lane, "detail": "program counters differ"}));
        }
        let stopped: Vec<(u32, Option<u64>)> = rec
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Stop { output } => Some((e.node.unwrap_or(u32::MAX), output)),
                _ => None,
            })
            .collect();
        if stopped.is_empty() {
            return;
        }
        let out = stopped[0].1;
        if stopped.len() != rec.nodes.len() || stopped.iter().any(|s| s.1 != out) {
            self.bad.add(rec.round, json!({"lane": ctx.lane, "stops": stopped.len(), "outputs": stopped}));
        }
        self.stops.insert(ctx.lane, (rec.round, out, stopped.len()));
    }

    fn report(&self) -> CheckReport {
        let stops: Vec<_> = self
            .stops
            .iter()
            .map(|(lane, (round, out, count))| json!({"lane": lane, "round": round, "output": out, "nodes": count}))
            .collect();
        self.bad.report(self.name(), json!({"stops": stops}))
    }
}

/// Runs a set of checks over a stream of lines, tracking per-lane states
/// across skipped rounds.
pub struct CheckSuite {
    header: TraceHeader,
    params: ParamLookup,
    roles: HashMap<usize, Vec<Role>>,
    before: HashMap<usize, Vec<NodeRecord>>,
    checks: Vec<Box<dyn Check>>,
    rounds: u64,
    format_errors: Violations,
}

impl CheckSuite {
    pub fn new(header: TraceHeader, checks: Vec<Box<dyn Check>>) -> Self {
        CheckSuite {
            params: ParamLookup::new(header.protocol),
            header,
            roles: HashMap::new(),
            before: HashMap::new(),
            checks,
            rounds: 0,
            format_errors: Violations::default(),
        }
    }

    /// All checks that apply to the traced protocol.
    pub fn standard(header: TraceHeader) -> Self {
        let p = header.protocol;
        let mut checks: Vec<Box<dyn Check>> = vec![
            Box::new(Conservation::new(p.ell)),
            Box::new(PotentialBounds::new(p.ell)),
            Box::new(RhoRange::new(header.n, p.ell)),
            Box::new(AlarmLemmas::new(header.n, p.ell, p.epsilon)),
        ];
        if !p.trimmed {
            checks.push(Box::new(Lockstep::default()));
        }
        CheckSuite::new(header, checks)
    }

    pub fn reports(&self) -> Vec<CheckReport> {
        let mut out: Vec<CheckReport> = self.checks.iter().map(|c| c.report()).collect();
        out.push(self.format_errors.report("trace_format", json!({"rounds": self.rounds})));
        out
    }

    pub fn passed(&self) -> bool {
        self.reports().iter().all(|r| r.pass)
    }

    /// Checks a loaded trace from scratch.
    pub fn run(trace: &RunTrace) -> Vec<CheckReport> {
        let mut suite = CheckSuite::standard(trace.header.clone());
        for l in &trace.lines {
            suite.line(l.as_line());
        }
        suite.reports()
    }
}

impl LineSink for CheckSuite {
    fn line(&mut self, line: Line<'_>) {
        match line {
            Line::Header(_) => {}
            Line::Start { lane, roles, nodes } => {
                self.roles.insert(lane, roles.to_vec());
                self.before.insert(lane, nodes.to_vec());
                let mut ctx = LaneCtx {
                    lane,
                    roles,
                    before: nodes,
                    params: &mut self.params,
                };
                for c in &mut self.checks {
                    c.start(&mut ctx);
                }
            }
            Line::Skip { lane, from, to } => {
                if let Some(nodes) = self.before.get_mut(&lane) {
                    for s in nodes.iter_mut().filter(|s| !s.finished) {
                        s.offset += to - from;
                    }
                }
            }
            Line::Round(rec) => {
                self.rounds += 1;
                let (Some(roles), Some(before)) = (self.roles.get(&rec.lane), self.before.get_mut(&rec.lane)) else {
                    self.format_errors.add(rec.round, json!({"lane": rec.lane, "detail": "round before start"}));
                    return;
                };
                if rec.nodes.len() != self.header.n {
                    self.format_errors.add(rec.round, json!({"lane": rec.lane, "nodes": rec.nodes.len()}));
                    return;
                }
                let mut ctx = LaneCtx {
                    lane: rec.lane,
                    roles,
                    before,
                    params: &mut self.params,
                };
                for c in &mut self.checks {
                    c.round(&mut ctx, rec);
                }
                before.clear();
                before.extend_from_slice(&rec.nodes);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// colour histories

/// Per-round digests of the set of distinct `(state, inbox)` pairs of each colour.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColorHistory {
    prev: Vec<NodeState>,
    /// `rounds[i] = (round, black digest, white digest)`.
    pub rounds: Vec<(u64, [u8; 32], [u8; 32])>,
}

impl ColorHistory {
    pub fn new() -> Self {
        Self::default()
    }
}

fn color_digest(pairs: &BTreeSet<Vec<u8>>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in pairs {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

impl Observer for ColorHistory {
    fn on_start(&mut self, lane: usize, nodes: &[NodeState]) {
        if lane == 0 {
            self.prev = nodes.to_vec();
        }
    }

    fn on_round(&mut self, view: &RoundView<'_>) {
        if view.lane != 0 {
            return;
        }
        let inboxes = deliver(view.topology, view.sent);
        let mut black = BTreeSet::new();
        let mut white = BTreeSet::new();
        for (s, inbox) in self.prev.iter().zip(&inboxes) {
            let pair = serde_json::to_vec(&(s, inbox)).expect("states serialize");
            if s.is_black() {
                black.insert(pair);
            } else {
                white.insert(pair);
            }
        }
        self.rounds.push((view.round, color_digest(&black), color_digest(&white)));
        self.prev.clear();
        self.prev.extend_from_slice(view.nodes);
    }

    fn on_skip(&mut self, _lane: usize, from: u64, _to: u64) {
        // a skipped stretch cannot be compared round by round
        self.rounds.push((from, [0xff; 32], [0xff; 32]));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum HistoryComparison {
    Equal { rounds: u64 },
    Divergence { round: u64 },
}

/// Compares the first `t` rounds of two colour histories.
pub fn compare_color_histories(a: &ColorHistory, b: &ColorHistory, t: u64) -> HistoryComparison {
    let upto = |h: &ColorHistory| h.rounds.iter().take_while(|x| x.0 <= t).count();
    let (na, nb) = (upto(a), upto(b));
    for (x, y) in a.rounds[..na].iter().zip(&b.rounds[..nb]) {
        if x != y {
            return HistoryComparison::Divergence { round: x.0.min(y.0) };
        }
    }
    if na != nb {
        let round = a.rounds.get(na.min(nb)).or(b.rounds.get(na.min(nb))).map_or(t, |x| x.0);
        return HistoryComparison::Divergence { round };
    }
    HistoryComparison::Equal { rounds: na as u64 }
}

// ---------------------------------------------------------------------------
// dynamic-graph diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Largest degree over all rounds.
    pub d_max: usize,
    pub diameter_per_round: Vec<usize>,
    /// Longest time a message needs to reach every node when forwarded one hop
    /// per round, over all start rounds and sources that complete inside the
    /// sequence; `None` if not even the first round's flooding completes.
    pub chronopath: Option<u64>,
    /// `ell - phi` per node, one row per snapshot.
    #[serde(default)]
    pub slack: Vec<Vec<f64>>,
}

fn diameter(t: &Topology) -> usize {
    let adj = t.adjacency();
    let mut best = 0;
    let mut dist = vec![usize::MAX; t.n];
    let mut queue = std::collections::VecDeque::new();
    for s in 0..t.n {
        dist.fill(usize::MAX);
        dist[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            for &u in adj.neighbors(v) {
                if dist[u as usize] == usize::MAX {
                    dist[u as usize] = dist[v] + 1;
                    queue.push_back(u as usize);
                }
            }
        }
        best = best.max(dist.iter().copied().max().unwrap_or(0));
    }
    best
}

/// Rounds needed, starting at `start`, until every node has heard from every
/// source; `None` if the sequence ends first.
fn flood_time(seq: &[Topology], start: usize) -> Option<u64> {
    let n = seq[start].n;
    let words = n.div_ceil(64);
    let full = |row: &[u64]| (0..n).all(|i| row[i / 64] >> (i % 64) & 1 == 1);
    let mut known = vec![0u64; n * words];
    for v in 0..n {
        known[v * words + v / 64] |= 1 << (v % 64);
    }
    if n == 1 {
        return Some(0);
    }
    let mut next = known.clone();
    for (i, t) in seq[start..].iter().enumerate() {
        next.copy_from_slice(&known);
        for &(u, v) in &t.edges {
            let (u, v) = (u as usize, v as usize);
            for w in 0..words {
                next[u * words + w] |= known[v * words + w];
                next[v * words + w] |= known[u * words + w];
            }
        }
        std::mem::swap(&mut known, &mut next);
        if known.chunks(words).all(full) {
            return Some(i as u64 + 1);
        }
    }
    None
}

pub fn compute_dynamic_metrics(seq: &[Topology]) -> Diagnostics {
    let d_max = seq
        .iter()
        .flat_map(|t| t.degrees())
        .max()
        .unwrap_or(0);
    let diameter_per_round = seq.iter().map(diameter).collect();
    let mut chronopath = None;
    for start in 0..seq.len() {
        match flood_time(seq, start) {
            Some(t) => chronopath = Some(chronopath.map_or(t, |c: u64| c.max(t))),
            None => break,
        }
    }
    Diagnostics {
        d_max,
        diameter_per_round,
        chronopath,
        slack: Vec::new(),
    }
}

impl Diagnostics {
    pub fn push_slack(&mut self, ell: u64, nodes: &[NodeState]) {
        self.slack.push(nodes.iter().map(|s| ell as f64 - s.phi).collect());
    }
}

/// Collects the topology of every executed round of lane 0.
#[derive(Debug, Default)]
pub struct TopologyLog {
    pub rounds: Vec<Topology>,
}

impl Observer for TopologyLog {
    fn on_round(&mut self, view: &RoundView<'_>) {
        if view.lane == 0 {
            self.rounds.push(view.topology.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{cycle, path, star};

    #[test]
    fn static_metrics() {
        let s = compute_dynamic_metrics(&vec![star(5).unwrap(); 6]);
        assert_eq!(s.d_max, 4);
        assert!(s.diameter_per_round.iter().all(|&d| d == 2));
        assert_eq!(s.chronopath, Some(2));

        let p = compute_dynamic_metrics(&vec![path(5).unwrap(); 6]);
        assert_eq!(p.d_max, 2);
        assert!(p.diameter_per_round.iter().all(|&d| d == 4));
        assert_eq!(p.chronopath, Some(4));

        let short = compute_dynamic_metrics(&vec![path(5).unwrap(); 3]);
        assert_eq!(short.chronopath, None);
    }

    #[test]
    fn alternating_is_no_slower_than_worst_round() {
        let seq: Vec<Topology> = (0..12)
            .map(|i| if i % 2 == 0 { path(6).unwrap() } else { cycle(6).unwrap() })
            .collect();
        let m = compute_dynamic_metrics(&seq);
        let worst = *m.diameter_per_round.iter().max().unwrap() as u64;
        assert!(m.chronopath.unwrap() <= worst);
    }

    #[test]
    fn rho_regions() {
        let band = RhoRegion::predicted(4, 4, 1, 1.0);
        assert_eq!(band, RhoRegion::Band { lo: 2.25, hi: 3.75 });
        assert!(band.contains(2.25) && band.contains(3.75) && !band.contains(3.76));
        assert!(RhoRegion::predicted(4, 5, 1, 1.0).contains(3.8));
        assert!(!RhoRegion::predicted(4, 5, 1, 1.0).contains(3.75));
        assert!(RhoRegion::predicted(4, 3, 1, 1.0).contains(2.0));
    }
}
