//! Synchronous anonymous-network plumbing: per-round topologies, the adversaries
//! that produce them, impossibility fixtures and message delivery.
//!
//! Node indices exist only so the engine can address arrays; protocol code only
//! ever sees the multiset of payloads a node received.

use std::cmp::Ordering;
use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("topology needs at least 2 nodes, got {0}")]
    TooSmall(usize),
    #[error("self-loop at node {0}")]
    SelfLoop(u32),
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    OutOfRange(u32, u32, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(u32, u32),
    #[error("topology is disconnected: {reached} of {n} nodes reachable from node 0")]
    Disconnected { reached: usize, n: usize },
    #[error("adversary {kind} cannot build a topology on {n} nodes: {reason}")]
    Unsupported { kind: &'static str, n: usize, reason: String },
    #[error("adaptive adversary requested but no strategy was supplied")]
    MissingStrategy,
    #[error("round {round}: degree {degree} exceeds the adversary's declared bound {bound}")]
    DegreeBound { round: u64, degree: usize, bound: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Black,
    White,
}

/// One round's undirected edge set. Edges are stored as `(u, v)` with `u < v`,
/// sorted, so symmetry holds by construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub n: usize,
    pub edges: Vec<(u32, u32)>,
}

impl Topology {
    /// Normalizes orientation, sorts, drops duplicates and validates.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self, NetError> {
        let mut edges: Vec<(u32, u32)> = edges
            .into_iter()
            .map(|(u, v)| if u <= v { (u, v) } else { (v, u) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let t = Topology { n, edges };
        t.validate()?;
        Ok(t)
    }

    /// Connected, loop-free, in range, no duplicates.
    pub fn validate(&self) -> Result<(), NetError> {
        if self.n < 2 {
            return Err(NetError::TooSmall(self.n));
        }
        for w in self.edges.windows(2) {
            if w[0] == w[1] {
                return Err(NetError::DuplicateEdge(w[0].0, w[0].1));
            }
        }
        for &(u, v) in &self.edges {
            if u == v {
                return Err(NetError::SelfLoop(u));
            }
            if u as usize >= self.n || v as usize >= self.n {
                return Err(NetError::OutOfRange(u, v, self.n));
            }
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(x) = queue.pop_front() {
            for &y in adj.neighbors(x) {
                let y = y as usize;
                if !seen[y] {
                    seen[y] = true;
                    reached += 1;
                    queue.push_back(y);
                }
            }
        }
        if reached != self.n {
            return Err(NetError::Disconnected { reached, n: self.n });
        }
        Ok(())
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::from_edges(self.n, &self.edges)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(u, v) in &self.edges {
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        deg
    }

    /// Canonical bytes, used for hashing and as a topology id.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.edges.len() * 8);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        for &(u, v) in &self.edges {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Compressed adjacency lists.
#[derive(Debug, Clone, Default)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Adjacency {
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Self {
        let mut adj = Adjacency::default();
        adj.rebuild(n, edges);
        adj
    }

    /// Rebuilds in place, reusing the buffers.
    pub fn rebuild(&mut self, n: usize, edges: &[(u32, u32)]) {
        self.offsets.clear();
        self.offsets.resize(n + 1, 0);
        for &(u, v) in edges {
            self.offsets[u as usize + 1] += 1;
            self.offsets[v as usize + 1] += 1;
        }
        for i in 0..n {
            self.offsets[i + 1] += self.offsets[i];
        }
        self.targets.clear();
        self.targets.resize(edges.len() * 2, 0);
        let mut fill = self.offsets[..n].to_vec();
        for &(u, v) in edges {
            self.targets[fill[u as usize]] = v;
            fill[u as usize] += 1;
            self.targets[fill[v as usize]] = u;
            fill[v as usize] += 1;
        }
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A topology together with the role of each node, as used by the fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub n: usize,
    pub edges: Vec<(u32, u32)>,
    pub roles: Vec<Role>,
}

impl Fixture {
    fn from_parts(topology: Topology, roles: Vec<Role>) -> Self {
        debug_assert_eq!(topology.n, roles.len());
        Fixture {
            n: topology.n,
            edges: topology.edges,
            roles,
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            n: self.n,
            edges: self.edges.clone(),
        }
    }

    pub fn black_count(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::Black).count()
    }
}

// ---------------------------------------------------------------------------
// builders

pub fn path(n: usize) -> Result<Topology, NetError> {
    Topology::new(n, (1..n as u32).map(|i| (i - 1, i)))
}

pub fn star(n: usize) -> Result<Topology, NetError> {
    Topology::new(n, (1..n as u32).map(|i| (0, i)))
}

/// Cycle on `n` nodes; for `n = 2` this degenerates to a single edge.
pub fn cycle(n: usize) -> Result<Topology, NetError> {
    let n32 = n as u32;
    Topology::new(
        n,
        (0..n32)
            .map(|i| (i, (i + 1) % n32))
            .filter(|(u, v)| u != v),
    )
}

/// Path visiting the nodes in the given order.
pub fn path_through(order: &[u32]) -> Result<Topology, NetError> {
    Topology::new(order.len(), order.windows(2).map(|w| (w[0], w[1])))
}

/// Decodes a Prüfer sequence into the edges of a labelled tree on `seq.len() + 2` nodes.
pub fn prufer_tree(seq: &[u32]) -> Vec<(u32, u32)> {
    let n = seq.len() + 2;
    let mut degree = vec![1u32; n];
    for &x in seq {
        degree[x as usize] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &x in seq {
        let leaf = degree.iter().position(|&d| d == 1).expect("a tree always has a leaf");
        edges.push((leaf as u32, x));
        degree[leaf] = 0;
        degree[x as usize] -= 1;
    }
    let mut rest = (0..n as u32).filter(|&v| degree[v as usize] == 1);
    let a = rest.next().expect("two leaves remain");
    let b = rest.next().expect("two leaves remain");
    edges.push((a, b));
    edges
}

/// Uniform labelled tree on `n` nodes (Prüfer sequence with uniform entries).
pub fn random_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Topology, NetError> {
    if n < 2 {
        return Err(NetError::TooSmall(n));
    }
    let seq: Vec<u32> = (0..n - 2).map(|_| rng.gen_range(0..n as u32)).collect();
    Topology::new(n, prufer_tree(&seq))
}

/// Uniform spanning tree plus every other pair independently with probability 1/2.
pub fn random_connected<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Topology, NetError> {
    let tree = random_tree(n, rng)?;
    let mut edges = tree.edges.clone();
    for u in 0..n as u32 {
        for v in (u + 1)..n as u32 {
            if tree.edges.binary_search(&(u, v)).is_err() && rng.gen_bool(0.5) {
                edges.push((u, v));
            }
        }
    }
    Topology::new(n, edges)
}

/// Path through a uniformly random permutation of the nodes.
pub fn permuted_path<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Topology, NetError> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    path_through(&order)
}

/// `lambda` black nodes, each adjacent to all four whites; whites form two adjacent pairs.
/// Blacks are nodes `0..lambda`.
pub fn build_gadget_g1(lambda: usize) -> Result<Fixture, NetError> {
    if lambda == 0 {
        return Err(NetError::Unsupported {
            kind: "gadget_g1",
            n: 4,
            reason: "lambda must be at least 1".into(),
        });
    }
    let l = lambda as u32;
    let whites = [l, l + 1, l + 2, l + 3];
    let mut edges = vec![(whites[0], whites[1]), (whites[2], whites[3])];
    for b in 0..l {
        edges.extend(whites.iter().map(|&w| (b, w)));
    }
    let mut roles = vec![Role::Black; lambda];
    roles.extend([Role::White; 4]);
    Ok(Fixture::from_parts(Topology::new(lambda + 4, edges)?, roles))
}

/// Two groups of `lambda` blacks and four white pairs. Group A (nodes `0..lambda`)
/// touches the first white of every pair, group B (`lambda..2*lambda`) the second.
pub fn build_gadget_g2(lambda: usize) -> Result<Fixture, NetError> {
    if lambda == 0 {
        return Err(NetError::Unsupported {
            kind: "gadget_g2",
            n: 8,
            reason: "lambda must be at least 1".into(),
        });
    }
    let l = lambda as u32;
    let first = |pair: u32| 2 * l + 2 * pair;
    let second = |pair: u32| 2 * l + 2 * pair + 1;
    let mut edges = Vec::new();
    for pair in 0..4 {
        edges.push((first(pair), second(pair)));
        for b in 0..l {
            edges.push((b, first(pair)));
            edges.push((l + b, second(pair)));
        }
    }
    let mut roles = vec![Role::Black; 2 * lambda];
    roles.extend([Role::White; 8]);
    Ok(Fixture::from_parts(Topology::new(2 * lambda + 8, edges)?, roles))
}

/// `x` caterpillar gadgets (a white path with one pendant black per white) whose
/// white end points are joined so that all whites form a single cycle. With
/// `ell_per_gadget = 0` each gadget is a plain path of `whites_if_plain` whites.
///
/// Whites come first in the labelling; the pendant of white `i` is node `W + i`.
pub fn build_cycle_of_gadgets(
    x: usize,
    ell_per_gadget: usize,
    whites_if_plain: usize,
) -> Result<Fixture, NetError> {
    if x == 0 {
        return Err(NetError::Unsupported {
            kind: "gadget_cycle",
            n: 0,
            reason: "need at least one gadget".into(),
        });
    }
    let per = if ell_per_gadget == 0 {
        whites_if_plain
    } else {
        ell_per_gadget
    };
    let whites = x * per;
    let blacks = if ell_per_gadget == 0 { 0 } else { whites };
    let n = whites + blacks;
    let w = whites as u32;
    // cycle over the whites; for tiny rings the wrap-around edge duplicates or
    // collapses into a loop and is dropped
    let mut edges: Vec<(u32, u32)> = (0..w)
        .map(|i| (i, (i + 1) % w))
        .filter(|(u, v)| u != v)
        .collect();
    if blacks > 0 {
        edges.extend((0..w).map(|i| (i, w + i)));
    }
    let mut roles = vec![Role::White; whites];
    roles.extend(std::iter::repeat_n(Role::Black, blacks));
    Ok(Fixture::from_parts(Topology::new(n, edges)?, roles))
}

// ---------------------------------------------------------------------------
// seeds

/// Purpose tags for [`stream_seed`].
pub mod tags {
    pub const TOPOLOGY: u64 = 0x746f_706f;
    pub const BLACK_SELECTION: u64 = 0x626c_6b73;
    pub const PLACEMENT: u64 = 0x706c_6163;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a master seed, a purpose tag and a list of
/// indices by chaining SplitMix64 over each word.
pub fn stream_seed(master: u64, tag: u64, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(tag));
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream_rng(master: u64, tag: u64, indices: &[u64]) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(stream_seed(master, tag, indices))
}

// ---------------------------------------------------------------------------
// adversaries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversarySpec {
    StaticPath,
    StaticStar,
    StaticCycle,
    RandomConnected { seed: u64 },
    PermutedPath { seed: u64 },
    RandomTree { seed: u64 },
    /// Static cycle of caterpillar gadgets; `n` must equal the fixture size.
    GadgetCycle { x: usize, ell_per_gadget: usize, whites_if_plain: usize },
    /// A fixed, user-supplied topology.
    Fixed { topology: Topology },
    /// Online adversary driven by an [`AdaptiveStrategy`].
    AdaptiveHook { strategy: String, seed: u64 },
}

impl AdversarySpec {
    pub fn name(&self) -> &'static str {
        match self {
            AdversarySpec::StaticPath => "static_path",
            AdversarySpec::StaticStar => "static_star",
            AdversarySpec::StaticCycle => "static_cycle",
            AdversarySpec::RandomConnected { .. } => "random_connected",
            AdversarySpec::PermutedPath { .. } => "permuted_path",
            AdversarySpec::RandomTree { .. } => "random_tree",
            AdversarySpec::GadgetCycle { .. } => "gadget_cycle",
            AdversarySpec::Fixed { .. } => "fixed",
            AdversarySpec::AdaptiveHook { .. } => "adaptive_hook",
        }
    }

    /// Builds an adversary from a kind name and seed; used by the CLI.
    pub fn from_name(name: &str, seed: u64) -> Option<Self> {
        Some(match name {
            "static_path" => AdversarySpec::StaticPath,
            "static_star" => AdversarySpec::StaticStar,
            "static_cycle" => AdversarySpec::StaticCycle,
            "random_connected" => AdversarySpec::RandomConnected { seed },
            "permuted_path" => AdversarySpec::PermutedPath { seed },
            "random_tree" => AdversarySpec::RandomTree { seed },
            "adaptive_hook" => AdversarySpec::AdaptiveHook {
                strategy: PhiSortedPath::NAME.into(),
                seed,
            },
            _ => return None,
        })
    }

    pub fn is_static(&self) -> bool {
        matches!(
            self,
            AdversarySpec::StaticPath
                | AdversarySpec::StaticStar
                | AdversarySpec::StaticCycle
                | AdversarySpec::GadgetCycle { .. }
                | AdversarySpec::Fixed { .. }
        )
    }

    pub fn is_oblivious(&self) -> bool {
        !matches!(self, AdversarySpec::AdaptiveHook { .. })
    }

    /// Upper bound on any node's degree in any round this adversary can produce.
    pub fn degree_bound(&self, n: usize) -> usize {
        match self {
            AdversarySpec::StaticPath | AdversarySpec::StaticCycle | AdversarySpec::PermutedPath { .. } => {
                2.min(n - 1)
            }
            AdversarySpec::GadgetCycle { .. } | AdversarySpec::Fixed { .. } => self
                .oblivious_topology(n, 1)
                .map(|t| t.degrees().into_iter().max().unwrap_or(0))
                .unwrap_or(n - 1),
            _ => n - 1,
        }
    }

    /// Topology of an oblivious adversary: a pure function of `(spec, n, round)`.
    pub fn oblivious_topology(&self, n: usize, round: u64) -> Result<Topology, NetError> {
        match self {
            AdversarySpec::StaticPath => path(n),
            AdversarySpec::StaticStar => star(n),
            AdversarySpec::StaticCycle => cycle(n),
            AdversarySpec::RandomConnected { seed } => {
                random_connected(n, &mut stream_rng(*seed, tags::TOPOLOGY, &[round]))
            }
            AdversarySpec::PermutedPath { seed } => {
                permuted_path(n, &mut stream_rng(*seed, tags::TOPOLOGY, &[round]))
            }
            AdversarySpec::RandomTree { seed } => {
                random_tree(n, &mut stream_rng(*seed, tags::TOPOLOGY, &[round]))
            }
            AdversarySpec::GadgetCycle {
                x,
                ell_per_gadget,
                whites_if_plain,
            } => {
                let f = build_cycle_of_gadgets(*x, *ell_per_gadget, *whites_if_plain)?;
                if f.n != n {
                    return Err(NetError::Unsupported {
                        kind: "gadget_cycle",
                        n,
                        reason: format!("fixture has {} nodes", f.n),
                    });
                }
                Ok(f.topology())
            }
            AdversarySpec::Fixed { topology } => {
                if topology.n != n {
                    return Err(NetError::Unsupported {
                        kind: "fixed",
                        n,
                        reason: format!("topology has {} nodes", topology.n),
                    });
                }
                topology.validate()?;
                Ok(topology.clone())
            }
            AdversarySpec::AdaptiveHook { .. } => Err(NetError::MissingStrategy),
        }
    }
}

/// What an adaptive adversary may observe: the complete current state of every
/// lane (thread) of the world, including random choices already made.
pub trait WorldView {
    fn n(&self) -> usize;
    fn lanes(&self) -> usize;
    fn potential(&self, lane: usize, node: usize) -> f64;
    fn is_black(&self, lane: usize, node: usize) -> bool;
    /// Small integer code of the node's status (0 = probing).
    fn status_code(&self, lane: usize, node: usize) -> u8;
}

pub trait AdaptiveStrategy: Send {
    fn choose(&mut self, round: u64, view: &dyn WorldView) -> Result<Topology, NetError>;

    /// Upper bound on the degree of any node in any topology this strategy returns.
    fn degree_bound(&self, n: usize) -> usize {
        n - 1
    }
}

/// Built-in adaptive strategy: a path ordered by lane-0 potential, so nodes holding
/// similar potential sit next to each other and averaging progresses slowly.
#[derive(Debug, Default, Clone)]
pub struct PhiSortedPath;

impl PhiSortedPath {
    pub const NAME: &'static str = "phi_sorted_path";
}

impl AdaptiveStrategy for PhiSortedPath {
    fn choose(&mut self, _round: u64, view: &dyn WorldView) -> Result<Topology, NetError> {
        let mut order: Vec<u32> = (0..view.n() as u32).collect();
        order.sort_by(|&a, &b| {
            view.potential(0, a as usize)
                .total_cmp(&view.potential(0, b as usize))
                .then(a.cmp(&b))
        });
        path_through(&order)
    }

    fn degree_bound(&self, n: usize) -> usize {
        2.min(n - 1)
    }
}

pub fn strategy_by_name(name: &str) -> Option<Box<dyn AdaptiveStrategy>> {
    match name {
        PhiSortedPath::NAME => Some(Box::new(PhiSortedPath)),
        _ => None,
    }
}

/// Runtime adversary: caches static topologies and drives adaptive strategies.
pub struct Adversary {
    spec: AdversarySpec,
    n: usize,
    degree_bound: usize,
    current: Option<Topology>,
    strategy: Option<Box<dyn AdaptiveStrategy>>,
}

impl std::fmt::Debug for Adversary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Adversary")
            .field("spec", &self.spec)
            .field("n", &self.n)
            .finish()
    }
}

impl Adversary {
    pub fn new(spec: AdversarySpec, n: usize) -> Result<Self, NetError> {
        let strategy = match &spec {
            AdversarySpec::AdaptiveHook { strategy, .. } => Some(
                strategy_by_name(strategy).ok_or_else(|| NetError::Unsupported {
                    kind: "adaptive_hook",
                    n,
                    reason: format!("unknown strategy {strategy:?}"),
                })?,
            ),
            _ => None,
        };
        Self::build(spec, n, strategy)
    }

    pub fn with_strategy(
        spec: AdversarySpec,
        n: usize,
        strategy: Box<dyn AdaptiveStrategy>,
    ) -> Result<Self, NetError> {
        Self::build(spec, n, Some(strategy))
    }

    fn build(
        spec: AdversarySpec,
        n: usize,
        strategy: Option<Box<dyn AdaptiveStrategy>>,
    ) -> Result<Self, NetError> {
        if n < 2 {
            return Err(NetError::TooSmall(n));
        }
        let current = if spec.is_static() {
            Some(spec.oblivious_topology(n, 1)?)
        } else {
            None
        };
        let degree_bound = match &strategy {
            Some(s) => s.degree_bound(n),
            None => spec.degree_bound(n),
        };
        Ok(Adversary {
            spec,
            n,
            degree_bound,
            current,
            strategy,
        })
    }

    pub fn spec(&self) -> &AdversarySpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_static(&self) -> bool {
        self.spec.is_static()
    }

    /// Maximum degree any topology from this adversary may have; enforced on
    /// every generated round.
    pub fn degree_bound(&self) -> usize {
        self.degree_bound
    }

    /// The fixed topology of a static adversary.
    pub fn static_topology(&self) -> Option<&Topology> {
        if self.is_static() {
            self.current.as_ref()
        } else {
            None
        }
    }

    /// Topology for `round` (1-based). Every result has been validated.
    pub fn next_topology(&mut self, round: u64, view: &dyn WorldView) -> Result<&Topology, NetError> {
        if !self.spec.is_static() {
            let t = match &mut self.strategy {
                Some(strategy) => {
                    let t = strategy.choose(round, view)?;
                    if t.n != self.n {
                        return Err(NetError::Unsupported {
                            kind: "adaptive_hook",
                            n: self.n,
                            reason: format!("strategy produced {} nodes", t.n),
                        });
                    }
                    t.validate()?;
                    t
                }
                None => self.spec.oblivious_topology(self.n, round)?,
            };
            if let Some(degree) = t.degrees().into_iter().max().filter(|&d| d > self.degree_bound) {
                return Err(NetError::DegreeBound {
                    round,
                    degree,
                    bound: self.degree_bound,
                });
            }
            self.current = Some(t);
        }
        Ok(self.current.as_ref().expect("topology is set"))
    }
}

// ---------------------------------------------------------------------------
// delivery

/// Total order used to canonicalize inbox multisets.
pub trait Payload: Clone {
    fn canonical_cmp(&self, other: &Self) -> Ordering;
}

/// Node `v` receives the payload of each neighbor, sorted canonically; no sender
/// identity survives.
pub fn deliver<T: Payload>(topology: &Topology, outgoing: &[T]) -> Vec<Vec<T>> {
    assert_eq!(outgoing.len(), topology.n, "one payload per node");
    let adj = topology.adjacency();
    (0..topology.n)
        .map(|v| {
            let mut inbox: Vec<T> = adj
                .neighbors(v)
                .iter()
                .map(|&u| outgoing[u as usize].clone())
                .collect();
            inbox.sort_by(|a, b| a.canonical_cmp(b));
            inbox
        })
        .collect()
}
