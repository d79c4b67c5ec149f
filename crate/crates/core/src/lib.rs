//! Counting the nodes of anonymous dynamic networks.
//!
//! * [`params`] derives per-epoch constants and the size-estimate search.
//! * [`netsim`] provides topologies, adversaries and message delivery.
//! * [`mmc`] is the deterministic protocol with black nodes and the round engine.
//! * [`llmc`] is the trimmed subroutine and the randomized leaderless protocol.
//! * [`analysis`] records traces and checks invariants.
//! * [`cli`] is the experiment harness behind the `adn-count` binary.

pub mod analysis;
pub mod cli;
pub mod llmc;
pub mod mmc;
pub mod netsim;
pub mod params;
