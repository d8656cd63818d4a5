// SPDX-License-Identifier: Apache-2.0

//! Security-aware network slicing over a simulated optical transport testbed
//! with quantum and classical key management.
//!
//! - [`topology`]: sites, devices, channels, ports and configuration snapshots.
//! - [`device_sim`]: transactional device agents with sampled latency and faults.
//! - [`kms`]: key management with DH, a post-quantum KEM stand-in and a QKD
//!   trusted-node relay.
//! - [`pce`]: latency-optimal, security-feasible path computation.
//! - [`orchestrator`]: slice lifecycle, rollback, audit and timing.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod device_sim;
pub mod kms;
pub mod orchestrator;
pub mod pce;
pub mod scenarios;
pub mod topology;

pub use config::SimConfig;
pub use kms::{Kms, KmsConfig, KeyId};
pub use orchestrator::{Orchestrator, OrchestratorError, SliceDescriptor, SliceRecord, SliceState};
pub use pce::{compute_path, ConnectionRequest, PathSolution, Policy, Role};
pub use topology::{SecurityMethod, Topology};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/keys.md")]
    mod keys {}
    #[doc = include_str!("../../../book/src/paths.md")]
    mod paths {}
    #[doc = include_str!("../../../book/src/orchestration.md")]
    mod orchestration {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
