// SPDX-License-Identifier: Apache-2.0

//! Trusted-node key relay over a chain of QKD sections.
//!
//! Each section is a point-to-point QKD link whose two ends hold a shared
//! stream of section keys. An end-to-end key crosses the chain one section at
//! a time: the sender one-time-pads it with the first section key, each
//! trusted node removes the pad of the incoming section and applies the pad of
//! the outgoing one, and the far endpoint removes the last pad. Section keys
//! are consumed exactly once.

use std::collections::VecDeque;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::Zeroize;

/// Default buffer bound per section, in keys.
pub const DEFAULT_SECTION_CAPACITY: usize = 4096;
/// Bits per section key.
pub const KEY_BITS: f64 = 256.0;

/// One 256-bit key of a section's shared stream.
#[derive(Clone, PartialEq, Eq)]
pub struct SectionKey {
    pub seq: u64,
    bytes: [u8; 32],
}

impl SectionKey {
    pub fn new(seq: u64, bytes: [u8; 32]) -> Self {
        SectionKey { seq, bytes }
    }
}

impl std::fmt::Debug for SectionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SectionKey(seq={})", self.seq)
    }
}

impl Drop for SectionKey {
    fn drop(&mut self) {
        self.bytes.zeroize();
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RelayError {
    #[error("insufficient QKD key material on section {0}")]
    InsufficientKeyMaterial(String),
    #[error("invalid chain {chain}: {reason}")]
    InvalidChain { chain: String, reason: String },
}

/// A point-to-point QKD link and its buffer of unused section keys.
#[derive(Debug, Clone)]
pub struct QkdSection {
    pub id: String,
    pub a_node: String,
    pub b_node: String,
    pub secret_key_rate_bps: f64,
    buffer: VecDeque<SectionKey>,
    capacity: usize,
    produced: u64,
    consumed: u64,
    next_seq: u64,
}

impl QkdSection {
    pub fn new(id: impl Into<String>, a_node: impl Into<String>, b_node: impl Into<String>, secret_key_rate_bps: f64) -> Self {
        QkdSection {
            id: id.into(),
            a_node: a_node.into(),
            b_node: b_node.into(),
            secret_key_rate_bps,
            buffer: VecDeque::new(),
            capacity: DEFAULT_SECTION_CAPACITY,
            produced: 0,
            consumed: 0,
            next_seq: 0,
        }
    }

    /// Distills keys up to the long-run rate limit for simulated time `now_s`.
    pub fn accrue(&mut self, now_s: f64, rng: &mut impl RngCore) {
        let target = (now_s.max(0.0) * self.secret_key_rate_bps / KEY_BITS).floor() as u64;
        while self.produced < target {
            let mut bytes = [0u8; 32];
            rng.fill_bytes(&mut bytes);
            self.push(bytes);
        }
    }

    /// Appends a key distilled outside the rate model (tests, manual loading).
    pub fn push(&mut self, bytes: [u8; 32]) {
        self.produced += 1;
        let key = SectionKey::new(self.next_seq, bytes);
        self.next_seq += 1;
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(key);
    }

    fn take(&mut self) -> Option<SectionKey> {
        let key = self.buffer.pop_front()?;
        self.consumed += 1;
        Some(key)
    }

    pub fn available(&self) -> usize {
        self.buffer.len()
    }

    pub fn produced(&self) -> u64 {
        self.produced
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }
}

/// Outcome of relaying one end-to-end key.
#[derive(Clone, PartialEq, Eq)]
pub struct DeliveredKey {
    /// Key recovered at the far endpoint.
    pub material: [u8; 32],
    pub sections_consumed: usize,
    /// Ciphertext observed on each section, in chain order.
    pub wire: Vec<[u8; 32]>,
    /// `(section id, section key seq)` of every pad used.
    pub consumed: Vec<(String, u64)>,
}

impl std::fmt::Debug for DeliveredKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeliveredKey")
            .field("sections_consumed", &self.sections_consumed)
            .field("consumed", &self.consumed)
            .finish_non_exhaustive()
    }
}

fn xor_into<const N: usize>(dst: &mut [u8; N], pad: &[u8; N]) {
    for (d, p) in dst.iter_mut().zip(pad) {
        *d ^= p;
    }
}

/// Hop-by-hop one-time-pad relay of `end_key` over sections padded with
/// `pads`, for any key width. Returns the per-section ciphertexts and the key
/// recovered by the far endpoint.
///
/// ```
/// use qslice_core::kms::otp_relay;
///
/// let (wire, delivered) = otp_relay([0x5a_u8], &[[0x0f], [0xf0]]);
/// assert_eq!(wire, vec![[0x55], [0xaa]]);
/// assert_eq!(delivered, [0x5a]);
/// ```
pub fn otp_relay<const N: usize>(end_key: [u8; N], pads: &[[u8; N]]) -> (Vec<[u8; N]>, [u8; N]) {
    let mut wire = Vec::with_capacity(pads.len());
    let mut in_flight = end_key;
    let mut held = [0u8; N];
    for (i, pad) in pads.iter().enumerate() {
        // Sender side of section i: either the source endpoint or a trusted
        // node re-encrypting what it decrypted from section i-1.
        if i > 0 {
            in_flight = held;
            held.zeroize();
        }
        xor_into(&mut in_flight, pad);
        wire.push(in_flight);
        // Receiver side of section i removes the pad.
        held = in_flight;
        xor_into(&mut held, pad);
    }
    let delivered = if pads.is_empty() { end_key } else { held };
    held.zeroize();
    in_flight.zeroize();
    (wire, delivered)
}

/// Ordered QKD sections joined by trusted nodes.
#[derive(Debug, Clone)]
pub struct QkdChain {
    pub id: String,
    sections: Vec<QkdSection>,
    trusted_nodes: Vec<String>,
}

impl QkdChain {
    pub fn new(id: impl Into<String>, sections: Vec<QkdSection>, trusted_nodes: Vec<String>) -> Result<Self, RelayError> {
        let id = id.into();
        let bad = |reason: String| RelayError::InvalidChain { chain: id.clone(), reason };
        if sections.is_empty() {
            return Err(bad("a chain needs at least one section".into()));
        }
        if trusted_nodes.len() != sections.len() - 1 {
            return Err(bad(format!(
                "{} sections need {} trusted nodes, got {}",
                sections.len(),
                sections.len() - 1,
                trusted_nodes.len()
            )));
        }
        for (i, node) in trusted_nodes.iter().enumerate() {
            if &sections[i].b_node != node || &sections[i + 1].a_node != node {
                return Err(bad(format!(
                    "trusted node {node} does not join sections {} and {}",
                    sections[i].id,
                    sections[i + 1].id
                )));
            }
        }
        if let Some(s) = sections.iter().find(|s| !(s.secret_key_rate_bps > 0.0)) {
            return Err(bad(format!("section {} has a non-positive key rate", s.id)));
        }
        Ok(QkdChain { id, sections, trusted_nodes })
    }

    /// Chain of `sections` links with trusted nodes `tn-1 .. tn-(n-1)`.
    pub fn linear(id: &str, a_end: &str, b_end: &str, sections: usize, rate_bps: f64) -> Result<Self, RelayError> {
        let mut nodes = vec![a_end.to_string()];
        nodes.extend((1..sections).map(|i| format!("{id}-tn-{i}")));
        nodes.push(b_end.to_string());
        let secs = (0..sections)
            .map(|i| QkdSection::new(format!("{id}-s{}", i + 1), nodes[i].clone(), nodes[i + 1].clone(), rate_bps))
            .collect();
        QkdChain::new(id, secs, nodes[1..nodes.len() - 1].to_vec())
    }

    pub fn sections(&self) -> &[QkdSection] {
        &self.sections
    }

    pub fn sections_mut(&mut self) -> &mut [QkdSection] {
        &mut self.sections
    }

    pub fn trusted_nodes(&self) -> &[String] {
        &self.trusted_nodes
    }

    pub fn endpoints(&self) -> (&str, &str) {
        (&self.sections[0].a_node, &self.sections[self.sections.len() - 1].b_node)
    }

    pub fn accrue(&mut self, now_s: f64, rng: &mut impl RngCore) {
        for s in &mut self.sections {
            s.accrue(now_s, rng);
        }
    }

    /// Relays `end_key` from the chain's first endpoint to its last.
    ///
    /// Either every section gives up exactly one key or, when any buffer is
    /// empty, none does.
    pub fn relay_key(&mut self, end_key: &[u8; 32]) -> Result<DeliveredKey, RelayError> {
        if let Some(empty) = self.sections.iter().find(|s| s.available() == 0) {
            return Err(RelayError::InsufficientKeyMaterial(empty.id.clone()));
        }
        let taken: Vec<(String, SectionKey)> = self
            .sections
            .iter_mut()
            .map(|s| (s.id.clone(), s.take().expect("checked non-empty")))
            .collect();
        let pads: Vec<[u8; 32]> = taken.iter().map(|(_, k)| k.bytes).collect();
        let (wire, material) = otp_relay(*end_key, &pads);
        let mut pads = pads;
        pads.iter_mut().for_each(Zeroize::zeroize);
        Ok(DeliveredKey {
            material,
            sections_consumed: taken.len(),
            wire,
            consumed: taken.into_iter().map(|(id, k)| (id, k.seq)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionStatus {
    pub id: String,
    pub a_node: String,
    pub b_node: String,
    pub available: usize,
    pub produced: u64,
    pub consumed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStatus {
    pub id: String,
    pub trusted_nodes: Vec<String>,
    pub sections: Vec<SectionStatus>,
}

impl From<&QkdChain> for ChainStatus {
    fn from(chain: &QkdChain) -> Self {
        ChainStatus {
            id: chain.id.clone(),
            trusted_nodes: chain.trusted_nodes.clone(),
            sections: chain
                .sections
                .iter()
                .map(|s| SectionStatus {
                    id: s.id.clone(),
                    a_node: s.a_node.clone(),
                    b_node: s.b_node.clone(),
                    available: s.available(),
                    produced: s.produced(),
                    consumed: s.consumed(),
                })
                .collect(),
        }
    }
}
