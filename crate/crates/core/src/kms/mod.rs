// SPDX-License-Identifier: Apache-2.0

//! Key management.
//!
//! The [`Kms`] caches keys of every method by [`KeyId`], binds one active key
//! to each encrypted channel and refreshes it on the channel's interval. Time
//! is simulated: callers move the KMS clock with [`Kms::advance_to`], which
//! runs every refresh that fell due in between, in time order, and expires
//! retired keys once their grace window has passed.
//!
//! Key material never reaches a log line or a `Debug` string.

pub mod exchange;
pub mod relay;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use zeroize::Zeroize;

use crate::topology::{SecurityMethod, Topology};
pub use exchange::{dh_exchange, kem_exchange, qrng_key, DhGroup, Kem, SimulatedKem};
pub use relay::{otp_relay, ChainStatus, DeliveredKey, QkdChain, QkdSection, RelayError};

/// Simulated seconds of QKD distillation before the first channel keys are
/// drawn.
pub const WARM_UP_S: f64 = 1.0;

/// 128-bit key identifier, rendered as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(pub u128);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for KeyId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u128::from_str_radix(s, 16).map(KeyId)
    }
}

impl KeyId {
    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        KeyId(u128::from_be_bytes(bytes))
    }
}

impl Serialize for KeyId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeyId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() != 32 {
            return Err(serde::de::Error::custom("key id must be 32 hex digits"));
        }
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a key was agreed. The derived order is the canonical order used when
/// combining keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMethod {
    Dh,
    Qra,
    Qkd,
    Combined,
}

impl KeyMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyMethod::Dh => "dh",
            KeyMethod::Qra => "qra",
            KeyMethod::Qkd => "qkd",
            KeyMethod::Combined => "combined",
        }
    }

    /// Key method serving a channel security method; `None` for plaintext.
    pub fn for_security(method: SecurityMethod) -> Option<KeyMethod> {
        match method {
            SecurityMethod::None => None,
            SecurityMethod::DhAes => Some(KeyMethod::Dh),
            SecurityMethod::QraAes => Some(KeyMethod::Qra),
            SecurityMethod::QkdAes => Some(KeyMethod::Qkd),
        }
    }
}

impl fmt::Display for KeyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStatus {
    Available,
    Assigned,
    Retired,
}

/// A cached key. Serializes without its material.
#[derive(Clone, Serialize)]
pub struct KeyRecord {
    pub key_id: KeyId,
    pub method: KeyMethod,
    #[serde(skip)]
    material: [u8; 32],
    #[serde(skip)]
    zeroized: bool,
    /// Simulated seconds on the KMS clock.
    pub created_at: f64,
    pub channel_id: Option<String>,
    pub status: KeyStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retired_at: Option<f64>,
}

impl KeyRecord {
    /// The key bytes, or `None` once the record has been zeroized.
    pub fn material(&self) -> Option<&[u8; 32]> {
        (!self.zeroized).then_some(&self.material)
    }

    fn zeroize(&mut self) {
        self.material.zeroize();
        self.zeroized = true;
    }
}

impl fmt::Debug for KeyRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyRecord")
            .field("key_id", &self.key_id)
            .field("method", &self.method)
            .field("created_at", &self.created_at)
            .field("channel_id", &self.channel_id)
            .field("status", &self.status)
            .field("retired_at", &self.retired_at)
            .finish_non_exhaustive()
    }
}

impl Drop for KeyRecord {
    fn drop(&mut self) {
        self.material.zeroize();
    }
}

/// Key-exchange provider selection for [`Kms::produce_key`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Provider {
    Dh,
    Qra,
    Qkd { chain: String },
}

impl Provider {
    pub fn method(&self) -> KeyMethod {
        match self {
            Provider::Dh => KeyMethod::Dh,
            Provider::Qra => KeyMethod::Qra,
            Provider::Qkd { .. } => KeyMethod::Qkd,
        }
    }
}

/// Identity a key consumer declares when fetching material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requester {
    pub channel_id: String,
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KmsError {
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("{device} is not an endpoint of the channel holding key {key}")]
    Unauthorized { key: KeyId, device: String },
    #[error("key {0} was retired beyond its grace window")]
    Expired(KeyId),
    #[error("key {0} is retired")]
    Retired(KeyId),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("channel {0} is not encrypted")]
    NotEncrypted(String),
    #[error("unknown QKD chain {0}")]
    UnknownChain(String),
    #[error("combining keys needs at least 2 constituents, got {0}")]
    TooFewConstituents(usize),
    #[error("{method} provider failed: {reason}")]
    Provider { method: String, reason: String },
    #[error("qkd provider failed: {0}")]
    Relay(#[from] RelayError),
    #[error("entropy source unavailable: {0}")]
    Entropy(String),
    #[error("clock cannot move back from {now} to {requested}")]
    ClockRegression { now: f64, requested: f64 },
    #[error("invalid KMS configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionConfig {
    pub id: String,
    pub a_node: String,
    pub b_node: String,
    pub secret_key_rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub id: String,
    pub trusted_nodes: Vec<String>,
    pub sections: Vec<SectionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmsConfig {
    /// Rate of the single-section chains built for QKD channels that have no
    /// entry in `channel_chains`.
    #[serde(default = "default_rate")]
    pub secret_key_rate_bps: f64,
    /// Retired keys stay retrievable for `grace_factor * refresh_interval_s`.
    #[serde(default = "default_grace")]
    pub grace_factor: f64,
    #[serde(default)]
    pub dh_group: DhGroup,
    #[serde(default)]
    pub qra_seed: u64,
    #[serde(default)]
    pub qkd_chains: Vec<ChainConfig>,
    /// channel id -> chain id.
    #[serde(default)]
    pub channel_chains: BTreeMap<String, String>,
}

fn default_rate() -> f64 {
    2000.0
}

fn default_grace() -> f64 {
    2.0
}

impl Default for KmsConfig {
    fn default() -> Self {
        KmsConfig {
            secret_key_rate_bps: default_rate(),
            grace_factor: default_grace(),
            dh_group: DhGroup::default(),
            qra_seed: 0,
            qkd_chains: Vec::new(),
            channel_chains: BTreeMap::new(),
        }
    }
}

/// Something that went wrong without interrupting service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub at_s: f64,
    pub channel_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
struct ChannelKeys {
    method: KeyMethod,
    interval_s: f64,
    active: Option<KeyId>,
    active_since: f64,
    next_refresh_s: f64,
    refreshes: u64,
    failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelKeyStatus {
    pub channel_id: String,
    pub method: KeyMethod,
    pub active_key_id: Option<KeyId>,
    pub active_since_s: f64,
    pub refresh_interval_s: f64,
    pub next_refresh_s: f64,
    pub refresh_count: u64,
    pub failure_count: u64,
    /// Retired keys of this channel still inside their grace window.
    pub keys_in_grace: usize,
    pub data_per_key_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmsStatus {
    pub now_s: f64,
    pub key_count: usize,
    pub retired_count: usize,
    pub channels: Vec<ChannelKeyStatus>,
    pub chains: Vec<ChainStatus>,
    pub incidents: Vec<Incident>,
}

#[derive(Clone)]
struct KmsState {
    config: KmsConfig,
    now_s: f64,
    keys: BTreeMap<KeyId, KeyRecord>,
    retired: Vec<KeyId>,
    channels: BTreeMap<String, ChannelKeys>,
    chains: BTreeMap<String, QkdChain>,
    channel_chains: BTreeMap<String, String>,
    rng: ChaCha20Rng,
    kem: Box<dyn Kem>,
    incidents: Vec<Incident>,
}

/// The key management service.
///
/// All cache state sits behind one mutex, so each operation is atomic with
/// respect to the others. The active key id of a channel is also published
/// into the shared topology at the moment it changes.
pub struct Kms {
    state: Mutex<KmsState>,
    topology: Arc<RwLock<Topology>>,
}

impl fmt::Debug for Kms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kms").field("now_s", &self.now_s()).finish_non_exhaustive()
    }
}

impl Kms {
    /// Builds the KMS with the simulated KEM, distils [`WARM_UP_S`] of QKD
    /// key and binds a first key to every encrypted channel.
    pub fn new(config: KmsConfig, topology: Arc<RwLock<Topology>>, seed: u64) -> Result<Self, KmsError> {
        let kem = Box::new(SimulatedKem::new(config.qra_seed));
        Self::with_kem(config, topology, seed, kem)
    }

    pub fn with_kem(
        config: KmsConfig,
        topology: Arc<RwLock<Topology>>,
        seed: u64,
        kem: Box<dyn Kem>,
    ) -> Result<Self, KmsError> {
        if !(config.grace_factor >= 0.0) || !(config.secret_key_rate_bps > 0.0) {
            return Err(KmsError::Config("grace_factor must be >= 0 and secret_key_rate_bps > 0".into()));
        }
        config.dh_group.params()?;
        let mut chains = BTreeMap::new();
        for c in &config.qkd_chains {
            let sections = c
                .sections
                .iter()
                .map(|s| QkdSection::new(&s.id, &s.a_node, &s.b_node, s.secret_key_rate_bps))
                .collect();
            let chain = QkdChain::new(&c.id, sections, c.trusted_nodes.clone())?;
            if chains.insert(c.id.clone(), chain).is_some() {
                return Err(KmsError::Config(format!("duplicate chain {}", c.id)));
            }
        }
        let mut channel_chains = config.channel_chains.clone();
        let mut channels = BTreeMap::new();
        {
            let topo = topology.read();
            for (ch, chain) in &channel_chains {
                if topo.channel(ch).is_none() {
                    return Err(KmsError::UnknownChannel(ch.clone()));
                }
                if !chains.contains_key(chain) {
                    return Err(KmsError::UnknownChain(chain.clone()));
                }
            }
            for ch in &topo.channels {
                let Some(method) = KeyMethod::for_security(ch.security_method) else { continue };
                if method == KeyMethod::Qkd && !channel_chains.contains_key(&ch.id) {
                    let id = format!("{}-link", ch.id);
                    let chain = QkdChain::linear(
                        &id,
                        &ch.a_device_port.device,
                        &ch.b_device_port.device,
                        1,
                        config.secret_key_rate_bps,
                    )?;
                    chains.insert(id.clone(), chain);
                    channel_chains.insert(ch.id.clone(), id);
                }
                channels.insert(
                    ch.id.clone(),
                    ChannelKeys {
                        method,
                        interval_s: ch.refresh_interval_s,
                        active: None,
                        active_since: WARM_UP_S,
                        next_refresh_s: WARM_UP_S,
                        refreshes: 0,
                        failures: 0,
                    },
                );
            }
        }
        let kms = Kms {
            state: Mutex::new(KmsState {
                config,
                now_s: 0.0,
                keys: BTreeMap::new(),
                retired: Vec::new(),
                channels,
                chains,
                channel_chains,
                rng: ChaCha20Rng::seed_from_u64(seed),
                kem,
                incidents: Vec::new(),
            }),
            topology,
        };
        kms.advance_to(WARM_UP_S)?;
        Ok(kms)
    }

    /// Independent copy bound to another topology handle, for what-if runs.
    pub fn fork(&self, topology: Arc<RwLock<Topology>>) -> Kms {
        Kms { state: Mutex::new(self.state.lock().clone()), topology }
    }

    pub fn now_s(&self) -> f64 {
        self.state.lock().now_s
    }

    /// Moves the clock to `t_s`, running due refreshes in time order (ties by
    /// channel id), accruing QKD section keys and expiring retired keys.
    pub fn advance_to(&self, t_s: f64) -> Result<(), KmsError> {
        let mut st = self.state.lock();
        if t_s < st.now_s {
            return Err(KmsError::ClockRegression { now: st.now_s, requested: t_s });
        }
        loop {
            let due = st
                .channels
                .iter()
                .filter(|(_, c)| c.next_refresh_s <= t_s)
                .min_by(|a, b| a.1.next_refresh_s.total_cmp(&b.1.next_refresh_s).then(a.0.cmp(b.0)))
                .map(|(id, c)| (id.clone(), c.next_refresh_s));
            let Some((channel, at)) = due else { break };
            st.set_time(at);
            let interval = st.channels[&channel].interval_s;
            st.channels.get_mut(&channel).expect("present").next_refresh_s = at + interval;
            // A failed scheduled refresh is logged as an incident and the
            // previous key stays active.
            let _ = self.refresh_locked(&mut st, &channel);
        }
        st.set_time(t_s);
        Ok(())
    }

    /// Replaces the channel's active key now. On failure the previous key
    /// stays active and an incident is logged.
    pub fn refresh_channel_key(&self, channel_id: &str) -> Result<KeyRecord, KmsError> {
        let mut st = self.state.lock();
        self.refresh_locked(&mut st, channel_id)
    }

    fn refresh_locked(&self, st: &mut KmsState, channel_id: &str) -> Result<KeyRecord, KmsError> {
        let (method, endpoints) = {
            let topo = self.topology.read();
            let ch = topo.channel(channel_id).ok_or_else(|| KmsError::UnknownChannel(channel_id.into()))?;
            (ch.security_method, (ch.a_device_port.device.clone(), ch.b_device_port.device.clone()))
        };
        let key_method = KeyMethod::for_security(method).ok_or_else(|| KmsError::NotEncrypted(channel_id.into()))?;
        let interval = {
            let topo = self.topology.read();
            topo.channel(channel_id).map(|c| c.refresh_interval_s).unwrap_or(0.0)
        };
        let now = st.now_s;
        let entry = st.channels.entry(channel_id.to_string()).or_insert_with(|| ChannelKeys {
            method: key_method,
            interval_s: interval,
            active: None,
            active_since: now,
            next_refresh_s: now + interval,
            refreshes: 0,
            failures: 0,
        });
        entry.method = key_method;

        let provider = match key_method {
            KeyMethod::Dh => Ok(Provider::Dh),
            KeyMethod::Qra => Ok(Provider::Qra),
            _ => st
                .channel_chains
                .get(channel_id)
                .cloned()
                .map(|chain| Provider::Qkd { chain })
                .ok_or_else(|| KmsError::UnknownChain(format!("(none bound to {channel_id})"))),
        };
        let produced = provider.and_then(|p| st.produce(&p));
        let record = match produced {
            Ok(r) => r,
            Err(e) => {
                let ch = st.channels.get_mut(channel_id).expect("inserted above");
                ch.failures += 1;
                log::warn!("key refresh failed on {channel_id} ({key_method}): {e}");
                st.incidents.push(Incident { at_s: now, channel_id: channel_id.into(), message: e.to_string() });
                return Err(e);
            }
        };
        let id = record.key_id;
        let previous = {
            let ch = st.channels.get_mut(channel_id).expect("inserted above");
            let prev = ch.active.replace(id);
            ch.active_since = now;
            ch.refreshes += 1;
            prev
        };
        let rec = st.keys.get_mut(&id).expect("just stored");
        rec.status = KeyStatus::Assigned;
        rec.channel_id = Some(channel_id.to_string());
        let assigned = rec.clone();
        if let Some(prev) = previous {
            if let Some(old) = st.keys.get_mut(&prev) {
                old.status = KeyStatus::Retired;
                old.retired_at = Some(now);
            }
            st.retired.push(prev);
        }
        if let Some(ch) = self.topology.write().channel_mut(channel_id) {
            ch.active_key_id = Some(id);
        }
        log::debug!("channel {channel_id} now uses key {id} ({key_method}); endpoints {} / {}", endpoints.0, endpoints.1);
        Ok(assigned)
    }

    /// Runs one provider and caches the result as an available key.
    pub fn produce_key(&self, provider: &Provider) -> Result<KeyRecord, KmsError> {
        self.state.lock().produce(provider)
    }

    /// Derives a combined key: SHA-256 over constituent materials ordered by
    /// `(method, key_id)`.
    pub fn combine_keys(&self, ids: &[KeyId]) -> Result<KeyRecord, KmsError> {
        if ids.len() < 2 {
            return Err(KmsError::TooFewConstituents(ids.len()));
        }
        let mut st = self.state.lock();
        let mut parts = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = st.keys.get(id).ok_or(KmsError::UnknownKey(*id))?;
            if rec.status == KeyStatus::Retired {
                return Err(KmsError::Retired(*id));
            }
            parts.push((rec.method, rec.key_id, *rec.material().ok_or(KmsError::Expired(*id))?));
        }
        parts.sort_by_key(|(m, k, _)| (*m, *k));
        let mut h = Sha256::new();
        for (_, _, material) in &mut parts {
            h.update(*material);
            material.zeroize();
        }
        let material: [u8; 32] = h.finalize().into();
        Ok(st.store(KeyMethod::Combined, material))
    }

    /// Returns key material to an endpoint of the key's channel.
    pub fn get_key(&self, id: KeyId, requester: &Requester) -> Result<[u8; 32], KmsError> {
        let st = self.state.lock();
        let rec = st.keys.get(&id).ok_or(KmsError::UnknownKey(id))?;
        let unauthorized = || KmsError::Unauthorized { key: id, device: requester.device_id.clone() };
        if rec.channel_id.as_deref() != Some(requester.channel_id.as_str()) {
            return Err(unauthorized());
        }
        {
            let topo = self.topology.read();
            let ch = topo.channel(&requester.channel_id).ok_or_else(unauthorized)?;
            if ch.a_device_port.device != requester.device_id && ch.b_device_port.device != requester.device_id {
                return Err(unauthorized());
            }
        }
        if st.beyond_grace(rec) {
            return Err(KmsError::Expired(id));
        }
        rec.material().copied().ok_or(KmsError::Expired(id))
    }

    /// Active key id of a channel.
    pub fn active_key(&self, channel_id: &str) -> Result<KeyId, KmsError> {
        let st = self.state.lock();
        let ch = st.channels.get(channel_id).ok_or_else(|| KmsError::UnknownChannel(channel_id.into()))?;
        ch.active.ok_or_else(|| KmsError::UnknownChannel(channel_id.into()))
    }

    /// Verifies the channel holds an active key of the method its security
    /// level requires, refreshing once if it does not.
    pub fn ensure_channel_key(&self, channel_id: &str) -> Result<KeyId, KmsError> {
        let mut st = self.state.lock();
        let method = {
            let topo = self.topology.read();
            let ch = topo.channel(channel_id).ok_or_else(|| KmsError::UnknownChannel(channel_id.into()))?;
            KeyMethod::for_security(ch.security_method).ok_or_else(|| KmsError::NotEncrypted(channel_id.into()))?
        };
        let current = st
            .channels
            .get(channel_id)
            .and_then(|c| c.active)
            .and_then(|id| st.keys.get(&id))
            .filter(|r| r.method == method && r.material().is_some())
            .map(|r| r.key_id);
        match current {
            Some(id) => Ok(id),
            None => self.refresh_locked(&mut st, channel_id).map(|r| r.key_id),
        }
    }

    /// Metadata of one cached key.
    pub fn key_info(&self, id: KeyId) -> Option<KeyRecord> {
        self.state.lock().keys.get(&id).cloned()
    }

    /// Ids retired so far, in retirement order.
    pub fn retired_ids(&self) -> Vec<KeyId> {
        self.state.lock().retired.clone()
    }

    pub fn channel_status(&self, channel_id: &str) -> Result<ChannelKeyStatus, KmsError> {
        let st = self.state.lock();
        match st.channels.get(channel_id) {
            Some(ch) => Ok(st.channel_status(channel_id, ch)),
            None if self.topology.read().channel(channel_id).is_some() => Err(KmsError::NotEncrypted(channel_id.into())),
            None => Err(KmsError::UnknownChannel(channel_id.into())),
        }
    }

    pub fn status(&self) -> KmsStatus {
        let st = self.state.lock();
        KmsStatus {
            now_s: st.now_s,
            key_count: st.keys.len(),
            retired_count: st.retired.len(),
            channels: st.channels.iter().map(|(id, ch)| st.channel_status(id, ch)).collect(),
            chains: st.chains.values().map(ChainStatus::from).collect(),
            incidents: st.incidents.clone(),
        }
    }

    /// Runs `f` on a QKD chain (tests, section draining).
    pub fn with_chain<R>(&self, chain_id: &str, f: impl FnOnce(&mut QkdChain) -> R) -> Result<R, KmsError> {
        let mut st = self.state.lock();
        st.chains.get_mut(chain_id).map(f).ok_or_else(|| KmsError::UnknownChain(chain_id.into()))
    }

    pub fn chain_for_channel(&self, channel_id: &str) -> Option<String> {
        self.state.lock().channel_chains.get(channel_id).cloned()
    }

    pub fn grace_window_s(&self, channel_id: &str) -> Option<f64> {
        let st = self.state.lock();
        st.channels.get(channel_id).map(|c| c.interval_s * st.config.grace_factor)
    }
}

impl KmsState {
    fn set_time(&mut self, t: f64) {
        self.now_s = t;
        let KmsState { chains, rng, .. } = self;
        for chain in chains.values_mut() {
            chain.accrue(t, rng);
        }
        let expired: Vec<KeyId> = self
            .keys
            .values()
            .filter(|r| r.material().is_some() && self.beyond_grace(r))
            .map(|r| r.key_id)
            .collect();
        for id in expired {
            self.keys.get_mut(&id).expect("listed").zeroize();
        }
    }

    fn beyond_grace(&self, rec: &KeyRecord) -> bool {
        let Some(retired_at) = rec.retired_at else { return false };
        let interval = rec
            .channel_id
            .as_ref()
            .and_then(|c| self.channels.get(c))
            .map(|c| c.interval_s)
            .unwrap_or(0.0);
        self.now_s > retired_at + self.config.grace_factor * interval
    }

    fn fresh_id(&mut self) -> KeyId {
        loop {
            let mut b = [0u8; 16];
            self.rng.fill_bytes(&mut b);
            let id = KeyId::from_bytes(b);
            if id.0 != 0 && !self.keys.contains_key(&id) {
                return id;
            }
        }
    }

    fn store(&mut self, method: KeyMethod, material: [u8; 32]) -> KeyRecord {
        let key_id = self.fresh_id();
        let rec = KeyRecord {
            key_id,
            method,
            material,
            zeroized: false,
            created_at: self.now_s,
            channel_id: None,
            status: KeyStatus::Available,
            retired_at: None,
        };
        self.keys.insert(key_id, rec.clone());
        log::info!("stored key {key_id} method {method}");
        rec
    }

    fn produce(&mut self, provider: &Provider) -> Result<KeyRecord, KmsError> {
        let material = match provider {
            Provider::Dh => {
                let t = dh_exchange(&self.config.dh_group, &mut self.rng)?;
                if t.key_a != t.key_b {
                    return Err(KmsError::Provider { method: "dh".into(), reason: "endpoints disagree".into() });
                }
                t.key_a
            }
            Provider::Qra => {
                let (sender, receiver) = kem_exchange(self.kem.as_mut())?;
                if sender != receiver {
                    return Err(KmsError::Provider { method: "qra".into(), reason: "endpoints disagree".into() });
                }
                sender
            }
            Provider::Qkd { chain } => {
                let mut end_key = qrng_key(&mut self.rng);
                let chain = self.chains.get_mut(chain).ok_or_else(|| KmsError::UnknownChain(chain.clone()))?;
                let delivered = chain.relay_key(&end_key);
                let delivered = match delivered {
                    Ok(d) => d,
                    Err(e) => {
                        end_key.zeroize();
                        return Err(e.into());
                    }
                };
                let agree = delivered.material == end_key;
                end_key.zeroize();
                if !agree {
                    return Err(KmsError::Provider { method: "qkd".into(), reason: "relay mismatch".into() });
                }
                delivered.material
            }
        };
        Ok(self.store(provider.method(), material))
    }

    fn channel_status(&self, id: &str, ch: &ChannelKeys) -> ChannelKeyStatus {
        let keys_in_grace = self
            .keys
            .values()
            .filter(|r| r.channel_id.as_deref() == Some(id) && r.status == KeyStatus::Retired && r.material().is_some())
            .count();
        ChannelKeyStatus {
            channel_id: id.to_string(),
            method: ch.method,
            active_key_id: ch.active,
            active_since_s: ch.active_since,
            refresh_interval_s: ch.interval_s,
            next_refresh_s: ch.next_refresh_s,
            refresh_count: ch.refreshes,
            failure_count: ch.failures,
            keys_in_grace,
            data_per_key_gb: f64::from(crate::topology::LINE_RATE_GBPS) * ch.interval_s,
        }
    }
}
