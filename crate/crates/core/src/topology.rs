// SPDX-License-Identifier: Apache-2.0

//! Network data model.
//!
//! A [`Topology`] is a flat document of sites, devices, 100G line channels and
//! access links. Channels carry ten 10G client ports each and share one
//! security method (and one active key) across all of them. Access links are
//! the adjacencies that are not carried on the DWDM system, such as
//! cell-to-aggregation fibre.
//!
//! Besides the static description, a topology carries the mutable allocation
//! state the orchestrator works with: client port reservations, compute units
//! held per slice and bandwidth held on access links. [`snapshot`] and [`diff`]
//! operate over all of it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::kms::KeyId;

/// Client ports multiplexed onto one 100G line channel.
pub const CLIENT_PORTS_PER_CHANNEL: usize = 10;
/// Rate of a single client port.
pub const CLIENT_PORT_RATE_GBPS: f64 = 10.0;
/// Line rate of a DWDM channel.
pub const LINE_RATE_GBPS: u32 = 100;
/// Latency added by an encryption card: 4 us in the card plus 11 us in the
/// CFP module applying forward error correction.
pub const ENCRYPTION_CARD_LATENCY_US: f64 = 15.0;
/// Default key refresh interval of a channel.
pub const DEFAULT_REFRESH_INTERVAL_S: f64 = 3.0;

static LINEAGE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Cell,
    Aggregation,
    Metro,
    Core,
}

impl SiteKind {
    /// Compute is hosted near the edge, at aggregation and metro sites only.
    pub fn may_host_compute(self) -> bool {
        matches!(self, SiteKind::Aggregation | SiteKind::Metro)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub kind: SiteKind,
    #[serde(default)]
    pub device_ids: Vec<String>,
    #[serde(default)]
    pub compute_capacity_units: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    OpticalSwitch,
    EthernetSwitch,
    EncryptionCard,
    OtnMux,
}

/// Slash-separated path to value map; the simulated YANG datastore of a device.
pub type ConfigTree = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: String,
    pub site_id: String,
    pub kind: DeviceKind,
    #[serde(default)]
    pub config_tree: ConfigTree,
    pub latency_model_id: String,
}

/// Key-exchange method protecting a link. `None` links carry plaintext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityMethod {
    None,
    DhAes,
    QraAes,
    QkdAes,
}

impl SecurityMethod {
    pub fn is_encrypted(self) -> bool {
        self != SecurityMethod::None
    }

    /// Position in the order none < dh_aes < qra_aes < qkd_aes.
    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub const ALL: [SecurityMethod; 4] =
        [SecurityMethod::None, SecurityMethod::DhAes, SecurityMethod::QraAes, SecurityMethod::QkdAes];

    pub fn as_str(self) -> &'static str {
        match self {
            SecurityMethod::None => "none",
            SecurityMethod::DhAes => "dh_aes",
            SecurityMethod::QraAes => "qra_aes",
            SecurityMethod::QkdAes => "qkd_aes",
        }
    }
}

impl fmt::Display for SecurityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Role of a wavelength on the line system. Only `data` channels carry client
/// traffic; the others are recorded as metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavelengthRole {
    Data,
    Management,
    QkdDiscussion,
    Quantum,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub device: String,
    pub port: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortState {
    Free,
    Reserved,
    InUse,
}

impl PortState {
    pub fn as_str(self) -> &'static str {
        match self {
            PortState::Free => "free",
            PortState::Reserved => "reserved",
            PortState::InUse => "in_use",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPort {
    pub index: u8,
    pub state: PortState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner_slice_id: Option<String>,
}

impl ClientPort {
    pub fn free(index: u8) -> Self {
        ClientPort { index, state: PortState::Free, owner_slice_id: None }
    }
}

fn default_client_ports() -> Vec<ClientPort> {
    (0..CLIENT_PORTS_PER_CHANNEL as u8).map(ClientPort::free).collect()
}

fn default_line_rate() -> u32 {
    LINE_RATE_GBPS
}

fn default_refresh_interval() -> f64 {
    DEFAULT_REFRESH_INTERVAL_S
}

fn default_wavelength_role() -> WavelengthRole {
    WavelengthRole::Data
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: String,
    pub a_device_port: Endpoint,
    pub b_device_port: Endpoint,
    #[serde(default = "default_line_rate")]
    pub line_rate_gbps: u32,
    #[serde(default = "default_client_ports")]
    pub client_ports: Vec<ClientPort>,
    pub security_method: SecurityMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_key_id: Option<KeyId>,
    #[serde(default = "default_refresh_interval")]
    pub refresh_interval_s: f64,
    pub base_latency_us: f64,
    #[serde(default = "default_wavelength_role")]
    pub wavelength_role: WavelengthRole,
}

impl Channel {
    /// One-way latency including the encryption card when the channel is
    /// encrypted.
    pub fn effective_latency_us(&self) -> f64 {
        if self.security_method.is_encrypted() {
            self.base_latency_us + ENCRYPTION_CARD_LATENCY_US
        } else {
            self.base_latency_us
        }
    }

    pub fn lowest_free_port(&self) -> Option<u8> {
        self.client_ports
            .iter()
            .find(|p| p.state == PortState::Free)
            .map(|p| p.index)
    }

    pub fn free_port_count(&self) -> usize {
        self.client_ports.iter().filter(|p| p.state == PortState::Free).count()
    }

    pub fn port(&self, index: u8) -> Option<&ClientPort> {
        self.client_ports.get(index as usize)
    }

    pub fn port_mut(&mut self, index: u8) -> Option<&mut ClientPort> {
        self.client_ports.get_mut(index as usize)
    }

    /// Data carried under one key at full line rate, in gigabits.
    pub fn data_per_key_gb(&self) -> f64 {
        f64::from(self.line_rate_gbps) * self.refresh_interval_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessLink {
    pub id: String,
    pub a_site: String,
    pub b_site: String,
    pub capacity_gbps: f64,
    pub security_method: SecurityMethod,
    pub latency_us: f64,
}

impl AccessLink {
    /// `latency_us` plus the encryptor latency when the link is encrypted.
    /// Keys for encrypted access links are managed outside the KMS.
    pub fn effective_latency_us(&self) -> f64 {
        if self.security_method.is_encrypted() {
            self.latency_us + ENCRYPTION_CARD_LATENCY_US
        } else {
            self.latency_us
        }
    }
}

/// The whole network document plus its allocation state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub sites: Vec<Site>,
    pub devices: Vec<Device>,
    pub channels: Vec<Channel>,
    #[serde(default)]
    pub access_links: Vec<AccessLink>,
    /// site id -> slice id -> units held.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub compute_allocations: BTreeMap<String, BTreeMap<String, u32>>,
    /// access link id -> owner (`slice/role`) -> Gbps held.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub link_allocations: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(skip)]
    lineage: u64,
}

impl PartialEq for Topology {
    fn eq(&self, other: &Self) -> bool {
        self.sites == other.sites
            && self.devices == other.devices
            && self.channels == other.channels
            && self.access_links == other.access_links
            && self.compute_allocations == other.compute_allocations
            && self.link_allocations == other.link_allocations
    }
}

/// A hop candidate: either a DWDM channel or an access link.
#[derive(Debug, Clone, Copy)]
pub enum LinkRef<'a> {
    Channel(&'a Channel),
    Access(&'a AccessLink),
}

impl<'a> LinkRef<'a> {
    pub fn id(&self) -> &'a str {
        match self {
            LinkRef::Channel(c) => &c.id,
            LinkRef::Access(l) => &l.id,
        }
    }

    pub fn security_method(&self) -> SecurityMethod {
        match self {
            LinkRef::Channel(c) => c.security_method,
            LinkRef::Access(l) => l.security_method,
        }
    }

    pub fn latency_us(&self) -> f64 {
        match self {
            LinkRef::Channel(c) => c.effective_latency_us(),
            LinkRef::Access(l) => l.effective_latency_us(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TopologyError {
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("no sites")]
    NoSites,
    #[error("{path}: unknown {kind} id {id:?}")]
    Dangling { path: String, kind: &'static str, id: String },
    #[error("{path}: duplicate id {id:?}")]
    Duplicate { path: String, id: String },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("snapshot belongs to a different topology")]
    ForeignSnapshot,
    #[error("cannot read topology file: {0}")]
    Io(String),
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> TopologyError {
    TopologyError::Invalid { path: path.into(), reason: reason.into() }
}

/// Parses and validates a topology document.
pub fn load_topology(document: &str) -> Result<Topology, TopologyError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let mut topology: Topology = serde_path_to_error::deserialize(de).map_err(|e| {
        TopologyError::Schema { path: e.path().to_string(), message: e.inner().to_string() }
    })?;
    topology.validate()?;
    if let Some(site) = topology.compute_allocations.keys().next() {
        return Err(invalid(
            format!("compute_allocations.{site}"),
            "a topology document must not carry allocations",
        ));
    }
    if let Some(link) = topology.link_allocations.keys().next() {
        return Err(invalid(
            format!("link_allocations.{link}"),
            "a topology document must not carry allocations",
        ));
    }
    for (ci, ch) in topology.channels.iter().enumerate() {
        if let Some(p) = ch.client_ports.iter().find(|p| p.state != PortState::Free) {
            return Err(invalid(
                format!("channels[{ci}].client_ports[{}]", p.index),
                "client ports must be free in a topology document",
            ));
        }
        if ch.active_key_id.is_some() {
            return Err(invalid(
                format!("channels[{ci}].active_key_id"),
                "keys are bound at runtime, not in the document",
            ));
        }
    }
    topology.lineage = LINEAGE.fetch_add(1, Ordering::Relaxed);
    Ok(topology)
}

pub fn load_topology_file(path: impl AsRef<Path>) -> Result<Topology, TopologyError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| TopologyError::Io(format!("{}: {e}", path.as_ref().display())))?;
    load_topology(&text)
}

fn check_unique<'a>(
    ids: impl Iterator<Item = (String, &'a str)>,
    seen: &mut BTreeSet<&'a str>,
) -> Result<(), TopologyError> {
    for (path, id) in ids {
        if id.is_empty() {
            return Err(invalid(path, "empty id"));
        }
        if !seen.insert(id) {
            return Err(TopologyError::Duplicate { path, id: id.to_string() });
        }
    }
    Ok(())
}

pub(crate) fn valid_config_path(path: &str) -> bool {
    !path.is_empty() && path.split('/').all(|seg| !seg.is_empty())
}

impl Topology {
    /// Checks every structural and referential invariant.
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.sites.is_empty() {
            return Err(TopologyError::NoSites);
        }
        check_unique(
            self.sites.iter().enumerate().map(|(i, s)| (format!("sites[{i}].id"), s.id.as_str())),
            &mut BTreeSet::new(),
        )?;
        check_unique(
            self.devices.iter().enumerate().map(|(i, d)| (format!("devices[{i}].id"), d.id.as_str())),
            &mut BTreeSet::new(),
        )?;
        // Channels and access links share one id space: both appear as hops.
        let mut link_ids = BTreeSet::new();
        check_unique(
            self.channels.iter().enumerate().map(|(i, c)| (format!("channels[{i}].id"), c.id.as_str())),
            &mut link_ids,
        )?;
        check_unique(
            self.access_links
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("access_links[{i}].id"), l.id.as_str())),
            &mut link_ids,
        )?;

        for (i, site) in self.sites.iter().enumerate() {
            if site.compute_capacity_units > 0 && !site.kind.may_host_compute() {
                return Err(invalid(
                    format!("sites[{i}].compute_capacity_units"),
                    format!("{:?} sites cannot host compute", site.kind),
                ));
            }
            for (j, dev_id) in site.device_ids.iter().enumerate() {
                let path = format!("sites[{i}].device_ids[{j}]");
                let dev = self.device(dev_id).ok_or_else(|| TopologyError::Dangling {
                    path: path.clone(),
                    kind: "device",
                    id: dev_id.clone(),
                })?;
                if dev.site_id != site.id {
                    return Err(invalid(path, format!("device {dev_id} belongs to site {}", dev.site_id)));
                }
            }
        }

        for (i, dev) in self.devices.iter().enumerate() {
            let site = self.site(&dev.site_id).ok_or_else(|| TopologyError::Dangling {
                path: format!("devices[{i}].site_id"),
                kind: "site",
                id: dev.site_id.clone(),
            })?;
            if !site.device_ids.contains(&dev.id) {
                return Err(invalid(
                    format!("devices[{i}]"),
                    format!("device {} is not listed by site {}", dev.id, site.id),
                ));
            }
            if dev.latency_model_id.is_empty() {
                return Err(invalid(format!("devices[{i}].latency_model_id"), "empty"));
            }
            if let Some(p) = dev.config_tree.keys().find(|p| !valid_config_path(p)) {
                return Err(invalid(
                    format!("devices[{i}].config_tree"),
                    format!("malformed path {p:?}"),
                ));
            }
        }

        for (i, ch) in self.channels.iter().enumerate() {
            let mut sites = Vec::with_capacity(2);
            for (field, ep) in [("a_device_port", &ch.a_device_port), ("b_device_port", &ch.b_device_port)] {
                let dev = self.device(&ep.device).ok_or_else(|| TopologyError::Dangling {
                    path: format!("channels[{i}].{field}.device"),
                    kind: "device",
                    id: ep.device.clone(),
                })?;
                if dev.kind != DeviceKind::EncryptionCard {
                    return Err(invalid(
                        format!("channels[{i}].{field}.device"),
                        format!("channel must terminate on an encryption card, {} is {:?}", dev.id, dev.kind),
                    ));
                }
                sites.push(dev.site_id.as_str());
            }
            if sites[0] == sites[1] {
                return Err(invalid(format!("channels[{i}]"), "both ends at the same site"));
            }
            if ch.line_rate_gbps != LINE_RATE_GBPS {
                return Err(invalid(
                    format!("channels[{i}].line_rate_gbps"),
                    format!("expected {LINE_RATE_GBPS}"),
                ));
            }
            if ch.client_ports.len() != CLIENT_PORTS_PER_CHANNEL {
                return Err(invalid(
                    format!("channels[{i}].client_ports"),
                    format!("expected {CLIENT_PORTS_PER_CHANNEL} client ports, found {}", ch.client_ports.len()),
                ));
            }
            for (j, port) in ch.client_ports.iter().enumerate() {
                if port.index as usize != j {
                    return Err(invalid(format!("channels[{i}].client_ports[{j}].index"), "out of order"));
                }
                if (port.state == PortState::Free) != port.owner_slice_id.is_none() {
                    return Err(invalid(
                        format!("channels[{i}].client_ports[{j}]"),
                        "a port has an owner exactly when it is not free",
                    ));
                }
            }
            if !(ch.refresh_interval_s > 0.0) {
                return Err(invalid(format!("channels[{i}].refresh_interval_s"), "must be positive"));
            }
            if !(ch.base_latency_us >= 0.0) {
                return Err(invalid(format!("channels[{i}].base_latency_us"), "must be non-negative"));
            }
        }

        for (i, link) in self.access_links.iter().enumerate() {
            for (field, site) in [("a_site", &link.a_site), ("b_site", &link.b_site)] {
                if self.site(site).is_none() {
                    return Err(TopologyError::Dangling {
                        path: format!("access_links[{i}].{field}"),
                        kind: "site",
                        id: site.clone(),
                    });
                }
            }
            if link.a_site == link.b_site {
                return Err(invalid(format!("access_links[{i}]"), "a_site equals b_site"));
            }
            if !(link.capacity_gbps > 0.0) {
                return Err(invalid(format!("access_links[{i}].capacity_gbps"), "must be positive"));
            }
            if !(link.latency_us >= 0.0) {
                return Err(invalid(format!("access_links[{i}].latency_us"), "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn site(&self, id: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.id == id)
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn device_mut(&mut self, id: &str) -> Option<&mut Device> {
        self.devices.iter_mut().find(|d| d.id == id)
    }

    pub fn channel(&self, id: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn channel_mut(&mut self, id: &str) -> Option<&mut Channel> {
        self.channels.iter_mut().find(|c| c.id == id)
    }

    pub fn access_link(&self, id: &str) -> Option<&AccessLink> {
        self.access_links.iter().find(|l| l.id == id)
    }

    pub fn link(&self, id: &str) -> Option<LinkRef<'_>> {
        self.channel(id)
            .map(LinkRef::Channel)
            .or_else(|| self.access_link(id).map(LinkRef::Access))
    }

    pub fn links(&self) -> impl Iterator<Item = LinkRef<'_>> {
        self.channels
            .iter()
            .map(LinkRef::Channel)
            .chain(self.access_links.iter().map(LinkRef::Access))
    }

    /// Site ids at the two ends of a link.
    pub fn link_sites<'a>(&'a self, link: LinkRef<'a>) -> Option<(&'a str, &'a str)> {
        match link {
            LinkRef::Channel(c) => {
                let a = self.device(&c.a_device_port.device)?;
                let b = self.device(&c.b_device_port.device)?;
                Some((a.site_id.as_str(), b.site_id.as_str()))
            }
            LinkRef::Access(l) => Some((l.a_site.as_str(), l.b_site.as_str())),
        }
    }

    /// First device of `kind` hosted at `site_id`.
    pub fn site_device(&self, site_id: &str, kind: DeviceKind) -> Option<&Device> {
        let site = self.site(site_id)?;
        site.device_ids
            .iter()
            .filter_map(|id| self.device(id))
            .find(|d| d.kind == kind)
    }

    pub fn total_client_ports(&self) -> usize {
        self.channels.iter().map(|c| c.client_ports.len()).sum()
    }

    pub fn free_compute_units(&self, site_id: &str) -> Option<u32> {
        let site = self.site(site_id)?;
        let used: u32 = self
            .compute_allocations
            .get(site_id)
            .map(|m| m.values().sum())
            .unwrap_or(0);
        Some(site.compute_capacity_units.saturating_sub(used))
    }

    pub fn free_link_capacity_gbps(&self, link_id: &str) -> Option<f64> {
        let link = self.access_link(link_id)?;
        let used: f64 = self
            .link_allocations
            .get(link_id)
            .map(|m| m.values().sum())
            .unwrap_or(0.0);
        Some(link.capacity_gbps - used)
    }

    /// Process-unique identity shared by every clone of one loaded document.
    pub fn lineage(&self) -> u64 {
        self.lineage
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    /// Flattens all mutable state into `(entity, path) -> value`.
    ///
    /// Key rotation is owned by the key management system and runs outside the
    /// configuration lock, so `active_key_id` is not part of this view.
    pub fn state_entries(&self) -> BTreeMap<(String, String), String> {
        let mut out = BTreeMap::new();
        for dev in &self.devices {
            for (path, value) in &dev.config_tree {
                out.insert((dev.id.clone(), path.clone()), value.clone());
            }
        }
        for ch in &self.channels {
            out.insert((ch.id.clone(), "security_method".into()), ch.security_method.to_string());
            for port in &ch.client_ports {
                out.insert(
                    (ch.id.clone(), format!("client_ports/{}/state", port.index)),
                    port.state.as_str().to_string(),
                );
                if let Some(owner) = &port.owner_slice_id {
                    out.insert((ch.id.clone(), format!("client_ports/{}/owner", port.index)), owner.clone());
                }
            }
        }
        for link in &self.access_links {
            out.insert((link.id.clone(), "security_method".into()), link.security_method.to_string());
        }
        for (site, holders) in &self.compute_allocations {
            for (slice, units) in holders {
                out.insert((site.clone(), format!("compute/{slice}")), units.to_string());
            }
        }
        for (link, holders) in &self.link_allocations {
            for (owner, gbps) in holders {
                out.insert((link.clone(), format!("allocations/{owner}")), format!("{gbps}"));
            }
        }
        out
    }
}

/// Immutable deep copy of a topology's configuration and allocation state.
#[derive(Debug, Clone)]
pub struct ConfigSnapshot {
    state: Topology,
}

impl ConfigSnapshot {
    pub fn topology(&self) -> &Topology {
        &self.state
    }

    pub fn lineage(&self) -> u64 {
        self.state.lineage
    }

    pub fn free_port_count(&self) -> usize {
        self.state.channels.iter().map(Channel::free_port_count).sum()
    }

    /// Value recorded for a device config path.
    pub fn config_value(&self, device_id: &str, path: &str) -> Option<&str> {
        self.state
            .device(device_id)
            .and_then(|d| d.config_tree.get(path))
            .map(String::as_str)
    }
}

pub fn snapshot(topology: &Topology) -> ConfigSnapshot {
    ConfigSnapshot { state: topology.clone() }
}

/// One differing entry between a snapshot and a live topology. `entity` is a
/// device id for configuration paths, or the channel, link or site id owning
/// an allocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub entity: String,
    pub path: String,
    pub old: Option<String>,
    pub new: Option<String>,
}

pub fn diff(before: &ConfigSnapshot, after: &Topology) -> Result<Vec<ChangeRecord>, TopologyError> {
    if before.lineage() != after.lineage() {
        return Err(TopologyError::ForeignSnapshot);
    }
    let old = before.state.state_entries();
    let new = after.state_entries();
    let keys: BTreeSet<&(String, String)> = old.keys().chain(new.keys()).collect();
    Ok(keys
        .into_iter()
        .filter_map(|key| {
            let (o, n) = (old.get(key), new.get(key));
            (o != n).then(|| ChangeRecord {
                entity: key.0.clone(),
                path: key.1.clone(),
                old: o.cloned(),
                new: n.cloned(),
            })
        })
        .collect())
}
