// SPDX-License-Identifier: Apache-2.0

//! The shipped testbed, use-case descriptors and default configuration,
//! embedded at build time.

use crate::kms::KmsConfig;
use crate::orchestrator::SliceDescriptor;
use crate::topology::{load_topology, Topology};

pub const TESTBED_TOPOLOGY_JSON: &str = include_str!("../../../data/testbed.topo.json");
pub const USECASE1_SLICE_JSON: &str = include_str!("../../../data/usecase1.slice.json");
pub const USECASE2_SLICE_JSON: &str = include_str!("../../../data/usecase2.slice.json");
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../data/default.config.json");

pub fn testbed_topology() -> Topology {
    load_topology(TESTBED_TOPOLOGY_JSON).expect("shipped topology is valid")
}

pub fn usecase1() -> SliceDescriptor {
    SliceDescriptor::from_json(USECASE1_SLICE_JSON).expect("shipped descriptor is valid")
}

pub fn usecase2() -> SliceDescriptor {
    SliceDescriptor::from_json(USECASE2_SLICE_JSON).expect("shipped descriptor is valid")
}

/// Descriptor of use case `n` (1 or 2).
pub fn usecase(n: u8) -> Option<SliceDescriptor> {
    match n {
        1 => Some(usecase1()),
        2 => Some(usecase2()),
        _ => None,
    }
}

pub fn default_kms_config() -> KmsConfig {
    crate::config::SimConfig::calibrated_default().kms
}

/// Calibrated config that never sleeps and uses a 64-bit DH group. For
/// tests and batch studies only: the small group offers no security.
pub fn fast_config() -> crate::config::SimConfig {
    let mut config = crate::config::SimConfig::calibrated_default();
    config.time_scale = 0.0;
    config.kms.dh_group = crate::kms::DhGroup::Custom { prime_hex: "7fffffffffffee27".into(), generator: 4 };
    config
}

/// Parameters for [`random_topology`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomTopologySpec {
    pub sites: usize,
    pub links: usize,
    /// Probability that a link is an access link rather than a DWDM channel.
    pub access_fraction: f64,
    /// Probability that a channel is pre-loaded with other traffic (some or
    /// all ports taken).
    pub busy_fraction: f64,
}

impl RandomTopologySpec {
    pub fn new(sites: usize, links: usize) -> Self {
        RandomTopologySpec { sites, links, access_fraction: 0.3, busy_fraction: 0.2 }
    }
}

/// Owner recorded on ports and link bandwidth pre-loaded by
/// [`random_topology`].
pub const BACKGROUND_OWNER: &str = "background";

/// A random valid topology for property tests.
///
/// Site 0 is a core site, site 1 a metro site and site 2 a cell site (when
/// that many sites exist); the rest have random kinds. Links join random
/// distinct site pairs, parallel links included, with random security
/// methods and latencies in whole nanoseconds. One channel in ten is a
/// management wavelength, which never carries traffic.
pub fn random_topology(rng: &mut impl rand::Rng, spec: RandomTopologySpec) -> Topology {
    use crate::topology::{PortState, SecurityMethod, SiteKind};
    use serde_json::{json, Value};

    assert!(spec.sites >= 2, "need at least two sites");
    let kinds = [SiteKind::Cell, SiteKind::Aggregation, SiteKind::Metro, SiteKind::Core];
    let mut sites: Vec<Value> = Vec::new();
    let mut devices: Vec<Value> = Vec::new();
    let mut site_devices: Vec<Vec<String>> = Vec::new();
    let mut site_ids = Vec::new();
    for i in 0..spec.sites {
        let kind = match i {
            0 => SiteKind::Core,
            1 => SiteKind::Metro,
            2 => SiteKind::Cell,
            _ => kinds[rng.random_range(0..kinds.len())],
        };
        let kind_name = serde_json::to_value(kind).expect("kind serializes");
        let id = format!("{}-{i}", kind_name.as_str().expect("string"));
        let mut devs = vec![format!("{id}-eth")];
        devices.push(json!({"id": devs[0], "site_id": id, "kind": "ethernet_switch", "latency_model_id": "ethernet_switch"}));
        if rng.random_bool(0.5) {
            devs.push(format!("{id}-oxc"));
            devices.push(json!({"id": devs[1], "site_id": id, "kind": "optical_switch", "latency_model_id": "optical_switch"}));
        }
        let compute = if kind.may_host_compute() { rng.random_range(0..=8u32) } else { 0 };
        sites.push(json!({"id": id, "kind": kind, "compute_capacity_units": compute}));
        site_devices.push(devs);
        site_ids.push(id);
    }
    let mut channels = Vec::new();
    let mut access = Vec::new();
    for l in 0..spec.links {
        let a = rng.random_range(0..spec.sites);
        let b = (a + rng.random_range(1..spec.sites)) % spec.sites;
        let security = SecurityMethod::ALL[rng.random_range(0..4)];
        let latency_us = f64::from(rng.random_range(10_000..2_000_000u32)) / 1000.0;
        if rng.random_bool(spec.access_fraction) {
            let capacity = [1.0, 5.0, 10.0, 40.0][rng.random_range(0..4)];
            access.push(json!({
                "id": format!("al-{l}"), "a_site": site_ids[a], "b_site": site_ids[b],
                "capacity_gbps": capacity, "security_method": security, "latency_us": latency_us,
            }));
        } else {
            let id = format!("ch-{l}");
            let mut ends = Vec::new();
            for s in [a, b] {
                let card = format!("{}-card-{id}", site_ids[s]);
                devices.push(json!({"id": card, "site_id": site_ids[s], "kind": "encryption_card", "latency_model_id": "encryption_card"}));
                site_devices[s].push(card.clone());
                ends.push(json!({"device": card, "port": "line"}));
            }
            let role = if rng.random_bool(0.1) { "management" } else { "data" };
            channels.push(json!({
                "id": id, "a_device_port": ends[0], "b_device_port": ends[1],
                "security_method": security, "base_latency_us": latency_us, "wavelength_role": role,
            }));
        }
    }
    for (site, devs) in sites.iter_mut().zip(site_devices) {
        site["device_ids"] = json!(devs);
    }
    let doc = json!({"sites": sites, "devices": devices, "channels": channels, "access_links": access});
    let mut topo = load_topology(&doc.to_string()).expect("generated topology is valid");

    for ch in &mut topo.channels {
        if rng.random_bool(spec.busy_fraction) {
            let taken = if rng.random_bool(0.5) { ch.client_ports.len() } else { rng.random_range(1..ch.client_ports.len()) };
            for p in ch.client_ports.iter_mut().take(taken) {
                p.state = PortState::InUse;
                p.owner_slice_id = Some(BACKGROUND_OWNER.into());
            }
        }
    }
    for l in &topo.access_links {
        if rng.random_bool(spec.busy_fraction) {
            let held = l.capacity_gbps * rng.random_range(0.5..1.0);
            topo.link_allocations.entry(l.id.clone()).or_default().insert(BACKGROUND_OWNER.into(), held);
        }
    }
    topo
}
