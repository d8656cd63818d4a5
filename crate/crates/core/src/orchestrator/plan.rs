// SPDX-License-Identifier: Apache-2.0

//! Turns computed paths into the ordered device steps of a provision.
//!
//! Within a connection, devices are visited from source to destination in the
//! order a frame meets them: the Ethernet switch at the source site, then for
//! each hop the encryption card and optical switch on the near side, the
//! optical switch and card on the far side, and the far site's Ethernet
//! switch. Access-link hops touch only the Ethernet switches. After a
//! connection's device steps comes one key check per encrypted channel.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device_sim::ConfigCommand;
use crate::pce::{PathSolution, Role};
use crate::topology::{DeviceKind, LinkRef, Topology};

/// Entity name used for key-management steps.
pub const KMS_ENTITY: &str = "kms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepAction {
    /// One configuration transaction on one device.
    Configure { commands: Vec<ConfigCommand> },
    /// Confirm the channel has an active key of its method.
    VerifyKey { channel_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub entity: String,
    pub role: Role,
    pub action: StepAction,
}

impl PlanStep {
    pub fn is_device_step(&self) -> bool {
        matches!(self.action, StepAction::Configure { .. })
    }

    pub fn commands(&self) -> &[ConfigCommand] {
        match &self.action {
            StepAction::Configure { commands } => commands,
            StepAction::VerifyKey { .. } => &[],
        }
    }
}

fn hop_label(hop: &str, path: &PathSolution) -> String {
    match path.reserved_ports.iter().find(|p| p.channel_id == hop) {
        Some(p) => format!("{hop}/{}", p.port),
        None => hop.to_string(),
    }
}

fn ethernet_step(slice: &str, role: Role, device: &str, ingress: &str, egress: &str, bw: f64) -> PlanStep {
    let base = format!("flows/{slice}/{role}");
    PlanStep {
        entity: device.to_string(),
        role,
        action: StepAction::Configure {
            commands: vec![
                ConfigCommand::set(device, format!("{base}/ingress"), ingress),
                ConfigCommand::set(device, format!("{base}/egress"), egress),
                ConfigCommand::set(device, format!("{base}/bandwidth-gbps"), format!("{bw}")),
            ],
        },
    }
}

fn card_step(slice: &str, role: Role, device: &str, port: u8, bw: f64) -> PlanStep {
    let base = format!("client-ports/{port}");
    PlanStep {
        entity: device.to_string(),
        role,
        action: StepAction::Configure {
            commands: vec![
                ConfigCommand::set(device, format!("{base}/admin-state"), "up"),
                ConfigCommand::set(device, format!("{base}/service"), format!("{slice}/{role}")),
                ConfigCommand::set(device, format!("{base}/bandwidth-gbps"), format!("{bw}")),
            ],
        },
    }
}

fn oxc_step(slice: &str, role: Role, device: &str, channel: &str, port: u8) -> PlanStep {
    PlanStep {
        entity: device.to_string(),
        role,
        action: StepAction::Configure {
            commands: vec![ConfigCommand::set(
                device,
                format!("cross-connects/{channel}/{port}"),
                format!("{slice}/{role}"),
            )],
        },
    }
}

/// Device and key steps of one connection.
pub fn connection_plan(topo: &Topology, slice: &str, role: Role, path: &PathSolution, bandwidth_gbps: f64) -> Vec<PlanStep> {
    let mut steps = Vec::new();
    let eth = |site: &str| topo.site_device(site, DeviceKind::EthernetSwitch).map(|d| d.id.clone());
    let oxc = |site: &str| topo.site_device(site, DeviceKind::OpticalSwitch).map(|d| d.id.clone());
    let labels: Vec<String> = path.hops.iter().map(|h| hop_label(h, path)).collect();

    if let Some(dev) = eth(&path.sites[0]) {
        let egress = labels.first().map(String::as_str).unwrap_or("client");
        steps.push(ethernet_step(slice, role, &dev, "client", egress, bandwidth_gbps));
    }
    let mut key_checks = Vec::new();
    for (i, hop) in path.hops.iter().enumerate() {
        let (near, far) = (&path.sites[i], &path.sites[i + 1]);
        if let Some(LinkRef::Channel(ch)) = topo.link(hop) {
            let port = path
                .reserved_ports
                .iter()
                .find(|p| &p.channel_id == hop)
                .map(|p| p.port)
                .unwrap_or(0);
            let a_site = topo.device(&ch.a_device_port.device).map(|d| d.site_id.as_str());
            let (near_card, far_card) = if a_site == Some(near.as_str()) {
                (&ch.a_device_port.device, &ch.b_device_port.device)
            } else {
                (&ch.b_device_port.device, &ch.a_device_port.device)
            };
            steps.push(card_step(slice, role, near_card, port, bandwidth_gbps));
            if let Some(dev) = oxc(near) {
                steps.push(oxc_step(slice, role, &dev, hop, port));
            }
            if let Some(dev) = oxc(far) {
                steps.push(oxc_step(slice, role, &dev, hop, port));
            }
            steps.push(card_step(slice, role, far_card, port, bandwidth_gbps));
            if ch.security_method.is_encrypted() {
                key_checks.push(hop.clone());
            }
        }
        if let Some(dev) = eth(far) {
            let egress = labels.get(i + 1).map(String::as_str).unwrap_or("client");
            steps.push(ethernet_step(slice, role, &dev, &labels[i], egress, bandwidth_gbps));
        }
    }
    steps.extend(key_checks.into_iter().map(|channel_id| PlanStep {
        entity: KMS_ENTITY.to_string(),
        role,
        action: StepAction::VerifyKey { channel_id },
    }));
    steps
}

/// All steps of a provision, connections in role order.
pub fn provision_plan(
    topo: &Topology,
    slice: &str,
    paths: &BTreeMap<Role, PathSolution>,
    bandwidths: &BTreeMap<Role, f64>,
) -> Vec<PlanStep> {
    paths
        .iter()
        .flat_map(|(role, path)| connection_plan(topo, slice, *role, path, bandwidths.get(role).copied().unwrap_or(0.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pce::{compute_path, Policy};
    use crate::scenarios::{testbed_topology, usecase1, usecase2};

    fn plan_for(desc: &crate::orchestrator::SliceDescriptor) -> Vec<PlanStep> {
        let topo = testbed_topology();
        let mut paths = BTreeMap::new();
        let mut bws = BTreeMap::new();
        for c in &desc.connections {
            paths.insert(c.role, compute_path(&topo, c, Policy::UpgradeAllowed).unwrap());
            bws.insert(c.role, c.bandwidth_gbps);
        }
        provision_plan(&topo, &desc.slice_id, &paths, &bws)
    }

    fn kinds(steps: &[PlanStep]) -> BTreeMap<DeviceKind, usize> {
        let topo = testbed_topology();
        let mut out = BTreeMap::new();
        for s in steps.iter().filter(|s| s.is_device_step()) {
            *out.entry(topo.device(&s.entity).unwrap().kind).or_default() += 1;
        }
        out
    }

    #[test]
    fn usecase2_adds_exactly_one_metro_ethernet_switch() {
        let (p1, p2) = (plan_for(&usecase1()), plan_for(&usecase2()));
        let (k1, k2) = (kinds(&p1), kinds(&p2));
        assert_eq!(k1[&DeviceKind::EthernetSwitch], 6);
        assert_eq!(k1[&DeviceKind::EncryptionCard], 6);
        assert_eq!(k1[&DeviceKind::OpticalSwitch], 2);
        assert_eq!(k2[&DeviceKind::EthernetSwitch], 7);
        assert_eq!(k2[&DeviceKind::EncryptionCard], 6);
        assert_eq!(k2[&DeviceKind::OpticalSwitch], 2);
        let commands: usize = p1.iter().map(|s| s.commands().len()).sum();
        assert_eq!(commands, 38);
        let key_checks = |p: &[PlanStep]| p.iter().filter(|s| !s.is_device_step()).count();
        assert_eq!(key_checks(&p1), 3);
        assert_eq!(key_checks(&p2), 3);
    }

    #[test]
    fn steps_follow_role_order_then_source_to_destination() {
        let p = plan_for(&usecase1());
        let roles: Vec<Role> = p.iter().map(|s| s.role).collect();
        let mut sorted = roles.clone();
        sorted.sort();
        assert_eq!(roles, sorted);
        let backhaul: Vec<&str> = p
            .iter()
            .filter(|s| s.role == Role::Backhaul)
            .map(|s| s.entity.as_str())
            .collect();
        assert_eq!(
            backhaul,
            ["metro-1-eth", "metro-1-card-qkd1", "metro-1-oxc", "core-1-card-qkd1", "core-1-eth", KMS_ENTITY]
        );
    }
}
