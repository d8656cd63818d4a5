// SPDX-License-Identifier: Apache-2.0

//! Path computation.
//!
//! [`compute_path`] returns the minimum-latency route whose hops all satisfy
//! the request's security constraint and have room for it. Ties on latency go
//! to the path whose most secure hop is least secure, so premium links are
//! kept free when an equally fast alternative exists, then to the smaller sum
//! of hop security ordinals, then to the lexicographically smallest sequence
//! of link ids. The order is total, so results are deterministic.
//!
//! The PCE only reads the topology. Client ports it names are the lowest free
//! index on each channel at the time of the call and are not reserved.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::topology::{LinkRef, SecurityMethod, Topology, WavelengthRole, CLIENT_PORT_RATE_GBPS};

/// Security ordinal of a link: none=0 < dh_aes=1 < qra_aes=2 < qkd_aes=3.
pub type SecurityLevel = SecurityMethod;

pub fn security_metric(link: LinkRef<'_>) -> SecurityLevel {
    link.security_method()
}

/// Connection role within a slice. The derived order is the provisioning
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ControlPlane,
    Access,
    Backhaul,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::ControlPlane, Role::Access, Role::Backhaul];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ControlPlane => "control_plane",
            Role::Access => "access",
            Role::Backhaul => "backhaul",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Every hop has exactly the required security.
    Exact,
    /// Hops may be more secure than required.
    #[default]
    UpgradeAllowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyUsed {
    Exact,
    Upgrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionRequest {
    pub role: Role,
    pub src_site: String,
    pub dst_site: String,
    pub bandwidth_gbps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_us: Option<f64>,
    pub required_security: SecurityLevel,
}

impl ConnectionRequest {
    pub fn check(&self) -> Result<(), PceError> {
        let bad = |reason: String| Err(PceError::InvalidRequest { role: self.role, reason });
        if self.src_site == self.dst_site {
            return bad(format!("source and destination are both {}", self.src_site));
        }
        if !(self.bandwidth_gbps > 0.0 && self.bandwidth_gbps <= CLIENT_PORT_RATE_GBPS) {
            return bad(format!("bandwidth {} Gbps outside (0, {CLIENT_PORT_RATE_GBPS}]", self.bandwidth_gbps));
        }
        if let Some(b) = self.max_latency_us {
            if !(b > 0.0) {
                return bad(format!("latency bound {b} us must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PortRef {
    pub channel_id: String,
    pub port: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSolution {
    /// Link and channel ids from source to destination.
    pub hops: Vec<String>,
    /// Sites visited, `hops.len() + 1` entries.
    pub sites: Vec<String>,
    pub reserved_ports: Vec<PortRef>,
    pub total_latency_us: f64,
    pub min_security_on_path: SecurityLevel,
    pub policy_used: PolicyUsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibleReason {
    /// Security-compatible routes exist but none has free capacity.
    NoCapacity,
    /// Routes exist but none satisfies the security constraint.
    NoSecurityMatch,
    /// The sites are not connected at all.
    Disconnected,
}

impl fmt::Display for InfeasibleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfeasibleReason::NoCapacity => "no-capacity",
            InfeasibleReason::NoSecurityMatch => "no-security-match",
            InfeasibleReason::Disconnected => "disconnected",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PceError {
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("{role}: invalid request: {reason}")]
    InvalidRequest { role: Role, reason: String },
    #[error("{role}: no feasible path from {src} to {dst} ({reason})")]
    NoFeasiblePath { role: Role, src: String, dst: String, reason: InfeasibleReason },
    #[error("{role}: best path takes {best_us} us, bound is {bound_us} us")]
    LatencyBoundExceeded { role: Role, best_us: f64, bound_us: f64 },
}

/// Latency in integer nanoseconds, used for exact comparisons.
pub fn latency_ns(latency_us: f64) -> u64 {
    (latency_us * 1000.0).round() as u64
}

struct Edge<'a> {
    link: LinkRef<'a>,
    to: usize,
}

struct Graph<'a> {
    index: BTreeMap<&'a str, usize>,
    names: Vec<&'a str>,
    adj: Vec<Vec<Edge<'a>>>,
}

impl<'a> Graph<'a> {
    fn new(topo: &'a Topology) -> Self {
        let names: Vec<&str> = topo.sites.iter().map(|s| s.id.as_str()).collect();
        let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut adj: Vec<Vec<Edge>> = (0..names.len()).map(|_| Vec::new()).collect();
        for link in topo.links() {
            if let LinkRef::Channel(c) = link {
                if c.wavelength_role != WavelengthRole::Data {
                    continue;
                }
            }
            let Some((a, b)) = topo.link_sites(link) else { continue };
            let (Some(&a), Some(&b)) = (index.get(a), index.get(b)) else { continue };
            adj[a].push(Edge { link, to: b });
            adj[b].push(Edge { link, to: a });
        }
        Graph { index, names, adj }
    }

    fn reachable(&self, src: usize, dst: usize, admit: &dyn Fn(LinkRef<'_>) -> bool) -> bool {
        let mut seen = vec![false; self.names.len()];
        let mut stack = vec![src];
        seen[src] = true;
        while let Some(n) = stack.pop() {
            if n == dst {
                return true;
            }
            for e in &self.adj[n] {
                if !seen[e.to] && admit(e.link) {
                    seen[e.to] = true;
                    stack.push(e.to);
                }
            }
        }
        false
    }

    /// Lexicographic (latency, security sum, id sequence) shortest path.
    fn dijkstra(&self, src: usize, dst: usize, admit: &dyn Fn(LinkRef<'_>) -> bool) -> Option<(u64, Vec<&'a str>)> {
        type Label<'b> = (u64, u32, Vec<&'b str>, usize);
        let mut best: Vec<Option<(u64, u32, Vec<&str>)>> = vec![None; self.names.len()];
        let mut done = vec![false; self.names.len()];
        let mut heap: BinaryHeap<Reverse<Label>> = BinaryHeap::new();
        best[src] = Some((0, 0, Vec::new()));
        heap.push(Reverse((0, 0, Vec::new(), src)));
        while let Some(Reverse((lat, sum, ids, node))) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            if node == dst {
                return Some((lat, ids));
            }
            for e in &self.adj[node] {
                if done[e.to] || !admit(e.link) {
                    continue;
                }
                let mut next_ids = ids.clone();
                next_ids.push(e.link.id());
                let cand = (
                    lat + latency_ns(e.link.latency_us()),
                    sum + u32::from(e.link.security_method().ordinal()),
                    next_ids,
                );
                let better = match &best[e.to] {
                    None => true,
                    Some(cur) => cand < *cur,
                };
                if better {
                    heap.push(Reverse((cand.0, cand.1, cand.2.clone(), e.to)));
                    best[e.to] = Some(cand);
                }
            }
        }
        None
    }
}

fn has_capacity(topo: &Topology, link: LinkRef<'_>, bandwidth_gbps: f64) -> bool {
    match link {
        LinkRef::Channel(c) => bandwidth_gbps <= CLIENT_PORT_RATE_GBPS && c.lowest_free_port().is_some(),
        LinkRef::Access(l) => topo.free_link_capacity_gbps(&l.id).is_some_and(|free| free + 1e-9 >= bandwidth_gbps),
    }
}

/// Finds the best route for `request` under `policy`.
pub fn compute_path(topo: &Topology, request: &ConnectionRequest, policy: Policy) -> Result<PathSolution, PceError> {
    request.check()?;
    let graph = Graph::new(topo);
    let site = |id: &str| graph.index.get(id).copied().ok_or_else(|| PceError::UnknownSite(id.to_string()));
    let (src, dst) = (site(&request.src_site)?, site(&request.dst_site)?);
    let required = request.required_security;
    let bw = request.bandwidth_gbps;

    let ceilings: Vec<SecurityLevel> = match policy {
        Policy::Exact => vec![required],
        Policy::UpgradeAllowed => SecurityMethod::ALL.into_iter().filter(|l| *l >= required).collect(),
    };
    let mut found: Option<(u64, Vec<&str>)> = None;
    for ceiling in ceilings {
        let admit = |l: LinkRef<'_>| {
            let level = security_metric(l);
            level >= required && level <= ceiling && has_capacity(topo, l, bw)
        };
        if let Some((lat, ids)) = graph.dijkstra(src, dst, &admit) {
            // A lower ceiling only loses on strictly greater latency.
            if found.as_ref().is_none_or(|(best, _)| lat < *best) {
                found = Some((lat, ids));
            }
        }
    }

    let Some((_, ids)) = found else {
        let secure = |l: LinkRef<'_>| match policy {
            Policy::Exact => security_metric(l) == required,
            Policy::UpgradeAllowed => security_metric(l) >= required,
        };
        let reason = if !graph.reachable(src, dst, &|_| true) {
            InfeasibleReason::Disconnected
        } else if graph.reachable(src, dst, &secure) {
            InfeasibleReason::NoCapacity
        } else {
            InfeasibleReason::NoSecurityMatch
        };
        return Err(PceError::NoFeasiblePath {
            role: request.role,
            src: request.src_site.clone(),
            dst: request.dst_site.clone(),
            reason,
        });
    };

    let solution = build_solution(topo, &request.src_site, &ids, required);
    if let Some(bound) = request.max_latency_us {
        if solution.total_latency_us > bound {
            return Err(PceError::LatencyBoundExceeded {
                role: request.role,
                best_us: solution.total_latency_us,
                bound_us: bound,
            });
        }
    }
    Ok(solution)
}

/// Assembles a [`PathSolution`] for a known link sequence starting at `src`.
pub fn build_solution(topo: &Topology, src: &str, hop_ids: &[&str], required: SecurityLevel) -> PathSolution {
    let mut sites = vec![src.to_string()];
    let mut ports = Vec::new();
    let mut total = 0.0;
    let mut min_level = SecurityMethod::QkdAes;
    for id in hop_ids {
        let link = topo.link(id).expect("hop exists");
        let (a, b) = topo.link_sites(link).expect("hop has sites");
        let here = sites.last().expect("non-empty");
        let next = if a == here { b } else { a };
        sites.push(next.to_string());
        total += link.latency_us();
        min_level = min_level.min(security_metric(link));
        if let LinkRef::Channel(c) = link {
            if let Some(port) = c.lowest_free_port() {
                ports.push(PortRef { channel_id: c.id.clone(), port });
            }
        }
    }
    let all_exact = hop_ids.iter().all(|id| topo.link(id).map(security_metric) == Some(required));
    PathSolution {
        hops: hop_ids.iter().map(|s| s.to_string()).collect(),
        sites,
        reserved_ports: ports,
        total_latency_us: total,
        min_security_on_path: if hop_ids.is_empty() { required } else { min_level },
        policy_used: if all_exact { PolicyUsed::Exact } else { PolicyUsed::Upgrade },
    }
}

/// True iff the site has at least `units` free compute units. Unknown sites
/// have none.
pub fn check_compute(topo: &Topology, site_id: &str, units: u32) -> bool {
    units == 0 || topo.free_compute_units(site_id).is_some_and(|free| free >= units)
}

/// Sites adjacent to `site_id` through any link, for diagnostics.
pub fn neighbours(topo: &Topology, site_id: &str) -> BTreeSet<String> {
    topo.links()
        .filter_map(|l| topo.link_sites(l))
        .filter_map(|(a, b)| {
            if a == site_id {
                Some(b.to_string())
            } else if b == site_id {
                Some(a.to_string())
            } else {
                None
            }
        })
        .collect()
}
