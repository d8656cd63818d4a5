// SPDX-License-Identifier: Apache-2.0

//! Checks shared by the integration tests and the acceptance suite. Each
//! returns the violations it found so callers can assert on them and report
//! counts. The oracles here read the raw topology and do not call into the
//! path computation or the orchestrator's own bookkeeping.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Arc, Barrier};

use qslice_core::device_sim::FaultMode;
use qslice_core::kms::{otp_relay, QkdChain};
use qslice_core::orchestrator::plan::StepAction;
use qslice_core::orchestrator::timing::Operation;
use qslice_core::pce::{latency_ns, InfeasibleReason, PceError};
use qslice_core::scenarios::{fast_config, random_topology, testbed_topology, RandomTopologySpec, BACKGROUND_OWNER};
use qslice_core::topology::{diff, snapshot, PortState, SiteKind, WavelengthRole};
use qslice_core::{
    compute_path, ConnectionRequest, Orchestrator, OrchestratorError, Policy, Role, SecurityMethod, SimConfig,
    SliceDescriptor, SliceState, Topology,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ENCRYPTOR_NS: u64 = 15_000;

/// Fast config for generated topologies: no QKD chain mappings, so every QKD
/// channel gets its own single-section chain.
pub fn random_topology_config(seed: u64) -> SimConfig {
    let mut c = fast_config();
    c.seed = seed;
    c.kms.qkd_chains.clear();
    c.kms.channel_chains.clear();
    c
}

fn us_to_ns(us: f64) -> u64 {
    (us * 1000.0).round() as u64
}

/// One routable hop as the oracle sees it.
#[derive(Debug, Clone)]
struct Hop {
    id: String,
    a: String,
    b: String,
    level: SecurityMethod,
    latency_ns: u64,
    has_capacity: bool,
}

fn hops(topo: &Topology, bandwidth_gbps: f64) -> Vec<Hop> {
    let mut out = Vec::new();
    for c in &topo.channels {
        if c.wavelength_role != WavelengthRole::Data {
            continue;
        }
        let site = |d: &str| topo.devices.iter().find(|x| x.id == d).map(|x| x.site_id.clone()).unwrap();
        let enc = if c.security_method == SecurityMethod::None { 0 } else { ENCRYPTOR_NS };
        out.push(Hop {
            id: c.id.clone(),
            a: site(&c.a_device_port.device),
            b: site(&c.b_device_port.device),
            level: c.security_method,
            latency_ns: us_to_ns(c.base_latency_us) + enc,
            has_capacity: bandwidth_gbps <= 10.0 && c.client_ports.iter().any(|p| p.state == PortState::Free),
        });
    }
    for l in &topo.access_links {
        let held: f64 = topo.link_allocations.get(&l.id).map(|m| m.values().sum()).unwrap_or(0.0);
        let enc = if l.security_method == SecurityMethod::None { 0 } else { ENCRYPTOR_NS };
        out.push(Hop {
            id: l.id.clone(),
            a: l.a_site.clone(),
            b: l.b_site.clone(),
            level: l.security_method,
            latency_ns: us_to_ns(l.latency_us) + enc,
            has_capacity: l.capacity_gbps - held + 1e-9 >= bandwidth_gbps,
        });
    }
    out
}

fn level_ok(level: SecurityMethod, required: SecurityMethod, policy: Policy) -> bool {
    match policy {
        Policy::Exact => level == required,
        Policy::UpgradeAllowed => level >= required,
    }
}

/// Ranking of a path: latency, then the most secure hop, then the sum of hop
/// ordinals, then the hop ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PathKey {
    pub latency_ns: u64,
    pub max_level: u8,
    pub level_sum: u32,
    pub hops: Vec<String>,
}

/// Best path by enumerating every simple path.
pub fn brute_force_path(topo: &Topology, req: &ConnectionRequest, policy: Policy) -> Option<PathKey> {
    let hs: Vec<Hop> = hops(topo, req.bandwidth_gbps)
        .into_iter()
        .filter(|h| h.has_capacity && level_ok(h.level, req.required_security, policy))
        .collect();
    let mut best: Option<PathKey> = None;
    let mut visited = vec![req.src_site.clone()];
    let mut path: Vec<usize> = Vec::new();
    fn dfs(hs: &[Hop], dst: &str, visited: &mut Vec<String>, path: &mut Vec<usize>, best: &mut Option<PathKey>) {
        let here = visited.last().unwrap().clone();
        if here == dst {
            let key = PathKey {
                latency_ns: path.iter().map(|&i| hs[i].latency_ns).sum(),
                max_level: path.iter().map(|&i| hs[i].level as u8).max().unwrap_or(0),
                level_sum: path.iter().map(|&i| u32::from(hs[i].level as u8)).sum(),
                hops: path.iter().map(|&i| hs[i].id.clone()).collect(),
            };
            if best.as_ref().is_none_or(|b| key < *b) {
                *best = Some(key);
            }
            return;
        }
        for (i, h) in hs.iter().enumerate() {
            let next = if h.a == here {
                &h.b
            } else if h.b == here {
                &h.a
            } else {
                continue;
            };
            if visited.contains(next) {
                continue;
            }
            visited.push(next.clone());
            path.push(i);
            dfs(hs, dst, visited, path, best);
            path.pop();
            visited.pop();
        }
    }
    dfs(&hs, &req.dst_site, &mut visited, &mut path, &mut best);
    best
}

fn reachable(hs: &[&Hop], src: &str, dst: &str) -> bool {
    let mut seen: BTreeSet<&str> = BTreeSet::from([src]);
    let mut stack = vec![src];
    while let Some(n) = stack.pop() {
        if n == dst {
            return true;
        }
        for h in hs {
            let next = if h.a == n {
                h.b.as_str()
            } else if h.b == n {
                h.a.as_str()
            } else {
                continue;
            };
            if seen.insert(next) {
                stack.push(next);
            }
        }
    }
    false
}

/// Why no path exists, decided from the raw topology.
pub fn expected_reason(topo: &Topology, req: &ConnectionRequest, policy: Policy) -> InfeasibleReason {
    let all = hops(topo, req.bandwidth_gbps);
    let any: Vec<&Hop> = all.iter().collect();
    let secure: Vec<&Hop> = all.iter().filter(|h| level_ok(h.level, req.required_security, policy)).collect();
    if !reachable(&any, &req.src_site, &req.dst_site) {
        InfeasibleReason::Disconnected
    } else if reachable(&secure, &req.src_site, &req.dst_site) {
        InfeasibleReason::NoCapacity
    } else {
        InfeasibleReason::NoSecurityMatch
    }
}

/// Encryptor latency on a returned path: total minus the sum of base hop
/// latencies must be exactly 15 us per encrypted hop.
pub fn encryption_latency_violation(topo: &Topology, hops_taken: &[String], total_latency_us: f64) -> Option<String> {
    let mut base_ns = 0;
    let mut encrypted = 0;
    for id in hops_taken {
        let (base, level) = match (topo.channel(id), topo.access_link(id)) {
            (Some(c), _) => (c.base_latency_us, c.security_method),
            (None, Some(l)) => (l.latency_us, l.security_method),
            _ => return Some(format!("unknown hop {id}")),
        };
        base_ns += us_to_ns(base);
        encrypted += u64::from(level != SecurityMethod::None);
    }
    let total_ns = us_to_ns(total_latency_us);
    (total_ns != base_ns + encrypted * ENCRYPTOR_NS)
        .then(|| format!("{hops_taken:?}: total {total_ns} ns, base {base_ns} ns, {encrypted} encrypted hops"))
}

/// Compares `compute_path` with the oracle on one request.
pub fn check_pce_case(topo: &Topology, req: &ConnectionRequest, policy: Policy) -> Result<Option<u64>, String> {
    let oracle = brute_force_path(topo, req, policy);
    let got = compute_path(topo, req, policy);
    let ctx = || format!("{req:?} {policy:?}");
    match (oracle, got) {
        (None, Err(PceError::NoFeasiblePath { reason, .. })) => {
            let want = expected_reason(topo, req, policy);
            if reason == want {
                Ok(None)
            } else {
                Err(format!("{}: reason {reason:?}, oracle says {want:?}", ctx()))
            }
        }
        (Some(best), Err(PceError::LatencyBoundExceeded { .. })) => match req.max_latency_us {
            Some(bound) if best.latency_ns as f64 > bound * 1000.0 => Ok(None),
            _ => Err(format!("{}: bound rejected but oracle best is {} ns", ctx(), best.latency_ns)),
        },
        (Some(best), Ok(sol)) => {
            if let Some(bound) = req.max_latency_us {
                if best.latency_ns as f64 > bound * 1000.0 {
                    return Err(format!("{}: path over the bound was accepted", ctx()));
                }
            }
            let got_ns = latency_ns(sol.total_latency_us);
            if got_ns != best.latency_ns {
                return Err(format!("{}: latency {got_ns} ns, oracle {} ns via {:?}", ctx(), best.latency_ns, best.hops));
            }
            if sol.hops != best.hops {
                return Err(format!("{}: hops {:?}, oracle tie-break picks {:?}", ctx(), sol.hops, best.hops));
            }
            if let Some(v) = encryption_latency_violation(topo, &sol.hops, sol.total_latency_us) {
                return Err(v);
            }
            Ok(Some(got_ns))
        }
        (oracle, got) => Err(format!("{}: oracle {oracle:?}, compute_path {got:?}", ctx())),
    }
}

pub fn random_request(rng: &mut impl Rng, topo: &Topology) -> (ConnectionRequest, Policy) {
    let n = topo.sites.len();
    let a = rng.random_range(0..n);
    let b = (a + rng.random_range(1..n)) % n;
    let req = ConnectionRequest {
        role: Role::ALL[rng.random_range(0..3)],
        src_site: topo.sites[a].id.clone(),
        dst_site: topo.sites[b].id.clone(),
        bandwidth_gbps: [0.5, 1.0, 2.5, 5.0, 10.0][rng.random_range(0..5)],
        max_latency_us: rng.random_bool(0.3).then(|| f64::from(rng.random_range(10..6000u32)) + 0.0005),
        required_security: SecurityMethod::ALL[rng.random_range(0..4)],
    };
    let policy = if rng.random_bool(0.3) { Policy::Exact } else { Policy::UpgradeAllowed };
    (req, policy)
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub graphs: usize,
    pub cases: usize,
    pub paths_found: usize,
    pub violations: Vec<String>,
}

/// `graphs` random graphs of 2-8 sites and 1-14 links, `per_graph` requests
/// each.
pub fn pce_oracle_sweep(seed: u64, graphs: usize, per_graph: usize) -> SweepOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SweepOutcome::default();
    for _ in 0..graphs {
        let spec = RandomTopologySpec::new(rng.random_range(2..=8), rng.random_range(1..=14));
        let topo = random_topology(&mut rng, spec);
        out.graphs += 1;
        for _ in 0..per_graph {
            let (req, policy) = random_request(&mut rng, &topo);
            out.cases += 1;
            match check_pce_case(&topo, &req, policy) {
                Ok(Some(_)) => out.paths_found += 1,
                Ok(None) => {}
                Err(v) => out.violations.push(v),
            }
        }
    }
    out
}

fn sites_of(topo: &Topology, pred: impl Fn(SiteKind) -> bool) -> Vec<String> {
    topo.sites.iter().filter(|s| pred(s.kind)).map(|s| s.id.clone()).collect()
}

/// A random well-formed descriptor for `topo`, or `None` when the topology
/// lacks a cell, core or compute-capable site.
pub fn random_slice(rng: &mut impl Rng, topo: &Topology, slice_id: &str) -> Option<SliceDescriptor> {
    let cells = sites_of(topo, |k| k == SiteKind::Cell);
    let cores = sites_of(topo, |k| k == SiteKind::Core);
    let computes = sites_of(topo, SiteKind::may_host_compute);
    if cells.is_empty() || cores.is_empty() || computes.is_empty() {
        return None;
    }
    let mut pick = |v: &[String]| v[rng.random_range(0..v.len())].clone();
    let (cell, core, compute) = (pick(&cells), pick(&cores), pick(&computes));
    let mut conn = |role: Role, x: &str, y: &str| {
        let (src, dst) = if rng.random_bool(0.5) { (x, y) } else { (y, x) };
        ConnectionRequest {
            role,
            src_site: src.into(),
            dst_site: dst.into(),
            bandwidth_gbps: [0.5, 1.0, 2.5, 5.0][rng.random_range(0..4)],
            max_latency_us: None,
            // Weighted toward lower levels so a fair share of slices activate.
            required_security: SecurityMethod::ALL[[0, 0, 0, 1, 1, 2, 3][rng.random_range(0..7)]],
        }
    };
    let connections = vec![
        conn(Role::ControlPlane, &cell, &core),
        conn(Role::Access, &cell, &compute),
        conn(Role::Backhaul, &compute, &core),
    ];
    Some(SliceDescriptor {
        slice_id: slice_id.into(),
        name: "fuzz".into(),
        compute_site: compute,
        compute_units: rng.random_range(0..=4),
        connections,
        policy: if rng.random_bool(0.15) { Policy::Exact } else { Policy::UpgradeAllowed },
    })
}

/// Every hop of every connection of an active slice meets its requirement,
/// checked against the live topology and through `audit_slice`.
fn audit_violations(orch: &Orchestrator, id: &str) -> Vec<String> {
    let mut out = Vec::new();
    let rec = orch.slice(id).unwrap();
    let topo = orch.topology();
    for c in &rec.descriptor.connections {
        let Some(path) = rec.paths.get(&c.role) else {
            out.push(format!("{id}: no path for {}", c.role));
            continue;
        };
        if path.sites.first() != Some(&c.src_site) || path.sites.last() != Some(&c.dst_site) {
            out.push(format!("{id} {}: path {:?} does not join the endpoints", c.role, path.sites));
        }
        for h in &path.hops {
            let level = topo.channel(h).map(|x| x.security_method).or(topo.access_link(h).map(|x| x.security_method));
            if !level.is_some_and(|l| level_ok(l, c.required_security, rec.descriptor.policy)) {
                out.push(format!("{id} {}: hop {h} at {level:?} below {}", c.role, c.required_security));
            }
        }
    }
    match orch.audit_slice(id) {
        Ok(a) if a.ok() && a.per_connection.len() == 3 => {}
        Ok(a) => out.push(format!("{id}: audit failed {a:?}")),
        Err(e) => out.push(format!("{id}: audit error {e}")),
    }
    out
}

/// Non-free ports belong to background traffic or an active slice, and no
/// slice holds compute it was not granted.
fn ownership_violations(orch: &Orchestrator) -> Vec<String> {
    let mut out = Vec::new();
    let topo = orch.topology();
    let active: BTreeSet<String> = orch
        .slices()
        .into_iter()
        .filter(|r| r.state == SliceState::Active)
        .map(|r| r.descriptor.slice_id)
        .collect();
    for ch in &topo.channels {
        for p in &ch.client_ports {
            match (&p.state, &p.owner_slice_id) {
                (PortState::Free, None) => {}
                (PortState::InUse, Some(o)) if o == BACKGROUND_OWNER || active.contains(o) => {}
                other => out.push(format!("{}/{}: {other:?}", ch.id, p.index)),
            }
        }
    }
    for (site, holders) in &topo.compute_allocations {
        let cap = topo.site(site).map(|s| s.compute_capacity_units).unwrap_or(0);
        if holders.values().sum::<u32>() > cap {
            out.push(format!("{site}: compute over capacity"));
        }
        out.extend(holders.keys().filter(|h| !active.contains(*h)).map(|h| format!("{site}: compute held by {h}")));
    }
    out
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub requests: usize,
    pub activated: usize,
    pub audits: usize,
    pub rejected: usize,
    pub rolled_back: usize,
    pub violations: Vec<String>,
}

/// Random slice requests on random topologies of 3-8 sites, with random
/// teardowns in between. Every active slice is audited after each
/// submission's outcome and again at the end; finally every slice is torn
/// down and the network must match its starting state.
pub fn security_fuzz(seed: u64, topologies: usize, per_topology: usize) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FuzzOutcome::default();
    for t in 0..topologies {
        let spec = RandomTopologySpec::new(rng.random_range(3..=8), rng.random_range(6..=14));
        let topo = random_topology(&mut rng, spec);
        let orch = Orchestrator::new(topo, random_topology_config(rng.next_u64())).unwrap();
        orch.kms().advance_to(10.0).unwrap();
        let before = snapshot(&orch.topology());
        for i in 0..per_topology {
            let id = format!("t{t}-s{i}");
            let Some(desc) = random_slice(&mut rng, &orch.topology(), &id) else { break };
            out.requests += 1;
            match orch.submit(desc) {
                Ok(rec) if rec.state == SliceState::Active => {
                    out.activated += 1;
                    out.audits += 1;
                    out.violations.extend(audit_violations(&orch, &id));
                }
                Ok(rec) if rec.state == SliceState::RolledBack => out.rolled_back += 1,
                Ok(rec) => out.violations.push(format!("{id}: ended {:?} {:?}", rec.state, rec.failure)),
                Err(
                    OrchestratorError::Path(_)
                    | OrchestratorError::InsufficientCompute { .. }
                    | OrchestratorError::Descriptor(_),
                ) => out.rejected += 1,
                Err(e) => out.violations.push(format!("{id}: {e}")),
            }
            if rng.random_bool(0.3) {
                let active: Vec<String> = orch
                    .slices()
                    .into_iter()
                    .filter(|r| r.state == SliceState::Active)
                    .map(|r| r.descriptor.slice_id)
                    .collect();
                if !active.is_empty() {
                    let victim = &active[rng.random_range(0..active.len())];
                    match orch.deprovision_slice(victim) {
                        Ok(r) if r.state == SliceState::Deleted => {}
                        other => out.violations.push(format!("{victim}: teardown {other:?}")),
                    }
                }
            }
        }
        out.violations.extend(ownership_violations(&orch));
        for rec in orch.slices().into_iter().filter(|r| r.state == SliceState::Active) {
            out.audits += 1;
            out.violations.extend(audit_violations(&orch, rec.slice_id()));
            if orch.deprovision_slice(rec.slice_id()).map(|r| r.state) != Ok(SliceState::Deleted) {
                out.violations.push(format!("{}: final teardown failed", rec.slice_id()));
            }
        }
        let residue = diff(&before, &orch.topology()).unwrap();
        if !residue.is_empty() {
            out.violations.push(format!("topology {t}: {} entries differ after teardown", residue.len()));
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct RollbackOutcome {
    pub cases: usize,
    pub violations: Vec<String>,
}

/// Injects a fault at each device step of `desc`'s provision in turn.
pub fn rollback_sweep(desc: &SliceDescriptor) -> RollbackOutcome {
    let mut out = RollbackOutcome::default();
    let id = desc.slice_id.clone();
    let probe = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
    probe.request_slice(desc.clone()).unwrap();
    let device_steps: Vec<(String, usize)> = probe
        .provision_plan(&id)
        .unwrap()
        .into_iter()
        .filter_map(|s| match s.action {
            StepAction::Configure { commands } => Some((s.entity, commands.len())),
            StepAction::VerifyKey { .. } => None,
        })
        .collect();
    for k in 0..device_steps.len() {
        out.cases += 1;
        let (device, _) = &device_steps[k];
        // Commands the device accepts before step k.
        let earlier: usize = device_steps[..k].iter().filter(|(d, _)| d == device).map(|(_, n)| n).sum();
        let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
        orch.kms().advance_to(5.0).unwrap();
        let before = snapshot(&orch.topology());
        orch.request_slice(desc.clone()).unwrap();
        orch.inject_fault(device, FaultMode::FailAfterN { n: earlier as u32 }).unwrap();
        let rec = orch.provision_slice(&id).unwrap();
        let ctx = format!("{id} step {k} ({device})");
        if rec.state != SliceState::RolledBack {
            out.violations.push(format!("{ctx}: ended {:?}", rec.state));
            continue;
        }
        let f = rec.failure.as_ref().unwrap();
        let configure_before = rec.step_log[..f.step_index.unwrap()]
            .iter()
            .filter(|e| e.action == "configure" && e.operation == Operation::Provision)
            .count();
        if &f.entity != device || configure_before != k {
            out.violations.push(format!("{ctx}: failure attributed to {} at device step {configure_before}", f.entity));
        }
        if f.remediation.is_some() {
            out.violations.push(format!("{ctx}: remediation requested"));
        }
        let rollbacks = rec.step_log.iter().filter(|e| e.action == "rollback").count();
        if rollbacks != k {
            out.violations.push(format!("{ctx}: {rollbacks} rollback transactions for {k} applied steps"));
        }
        let topo = orch.topology();
        let residue = diff(&before, &topo).unwrap();
        if !residue.is_empty() {
            out.violations.push(format!("{ctx}: residue {residue:?}"));
        }
        let owned_ports = topo.channels.iter().flat_map(|c| &c.client_ports).filter(|p| p.owner_slice_id.is_some()).count();
        if owned_ports > 0 || !topo.compute_allocations.is_empty() || !topo.link_allocations.is_empty() {
            out.violations.push(format!("{ctx}: resources still held"));
        }
        // Freed resources are usable again.
        orch.clear_faults();
        orch.request_slice(desc.clone()).unwrap();
        if orch.provision_slice(&id).map(|r| r.state) != Ok(SliceState::Active) {
            out.violations.push(format!("{ctx}: retry after rollback did not activate"));
        }
    }
    out
}

/// Eight testbed slices that contend for compute, access bandwidth and ports.
pub fn contending_slices() -> Vec<SliceDescriptor> {
    let uc1 = qslice_core::scenarios::usecase1();
    let uc2 = qslice_core::scenarios::usecase2();
    (0..8)
        .map(|i| {
            let mut d = if i % 2 == 0 { uc1.clone() } else { uc2.clone() };
            d.slice_id = format!("s{i}");
            d.compute_units = [4, 6, 5, 3, 7, 2, 6, 4][i];
            if i % 4 == 3 {
                d.connections[2].required_security = SecurityMethod::QraAes;
            }
            d
        })
        .collect()
}

#[derive(Debug)]
pub struct SerialOutcome {
    pub concurrent_hash: String,
    pub serial_hashes: BTreeSet<String>,
    pub orders_explored: usize,
    pub outcomes: BTreeMap<String, usize>,
}

fn base_orchestrator() -> Orchestrator {
    let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
    orch.kms().advance_to(5.0).unwrap();
    orch
}

/// Submits `descs` from one thread each, then enumerates every serial order
/// of the same submissions (memoized on intermediate state) and collects the
/// final state hashes.
pub fn serialization_check(descs: &[SliceDescriptor]) -> SerialOutcome {
    let base = base_orchestrator();
    let shared = Arc::new(base.fork());
    let barrier = Arc::new(Barrier::new(descs.len()));
    let handles: Vec<_> = descs
        .iter()
        .cloned()
        .map(|d| {
            let (orch, barrier) = (shared.clone(), barrier.clone());
            std::thread::spawn(move || {
                barrier.wait();
                orch.submit(d).map(|r| r.state)
            })
        })
        .collect();
    let mut outcomes = BTreeMap::new();
    for h in handles {
        let key = match h.join().unwrap() {
            Ok(s) => format!("{s:?}"),
            Err(e) => format!("rejected: {}", e.to_string().split(':').next().unwrap_or("")),
        };
        *outcomes.entry(key).or_insert(0) += 1;
    }
    let concurrent_hash = shared.state_hash();

    let mut serial_hashes = BTreeSet::new();
    let mut seen = HashSet::new();
    let mut explored = 0;
    fn dfs(
        orch: &Orchestrator,
        descs: &[SliceDescriptor],
        mask: u32,
        finals: &mut BTreeSet<String>,
        seen: &mut HashSet<(String, u32)>,
        explored: &mut usize,
    ) {
        let full = (1u32 << descs.len()) - 1;
        let hash = orch.state_hash();
        if mask == full {
            *explored += 1;
            finals.insert(hash);
            return;
        }
        if !seen.insert((hash, mask)) {
            return;
        }
        for i in 0..descs.len() {
            if mask & (1 << i) == 0 {
                let next = orch.fork();
                let _ = next.submit(descs[i].clone());
                dfs(&next, descs, mask | (1 << i), finals, seen, explored);
            }
        }
    }
    dfs(&base, descs, 0, &mut serial_hashes, &mut seen, &mut explored);
    SerialOutcome { concurrent_hash, serial_hashes, orders_explored: explored, outcomes }
}

#[derive(Debug, Default)]
pub struct RelayOutcome {
    pub keys: usize,
    pub mismatches: usize,
    pub reused_section_keys: usize,
    pub byte_cases: usize,
    pub byte_mismatches: usize,
}

/// Relays `keys` random 256-bit keys over a 4-section chain whose section
/// keys the test supplies, checking the delivered key and each section's
/// ciphertext against key XOR pad. Then checks 1-byte keys exhaustively over
/// chains of 1-6 sections.
pub fn relay_identity(seed: u64, keys: usize) -> RelayOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RelayOutcome::default();
    let mut chain = QkdChain::linear("ukqntel", "adastral-park", "cambridge", 4, 2000.0).unwrap();
    let mut pads: BTreeMap<(String, u64), [u8; 32]> = BTreeMap::new();
    let mut pushed: BTreeMap<String, u64> = BTreeMap::new();
    let mut used = HashSet::new();
    for _ in 0..keys {
        for s in chain.sections_mut() {
            let mut pad = [0u8; 32];
            rng.fill_bytes(&mut pad);
            let seq = pushed.entry(s.id.clone()).or_insert(0);
            pads.insert((s.id.clone(), *seq), pad);
            *seq += 1;
            s.push(pad);
        }
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        let d = chain.relay_key(&key).unwrap();
        out.keys += 1;
        let mut ok = d.material == key && d.sections_consumed == 4 && d.wire.len() == 4;
        for (i, (section, seq)) in d.consumed.iter().enumerate() {
            if !used.insert((section.clone(), *seq)) {
                out.reused_section_keys += 1;
            }
            let pad = pads[&(section.clone(), *seq)];
            let expect: Vec<u8> = key.iter().zip(pad).map(|(k, p)| k ^ p).collect();
            ok &= d.wire.get(i).is_some_and(|w| w[..] == expect[..]);
        }
        out.mismatches += usize::from(!ok);
    }

    for sections in 1..=6usize {
        for key in 0..=255u8 {
            // Exhaustive over the pad too for a single section.
            let trials = if sections == 1 { 256 } else { 32 };
            for t in 0..trials {
                let pads: Vec<[u8; 1]> = (0..sections)
                    .map(|i| if sections == 1 { [t as u8] } else { [rng.random::<u8>() ^ i as u8] })
                    .collect();
                let (wire, delivered) = otp_relay([key], &pads);
                out.byte_cases += 1;
                let wire_ok = wire.iter().zip(&pads).all(|(w, p)| w[0] == key ^ p[0]);
                if delivered != [key] || !wire_ok {
                    out.byte_mismatches += 1;
                }
            }
        }
    }
    out
}
