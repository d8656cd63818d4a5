// SPDX-License-Identifier: Apache-2.0

//! Slice lifecycle: validation, sequential provisioning under the global
//! configuration lock, rollback, teardown, audit and timing.
//!
//! Simulated time advances only while the configuration lock is held, by the
//! sampled duration of each device or KMS step, so a slice's step log is a
//! sequence of back-to-back, non-overlapping intervals.

pub mod lock;
pub mod plan;
pub mod timing;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{SimConfig, KMS_MODEL_ID};
use crate::device_sim::{ConfigCommand, ConfigTransaction, DeviceAgents, DeviceError, FaultMode};
use crate::kms::{Kms, KmsError};
use crate::pce::{check_compute, compute_path, ConnectionRequest, PathSolution, PceError, Policy, PortRef, Role, SecurityLevel};
use crate::topology::{diff, snapshot, ConfigSnapshot, LinkRef, PortState, SiteKind, Topology};
use lock::{ConfigLock, LockStats, LockTimeout};
use plan::{provision_plan, PlanStep, StepAction};
use timing::{Operation, TimingRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceDescriptor {
    pub slice_id: String,
    pub name: String,
    pub compute_site: String,
    pub compute_units: u32,
    pub connections: Vec<ConnectionRequest>,
    #[serde(default)]
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DescriptorError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> DescriptorError {
    DescriptorError::Invalid { field: field.into(), message: message.into() }
}

impl SliceDescriptor {
    /// Parses and shape-checks a descriptor. Errors name the offending field.
    pub fn from_json(document: &str) -> Result<Self, DescriptorError> {
        let de = &mut serde_json::Deserializer::from_str(document);
        let desc: SliceDescriptor = serde_path_to_error::deserialize(de).map_err(|e| DescriptorError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        desc.validate_shape()?;
        Ok(desc)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn connection(&self, role: Role) -> Option<&ConnectionRequest> {
        self.connections.iter().find(|c| c.role == role)
    }

    /// Checks everything that does not need a topology.
    pub fn validate_shape(&self) -> Result<(), DescriptorError> {
        if self.slice_id.is_empty() {
            return Err(invalid("slice_id", "must not be empty"));
        }
        for (i, c) in self.connections.iter().enumerate() {
            if self.connections[..i].iter().any(|p| p.role == c.role) {
                return Err(invalid(format!("connections[{i}].role"), format!("duplicate role {}", c.role)));
            }
        }
        for role in Role::ALL {
            if self.connection(role).is_none() {
                return Err(invalid("connections", format!("missing role {role}")));
            }
        }
        for (i, c) in self.connections.iter().enumerate() {
            c.check().map_err(|e| match e {
                PceError::InvalidRequest { reason, .. } => invalid(format!("connections[{i}]"), reason),
                other => invalid(format!("connections[{i}]"), other.to_string()),
            })?;
        }
        Ok(())
    }

    /// Checks site kinds and role endpoints against a topology.
    pub fn validate_against(&self, topo: &Topology) -> Result<(), DescriptorError> {
        let kind = |field: &str, id: &str| {
            topo.site(id).map(|s| s.kind).ok_or_else(|| invalid(field, format!("unknown site {id}")))
        };
        let compute_kind = kind("compute_site", &self.compute_site)?;
        if !compute_kind.may_host_compute() {
            return Err(invalid("compute_site", format!("{} is not a metro or aggregation site", self.compute_site)));
        }
        for (i, c) in self.connections.iter().enumerate() {
            let field = format!("connections[{i}]");
            let src = kind(&format!("{field}.src_site"), &c.src_site)?;
            let dst = kind(&format!("{field}.dst_site"), &c.dst_site)?;
            let joins = |a: &dyn Fn(&str, SiteKind) -> bool, b: &dyn Fn(&str, SiteKind) -> bool| {
                (a(&c.src_site, src) && b(&c.dst_site, dst)) || (b(&c.src_site, src) && a(&c.dst_site, dst))
            };
            let cell = |_: &str, k: SiteKind| k == SiteKind::Cell;
            let core = |_: &str, k: SiteKind| k == SiteKind::Core;
            let compute = |id: &str, _: SiteKind| id == self.compute_site;
            let (ok, expected) = match c.role {
                Role::ControlPlane => (joins(&cell, &core), "a cell site and the core site"),
                Role::Access => (joins(&cell, &compute), "a cell site and the compute site"),
                Role::Backhaul => (joins(&compute, &core), "the compute site and the core site"),
            };
            if !ok {
                return Err(invalid(field, format!("{} must join {expected}", c.role)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceState {
    Requested,
    Validated,
    Provisioning,
    Active,
    Deprovisioning,
    Deleted,
    Failed,
    RolledBack,
}

impl SliceState {
    pub fn can_transition(self, to: SliceState) -> bool {
        use SliceState::*;
        matches!(
            (self, to),
            (Requested, Validated)
                | (Validated, Provisioning)
                | (Provisioning, Active)
                | (Provisioning, Failed)
                | (Failed, RolledBack)
                | (Active, Deprovisioning)
                | (Deprovisioning, Deleted)
                | (Deprovisioning, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        use SliceState::*;
        match self {
            Requested => "requested",
            Validated => "validated",
            Provisioning => "provisioning",
            Active => "active",
            Deprovisioning => "deprovisioning",
            Deleted => "deleted",
            Failed => "failed",
            RolledBack => "rolled_back",
        }
    }
}

/// One entry of a slice's swim lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub entity: String,
    pub action: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    pub operation: Operation,
    pub started_at: f64,
    pub ended_at: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub txn_id: Option<String>,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceTimings {
    pub provision_started_at: Option<f64>,
    pub provision_duration_s: Option<f64>,
    pub deprovision_started_at: Option<f64>,
    pub deprovision_duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDetail {
    pub operation: Operation,
    /// Index into `step_log` of the failing step, if a step failed.
    pub step_index: Option<usize>,
    pub entity: String,
    pub message: String,
    /// Set when the system could not restore a clean state by itself.
    pub remediation: Option<String>,
}

/// A committed device step and the commands that undo it.
#[derive(Debug, Clone, PartialEq)]
struct AppliedStep {
    entity: String,
    role: Role,
    inverse: Vec<ConfigCommand>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Reservations {
    ports: Vec<PortRef>,
    compute: Option<(String, u32)>,
    links: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceRecord {
    pub descriptor: SliceDescriptor,
    pub state: SliceState,
    /// Every state the slice has been in, oldest first.
    pub history: Vec<SliceState>,
    pub paths: BTreeMap<Role, PathSolution>,
    pub step_log: Vec<StepEvent>,
    pub timings: SliceTimings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureDetail>,
    #[serde(skip)]
    applied: Vec<AppliedStep>,
    #[serde(skip)]
    reservations: Option<Reservations>,
    #[serde(skip)]
    pre_provision: Option<ConfigSnapshot>,
}

impl SliceRecord {
    pub fn slice_id(&self) -> &str {
        &self.descriptor.slice_id
    }

    fn set_state(&mut self, to: SliceState) {
        assert!(
            self.state.can_transition(to),
            "illegal transition {} -> {} for {}",
            self.state.as_str(),
            to.as_str(),
            self.descriptor.slice_id
        );
        self.state = to;
        self.history.push(to);
    }

    pub fn steps(&self, operation: Operation) -> impl Iterator<Item = &StepEvent> {
        self.step_log.iter().filter(move |e| e.operation == operation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionAudit {
    pub role: Role,
    pub required: SecurityLevel,
    pub achieved_min: SecurityLevel,
    pub ok: bool,
    pub hops: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub slice_id: String,
    pub per_connection: Vec<ConnectionAudit>,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.per_connection.iter().all(|c| c.ok)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid descriptor: {0}")]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Path(#[from] PceError),
    #[error("site {site} has {free} free compute units, {requested} requested")]
    InsufficientCompute { site: String, requested: u32, free: u32 },
    #[error("slice {0} already exists")]
    DuplicateSlice(String),
    #[error("unknown slice {0}")]
    UnknownSlice(String),
    #[error("cannot {operation} slice {slice_id} in state {}", state.as_str())]
    InvalidState { slice_id: String, state: SliceState, operation: &'static str },
    #[error(transparent)]
    Lock(#[from] LockTimeout),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Kms(#[from] KmsError),
    #[error("{operation} of {slice_id} ended in state {}: {detail}", state.as_str())]
    OperationFailed { slice_id: String, operation: Operation, state: SliceState, detail: String },
}

/// The network slicing orchestrator.
pub struct Orchestrator {
    topology: Arc<RwLock<Topology>>,
    kms: Arc<Kms>,
    // Lock order: agents before topology; never call the KMS while holding
    // the topology.
    agents: Mutex<DeviceAgents>,
    slices: RwLock<BTreeMap<String, SliceRecord>>,
    config_lock: ConfigLock,
    clock: Mutex<f64>,
    timing_log: Mutex<Vec<TimingRecord>>,
    config: SimConfig,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("clock_s", &self.clock_s())
            .field("slices", &self.slices.read().len())
            .finish_non_exhaustive()
    }
}

fn release(topo: &mut Topology, slice_id: &str, res: &Reservations) {
    for p in &res.ports {
        if let Some(port) = topo.channel_mut(&p.channel_id).and_then(|c| c.port_mut(p.port)) {
            if port.owner_slice_id.as_deref() == Some(slice_id) {
                port.state = PortState::Free;
                port.owner_slice_id = None;
            }
        }
    }
    if let Some((site, _)) = &res.compute {
        if let Some(holders) = topo.compute_allocations.get_mut(site) {
            holders.remove(slice_id);
            if holders.is_empty() {
                topo.compute_allocations.remove(site);
            }
        }
    }
    for (link, owner) in &res.links {
        if let Some(holders) = topo.link_allocations.get_mut(link) {
            holders.remove(owner);
            if holders.is_empty() {
                topo.link_allocations.remove(link);
            }
        }
    }
}

/// Marks a path's ports and access-link bandwidth as held by `slice_id`.
fn hold_path(topo: &mut Topology, slice_id: &str, role: Role, path: &PathSolution, bandwidth_gbps: f64, res: &mut Reservations) {
    for p in &path.reserved_ports {
        if let Some(port) = topo.channel_mut(&p.channel_id).and_then(|c| c.port_mut(p.port)) {
            port.state = PortState::Reserved;
            port.owner_slice_id = Some(slice_id.to_string());
            res.ports.push(p.clone());
        }
    }
    for hop in &path.hops {
        if let Some(LinkRef::Access(_)) = topo.link(hop) {
            let owner = format!("{slice_id}/{role}");
            topo.link_allocations.entry(hop.clone()).or_default().insert(owner.clone(), bandwidth_gbps);
            res.links.push((hop.clone(), owner));
        }
    }
}

/// Computes all three paths, each against the network with the earlier
/// connections' resources already held.
pub fn plan_paths(topo: &Topology, desc: &SliceDescriptor) -> Result<BTreeMap<Role, PathSolution>, PceError> {
    let mut scratch = topo.clone();
    let mut scratch_res = Reservations::default();
    let mut out = BTreeMap::new();
    for role in Role::ALL {
        let req = desc.connection(role).expect("shape validated");
        let path = compute_path(&scratch, req, desc.policy)?;
        hold_path(&mut scratch, &desc.slice_id, role, &path, req.bandwidth_gbps, &mut scratch_res);
        out.insert(role, path);
    }
    Ok(out)
}

impl Orchestrator {
    pub fn new(topology: Topology, config: SimConfig) -> Result<Self, OrchestratorError> {
        let agents = DeviceAgents::new(config.latency_models.clone(), config.seed)?.with_time_scale(config.time_scale)?;
        agents.check_coverage(&topology)?;
        if agents.model(KMS_MODEL_ID).is_none() {
            return Err(DeviceError::UnknownLatencyModel(KMS_MODEL_ID.into()).into());
        }
        let topology = Arc::new(RwLock::new(topology));
        let kms = Arc::new(Kms::new(config.kms.clone(), topology.clone(), config.seed.wrapping_add(1))?);
        Ok(Orchestrator {
            topology,
            kms,
            agents: Mutex::new(agents),
            slices: RwLock::new(BTreeMap::new()),
            config_lock: ConfigLock::new(),
            clock: Mutex::new(0.0),
            timing_log: Mutex::new(Vec::new()),
            config,
        })
    }

    /// Independent deep copy: topology, KMS, device agents, records and clock.
    pub fn fork(&self) -> Orchestrator {
        let agents = self.agents.lock().clone();
        let topology = Arc::new(RwLock::new(self.topology.read().clone()));
        Orchestrator {
            kms: Arc::new(self.kms.fork(topology.clone())),
            topology,
            agents: Mutex::new(agents),
            slices: RwLock::new(self.slices.read().clone()),
            config_lock: ConfigLock::new(),
            clock: Mutex::new(*self.clock.lock()),
            timing_log: Mutex::new(self.timing_log.lock().clone()),
            config: self.config.clone(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn kms(&self) -> &Arc<Kms> {
        &self.kms
    }

    pub fn topology_handle(&self) -> &Arc<RwLock<Topology>> {
        &self.topology
    }

    /// Copy of the live topology.
    pub fn topology(&self) -> Topology {
        self.topology.read().clone()
    }

    /// Simulated seconds consumed by configuration work so far.
    pub fn clock_s(&self) -> f64 {
        *self.clock.lock()
    }

    pub fn lock_stats(&self) -> LockStats {
        self.config_lock.stats()
    }

    pub fn slice(&self, id: &str) -> Option<SliceRecord> {
        self.slices.read().get(id).cloned()
    }

    pub fn slices(&self) -> Vec<SliceRecord> {
        self.slices.read().values().cloned().collect()
    }

    pub fn timing_records(&self) -> Vec<TimingRecord> {
        self.timing_log.lock().clone()
    }

    pub fn inject_fault(&self, device_id: &str, mode: FaultMode) -> Result<(), DeviceError> {
        let mut agents = self.agents.lock();
        let topo = self.topology.read();
        agents.inject_fault(&topo, device_id, mode)
    }

    pub fn clear_faults(&self) {
        self.agents.lock().clear_all_faults();
    }

    pub fn device_config(&self, device_id: &str, prefix: &str) -> Result<BTreeMap<String, String>, DeviceError> {
        let agents = self.agents.lock();
        let topo = self.topology.read();
        agents.get_config(&topo, device_id, prefix)
    }

    fn update<R>(&self, id: &str, f: impl FnOnce(&mut SliceRecord) -> R) -> R {
        let mut slices = self.slices.write();
        f(slices.get_mut(id).expect("record exists"))
    }

    fn advance(&self, seconds: f64) -> (f64, f64) {
        let mut clock = self.clock.lock();
        let start = *clock;
        *clock += seconds;
        (start, *clock)
    }

    /// Validates a descriptor, computes its paths and stores it as
    /// `validated`. Changes nothing in the network.
    pub fn request_slice(&self, desc: SliceDescriptor) -> Result<SliceRecord, OrchestratorError> {
        desc.validate_shape()?;
        let topo = self.topology();
        desc.validate_against(&topo)?;
        let reusable = |r: &SliceRecord| matches!(r.state, SliceState::RolledBack | SliceState::Deleted);
        if self.slices.read().get(&desc.slice_id).is_some_and(|r| !reusable(r)) {
            return Err(OrchestratorError::DuplicateSlice(desc.slice_id));
        }
        let paths = plan_paths(&topo, &desc)?;
        if !check_compute(&topo, &desc.compute_site, desc.compute_units) {
            return Err(OrchestratorError::InsufficientCompute {
                site: desc.compute_site.clone(),
                requested: desc.compute_units,
                free: topo.free_compute_units(&desc.compute_site).unwrap_or(0),
            });
        }
        let mut record = SliceRecord {
            descriptor: desc,
            state: SliceState::Requested,
            history: vec![SliceState::Requested],
            paths,
            step_log: Vec::new(),
            timings: SliceTimings::default(),
            failure: None,
            applied: Vec::new(),
            reservations: None,
            pre_provision: None,
        };
        record.set_state(SliceState::Validated);
        let mut slices = self.slices.write();
        let id = record.descriptor.slice_id.clone();
        if slices.get(&id).is_some_and(|r| !reusable(r)) {
            return Err(OrchestratorError::DuplicateSlice(id));
        }
        slices.insert(id, record.clone());
        Ok(record)
    }

    /// Request and provision in one turn of the configuration lock.
    pub fn submit(&self, desc: SliceDescriptor) -> Result<SliceRecord, OrchestratorError> {
        let who = format!("submit {}", desc.slice_id);
        let _guard = self.config_lock.acquire(&who, self.config.lock_timeout())?;
        let id = self.request_slice(desc)?.descriptor.slice_id;
        self.provision_locked(&id)
    }

    /// Steps a `validated` slice would execute if provisioned now.
    pub fn provision_plan(&self, id: &str) -> Result<Vec<PlanStep>, OrchestratorError> {
        let rec = self.slice(id).ok_or_else(|| OrchestratorError::UnknownSlice(id.into()))?;
        let topo = self.topology();
        let paths = plan_paths(&topo, &rec.descriptor)?;
        Ok(provision_plan(&topo, id, &paths, &bandwidths(&rec.descriptor)))
    }

    /// Provisions a validated slice. Device failures do not surface as
    /// errors: the returned record is `rolled_back` (or `failed` when rollback
    /// itself could not complete) with [`SliceRecord::failure`] set.
    pub fn provision_slice(&self, id: &str) -> Result<SliceRecord, OrchestratorError> {
        let _guard = self.config_lock.acquire(&format!("provision {id}"), self.config.lock_timeout())?;
        self.provision_locked(id)
    }

    fn provision_locked(&self, id: &str) -> Result<SliceRecord, OrchestratorError> {
        let rec = self.slice(id).ok_or_else(|| OrchestratorError::UnknownSlice(id.into()))?;
        if rec.state != SliceState::Validated {
            return Err(OrchestratorError::InvalidState {
                slice_id: id.into(),
                state: rec.state,
                operation: "provision",
            });
        }
        let desc = rec.descriptor.clone();
        let start = self.clock_s();
        self.update(id, |r| {
            r.set_state(SliceState::Provisioning);
            r.step_log.clear();
            r.timings = SliceTimings { provision_started_at: Some(start), ..Default::default() };
        });

        let (pre, paths) = {
            let mut topo = self.topology.write();
            let pre = snapshot(&topo);
            let paths = plan_paths(&topo, &desc).map_err(|e| e.to_string()).and_then(|p| {
                if check_compute(&topo, &desc.compute_site, desc.compute_units) {
                    Ok(p)
                } else {
                    Err(format!("site {} lacks {} free compute units", desc.compute_site, desc.compute_units))
                }
            });
            let paths = match paths {
                Ok(p) => p,
                Err(message) => {
                    drop(topo);
                    return Ok(self.update(id, |r| {
                        r.failure = Some(FailureDetail {
                            operation: Operation::Provision,
                            step_index: None,
                            entity: "pce".into(),
                            message,
                            remediation: None,
                        });
                        r.set_state(SliceState::Failed);
                        r.set_state(SliceState::RolledBack);
                        r.clone()
                    }));
                }
            };
            let mut res = Reservations::default();
            for (role, path) in &paths {
                let bw = desc.connection(*role).expect("validated").bandwidth_gbps;
                hold_path(&mut topo, id, *role, path, bw, &mut res);
            }
            if desc.compute_units > 0 {
                topo.compute_allocations
                    .entry(desc.compute_site.clone())
                    .or_default()
                    .insert(id.to_string(), desc.compute_units);
                res.compute = Some((desc.compute_site.clone(), desc.compute_units));
            }
            self.update(id, |r| {
                r.paths = paths.clone();
                r.reservations = Some(res);
                r.pre_provision = Some(pre.clone());
            });
            (pre, paths)
        };

        let steps = provision_plan(&self.topology(), id, &paths, &bandwidths(&desc));
        for step in &steps {
            let outcome = self.run_step(id, step);
            if let Err((message, step_index)) = outcome {
                return Ok(self.rollback(id, &pre, step, message, step_index));
            }
        }

        let mut topo = self.topology.write();
        let res = self.update(id, |r| r.reservations.clone()).unwrap_or_default();
        for p in &res.ports {
            if let Some(port) = topo.channel_mut(&p.channel_id).and_then(|c| c.port_mut(p.port)) {
                port.state = PortState::InUse;
            }
        }
        drop(topo);
        let end = self.clock_s();
        let record = self.update(id, |r| {
            r.timings.provision_duration_s = Some(end - start);
            r.set_state(SliceState::Active);
            r.clone()
        });
        self.timing_log.lock().push(TimingRecord {
            slice_id: id.into(),
            use_case: desc.name.clone(),
            operation: Operation::Provision,
            start_s: start,
            end_s: end,
            duration_s: end - start,
        });
        log::info!("slice {id} active after {:.1} simulated s", end - start);
        Ok(record)
    }

    /// Runs one plan step, logging it. On failure returns the message and the
    /// step's index in the log.
    fn run_step(&self, id: &str, step: &PlanStep) -> Result<(), (String, usize)> {
        let mut event = StepEvent {
            entity: step.entity.clone(),
            action: String::new(),
            role: Some(step.role),
            operation: Operation::Provision,
            started_at: 0.0,
            ended_at: 0.0,
            txn_id: None,
            ok: true,
            detail: None,
        };
        let result = match &step.action {
            StepAction::Configure { commands } => {
                event.action = "configure".into();
                let mut agents = self.agents.lock();
                let mut txn = ConfigTransaction::new(agents.next_txn_id(&step.entity), commands.clone());
                event.txn_id = Some(txn.txn_id.clone());
                match agents.apply_transaction(&self.topology, &mut txn) {
                    Ok(ack) => {
                        (event.started_at, event.ended_at) = self.advance(ack.total_s());
                        let applied = AppliedStep { entity: step.entity.clone(), role: step.role, inverse: ack.inverse };
                        self.update(id, |r| r.applied.push(applied));
                        Ok(())
                    }
                    Err(f) => {
                        (event.started_at, event.ended_at) = self.advance(f.elapsed_s);
                        Err(f.to_string())
                    }
                }
            }
            StepAction::VerifyKey { channel_id } => {
                event.action = "verify-key".into();
                let delay = self.agents.lock().delay(KMS_MODEL_ID);
                let seconds = delay.as_ref().copied().unwrap_or(0.0);
                (event.started_at, event.ended_at) = self.advance(seconds);
                delay
                    .map_err(|e| e.to_string())
                    .and_then(|_| self.kms.ensure_channel_key(channel_id).map_err(|e| e.to_string()))
                    .map(|key| event.detail = Some(format!("{channel_id} key {key}")))
            }
        };
        if let Err(message) = &result {
            event.ok = false;
            event.detail = Some(message.clone());
        }
        let index = self.update(id, |r| {
            r.step_log.push(event);
            r.step_log.len() - 1
        });
        result.map_err(|m| (m, index))
    }

    fn rollback(&self, id: &str, pre: &ConfigSnapshot, failed: &PlanStep, message: String, step_index: usize) -> SliceRecord {
        log::warn!("slice {id}: {} failed, rolling back: {message}", failed.entity);
        let applied = self.update(id, |r| {
            r.set_state(SliceState::Failed);
            r.failure = Some(FailureDetail {
                operation: Operation::Provision,
                step_index: Some(step_index),
                entity: failed.entity.clone(),
                message,
                remediation: None,
            });
            std::mem::take(&mut r.applied)
        });
        let undo = self.undo_steps(id, &applied, Operation::Provision, "rollback");
        if let Err((entity, err, remaining)) = undo {
            let note = format!(
                "manual intervention required: rollback on {entity} failed ({err}); {remaining} applied steps remain"
            );
            log::error!("slice {id}: {note}");
            return self.update(id, |r| {
                r.applied = applied[..remaining].to_vec();
                if let Some(f) = &mut r.failure {
                    f.remediation = Some(note);
                }
                r.clone()
            });
        }
        let res = self.update(id, |r| r.reservations.take()).unwrap_or_default();
        let residue = {
            let mut topo = self.topology.write();
            release(&mut topo, id, &res);
            diff(pre, &topo).unwrap_or_default()
        };
        self.update(id, |r| {
            if residue.is_empty() {
                r.set_state(SliceState::RolledBack);
            } else if let Some(f) = &mut r.failure {
                f.remediation = Some(format!("manual intervention required: {} entries differ after rollback", residue.len()));
            }
            r.clone()
        })
    }

    /// Applies the inverses of `applied` in reverse order. On failure returns
    /// the entity, the error and how many steps are still applied.
    fn undo_steps(
        &self,
        id: &str,
        applied: &[AppliedStep],
        operation: Operation,
        action: &str,
    ) -> Result<(), (String, String, usize)> {
        for (i, step) in applied.iter().enumerate().rev() {
            let mut agents = self.agents.lock();
            let mut txn = ConfigTransaction::new(agents.next_txn_id(&step.entity), step.inverse.clone());
            let result = agents.apply_transaction(&self.topology, &mut txn);
            drop(agents);
            let (elapsed, err) = match &result {
                Ok(ack) => (ack.total_s(), None),
                Err(f) => (f.elapsed_s, Some(f.to_string())),
            };
            let (started_at, ended_at) = self.advance(elapsed);
            let event = StepEvent {
                entity: step.entity.clone(),
                action: action.to_string(),
                role: Some(step.role),
                operation,
                started_at,
                ended_at,
                txn_id: Some(txn.txn_id.clone()),
                ok: err.is_none(),
                detail: err.clone(),
            };
            self.update(id, |r| r.step_log.push(event));
            if let Some(e) = err {
                return Err((step.entity.clone(), e, i + 1));
            }
        }
        Ok(())
    }

    /// Tears down an active slice. Repeating it on a deleted slice returns the
    /// record unchanged.
    pub fn deprovision_slice(&self, id: &str) -> Result<SliceRecord, OrchestratorError> {
        let _guard = self.config_lock.acquire(&format!("deprovision {id}"), self.config.lock_timeout())?;
        let rec = self.slice(id).ok_or_else(|| OrchestratorError::UnknownSlice(id.into()))?;
        match rec.state {
            SliceState::Active => {}
            SliceState::Deleted => return Ok(rec),
            state => {
                return Err(OrchestratorError::InvalidState { slice_id: id.into(), state, operation: "deprovision" })
            }
        }
        let start = self.clock_s();
        let applied = self.update(id, |r| {
            r.set_state(SliceState::Deprovisioning);
            r.timings.deprovision_started_at = Some(start);
            r.applied.clone()
        });
        if let Err((entity, err, remaining)) = self.undo_steps(id, &applied, Operation::Deprovision, "unconfigure") {
            let note = format!("manual intervention required: {entity} failed during teardown; {remaining} steps still configured");
            log::error!("slice {id}: {note}");
            return Ok(self.update(id, |r| {
                r.applied.truncate(remaining);
                r.failure = Some(FailureDetail {
                    operation: Operation::Deprovision,
                    step_index: Some(r.step_log.len() - 1),
                    entity,
                    message: err,
                    remediation: Some(note),
                });
                r.set_state(SliceState::Failed);
                r.clone()
            }));
        }
        let (res, pre) = self.update(id, |r| {
            r.applied.clear();
            (r.reservations.take().unwrap_or_default(), r.pre_provision.clone())
        });
        let residue = {
            let mut topo = self.topology.write();
            release(&mut topo, id, &res);
            pre.map(|pre| slice_residue(&pre, &topo, id, &applied)).unwrap_or_default()
        };
        let end = self.clock_s();
        if !residue.is_empty() {
            return Ok(self.update(id, |r| {
                r.failure = Some(FailureDetail {
                    operation: Operation::Deprovision,
                    step_index: None,
                    entity: id.to_string(),
                    message: format!("{} slice entries differ from the pre-provision state", residue.len()),
                    remediation: Some(format!("manual intervention required: {}", residue.join(", "))),
                });
                r.set_state(SliceState::Failed);
                r.clone()
            }));
        }
        let record = self.update(id, |r| {
            r.timings.deprovision_duration_s = Some(end - start);
            r.set_state(SliceState::Deleted);
            r.clone()
        });
        self.timing_log.lock().push(TimingRecord {
            slice_id: id.into(),
            use_case: record.descriptor.name.clone(),
            operation: Operation::Deprovision,
            start_s: start,
            end_s: end,
            duration_s: end - start,
        });
        Ok(record)
    }

    /// Recomputes each connection's weakest hop from the live topology.
    pub fn audit_slice(&self, id: &str) -> Result<AuditReport, OrchestratorError> {
        let rec = self.slice(id).ok_or_else(|| OrchestratorError::UnknownSlice(id.into()))?;
        if rec.state != SliceState::Active {
            return Err(OrchestratorError::InvalidState { slice_id: id.into(), state: rec.state, operation: "audit" });
        }
        let topo = self.topology.read();
        let per_connection = rec
            .paths
            .iter()
            .map(|(role, path)| {
                let required = rec.descriptor.connection(*role).expect("validated").required_security;
                let achieved_min = path
                    .hops
                    .iter()
                    .map(|h| topo.link(h).map(|l| l.security_method()).unwrap_or(SecurityLevel::None))
                    .min()
                    .unwrap_or(required);
                ConnectionAudit { role: *role, required, achieved_min, ok: achieved_min >= required, hops: path.hops.clone() }
            })
            .collect();
        Ok(AuditReport { slice_id: id.into(), per_connection })
    }

    /// SHA-256 over network state and each slice's state and paths. Timing
    /// and key rotation do not contribute.
    pub fn state_hash(&self) -> String {
        let entries: Vec<((String, String), String)> = self.topology.read().state_entries().into_iter().collect();
        let slices: BTreeMap<String, (SliceState, BTreeMap<Role, PathSolution>)> = self
            .slices
            .read()
            .iter()
            .map(|(id, r)| (id.clone(), (r.state, r.paths.clone())))
            .collect();
        let doc = serde_json::to_vec(&(entries, slices)).expect("state serializes");
        hex::encode(Sha256::digest(&doc))
    }

    /// Provisions and tears down `runs` copies of `template`, with slice ids
    /// `{slice_id}-000`, `{slice_id}-001`, ...
    pub fn run_cycles(&self, template: &SliceDescriptor, runs: usize) -> Result<Vec<TimingRecord>, OrchestratorError> {
        let mut out = Vec::with_capacity(2 * runs);
        for i in 0..runs {
            let mut desc = template.clone();
            desc.slice_id = format!("{}-{i:03}", template.slice_id);
            let id = desc.slice_id.clone();
            self.request_slice(desc)?;
            for (op, rec) in [
                (Operation::Provision, self.provision_slice(&id)?),
                (Operation::Deprovision, self.deprovision_slice(&id)?),
            ] {
                let expected = if op == Operation::Provision { SliceState::Active } else { SliceState::Deleted };
                if rec.state != expected {
                    let detail = rec.failure.map(|f| f.message).unwrap_or_default();
                    return Err(OrchestratorError::OperationFailed { slice_id: id, operation: op, state: rec.state, detail });
                }
                let t = &rec.timings;
                let (start, duration) = match op {
                    Operation::Provision => (t.provision_started_at, t.provision_duration_s),
                    Operation::Deprovision => (t.deprovision_started_at, t.deprovision_duration_s),
                };
                let (start, duration) = (start.unwrap_or(0.0), duration.unwrap_or(0.0));
                out.push(TimingRecord {
                    slice_id: id.clone(),
                    use_case: rec.descriptor.name.clone(),
                    operation: op,
                    start_s: start,
                    end_s: start + duration,
                    duration_s: duration,
                });
            }
        }
        Ok(out)
    }
}

fn bandwidths(desc: &SliceDescriptor) -> BTreeMap<Role, f64> {
    desc.connections.iter().map(|c| (c.role, c.bandwidth_gbps)).collect()
}

/// Slice-owned entries that differ from the pre-provision snapshot: device
/// paths the slice configured, ports it owns and allocations it holds.
fn slice_residue(pre: &ConfigSnapshot, now: &Topology, slice_id: &str, applied: &[AppliedStep]) -> Vec<String> {
    let mut out = Vec::new();
    for cmd in applied.iter().flat_map(|s| &s.inverse) {
        let before = pre.config_value(&cmd.device_id, &cmd.path);
        let after = now.device(&cmd.device_id).and_then(|d| d.config_tree.get(&cmd.path)).map(String::as_str);
        if before != after {
            out.push(format!("{}:{}", cmd.device_id, cmd.path));
        }
    }
    for ch in &now.channels {
        for p in &ch.client_ports {
            if p.owner_slice_id.as_deref() == Some(slice_id) {
                out.push(format!("{}:client_ports/{}", ch.id, p.index));
            }
        }
    }
    for (site, holders) in &now.compute_allocations {
        if holders.contains_key(slice_id) {
            out.push(format!("{site}:compute/{slice_id}"));
        }
    }
    let prefix = format!("{slice_id}/");
    for (link, holders) in &now.link_allocations {
        if holders.keys().any(|o| o.starts_with(&prefix)) {
            out.push(format!("{link}:allocations"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{testbed_topology, usecase1, usecase2, USECASE1_SLICE_JSON};
    use crate::topology::SecurityMethod;

    fn fast() -> Orchestrator {
        let mut config = SimConfig::calibrated_default();
        config.time_scale = 0.0;
        config.kms.dh_group = crate::kms::exchange::DhGroup::Custom { prime_hex: "7fffffffffffee27".into(), generator: 4 };
        Orchestrator::new(testbed_topology(), config).unwrap()
    }

    #[test]
    fn usecase_descriptors_validate() {
        let o = fast();
        assert_eq!(o.request_slice(usecase1()).unwrap().state, SliceState::Validated);
        assert_eq!(o.request_slice(usecase2()).unwrap().state, SliceState::Validated);
        let rec = o.slice("uc1-enterprise").unwrap();
        assert_eq!(rec.paths[&Role::Backhaul].hops, ["ch-qkd-1"]);
        assert_eq!(rec.paths[&Role::Access].hops, ["ch-qra"]);
        assert_eq!(rec.paths[&Role::ControlPlane].hops, ["ch-dh"]);
        let rec = o.slice("uc2-cdn").unwrap();
        assert_eq!(rec.paths[&Role::Backhaul].hops, ["ch-qkd-1", "ch-qkd-2"]);
        assert_eq!(rec.paths[&Role::Access].hops, ["al-cell1-agg"]);
    }

    #[test]
    fn two_connections_name_the_missing_role() {
        let mut v: serde_json::Value = serde_json::from_str(USECASE1_SLICE_JSON).unwrap();
        v["connections"].as_array_mut().unwrap().remove(1);
        let err = SliceDescriptor::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.to_string(), "connections: missing role access");
    }

    #[test]
    fn schema_error_names_the_field() {
        let mut v: serde_json::Value = serde_json::from_str(USECASE1_SLICE_JSON).unwrap();
        v["connections"][2]["required_security"] = "quantum".into();
        match SliceDescriptor::from_json(&v.to_string()).unwrap_err() {
            DescriptorError::Schema { path, .. } => assert_eq!(path, "connections[2].required_security"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn endpoints_must_match_roles() {
        let o = fast();
        let mut d = usecase1();
        d.connections[0].dst_site = "metro-1".into();
        let err = o.request_slice(d).unwrap_err();
        assert!(err.to_string().contains("control_plane must join a cell site and the core site"), "{err}");
        let mut d = usecase1();
        d.compute_site = "core-1".into();
        assert!(o.request_slice(d).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected_until_terminal() {
        let o = fast();
        o.request_slice(usecase1()).unwrap();
        assert_eq!(
            o.request_slice(usecase1()).unwrap_err(),
            OrchestratorError::DuplicateSlice("uc1-enterprise".into())
        );
    }

    #[test]
    fn provision_then_deprovision_restores_the_network() {
        let o = fast();
        let before = snapshot(&o.topology.read());
        o.request_slice(usecase1()).unwrap();
        let rec = o.provision_slice("uc1-enterprise").unwrap();
        assert_eq!(rec.state, SliceState::Active, "{:?}", rec.failure);
        assert_eq!(rec.steps(Operation::Provision).count(), 14 + 3);
        for w in rec.step_log.windows(2) {
            assert!(w[0].ended_at <= w[1].started_at);
        }
        let in_use: usize = o
            .topology()
            .channels
            .iter()
            .flat_map(|c| &c.client_ports)
            .filter(|p| p.state == PortState::InUse)
            .count();
        assert_eq!(in_use, 3);
        assert!(o.audit_slice("uc1-enterprise").unwrap().ok());
        let rec = o.deprovision_slice("uc1-enterprise").unwrap();
        assert_eq!(rec.state, SliceState::Deleted);
        assert_eq!(diff(&before, &o.topology.read()).unwrap(), []);
        assert_eq!(
            rec.history,
            [
                SliceState::Requested,
                SliceState::Validated,
                SliceState::Provisioning,
                SliceState::Active,
                SliceState::Deprovisioning,
                SliceState::Deleted
            ]
        );
        let again = o.deprovision_slice("uc1-enterprise").unwrap();
        assert_eq!(again.history, rec.history);
    }

    #[test]
    fn zero_latency_model_provisions_in_under_a_second() {
        let mut config = SimConfig::calibrated_default().with_constant_latency(1e-6);
        config.time_scale = 0.0;
        let o = Orchestrator::new(testbed_topology(), config).unwrap();
        o.request_slice(usecase2()).unwrap();
        let rec = o.provision_slice("uc2-cdn").unwrap();
        assert!(rec.timings.provision_duration_s.unwrap() < 1.0);
    }

    #[test]
    fn metro_switch_fault_rolls_back_cleanly() {
        let o = fast();
        let before = snapshot(&o.topology.read());
        o.request_slice(usecase2()).unwrap();
        o.inject_fault("metro-1-eth", FaultMode::FailNext).unwrap();
        let rec = o.provision_slice("uc2-cdn").unwrap();
        assert_eq!(rec.state, SliceState::RolledBack);
        let f = rec.failure.unwrap();
        assert_eq!(f.entity, "metro-1-eth");
        assert!(f.remediation.is_none());
        assert_eq!(diff(&before, &o.topology.read()).unwrap(), []);
        assert_eq!(*rec.history.last().unwrap(), SliceState::RolledBack);
        // Terminal but re-requestable.
        assert_eq!(o.request_slice(usecase2()).unwrap().state, SliceState::Validated);
    }

    #[test]
    fn corrupted_hop_fails_audit() {
        let o = fast();
        o.request_slice(usecase1()).unwrap();
        o.provision_slice("uc1-enterprise").unwrap();
        o.topology.write().channel_mut("ch-qkd-1").unwrap().security_method = SecurityMethod::DhAes;
        let audit = o.audit_slice("uc1-enterprise").unwrap();
        let backhaul = audit.per_connection.iter().find(|c| c.role == Role::Backhaul).unwrap();
        assert_eq!((backhaul.required, backhaul.achieved_min, backhaul.ok), (SecurityMethod::QkdAes, SecurityMethod::DhAes, false));
    }

    #[test]
    fn deprovision_requires_an_active_slice() {
        let o = fast();
        o.request_slice(usecase1()).unwrap();
        assert!(matches!(
            o.deprovision_slice("uc1-enterprise"),
            Err(OrchestratorError::InvalidState { state: SliceState::Validated, .. })
        ));
        assert!(matches!(o.deprovision_slice("nope"), Err(OrchestratorError::UnknownSlice(_))));
    }

    #[test]
    fn forks_are_independent_and_hash_equal() {
        let o = fast();
        o.request_slice(usecase1()).unwrap();
        let f = o.fork();
        assert_eq!(o.state_hash(), f.state_hash());
        f.provision_slice("uc1-enterprise").unwrap();
        assert_ne!(o.state_hash(), f.state_hash());
        assert_eq!(o.slice("uc1-enterprise").unwrap().state, SliceState::Validated);
    }
}
