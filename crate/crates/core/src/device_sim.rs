// SPDX-License-Identifier: Apache-2.0

//! Simulated device agents.
//!
//! Every device exposes a path/value datastore (its `config_tree`) that is
//! changed through [`ConfigTransaction`]s, NETCONF style: commands are staged
//! one by one, each taking a delay drawn from the device's [`LatencyModel`],
//! and the whole transaction commits atomically. A failing command aborts the
//! transaction and leaves every datastore as it was.
//!
//! Per device kind the tree uses these paths:
//!
//! | kind              | path                                        | value            |
//! |-------------------|---------------------------------------------|------------------|
//! | `ethernet_switch` | `flows/<slice>/<role>/{ingress,egress}`     | port or `local`  |
//! | `ethernet_switch` | `flows/<slice>/<role>/bandwidth-gbps`       | Gbps             |
//! | `optical_switch`  | `cross-connects/<channel>/<port>`           | `<slice>/<role>` |
//! | `encryption_card` | `client-ports/<port>/{admin-state,service}` | `up`, owner      |
//! | `encryption_card` | `client-ports/<port>/bandwidth-gbps`        | Gbps             |

use std::collections::BTreeMap;
use std::time::Duration;

use parking_lot::RwLock;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};

use crate::topology::{valid_config_path, ConfigTree, Topology};

/// Wall-clock sleeps shorter than this are accumulated and paid in one go.
const MIN_SLEEP: Duration = Duration::from_millis(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandOp {
    Set,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigCommand {
    pub device_id: String,
    pub op: CommandOp,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl ConfigCommand {
    pub fn set(device_id: impl Into<String>, path: impl Into<String>, value: impl Into<String>) -> Self {
        ConfigCommand {
            device_id: device_id.into(),
            op: CommandOp::Set,
            path: path.into(),
            value: Some(value.into()),
        }
    }

    pub fn delete(device_id: impl Into<String>, path: impl Into<String>) -> Self {
        ConfigCommand { device_id: device_id.into(), op: CommandOp::Delete, path: path.into(), value: None }
    }

    fn check(&self) -> Result<(), DeviceError> {
        let shape_ok = match self.op {
            CommandOp::Set => self.value.is_some(),
            CommandOp::Delete => self.value.is_none(),
        };
        if !shape_ok || !valid_config_path(&self.path) {
            return Err(DeviceError::InvalidCommand(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnStatus {
    Pending,
    Committed,
    RolledBack,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigTransaction {
    pub txn_id: String,
    pub commands: Vec<ConfigCommand>,
    pub status: TxnStatus,
}

impl ConfigTransaction {
    pub fn new(txn_id: impl Into<String>, commands: Vec<ConfigCommand>) -> Self {
        ConfigTransaction { txn_id: txn_id.into(), commands, status: TxnStatus::Pending }
    }

    /// Marks a failed transaction as compensated.
    pub fn mark_rolled_back(&mut self) {
        if self.status == TxnStatus::Failed {
            self.status = TxnStatus::RolledBack;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum Distribution {
    Constant { value_s: f64 },
    /// `mu` and `sigma` of the log of the delay in seconds.
    Lognormal { mu: f64, sigma: f64 },
}

fn default_time_scale() -> f64 {
    1.0
}

/// Delay model for one class of device operation.
///
/// Sampled delays are simulated seconds. The agent sleeps for
/// `delay * time_scale` of wall time; reported durations are never scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub id: String,
    #[serde(flatten)]
    pub distribution: Distribution,
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
}

impl LatencyModel {
    pub fn constant(id: impl Into<String>, value_s: f64) -> Self {
        LatencyModel { id: id.into(), distribution: Distribution::Constant { value_s }, time_scale: 1.0 }
    }

    pub fn lognormal(id: impl Into<String>, mu: f64, sigma: f64) -> Self {
        LatencyModel { id: id.into(), distribution: Distribution::Lognormal { mu, sigma }, time_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let ok = self.time_scale >= 0.0
            && match self.distribution {
                Distribution::Constant { value_s } => value_s > 0.0 && value_s.is_finite(),
                Distribution::Lognormal { mu, sigma } => mu.is_finite() && sigma >= 0.0 && sigma.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(DeviceError::InvalidModel(self.id.clone()))
        }
    }

    /// Expected delay of one operation, in simulated seconds.
    pub fn mean_s(&self) -> f64 {
        match self.distribution {
            Distribution::Constant { value_s } => value_s,
            Distribution::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> f64 {
        match self.distribution {
            Distribution::Constant { value_s } => value_s,
            Distribution::Lognormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).expect("validated lognormal parameters");
                // exp() can underflow to zero for absurd mu; keep delays strictly positive.
                d.sample(rng).max(f64::MIN_POSITIVE)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FaultMode {
    /// The next command on the device fails.
    FailNext,
    /// `n` further commands succeed, the one after fails.
    FailAfterN { n: u32 },
    /// Every operation fails until cleared.
    Offline,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct FaultState {
    fail_in: Option<u32>,
    offline: bool,
}

impl FaultState {
    /// Consumes one command attempt; true when it must fail.
    fn trip(&mut self) -> bool {
        if self.offline {
            return true;
        }
        match self.fail_in {
            Some(0) => {
                self.fail_in = None;
                true
            }
            Some(n) => {
                self.fail_in = Some(n - 1);
                false
            }
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeviceError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("{device}: no entry at {path}")]
    UnknownPath { device: String, path: String },
    #[error("{0}: injected fault")]
    InjectedFault(String),
    #[error("{0}: device offline")]
    Offline(String),
    #[error("cannot invert delete of {0}: no prior value")]
    NoPriorValue(String),
    #[error("malformed command {0}")]
    InvalidCommand(String),
    #[error("no latency model {0}")]
    UnknownLatencyModel(String),
    #[error("invalid latency model {0}")]
    InvalidModel(String),
    #[error("transaction {0} is not pending")]
    NotPending(String),
}

/// Failure of one transaction. No command of it remains applied.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("transaction {txn_id} failed at command {command_index}: {source}")]
pub struct TxnFailure {
    pub txn_id: String,
    pub command_index: usize,
    /// Simulated time spent before the failure surfaced.
    pub elapsed_s: f64,
    pub source: DeviceError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub txn_id: String,
    pub per_command_durations_s: Vec<f64>,
    /// Commands restoring the pre-transaction state, in application order.
    pub inverse: Vec<ConfigCommand>,
}

impl Ack {
    pub fn total_s(&self) -> f64 {
        self.per_command_durations_s.iter().sum()
    }
}

/// Returns the command that undoes `command`, given the value its path held
/// before the command ran.
pub fn invert(command: &ConfigCommand, prior_value: Option<&str>) -> Result<ConfigCommand, DeviceError> {
    let dev = command.device_id.clone();
    match (command.op, prior_value) {
        (CommandOp::Set, None) => Ok(ConfigCommand::delete(dev, command.path.clone())),
        (_, Some(prior)) => Ok(ConfigCommand::set(dev, command.path.clone(), prior)),
        (CommandOp::Delete, None) => Err(DeviceError::NoPriorValue(command.path.clone())),
    }
}

fn entries_under(tree: &ConfigTree, prefix: &str) -> BTreeMap<String, String> {
    let prefix = prefix.trim_end_matches('/');
    tree.iter()
        .filter(|(path, _)| {
            prefix.is_empty()
                || path.as_str() == prefix
                || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'/'))
        })
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// The set of device agents of one network, sharing a seeded delay source.
#[derive(Debug, Clone)]
pub struct DeviceAgents {
    models: BTreeMap<String, LatencyModel>,
    faults: BTreeMap<String, FaultState>,
    rng: ChaCha8Rng,
    time_scale_override: Option<f64>,
    sleep_debt: Duration,
    txn_seq: u64,
}

impl DeviceAgents {
    pub fn new(models: impl IntoIterator<Item = LatencyModel>, seed: u64) -> Result<Self, DeviceError> {
        let mut map = BTreeMap::new();
        for m in models {
            m.validate()?;
            map.insert(m.id.clone(), m);
        }
        Ok(DeviceAgents {
            models: map,
            faults: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            time_scale_override: None,
            sleep_debt: Duration::ZERO,
            txn_seq: 0,
        })
    }

    /// Replaces every model's `time_scale`.
    pub fn with_time_scale(mut self, time_scale: f64) -> Result<Self, DeviceError> {
        if !(time_scale >= 0.0 && time_scale.is_finite()) {
            return Err(DeviceError::InvalidModel(format!("time_scale {time_scale}")));
        }
        self.time_scale_override = Some(time_scale);
        Ok(self)
    }

    pub fn model(&self, id: &str) -> Option<&LatencyModel> {
        self.models.get(id)
    }

    /// Checks that every device of `topology` has a latency model.
    pub fn check_coverage(&self, topology: &Topology) -> Result<(), DeviceError> {
        for d in &topology.devices {
            if !self.models.contains_key(&d.latency_model_id) {
                return Err(DeviceError::UnknownLatencyModel(d.latency_model_id.clone()));
            }
        }
        Ok(())
    }

    pub fn next_txn_id(&mut self, tag: &str) -> String {
        self.txn_seq += 1;
        format!("txn-{:06}-{tag}", self.txn_seq)
    }

    /// Samples one delay of `model_id`, sleeps for its scaled wall time and
    /// returns the unscaled simulated duration.
    pub fn delay(&mut self, model_id: &str) -> Result<f64, DeviceError> {
        let model = self
            .models
            .get(model_id)
            .ok_or_else(|| DeviceError::UnknownLatencyModel(model_id.to_string()))?;
        let simulated = model.sample(&mut self.rng);
        let scale = self.time_scale_override.unwrap_or(model.time_scale);
        self.sleep_debt += Duration::from_secs_f64(simulated * scale);
        if self.sleep_debt >= MIN_SLEEP {
            std::thread::sleep(self.sleep_debt);
            self.sleep_debt = Duration::ZERO;
        }
        Ok(simulated)
    }

    pub fn inject_fault(&mut self, topology: &Topology, device_id: &str, mode: FaultMode) -> Result<(), DeviceError> {
        if topology.device(device_id).is_none() {
            return Err(DeviceError::UnknownDevice(device_id.to_string()));
        }
        let state = self.faults.entry(device_id.to_string()).or_default();
        match mode {
            FaultMode::FailNext => state.fail_in = Some(0),
            FaultMode::FailAfterN { n } => state.fail_in = Some(n),
            FaultMode::Offline => state.offline = true,
        }
        Ok(())
    }

    pub fn clear_fault(&mut self, device_id: &str) {
        self.faults.remove(device_id);
    }

    pub fn clear_all_faults(&mut self) {
        self.faults.clear();
    }

    pub fn is_offline(&self, device_id: &str) -> bool {
        self.faults.get(device_id).is_some_and(|f| f.offline)
    }

    pub fn get_config(
        &self,
        topology: &Topology,
        device_id: &str,
        path_prefix: &str,
    ) -> Result<BTreeMap<String, String>, DeviceError> {
        let dev = topology
            .device(device_id)
            .ok_or_else(|| DeviceError::UnknownDevice(device_id.to_string()))?;
        if self.is_offline(device_id) {
            return Err(DeviceError::Offline(device_id.to_string()));
        }
        Ok(entries_under(&dev.config_tree, path_prefix))
    }

    /// Stages and commits `txn` against the shared topology.
    ///
    /// Delays are served without holding the topology lock; the commit itself
    /// takes the write lock once, so readers never observe a partial
    /// transaction.
    pub fn apply_transaction(
        &mut self,
        topology: &RwLock<Topology>,
        txn: &mut ConfigTransaction,
    ) -> Result<Ack, TxnFailure> {
        let fail = |txn: &mut ConfigTransaction, index, elapsed_s, source| {
            txn.status = TxnStatus::Failed;
            Err(TxnFailure { txn_id: txn.txn_id.clone(), command_index: index, elapsed_s, source })
        };
        if txn.status != TxnStatus::Pending {
            let id = txn.txn_id.clone();
            return fail(txn, 0, 0.0, DeviceError::NotPending(id));
        }

        let model_ids: Vec<Result<String, DeviceError>> = {
            let topo = topology.read();
            txn.commands
                .iter()
                .map(|c| {
                    c.check()?;
                    topo.device(&c.device_id)
                        .map(|d| d.latency_model_id.clone())
                        .ok_or_else(|| DeviceError::UnknownDevice(c.device_id.clone()))
                })
                .collect()
        };

        let mut durations = Vec::with_capacity(txn.commands.len());
        for (i, model_id) in model_ids.into_iter().enumerate() {
            let elapsed: f64 = durations.iter().sum();
            let model_id = match model_id {
                Ok(m) => m,
                Err(e) => return fail(txn, i, elapsed, e),
            };
            let delay = match self.delay(&model_id) {
                Ok(d) => d,
                Err(e) => return fail(txn, i, elapsed, e),
            };
            durations.push(delay);
            let device = &txn.commands[i].device_id;
            let state = self.faults.get_mut(device);
            if let Some(state) = state {
                let offline = state.offline;
                if state.trip() {
                    let err = if offline {
                        DeviceError::Offline(device.clone())
                    } else {
                        DeviceError::InjectedFault(device.clone())
                    };
                    return fail(txn, i, elapsed + delay, err);
                }
            }
        }
        let total: f64 = durations.iter().sum();

        let mut topo = topology.write();
        let mut inverse: Vec<ConfigCommand> = Vec::with_capacity(txn.commands.len());
        for (i, cmd) in txn.commands.iter().enumerate() {
            let tree = &mut topo.device_mut(&cmd.device_id).expect("checked above").config_tree;
            let prior = tree.get(&cmd.path).cloned();
            let applied = match cmd.op {
                CommandOp::Set => {
                    tree.insert(cmd.path.clone(), cmd.value.clone().expect("checked above"));
                    Ok(())
                }
                CommandOp::Delete if prior.is_some() => {
                    tree.remove(&cmd.path);
                    Ok(())
                }
                CommandOp::Delete => Err(DeviceError::UnknownPath {
                    device: cmd.device_id.clone(),
                    path: cmd.path.clone(),
                }),
            };
            match applied.and_then(|()| invert(cmd, prior.as_deref())) {
                Ok(undo) => inverse.push(undo),
                Err(e) => {
                    for undo in inverse.iter().rev() {
                        let tree = &mut topo.device_mut(&undo.device_id).expect("checked above").config_tree;
                        match &undo.value {
                            Some(v) => tree.insert(undo.path.clone(), v.clone()),
                            None => tree.remove(&undo.path),
                        };
                    }
                    drop(topo);
                    return fail(txn, i, total, e);
                }
            }
        }
        drop(topo);
        txn.status = TxnStatus::Committed;
        Ok(Ack {
            txn_id: txn.txn_id.clone(),
            per_command_durations_s: durations,
            inverse: inverse.into_iter().rev().collect(),
        })
    }
}
