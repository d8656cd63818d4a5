// SPDX-License-Identifier: Apache-2.0

//! Property tests for the invariants that hold across modules.

mod support;

use std::collections::BTreeSet;

use parking_lot::RwLock;
use proptest::prelude::*;
use qslice_core::device_sim::{ConfigCommand, ConfigTransaction, DeviceAgents, FaultMode};
use qslice_core::orchestrator::SliceState;
use qslice_core::scenarios::{fast_config, random_topology, testbed_topology, usecase1, usecase2, RandomTopologySpec};
use qslice_core::topology::{diff, snapshot, PortState};
use qslice_core::{compute_path, Orchestrator, Policy, SecurityMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn agents(seed: u64, time_scale: f64) -> DeviceAgents {
    DeviceAgents::new(fast_config().latency_models, seed).unwrap().with_time_scale(time_scale).unwrap()
}

fn command_strategy(devices: Vec<String>) -> impl Strategy<Value = ConfigCommand> {
    let paths = prop::sample::select(vec!["flows/a", "flows/b", "flows/c", "xc/1", "xc/2"]);
    (prop::sample::select(devices), paths, prop::option::of("[a-z]{1,4}")).prop_map(|(d, p, v)| match v {
        Some(v) => ConfigCommand::set(d, p, v),
        None => ConfigCommand::delete(d, p),
    })
}

fn device_ids() -> Vec<String> {
    testbed_topology().devices.iter().take(4).map(|d| d.id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn replaying_inverses_restores_the_snapshot(
        txns in prop::collection::vec(prop::collection::vec(command_strategy(device_ids()), 1..5), 1..8),
    ) {
        let topo = RwLock::new(testbed_topology());
        let before = snapshot(&topo.read());
        let mut a = agents(1, 0.0);
        let mut inverses = Vec::new();
        for (i, commands) in txns.into_iter().enumerate() {
            let mut txn = ConfigTransaction::new(format!("t{i}"), commands);
            // Deleting an absent path is refused; such transactions change nothing.
            if let Ok(ack) = a.apply_transaction(&topo, &mut txn) {
                inverses.push(ack.inverse);
            }
        }
        for (i, inverse) in inverses.into_iter().enumerate().rev() {
            let mut txn = ConfigTransaction::new(format!("u{i}"), inverse);
            prop_assert!(a.apply_transaction(&topo, &mut txn).is_ok());
        }
        prop_assert!(diff(&before, &topo.read()).unwrap().is_empty());
    }

    #[test]
    fn failed_transactions_leave_no_partial_write(
        commands in prop::collection::vec(command_strategy(device_ids()), 2..6),
        fail_at in 0u32..5,
    ) {
        let topo = RwLock::new(testbed_topology());
        let mut a = agents(2, 0.0);
        a.inject_fault(&topo.read(), &commands[0].device_id, FaultMode::FailAfterN { n: fail_at }).unwrap();
        let before = snapshot(&topo.read());
        let mut txn = ConfigTransaction::new("t", commands);
        if a.apply_transaction(&topo, &mut txn).is_err() {
            prop_assert!(diff(&before, &topo.read()).unwrap().is_empty());
        }
    }

    #[test]
    fn seeded_agents_are_deterministic(
        seed in any::<u64>(),
        commands in prop::collection::vec(command_strategy(device_ids()), 1..6),
    ) {
        let run = || {
            let topo = RwLock::new(testbed_topology());
            let mut a = agents(seed, 0.0);
            let mut txn = ConfigTransaction::new("t", commands.clone());
            let ack = a.apply_transaction(&topo, &mut txn).map(|ack| ack.per_command_durations_s).ok();
            let trees: Vec<_> = topo.read().devices.iter().map(|d| d.config_tree.clone()).collect();
            (ack, trees)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn raising_required_security_never_lowers_path_security(seed in any::<u64>(), sites in 3usize..=8, links in 3usize..=14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = random_topology(&mut rng, RandomTopologySpec::new(sites, links));
        let (mut req, _) = support::random_request(&mut rng, &topo);
        req.max_latency_us = None;
        let mut last = None;
        for level in SecurityMethod::ALL {
            req.required_security = level;
            if let Ok(sol) = compute_path(&topo, &req, Policy::UpgradeAllowed) {
                prop_assert!(sol.min_security_on_path >= level);
                if let Some(prev) = last {
                    prop_assert!(sol.min_security_on_path >= prev);
                }
                last = Some(sol.min_security_on_path);
            }
        }
    }
}

#[test]
fn one_key_per_channel_and_retired_keys_only_grow() {
    let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
    let kms = orch.kms();
    let mut retired: Vec<_> = Vec::new();
    for step in 2..=120 {
        kms.advance_to(f64::from(step) * 0.5).unwrap();
        let now = kms.retired_ids();
        assert_eq!(&now[..retired.len()], &retired[..], "retired set rewritten");
        retired = now;
        let topo = orch.topology();
        for status in kms.status().channels {
            let ch = topo.channel(&status.channel_id).unwrap();
            assert!(ch.security_method.is_encrypted());
            assert_eq!(status.active_key_id, ch.active_key_id, "{}", ch.id);
            assert!(status.active_key_id.is_some());
        }
    }
}

#[test]
fn section_draws_respect_the_key_rate() {
    let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
    let kms = orch.kms();
    for t in 1..=60 {
        kms.advance_to(f64::from(t)).unwrap();
    }
    let rate = fast_config().kms.secret_key_rate_bps;
    let limit = (rate * 60.0 / 256.0).floor() as u64;
    let chains = kms.status().chains;
    assert!(!chains.is_empty());
    for s in chains.iter().flat_map(|c| &c.sections) {
        assert!(s.produced <= limit, "{} produced {} > {limit}", s.id, s.produced);
        assert!(s.consumed <= s.produced);
    }
}

#[test]
fn key_schedule_is_reproducible() {
    let run = || {
        let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
        orch.kms().advance_to(30.0).unwrap();
        let ids = orch.kms().retired_ids();
        let material: Vec<_> = ids.iter().map(|id| orch.kms().key_info(*id).map(|k| format!("{k:?}"))).collect();
        (ids, material, orch.kms().status())
    };
    assert_eq!(run(), run());
}

#[test]
fn lifecycle_obeys_transitions_and_sequential_steps() {
    let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
    orch.kms().advance_to(2.0).unwrap();
    let free_before = snapshot(&orch.topology()).free_port_count();
    for desc in [usecase1(), usecase2()] {
        let id = desc.slice_id.clone();
        let mut desc = desc;
        desc.slice_id = format!("{id}-x");
        let rec = orch.submit(desc.clone()).unwrap();
        assert_eq!(rec.state, SliceState::Active);
        let rec = orch.deprovision_slice(&desc.slice_id).unwrap();
        assert_eq!(rec.state, SliceState::Deleted);
        for w in rec.history.windows(2) {
            assert!(w[0].can_transition(w[1]), "{:?} -> {:?}", w[0], w[1]);
        }
        for w in rec.step_log.windows(2) {
            assert!(w[0].ended_at <= w[1].started_at, "overlapping steps {w:?}");
        }
    }
    assert_eq!(snapshot(&orch.topology()).free_port_count(), free_before);
}

#[test]
fn in_use_ports_match_active_reservations() {
    let orch = Orchestrator::new(testbed_topology(), fast_config()).unwrap();
    orch.kms().advance_to(2.0).unwrap();
    let mut ids = Vec::new();
    for (i, desc) in support::contending_slices().into_iter().enumerate() {
        if orch.submit(desc.clone()).is_ok() {
            ids.push(desc.slice_id);
        }
        let topo = orch.topology();
        let in_use = topo.channels.iter().flat_map(|c| &c.client_ports).filter(|p| p.state == PortState::InUse).count();
        let reserved: usize = orch
            .slices()
            .iter()
            .filter(|r| r.state == SliceState::Active)
            .flat_map(|r| r.paths.values())
            .map(|p| p.reserved_ports.len())
            .sum();
        assert_eq!(in_use, reserved, "after submission {i}");
        assert!(topo.channels.iter().all(|c| c.client_ports.len() == 10));
    }
    let owners: BTreeSet<_> = orch.topology().channels.iter().flat_map(|c| &c.client_ports).filter_map(|p| p.owner_slice_id.clone()).collect();
    assert!(owners.iter().all(|o| ids.contains(o)));
}
