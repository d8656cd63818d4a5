// SPDX-License-Identifier: Apache-2.0

//! Frame-level emulation of a slice's traffic over one client port.
//!
//! The sender frames each payload under the channel's active key at send
//! time; the receiver looks the key up again by the id carried in the frame,
//! so a frame sent just before a refresh still opens inside the grace window.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use parking_lot::Mutex;
use qslice_core::kms::{KeyId, KmsError, Requester};
use qslice_core::orchestrator::SliceState;
use qslice_core::topology::PortState;
use qslice_core::Orchestrator;
use serde::{Deserialize, Serialize};

use crate::frame::{Frame, FrameError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataPlaneError {
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("port {port} of {channel_id} is not in use by an active slice")]
    PortNotInUse { channel_id: String, port: u8 },
    #[error("key unavailable: {0}")]
    Key(#[from] KmsError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("nonce reused under key {0}")]
    NonceReuse(KeyId),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub channel_id: String,
    pub client_port: u8,
    pub delivered: usize,
    pub decrypt_failures: usize,
    /// Key id of each frame, `None` for plaintext frames.
    pub key_ids: Vec<Option<KeyId>>,
    /// Encoded frames as hex.
    pub wire: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub frames: usize,
    pub delivered: usize,
    pub decrypt_failures: usize,
    pub distinct_key_ids: usize,
    pub data_per_key_gb: f64,
}

#[derive(Debug, Default)]
struct SendState {
    next_seq: BTreeMap<(String, u8), u64>,
    used_nonces: HashSet<(KeyId, [u8; 12])>,
}

#[derive(Debug)]
pub struct DataPlane {
    orch: Arc<Orchestrator>,
    state: Mutex<SendState>,
}

struct PortContext {
    encrypted: bool,
    near: Requester,
    far: Requester,
}

impl DataPlane {
    pub fn new(orch: Arc<Orchestrator>) -> Self {
        DataPlane { orch, state: Mutex::new(SendState::default()) }
    }

    fn port_context(&self, channel_id: &str, port: u8) -> Result<PortContext, DataPlaneError> {
        let topo = self.orch.topology_handle().read();
        let ch = topo.channel(channel_id).ok_or_else(|| DataPlaneError::UnknownChannel(channel_id.into()))?;
        let not_in_use = || DataPlaneError::PortNotInUse { channel_id: channel_id.into(), port };
        let p = ch.port(port).ok_or_else(not_in_use)?;
        let owner = match (&p.state, &p.owner_slice_id) {
            (PortState::InUse, Some(owner)) => owner.clone(),
            _ => return Err(not_in_use()),
        };
        let ctx = PortContext {
            encrypted: ch.security_method.is_encrypted(),
            near: Requester { channel_id: channel_id.into(), device_id: ch.a_device_port.device.clone() },
            far: Requester { channel_id: channel_id.into(), device_id: ch.b_device_port.device.clone() },
        };
        drop(topo);
        match self.orch.slice(&owner) {
            Some(rec) if rec.state == SliceState::Active => Ok(ctx),
            _ => Err(not_in_use()),
        }
    }

    /// Sends `payloads` over `channel_id`/`port`, first advancing the key
    /// clock to `at_s` when given.
    pub fn send_frames(
        &self,
        channel_id: &str,
        port: u8,
        payloads: &[Vec<u8>],
        at_s: Option<f64>,
    ) -> Result<DeliveryReport, DataPlaneError> {
        let kms = self.orch.kms();
        if let Some(t) = at_s {
            kms.advance_to(t)?;
        }
        let ctx = self.port_context(channel_id, port)?;
        let key = if ctx.encrypted {
            let id = kms.active_key(channel_id)?;
            Some((id, kms.get_key(id, &ctx.near)?))
        } else {
            None
        };
        let mut report = DeliveryReport { channel_id: channel_id.into(), client_port: port, ..Default::default() };
        for payload in payloads {
            let (seq, nonce) = {
                let mut st = self.state.lock();
                let counter = st.next_seq.entry((channel_id.to_string(), port)).or_insert(0);
                let seq = *counter;
                *counter += 1;
                let mut nonce = [0u8; 12];
                nonce[..4].copy_from_slice(&u32::from(port).to_be_bytes());
                nonce[4..].copy_from_slice(&seq.to_be_bytes());
                if let Some((id, _)) = &key {
                    if !st.used_nonces.insert((*id, nonce)) {
                        return Err(DataPlaneError::NonceReuse(*id));
                    }
                }
                (seq, nonce)
            };
            let frame = match &key {
                Some((id, material)) => Frame::seal(material, *id, seq, nonce, payload)?,
                None => Frame::plaintext(seq, nonce, payload),
            };
            let wire = frame.encode()?;
            report.key_ids.push(key.as_ref().map(|(id, _)| *id));
            report.wire.push(hex::encode(&wire));

            // Far end.
            let received = Frame::decode(&wire)?;
            let opened = match received.mode {
                crate::frame::Mode::Plaintext => received.open(None).ok(),
                crate::frame::Mode::Aes256Gcm => {
                    kms.get_key(received.key_id, &ctx.far).ok().and_then(|k| received.open(Some(&k)).ok())
                }
            };
            if opened.as_deref() == Some(payload.as_slice()) {
                report.delivered += 1;
            } else {
                report.decrypt_failures += 1;
            }
        }
        Ok(report)
    }

    /// One `payload_bytes` frame every `interval_s` from `start_s` to `end_s`
    /// inclusive, on the key clock.
    pub fn stream(
        &self,
        channel_id: &str,
        port: u8,
        start_s: f64,
        end_s: f64,
        interval_s: f64,
        payload_bytes: usize,
    ) -> Result<StreamReport, DataPlaneError> {
        let mut out = StreamReport::default();
        let mut keys = BTreeSet::new();
        let steps = ((end_s - start_s) / interval_s).floor() as usize;
        for i in 0..=steps {
            let t = start_s + i as f64 * interval_s;
            let payload: Vec<u8> = (0..payload_bytes).map(|b| (b as u64 ^ i as u64) as u8).collect();
            let r = self.send_frames(channel_id, port, &[payload], Some(t))?;
            out.frames += 1;
            out.delivered += r.delivered;
            out.decrypt_failures += r.decrypt_failures;
            keys.extend(r.key_ids.into_iter().flatten());
        }
        out.distinct_key_ids = keys.len();
        out.data_per_key_gb = self
            .orch
            .topology_handle()
            .read()
            .channel(channel_id)
            .map(|c| c.data_per_key_gb())
            .unwrap_or(0.0);
        Ok(out)
    }

    /// Nonces used so far under `key_id`.
    pub fn nonces_used(&self, key_id: KeyId) -> usize {
        self.state.lock().used_nonces.iter().filter(|(k, _)| *k == key_id).count()
    }
}
