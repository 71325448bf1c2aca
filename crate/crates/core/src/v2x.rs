//! Range-gated publish-subscribe fabric connecting vehicles and the
//! roadside unit.
//!
//! Messages are published once per 0.1 s tick and retained for that tick
//! only. Vehicle-to-vehicle delivery is capped by Euclidean range
//! (boundary inclusive); infrastructure traffic is gated by a coverage
//! polygon on the vehicle side. The engine guarantees that all publishes
//! of a tick happen before any delivery of that tick.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::Point2;
use crate::road_map::{PathRef, Region};
use crate::dynamics::VehicleState;

pub type AgentId = u32;

/// State + intent broadcast by one connected vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct CavMessage {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    /// Intended route of the sender.
    pub path: PathRef,
    pub v: f64,
    pub sender_id: AgentId,
    pub t_stamp: f64,
}

impl CavMessage {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// Velocity command addressed to one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfraMessage {
    pub infra_id: AgentId,
    pub t_stamp: f64,
    pub target_id: AgentId,
    pub v_ref: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Cav(CavMessage),
    Infra(InfraMessage),
}

impl Payload {
    fn sender(&self) -> AgentId {
        match self {
            Payload::Cav(m) => m.sender_id,
            Payload::Infra(m) => m.infra_id,
        }
    }

    fn target(&self) -> Option<AgentId> {
        match self {
            Payload::Cav(_) => None,
            Payload::Infra(m) => Some(m.target_id),
        }
    }

    fn kind_str(&self) -> &'static str {
        match self {
            Payload::Cav(_) => "cav",
            Payload::Infra(_) => "infra",
        }
    }

    /// Order-stable content hash (FNV-1a over the canonical field bytes).
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        match self {
            Payload::Cav(m) => {
                h.byte(0x01);
                h.f64(m.x);
                h.f64(m.y);
                h.f64(m.psi);
                h.f64(m.v);
                h.u64(m.sender_id as u64);
                h.f64(m.t_stamp);
                for &sid in m.path.segment_ids() {
                    h.u64(sid as u64);
                }
            }
            Payload::Infra(m) => {
                h.byte(0x02);
                h.u64(m.infra_id as u64);
                h.f64(m.t_stamp);
                h.u64(m.target_id as u64);
                h.f64(m.v_ref);
            }
        }
        h.finish()
    }
}

/// A published message plus the delivery-gating context.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub payload: Payload,
    /// Sender position at publish time; anchors the range check.
    pub sender_position: Point2,
    pub publish_time: f64,
}

/// Bus parameters; read from the scenario file.
#[derive(Debug, Clone)]
pub struct BusConfig {
    /// Vehicle-to-vehicle range cap in meters, boundary inclusive.
    pub v2v_range: f64,
    /// Coverage polygon for infrastructure traffic.
    pub v2i_region: Region,
    pub publish_rate_hz: f64,
    /// Delivery delay in whole ticks (0 = same tick).
    pub latency_ticks: u32,
    /// Independent per-message drop probability.
    pub drop_prob: f64,
}

impl BusConfig {
    pub fn new(v2i_region: Region) -> Self {
        BusConfig {
            v2v_range: 3.0,
            v2i_region,
            publish_rate_hz: 10.0,
            latency_ticks: 0,
            drop_prob: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("sender {sender} exceeded the publish cadence in tick {tick}")]
    RateLimited { sender: AgentId, tick: u64 },
    #[error("sender {sender}: t_stamp went backwards ({prev} -> {next})")]
    TimestampRegression {
        sender: AgentId,
        prev: f64,
        next: f64,
    },
    #[error("infra message targets unknown agent {0}")]
    UnknownTarget(AgentId),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryKind {
    V2v,
    V2i,
}

/// One publish/delivery/drop event, for the optional message trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BusEvent {
    pub tick: u64,
    pub kind: &'static str,
    pub sender: AgentId,
    pub receiver: Option<AgentId>,
    pub message_kind: &'static str,
    pub digest: u64,
}

struct Queued {
    envelope: Envelope,
    tick: u64,
}

/// The shared message fabric. One instance per simulation.
pub struct SimBus {
    config: BusConfig,
    tick: u64,
    queue: Vec<Queued>,
    sent_this_tick: BTreeSet<(AgentId, Option<AgentId>)>,
    last_stamp: BTreeMap<AgentId, f64>,
    registered: BTreeSet<AgentId>,
    rng: ChaCha8Rng,
    events: Vec<BusEvent>,
}

impl SimBus {
    pub fn new(config: BusConfig, seed: u64) -> Self {
        SimBus {
            config,
            tick: 0,
            queue: Vec::new(),
            sent_this_tick: BTreeSet::new(),
            last_stamp: BTreeMap::new(),
            registered: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn register(&mut self, id: AgentId) {
        self.registered.insert(id);
    }

    pub fn unregister(&mut self, id: AgentId) {
        self.registered.remove(&id);
    }

    /// Opens cadence window `tick`, expiring everything no longer
    /// deliverable.
    pub fn begin_tick(&mut self, tick: u64) {
        self.tick = tick;
        self.sent_this_tick.clear();
        let latency = self.config.latency_ticks as u64;
        self.queue.retain(|q| q.tick + latency >= tick);
    }

    /// Publishes a message into the current tick. A sender may publish at
    /// most once per tick per target stream.
    pub fn publish(&mut self, envelope: Envelope) -> Result<(), BusError> {
        let payload = &envelope.payload;
        let sender = payload.sender();
        if !envelope.publish_time.is_finite() || !envelope.sender_position.is_finite() {
            return Err(BusError::InvalidMessage("non-finite envelope".into()));
        }
        if let Payload::Infra(m) = payload {
            if !self.registered.contains(&m.target_id) {
                return Err(BusError::UnknownTarget(m.target_id));
            }
            if !(m.v_ref >= 0.0) || !m.v_ref.is_finite() {
                return Err(BusError::InvalidMessage(format!(
                    "commanded velocity {} out of range",
                    m.v_ref
                )));
            }
        }
        let key = (sender, payload.target());
        if !self.sent_this_tick.insert(key) {
            return Err(BusError::RateLimited {
                sender,
                tick: self.tick,
            });
        }
        let stamp = match payload {
            Payload::Cav(m) => m.t_stamp,
            Payload::Infra(m) => m.t_stamp,
        };
        if let Some(&prev) = self.last_stamp.get(&sender) {
            if stamp < prev {
                return Err(BusError::TimestampRegression {
                    sender,
                    prev,
                    next: stamp,
                });
            }
        }
        self.last_stamp.insert(sender, stamp);

        let digest = payload.digest();
        let kind = payload.kind_str();
        if self.config.drop_prob > 0.0 && self.rng.gen::<f64>() < self.config.drop_prob {
            self.events.push(BusEvent {
                tick: self.tick,
                kind: "drop",
                sender,
                receiver: payload.target(),
                message_kind: kind,
                digest,
            });
            return Ok(());
        }
        self.events.push(BusEvent {
            tick: self.tick,
            kind: "pub",
            sender,
            receiver: payload.target(),
            message_kind: kind,
            digest,
        });
        self.queue.push(Queued {
            envelope,
            tick: self.tick,
        });
        Ok(())
    }

    fn deliverable(&self, q: &Queued) -> bool {
        q.tick + self.config.latency_ticks as u64 == self.tick
    }

    /// Messages visible to one vehicle this tick.
    ///
    /// `V2v`: broadcasts from other vehicles whose sender position is
    /// within range of `receiver_position` (inclusive at the cap).
    /// `V2i`: commands addressed to `receiver_id`, only while the receiver
    /// is inside the coverage polygon.
    pub fn deliver(
        &mut self,
        receiver_id: AgentId,
        receiver_position: Point2,
        kind: DeliveryKind,
    ) -> Vec<Payload> {
        let mut hits: Vec<(f64, AgentId, Payload)> = Vec::new();
        for q in self.queue.iter().filter(|q| self.deliverable(q)) {
            let e = &q.envelope;
            match (kind, &e.payload) {
                (DeliveryKind::V2v, Payload::Cav(m)) => {
                    if m.sender_id != receiver_id
                        && e.sender_position.dist(receiver_position) <= self.config.v2v_range
                    {
                        hits.push((e.publish_time, m.sender_id, e.payload.clone()));
                    }
                }
                (DeliveryKind::V2i, Payload::Infra(m)) => {
                    if m.target_id == receiver_id
                        && self.config.v2i_region.contains(receiver_position)
                    {
                        hits.push((e.publish_time, m.infra_id, e.payload.clone()));
                    }
                }
                _ => {}
            }
        }
        self.finish_delivery(receiver_id, hits)
    }

    /// Vehicle broadcasts reaching the roadside unit: only senders inside
    /// the coverage polygon are heard.
    pub fn deliver_to_infra(&mut self, infra_id: AgentId) -> Vec<CavMessage> {
        let mut hits: Vec<(f64, AgentId, Payload)> = Vec::new();
        for q in self.queue.iter().filter(|q| self.deliverable(q)) {
            if let Payload::Cav(m) = &q.envelope.payload {
                if self.config.v2i_region.contains(q.envelope.sender_position) {
                    hits.push((q.envelope.publish_time, m.sender_id, q.envelope.payload.clone()));
                }
            }
        }
        self.finish_delivery(infra_id, hits)
            .into_iter()
            .filter_map(|p| match p {
                Payload::Cav(m) => Some(m),
                Payload::Infra(_) => None,
            })
            .collect()
    }

    fn finish_delivery(
        &mut self,
        receiver: AgentId,
        mut hits: Vec<(f64, AgentId, Payload)>,
    ) -> Vec<Payload> {
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, sender, payload) in &hits {
            self.events.push(BusEvent {
                tick: self.tick,
                kind: "dlv",
                sender: *sender,
                receiver: Some(receiver),
                message_kind: payload.kind_str(),
                digest: payload.digest(),
            });
        }
        hits.into_iter().map(|(_, _, p)| p).collect()
    }

    /// Drains the accumulated publish/delivery events.
    pub fn take_events(&mut self) -> Vec<BusEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Field-for-field packaging of a vehicle's state and route.
pub fn make_cav_message(state: &VehicleState, path: &PathRef, id: AgentId, t: f64) -> CavMessage {
    CavMessage {
        x: state.x,
        y: state.y,
        psi: state.psi,
        path: path.clone(),
        v: state.v,
        sender_id: id,
        t_stamp: t,
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x100000001b3);
    }
    fn u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.byte(b);
        }
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}
