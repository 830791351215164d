//! Store-and-forward mesoscopic simulation.
//!
//! Vehicles traverse a lane in its (tick-rounded) free-flow time, then join
//! the point queue of the movement the lane serves. Each green movement
//! discharges through a fractional accumulator at its saturation rate into
//! the next lane of the vehicle's route, provided that lane has room.
//! Vehicles on a sink lane leave the network at the end of the lane.
//!
//! One call to [`SimState::step`] advances one tick:
//! spawn → enter from backlog → arrivals → discharge → wait accrual → clock+1.

use crate::demand::{sample_turns, Demand, FlowSpec};
use crate::net::{
    Arm, IntersectionId, LaneEnd, LaneId, MovementId, PhaseId, RoadNetwork, Turn, LANES_PER_ROAD,
    MOVEMENTS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("expected {expected} signals, got {got}")]
    SignalCount { expected: usize, got: usize },
    #[error("phase {phase} not in the table of intersection {node}")]
    UnknownPhase { node: usize, phase: usize },
    #[error("invalid route: {0}")]
    Route(String),
    #[error("lane {0} is full")]
    LaneFull(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Seconds per tick.
    pub tick: u32,
    /// Seconds.
    pub episode_length: u32,
    /// Seconds between control decisions.
    pub control_interval: u32,
    pub seed: u64,
    /// Routes longer than this many intersections are forced straight.
    pub max_route_hops: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick: 1,
            episode_length: 3600,
            control_interval: 15,
            seed: 0,
            max_route_hops: 32,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.tick == 0 || self.control_interval == 0 || self.episode_length == 0 {
            return Err(SimError::Config("tick, interval and length must be positive".into()));
        }
        if !self.control_interval.is_multiple_of(self.tick) {
            return Err(SimError::Config(format!(
                "control interval {} not divisible by tick {}",
                self.control_interval, self.tick
            )));
        }
        if !self.episode_length.is_multiple_of(self.control_interval) {
            return Err(SimError::Config(format!(
                "episode length {} not divisible by control interval {}",
                self.episode_length, self.control_interval
            )));
        }
        Ok(())
    }

    pub fn steps_per_episode(&self) -> usize {
        (self.episode_length / self.control_interval) as usize
    }
}

/// Signal state held by one intersection for a tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signal {
    Phase(PhaseId),
    /// Every controlled movement red; right turns still flow.
    AllRed,
    /// Every movement green (used for free-flow checks).
    AllGreen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VehicleId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleState {
    /// Spawned but waiting at the boundary for room on its first lane.
    Backlogged,
    Running { lane: LaneId, arrival_due: u32 },
    Queued { lane: LaneId, movement: MovementId },
    Exited,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    pub route: Vec<LaneId>,
    /// Index into `route` of the current lane.
    pub pos: usize,
    pub spawn_time: u32,
    pub entry_time: Option<u32>,
    pub exit_time: Option<u32>,
    /// Seconds spent queued, whole trip.
    pub accum_wait: u32,
    /// Seconds spent queued on the current lane.
    pub lane_wait: u32,
    /// Free-flow time of the whole route, seconds.
    pub free_flow_time: u32,
    pub state: VehicleState,
}

/// Record of a vehicle that left the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedTrip {
    pub vehicle: VehicleId,
    pub entry_time: u32,
    pub exit_time: u32,
    pub trip_time: u32,
    pub delay: u32,
    pub wait: u32,
}

/// Cumulative per-intersection counters; interval values are differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeCounters {
    /// Σ over ticks of the intersection queue length (= queued vehicle-seconds).
    pub queue_sum: u64,
    /// Σ over ticks of intersection pressure.
    pub pressure_sum: f64,
    /// Vehicles that entered one of the incoming lanes.
    pub inlane_arrivals: u64,
    /// Vehicles discharged through any movement.
    pub discharged: u64,
    /// Σ of approach waits of discharged vehicles.
    pub discharge_wait_sum: u64,
    pub ticks: u64,
}

#[derive(Clone, Debug, Default)]
struct LaneState {
    running: VecDeque<(u32, VehicleId)>,
    queue: VecDeque<VehicleId>,
    backlog: VecDeque<VehicleId>,
}

impl LaneState {
    fn count(&self) -> usize {
        self.running.len() + self.queue.len()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct MovementState {
    acc: f64,
    discharged: u64,
}

/// Aggregates over completed vehicles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub completed: usize,
    pub mean_trip_time: f64,
    pub mean_delay: f64,
    pub mean_wait: f64,
}

#[derive(Clone, Debug)]
pub struct SimState {
    net: Arc<RoadNetwork>,
    demand: Arc<Demand>,
    cfg: SimConfig,
    clock: u32,
    rng: ChaCha8Rng,
    lanes: Vec<LaneState>,
    /// In-lane → (intersection, movement).
    lane_movement: Vec<Option<(IntersectionId, MovementId)>>,
    travel: Vec<u32>,
    movements: Vec<[MovementState; MOVEMENTS]>,
    signals: Vec<Signal>,
    vehicles: Vec<Vehicle>,
    completed: Vec<CompletedTrip>,
    counters: Vec<NodeCounters>,
    entered: u64,
    exited: u64,
}

impl SimState {
    pub fn new(net: Arc<RoadNetwork>, demand: Arc<Demand>, cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        for f in &demand.flows {
            let ok = net
                .intersections
                .get(f.entry.node)
                .is_some_and(|n| n.neighbors[f.entry.arm.index()].is_none());
            if !ok {
                return Err(SimError::Route(format!(
                    "flow entry ({}, {:?}) is not a boundary approach",
                    f.entry.node, f.entry.arm
                )));
            }
        }
        let tick = cfg.tick as f64;
        let lane_movement = net
            .lanes
            .iter()
            .map(|l| match l.to {
                LaneEnd::Node { node, slot } => MovementId::new(slot as u8 + 1).map(|m| (node, m)),
                _ => None,
            })
            .collect();
        let travel = net.lanes.iter().map(|l| l.params.travel_ticks(tick)).collect();
        let n = net.len();
        Ok(SimState {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            lanes: vec![LaneState::default(); net.lanes.len()],
            lane_movement,
            travel,
            movements: vec![[MovementState::default(); MOVEMENTS]; n],
            signals: vec![Signal::AllRed; n],
            vehicles: Vec::new(),
            completed: Vec::new(),
            counters: vec![NodeCounters::default(); n],
            entered: 0,
            exited: 0,
            clock: 0,
            net,
            demand,
            cfg,
        })
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn exited(&self) -> u64 {
        self.exited
    }

    pub fn in_network(&self) -> u64 {
        self.lanes.iter().map(|l| l.count() as u64).sum()
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> &Vehicle {
        &self.vehicles[id.0]
    }

    pub fn completed(&self) -> &[CompletedTrip] {
        &self.completed
    }

    pub fn counters(&self, i: IntersectionId) -> NodeCounters {
        self.counters[i.0]
    }

    pub fn signal(&self, i: IntersectionId) -> Signal {
        self.signals[i.0]
    }

    pub fn lane_count(&self, lane: LaneId) -> usize {
        self.lanes[lane.0].count()
    }

    pub fn lane_queue(&self, lane: LaneId) -> usize {
        self.lanes[lane.0].queue.len()
    }

    pub fn lane_queue_ids(&self, lane: LaneId) -> impl Iterator<Item = VehicleId> + '_ {
        self.lanes[lane.0].queue.iter().copied()
    }

    pub fn backlog(&self, lane: LaneId) -> usize {
        self.lanes[lane.0].backlog.len()
    }

    /// Cumulative vehicles discharged through movement `m` of `i`.
    pub fn discharged(&self, i: IntersectionId, m: MovementId) -> u64 {
        self.movements[i.0][m.slot()].discharged
    }

    pub fn is_green(&self, i: IntersectionId, m: MovementId) -> bool {
        movement_green(&self.net, i, self.signals[i.0], m)
    }

    /// Lane sequence for a vehicle entering at (`node`, `arm`) with `turns`.
    pub fn route_lanes(&self, node: usize, arm: Arm, turns: &[Turn]) -> Result<Vec<LaneId>, SimError> {
        route_lanes(&self.net, node, arm, turns)
    }

    /// Put a vehicle directly onto the first lane of `route` at the current
    /// clock, either running from the lane start or already queued.
    pub fn place_vehicle(&mut self, route: Vec<LaneId>, queued: bool) -> Result<VehicleId, SimError> {
        let first = *route.first().ok_or_else(|| SimError::Route("empty route".into()))?;
        if self.lanes[first.0].count() >= self.net.lane(first).params.capacity {
            return Err(SimError::LaneFull(first.0));
        }
        if queued && self.lane_movement[first.0].is_none() {
            return Err(SimError::Route("cannot queue on a sink lane".into()));
        }
        let id = VehicleId(self.vehicles.len());
        let ff = route.iter().map(|l| self.travel[l.0]).sum();
        self.vehicles.push(Vehicle {
            id,
            route,
            pos: 0,
            spawn_time: self.clock,
            entry_time: None,
            exit_time: None,
            accum_wait: 0,
            lane_wait: 0,
            free_flow_time: ff,
            state: VehicleState::Backlogged,
        });
        self.enter_lane(id, first, self.clock);
        self.entered += 1;
        self.vehicles[id.0].entry_time = Some(self.clock);
        if queued {
            let lane = &mut self.lanes[first.0];
            lane.running.pop_back();
            lane.queue.push_back(id);
            let (_, m) = self.lane_movement[first.0].expect("checked above");
            self.vehicles[id.0].state = VehicleState::Queued { lane: first, movement: m };
        }
        Ok(id)
    }

    /// Advance one tick under the given per-intersection signals.
    pub fn step(&mut self, signals: &[Signal]) -> Result<(), SimError> {
        let n = self.net.len();
        if signals.len() != n {
            return Err(SimError::SignalCount {
                expected: n,
                got: signals.len(),
            });
        }
        for (i, s) in signals.iter().enumerate() {
            if let Signal::Phase(p) = s {
                if p.index() >= self.net.intersections[i].phase_table.len() {
                    return Err(SimError::UnknownPhase {
                        node: i,
                        phase: p.index(),
                    });
                }
            }
        }
        self.signals.copy_from_slice(signals);
        let now = self.clock;

        // Demand.
        let spawned = spawn(&self.demand.flows, &self.net, now, self.cfg.tick, self.cfg.max_route_hops, &mut self.rng);
        for turns in spawned {
            let flow = &self.demand.flows[turns.0];
            let route = route_lanes(&self.net, flow.entry.node, flow.entry.arm, &turns.1)?;
            let id = VehicleId(self.vehicles.len());
            let ff = route.iter().map(|l| self.travel[l.0]).sum();
            let first = route[0];
            self.vehicles.push(Vehicle {
                id,
                route,
                pos: 0,
                spawn_time: now,
                entry_time: None,
                exit_time: None,
                accum_wait: 0,
                lane_wait: 0,
                free_flow_time: ff,
                state: VehicleState::Backlogged,
            });
            self.lanes[first.0].backlog.push_back(id);
        }
        for lane_idx in 0..self.lanes.len() {
            let cap = self.net.lanes[lane_idx].params.capacity;
            while self.lanes[lane_idx].count() < cap {
                let Some(id) = self.lanes[lane_idx].backlog.pop_front() else { break };
                self.enter_lane(id, LaneId(lane_idx), now);
                self.vehicles[id.0].entry_time = Some(now);
                self.entered += 1;
            }
        }

        // Arrivals at the stop line or the network exit.
        for lane_idx in 0..self.lanes.len() {
            while let Some(&(due, id)) = self.lanes[lane_idx].running.front() {
                if due > now {
                    break;
                }
                self.lanes[lane_idx].running.pop_front();
                match self.lane_movement[lane_idx] {
                    Some((_, m)) => {
                        self.lanes[lane_idx].queue.push_back(id);
                        self.vehicles[id.0].state = VehicleState::Queued {
                            lane: LaneId(lane_idx),
                            movement: m,
                        };
                    }
                    None => self.exit(id, due),
                }
            }
        }

        // Discharge.
        let tick = self.cfg.tick as f64;
        for i in 0..n {
            let node = IntersectionId(i);
            for m in MovementId::all() {
                let green = movement_green(&self.net, node, signals[i], m);
                if !green {
                    self.movements[i][m.slot()].acc = 0.0;
                    continue;
                }
                let in_lane = self.net.intersections[i].incoming[m.slot()];
                let sat = self.net.lanes[in_lane.0].params.sat_rate;
                let mut acc = self.movements[i][m.slot()].acc + sat * tick;
                while acc >= 1.0 {
                    let Some(&id) = self.lanes[in_lane.0].queue.front() else { break };
                    let v = &self.vehicles[id.0];
                    let next = v.route[v.pos + 1];
                    if self.lanes[next.0].count() >= self.net.lanes[next.0].params.capacity {
                        break;
                    }
                    self.lanes[in_lane.0].queue.pop_front();
                    let lane_wait = self.vehicles[id.0].lane_wait;
                    let c = &mut self.counters[i];
                    c.discharged += 1;
                    c.discharge_wait_sum += lane_wait as u64;
                    self.movements[i][m.slot()].discharged += 1;
                    self.vehicles[id.0].pos += 1;
                    self.enter_lane(id, next, now);
                    acc -= 1.0;
                }
                self.movements[i][m.slot()].acc = acc.min(1.0);
            }
        }

        // Wait accrual and per-tick intersection statistics.
        for lane in &self.lanes {
            for id in &lane.queue {
                let v = &mut self.vehicles[id.0];
                v.accum_wait += self.cfg.tick;
                v.lane_wait += self.cfg.tick;
            }
        }
        for i in 0..n {
            let q = self.queue_length(IntersectionId(i)) as u64;
            let p = self.pressure_intersection(IntersectionId(i));
            let c = &mut self.counters[i];
            c.queue_sum += q * self.cfg.tick as u64;
            c.pressure_sum += p * self.cfg.tick as f64;
            c.ticks += 1;
        }

        self.clock += self.cfg.tick;
        Ok(())
    }

    fn enter_lane(&mut self, id: VehicleId, lane: LaneId, now: u32) {
        let due = now + self.travel[lane.0];
        self.lanes[lane.0].running.push_back((due, id));
        let v = &mut self.vehicles[id.0];
        v.state = VehicleState::Running { lane, arrival_due: due };
        v.lane_wait = 0;
        if let Some((node, _)) = self.lane_movement[lane.0] {
            self.counters[node.0].inlane_arrivals += 1;
        }
    }

    fn exit(&mut self, id: VehicleId, at: u32) {
        let v = &mut self.vehicles[id.0];
        v.state = VehicleState::Exited;
        v.exit_time = Some(at);
        let entry = v.entry_time.unwrap_or(at);
        let trip = at - entry;
        self.completed.push(CompletedTrip {
            vehicle: id,
            entry_time: entry,
            exit_time: at,
            trip_time: trip,
            delay: trip.saturating_sub(v.free_flow_time),
            wait: v.accum_wait,
        });
        self.exited += 1;
    }

    /// Σ over incoming lanes of queued vehicles.
    pub fn queue_length(&self, i: IntersectionId) -> usize {
        self.net.intersections[i.0]
            .incoming
            .iter()
            .map(|l| self.lanes[l.0].queue.len())
            .sum()
    }

    /// Queued vehicles on incoming lanes minus queued vehicles on outgoing
    /// lanes. An outgoing lane's queue is the queue it forms at the
    /// downstream movement it feeds; sink lanes never queue.
    pub fn pressure_intersection(&self, i: IntersectionId) -> f64 {
        let node = &self.net.intersections[i.0];
        let inq: usize = node.incoming.iter().map(|l| self.lanes[l.0].queue.len()).sum();
        let outq: usize = node.outgoing.iter().map(|l| self.lanes[l.0].queue.len()).sum();
        inq as f64 - outq as f64
    }

    /// `x(l, m)`: vehicles on the movement's incoming lane minus the mean
    /// vehicle count over the lanes of the road it exits onto.
    pub fn movement_pressure(&self, i: IntersectionId, m: MovementId) -> f64 {
        let mv = self.net.intersections[i.0].movement(m);
        let inc = self.lanes[mv.in_lane.0].count() as f64;
        let out: usize = mv.out_lanes.iter().map(|l| self.lanes[l.0].count()).sum();
        inc - out as f64 / LANES_PER_ROAD as f64
    }

    /// Σ over the phase's movements of `x(l, m)`.
    pub fn pressure_phase(&self, i: IntersectionId, p: PhaseId) -> f64 {
        self.net.intersections[i.0].phase_table[p.index()]
            .movements
            .iter()
            .map(|m| self.movement_pressure(i, *m))
            .sum()
    }

    pub fn vehicle_metrics(&self) -> VehicleMetrics {
        vehicle_metrics(&self.completed)
    }

    /// Conservation and capacity checks.
    pub fn check_invariants(&self) -> Result<(), String> {
        let inside = self.in_network();
        if self.entered != self.exited + inside {
            return Err(format!(
                "conservation: entered {} != exited {} + in network {}",
                self.entered, self.exited, inside
            ));
        }
        for (i, l) in self.lanes.iter().enumerate() {
            let cap = self.net.lanes[i].params.capacity;
            if l.count() > cap {
                return Err(format!("lane {i} holds {} > capacity {cap}", l.count()));
            }
        }
        Ok(())
    }
}

/// Aggregate trip time, delay and wait over completed trips.
pub fn vehicle_metrics(trips: &[CompletedTrip]) -> VehicleMetrics {
    if trips.is_empty() {
        return VehicleMetrics::default();
    }
    let n = trips.len() as f64;
    VehicleMetrics {
        completed: trips.len(),
        mean_trip_time: trips.iter().map(|t| t.trip_time as f64).sum::<f64>() / n,
        mean_delay: trips.iter().map(|t| t.delay as f64).sum::<f64>() / n,
        mean_wait: trips.iter().map(|t| t.wait as f64).sum::<f64>() / n,
    }
}

fn movement_green(net: &RoadNetwork, i: IntersectionId, signal: Signal, m: MovementId) -> bool {
    if !m.is_controlled() {
        return true;
    }
    match signal {
        Signal::AllGreen => true,
        Signal::AllRed => false,
        Signal::Phase(p) => net.intersections[i.0].phase_table[p.index()].contains(m),
    }
}

/// Translate an entry and a turn sequence into lanes, ending on a sink lane.
pub fn route_lanes(net: &RoadNetwork, node: usize, arm: Arm, turns: &[Turn]) -> Result<Vec<LaneId>, SimError> {
    let Some(&first) = turns.first() else {
        return Err(SimError::Route("no turns".into()));
    };
    let mut lanes = Vec::with_capacity(turns.len() + 1);
    let mut at = net
        .intersections
        .get(node)
        .ok_or_else(|| SimError::Route(format!("no intersection {node}")))?;
    let mut m = MovementId::from_approach(arm, first);
    lanes.push(at.incoming[m.slot()]);
    for k in 0..turns.len() {
        let exit = m.exit_arm();
        match at.neighbors[exit.index()] {
            Some(next) => {
                let Some(&turn) = turns.get(k + 1) else {
                    return Err(SimError::Route("turn sequence ends inside the network".into()));
                };
                lanes.push(at.outgoing[exit.index() * LANES_PER_ROAD + turn.slot()]);
                at = net.intersection(next);
                m = MovementId::from_approach(exit.opposite(), turn);
            }
            None => {
                lanes.push(at.outgoing[exit.index() * LANES_PER_ROAD + Turn::Through.slot()]);
                if k + 1 != turns.len() {
                    return Err(SimError::Route("turn sequence continues past the boundary".into()));
                }
                return Ok(lanes);
            }
        }
    }
    Err(SimError::Route("turn sequence ends inside the network".into()))
}

/// Poisson arrivals at time `t` for every flow. Returns `(flow index, turns)`
/// per new vehicle, in flow order.
pub fn spawn(
    flows: &[FlowSpec],
    net: &RoadNetwork,
    t: u32,
    tick: u32,
    max_hops: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<Turn>)> {
    let mut out = Vec::new();
    for (fi, f) in flows.iter().enumerate() {
        let lambda = f.profile.rate(t as f64) * tick as f64 / 3600.0;
        let count = if lambda > 0.0 {
            Poisson::new(lambda).map(|d| d.sample(rng) as u64).unwrap_or(0)
        } else {
            0
        };
        for _ in 0..count {
            out.push((fi, sample_turns(net, f.entry, &f.route, max_hops, rng)));
        }
    }
    out
}
