//! Synchronous multi-agent signal-control environment over [`SimState`].
//!
//! Every control step holds one phase per intersection for a full control
//! interval, then reports an 8×7 observation and a four-part penalty reward
//! per intersection.

use crate::demand::Demand;
use crate::net::{IntersectionId, MovementId, PhaseId, RoadNetwork, CONTROLLED_MOVEMENTS, PHASES};
use crate::sim::{SimConfig, SimError, SimState, Signal, VehicleState};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Features per movement.
pub const FEATURES: usize = 7;

/// Feature columns, in order.
pub const FEATURE_NAMES: [&str; FEATURES] = [
    "current_phase",
    "car_num",
    "queue_length",
    "occupancy",
    "flow",
    "stop_car_num",
    "pressure",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} for intersection {node} is outside 0..{PHASES}")]
    ActionOutOfRange { node: usize, action: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("episode finished; call reset")]
    Finished,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Per-movement features of one intersection, rows in movement order 1..8.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [[f64; FEATURES]; CONTROLLED_MOVEMENTS]);

impl Observation {
    pub fn zeros() -> Self {
        Observation([[0.0; FEATURES]; CONTROLLED_MOVEMENTS])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_delay: f64,
    pub w_wait: f64,
    pub w_queue: f64,
    pub w_pressure: f64,
    /// Divides the time-valued terms (seconds).
    pub time_norm: f64,
    /// Divides the count-valued terms (vehicles).
    pub count_norm: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_delay: 1.0,
            w_wait: 1.0,
            w_queue: 1.0,
            w_pressure: 1.0,
            time_norm: 15.0,
            count_norm: 40.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub delay_term: f64,
    pub wait_term: f64,
    pub queue_term: f64,
    pub pressure_term: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Builds the breakdown from interval averages.
    pub fn from_averages(avg: &IntervalAverages, cfg: &RewardConfig) -> Self {
        let delay_term = -cfg.w_delay * avg.delay / cfg.time_norm;
        let wait_term = -cfg.w_wait * avg.wait / cfg.time_norm;
        let queue_term = -cfg.w_queue * avg.queue / cfg.count_norm;
        let pressure_term = -cfg.w_pressure * avg.pressure.abs() / cfg.count_norm;
        RewardBreakdown {
            delay_term,
            wait_term,
            queue_term,
            pressure_term,
            total: delay_term + wait_term + queue_term + pressure_term,
        }
    }
}

/// Interval averages of the four intersection metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalAverages {
    /// Mean approach delay (s) of vehicles that queued at the intersection.
    pub delay: f64,
    /// Mean accumulated waiting time (s) of the vehicles queued at the boundary.
    pub wait: f64,
    /// Mean queued vehicles over the interval's ticks.
    pub queue: f64,
    /// Mean intersection pressure over the interval's ticks.
    pub pressure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub reward: RewardConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub clock: u32,
    pub breakdown: Vec<RewardBreakdown>,
    pub averages: Vec<IntervalAverages>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

/// One stored interaction; `ids[i]` are intersection i's collaborators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Observation>,
    pub ids: Vec<Vec<usize>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Observation>,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, Default)]
struct Snapshot {
    queue_sum: u64,
    pressure_sum: f64,
    discharged: u64,
    discharge_wait_sum: u64,
    ticks: u64,
    flows: [u64; CONTROLLED_MOVEMENTS],
}

/// Episode-level summary used by evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Mean over entered vehicles; vehicles still inside count with their
    /// time so far.
    pub trip_time: f64,
    pub delay: f64,
    pub wait: f64,
    /// Mean over intersections and ticks of queued vehicles.
    pub queue: f64,
    /// Mean over intersections and ticks of |pressure|.
    pub pressure: f64,
    pub entered: u64,
    pub exited: u64,
}

#[derive(Clone, Debug)]
pub struct TrafficEnv {
    net: Arc<RoadNetwork>,
    demand: Arc<Demand>,
    cfg: EnvConfig,
    sim: SimState,
    snaps: Vec<Snapshot>,
    /// Σ over ticks and intersections of |pressure|, for episode metrics.
    abs_pressure_sum: f64,
}

impl TrafficEnv {
    pub fn new(net: Arc<RoadNetwork>, demand: Arc<Demand>, cfg: EnvConfig) -> Result<Self, EnvError> {
        let sim = SimState::new(net.clone(), demand.clone(), cfg.sim.clone())?;
        let n = net.len();
        Ok(TrafficEnv {
            net,
            demand,
            cfg,
            sim,
            snaps: vec![Snapshot::default(); n],
            abs_pressure_sum: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.net.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net.is_empty()
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut SimState {
        &mut self.sim
    }

    pub fn steps_per_episode(&self) -> usize {
        self.cfg.sim.steps_per_episode()
    }

    pub fn done(&self) -> bool {
        self.sim.clock() >= self.cfg.sim.episode_length
    }

    /// Fresh simulation at t = 0 with the given seed.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        let cfg = SimConfig {
            seed,
            ..self.cfg.sim.clone()
        };
        self.sim = SimState::new(self.net.clone(), self.demand.clone(), cfg)?;
        self.abs_pressure_sum = 0.0;
        self.take_snapshots();
        Ok(self.observe_all(&[[0; CONTROLLED_MOVEMENTS]].repeat(self.len())))
    }

    /// Hold phase `actions[i]` at every intersection for one interval.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if actions.len() != self.len() {
            return Err(EnvError::ActionCount {
                expected: self.len(),
                got: actions.len(),
            });
        }
        let mut signals = Vec::with_capacity(actions.len());
        for (node, &a) in actions.iter().enumerate() {
            let table = self.net.intersections[node].phase_table.len();
            if a >= table {
                return Err(EnvError::ActionOutOfRange { node, action: a });
            }
            signals.push(Signal::Phase(PhaseId(a as u8)));
        }
        self.step_signals(&signals)
    }

    /// Like [`step`](Self::step) with arbitrary signals (e.g. all-red).
    pub fn step_signals(&mut self, signals: &[Signal]) -> Result<StepResult, EnvError> {
        if self.done() {
            return Err(EnvError::Finished);
        }
        let ticks = self.cfg.sim.control_interval / self.cfg.sim.tick;
        for _ in 0..ticks {
            self.sim.step(signals)?;
            for i in 0..self.len() {
                self.abs_pressure_sum +=
                    self.sim.pressure_intersection(IntersectionId(i)).abs() * self.cfg.sim.tick as f64;
            }
        }
        let mut averages = Vec::with_capacity(self.len());
        let mut breakdown = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let avg = self.interval_averages(IntersectionId(i));
            breakdown.push(RewardBreakdown::from_averages(&avg, &self.cfg.reward));
            averages.push(avg);
        }
        let flows: Vec<[u64; CONTROLLED_MOVEMENTS]> = (0..self.len())
            .map(|i| {
                let node = IntersectionId(i);
                let mut f = [0; CONTROLLED_MOVEMENTS];
                for m in MovementId::controlled() {
                    f[m.slot()] = self.sim.discharged(node, m) - self.snaps[i].flows[m.slot()];
                }
                f
            })
            .collect();
        self.take_snapshots();
        Ok(StepResult {
            obs: self.observe_all(&flows),
            rewards: breakdown.iter().map(|b| b.total).collect(),
            done: self.done(),
            info: StepInfo {
                clock: self.sim.clock(),
                breakdown,
                averages,
            },
        })
    }

    fn take_snapshots(&mut self) {
        for i in 0..self.len() {
            let node = IntersectionId(i);
            let c = self.sim.counters(node);
            let mut flows = [0; CONTROLLED_MOVEMENTS];
            for m in MovementId::controlled() {
                flows[m.slot()] = self.sim.discharged(node, m);
            }
            self.snaps[i] = Snapshot {
                queue_sum: c.queue_sum,
                pressure_sum: c.pressure_sum,
                discharged: c.discharged,
                discharge_wait_sum: c.discharge_wait_sum,
                ticks: c.ticks,
                flows,
            };
        }
    }

    /// Averages since the last snapshot.
    pub fn interval_averages(&self, i: IntersectionId) -> IntervalAverages {
        let s = &self.snaps[i.0];
        let c = self.sim.counters(i);
        let secs = ((c.ticks - s.ticks) * self.cfg.sim.tick as u64) as f64;
        if secs == 0.0 {
            return IntervalAverages::default();
        }
        let queued_secs = (c.queue_sum - s.queue_sum) as f64;
        // Approach delay: completed waits of discharged vehicles plus the
        // waits so far of vehicles still queued. Wait: accumulated trip
        // waiting time of the vehicles queued now.
        let mut delay_sum = (c.discharge_wait_sum - s.discharge_wait_sum) as f64;
        let mut delay_n = c.discharged - s.discharged;
        let mut wait_sum = 0.0;
        let mut wait_n = 0usize;
        for lane in &self.net.intersections[i.0].incoming {
            for id in self.sim.lane_queue_ids(*lane) {
                let v = self.sim.vehicle(id);
                delay_sum += v.lane_wait as f64;
                delay_n += 1;
                wait_sum += v.accum_wait as f64;
                wait_n += 1;
            }
        }
        let delay = if delay_n > 0 {
            delay_sum / delay_n as f64
        } else {
            0.0
        };
        let wait = if wait_n > 0 { wait_sum / wait_n as f64 } else { 0.0 };
        IntervalAverages {
            delay,
            wait,
            queue: queued_secs / secs,
            pressure: (c.pressure_sum - s.pressure_sum) / secs,
        }
    }

    fn observe_all(&self, flows: &[[u64; CONTROLLED_MOVEMENTS]]) -> Vec<Observation> {
        (0..self.len())
            .map(|i| self.observe(IntersectionId(i), &flows[i]))
            .collect()
    }

    fn observe(&self, i: IntersectionId, flows: &[u64; CONTROLLED_MOVEMENTS]) -> Observation {
        let node = &self.net.intersections[i.0];
        let mut obs = Observation::zeros();
        for m in MovementId::controlled() {
            let lane = node.incoming[m.slot()];
            let cap = self.net.lane(lane).params.capacity as f64;
            let car = self.sim.lane_count(lane) as f64;
            let queued = self.sim.lane_queue(lane) as f64;
            let green = self.sim.is_green(i, m);
            obs.0[m.slot()] = [
                if green { 1.0 } else { 0.0 },
                car,
                queued,
                car / cap,
                flows[m.slot()] as f64,
                queued,
                self.sim.movement_pressure(i, m),
            ];
        }
        obs
    }

    /// Summary of the episode so far.
    pub fn episode_metrics(&self) -> EpisodeMetrics {
        let now = self.sim.clock();
        let mut trip = 0.0;
        let mut n = 0usize;
        for v in self.sim.vehicles() {
            let Some(entry) = v.entry_time else { continue };
            let end = match v.state {
                VehicleState::Exited => v.exit_time.unwrap_or(now),
                _ => now,
            };
            trip += (end - entry) as f64;
            n += 1;
        }
        let vm = self.sim.vehicle_metrics();
        let node_secs = (self.len() as u64 * now as u64).max(1) as f64;
        let queue_sum: u64 = (0..self.len()).map(|i| self.sim.counters(IntersectionId(i)).queue_sum).sum();
        EpisodeMetrics {
            trip_time: if n > 0 { trip / n as f64 } else { 0.0 },
            delay: vm.mean_delay,
            wait: vm.mean_wait,
            queue: queue_sum as f64 / node_secs,
            pressure: self.abs_pressure_sum / node_secs,
            entered: self.sim.entered(),
            exited: self.sim.exited(),
        }
    }
}
