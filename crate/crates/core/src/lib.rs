//! Traffic-signal control substrate: road networks, a store-and-forward
//! simulator, the multi-agent control environment, and classical
//! controllers.

pub mod baselines;
pub mod demand;
pub mod env;
pub mod net;
pub mod scenario;
pub mod sim;

pub use baselines::{ftc_action, maxpressure_action, run_episode, Controller, EpisodeReport, FixedTime, FtcConfig, MaxPressure};
pub use demand::{Demand, DemandKind, FlowSpec, RateProfile, TurnProbs};
pub use env::{EnvConfig, EnvError, EpisodeMetrics, Observation, RewardBreakdown, RewardConfig, StepResult, TrafficEnv, Transition, FEATURES};
pub use net::{build_grid, IntersectionId, LaneParams, MovementId, PhaseId, RoadNetwork, CONTROLLED_MOVEMENTS, PHASES};
pub use scenario::{generate_scenario, load_scenario, save_scenario, GenOptions, Scenario, ScenarioError, ScenarioFile};
pub use sim::{SimConfig, SimError, SimState, Signal};
