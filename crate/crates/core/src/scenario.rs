//! Scenario files: a network description plus a separate demand file.
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "grid-4x4",
//!   "network": { "grid": { "rows": 4, "cols": 4 } },
//!   "lane_params": { "length": 300.0, "capacity": 40, "free_flow_time": 21.6, "sat_rate": 0.5 },
//!   "lane_overrides": [],
//!   "demand": "demand.json"
//! }
//! ```
//!
//! `demand` is resolved relative to the scenario file.

use crate::demand::{generate_demand, Demand, DemandKind, TurnProbs};
use crate::net::{build_grid, validate, LaneId, LaneParams, NodeSpec, RoadNetwork};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: unsupported scenario version {found} (expected {SCENARIO_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkSpec {
    Grid { rows: usize, cols: usize },
    Nodes(Vec<NodeSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneOverride {
    pub lane: usize,
    pub params: LaneParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub version: u32,
    pub name: String,
    pub network: NetworkSpec,
    #[serde(default)]
    pub lane_params: LaneParams,
    #[serde(default)]
    pub lane_overrides: Vec<LaneOverride>,
    /// Path of the demand file, relative to the scenario file.
    pub demand: String,
}

/// A loaded scenario ready for simulation.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub net: Arc<RoadNetwork>,
    pub demand: Arc<Demand>,
    /// Hex SHA-256 over the scenario and demand file contents.
    pub content_hash: String,
}

impl Scenario {
    /// Assemble from in-memory parts; the hash covers their canonical JSON.
    pub fn from_parts(file: &ScenarioFile, demand: Demand) -> Result<Self, ScenarioError> {
        let net = build_network(file)?;
        let a = to_json(file);
        let b = to_json(&demand);
        Ok(Scenario {
            name: file.name.clone(),
            net: Arc::new(net),
            demand: Arc::new(demand),
            content_hash: content_hash(a.as_bytes(), b.as_bytes()),
        })
    }
}

fn content_hash(scenario: &[u8], demand: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(scenario);
    h.update(demand);
    hex::encode(h.finalize())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn build_network(file: &ScenarioFile) -> Result<RoadNetwork, ScenarioError> {
    let mut net = match &file.network {
        NetworkSpec::Grid { rows, cols } => {
            if *rows == 0 || *cols == 0 {
                return Err(ScenarioError::Invalid(format!("grid {rows}x{cols} has no intersections")));
            }
            build_grid(*rows, *cols, file.lane_params)
        }
        NetworkSpec::Nodes(nodes) => {
            for (i, n) in nodes.iter().enumerate() {
                if n.id != i {
                    return Err(ScenarioError::Invalid(format!("node {i} has id {}", n.id)));
                }
                if let Some(bad) = n.neighbors.iter().flatten().find(|&&j| j >= nodes.len()) {
                    return Err(ScenarioError::Invalid(format!("node {i} references unknown node {bad}")));
                }
            }
            RoadNetwork::from_nodes(nodes, file.lane_params)
        }
    };
    for o in &file.lane_overrides {
        if o.lane >= net.lanes.len() {
            return Err(ScenarioError::Invalid(format!("lane override for unknown lane {}", o.lane)));
        }
        if o.params.capacity == 0 || o.params.sat_rate <= 0.0 || o.params.free_flow_time <= 0.0 {
            return Err(ScenarioError::Invalid(format!("lane {} has non-positive parameters", o.lane)));
        }
        net.set_lane_params(LaneId(o.lane), o.params);
    }
    validate(&net).map_err(|v| {
        ScenarioError::Invalid(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
    })?;
    Ok(net)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = read(path)?;
    let file: ScenarioFile = parse(path, &text)?;
    if file.version != SCENARIO_VERSION {
        return Err(ScenarioError::Version {
            path: path.to_path_buf(),
            found: file.version,
        });
    }
    let demand_path = path.parent().unwrap_or(Path::new(".")).join(&file.demand);
    let demand_text = read(&demand_path)?;
    let demand: Demand = parse(&demand_path, &demand_text)?;
    let net = build_network(&file)?;
    for f in &demand.flows {
        let ok = net
            .intersections
            .get(f.entry.node)
            .is_some_and(|n| n.neighbors[f.entry.arm.index()].is_none());
        if !ok {
            return Err(ScenarioError::Invalid(format!(
                "flow enters at ({}, {:?}) which is not a boundary approach",
                f.entry.node, f.entry.arm
            )));
        }
    }
    Ok(Scenario {
        name: file.name,
        net: Arc::new(net),
        demand: Arc::new(demand),
        content_hash: content_hash(text.as_bytes(), demand_text.as_bytes()),
    })
}

/// Write `scenario.json` and the demand file into `dir`; returns the
/// scenario path.
pub fn save_scenario(dir: &Path, file: &ScenarioFile, demand: &Demand) -> Result<PathBuf, ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let write = |p: PathBuf, s: String| {
        std::fs::write(&p, s).map_err(|source| ScenarioError::Io { path: p.clone(), source })
    };
    let sp = dir.join("scenario.json");
    write(dir.join(&file.demand), to_json(demand))?;
    write(sp.clone(), to_json(file))?;
    Ok(sp)
}

/// Parameters of a synthetic lattice scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub kind: DemandKind,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub demand_scale: f64,
    pub horizon: u32,
    pub turns: TurnProbs,
    pub lane_params: LaneParams,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            kind: DemandKind::Grid,
            rows: 4,
            cols: 4,
            seed: 0,
            demand_scale: 1.0,
            horizon: 3600,
            turns: TurnProbs::default(),
            lane_params: LaneParams::default(),
        }
    }
}

pub fn generate_scenario(opts: &GenOptions) -> Result<(ScenarioFile, Demand), ScenarioError> {
    if opts.rows == 0 || opts.cols == 0 {
        return Err(ScenarioError::Invalid("rows and cols must be positive".into()));
    }
    if !(opts.demand_scale.is_finite() && opts.demand_scale >= 0.0) {
        return Err(ScenarioError::Invalid("demand scale must be a finite non-negative number".into()));
    }
    let kind = match opts.kind {
        DemandKind::Grid => "grid",
        DemandKind::Avenue => "avenue",
    };
    let file = ScenarioFile {
        version: SCENARIO_VERSION,
        name: format!("{kind}-{}x{}", opts.rows, opts.cols),
        network: NetworkSpec::Grid {
            rows: opts.rows,
            cols: opts.cols,
        },
        lane_params: opts.lane_params,
        lane_overrides: Vec::new(),
        demand: "demand.json".into(),
    };
    let net = build_network(&file)?;
    let demand = generate_demand(&net, opts.kind, opts.horizon, opts.demand_scale, opts.turns, opts.seed);
    Ok((file, demand))
}
