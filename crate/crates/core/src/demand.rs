//! Demand: per-entry arrival-rate profiles (clipped Gaussian mixtures),
//! route sampling and synthetic demand generators.

use crate::net::{Arm, IntersectionId, RoadNetwork, Turn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    /// Seconds from episode start.
    pub mean: f64,
    /// Seconds.
    pub std: f64,
    /// Peak height in vehicles/hour.
    pub weight: f64,
}

/// `rate(t) = clip(base + Σ w·exp(−(t−μ)²/2σ²), min, max)` in vehicles/hour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    pub base: f64,
    #[serde(default)]
    pub components: Vec<GaussianComponent>,
    /// `[min_rate, max_rate]`, vehicles/hour.
    pub clip: [f64; 2],
}

impl RateProfile {
    pub fn constant(rate: f64) -> Self {
        RateProfile {
            base: rate,
            components: Vec::new(),
            clip: [0.0, f64::MAX],
        }
    }

    /// Vehicles/hour at time `t` seconds.
    pub fn rate(&self, t: f64) -> f64 {
        let raw = self.components.iter().fold(self.base, |acc, c| {
            let z = (t - c.mean) / c.std;
            acc + c.weight * (-0.5 * z * z).exp()
        });
        let lo = self.clip[0].max(0.0);
        raw.clamp(lo, self.clip[1].max(lo))
    }

    /// Mean rate over `[0, horizon)` sampled once per second, vehicles/hour.
    pub fn hourly_mean(&self, horizon: u32) -> f64 {
        if horizon == 0 {
            return 0.0;
        }
        (0..horizon).map(|t| self.rate(t as f64)).sum::<f64>() / horizon as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnProbs {
    pub left: f64,
    pub through: f64,
    pub right: f64,
}

impl Default for TurnProbs {
    fn default() -> Self {
        TurnProbs {
            left: 0.2,
            through: 0.6,
            right: 0.2,
        }
    }
}

impl TurnProbs {
    pub fn sample(&self, rng: &mut impl Rng) -> Turn {
        let total = self.left + self.through + self.right;
        let u = rng.random::<f64>() * total;
        if u < self.left {
            Turn::Left
        } else if u < self.left + self.through {
            Turn::Through
        } else {
            Turn::Right
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteSpec {
    /// Turn at every intersection drawn independently.
    TurnTable(TurnProbs),
    /// Explicit turn sequence; after it runs out vehicles go straight.
    Turns(Vec<Turn>),
}

/// Where a flow enters: the boundary arm of an intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryPoint {
    pub node: usize,
    pub arm: Arm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub entry: EntryPoint,
    pub route: RouteSpec,
    pub profile: RateProfile,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub flows: Vec<FlowSpec>,
}

/// Turn sequence for one vehicle entering at `entry`, following the lattice
/// until it leaves the network. Routes are capped at `max_hops`
/// intersections; past the cap vehicles go straight.
pub fn sample_turns(
    net: &RoadNetwork,
    entry: EntryPoint,
    route: &RouteSpec,
    max_hops: usize,
    rng: &mut impl Rng,
) -> Vec<Turn> {
    let mut turns = Vec::new();
    let mut node = IntersectionId(entry.node);
    let mut approach = entry.arm;
    loop {
        let turn = if turns.len() >= max_hops {
            Turn::Through
        } else {
            match route {
                RouteSpec::TurnTable(p) => p.sample(rng),
                RouteSpec::Turns(seq) => seq.get(turns.len()).copied().unwrap_or(Turn::Through),
            }
        };
        turns.push(turn);
        let exit = crate::net::MovementId::from_approach(approach, turn).exit_arm();
        match net.intersection(node).neighbors[exit.index()] {
            Some(next) => {
                node = next;
                approach = exit.opposite();
            }
            None => return turns,
        }
        // Straight lines always leave a finite lattice; this guards explicit
        // topologies with cycles.
        if turns.len() > max_hops + net.len() + 1 {
            return turns;
        }
    }
}

/// Hourly-flow targets for synthetic scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl FlowStats {
    pub const GRID: FlowStats = FlowStats {
        min: 66.0,
        max: 136.0,
        mean: 94.5,
    };
    pub const AVENUE: FlowStats = FlowStats {
        min: 94.5,
        max: 666.0,
        mean: 364.6,
    };
}

/// `n` hourly flows `min + (max−min)·(i/(n−1))^p`, with `p` solved by
/// bisection so the mean hits the target. Sorted ascending.
pub fn hourly_flow_targets(n: usize, stats: FlowStats) -> Vec<f64> {
    match n {
        0 => return Vec::new(),
        1 => return vec![stats.mean],
        _ => {}
    }
    let span = stats.max - stats.min;
    let target = if span > 0.0 { (stats.mean - stats.min) / span } else { 0.0 };
    let mean_u = |p: f64| (0..n).map(|i| (i as f64 / (n - 1) as f64).powf(p)).sum::<f64>() / n as f64;
    // mean_u decreases in p; for n == 2 it is pinned at 0.5.
    let (mut lo, mut hi) = (1e-3_f64, 1e3_f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if mean_u(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = (lo * hi).sqrt();
    (0..n)
        .map(|i| stats.min + span * (i as f64 / (n - 1) as f64).powf(p))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemandKind {
    Grid,
    Avenue,
}

/// Two-peak profile shape; weights relative to the base level.
const SHAPE_BASE: f64 = 0.4;
const SHAPE_PEAKS: [(f64, f64); 2] = [(0.25, 1.0), (0.75, 0.6)];

/// Synthetic multi-modal demand over every boundary entry of `net`.
///
/// Each entry receives a two-peak Gaussian mixture whose hourly mean equals
/// one of the targets from [`hourly_flow_targets`], then scaled by `scale`.
/// For `Avenue`, the largest targets go to the entries of two arterial
/// corridors (the middle row and middle column).
pub fn generate_demand(
    net: &RoadNetwork,
    kind: DemandKind,
    horizon: u32,
    scale: f64,
    turns: TurnProbs,
    seed: u64,
) -> Demand {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = net.entries();
    let stats = match kind {
        DemandKind::Grid => FlowStats::GRID,
        DemandKind::Avenue => FlowStats::AVENUE,
    };
    let mut targets = hourly_flow_targets(entries.len(), stats);

    // Entry order that receives targets ascending.
    let mut order: Vec<usize> = (0..entries.len()).collect();
    match kind {
        DemandKind::Grid => {
            // Fisher-Yates, seeded.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        DemandKind::Avenue => {
            let (rows, cols) = net.grid.unwrap_or((1, net.len()));
            let arterial = |e: &(IntersectionId, Arm)| {
                let (r, c) = net.intersection(e.0).coord.unwrap_or((0, e.0 .0));
                match e.1 {
                    Arm::East | Arm::West => r == rows / 2,
                    Arm::North | Arm::South => c == cols / 2,
                }
            };
            order.sort_by_key(|&i| (arterial(&entries[i]), i));
        }
    }
    targets.iter_mut().for_each(|t| *t *= scale);

    let h = horizon.max(1) as f64;
    let mut flows = vec![None; entries.len()];
    for (rank, &entry_idx) in order.iter().enumerate() {
        let target = targets[rank];
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.05..0.05) * h;
        let shape = RateProfile {
            base: SHAPE_BASE,
            components: SHAPE_PEAKS
                .iter()
                .map(|&(at, w)| GaussianComponent {
                    mean: at * h + jitter(&mut rng),
                    std: h / 8.0,
                    weight: w,
                })
                .collect(),
            clip: [0.0, f64::MAX],
        };
        let unit = shape.hourly_mean(horizon);
        let s = if unit > 0.0 { target / unit } else { 0.0 };
        let profile = RateProfile {
            base: shape.base * s,
            components: shape
                .components
                .iter()
                .map(|c| GaussianComponent {
                    weight: c.weight * s,
                    ..*c
                })
                .collect(),
            clip: [0.0, 4.0 * stats.max * scale.max(1.0)],
        };
        let (node, arm) = entries[entry_idx];
        flows[entry_idx] = Some(FlowSpec {
            entry: EntryPoint { node: node.0, arm },
            route: RouteSpec::TurnTable(turns),
            profile,
        });
    }
    Demand {
        flows: flows.into_iter().flatten().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_grid, LaneParams};

    #[test]
    fn clip_is_honored() {
        let p = RateProfile {
            base: 100.0,
            components: vec![GaussianComponent {
                mean: 0.0,
                std: 10.0,
                weight: 1000.0,
            }],
            clip: [150.0, 500.0],
        };
        assert_eq!(p.rate(0.0), 500.0);
        assert_eq!(p.rate(10_000.0), 150.0);
    }

    #[test]
    fn targets_hit_stats() {
        for n in [4, 8, 16, 20] {
            let t = hourly_flow_targets(n, FlowStats::GRID);
            let mean = t.iter().sum::<f64>() / n as f64;
            assert!((t[0] - 66.0).abs() < 1e-9);
            assert!((t[n - 1] - 136.0).abs() < 1e-9);
            assert!((mean - 94.5).abs() < 1e-6, "n={n} mean={mean}");
        }
    }

    #[test]
    fn grid_4x4_default_demand_matches_flow_table() {
        let net = build_grid(4, 4, LaneParams::default());
        let d = generate_demand(&net, DemandKind::Grid, 3600, 1.0, TurnProbs::default(), 0);
        assert_eq!(d.flows.len(), 16);
        let hourly: Vec<f64> = d.flows.iter().map(|f| f.profile.hourly_mean(3600)).collect();
        let min = hourly.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = hourly.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = hourly.iter().sum::<f64>() / hourly.len() as f64;
        assert!((min / 66.0 - 1.0).abs() < 0.02, "{min}");
        assert!((max / 136.0 - 1.0).abs() < 0.02, "{max}");
        assert!((mean / 94.5 - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn straight_route_crosses_lattice() {
        let net = build_grid(3, 4, LaneParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entry = EntryPoint { node: 4, arm: Arm::West };
        let turns = sample_turns(&net, entry, &RouteSpec::Turns(vec![]), 20, &mut rng);
        assert_eq!(turns, vec![Turn::Through; 4]);
    }

    #[test]
    fn sampled_routes_terminate() {
        let net = build_grid(4, 4, LaneParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = RouteSpec::TurnTable(TurnProbs::default());
        for (node, arm) in net.entries() {
            for _ in 0..200 {
                let t = sample_turns(&net, EntryPoint { node: node.0, arm }, &spec, 16, &mut rng);
                assert!(!t.is_empty() && t.len() <= 16 + 5);
            }
        }
    }
}
