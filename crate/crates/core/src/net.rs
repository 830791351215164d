//! Road-network topology: lanes, the twelve movements of a four-arm
//! intersection, the eight-phase signal table and lattice generators.
//!
//! Movement numbering (approach = the arm a vehicle arrives from):
//!
//! ```text
//!   1 N-left   2 N-through   3 E-left   4 E-through
//!   5 S-left   6 S-through   7 W-left   8 W-through
//!   9 N-right 10 E-right    11 S-right 12 W-right   (uncontrolled)
//! ```
//!
//! Every road carries three lanes per direction, one per turn at the
//! downstream intersection. A lane is therefore both an outgoing lane of its
//! upstream intersection and an incoming lane of its downstream one; boundary
//! lanes attach to a source or a sink instead.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of signal-controlled movements per intersection.
pub const CONTROLLED_MOVEMENTS: usize = 8;
/// Total movements (controlled + right turns) per four-arm intersection.
pub const MOVEMENTS: usize = 12;
/// Phases in the standard signal table.
pub const PHASES: usize = 8;
/// Lanes per road and direction.
pub const LANES_PER_ROAD: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    North,
    East,
    South,
    West,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::North, Arm::East, Arm::South, Arm::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Arm {
        Arm::ALL[i % 4]
    }

    pub fn opposite(self) -> Arm {
        Arm::from_index(self.index() + 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left,
    Through,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Through, Turn::Right];

    /// Lane slot on a road reserved for vehicles making this turn next.
    pub fn slot(self) -> usize {
        self as usize
    }
}

/// One of the twelve movements, 1-based. Indices 1..=8 are signal-controlled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct MovementId(u8);

impl MovementId {
    pub fn new(index: u8) -> Option<Self> {
        (1..=MOVEMENTS as u8).contains(&index).then_some(MovementId(index))
    }

    /// All twelve movements in index order.
    pub fn all() -> impl Iterator<Item = MovementId> {
        (1..=MOVEMENTS as u8).map(MovementId)
    }

    pub fn controlled() -> impl Iterator<Item = MovementId> {
        (1..=CONTROLLED_MOVEMENTS as u8).map(MovementId)
    }

    pub fn from_approach(approach: Arm, turn: Turn) -> MovementId {
        let a = approach.index() as u8;
        match turn {
            Turn::Left => MovementId(2 * a + 1),
            Turn::Through => MovementId(2 * a + 2),
            Turn::Right => MovementId(9 + a),
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Zero-based position, used for the per-intersection lane arrays.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn is_controlled(self) -> bool {
        self.0 as usize <= CONTROLLED_MOVEMENTS
    }

    pub fn approach(self) -> Arm {
        if self.is_controlled() {
            Arm::from_index((self.0 as usize - 1) / 2)
        } else {
            Arm::from_index(self.0 as usize - 9)
        }
    }

    pub fn turn(self) -> Turn {
        if !self.is_controlled() {
            Turn::Right
        } else if self.0 % 2 == 1 {
            Turn::Left
        } else {
            Turn::Through
        }
    }

    /// Arm through which the movement leaves the intersection.
    pub fn exit_arm(self) -> Arm {
        let a = self.approach().index();
        match self.turn() {
            Turn::Left => Arm::from_index(a + 1),
            Turn::Through => Arm::from_index(a + 2),
            Turn::Right => Arm::from_index(a + 3),
        }
    }
}

impl TryFrom<u8> for MovementId {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        MovementId::new(v).ok_or_else(|| format!("movement index {v} outside 1..=12"))
    }
}

impl From<MovementId> for u8 {
    fn from(m: MovementId) -> u8 {
        m.0
    }
}

impl fmt::Display for MovementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Whether two controlled movements may be released together.
///
/// Movements from the same approach never conflict; from opposite approaches
/// only equal turn types are compatible; perpendicular approaches always
/// conflict.
pub fn movements_conflict(a: MovementId, b: MovementId) -> bool {
    if a == b || !a.is_controlled() || !b.is_controlled() {
        return false;
    }
    if a.approach() == b.approach() {
        return false;
    }
    if a.approach().opposite() == b.approach() {
        return a.turn() != b.turn();
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseId(pub u8);

impl PhaseId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        (b'A' + self.0) as char
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub id: PhaseId,
    pub movements: [MovementId; 2],
}

impl Phase {
    pub fn contains(&self, m: MovementId) -> bool {
        self.movements.contains(&m)
    }

    pub fn shares_movement(&self, other: &Phase) -> bool {
        self.movements.iter().any(|m| other.contains(*m))
    }
}

/// The fixed table A..H: {1,5},{2,6},{3,7},{4,8},{1,2},{3,4},{5,6},{7,8}.
pub fn standard_phase_table() -> Vec<Phase> {
    const PAIRS: [[u8; 2]; PHASES] = [[1, 5], [2, 6], [3, 7], [4, 8], [1, 2], [3, 4], [5, 6], [7, 8]];
    PAIRS
        .iter()
        .enumerate()
        .map(|(i, [a, b])| Phase {
            id: PhaseId(i as u8),
            movements: [MovementId(*a), MovementId(*b)],
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntersectionId(pub usize);

/// Physical parameters of one lane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneParams {
    /// Meters.
    pub length: f64,
    /// Maximum vehicles on the lane (running + queued).
    pub capacity: usize,
    /// Seconds to traverse the lane unimpeded.
    pub free_flow_time: f64,
    /// Maximum discharge rate when green, vehicles per second.
    pub sat_rate: f64,
}

impl Default for LaneParams {
    fn default() -> Self {
        LaneParams {
            length: 300.0,
            capacity: 40,
            free_flow_time: 21.6,
            sat_rate: 0.5,
        }
    }
}

impl LaneParams {
    /// Whole ticks needed to traverse the lane.
    pub fn travel_ticks(&self, tick: f64) -> u32 {
        ((self.free_flow_time / tick).ceil() as u32).max(1)
    }
}

/// Where a lane starts or ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaneEnd {
    /// Network boundary: a source at the upstream end, a sink downstream.
    Boundary,
    /// Attached to an intersection through the given lane slot.
    Node { node: IntersectionId, slot: usize },
    /// Not attached to anything; always a validation error.
    Unattached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub params: LaneParams,
    pub from: LaneEnd,
    pub to: LaneEnd,
}

impl Lane {
    pub fn is_sink(&self) -> bool {
        matches!(self.to, LaneEnd::Boundary)
    }

    pub fn is_source(&self) -> bool {
        matches!(self.from, LaneEnd::Boundary)
    }
}

/// One movement bound to concrete lanes: the incoming lane it serves and the
/// three lanes of the road it exits onto.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub id: MovementId,
    pub in_lane: LaneId,
    pub out_lanes: [LaneId; LANES_PER_ROAD],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    /// Lattice position (row, col) when the network came from a grid.
    pub coord: Option<(usize, usize)>,
    pub neighbors: [Option<IntersectionId>; 4],
    /// Indexed by `MovementId::slot`.
    pub incoming: Vec<LaneId>,
    /// Indexed by `arm * 3 + turn slot`.
    pub outgoing: Vec<LaneId>,
    pub movements: Vec<Movement>,
    pub phase_table: Vec<Phase>,
    pub arm_count: usize,
}

impl Intersection {
    pub fn movement(&self, m: MovementId) -> &Movement {
        &self.movements[m.slot()]
    }

    pub fn out_road(&self, arm: Arm) -> [LaneId; LANES_PER_ROAD] {
        let base = arm.index() * LANES_PER_ROAD;
        [self.outgoing[base], self.outgoing[base + 1], self.outgoing[base + 2]]
    }
}

/// Directed lane link from an upstream intersection to a downstream one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub lane: LaneId,
    pub from: IntersectionId,
    pub to: IntersectionId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub intersections: Vec<Intersection>,
    pub lanes: Vec<Lane>,
    /// Lattice dimensions when built by [`build_grid`].
    pub grid: Option<(usize, usize)>,
}

/// Node description used to assemble a network from explicit adjacency.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: usize,
    #[serde(default)]
    pub coord: Option<(usize, usize)>,
    /// Neighbour on the north, east, south and west arm.
    pub neighbors: [Option<usize>; 4],
}

impl RoadNetwork {
    pub fn len(&self) -> usize {
        self.intersections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intersections.is_empty()
    }

    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0]
    }

    pub fn intersection(&self, id: IntersectionId) -> &Intersection {
        &self.intersections[id.0]
    }

    /// Interior lane links (both ends at an intersection), in lane order.
    pub fn links(&self) -> Vec<Link> {
        self.lanes
            .iter()
            .filter_map(|l| match (l.from, l.to) {
                (LaneEnd::Node { node: a, .. }, LaneEnd::Node { node: b, .. }) => Some(Link {
                    lane: l.id,
                    from: a,
                    to: b,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn source_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().filter(|l| l.is_source())
    }

    pub fn sink_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().filter(|l| l.is_sink())
    }

    /// Boundary approaches (intersection, arm) through which vehicles enter.
    pub fn entries(&self) -> Vec<(IntersectionId, Arm)> {
        let mut out = Vec::new();
        for node in &self.intersections {
            for arm in Arm::ALL {
                if node.neighbors[arm.index()].is_none() {
                    out.push((node.id, arm));
                }
            }
        }
        out
    }

    /// Hop distance between intersections (breadth-first over neighbours).
    pub fn hop_distances(&self, from: IntersectionId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut frontier = std::collections::VecDeque::new();
        dist[from.0] = Some(0);
        frontier.push_back(from);
        while let Some(u) = frontier.pop_front() {
            let d = dist[u.0].unwrap_or(0);
            for v in self.intersections[u.0].neighbors.iter().flatten() {
                if dist[v.0].is_none() {
                    dist[v.0] = Some(d + 1);
                    frontier.push_back(*v);
                }
            }
        }
        dist
    }

    /// Apply per-lane parameter overrides.
    pub fn set_lane_params(&mut self, lane: LaneId, params: LaneParams) {
        self.lanes[lane.0].params = params;
    }

    /// Assemble a network from explicit node adjacency. Boundary arms (no
    /// neighbour) receive source and sink lanes. Asymmetric adjacency is not
    /// rejected here; [`validate`] reports it as unlinked lanes.
    pub fn from_nodes(nodes: &[NodeSpec], params: LaneParams) -> RoadNetwork {
        let n = nodes.len();
        let phase_table = standard_phase_table();
        let mut lanes: Vec<Lane> = Vec::new();
        let mut intersections: Vec<Intersection> = nodes
            .iter()
            .enumerate()
            .map(|(i, spec)| Intersection {
                id: IntersectionId(i),
                coord: spec.coord,
                neighbors: spec.neighbors.map(|nb| nb.filter(|&j| j < n).map(IntersectionId)),
                incoming: Vec::with_capacity(MOVEMENTS),
                outgoing: vec![LaneId(usize::MAX); 4 * LANES_PER_ROAD],
                movements: Vec::with_capacity(MOVEMENTS),
                phase_table: phase_table.clone(),
                arm_count: 4,
            })
            .collect();

        // Incoming lanes, one per movement.
        for node in intersections.iter_mut() {
            for m in MovementId::all() {
                let id = LaneId(lanes.len());
                let from = if node.neighbors[m.approach().index()].is_some() {
                    LaneEnd::Unattached
                } else {
                    LaneEnd::Boundary
                };
                lanes.push(Lane {
                    id,
                    params,
                    from,
                    to: LaneEnd::Node {
                        node: node.id,
                        slot: m.slot(),
                    },
                });
                node.incoming.push(id);
            }
        }

        // Outgoing lanes: shared with the neighbour's incoming lanes, or sinks.
        for u in 0..n {
            for arm in Arm::ALL {
                for turn in Turn::ALL {
                    let slot = arm.index() * LANES_PER_ROAD + turn.slot();
                    let lane = match intersections[u].neighbors[arm.index()] {
                        Some(v) => {
                            let m = MovementId::from_approach(arm.opposite(), turn);
                            let lane = intersections[v.0].incoming[m.slot()];
                            // Only claim the lane if the neighbour points back at us.
                            if intersections[v.0].neighbors[arm.opposite().index()] == Some(IntersectionId(u)) {
                                lanes[lane.0].from = LaneEnd::Node {
                                    node: IntersectionId(u),
                                    slot,
                                };
                                lane
                            } else {
                                let id = LaneId(lanes.len());
                                lanes.push(Lane {
                                    id,
                                    params,
                                    from: LaneEnd::Node {
                                        node: IntersectionId(u),
                                        slot,
                                    },
                                    to: LaneEnd::Unattached,
                                });
                                id
                            }
                        }
                        None => {
                            let id = LaneId(lanes.len());
                            lanes.push(Lane {
                                id,
                                params,
                                from: LaneEnd::Node {
                                    node: IntersectionId(u),
                                    slot,
                                },
                                to: LaneEnd::Boundary,
                            });
                            id
                        }
                    };
                    intersections[u].outgoing[slot] = lane;
                }
            }
        }

        for node in intersections.iter_mut() {
            node.movements = MovementId::all()
                .map(|m| {
                    let base = m.exit_arm().index() * LANES_PER_ROAD;
                    Movement {
                        id: m,
                        in_lane: node.incoming[m.slot()],
                        out_lanes: [node.outgoing[base], node.outgoing[base + 1], node.outgoing[base + 2]],
                    }
                })
                .collect();
        }

        RoadNetwork {
            intersections,
            lanes,
            grid: None,
        }
    }
}

/// Node adjacency of a `rows × cols` lattice, row-major, row 0 at the north.
pub fn grid_nodes(rows: usize, cols: usize) -> Vec<NodeSpec> {
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let at = |r: usize, c: usize| r * cols + c;
            nodes.push(NodeSpec {
                id: at(r, c),
                coord: Some((r, c)),
                neighbors: [
                    (r > 0).then(|| at(r - 1, c)),
                    (c + 1 < cols).then(|| at(r, c + 1)),
                    (r + 1 < rows).then(|| at(r + 1, c)),
                    (c > 0).then(|| at(r, c - 1)),
                ],
            });
        }
    }
    nodes
}

/// `rows × cols` lattice of four-arm intersections with uniform lane parameters.
///
/// # Panics
/// If `rows` or `cols` is zero.
pub fn build_grid(rows: usize, cols: usize, params: LaneParams) -> RoadNetwork {
    assert!(rows >= 1 && cols >= 1, "grid needs at least one row and one column");
    let mut net = RoadNetwork::from_nodes(&grid_nodes(rows, cols), params);
    net.grid = Some((rows, cols));
    net
}

/// A single invariant violation found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MovementMultiplicity { node: IntersectionId, movement: MovementId, phases: usize },
    ConflictingPhase { node: IntersectionId, phase: PhaseId },
    DuplicatePhase { node: IntersectionId, phase: PhaseId },
    PhaseTableSize { node: IntersectionId, len: usize },
    UnlinkedLane { lane: LaneId },
    LaneEndMismatch { lane: LaneId },
    MovementLanes { node: IntersectionId, movement: MovementId },
    BadLaneParams { lane: LaneId },
}

impl Violation {
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::MovementMultiplicity { .. } => "movement multiplicity",
            Violation::ConflictingPhase { .. } => "conflicting phase",
            Violation::DuplicatePhase { .. } => "duplicate phase",
            Violation::PhaseTableSize { .. } => "phase table size",
            Violation::UnlinkedLane { .. } => "unlinked lane",
            Violation::LaneEndMismatch { .. } => "lane end mismatch",
            Violation::MovementLanes { .. } => "movement lanes",
            Violation::BadLaneParams { .. } => "bad lane params",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.kind(), self)
    }
}

/// Check every topology invariant. Never panics; returns all violations.
pub fn validate(net: &RoadNetwork) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();

    for lane in &net.lanes {
        let p = lane.params;
        if p.capacity < 1 || p.free_flow_time.is_nan() || p.free_flow_time <= 0.0 || p.sat_rate.is_nan() || p.sat_rate <= 0.0 {
            out.push(Violation::BadLaneParams { lane: lane.id });
        }
        if lane.from == LaneEnd::Unattached || lane.to == LaneEnd::Unattached {
            out.push(Violation::UnlinkedLane { lane: lane.id });
        }
        if lane.from == LaneEnd::Boundary && lane.to == LaneEnd::Boundary {
            out.push(Violation::UnlinkedLane { lane: lane.id });
        }
    }

    for node in &net.intersections {
        let table = &node.phase_table;
        if node.arm_count == 4 && table.len() != PHASES {
            out.push(Violation::PhaseTableSize {
                node: node.id,
                len: table.len(),
            });
        }
        for m in MovementId::controlled() {
            let count = table.iter().filter(|p| p.contains(m)).count();
            if count != 2 {
                out.push(Violation::MovementMultiplicity {
                    node: node.id,
                    movement: m,
                    phases: count,
                });
            }
        }
        for (i, p) in table.iter().enumerate() {
            let [a, b] = p.movements;
            if a == b || !a.is_controlled() || !b.is_controlled() || movements_conflict(a, b) {
                out.push(Violation::ConflictingPhase { node: node.id, phase: p.id });
            }
            let same = |q: &Phase| {
                let mut x = p.movements;
                let mut y = q.movements;
                x.sort();
                y.sort();
                x == y
            };
            if table[..i].iter().any(same) {
                out.push(Violation::DuplicatePhase { node: node.id, phase: p.id });
            }
        }

        for (slot, lane) in node.incoming.iter().enumerate() {
            let ok = net
                .lanes
                .get(lane.0)
                .is_some_and(|l| l.to == LaneEnd::Node { node: node.id, slot });
            if !ok {
                out.push(Violation::LaneEndMismatch { lane: *lane });
            }
        }
        for (slot, lane) in node.outgoing.iter().enumerate() {
            let ok = net
                .lanes
                .get(lane.0)
                .is_some_and(|l| l.from == LaneEnd::Node { node: node.id, slot });
            if !ok {
                out.push(Violation::LaneEndMismatch { lane: *lane });
                continue;
            }
            // An interior out-lane must feed the matching in-lane downstream.
            let arm = Arm::from_index(slot / LANES_PER_ROAD);
            if let Some(v) = node.neighbors[arm.index()] {
                let turn = Turn::ALL[slot % LANES_PER_ROAD];
                let m = MovementId::from_approach(arm.opposite(), turn);
                let fed = net.intersections.get(v.0).map(|d| d.incoming[m.slot()]);
                if fed != Some(*lane) {
                    out.push(Violation::UnlinkedLane { lane: *lane });
                }
            }
        }
        for mv in &node.movements {
            let base = mv.id.exit_arm().index() * LANES_PER_ROAD;
            let expected_out = &node.outgoing[base..base + LANES_PER_ROAD];
            if node.incoming[mv.id.slot()] != mv.in_lane || expected_out != mv.out_lanes {
                out.push(Violation::MovementLanes {
                    node: node.id,
                    movement: mv.id,
                });
            }
        }
    }

    out.dedup();
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
