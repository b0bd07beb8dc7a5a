//! Domain types for Team Orienteering Problem instances and solutions.
//!
//! Node indexing convention: node `0` is the start depot, nodes `1..=n` are
//! the reward regions, and node `n + 1` is the end depot. Depots carry no
//! prize. All operations are pure functions over immutable value objects.

use thiserror::Error;

/// Absolute tolerance for time-budget comparisons. Double-precision
/// accumulation over at most `n + 1` legs of unit-box coordinates stays
/// well below this.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid route: {0}")]
    InvalidRoute(String),
}

/// A 2D location. Generated instances keep coordinates in the unit square;
/// loaded instances may hold arbitrary finite reals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// One TOP problem: `n` prize-carrying regions, two depots, a shared time
/// budget and a shared agent speed.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    coords: Vec<Point>,
    prizes: Vec<f64>,
    depot_start: Point,
    depot_end: Point,
    t_max: f64,
    speed: f64,
}

impl Instance {
    /// Validates and builds an instance. Coordinates must be finite (they are
    /// not required to lie in the unit square), prizes strictly positive,
    /// `t_max` and `speed` strictly positive, and at least one region present.
    pub fn new(
        coords: Vec<Point>,
        prizes: Vec<f64>,
        depot_start: Point,
        depot_end: Point,
        t_max: f64,
        speed: f64,
    ) -> Result<Self, CoreError> {
        if coords.is_empty() {
            return Err(CoreError::InvalidArgument("instance has no regions".into()));
        }
        if coords.len() != prizes.len() {
            return Err(CoreError::InvalidArgument(format!(
                "coords/prizes length mismatch: {} vs {}",
                coords.len(),
                prizes.len()
            )));
        }
        if !depot_start.is_finite() || !depot_end.is_finite() {
            return Err(CoreError::InvalidArgument("non-finite depot coordinates".into()));
        }
        if let Some(i) = coords.iter().position(|p| !p.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "non-finite coordinates for region {}",
                i + 1
            )));
        }
        if let Some(i) = prizes.iter().position(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "prize of region {} must be a positive finite real",
                i + 1
            )));
        }
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(CoreError::InvalidArgument("t_max must be a positive finite real".into()));
        }
        if !(speed > 0.0) || !speed.is_finite() {
            return Err(CoreError::InvalidArgument("speed must be a positive finite real".into()));
        }
        Ok(Instance { coords, prizes, depot_start, depot_end, t_max, speed })
    }

    /// Number of reward regions.
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Total node count including both depots (`n + 2`).
    pub fn num_nodes(&self) -> usize {
        self.coords.len() + 2
    }

    /// Index of the end depot (`n + 1`).
    pub fn end_depot(&self) -> usize {
        self.coords.len() + 1
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn prizes(&self) -> &[f64] {
        &self.prizes
    }

    pub fn depot_start(&self) -> Point {
        self.depot_start
    }

    pub fn depot_end(&self) -> Point {
        self.depot_end
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    /// Coordinates of a node in the `0..=n+1` index space.
    ///
    /// Panics on an out-of-range index; use [`Instance::check_node`] first
    /// when the index is untrusted.
    pub fn node_coord(&self, node: usize) -> Point {
        if node == 0 {
            self.depot_start
        } else if node == self.end_depot() {
            self.depot_end
        } else {
            self.coords[node - 1]
        }
    }

    /// Prize of a node; depots yield 0.
    pub fn node_prize(&self, node: usize) -> f64 {
        if node == 0 || node == self.end_depot() {
            0.0
        } else {
            self.prizes[node - 1]
        }
    }

    pub fn check_node(&self, node: usize) -> bool {
        node < self.num_nodes()
    }

    /// Travel time between two nodes of a validated instance.
    pub fn time_between(&self, from: usize, to: usize) -> f64 {
        debug_assert!(self.check_node(from) && self.check_node(to));
        self.node_coord(from).dist(&self.node_coord(to)) / self.speed
    }

    /// Travel time from the start depot straight to the end depot: the
    /// minimum budget any agent needs.
    pub fn depot_to_depot_time(&self) -> f64 {
        self.depot_start.dist(&self.depot_end) / self.speed
    }
}

/// One route per agent, each a node-index sequence expected to run from the
/// start depot (0) to the end depot (n + 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub routes: Vec<Vec<usize>>,
}

impl Solution {
    pub fn new(routes: Vec<Vec<usize>>) -> Self {
        Solution { routes }
    }

    /// Agent count.
    pub fn m(&self) -> usize {
        self.routes.len()
    }

    /// Distinct regions visited across all routes, in ascending order.
    pub fn visited_regions(&self, instance: &Instance) -> Vec<usize> {
        let end = instance.end_depot();
        let mut seen = vec![false; instance.n() + 1];
        for route in &self.routes {
            for &node in route {
                if node > 0 && node < end && node <= instance.n() {
                    seen[node] = true;
                }
            }
        }
        (1..=instance.n()).filter(|&r| seen[r]).collect()
    }
}

/// A single constraint violation, naming the constraint kind and the
/// offending agent/node.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Route does not begin at the start depot.
    MissingStartDepot { agent: usize },
    /// Route does not terminate at the end depot.
    MissingEndDepot { agent: usize },
    /// A node index outside `0..=n+1`.
    IndexOutOfRange { agent: usize, index: usize },
    /// A depot appears in the interior of a route.
    DepotRevisited { agent: usize, position: usize },
    /// The same region appears twice within one agent's route.
    RegionRepeatedInRoute { agent: usize, region: usize },
    /// A region is visited by more than one agent.
    RegionRepeatedAcrossRoutes { region: usize, first_agent: usize, second_agent: usize },
    /// Route duration exceeds the time budget.
    TimeBudgetExceeded { agent: usize, duration: f64, t_max: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingStartDepot { agent } => {
                write!(f, "agent {agent}: route does not start at the start depot")
            }
            Violation::MissingEndDepot { agent } => {
                write!(f, "agent {agent}: route does not end at the end depot")
            }
            Violation::IndexOutOfRange { agent, index } => {
                write!(f, "agent {agent}: node index {index} out of range")
            }
            Violation::DepotRevisited { agent, position } => {
                write!(f, "agent {agent}: depot revisited at position {position}")
            }
            Violation::RegionRepeatedInRoute { agent, region } => {
                write!(f, "agent {agent}: region {region} visited twice in the same route")
            }
            Violation::RegionRepeatedAcrossRoutes { region, first_agent, second_agent } => {
                write!(
                    f,
                    "region {region} visited twice: by agent {first_agent} and agent {second_agent}"
                )
            }
            Violation::TimeBudgetExceeded { agent, duration, t_max } => {
                write!(f, "time budget exceeded, agent {agent}: duration {duration} > t_max {t_max}")
            }
        }
    }
}

/// Outcome of [`check_feasibility`]: `ok` holds iff no violation was found.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Euclidean travel time between two points at the given speed.
pub fn travel_time(a: Point, b: Point, speed: f64) -> Result<f64, CoreError> {
    if !a.is_finite() || !b.is_finite() {
        return Err(CoreError::InvalidArgument("non-finite point coordinates".into()));
    }
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(CoreError::InvalidArgument(format!("speed must be positive, got {speed}")));
    }
    Ok(a.dist(&b) / speed)
}

/// Duration of a route: the sum of travel times over consecutive node pairs.
pub fn route_duration(route: &[usize], instance: &Instance) -> Result<f64, CoreError> {
    for &node in route {
        if !instance.check_node(node) {
            return Err(CoreError::InvalidRoute(format!(
                "node index {node} out of range 0..={}",
                instance.end_depot()
            )));
        }
    }
    Ok(route.windows(2).map(|w| instance.time_between(w[0], w[1])).sum())
}

/// Checks every structural and budget constraint of a solution. Violations
/// are collected and reported, never thrown.
pub fn check_feasibility(solution: &Solution, instance: &Instance) -> FeasibilityReport {
    let mut violations = Vec::new();
    let end = instance.end_depot();
    // region -> first agent that visited it
    let mut visited_by: Vec<Option<usize>> = vec![None; instance.n() + 1];

    for (agent, route) in solution.routes.iter().enumerate() {
        if route.first() != Some(&0) {
            violations.push(Violation::MissingStartDepot { agent });
        }
        if route.last() != Some(&end) {
            violations.push(Violation::MissingEndDepot { agent });
        }
        let mut index_ok = true;
        let mut in_route = vec![false; instance.n() + 1];
        for (pos, &node) in route.iter().enumerate() {
            if !instance.check_node(node) {
                violations.push(Violation::IndexOutOfRange { agent, index: node });
                index_ok = false;
                continue;
            }
            let interior = pos > 0 && pos + 1 < route.len();
            if (node == 0 || node == end) && interior {
                violations.push(Violation::DepotRevisited { agent, position: pos });
                continue;
            }
            if node > 0 && node < end {
                if in_route[node] {
                    violations.push(Violation::RegionRepeatedInRoute { agent, region: node });
                } else {
                    in_route[node] = true;
                    match visited_by[node] {
                        Some(first) if first != agent => {
                            violations.push(Violation::RegionRepeatedAcrossRoutes {
                                region: node,
                                first_agent: first,
                                second_agent: agent,
                            });
                        }
                        Some(_) => {}
                        None => visited_by[node] = Some(agent),
                    }
                }
            }
        }
        if index_ok {
            let duration = route_duration(route, instance).expect("indices checked above");
            if duration > instance.t_max() + TIME_EPS {
                violations.push(Violation::TimeBudgetExceeded {
                    agent,
                    duration,
                    t_max: instance.t_max(),
                });
            }
        }
    }

    FeasibilityReport { ok: violations.is_empty(), violations }
}

/// Sum of prizes over all distinct regions appearing in the routes. Depots
/// contribute nothing; repeated visits are counted once.
pub fn total_reward(solution: &Solution, instance: &Instance) -> Result<f64, CoreError> {
    let end = instance.end_depot();
    let mut seen = vec![false; instance.n() + 1];
    for route in &solution.routes {
        for &node in route {
            if !instance.check_node(node) {
                return Err(CoreError::InvalidRoute(format!(
                    "node index {node} out of range 0..={end}"
                )));
            }
            if node > 0 && node < end {
                seen[node] = true;
            }
        }
    }
    // Sum in region order so the result does not depend on route ordering.
    Ok((1..end).filter(|&i| seen[i]).map(|i| instance.node_prize(i)).sum())
}
