//! Fleet decoding simulator: state, masking, ordered selection with
//! blocking, and full policy rollouts.
//!
//! A fleet step decodes one action per agent. Agents commit in ascending
//! index order: when an agent takes a region, that region's probability is
//! forced to 0 in every later agent's row and the row is re-normalized by
//! its new sum. End-depot picks are never blocked. The feasibility mask
//! keeps the end depot reachable at all times, so every rollout yields a
//! feasible solution by construction.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::policy::{AgentContext, BoundParams, Policy, PolicyError, RunMode};
use crate::tensor::{Graph, TensorError, TensorId};
use crate::top::{check_feasibility, route_duration, total_reward, Instance, Solution, TIME_EPS};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How actions are drawn from the policy's distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// Mutable fleet state during decoding.
#[derive(Debug, Clone)]
pub struct FleetState {
    routes: Vec<Vec<usize>>,
    current_node: Vec<usize>,
    t_left: Vec<f64>,
    visited: Vec<bool>,
    finished: Vec<bool>,
    step_index: usize,
}

impl FleetState {
    /// All agents at the start depot with a full budget; step index 1.
    pub fn init(instance: &Instance, m: usize) -> Result<FleetState, SimError> {
        if m == 0 {
            return Err(SimError::Contract("fleet size must be >= 1".into()));
        }
        let gap = instance.depot_to_depot_time();
        if gap > instance.t_max() + TIME_EPS {
            return Err(SimError::Infeasible(format!(
                "end depot unreachable: depot-to-depot time {gap} exceeds t_max {}",
                instance.t_max()
            )));
        }
        Ok(FleetState {
            routes: vec![vec![0]; m],
            current_node: vec![0; m],
            t_left: vec![instance.t_max(); m],
            visited: vec![false; instance.num_nodes()],
            finished: vec![false; m],
            step_index: 1,
        })
    }

    pub fn m(&self) -> usize {
        self.current_node.len()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn t_left(&self, agent: usize) -> f64 {
        self.t_left[agent]
    }

    pub fn current_node(&self, agent: usize) -> usize {
        self.current_node[agent]
    }

    pub fn is_finished(&self, agent: usize) -> bool {
        self.finished[agent]
    }

    pub fn all_finished(&self) -> bool {
        self.finished.iter().all(|&f| f)
    }

    pub fn routes(&self) -> &[Vec<usize>] {
        &self.routes
    }

    /// Admissible actions for one agent (true = admissible): unvisited
    /// regions from which the end depot stays reachable, plus the end
    /// depot; never the start depot. A finished agent may only self-loop
    /// at the end depot.
    pub fn feasible_mask(&self, agent: usize, instance: &Instance) -> Vec<bool> {
        let nodes = instance.num_nodes();
        let end = instance.end_depot();
        let mut mask = vec![false; nodes];
        if self.finished[agent] {
            mask[end] = true;
            return mask;
        }
        let cur = self.current_node[agent];
        let budget = self.t_left[agent] + TIME_EPS;
        for i in 1..end {
            if !self.visited[i]
                && instance.time_between(cur, i) + instance.time_between(i, end) <= budget
            {
                mask[i] = true;
            }
        }
        if instance.time_between(cur, end) <= budget {
            mask[end] = true;
        }
        mask
    }

    /// The decoder's forbidden mask for the whole fleet, row-major
    /// m × (n+2), true = forbidden.
    pub fn forbidden_mask(&self, instance: &Instance) -> Vec<bool> {
        (0..self.m())
            .flat_map(|k| self.feasible_mask(k, instance).into_iter().map(|adm| !adm))
            .collect()
    }

    /// Decoder view of each agent: remaining time and last position.
    pub fn agent_contexts(&self, instance: &Instance) -> Vec<AgentContext> {
        (0..self.m())
            .map(|k| {
                let p = instance.node_coord(self.current_node[k]);
                AgentContext { t_left: self.t_left[k], x_prev: p.x, y_prev: p.y }
            })
            .collect()
    }

    /// Advances the fleet by one step. Actions must have been admissible at
    /// selection time; anything else is an upstream bug and errors.
    pub fn apply_actions(
        &mut self,
        actions: &[usize],
        instance: &Instance,
    ) -> Result<(), SimError> {
        if actions.len() != self.m() {
            return Err(SimError::Contract(format!(
                "{} actions for {} agents",
                actions.len(),
                self.m()
            )));
        }
        let end = instance.end_depot();

        // validate everything first so a rejected step leaves the state intact
        let mut taken_this_step = vec![false; instance.num_nodes()];
        for (k, &a) in actions.iter().enumerate() {
            if self.finished[k] {
                if a != end {
                    return Err(SimError::Contract(format!(
                        "finished agent {k} chose node {a}, not the end depot"
                    )));
                }
                continue;
            }
            if a == 0 || a > end {
                return Err(SimError::Contract(format!("agent {k} chose invalid node {a}")));
            }
            let cur = self.current_node[k];
            let budget = self.t_left[k] + TIME_EPS;
            if a < end {
                if self.visited[a] {
                    return Err(SimError::Contract(format!(
                        "agent {k} chose already-visited region {a}"
                    )));
                }
                if taken_this_step[a] {
                    return Err(SimError::Contract(format!(
                        "agents picked region {a} twice in one step"
                    )));
                }
                if instance.time_between(cur, a) + instance.time_between(a, end) > budget {
                    return Err(SimError::Contract(format!(
                        "agent {k} cannot reach the end depot via region {a}"
                    )));
                }
                taken_this_step[a] = true;
            } else if instance.time_between(cur, end) > budget {
                return Err(SimError::Contract(format!(
                    "agent {k} cannot reach the end depot in time"
                )));
            }
        }

        for (k, &a) in actions.iter().enumerate() {
            if self.finished[k] {
                continue;
            }
            let cur = self.current_node[k];
            self.t_left[k] -= instance.time_between(cur, a);
            self.current_node[k] = a;
            self.routes[k].push(a);
            if a < end {
                self.visited[a] = true;
            } else {
                self.finished[k] = true;
            }
            debug_assert!(
                instance.time_between(a, end) <= self.t_left[k] + TIME_EPS,
                "masking failed to preserve end-depot reachability"
            );
        }
        self.step_index += 1;
        Ok(())
    }
}

/// One agent's committed action within a fleet step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionPick {
    pub node: usize,
    /// Effective (post-blocking, re-normalized) probability of the pick.
    pub prob: f64,
    /// Forced picks (finished agents, zero-sum rows) carry no log-prob.
    pub forced: bool,
}

/// Commits one action per agent from the decoder's probability matrix,
/// blocking each chosen region for later agents and re-normalizing their
/// rows by the new sum.
pub fn select_actions(
    probs: &[f64],
    state: &FleetState,
    instance: &Instance,
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<Vec<ActionPick>, SimError> {
    let m = state.m();
    let cols = instance.num_nodes();
    if probs.len() != m * cols {
        return Err(SimError::Contract(format!(
            "probability matrix holds {} values, expected {}",
            probs.len(),
            m * cols
        )));
    }
    let end = instance.end_depot();
    let mut blocked = vec![false; cols];
    let mut picks = Vec::with_capacity(m);
    for k in 0..m {
        if state.finished[k] {
            picks.push(ActionPick { node: end, prob: 1.0, forced: true });
            continue;
        }
        let row: Vec<f64> = probs[k * cols..(k + 1) * cols]
            .iter()
            .enumerate()
            .map(|(i, &p)| if blocked[i] { 0.0 } else { p })
            .collect();
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            picks.push(ActionPick { node: end, prob: 1.0, forced: true });
            continue;
        }
        let node = match mode {
            SelectMode::Greedy => {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            }
            SelectMode::Sample => {
                let u = rng.gen::<f64>() * sum;
                let mut cum = 0.0;
                let mut chosen = None;
                for (i, &p) in row.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    cum += p;
                    if u < cum {
                        chosen = Some(i);
                        break;
                    }
                }
                // rounding may leave u just past the final cumulative sum
                chosen.unwrap_or_else(|| {
                    row.iter().rposition(|&p| p > 0.0).expect("row has positive mass")
                })
            }
        };
        if node < end {
            blocked[node] = true;
        }
        picks.push(ActionPick { node, prob: row[node] / sum, forced: false });
    }
    Ok(picks)
}

/// A completed decoding episode.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub solution: Solution,
    /// Sum of log effective probabilities of all free actions.
    pub log_prob: f64,
    pub reward: f64,
}

pub(crate) fn finalize(
    state: FleetState,
    instance: &Instance,
    log_prob: f64,
) -> Result<Rollout, SimError> {
    let solution = Solution::new(state.routes);
    let report = check_feasibility(&solution, instance);
    if !report.ok {
        return Err(SimError::Internal(format!(
            "rollout produced an infeasible solution: {}",
            report
                .violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let reward = total_reward(&solution, instance)
        .map_err(|e| SimError::Internal(format!("reward on own solution failed: {e}")))?;
    Ok(Rollout { solution, log_prob, reward })
}

fn step_limit(instance: &Instance) -> usize {
    instance.n() + 2
}

/// Runs a full inference-mode episode: encode once, then decode fleet
/// steps until every agent reaches the end depot.
pub fn rollout(
    policy: &Policy,
    instance: &Instance,
    m: usize,
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<Rollout, SimError> {
    let mut state = FleetState::init(instance, m)?;
    let mut g = Graph::new();
    let bound = policy.bind(&mut g, false)?;
    let (h_node, _) = policy.encode(&mut g, &bound, instance, RunMode::Infer)?;
    let mut log_prob = 0.0;
    while !state.all_finished() {
        if state.step_index > step_limit(instance) {
            return Err(SimError::Internal(format!(
                "fleet step {} exceeded the bound {}",
                state.step_index,
                step_limit(instance)
            )));
        }
        let query = policy.context_embedding(&mut g, &bound, h_node, &state.agent_contexts(instance))?;
        let mask = state.forbidden_mask(instance);
        let probs = policy.decode_step(&mut g, &bound, h_node, query, &mask)?;
        let picks = select_actions(g.value(probs).data(), &state, instance, mode, rng)?;
        for pick in &picks {
            if !pick.forced {
                log_prob += pick.prob.ln();
            }
        }
        let actions: Vec<usize> = picks.iter().map(|p| p.node).collect();
        state.apply_actions(&actions, instance)?;
    }
    finalize(state, instance, log_prob)
}

/// A sampled episode recorded on a caller-owned graph for training: the
/// returned node is the in-graph log-probability of the episode's free
/// actions, differentiable w.r.t. the bound parameters.
pub struct RecordedRollout {
    pub rollout: Rollout,
    pub log_prob: TensorId,
    /// Node picks per fleet step, one inner entry per agent.
    pub actions: Vec<Vec<usize>>,
}

/// Per-step forced choices for replaying an episode.
type ForcedActions<'a> = &'a [Vec<usize>];

enum Drive<'a, R: Rng> {
    Sample(&'a mut R),
    Replay(ForcedActions<'a>),
}

fn run_recorded<R: Rng>(
    policy: &Policy,
    g: &mut Graph,
    bound: &BoundParams,
    instance: &Instance,
    m: usize,
    mode: RunMode,
    mut drive: Drive<'_, R>,
) -> Result<(RecordedRollout, Vec<crate::policy::BnObservation>), SimError> {
    let mut state = FleetState::init(instance, m)?;
    let (h_node, observations) = policy.encode(g, bound, instance, mode)?;
    let cols = instance.num_nodes();
    let end = instance.end_depot();
    let mut log_terms: Vec<TensorId> = Vec::new();
    let mut actions: Vec<Vec<usize>> = Vec::new();

    while !state.all_finished() {
        if state.step_index > step_limit(instance) {
            return Err(SimError::Internal(format!(
                "fleet step {} exceeded the bound {}",
                state.step_index,
                step_limit(instance)
            )));
        }
        let query = policy.context_embedding(g, bound, h_node, &state.agent_contexts(instance))?;
        let mask = state.forbidden_mask(instance);
        let probs = policy.decode_step(g, bound, h_node, query, &mask)?;
        let picks = match &mut drive {
            Drive::Sample(rng) => {
                select_actions(g.value(probs).data(), &state, instance, SelectMode::Sample, rng)?
            }
            Drive::Replay(steps) => {
                let step_actions = steps.get(state.step_index - 1).ok_or_else(|| {
                    SimError::Contract("replay ran out of recorded steps".into())
                })?;
                replay_picks(g.value(probs).data(), &state, instance, step_actions)?
            }
        };

        let mut blocked = vec![false; cols];
        for (k, pick) in picks.iter().enumerate() {
            if !pick.forced {
                let numerator = g.pick(probs, k, pick.node)?;
                let ln_num = g.ln(numerator)?;
                let term = if blocked.iter().any(|&b| b) {
                    let row = g.slice_rows(probs, k, 1)?;
                    let unblocked = g.masked_fill(row, &blocked, 0.0)?;
                    let denominator = g.sum_all(unblocked)?;
                    let ln_den = g.ln(denominator)?;
                    g.sub(ln_num, ln_den)?
                } else {
                    ln_num
                };
                log_terms.push(term);
            }
            if pick.node < end && !state.finished[k] {
                blocked[pick.node] = true;
            }
        }

        let step_actions: Vec<usize> = picks.iter().map(|p| p.node).collect();
        state.apply_actions(&step_actions, instance)?;
        actions.push(step_actions);
    }

    let log_prob = match log_terms.split_first() {
        None => g.constant(crate::tensor::Tensor::scalar(0.0))?,
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
    };
    let scalar_log_prob = g.value(log_prob).scalar_value();
    let rollout = finalize(state, instance, scalar_log_prob)?;
    Ok((RecordedRollout { rollout, log_prob, actions }, observations))
}

/// Validates forced picks against the current distributions and computes
/// their effective probabilities.
fn replay_picks(
    probs: &[f64],
    state: &FleetState,
    instance: &Instance,
    forced: &[usize],
) -> Result<Vec<ActionPick>, SimError> {
    let m = state.m();
    let cols = instance.num_nodes();
    if forced.len() != m {
        return Err(SimError::Contract(format!(
            "replay step has {} actions for {} agents",
            forced.len(),
            m
        )));
    }
    let end = instance.end_depot();
    let mut blocked = vec![false; cols];
    let mut picks = Vec::with_capacity(m);
    for (k, &node) in forced.iter().enumerate() {
        if state.finished[k] {
            if node != end {
                return Err(SimError::Contract(format!(
                    "replay forces finished agent {k} to node {node}"
                )));
            }
            picks.push(ActionPick { node, prob: 1.0, forced: true });
            continue;
        }
        let row: Vec<f64> = probs[k * cols..(k + 1) * cols]
            .iter()
            .enumerate()
            .map(|(i, &p)| if blocked[i] { 0.0 } else { p })
            .collect();
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            if node != end {
                return Err(SimError::Contract(format!(
                    "replay forces agent {k} to node {node} from an empty row"
                )));
            }
            picks.push(ActionPick { node, prob: 1.0, forced: true });
            continue;
        }
        if node >= cols || row[node] <= 0.0 {
            return Err(SimError::Contract(format!(
                "replay forces agent {k} to node {node} with zero probability"
            )));
        }
        if node < end {
            blocked[node] = true;
        }
        picks.push(ActionPick { node, prob: row[node] / sum, forced: false });
    }
    Ok(picks)
}

/// Samples an episode in train mode, recording it on `g`, and folds the
/// observed batch statistics into the policy's running buffers.
pub fn rollout_recorded(
    policy: &mut Policy,
    g: &mut Graph,
    bound: &BoundParams,
    instance: &Instance,
    m: usize,
    rng: &mut impl Rng,
) -> Result<RecordedRollout, SimError> {
    let (recorded, observations) =
        run_recorded(&*policy, g, bound, instance, m, RunMode::Train, Drive::Sample::<_>(rng))?;
    policy.absorb_bn_obs(&observations);
    Ok(recorded)
}

/// Rebuilds the in-graph log-probability of a fixed action sequence
/// without touching running statistics. `mode` selects which batch-norm
/// statistics the encoder uses and must match the original episode's.
pub fn replay_log_prob(
    policy: &Policy,
    g: &mut Graph,
    bound: &BoundParams,
    instance: &Instance,
    m: usize,
    actions: ForcedActions<'_>,
    mode: RunMode,
) -> Result<RecordedRollout, SimError> {
    let (recorded, _) = run_recorded(
        policy,
        g,
        bound,
        instance,
        m,
        mode,
        Drive::Replay::<rand_chacha::ChaCha8Rng>(actions),
    )?;
    Ok(recorded)
}

/// Serializable episode summary for the CLI.
#[derive(Debug, Serialize)]
pub struct SolutionDump {
    pub routes: Vec<Vec<usize>>,
    pub reward: f64,
    pub duration_per_agent: Vec<f64>,
    pub t_max: f64,
}

impl SolutionDump {
    pub fn new(solution: &Solution, instance: &Instance) -> Result<SolutionDump, SimError> {
        let durations = solution
            .routes
            .iter()
            .map(|r| route_duration(r, instance))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| SimError::Internal(e.to_string()))?;
        let reward = total_reward(solution, instance)
            .map_err(|e| SimError::Internal(e.to_string()))?;
        Ok(SolutionDump {
            routes: solution.routes.clone(),
            reward,
            duration_per_agent: durations,
            t_max: instance.t_max(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_instance, GenConfig, PrizeScheme};
    use crate::policy::{NetConfig, NormKind};
    use crate::top::Point;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_policy(seed: u64) -> Policy {
        let config = NetConfig {
            hidden_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            logit_clip: 10.0,
            encoder_norm: NormKind::Batch,
        };
        Policy::init(config, seed).unwrap()
    }

    fn square_instance(t_max: f64) -> Instance {
        Instance::new(
            vec![
                Point::new(0.2, 0.0),
                Point::new(0.4, 0.0),
                Point::new(0.6, 0.0),
                Point::new(0.8, 0.0),
            ],
            vec![1.0, 1.0, 1.0, 1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            t_max,
            1.0,
        )
        .unwrap()
    }

    fn random_instance(n: usize, seed: u64, t_max: f64) -> Instance {
        let config = GenConfig {
            n,
            m: 2,
            t_max,
            prize_scheme: PrizeScheme::Uniform,
            single_depot: true,
            seed,
        };
        generate_instance(&config, 0)
    }

    #[test]
    fn init_places_fleet_at_start() {
        let inst = random_instance(5, 1, 2.0);
        let state = FleetState::init(&inst, 3).unwrap();
        assert_eq!(state.m(), 3);
        assert_eq!(state.step_index(), 1);
        for k in 0..3 {
            assert_eq!(state.current_node(k), 0);
            assert_eq!(state.t_left(k), 2.0);
            assert!(!state.is_finished(k));
        }
    }

    #[test]
    fn init_rejects_unreachable_end_depot() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.5)],
            vec![1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            0.5,
            1.0,
        )
        .unwrap();
        assert!(matches!(FleetState::init(&inst, 2), Err(SimError::Infeasible(_))));
    }

    #[test]
    fn fresh_mask_admits_regions_and_end_only() {
        let inst = random_instance(5, 2, 3.0);
        let state = FleetState::init(&inst, 2).unwrap();
        let mask = state.feasible_mask(0, &inst);
        assert!(!mask[0]);
        assert!(mask[6]);
        assert!(mask[1..6].iter().all(|&a| a), "generous budget admits all regions");
    }

    #[test]
    fn unreachable_region_is_masked() {
        // region 2 sits off the depot axis: the detour costs 2*sqrt(0.41)
        let off_axis = |t_max| {
            Instance::new(
                vec![Point::new(0.2, 0.0), Point::new(0.5, 0.4)],
                vec![1.0, 1.0],
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                t_max,
                1.0,
            )
            .unwrap()
        };
        let tight = off_axis(1.1);
        let state = FleetState::init(&tight, 1).unwrap();
        let mask = state.feasible_mask(0, &tight);
        assert!(!mask[2], "2*sqrt(0.41) ~ 1.28 > 1.1");
        assert!(mask[1], "on-axis region costs exactly the depot gap");
        let loose = off_axis(1.3);
        let state = FleetState::init(&loose, 1).unwrap();
        assert!(state.feasible_mask(0, &loose)[2]);
    }

    #[test]
    fn finished_agent_can_only_self_loop() {
        let inst = square_instance(2.0);
        let mut state = FleetState::init(&inst, 2).unwrap();
        state.apply_actions(&[5, 1], &inst).unwrap();
        assert!(state.is_finished(0));
        let mask = state.feasible_mask(0, &inst);
        assert_eq!(mask.iter().filter(|&&a| a).count(), 1);
        assert!(mask[5]);
    }

    #[test]
    fn apply_updates_budget_and_flags() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.9)],
            vec![1.0],
            Point::new(0.5, 0.5),
            Point::new(0.5, 0.5),
            2.0,
            1.0,
        )
        .unwrap();
        let mut state = FleetState::init(&inst, 1).unwrap();
        state.apply_actions(&[1], &inst).unwrap();
        assert!((state.t_left(0) - 1.6).abs() < 1e-12);
        assert_eq!(state.current_node(0), 1);
        assert!(!state.is_finished(0));
        state.apply_actions(&[2], &inst).unwrap();
        assert!(state.is_finished(0));
        assert_eq!(state.step_index(), 3);
        // absorbed self-loop costs nothing and leaves the route alone
        let before = state.t_left(0);
        state.apply_actions(&[2], &inst).unwrap();
        assert_eq!(state.t_left(0), before);
        assert_eq!(state.routes()[0], vec![0, 1, 2]);
    }

    #[test]
    fn apply_rejects_inadmissible_actions() {
        let inst = square_instance(2.0);
        let mut state = FleetState::init(&inst, 2).unwrap();
        assert!(matches!(state.apply_actions(&[0, 5], &inst), Err(SimError::Contract(_))));
        assert!(matches!(state.apply_actions(&[1, 1], &inst), Err(SimError::Contract(_))));
        state.apply_actions(&[1, 2], &inst).unwrap();
        let mut clone = state.clone();
        assert!(matches!(clone.apply_actions(&[2, 5], &inst), Err(SimError::Contract(_))));
    }

    #[test]
    fn greedy_selection_blocks_earlier_picks() {
        let inst = square_instance(2.0);
        let state = FleetState::init(&inst, 2).unwrap();
        // both agents peaked on region 3
        let probs = vec![
            0.0, 0.05, 0.05, 0.7, 0.1, 0.1, //
            0.0, 0.05, 0.05, 0.6, 0.25, 0.05,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = select_actions(&probs, &state, &inst, SelectMode::Greedy, &mut rng).unwrap();
        assert_eq!(picks[0].node, 3);
        assert!((picks[0].prob - 0.7).abs() < 1e-15);
        assert_eq!(picks[1].node, 4, "agent 2 takes its next-best after blocking");
        assert!((picks[1].prob - 0.25 / 0.4).abs() < 1e-15);
        assert!(!picks[0].forced && !picks[1].forced);
    }

    #[test]
    fn greedy_takes_argmax() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.5)],
            vec![1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            4.0,
            1.0,
        )
        .unwrap();
        let state = FleetState::init(&inst, 1).unwrap();
        let probs = vec![0.0, 0.2, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = select_actions(&probs, &state, &inst, SelectMode::Greedy, &mut rng).unwrap();
        assert_eq!(picks[0].node, 2);
        assert!((picks[0].prob - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_reproducible() {
        let inst = square_instance(2.0);
        let state = FleetState::init(&inst, 2).unwrap();
        let probs = vec![
            0.0, 0.2, 0.2, 0.2, 0.2, 0.2, //
            0.0, 0.1, 0.3, 0.3, 0.2, 0.1,
        ];
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_actions(&probs, &state, &inst, SelectMode::Sample, &mut rng)
                .unwrap()
                .iter()
                .map(|p| p.node)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        let distinct: std::collections::HashSet<Vec<usize>> = (0..20).map(draw).collect();
        assert!(distinct.len() > 1, "different seeds explore different actions");
    }

    #[test]
    fn zero_sum_row_forces_end_depot() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.5)],
            vec![1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            4.0,
            1.0,
        )
        .unwrap();
        let state = FleetState::init(&inst, 2).unwrap();
        // both rows peaked entirely on region 1; agent 2 left with nothing
        let probs = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = select_actions(&probs, &state, &inst, SelectMode::Greedy, &mut rng).unwrap();
        assert_eq!(picks[0].node, 1);
        assert_eq!(picks[1].node, 2);
        assert!(picks[1].forced);
        assert_eq!(picks[1].prob, 1.0);
    }

    #[test]
    fn rollouts_are_feasible_across_seeds() {
        let policy = tiny_policy(3);
        for seed in 0..30u64 {
            let inst = random_instance(6, seed, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rollout(&policy, &inst, 2, SelectMode::Sample, &mut rng).unwrap();
            assert!(check_feasibility(&r.solution, &inst).ok);
            assert!(r.log_prob <= 1e-12, "log_prob {} must be <= 0", r.log_prob);
            assert!(r.reward >= 0.0);
        }
    }

    #[test]
    fn greedy_rollout_is_bit_stable() {
        let policy = tiny_policy(5);
        let inst = random_instance(8, 11, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rollout(&policy, &inst, 3, SelectMode::Greedy, &mut rng).unwrap();
        let b = rollout(&policy, &inst, 3, SelectMode::Greedy, &mut rng).unwrap();
        assert_eq!(a.solution.routes, b.solution.routes);
        assert_eq!(a.reward.to_bits(), b.reward.to_bits());
        assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
    }

    #[test]
    fn recorded_rollout_matches_replayed_log_prob() {
        let mut policy = tiny_policy(7);
        let inst = random_instance(5, 13, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, false).unwrap();
        let recorded =
            rollout_recorded(&mut policy, &mut g, &bound, &inst, 2, &mut rng).unwrap();

        // Train mode after absorption changes running stats, but replay in
        // train mode recomputes batch statistics, which depend only on the
        // instance, so the distributions match the recording pass exactly.
        let mut g2 = Graph::new();
        let bound2 = policy.bind(&mut g2, false).unwrap();
        let replayed = replay_log_prob(
            &policy,
            &mut g2,
            &bound2,
            &inst,
            2,
            &recorded.actions,
            RunMode::Train,
        )
        .unwrap();
        assert_eq!(replayed.rollout.solution.routes, recorded.rollout.solution.routes);
        assert_eq!(
            replayed.rollout.log_prob.to_bits(),
            recorded.rollout.log_prob.to_bits()
        );
    }

    #[test]
    fn greedy_rollout_log_prob_matches_replay() {
        let policy = tiny_policy(9);
        let inst = random_instance(6, 17, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let greedy = rollout(&policy, &inst, 2, SelectMode::Greedy, &mut rng).unwrap();

        // reconstruct per-step actions from the routes
        let steps = greedy.solution.routes.iter().map(|r| r.len() - 1).max().unwrap();
        let end = inst.end_depot();
        let actions: Vec<Vec<usize>> = (0..steps)
            .map(|l| {
                greedy
                    .solution
                    .routes
                    .iter()
                    .map(|r| r.get(l + 1).copied().unwrap_or(end))
                    .collect()
            })
            .collect();

        let mut g = Graph::new();
        let bound = policy.bind(&mut g, false).unwrap();
        let replayed =
            replay_log_prob(&policy, &mut g, &bound, &inst, 2, &actions, RunMode::Infer).unwrap();
        assert!((replayed.rollout.log_prob - greedy.log_prob).abs() <= 1e-12);
    }

    #[test]
    fn recorded_log_prob_gradient_reaches_parameters() {
        let mut policy = tiny_policy(11);
        let inst = random_instance(4, 19, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, true).unwrap();
        let recorded =
            rollout_recorded(&mut policy, &mut g, &bound, &inst, 2, &mut rng).unwrap();
        g.backward(recorded.log_prob).unwrap();
        let wq = bound.get("enc.block0.mha.wq").unwrap();
        let grad = g.grad(wq).expect("gradient flows into encoder weights");
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    /// Exhaustive policy-tree enumeration: expected reward of the sampled
    /// process, blocking included.
    fn expected_reward(policy: &Policy, instance: &Instance, m: usize) -> f64 {
        fn recurse(
            policy: &Policy,
            instance: &Instance,
            state: &FleetState,
            acc_prob: f64,
            total: &mut f64,
        ) {
            if state.all_finished() {
                let solution = Solution::new(state.routes().to_vec());
                let reward = total_reward(&solution, instance).unwrap();
                *total += acc_prob * reward;
                return;
            }
            let mut g = Graph::new();
            let bound = policy.bind(&mut g, false).unwrap();
            let (h, _) = policy.encode(&mut g, &bound, instance, RunMode::Infer).unwrap();
            let query = policy
                .context_embedding(&mut g, &bound, h, &state.agent_contexts(instance))
                .unwrap();
            let mask = state.forbidden_mask(instance);
            let probs_id = policy.decode_step(&mut g, &bound, h, query, &mask).unwrap();
            let probs = g.value(probs_id).data().to_vec();

            // branch over every joint action, agents in order with blocking
            let cols = instance.num_nodes();
            let end = instance.end_depot();
            fn per_agent(
                k: usize,
                probs: &[f64],
                blocked: &mut Vec<bool>,
                actions: &mut Vec<usize>,
                joint_prob: f64,
                state: &FleetState,
                instance: &Instance,
                out: &mut Vec<(Vec<usize>, f64)>,
            ) {
                let m = state.m();
                let cols = instance.num_nodes();
                let end = instance.end_depot();
                if k == m {
                    out.push((actions.clone(), joint_prob));
                    return;
                }
                if state.is_finished(k) {
                    actions.push(end);
                    per_agent(k + 1, probs, blocked, actions, joint_prob, state, instance, out);
                    actions.pop();
                    return;
                }
                let row: Vec<f64> = probs[k * cols..(k + 1) * cols]
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| if blocked[i] { 0.0 } else { p })
                    .collect();
                let sum: f64 = row.iter().sum();
                if sum <= 0.0 {
                    actions.push(end);
                    per_agent(k + 1, probs, blocked, actions, joint_prob, state, instance, out);
                    actions.pop();
                    return;
                }
                for (node, &p) in row.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let was_blocked = if node < end {
                        let w = blocked[node];
                        blocked[node] = true;
                        w
                    } else {
                        false
                    };
                    actions.push(node);
                    per_agent(
                        k + 1,
                        probs,
                        blocked,
                        actions,
                        joint_prob * p / sum,
                        state,
                        instance,
                        out,
                    );
                    actions.pop();
                    if node < end {
                        blocked[node] = was_blocked;
                    }
                }
            }

            let mut joints = Vec::new();
            let mut blocked = vec![false; cols];
            let mut actions = Vec::with_capacity(state.m());
            per_agent(0, &probs, &mut blocked, &mut actions, 1.0, state, instance, &mut joints);
            let _ = end;
            for (joint, p) in joints {
                let mut next = state.clone();
                next.apply_actions(&joint, instance).unwrap();
                recurse(policy, instance, &next, acc_prob * p, total);
            }
        }

        let state = FleetState::init(instance, m).unwrap();
        let mut total = 0.0;
        recurse(policy, instance, &state, 1.0, &mut total);
        total
    }

    #[test]
    fn sampled_mean_matches_policy_tree_expectation() {
        let policy = tiny_policy(13);
        let inst = random_instance(3, 23, 1.6);
        let exact = expected_reward(&policy, &inst, 2);

        let samples = 1000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rewards = Vec::with_capacity(samples);
        for _ in 0..samples {
            rewards.push(rollout(&policy, &inst, 2, SelectMode::Sample, &mut rng).unwrap().reward);
        }
        let mean: f64 = rewards.iter().sum::<f64>() / samples as f64;
        let var: f64 =
            rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (samples - 1) as f64;
        let sem = (var / samples as f64).sqrt();
        let margin = 4.0 * sem + 1e-9;
        assert!(
            (mean - exact).abs() <= margin,
            "sampled mean {mean} vs exact {exact} (margin {margin})"
        );
    }

    #[test]
    fn solution_dump_serializes_cleanly() {
        let inst = square_instance(2.0);
        let solution = Solution::new(vec![vec![0, 1, 5], vec![0, 4, 5]]);
        let dump = SolutionDump::new(&solution, &inst).unwrap();
        let json = serde_json::to_string(&dump).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["reward"], 2.0);
        assert_eq!(parsed["t_max"], 2.0);
        assert_eq!(parsed["routes"][0][1], 1);
        assert_eq!(parsed["duration_per_agent"].as_array().unwrap().len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        /// Rollout feasibility and bookkeeping across random setups.
        #[test]
        fn rollout_state_bookkeeping_holds(seed in 0u64..300, n in 2usize..8, m in 1usize..4) {
            let policy = tiny_policy(seed % 5);
            let inst = random_instance(n, seed + 500, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rollout(&policy, &inst, m, SelectMode::Sample, &mut rng).unwrap();
            prop_assert!(check_feasibility(&r.solution, &inst).ok);
            prop_assert_eq!(r.solution.routes.len(), m);
            for route in &r.solution.routes {
                prop_assert!(route.len() <= n + 2);
                let d = route_duration(route, &inst).unwrap();
                prop_assert!(d <= inst.t_max() + TIME_EPS);
            }
        }
    }
}
