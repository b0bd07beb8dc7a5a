//! Non-learned comparators: a constructive greedy heuristic, a uniform
//! random policy, and an exhaustive optimal solver for tiny instances.

use rand::Rng;
use thiserror::Error;

use crate::sim::{select_actions, FleetState, Rollout, SelectMode, SimError};
use crate::top::{Instance, Solution, TIME_EPS};

/// Largest n the exhaustive solver accepts; beyond this the subset
/// enumeration blows up.
pub const ORACLE_MAX_N: usize = 10;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("exhaustive search refuses n = {n}; the guard is n <= {guard}")]
    TooLarge { n: usize, guard: usize },
    #[error("infeasible instance: {0}")]
    Infeasible(String),
}

/// Round-robin constructive heuristic: each agent in turn appends the
/// admissible region with the best prize per marginal travel time
/// (detour over heading straight to the end depot), until nobody can
/// extend; then everyone returns to the end depot.
pub fn greedy_heuristic(instance: &Instance, m: usize) -> Solution {
    let end = instance.end_depot();
    let mut routes: Vec<Vec<usize>> = vec![vec![0]; m];
    let mut cur = vec![0usize; m];
    let mut t_left = vec![instance.t_max(); m];
    let mut visited = vec![false; instance.num_nodes()];
    let mut done = vec![false; m];

    loop {
        let mut extended = false;
        for k in 0..m {
            if done[k] {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for i in 1..end {
                if visited[i] {
                    continue;
                }
                let out = instance.time_between(cur[k], i);
                let home = instance.time_between(i, end);
                if out + home > t_left[k] + TIME_EPS {
                    continue;
                }
                let delta = out + home - instance.time_between(cur[k], end);
                let ratio = if delta > 0.0 {
                    instance.node_prize(i) / delta
                } else {
                    f64::INFINITY
                };
                if best.map_or(true, |(b, _)| ratio > b) {
                    best = Some((ratio, i));
                }
            }
            match best {
                Some((_, i)) => {
                    t_left[k] -= instance.time_between(cur[k], i);
                    visited[i] = true;
                    cur[k] = i;
                    routes[k].push(i);
                    extended = true;
                }
                None => done[k] = true,
            }
        }
        if !extended {
            break;
        }
    }
    for route in &mut routes {
        route.push(end);
    }
    Solution::new(routes)
}

/// One episode of the uniform policy: every admissible action is equally
/// likely, selection and blocking handled by the simulator.
pub fn random_rollout(
    instance: &Instance,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Rollout, SimError> {
    let mut state = FleetState::init(instance, m)?;
    let cols = instance.num_nodes();
    let mut log_prob = 0.0;
    while !state.all_finished() {
        let mut probs = vec![0.0; state.m() * cols];
        for k in 0..state.m() {
            let mask = state.feasible_mask(k, instance);
            // the end depot is always admissible, so the count is >= 1
            let p = 1.0 / mask.iter().filter(|&&a| a).count() as f64;
            for (i, &adm) in mask.iter().enumerate() {
                if adm {
                    probs[k * cols + i] = p;
                }
            }
        }
        let picks = select_actions(&probs, &state, instance, SelectMode::Sample, rng)?;
        for pick in &picks {
            if !pick.forced {
                log_prob += pick.prob.ln();
            }
        }
        let actions: Vec<usize> = picks.iter().map(|p| p.node).collect();
        state.apply_actions(&actions, instance)?;
    }
    crate::sim::finalize(state, instance, log_prob)
}

struct SubsetTours {
    /// `parent[mask][j]`: predecessor of region j+1 on the fastest
    /// start-depot tour of exactly `mask` ending there (Held-Karp).
    parent: Vec<Vec<usize>>,
    /// fastest completion (tour plus hop to the end depot) per mask
    completion: Vec<f64>,
    last: Vec<usize>,
    prize: Vec<f64>,
}

impl SubsetTours {
    fn build(instance: &Instance) -> SubsetTours {
        let n = instance.n();
        let end = instance.end_depot();
        let size = 1usize << n;
        let mut min_time = vec![vec![f64::INFINITY; n]; size];
        let mut parent = vec![vec![usize::MAX; n]; size];
        let mut completion = vec![f64::INFINITY; size];
        let mut last = vec![usize::MAX; size];
        let mut prize = vec![0.0; size];

        completion[0] = instance.depot_to_depot_time();
        for mask in 1..size {
            for i in 0..n {
                if mask & (1 << i) != 0 {
                    prize[mask] += instance.node_prize(i + 1);
                }
            }
            for j in 0..n {
                if mask & (1 << j) == 0 {
                    continue;
                }
                if mask == 1 << j {
                    min_time[mask][j] = instance.time_between(0, j + 1);
                    parent[mask][j] = 0;
                } else {
                    let rest = mask ^ (1 << j);
                    for i in 0..n {
                        if rest & (1 << i) == 0 {
                            continue;
                        }
                        let t = min_time[rest][i] + instance.time_between(i + 1, j + 1);
                        if t < min_time[mask][j] {
                            min_time[mask][j] = t;
                            parent[mask][j] = i + 1;
                        }
                    }
                }
                let total = min_time[mask][j] + instance.time_between(j + 1, end);
                if total < completion[mask] {
                    completion[mask] = total;
                    last[mask] = j;
                }
            }
        }
        SubsetTours { parent, completion, last, prize }
    }

    fn feasible(&self, mask: usize, t_max: f64) -> bool {
        self.completion[mask] <= t_max + TIME_EPS
    }

    /// The fastest route visiting exactly `mask`, depot to depot.
    fn route(&self, mask: usize, end: usize) -> Vec<usize> {
        if mask == 0 {
            return vec![0, end];
        }
        let mut nodes = Vec::new();
        let mut m = mask;
        let mut j = self.last[mask] + 1;
        while j != 0 {
            nodes.push(j);
            let p = self.parent[m][j - 1];
            m ^= 1 << (j - 1);
            j = p;
        }
        nodes.reverse();
        let mut route = Vec::with_capacity(nodes.len() + 2);
        route.push(0);
        route.extend(nodes);
        route.push(end);
        route
    }
}

/// Exact optimum for small instances: Held-Karp over region subsets, then
/// a cover DP assigning disjoint feasible subsets to agents. Ties are
/// broken toward fewer total legs, then toward the lexicographically
/// smallest route list over fastest per-subset visit orders.
pub fn exhaustive_optimal(instance: &Instance, m: usize) -> Result<Solution, BaselineError> {
    let n = instance.n();
    if n > ORACLE_MAX_N {
        return Err(BaselineError::TooLarge { n, guard: ORACLE_MAX_N });
    }
    let gap = instance.depot_to_depot_time();
    if gap > instance.t_max() + TIME_EPS {
        return Err(BaselineError::Infeasible(format!(
            "end depot unreachable: depot-to-depot time {gap} exceeds t_max {}",
            instance.t_max()
        )));
    }
    let end = instance.end_depot();
    let tours = SubsetTours::build(instance);
    let t_max = instance.t_max();
    let size = 1usize << n;

    // cover[k][s]: s splits into at most k disjoint feasible subsets
    let mut cover = vec![vec![false; size]; m + 1];
    cover[0][0] = true;
    for k in 1..=m {
        for s in 0..size {
            if cover[k - 1][s] {
                cover[k][s] = true;
                continue;
            }
            let mut t = s;
            while t > 0 {
                if tours.feasible(t, t_max) && cover[k - 1][s ^ t] {
                    cover[k][s] = true;
                    break;
                }
                t = (t - 1) & s;
            }
        }
    }

    let mut best = 0usize;
    for s in 1..size {
        if !cover[m][s] {
            continue;
        }
        let better = tours.prize[s] > tours.prize[best]
            || (tours.prize[s] == tours.prize[best]
                && s.count_ones() < best.count_ones());
        if better {
            best = s;
        }
    }

    // peel agents off one at a time, taking the lexicographically
    // smallest route that leaves the rest coverable
    let mut routes = Vec::with_capacity(m);
    let mut remaining = best;
    for k in (0..m).rev() {
        let mut chosen = 0usize;
        let mut chosen_route = tours.route(0, end);
        let mut t = remaining;
        loop {
            if t > 0 && tours.feasible(t, t_max) && cover[k][remaining ^ t] {
                let route = tours.route(t, end);
                if route < chosen_route {
                    chosen = t;
                    chosen_route = route;
                }
            }
            if t == 0 {
                break;
            }
            t = (t - 1) & remaining;
        }
        if chosen == 0 && !cover[k][remaining] {
            unreachable!("cover table admitted an unassignable mask");
        }
        remaining ^= chosen;
        routes.push(chosen_route);
    }
    Ok(Solution::new(routes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_instance, GenConfig, PrizeScheme};
    use crate::top::{check_feasibility, total_reward, Point};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_instance(xs: &[f64], prizes: &[f64], t_max: f64) -> Instance {
        Instance::new(
            xs.iter().map(|&x| Point::new(x, 0.0)).collect(),
            prizes.to_vec(),
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
    fn greedy_with_no_slack_goes_straight_home() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.5)],
            vec![1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            1.0 + 1e-6,
            1.0,
        )
        .unwrap();
        let sol = greedy_heuristic(&inst, 2);
        assert_eq!(sol.routes, vec![vec![0, 2], vec![0, 2]]);
        assert_eq!(total_reward(&sol, &inst).unwrap(), 0.0);
    }

    #[test]
    fn greedy_sends_exactly_one_agent_to_a_lone_region() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.3)],
            vec![1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            2.0,
            1.0,
        )
        .unwrap();
        let sol = greedy_heuristic(&inst, 3);
        let visits: usize = sol.routes.iter().map(|r| r.iter().filter(|&&v| v == 1).count()).sum();
        assert_eq!(visits, 1);
        assert_eq!(sol.routes[0], vec![0, 1, 2], "round-robin starts with agent 1");
        assert!(check_feasibility(&sol, &inst).ok);
    }

    #[test]
    fn greedy_prefers_better_prize_per_detour() {
        // region 1: big prize, big detour; region 2: half prize, tiny detour
        let inst = Instance::new(
            vec![Point::new(0.5, 0.4), Point::new(0.5, 0.02)],
            vec![1.0, 0.5],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            3.0,
            1.0,
        )
        .unwrap();
        let sol = greedy_heuristic(&inst, 1);
        assert_eq!(sol.routes[0][1], 2, "ratio picks the cheap detour first");
        assert!(check_feasibility(&sol, &inst).ok);
    }

    #[test]
    fn greedy_is_always_feasible() {
        for seed in 0..40u64 {
            let inst = random_instance(8, seed, 1.5 + (seed % 3) as f64 * 0.5);
            for m in 1..=3 {
                let sol = greedy_heuristic(&inst, m);
                let report = check_feasibility(&sol, &inst);
                assert!(report.ok, "seed {seed} m {m}: {:?}", report.violations);
            }
        }
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let inst = random_instance(11, 0, 2.0);
        assert!(matches!(
            exhaustive_optimal(&inst, 2),
            Err(BaselineError::TooLarge { n: 11, guard: 10 })
        ));
    }

    #[test]
    fn oracle_with_nothing_reachable_returns_empty_routes() {
        let inst = Instance::new(
            vec![Point::new(5.0, 5.0), Point::new(-3.0, 2.0)],
            vec![1.0, 1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            1.2,
            1.0,
        )
        .unwrap();
        let sol = exhaustive_optimal(&inst, 2).unwrap();
        assert_eq!(sol.routes, vec![vec![0, 3], vec![0, 3]]);
        assert_eq!(total_reward(&sol, &inst).unwrap(), 0.0);
    }

    #[test]
    fn oracle_collects_single_region_once() {
        let inst = Instance::new(
            vec![Point::new(0.5, 0.3)],
            vec![0.7],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            3.0,
            1.0,
        )
        .unwrap();
        let sol = exhaustive_optimal(&inst, 2).unwrap();
        assert_eq!(total_reward(&sol, &inst).unwrap(), 0.7);
        let visits: usize = sol.routes.iter().map(|r| r.iter().filter(|&&v| v == 1).count()).sum();
        assert_eq!(visits, 1);
    }

    #[test]
    fn oracle_visits_whole_line_with_one_agent() {
        let inst = line_instance(&[0.25, 0.5, 0.75], &[1.0, 1.0, 1.0], 2.0);
        let sol = exhaustive_optimal(&inst, 1).unwrap();
        assert_eq!(sol.routes, vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(total_reward(&sol, &inst).unwrap(), 3.0);
    }

    #[test]
    fn oracle_splits_opposite_arms_between_agents() {
        let inst = Instance::new(
            vec![Point::new(1.0, 0.0), Point::new(-1.0, 0.0)],
            vec![0.7, 0.9],
            Point::new(0.0, 0.0),
            Point::new(0.0, 0.0),
            2.0,
            1.0,
        )
        .unwrap();
        let one = exhaustive_optimal(&inst, 1).unwrap();
        assert_eq!(total_reward(&one, &inst).unwrap(), 0.9);
        let two = exhaustive_optimal(&inst, 2).unwrap();
        assert!((total_reward(&two, &inst).unwrap() - 1.6).abs() < 1e-15);
    }

    #[test]
    fn oracle_breaks_prize_ties_deterministically() {
        // symmetric twins: either region alone is optimal, lex picks region 1
        let inst = Instance::new(
            vec![Point::new(0.5, 0.1), Point::new(0.5, -0.1)],
            vec![1.0, 1.0],
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            1.1,
            1.0,
        )
        .unwrap();
        let sol = exhaustive_optimal(&inst, 1).unwrap();
        assert_eq!(sol.routes, vec![vec![0, 1, 3]]);
    }

    #[test]
    fn oracle_reward_is_region_label_invariant() {
        for seed in 0..10u64 {
            let inst = random_instance(5, seed + 100, 2.0);
            let base = total_reward(&exhaustive_optimal(&inst, 2).unwrap(), &inst).unwrap();
            // rotate labels: region i takes region i+1's data
            let coords: Vec<Point> = (0..5).map(|i| inst.node_coord(1 + (i + 1) % 5)).collect();
            let prizes: Vec<f64> = (0..5).map(|i| inst.node_prize(1 + (i + 1) % 5)).collect();
            let rotated = Instance::new(
                coords,
                prizes,
                inst.node_coord(0),
                inst.node_coord(inst.end_depot()),
                inst.t_max(),
                1.0,
            )
            .unwrap();
            let r = total_reward(&exhaustive_optimal(&rotated, 2).unwrap(), &rotated).unwrap();
            assert!((base - r).abs() < 1e-12, "seed {seed}: {base} vs {r}");
        }
    }

    #[test]
    fn random_rollouts_are_feasible_and_reproducible() {
        let inst = random_instance(6, 7, 2.0);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_rollout(&inst, 2, &mut rng).unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a.solution.routes, b.solution.routes);
        assert_eq!(a.reward.to_bits(), b.reward.to_bits());
        assert!(check_feasibility(&a.solution, &inst).ok);
        assert!(a.log_prob <= 0.0);
    }

    #[test]
    fn random_mean_stays_below_the_optimum() {
        let inst = random_instance(5, 9, 2.0);
        let optimal = total_reward(&exhaustive_optimal(&inst, 2).unwrap(), &inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sum = 0.0;
        for _ in 0..300 {
            sum += random_rollout(&inst, 2, &mut rng).unwrap().reward;
        }
        assert!(sum / 300.0 <= optimal + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Reward ordering: optimal >= greedy >= 0, all feasible.
        #[test]
        fn oracle_dominates_greedy(seed in 0u64..500, n in 2usize..8, m in 1usize..4) {
            let inst = random_instance(n, seed + 1000, 2.0);
            let greedy = greedy_heuristic(&inst, m);
            prop_assert!(check_feasibility(&greedy, &inst).ok);
            let optimal = exhaustive_optimal(&inst, m).unwrap();
            prop_assert!(check_feasibility(&optimal, &inst).ok);
            let rg = total_reward(&greedy, &inst).unwrap();
            let ro = total_reward(&optimal, &inst).unwrap();
            prop_assert!(rg >= 0.0);
            prop_assert!(ro >= rg - 1e-12, "optimal {} below greedy {}", ro, rg);
        }
    }
}
