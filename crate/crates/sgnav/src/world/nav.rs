//! Grid navigation: geodesic distances by uniform-cost search over the
//! 8-connected nav grid (no corner cutting) and a closed-loop expert that
//! follows the geodesic with greedy 15-degree heading alignment.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

use super::{
    step_pose, wrap_angle, Action, ActuationNoise, AgentPose, NavGrid, Scene, Vec3, GRID_RES,
    SUCCESS_RADIUS, TURN_INCREMENT,
};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Neighbor offsets in fixed relaxation order: orthogonal first, then
/// diagonal. A diagonal move is legal only when both flanking orthogonal
/// cells are free (no corner cutting).
const ORTHO: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAG: [(i64, i64); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

fn neighbors(grid: &NavGrid, r: usize, c: usize) -> Vec<((usize, usize), f64)> {
    let mut out = Vec::with_capacity(8);
    let in_bounds = |r: i64, c: i64| {
        r >= 0 && c >= 0 && (r as usize) < grid.rows && (c as usize) < grid.cols
    };
    for (dr, dc) in ORTHO {
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if in_bounds(nr, nc) && grid.is_free(nr as usize, nc as usize) {
            out.push(((nr as usize, nc as usize), GRID_RES));
        }
    }
    for (dr, dc) in DIAG {
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if in_bounds(nr, nc)
            && grid.is_free(nr as usize, nc as usize)
            && grid.is_free(r, nc as usize)
            && grid.is_free(nr as usize, c)
        {
            out.push(((nr as usize, nc as usize), GRID_RES * SQRT2));
        }
    }
    out
}

/// Dijkstra distances (meters) from a source cell to every reachable cell;
/// unreachable cells hold infinity.
fn dijkstra_field(grid: &NavGrid, source: (usize, usize)) -> Vec<f64> {
    let n = grid.rows * grid.cols;
    let mut dist = vec![f64::INFINITY; n];
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    dist[grid.idx(source.0, source.1)] = 0.0;
    heap.push(Reverse((0u64, grid.idx(source.0, source.1) as u32)));
    while let Some(Reverse((dbits, u))) = heap.pop() {
        let d = f64::from_bits(dbits);
        let (r, c) = (u as usize / grid.cols, u as usize % grid.cols);
        if d > dist[u as usize] {
            continue;
        }
        for ((nr, nc), w) in neighbors(grid, r, c) {
            let v = grid.idx(nr, nc);
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                // Non-negative finite distances order identically to their
                // bit patterns, so the heap can key on bits.
                heap.push(Reverse((nd.to_bits(), v as u32)));
            }
        }
    }
    dist
}

/// Shortest 8-connected cell path between two free cells, inclusive of the
/// endpoints; None if disconnected.
pub fn shortest_cell_path(
    grid: &NavGrid,
    from: (usize, usize),
    to: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    if !grid.is_free(from.0, from.1) || !grid.is_free(to.0, to.1) {
        return None;
    }
    if from == to {
        return Some(vec![from]);
    }
    // Walk a descending-distance chain from `from` over the field rooted at
    // `to`; greedy descent on a Dijkstra field is optimal.
    let field = dijkstra_field(grid, to);
    if !field[grid.idx(from.0, from.1)].is_finite() {
        return None;
    }
    let mut path = vec![from];
    let mut cur = from;
    while cur != to {
        let (mut best, mut best_d) = (cur, field[grid.idx(cur.0, cur.1)]);
        for ((nr, nc), w) in neighbors(grid, cur.0, cur.1) {
            let d = field[grid.idx(nr, nc)] + w;
            let cur_d = field[grid.idx(cur.0, cur.1)];
            if d <= cur_d + 1e-9 && field[grid.idx(nr, nc)] < best_d {
                best = (nr, nc);
                best_d = field[grid.idx(nr, nc)];
            }
        }
        debug_assert_ne!(best, cur, "descent must make progress");
        path.push(best);
        cur = best;
    }
    Some(path)
}

fn free_cell_of(scene: &Scene, p: Vec3, what: &str) -> Result<(usize, usize)> {
    match scene.nav_grid.cell_of(p.x, p.z) {
        Some((r, c)) if scene.nav_grid.is_free(r, c) => Ok((r, c)),
        Some(_) => Err(Error::arg(format!("{what} ({:.3}, {:.3}) is over a blocked cell", p.x, p.z))),
        None => Err(Error::arg(format!("{what} ({:.3}, {:.3}) is out of bounds", p.x, p.z))),
    }
}

/// Geodesic distance in meters between two points over free cells:
/// shortest 8-connected path between their cells, diagonal cost sqrt(2)
/// times the grid resolution; infinity when disconnected.
pub fn geodesic_distance(scene: &Scene, a: Vec3, b: Vec3) -> Result<f64> {
    let ca = free_cell_of(scene, a, "point a")?;
    let cb = free_cell_of(scene, b, "point b")?;
    if ca == cb {
        return Ok(0.0);
    }
    let field = dijkstra_field(&scene.nav_grid, ca);
    Ok(field[scene.nav_grid.idx(cb.0, cb.1)])
}

/// Geodesic distances to one fixed root point, precomputed for repeated
/// per-step lookups (reward shaping queries the same goal hundreds of
/// times per episode).
#[derive(Debug, Clone)]
pub struct DistanceField {
    field: Vec<f64>,
}

/// Build the distance field rooted at the cell under `root`.
pub fn distance_field(scene: &Scene, root: Vec3) -> Result<DistanceField> {
    let cell = free_cell_of(scene, root, "field root")?;
    Ok(DistanceField { field: dijkstra_field(&scene.nav_grid, cell) })
}

impl DistanceField {
    /// Distance in meters from the cell under `p` to the root; infinity
    /// when disconnected, error off the grid or over a blocked cell.
    pub fn distance_at(&self, scene: &Scene, p: Vec3) -> Result<f64> {
        let cell = free_cell_of(scene, p, "query point")?;
        Ok(self.field[scene.nav_grid.idx(cell.0, cell.1)])
    }
}

const EXPERT_BUDGET: usize = 1000;

/// Plan an action sequence that, replayed noiselessly through
/// [`step_pose`], ends within the success radius of `goal` and terminates
/// with Stop.
///
/// Closed-loop controller over the Dijkstra distance field rooted at the
/// goal cell: at each step, pick the neighbor cell that descends the
/// field, turn toward its center in 15-degree increments, and move once
/// roughly aligned. Replanning from the actual pose each step keeps the
/// plan valid when a forward step lands off the cell center.
pub fn expert_actions(scene: &Scene, start: AgentPose, goal: Vec3) -> Result<Vec<Action>> {
    let goal_cell = free_cell_of(scene, goal, "goal").map_err(|e| Error::Planning(e.to_string()))?;
    free_cell_of(scene, start.position, "start").map_err(|e| Error::Planning(e.to_string()))?;
    let grid = &scene.nav_grid;
    let field = dijkstra_field(grid, goal_cell);

    use rand_chacha::rand_core::SeedableRng;
    let mut pose = start;
    let mut actions = Vec::new();
    // Never consulted: replay is noiseless.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    for _ in 0..EXPERT_BUDGET {
        let here = free_cell_of(scene, pose.position, "pose")
            .map_err(|e| Error::Planning(e.to_string()))?;
        if pose.position.dist_xz(goal) < SUCCESS_RADIUS {
            actions.push(Action::Stop);
            return Ok(actions);
        }
        if !field[grid.idx(here.0, here.1)].is_finite() {
            return Err(Error::Planning(format!(
                "goal cell ({}, {}) unreachable from ({}, {})",
                goal_cell.0, goal_cell.1, here.0, here.1
            )));
        }
        // Waypoint: center of the best descending neighbor, or the goal
        // point itself once in the goal cell.
        let target = if here == goal_cell {
            (goal.x, goal.z)
        } else {
            let mut best = here;
            let mut best_total = f64::INFINITY;
            for ((nr, nc), w) in neighbors(grid, here.0, here.1) {
                let total = field[grid.idx(nr, nc)] + w;
                if total < best_total {
                    best_total = total;
                    best = (nr, nc);
                }
            }
            if best == here {
                return Err(Error::Planning("no descending neighbor".into()));
            }
            grid.cell_center(best.0, best.1)
        };
        let desired = (target.1 - pose.position.z).atan2(target.0 - pose.position.x);
        let diff = wrap_angle(desired - pose.heading);
        let action = if diff.abs() <= TURN_INCREMENT / 2.0 + 1e-9 {
            Action::MoveForward
        } else if diff > 0.0 {
            Action::TurnLeft
        } else {
            Action::TurnRight
        };
        let next = step_pose(scene, pose, action, ActuationNoise::NONE, &mut rng);
        if action == Action::MoveForward && next == pose {
            // Blocked by off-center drift near a wall: finish aligning
            // exactly before trying again.
            let action = if diff >= 0.0 { Action::TurnLeft } else { Action::TurnRight };
            pose = step_pose(scene, pose, action, ActuationNoise::NONE, &mut rng);
            actions.push(action);
            continue;
        }
        pose = next;
        actions.push(action);
    }
    Err(Error::Planning(format!(
        "no plan within {EXPERT_BUDGET} actions (start-goal geodesic {:.2} m)",
        geodesic_distance(scene, start.position, goal).unwrap_or(f64::NAN)
    )))
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{
        generate_scene, sample_free_pose, SceneGenConfig, AGENT_EYE_HEIGHT,
    };
    use super::*;

    fn scene() -> Scene {
        generate_scene(21, &SceneGenConfig::default()).unwrap()
    }

    fn point_at(scene: &Scene, r: usize, c: usize) -> Vec3 {
        let (x, z) = scene.nav_grid.cell_center(r, c);
        Vec3::new(x, AGENT_EYE_HEIGHT, z)
    }

    #[test]
    fn zero_distance_to_self() {
        let s = scene();
        let p = point_at(&s, 1, 1);
        assert_eq!(geodesic_distance(&s, p, p).unwrap(), 0.0);
    }

    #[test]
    fn straight_corridor_distance() {
        let s = scene();
        // Four cells along one row inside a room: 4 x 0.25 = 1 m.
        let g = &s.nav_grid;
        let (r, c) = g
            .free_cells()
            .into_iter()
            .find(|&(r, c)| (0..=4).all(|d| c + d < g.cols && g.is_free(r, c + d)))
            .expect("row of five free cells");
        let d = geodesic_distance(&s, point_at(&s, r, c), point_at(&s, r, c + 4)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blocked_point_is_an_argument_error() {
        let s = scene();
        let g = &s.nav_grid;
        let blocked = (0..g.rows)
            .flat_map(|r| (0..g.cols).map(move |c| (r, c)))
            .find(|&(r, c)| g.is_blocked(r, c))
            .unwrap();
        let p = point_at(&s, blocked.0, blocked.1);
        let q = point_at(&s, 1, 1);
        assert!(geodesic_distance(&s, p, q).is_err());
        assert!(geodesic_distance(&s, q, p).is_err());
        let outside = Vec3::new(-10.0, AGENT_EYE_HEIGHT, -10.0);
        assert!(geodesic_distance(&s, outside, q).is_err());
    }

    /// Independent oracle: edge-list Bellman-Ford relaxation to fixpoint,
    /// sharing no code with the heap-based search.
    fn bellman_ford(grid: &NavGrid, source: (usize, usize)) -> Vec<f64> {
        let mut edges = Vec::new();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if grid.is_blocked(r, c) {
                    continue;
                }
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0
                        && nc >= 0
                        && (nr as usize) < grid.rows
                        && (nc as usize) < grid.cols
                        && grid.is_free(nr as usize, nc as usize)
                    {
                        edges.push((grid.idx(r, c), grid.idx(nr as usize, nc as usize), 0.25));
                    }
                }
                for (dr, dc) in [(-1i64, -1i64), (-1, 1), (1, -1), (1, 1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0
                        && nc >= 0
                        && (nr as usize) < grid.rows
                        && (nc as usize) < grid.cols
                        && grid.is_free(nr as usize, nc as usize)
                        && grid.is_free(r, nc as usize)
                        && grid.is_free(nr as usize, c)
                    {
                        edges.push((
                            grid.idx(r, c),
                            grid.idx(nr as usize, nc as usize),
                            0.25 * std::f64::consts::SQRT_2,
                        ));
                    }
                }
            }
        }
        let mut dist = vec![f64::INFINITY; grid.rows * grid.cols];
        dist[grid.idx(source.0, source.1)] = 0.0;
        loop {
            let mut changed = false;
            for &(u, v, w) in &edges {
                if dist[u] + w < dist[v] - 1e-15 {
                    dist[v] = dist[u] + w;
                    changed = true;
                }
            }
            if !changed {
                return dist;
            }
        }
    }

    #[test]
    fn geodesic_matches_independent_relaxation_oracle() {
        for seed in [2, 9] {
            let s = generate_scene(seed, &SceneGenConfig { rooms: 2, ..Default::default() })
                .unwrap();
            let free = s.nav_grid.free_cells();
            let oracle = bellman_ford(&s.nav_grid, free[0]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..30 {
                let b = free[rng.random_range(0..free.len())];
                let got =
                    geodesic_distance(&s, point_at(&s, free[0].0, free[0].1), point_at(&s, b.0, b.1))
                        .unwrap();
                let want = oracle[s.nav_grid.idx(b.0, b.1)];
                assert!(
                    (got - want).abs() < 1e-9,
                    "seed {seed} cell {b:?}: {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn distance_field_matches_pointwise_geodesic() {
        let s = scene();
        let free = s.nav_grid.free_cells();
        let mid = free[free.len() / 2];
        let goal = point_at(&s, mid.0, mid.1);
        let field = distance_field(&s, goal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = free[rng.random_range(0..free.len())];
            let p = point_at(&s, c.0, c.1);
            let a = field.distance_at(&s, p).unwrap();
            let b = geodesic_distance(&s, p, goal).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let outside = Vec3::new(-50.0, AGENT_EYE_HEIGHT, -50.0);
        assert!(field.distance_at(&s, outside).is_err());
    }

    #[test]
    fn cell_path_endpoints_and_cost() {
        let s = scene();
        let free = s.nav_grid.free_cells();
        let (a, b) = (free[0], free[free.len() - 1]);
        let path = shortest_cell_path(&s.nav_grid, a, b).expect("connected");
        assert_eq!(*path.first().unwrap(), a);
        assert_eq!(*path.last().unwrap(), b);
        // Path cost equals the geodesic.
        let mut cost = 0.0;
        for w in path.windows(2) {
            let dr = w[0].0.abs_diff(w[1].0);
            let dc = w[0].1.abs_diff(w[1].1);
            assert!(dr <= 1 && dc <= 1 && (dr, dc) != (0, 0), "non-adjacent hop");
            cost += if dr + dc == 2 { 0.25 * SQRT2 } else { 0.25 };
        }
        let d = geodesic_distance(&s, point_at(&s, a.0, a.1), point_at(&s, b.0, b.1)).unwrap();
        assert!((cost - d).abs() < 1e-9);
    }

    #[test]
    fn expert_stop_at_goal() {
        let s = scene();
        let p = point_at(&s, 1, 1);
        let pose = AgentPose::new(p, 0.0);
        assert_eq!(expert_actions(&s, pose, p).unwrap(), vec![Action::Stop]);
    }

    #[test]
    fn expert_two_steps_ahead() {
        let s = scene();
        let g = &s.nav_grid;
        let (r, c) = g
            .free_cells()
            .into_iter()
            .find(|&(r, c)| (0..=2).all(|d| c + d < g.cols && g.is_free(r, c + d)))
            .unwrap();
        let pose = AgentPose::new(point_at(&s, r, c), 0.0);
        let goal = point_at(&s, r, c + 2);
        assert_eq!(
            expert_actions(&s, pose, goal).unwrap(),
            vec![Action::MoveForward, Action::MoveForward, Action::Stop]
        );
    }

    #[test]
    fn expert_rollouts_reach_goal() {
        // 50 random episodes across seeds: replay must end inside the
        // success radius, with Stop last.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut episodes = 0;
        for seed in 0..10u64 {
            let s = generate_scene(seed, &SceneGenConfig::default()).unwrap();
            for _ in 0..5 {
                let start = sample_free_pose(&s, &mut rng).unwrap();
                let goal = sample_free_pose(&s, &mut rng).unwrap().position;
                let plan = expert_actions(&s, start, goal).unwrap();
                assert_eq!(*plan.last().unwrap(), Action::Stop);
                let mut pose = start;
                let mut step_rng = ChaCha8Rng::seed_from_u64(0);
                for &a in &plan {
                    pose = step_pose(&s, pose, a, ActuationNoise::NONE, &mut step_rng);
                }
                assert!(
                    pose.position.dist_xz(goal) < SUCCESS_RADIUS,
                    "seed {seed}: ended {:.3} m from goal",
                    pose.position.dist_xz(goal)
                );
                episodes += 1;
            }
        }
        assert_eq!(episodes, 50);
    }

    #[test]
    fn expert_plan_length_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_scene(1, &SceneGenConfig::default()).unwrap();
        for _ in 0..20 {
            let start = sample_free_pose(&s, &mut rng).unwrap();
            let goal = sample_free_pose(&s, &mut rng).unwrap().position;
            if geodesic_distance(&s, start.position, goal).unwrap() <= 10.0 {
                assert!(expert_actions(&s, start, goal).unwrap().len() <= 500);
            }
        }
    }

    #[test]
    fn disconnected_goal_is_planning_error() {
        // Two rooms with the door manually sealed.
        let mut s = generate_scene(4, &SceneGenConfig { rooms: 2, objects_per_room: 0, ..Default::default() })
            .unwrap();
        let door = s
            .objects
            .iter()
            .find(|o| o.class == super::super::ObjectClass::Door)
            .expect("two rooms share a door")
            .aabb();
        let center = door.center();
        let (r, c) = s.nav_grid.cell_of(center.x, center.z).unwrap();
        s.nav_grid.set_blocked(r, c, true);
        let a = point_at(&s, 1, 1);
        let b = {
            // A free cell on the far side of the wall from (1, 1).
            let g = &s.nav_grid;
            let far = g
                .free_cells()
                .into_iter()
                .max_by_key(|&(fr, fc)| fr + fc)
                .unwrap();
            point_at(&s, far.0, far.1)
        };
        assert!(geodesic_distance(&s, a, b).unwrap().is_infinite());
        let pose = AgentPose::new(a, 0.0);
        assert!(matches!(expert_actions(&s, pose, b), Err(Error::Planning(_))));
    }
}
