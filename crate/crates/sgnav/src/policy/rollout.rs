//! Episode rollouts, navigation agents, and the evaluation metrics:
//! success rate, path-length-weighted success, normalized dynamic time
//! warping against the planner's reference path, and final goal distance.
//!
//! Reward bookkeeping uses error-free float expansions so the telescoping
//! identities (progress terms summing to start-minus-final distance,
//! coverage deltas summing to final coverage) hold exactly, not just to a
//! tolerance.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::build_input_graph;
use crate::gtruth::{visible_subgraph, CoverageState, SceneGraphGT};
use crate::tensor::{log_sum_exp, Tensor2};
use crate::world::{
    distance_field, expert_actions, geodesic_distance, observe, sample_free_pose, step_pose,
    Action, ActuationNoise, AgentPose, ObsConfig, Observation, Scene, Vec3, ACTION_COUNT,
    MAX_EPISODE_STEPS,
};

use super::{compute_reward, goal_bins, pooled_features, NavModel, RewardConfig};

/// Error-free transform: returns (s, e) with s = fl(a + b) and
/// s + e == a + b exactly.
pub(crate) fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let av = s - bv;
    (s, (a - av) + (b - bv))
}

/// Exact running sum kept as a nonoverlapping float expansion. The parts
/// carry the real-number total with no rounding at all, which lets tests
/// assert telescoping identities exactly.
#[derive(Debug, Clone, Default)]
pub(crate) struct ExactSum {
    parts: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> ExactSum {
        ExactSum { parts: Vec::new() }
    }

    /// Add one term exactly (grow-expansion: thread the term through the
    /// existing parts with error-free transforms, dropping zeros).
    pub fn add(&mut self, b: f64) {
        let mut q = b;
        let mut out = Vec::with_capacity(self.parts.len() + 1);
        for &p in &self.parts {
            let (s, e) = two_sum(q, p);
            if e != 0.0 {
                out.push(e);
            }
            q = s;
        }
        out.push(q);
        self.parts = out;
    }

    /// Add the difference a - b without rounding it first.
    pub fn add_diff(&mut self, a: f64, b: f64) {
        let (s, e) = two_sum(a, -b);
        self.add(e);
        self.add(s);
    }

    /// Nearest-float view of the total, for diagnostics.
    pub fn approx(&self) -> f64 {
        self.parts.iter().sum()
    }

    /// True iff the exact real total equals a - b exactly. A nonoverlapping
    /// expansion sums to zero only when every part is zero, so feeding the
    /// negated difference and checking for all-zero parts decides equality
    /// with no rounding anywhere.
    pub fn cancels_against_diff(mut self, a: f64, b: f64) -> bool {
        let (s, e) = two_sum(a, -b);
        self.add(-s);
        self.add(-e);
        self.parts.iter().all(|&p| p == 0.0)
    }

    /// True iff the exact real total equals v exactly.
    pub fn is_exactly(self, v: f64) -> bool {
        self.cancels_against_diff(v, 0.0)
    }
}

/// Index of the largest element; ties resolve to the lowest index, so a
/// constant shift of all logits can never change the chosen action.
pub(crate) fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Dynamic-time-warping cost between two position sequences under the
/// horizontal (xz) Euclidean metric: full window, unit-slope steps.
pub(crate) fn dtw_xz(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "time warping needs nonempty paths");
    let mut prev = vec![f64::INFINITY; b.len() + 1];
    let mut cur = vec![f64::INFINITY; b.len() + 1];
    prev[0] = 0.0;
    for ai in a {
        cur[0] = f64::INFINITY;
        for (j, bj) in b.iter().enumerate() {
            let best = prev[j + 1].min(cur[j]).min(prev[j]);
            cur[j + 1] = ai.dist_xz(*bj) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized time-warp similarity in (0, 1]: exp(-DTW / (|ref| * radius)).
/// 1.0 means the agent's path warps onto the reference at zero cost.
pub fn ndtw(path: &[Vec3], reference: &[Vec3], radius: f64) -> f64 {
    assert!(radius > 0.0, "ndtw radius must be positive");
    (-dtw_xz(path, reference) / (reference.len() as f64 * radius)).exp()
}

/// Start pose and goal position for one navigation episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub start: AgentPose,
    pub goal: Vec3,
}

/// What one agent decision looked like.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentChoice {
    pub action: Action,
    pub value: f64,
    pub log_prob: f64,
}

impl AgentChoice {
    /// A scripted (non-learned) decision with neutral value and log-prob.
    pub fn scripted(action: Action) -> AgentChoice {
        AgentChoice { action, value: 0.0, log_prob: 0.0 }
    }
}

/// Anything that can drive an episode: scripted baselines or the model.
pub trait NavAgent {
    /// Called once per episode before the first observation.
    fn reset(&mut self, scene: &Scene, start: AgentPose, goal: Vec3) -> Result<()>;
    /// Choose the next action from the current observation and pose.
    fn act(&mut self, obs: &Observation, pose: AgentPose, goal: Vec3) -> Result<AgentChoice>;
}

/// Replays the planner's action sequence; the evaluation oracle.
#[derive(Debug, Default)]
pub struct ExpertReplayAgent {
    plan: VecDeque<Action>,
}

impl ExpertReplayAgent {
    pub fn new() -> ExpertReplayAgent {
        ExpertReplayAgent::default()
    }
}

impl NavAgent for ExpertReplayAgent {
    fn reset(&mut self, scene: &Scene, start: AgentPose, goal: Vec3) -> Result<()> {
        self.plan = expert_actions(scene, start, goal)?.into();
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _pose: AgentPose, _goal: Vec3) -> Result<AgentChoice> {
        Ok(AgentChoice::scripted(self.plan.pop_front().unwrap_or(Action::Stop)))
    }
}

/// Uniform random actions; the floor any trained policy must beat.
#[derive(Debug)]
pub struct RandomAgent {
    seed: u64,
    episode: u64,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(seed: u64) -> RandomAgent {
        RandomAgent { seed, episode: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl NavAgent for RandomAgent {
    fn reset(&mut self, _scene: &Scene, _start: AgentPose, _goal: Vec3) -> Result<()> {
        // Re-derive the stream per episode so evaluation order can't bleed
        // randomness between episodes.
        self.rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ self.episode.wrapping_mul(0x9e3779b97f4a7c15));
        self.episode += 1;
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _pose: AgentPose, _goal: Vec3) -> Result<AgentChoice> {
        let idx = self.rng.random_range(0..ACTION_COUNT);
        Ok(AgentChoice::scripted(Action::from_index(idx).expect("action index in range")))
    }
}

/// Always moves forward and never stops; pins the success rate at zero.
#[derive(Debug, Default)]
pub struct NeverStopAgent;

impl NavAgent for NeverStopAgent {
    fn reset(&mut self, _scene: &Scene, _start: AgentPose, _goal: Vec3) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _pose: AgentPose, _goal: Vec3) -> Result<AgentChoice> {
        Ok(AgentChoice::scripted(Action::MoveForward))
    }
}

/// Drives the trained model: graph network on each observation, pooled
/// embedding into the recurrent policy, argmax (greedy) or softmax
/// (sampling) action selection.
pub struct PolicyAgent<'a> {
    model: &'a NavModel,
    hidden: Tensor2,
    prev: Option<Action>,
    sampler: Option<ChaCha8Rng>,
}

impl<'a> PolicyAgent<'a> {
    /// Deterministic evaluation mode: always the argmax action.
    pub fn greedy(model: &'a NavModel) -> PolicyAgent<'a> {
        PolicyAgent { model, hidden: model.policy.initial_hidden(), prev: None, sampler: None }
    }

    /// Exploration mode: sample from the action distribution.
    pub fn sampling(model: &'a NavModel, seed: u64) -> PolicyAgent<'a> {
        PolicyAgent {
            model,
            hidden: model.policy.initial_hidden(),
            prev: None,
            sampler: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl NavAgent for PolicyAgent<'_> {
    fn reset(&mut self, _scene: &Scene, _start: AgentPose, _goal: Vec3) -> Result<()> {
        self.hidden = self.model.policy.initial_hidden();
        self.prev = None;
        Ok(())
    }

    fn act(&mut self, obs: &Observation, pose: AgentPose, goal: Vec3) -> Result<AgentChoice> {
        let pooled = if obs.rois.is_empty() {
            None
        } else {
            let g = build_input_graph(obs, &self.model.sgtn.hyper.sigmas)?;
            let (out, _) = self.model.sgtn.forward(&g);
            Some(pooled_features(&out.z))
        };
        let hyper = &self.model.policy.hyper;
        let bins = goal_bins(&pose, goal, hyper.distance_bins, hyper.angle_bins);
        let (logits, value, hidden) =
            self.model.policy.policy_step(pooled.as_ref(), self.prev, bins, &self.hidden);
        self.hidden = hidden;
        let row = logits.row(0);
        let lse = log_sum_exp(row);
        let idx = match &mut self.sampler {
            None => argmax_index(row),
            Some(rng) => {
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                let mut chosen = row.len() - 1;
                for (i, &l) in row.iter().enumerate() {
                    acc += (l - lse).exp();
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        let action = Action::from_index(idx).expect("action index in range");
        self.prev = Some(action);
        Ok(AgentChoice { action, value, log_prob: row[idx] - lse })
    }
}

/// One recorded step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// How many objects the step's observation contained.
    pub obs_rois: usize,
    pub action: Action,
    pub reward: f64,
    /// Critic estimate at decision time (0 for scripted agents).
    pub value: f64,
    /// Log-probability of the chosen action (0 for scripted agents).
    pub log_prob: f64,
    /// Cumulative scene-graph coverage after this step's observation.
    pub coverage: f64,
    /// Geodesic distance to the goal before acting.
    pub dist_to_goal: f64,
}

/// End-of-episode summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    /// Meters actually traveled (xz).
    pub path_length: f64,
    /// Geodesic shortest distance from start to goal.
    pub geodesic_shortest: f64,
    /// Time-warp similarity to the planner's reference path.
    pub ndtw: f64,
    /// Final geodesic distance to the goal (navigation error).
    pub ne: f64,
}

/// Full trajectory record for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene_id: u64,
    pub start: AgentPose,
    pub goal: Vec3,
    pub steps: Vec<EpisodeStep>,
    pub outcome: EpisodeOutcome,
}

fn path_length_xz(path: &[Vec3]) -> f64 {
    path.windows(2).map(|w| w[0].dist_xz(w[1])).sum()
}

/// Positions visited when replaying a plan open-loop from `start`
/// (noiseless), including the start itself; Stop ends the replay.
fn replay_positions(scene: &Scene, start: AgentPose, plan: &[Action]) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pose = start;
    let mut out = vec![start.position];
    for &a in plan {
        if a == Action::Stop {
            break;
        }
        pose = step_pose(scene, pose, a, ActuationNoise::NONE, &mut rng);
        out.push(pose.position);
    }
    out
}

/// Per-episode path-efficiency score: S * l / max(p, l), or S when both
/// lengths are zero (spawned on the goal and stopped immediately).
pub(crate) fn episode_spl(outcome: &EpisodeOutcome) -> f64 {
    let s = if outcome.success { 1.0 } else { 0.0 };
    let denom = outcome.path_length.max(outcome.geodesic_shortest);
    if denom > 0.0 {
        s * outcome.geodesic_shortest / denom
    } else {
        s
    }
}

/// Run one episode to Stop or the step budget.
///
/// Per step: observe, fold the observation into coverage, let the agent
/// act, apply the action (noiseless actuation), and score the shaped
/// reward from the geodesic progress and the coverage gain. The recorded
/// `dist_to_goal` sequence starts at the spawn distance and ends one short
/// of the outcome's `ne`, so consecutive differences reproduce every
/// progress term exactly.
pub fn run_episode(
    scene: &Scene,
    full_gt: &SceneGraphGT,
    spec: &EpisodeSpec,
    agent: &mut dyn NavAgent,
    obs_cfg: &ObsConfig,
    reward_cfg: &RewardConfig,
    obs_rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    reward_cfg.validate()?;
    let field = distance_field(scene, spec.goal)?;
    let geodesic_shortest = field.distance_at(scene, spec.start.position)?;
    if !geodesic_shortest.is_finite() {
        return Err(Error::Planning("goal is unreachable from the start pose".into()));
    }
    let reference = replay_positions(scene, spec.start, &expert_actions(scene, spec.start, spec.goal)?);

    agent.reset(scene, spec.start, spec.goal)?;
    let mut pose = spec.start;
    let mut dist = geodesic_shortest;
    let mut coverage = CoverageState::new(full_gt);
    let mut cov_value = 0.0;
    let mut path = vec![pose.position];
    let mut steps = Vec::new();
    let mut success = false;
    let mut act_rng = ChaCha8Rng::seed_from_u64(0); // actuation is noiseless
    for _ in 0..MAX_EPISODE_STEPS {
        let obs = observe(scene, pose, obs_cfg, obs_rng);
        let ids: Vec<u32> = obs.rois.iter().map(|r| r.object_id).collect();
        let seen = visible_subgraph(full_gt, &ids)?;
        coverage.update(&seen);
        let new_cov = coverage.coverage();
        let cov_delta = new_cov - cov_value;
        cov_value = new_cov;

        let choice = agent.act(&obs, pose, spec.goal)?;
        let prev_dist = dist;
        let stopping = choice.action == Action::Stop;
        if stopping {
            success = pose.position.dist_xz(spec.goal) < reward_cfg.success_radius;
        } else {
            pose = step_pose(scene, pose, choice.action, ActuationNoise::NONE, &mut act_rng);
            dist = field.distance_at(scene, pose.position)?;
            path.push(pose.position);
        }
        steps.push(EpisodeStep {
            obs_rois: obs.rois.len(),
            action: choice.action,
            reward: compute_reward(prev_dist, dist, cov_delta, success, reward_cfg),
            value: choice.value,
            log_prob: choice.log_prob,
            coverage: new_cov,
            dist_to_goal: prev_dist,
        });
        if stopping {
            break;
        }
    }
    let outcome = EpisodeOutcome {
        success,
        path_length: path_length_xz(&path),
        geodesic_shortest,
        ndtw: ndtw(&path, &reference, reward_cfg.success_radius),
        ne: dist,
    };
    Ok(Episode { scene_id: scene.seed, start: spec.start, goal: spec.goal, steps, outcome })
}

/// One scene's evaluation block: the scene, its full ground-truth graph,
/// and the episode specs to run on it.
pub struct EvalSet<'a> {
    pub scene: &'a Scene,
    pub gt: &'a SceneGraphGT,
    pub specs: Vec<EpisodeSpec>,
}

/// Aggregate navigation metrics over an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of episodes that stopped inside the success radius.
    pub sr: f64,
    /// Success weighted by inverse normalized path length.
    pub spl: f64,
    /// Mean time-warp similarity to the reference paths.
    pub ndtw: f64,
    /// Mean final geodesic distance to the goal, meters.
    pub ne: f64,
    pub episodes: usize,
}

impl EvalMetrics {
    pub fn csv_header() -> &'static str {
        "sr,spl,ndtw,ne,episodes,seed"
    }

    pub fn csv_row(&self, seed: u64) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{},{}",
            self.sr, self.spl, self.ndtw, self.ne, self.episodes, seed
        )
    }
}

/// Run every spec in every set with the given agent and aggregate the
/// metrics. Observation noise (if any) is drawn from a stream seeded by
/// the scene and episode index, so identical inputs replay bit-identically.
pub fn evaluate(
    sets: &[EvalSet],
    agent: &mut dyn NavAgent,
    obs_cfg: &ObsConfig,
    reward_cfg: &RewardConfig,
) -> Result<(EvalMetrics, Vec<Episode>)> {
    let mut episodes: Vec<Episode> = Vec::new();
    for set in sets {
        for spec in &set.specs {
            let mut obs_rng =
                ChaCha8Rng::seed_from_u64(set.scene.seed ^ (episodes.len() as u64) << 17);
            episodes.push(run_episode(
                set.scene, set.gt, spec, agent, obs_cfg, reward_cfg, &mut obs_rng,
            )?);
        }
    }
    if episodes.is_empty() {
        return Err(Error::arg("evaluation needs at least one episode"));
    }
    let n = episodes.len() as f64;
    let (mut sr, mut spl, mut nd, mut ne) = (0.0, 0.0, 0.0, 0.0);
    for e in &episodes {
        sr += if e.outcome.success { 1.0 } else { 0.0 };
        spl += episode_spl(&e.outcome);
        nd += e.outcome.ndtw;
        ne += e.outcome.ne;
    }
    let metrics =
        EvalMetrics { sr: sr / n, spl: spl / n, ndtw: nd / n, ne: ne / n, episodes: episodes.len() };
    Ok((metrics, episodes))
}

/// Draw a start pose and a goal (a free-cell center at eye height) whose
/// geodesic separation is at least `min_geodesic` meters.
pub fn sample_episode_spec(
    scene: &Scene,
    min_geodesic: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeSpec> {
    for _ in 0..100 {
        let start = sample_free_pose(scene, rng)?;
        let goal = sample_free_pose(scene, rng)?.position;
        let d = geodesic_distance(scene, start.position, goal)?;
        if d.is_finite() && d >= min_geodesic {
            return Ok(EpisodeSpec { start, goal });
        }
    }
    Err(Error::Planning(format!(
        "no start/goal pair at least {min_geodesic} m apart after 100 draws"
    )))
}

/// Write episodes as one JSON object per line.
pub fn write_episode_log(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read an episode log written by [`write_episode_log`].
pub fn read_episode_log(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode = serde_json::from_str(line).map_err(|err| {
            Error::Parse(format!("episode log line {}: {err}", lineno + 1))
        })?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use crate::gtruth::extract_gt;
    use crate::world::{
        generate_scene, wrap_angle, SceneGenConfig, AGENT_EYE_HEIGHT, GRID_RES, SUCCESS_RADIUS,
    };

    use super::super::PolicyHyper;
    use super::*;

    fn test_scene(seed: u64) -> Scene {
        generate_scene(seed, &SceneGenConfig::default()).unwrap()
    }

    #[test]
    fn two_sum_recovers_the_dropped_bits() {
        let (s, e) = two_sum(1e16, 1.0);
        assert_eq!(s, 1e16);
        assert_eq!(e, 1.0);
    }

    #[test]
    fn exact_sum_survives_catastrophic_cancellation() {
        let mut es = ExactSum::new();
        for v in [1e16, 1.0, -1e16] {
            es.add(v);
        }
        assert!(es.clone().is_exactly(1.0));
        assert_eq!(es.approx(), 1.0);
        let naive: f64 = [1e16f64, 1.0, -1e16].iter().sum();
        assert_eq!(naive, 0.0, "the naive sum really does lose the 1.0");
    }

    #[test]
    fn exact_sum_discriminates_true_reals_from_rounded_floats() {
        // 0.1 + 0.2 as reals is no f64 at all, so no candidate matches --
        // not even the rounded float sum.
        let mut es = ExactSum::new();
        es.add(0.1);
        es.add(0.2);
        assert!(!es.clone().is_exactly(0.1 + 0.2));
        assert!(!es.clone().is_exactly(0.3));
        es.add(-0.2);
        assert!(es.is_exactly(0.1));
    }

    #[test]
    fn add_diff_telescopes_any_float_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let chain: Vec<f64> = (0..50).map(|_| rng.random_range(-1e6..1e6)).collect();
        let mut es = ExactSum::new();
        for w in chain.windows(2) {
            es.add_diff(w[0], w[1]);
        }
        assert!(es.cancels_against_diff(chain[0], *chain.last().unwrap()));
    }

    #[test]
    fn argmax_prefers_the_lowest_tied_index() {
        assert_eq!(argmax_index(&[0.0, 3.0, 3.0, 1.0]), 1);
        assert_eq!(argmax_index(&[5.0]), 0);
        assert_eq!(argmax_index(&[-2.0, -1.0, -3.0, -1.0]), 1);
    }

    /// Plain recursive DTW with memoization; the oracle for the iterative
    /// rolling-array version.
    fn dtw_oracle(a: &[Vec3], b: &[Vec3]) -> f64 {
        fn rec(
            a: &[Vec3],
            b: &[Vec3],
            i: usize,
            j: usize,
            memo: &mut HashMap<(usize, usize), f64>,
        ) -> f64 {
            if i == 0 && j == 0 {
                return a[0].dist_xz(b[0]);
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let mut best = f64::INFINITY;
            if i > 0 {
                best = best.min(rec(a, b, i - 1, j, memo));
            }
            if j > 0 {
                best = best.min(rec(a, b, i, j - 1, memo));
            }
            if i > 0 && j > 0 {
                best = best.min(rec(a, b, i - 1, j - 1, memo));
            }
            let v = a[i].dist_xz(b[j]) + best;
            memo.insert((i, j), v);
            v
        }
        rec(a, b, a.len() - 1, b.len() - 1, &mut HashMap::new())
    }

    #[test]
    fn dtw_matches_the_recursive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let la = rng.random_range(1..8);
            let lb = rng.random_range(1..8);
            let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec3> {
                (0..n)
                    .map(|_| {
                        Vec3::new(rng.random_range(-2.0..2.0), 0.0, rng.random_range(-2.0..2.0))
                    })
                    .collect()
            };
            let a = mk(&mut rng, la);
            let b = mk(&mut rng, lb);
            let fast = dtw_xz(&a, &b);
            let slow = dtw_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-12, "dtw {fast} vs oracle {slow}");
        }
    }

    #[test]
    fn ndtw_is_exactly_one_for_identical_paths() {
        let path: Vec<Vec3> =
            (0..15).map(|i| Vec3::new(i as f64 * 0.25, 0.0, 0.0)).collect();
        assert_eq!(dtw_xz(&path, &path), 0.0);
        assert_eq!(ndtw(&path, &path, SUCCESS_RADIUS), 1.0);
    }

    #[test]
    fn ndtw_penalizes_a_parallel_offset_path() {
        // Same shape, offset sideways by twice the radius: every matched
        // pair costs 2r, so the score is exactly exp(-2) < exp(-1).
        let reference: Vec<Vec3> =
            (0..10).map(|i| Vec3::new(i as f64 * 0.25, 0.0, 0.0)).collect();
        let offset: Vec<Vec3> = reference
            .iter()
            .map(|p| Vec3::new(p.x, 0.0, p.z + 2.0 * SUCCESS_RADIUS))
            .collect();
        let score = ndtw(&offset, &reference, SUCCESS_RADIUS);
        assert!((score - (-2.0f64).exp()).abs() < 1e-12);
        assert!(score < (-1.0f64).exp());
    }

    /// Find a straight run of `len` free cells in some row, returning the
    /// episode along it (heading +x, goal at the far cell center).
    fn corridor_spec(scene: &Scene) -> Option<(EpisodeSpec, usize)> {
        let grid = &scene.nav_grid;
        for len in (5..=9).rev() {
            for r in 0..grid.rows {
                let mut run = 0;
                for c in 0..grid.cols {
                    if grid.is_free(r, c) {
                        run += 1;
                        if run >= len {
                            let (ax, az) = grid.cell_center(r, c + 1 - len);
                            let (bx, bz) = grid.cell_center(r, c);
                            let start =
                                AgentPose::new(Vec3::new(ax, AGENT_EYE_HEIGHT, az), 0.0);
                            let goal = Vec3::new(bx, AGENT_EYE_HEIGHT, bz);
                            // Only corridors that the planner serves with a
                            // straight shot qualify as exactness fixtures.
                            if let Ok(d) = geodesic_distance(scene, start.position, goal) {
                                if (d - (len - 1) as f64 * GRID_RES).abs() < 1e-12 {
                                    return Some((EpisodeSpec { start, goal }, len));
                                }
                            }
                        }
                    } else {
                        run = 0;
                    }
                }
            }
        }
        None
    }

    #[test]
    fn expert_replay_is_perfect_on_a_straight_corridor() {
        let scene = test_scene(21);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let (spec, _) = corridor_spec(&scene).expect("scene has a straight corridor");
        let mut agent = ExpertReplayAgent::new();
        let sets =
            [EvalSet { scene: &scene, gt: &gt, specs: vec![spec] }];
        let (metrics, episodes) =
            evaluate(&sets, &mut agent, &ObsConfig::default(), &RewardConfig::default()).unwrap();
        assert_eq!(metrics.sr, 1.0);
        assert_eq!(metrics.spl, 1.0, "straight-line replay must be maximally efficient");
        assert_eq!(metrics.ndtw, 1.0);
        assert_eq!(metrics.ne, 0.0, "the planner stops on the goal cell center");
        assert_eq!(metrics.episodes, 1);
        let ep = &episodes[0];
        assert_eq!(ep.steps.last().unwrap().action, Action::Stop);
        assert!(ep.outcome.success);
    }

    #[test]
    fn expert_replay_succeeds_on_sampled_episodes() {
        let scene = test_scene(22);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs: Vec<EpisodeSpec> =
            (0..4).map(|_| sample_episode_spec(&scene, 1.0, &mut rng).unwrap()).collect();
        let mut agent = ExpertReplayAgent::new();
        let sets = [EvalSet { scene: &scene, gt: &gt, specs }];
        let (metrics, episodes) =
            evaluate(&sets, &mut agent, &ObsConfig::default(), &RewardConfig::default()).unwrap();
        assert_eq!(metrics.sr, 1.0);
        assert!(metrics.ne < SUCCESS_RADIUS, "ne = {}", metrics.ne);
        assert!(metrics.spl > 0.9, "spl = {}", metrics.spl);
        assert!(metrics.ndtw > 0.99, "expert replays its own reference, ndtw = {}", metrics.ndtw);
        for e in &episodes {
            assert!(e.outcome.success);
            assert!(e.steps.len() <= MAX_EPISODE_STEPS);
        }
    }

    #[test]
    fn never_stop_agent_scores_zero_success() {
        let scene = test_scene(23);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = sample_episode_spec(&scene, 1.0, &mut rng).unwrap();
        let mut agent = NeverStopAgent;
        let sets = [EvalSet { scene: &scene, gt: &gt, specs: vec![spec] }];
        let (metrics, episodes) =
            evaluate(&sets, &mut agent, &ObsConfig::default(), &RewardConfig::default()).unwrap();
        assert_eq!(metrics.sr, 0.0);
        assert_eq!(metrics.spl, 0.0);
        assert_eq!(episodes[0].steps.len(), MAX_EPISODE_STEPS);
        assert!(!episodes[0].outcome.success);
    }

    #[test]
    fn progress_and_coverage_ledgers_are_exact() {
        let scene = test_scene(24);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = sample_episode_spec(&scene, 1.5, &mut rng).unwrap();
        let mut agent = ExpertReplayAgent::new();
        let mut obs_rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = RewardConfig::default();
        let ep = run_episode(
            &scene,
            &gt,
            &spec,
            &mut agent,
            &ObsConfig::default(),
            &cfg,
            &mut obs_rng,
        )
        .unwrap();

        // Progress terms telescope to start-minus-final distance, exactly.
        let dists: Vec<f64> = ep
            .steps
            .iter()
            .map(|s| s.dist_to_goal)
            .chain([ep.outcome.ne])
            .collect();
        let mut progress = ExactSum::new();
        for w in dists.windows(2) {
            progress.add_diff(w[0], w[1]);
        }
        assert!(
            progress.cancels_against_diff(dists[0], ep.outcome.ne),
            "progress terms must telescope exactly"
        );
        assert_eq!(dists[0], ep.outcome.geodesic_shortest);

        // Coverage deltas telescope to the final coverage, exactly, and
        // the sequence never decreases.
        let mut cov = ExactSum::new();
        let mut prev = 0.0;
        for s in &ep.steps {
            assert!(s.coverage >= prev, "coverage must be monotone");
            cov.add_diff(s.coverage, prev);
            prev = s.coverage;
        }
        let last = ep.steps.last().unwrap().coverage;
        assert!((0.0..=1.0).contains(&last));
        assert!(cov.is_exactly(last), "coverage deltas must telescope exactly");

        // Each recorded reward decomposes into exactly the shaped formula.
        let mut prev_cov = 0.0;
        for (t, s) in ep.steps.iter().enumerate() {
            let next_d = dists[t + 1];
            let success = s.action == Action::Stop && ep.outcome.success;
            let want =
                compute_reward(s.dist_to_goal, next_d, s.coverage - prev_cov, success, &cfg);
            assert_eq!(s.reward, want, "step {t} reward mismatch");
            prev_cov = s.coverage;
        }
    }

    #[test]
    fn evaluation_replays_bit_identically() {
        let scene = test_scene(25);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let specs: Vec<EpisodeSpec> =
            (0..2).map(|_| sample_episode_spec(&scene, 1.0, &mut rng).unwrap()).collect();
        let mut rng_model = ChaCha8Rng::seed_from_u64(5);
        let model = NavModel::new(
            crate::graphnet::SgtnHyper { channels: 2, d: 4, d_v: 32, ..Default::default() },
            PolicyHyper { feat_dim: 8, hidden: 12, embed: 4, ..Default::default() },
            &mut rng_model,
        )
        .unwrap();
        let run = |m: &NavModel| -> String {
            let mut agent = PolicyAgent::greedy(m);
            let sets = [EvalSet { scene: &scene, gt: &gt, specs: specs.clone() }];
            let (metrics, episodes) =
                evaluate(&sets, &mut agent, &ObsConfig::default(), &RewardConfig::default())
                    .unwrap();
            format!(
                "{}\n{}",
                serde_json::to_string(&metrics).unwrap(),
                serde_json::to_string(&episodes).unwrap()
            )
        };
        assert_eq!(run(&model), run(&model));
    }

    #[test]
    fn random_agent_is_deterministic_per_seed() {
        let scene = test_scene(26);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = sample_episode_spec(&scene, 1.0, &mut rng).unwrap();
        let run = |seed: u64| -> Vec<Action> {
            let mut agent = RandomAgent::new(seed);
            let mut obs_rng = ChaCha8Rng::seed_from_u64(0);
            run_episode(
                &scene,
                &gt,
                &spec,
                &mut agent,
                &ObsConfig::default(),
                &RewardConfig::default(),
                &mut obs_rng,
            )
            .unwrap()
            .steps
            .iter()
            .map(|s| s.action)
            .collect()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8), "different seeds should explore differently");
    }

    #[test]
    fn sample_episode_spec_respects_the_minimum_distance() {
        let scene = test_scene(27);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let spec = sample_episode_spec(&scene, 1.25, &mut rng).unwrap();
            let d = geodesic_distance(&scene, spec.start.position, spec.goal).unwrap();
            assert!(d >= 1.25, "sampled geodesic {d}");
            assert!(wrap_angle(spec.start.heading).is_finite());
        }
    }

    #[test]
    fn unreachable_goal_is_rejected() {
        let scene = test_scene(28);
        let blocked = {
            // Any blocked cell center makes an illegal goal.
            let grid = &scene.nav_grid;
            let mut found = None;
            'outer: for r in 0..grid.rows {
                for c in 0..grid.cols {
                    if grid.is_blocked(r, c) {
                        let (x, z) = grid.cell_center(r, c);
                        found = Some(Vec3::new(x, AGENT_EYE_HEIGHT, z));
                        break 'outer;
                    }
                }
            }
            found.expect("scene has obstacles")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let start = sample_free_pose(&scene, &mut rng).unwrap();
        let spec = EpisodeSpec { start, goal: blocked };
        let mut agent = NeverStopAgent;
        let mut obs_rng = ChaCha8Rng::seed_from_u64(0);
        let gt = extract_gt(&scene, 0.05).unwrap();
        assert!(run_episode(
            &scene,
            &gt,
            &spec,
            &mut agent,
            &ObsConfig::default(),
            &RewardConfig::default(),
            &mut obs_rng,
        )
        .is_err());
    }

    #[test]
    fn episode_log_roundtrip() {
        let scene = test_scene(29);
        let gt = extract_gt(&scene, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = sample_episode_spec(&scene, 1.0, &mut rng).unwrap();
        let mut agent = ExpertReplayAgent::new();
        let mut obs_rng = ChaCha8Rng::seed_from_u64(0);
        let ep = run_episode(
            &scene,
            &gt,
            &spec,
            &mut agent,
            &ObsConfig::default(),
            &RewardConfig::default(),
            &mut obs_rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        write_episode_log(&path, &[ep.clone(), ep.clone()]).unwrap();
        let back = read_episode_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ep);
        assert!(read_episode_log(&dir.path().join("missing.jsonl")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

        /// Path efficiency can never exceed plain success: per episode the
        /// score is S * l / max(p, l) <= S.
        #[test]
        fn spl_never_exceeds_success(
            success in any::<bool>(),
            p in 0.0f64..50.0,
            l in 0.0f64..50.0,
        ) {
            let outcome = EpisodeOutcome {
                success,
                path_length: p,
                geodesic_shortest: l,
                ndtw: 1.0,
                ne: 0.0,
            };
            let spl = episode_spl(&outcome);
            let s = if success { 1.0 } else { 0.0 };
            prop_assert!(spl >= 0.0);
            prop_assert!(spl <= s + 1e-15);
        }

        /// The time-warp score always lands in (0, 1].
        #[test]
        fn ndtw_is_a_similarity(
            xs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
            ys in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
        ) {
            let path: Vec<Vec3> = xs.iter().map(|&(x, z)| Vec3::new(x, 0.0, z)).collect();
            let reference: Vec<Vec3> = ys.iter().map(|&(x, z)| Vec3::new(x, 0.0, z)).collect();
            let score = ndtw(&path, &reference, SUCCESS_RADIUS);
            prop_assert!(score > 0.0);
            prop_assert!(score <= 1.0);
        }
    }
}
