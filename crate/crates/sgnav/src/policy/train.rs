//! Trainers for the navigation model.
//!
//! Imitation: teacher-forced replay of planner trajectories with a
//! cross-entropy action loss, the scene-graph supervision as an auxiliary
//! loss on the same forward passes, and a critic regression toward the
//! discounted shaped returns. PPO: clipped-surrogate policy gradient with
//! generalized advantage estimation, an entropy bonus, and a divergence
//! guard that aborts when logits blow up.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::{build_input_graph, loss as sgg_loss, InputGraph, SgtnGrad};
use crate::gtruth::{extract_gt, visible_subgraph, CoverageState, SceneGraphGT, EDGE_TYPE_COUNT};
use crate::tensor::{cross_entropy, log_sum_exp, softmax, Tensor2, Tensor3};
use crate::world::{
    distance_field, expert_actions, observe, step_pose, Action, ActuationNoise, ObsConfig, Scene,
    MAX_EPISODE_STEPS,
};

use super::rollout::{sample_episode_spec, EpisodeSpec};
use super::step::{step_backward_raw, step_raw, StepCache};
use super::{compute_reward, goal_bins, pooled_features, NavModel, RewardConfig};

/// Imitation-learning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainIlConfig {
    pub epochs: usize,
    /// Adam learning rate, shared by both parameter stores.
    pub lr: f64,
    /// Discount for the critic's return targets.
    pub gamma: f64,
    /// Weight of the auxiliary scene-graph loss.
    pub sgg_weight: f64,
    /// Weight of the critic regression loss.
    pub value_weight: f64,
    /// Minimum geodesic start-goal separation when sampling episodes.
    pub min_goal_distance: f64,
    /// Coplanarity tolerance for the supervision graphs.
    pub gt_eps: f64,
    pub seed: u64,
    pub reward: RewardConfig,
    pub obs: ObsConfig,
}

impl Default for TrainIlConfig {
    fn default() -> Self {
        TrainIlConfig {
            epochs: 30,
            lr: 2.5e-4,
            gamma: 0.99,
            sgg_weight: 1.0,
            value_weight: 0.5,
            min_goal_distance: 1.0,
            gt_eps: 0.05,
            seed: 0,
            reward: RewardConfig::default(),
            obs: ObsConfig::default(),
        }
    }
}

impl TrainIlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::arg(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        for (name, v) in [("sgg_weight", self.sgg_weight), ("value_weight", self.value_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.min_goal_distance.is_finite() && self.min_goal_distance >= 0.0) {
            return Err(Error::arg("min_goal_distance must be nonnegative"));
        }
        if !(self.gt_eps > 0.0) {
            return Err(Error::arg("gt_eps must be positive"));
        }
        self.reward.validate()
    }
}

/// Per-epoch means of the imitation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlEpochMetrics {
    pub epoch: usize,
    /// Mean action cross entropy per step.
    pub action_ce: f64,
    /// Mean auxiliary scene-graph loss per observed step.
    pub sgg_loss: f64,
    /// Mean squared critic error per step.
    pub value_mse: f64,
}

pub(crate) struct IlEpisodeStats {
    pub action_ce: f64,
    pub sgg_loss: f64,
    pub value_mse: f64,
}

/// One teacher-forced episode: forward through both networks along the
/// planner's trajectory, accumulate gradients for the combined loss, and
/// report the per-step means. The caller applies the optimizer step.
pub(crate) fn il_episode_update(
    model: &mut NavModel,
    scene: &Scene,
    gt: &SceneGraphGT,
    spec: &EpisodeSpec,
    plan: &[Action],
    cfg: &TrainIlConfig,
    obs_rng: &mut ChaCha8Rng,
) -> Result<IlEpisodeStats> {
    if plan.is_empty() {
        return Err(Error::arg("teacher forcing needs a nonempty plan"));
    }
    let NavModel { sgtn, policy } = model;
    let policy_hyper = policy.hyper;
    let field = distance_field(scene, spec.goal)?;
    let mut pose = spec.start;
    let mut dist = field.distance_at(scene, pose.position)?;
    let mut coverage = CoverageState::new(gt);
    let mut cov_value = 0.0;
    let mut act_rng = ChaCha8Rng::seed_from_u64(0);

    struct StepRec {
        graph: Option<(InputGraph, crate::graphnet::SgtnCache, SceneGraphGT)>,
        sg_out: Option<crate::graphnet::SgtnOutput>,
        cache: StepCache,
        logits: Tensor2,
        value: f64,
        label: usize,
    }
    let mut recs: Vec<StepRec> = Vec::with_capacity(plan.len());
    let mut rewards = Vec::with_capacity(plan.len());
    let mut hidden = policy.initial_hidden();
    for (t, &expert) in plan.iter().enumerate() {
        let obs = observe(scene, pose, &cfg.obs, obs_rng);
        let ids: Vec<u32> = obs.rois.iter().map(|r| r.object_id).collect();
        let seen = visible_subgraph(gt, &ids)?;
        coverage.update(&seen);
        let new_cov = coverage.coverage();
        let cov_delta = new_cov - cov_value;
        cov_value = new_cov;

        let (pooled, graph, sg_out) = if obs.rois.is_empty() {
            (None, None, None)
        } else {
            let g = build_input_graph(&obs, &sgtn.hyper.sigmas)?;
            let (out, cache) = sgtn.forward(&g);
            (Some(pooled_features(&out.z)), Some((g, cache, seen)), Some(out))
        };
        let bins = goal_bins(&pose, spec.goal, policy_hyper.distance_bins, policy_hyper.angle_bins);
        let prev = if t == 0 { None } else { Some(plan[t - 1]) };
        let (out, cache) =
            step_raw(&policy_hyper, &policy.params, pooled.as_ref(), prev, bins, &hidden);
        hidden = out.hidden;

        let prev_dist = dist;
        let mut success = false;
        if expert == Action::Stop {
            success = pose.position.dist_xz(spec.goal) < cfg.reward.success_radius;
        } else {
            pose = step_pose(scene, pose, expert, ActuationNoise::NONE, &mut act_rng);
            dist = field.distance_at(scene, pose.position)?;
        }
        rewards.push(compute_reward(prev_dist, dist, cov_delta, success, &cfg.reward));
        recs.push(StepRec {
            graph,
            sg_out,
            cache,
            logits: out.logits,
            value: out.value,
            label: expert.index(),
        });
    }

    let t_count = recs.len();
    let mut returns = vec![0.0; t_count];
    let mut acc = 0.0;
    for t in (0..t_count).rev() {
        acc = rewards[t] + cfg.gamma * acc;
        returns[t] = acc;
    }

    sgtn.params.zero_grads();
    policy.params.zero_grads();
    let steps = t_count as f64;
    let graph_steps = recs.iter().filter(|r| r.graph.is_some()).count().max(1) as f64;
    let (mut ce_sum, mut sgg_sum, mut mse_sum) = (0.0, 0.0, 0.0);
    let mut d_h = Tensor2::zeros(1, policy_hyper.hidden);
    for t in (0..t_count).rev() {
        let rec = &recs[t];
        let (ce, mut d_logits) = cross_entropy(&rec.logits, &[rec.label])?;
        ce_sum += ce;
        d_logits.scale(1.0 / steps);
        let verr = rec.value - returns[t];
        mse_sum += verr * verr;
        let d_value = cfg.value_weight * 2.0 * verr / steps;
        let (d_h_prev, d_pooled) = step_backward_raw(
            &policy_hyper,
            &mut policy.params,
            &rec.cache,
            &d_logits,
            d_value,
            &d_h,
        );
        d_h = d_h_prev;
        if let (Some((g, cache, seen)), Some(out)) = (&rec.graph, &rec.sg_out) {
            let (sl, mut grad) = sgg_loss(out, seen, 1.0)?;
            sgg_sum += sl;
            grad.scale(cfg.sgg_weight / graph_steps);
            if let Some(dp) = &d_pooled {
                let share = 1.0 / g.n as f64;
                for i in 0..g.n {
                    for c in 0..dp.cols() {
                        grad.d_z.add_at(i, c, dp.get(0, c) * share);
                    }
                }
            }
            sgtn.backward(g, cache, &grad);
        }
    }
    Ok(IlEpisodeStats {
        action_ce: ce_sum / steps,
        sgg_loss: sgg_sum / graph_steps,
        value_mse: mse_sum / steps,
    })
}

/// Imitation learning over planner trajectories. Each epoch samples one
/// fresh episode per scene, replays it teacher-forced, and applies one
/// optimizer step per episode to both parameter stores.
pub fn train_il(
    scenes: &[Scene],
    model: &mut NavModel,
    cfg: &TrainIlConfig,
) -> Result<Vec<IlEpochMetrics>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::arg("imitation needs at least one scene"));
    }
    let gts: Vec<SceneGraphGT> =
        scenes.iter().map(|s| extract_gt(s, cfg.gt_eps)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut ce, mut sgg, mut mse) = (0.0, 0.0, 0.0);
        for (scene, gt) in scenes.iter().zip(&gts) {
            let spec = sample_episode_spec(scene, cfg.min_goal_distance, &mut rng)?;
            let plan = expert_actions(scene, spec.start, spec.goal)?;
            let stats = il_episode_update(model, scene, gt, &spec, &plan, cfg, &mut rng)?;
            model.policy.params.adam_step(cfg.lr)?;
            model.sgtn.params.adam_step(cfg.lr)?;
            ce += stats.action_ce;
            sgg += stats.sgg_loss;
            mse += stats.value_mse;
        }
        let n = scenes.len() as f64;
        history.push(IlEpochMetrics {
            epoch,
            action_ce: ce / n,
            sgg_loss: sgg / n,
            value_mse: mse / n,
        });
    }
    Ok(history)
}

/// PPO settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPpoConfig {
    /// Number of collect-then-optimize rounds.
    pub updates: usize,
    pub episodes_per_update: usize,
    /// Optimization passes over each collected batch.
    pub epochs: usize,
    /// Clipping half-width for the probability ratio.
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub lr: f64,
    /// Per-episode step budget during collection.
    pub max_steps: usize,
    pub min_goal_distance: f64,
    pub gt_eps: f64,
    pub seed: u64,
    pub reward: RewardConfig,
    pub obs: ObsConfig,
}

impl Default for TrainPpoConfig {
    fn default() -> Self {
        TrainPpoConfig {
            updates: 10,
            episodes_per_update: 4,
            epochs: 4,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_weight: 0.01,
            value_weight: 0.5,
            lr: 2.5e-4,
            max_steps: MAX_EPISODE_STEPS,
            min_goal_distance: 1.0,
            gt_eps: 0.05,
            seed: 0,
            reward: RewardConfig::default(),
            obs: ObsConfig::default(),
        }
    }
}

impl TrainPpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.updates == 0 || self.episodes_per_update == 0 || self.epochs == 0 {
            return Err(Error::arg("updates, episodes_per_update, and epochs must be at least 1"));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::arg(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::arg(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::arg(format!("gae_lambda must be in [0, 1], got {}", self.gae_lambda)));
        }
        for (name, v) in
            [("entropy_weight", self.entropy_weight), ("value_weight", self.value_weight)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_steps == 0 || self.max_steps > MAX_EPISODE_STEPS {
            return Err(Error::arg(format!(
                "max_steps must be in [1, {MAX_EPISODE_STEPS}], got {}",
                self.max_steps
            )));
        }
        if !(self.min_goal_distance.is_finite() && self.min_goal_distance >= 0.0) {
            return Err(Error::arg("min_goal_distance must be nonnegative"));
        }
        if !(self.gt_eps > 0.0) {
            return Err(Error::arg("gt_eps must be positive"));
        }
        self.reward.validate()
    }
}

/// Per-update PPO telemetry, measured on the freshly collected batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoUpdateMetrics {
    pub update: usize,
    /// Mean episode return in the batch.
    pub mean_return: f64,
    /// Mean per-step policy entropy at collection time.
    pub entropy: f64,
    /// Mean clipped-surrogate loss over the first optimization pass.
    pub policy_loss: f64,
    /// Mean squared critic error over the first optimization pass.
    pub value_loss: f64,
}

/// In-place batch normalization to zero mean and unit standard deviation;
/// a degenerate (constant) batch normalizes to all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / std.max(1e-8);
    }
}

/// Generalized advantage estimation with a zero bootstrap past the last
/// step; also returns the value-regression targets (advantage + value).
pub(crate) fn gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let t_count = rewards.len();
    let mut adv = vec![0.0; t_count];
    let mut acc = 0.0;
    for t in (0..t_count).rev() {
        let next_value = if t + 1 < t_count { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// One collected on-policy episode.
struct Trajectory {
    graphs: Vec<Option<InputGraph>>,
    bins: Vec<(usize, usize)>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    log_probs: Vec<f64>,
}

const DIVERGENCE_LOGIT_LIMIT: f64 = 1e3;

/// PPO over sampled on-policy rollouts: collect a batch with the current
/// policy, estimate advantages, then take several clipped-surrogate passes
/// over the batch. Aborts with [`Error::Diverged`] when the mean absolute
/// logit exceeds the divergence limit.
pub fn train_ppo(
    scenes: &[Scene],
    model: &mut NavModel,
    cfg: &TrainPpoConfig,
) -> Result<Vec<PpoUpdateMetrics>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::arg("PPO needs at least one scene"));
    }
    let gts: Vec<SceneGraphGT> =
        scenes.iter().map(|s| extract_gt(s, cfg.gt_eps)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        // Collection.
        let mut batch: Vec<Trajectory> = Vec::with_capacity(cfg.episodes_per_update);
        let (mut entropy_sum, mut entropy_steps) = (0.0, 0usize);
        let mut return_sum = 0.0;
        for episode in 0..cfg.episodes_per_update {
            let scene_idx = (update * cfg.episodes_per_update + episode) % scenes.len();
            let scene = &scenes[scene_idx];
            let gt = &gts[scene_idx];
            let spec = sample_episode_spec(scene, cfg.min_goal_distance, &mut rng)?;
            let (traj, traj_entropy) = collect_trajectory(model, scene, gt, &spec, cfg, &mut rng)?;
            entropy_sum += traj_entropy;
            entropy_steps += traj.actions.len();
            return_sum += traj.rewards.iter().sum::<f64>();
            batch.push(traj);
        }

        // Advantage estimation over the whole batch.
        let mut advantages = Vec::new();
        let mut returns_all = Vec::new();
        for traj in &batch {
            let (adv, ret) = gae(&traj.rewards, &traj.values, cfg.gamma, cfg.gae_lambda);
            advantages.extend(adv);
            returns_all.extend(ret);
        }
        normalize_advantages(&mut advantages);
        let total_steps: usize = batch.iter().map(|t| t.actions.len()).sum();
        if total_steps == 0 {
            return Err(Error::State("PPO collected an empty batch".into()));
        }

        // Optimization passes.
        let (mut first_policy_loss, mut first_value_loss) = (0.0, 0.0);
        for epoch in 0..cfg.epochs {
            let (policy_loss, value_loss) = ppo_epoch(
                model,
                &batch,
                &advantages,
                &returns_all,
                total_steps,
                cfg,
            )?;
            if epoch == 0 {
                first_policy_loss = policy_loss;
                first_value_loss = value_loss;
            }
            model.policy.params.adam_step(cfg.lr)?;
            model.sgtn.params.adam_step(cfg.lr)?;
        }
        history.push(PpoUpdateMetrics {
            update,
            mean_return: return_sum / cfg.episodes_per_update as f64,
            entropy: entropy_sum / entropy_steps.max(1) as f64,
            policy_loss: first_policy_loss,
            value_loss: first_value_loss,
        });
    }
    Ok(history)
}

fn previous_action(actions: &[usize], t: usize) -> Option<Action> {
    if t == 0 {
        None
    } else {
        Action::from_index(actions[t - 1])
    }
}

/// Roll out one episode with the sampling policy, recording everything the
/// optimization passes need to replay it. Also returns the summed per-step
/// policy entropy for telemetry.
fn collect_trajectory(
    model: &NavModel,
    scene: &Scene,
    gt: &SceneGraphGT,
    spec: &EpisodeSpec,
    cfg: &TrainPpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, f64)> {
    let field = distance_field(scene, spec.goal)?;
    let mut pose = spec.start;
    let mut dist = field.distance_at(scene, pose.position)?;
    if !dist.is_finite() {
        return Err(Error::Planning("goal is unreachable from the start pose".into()));
    }
    let mut coverage = CoverageState::new(gt);
    let mut cov_value = 0.0;
    let mut act_rng = ChaCha8Rng::seed_from_u64(0);
    let mut hidden = model.policy.initial_hidden();
    let hyper = model.policy.hyper;
    let mut entropy_sum = 0.0;
    let mut traj = Trajectory {
        graphs: Vec::new(),
        bins: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        values: Vec::new(),
        log_probs: Vec::new(),
    };
    for t in 0..cfg.max_steps {
        let obs = observe(scene, pose, &cfg.obs, rng);
        let ids: Vec<u32> = obs.rois.iter().map(|r| r.object_id).collect();
        let seen = visible_subgraph(gt, &ids)?;
        coverage.update(&seen);
        let new_cov = coverage.coverage();
        let cov_delta = new_cov - cov_value;
        cov_value = new_cov;

        let (pooled, graph) = if obs.rois.is_empty() {
            (None, None)
        } else {
            let g = build_input_graph(&obs, &model.sgtn.hyper.sigmas)?;
            let (out, _) = model.sgtn.forward(&g);
            (Some(pooled_features(&out.z)), Some(g))
        };
        let bins = goal_bins(&pose, spec.goal, hyper.distance_bins, hyper.angle_bins);
        let prev = previous_action(&traj.actions, t);
        let (logits, value, next_hidden) =
            model.policy.policy_step(pooled.as_ref(), prev, bins, &hidden);
        hidden = next_hidden;
        let row = logits.row(0);
        let lse = log_sum_exp(row);
        let p = softmax(row)?;
        entropy_sum -= p.iter().filter(|&&pi| pi > 0.0).map(|&pi| pi * pi.ln()).sum::<f64>();
        let u: f64 = rng.random_range(0.0..1.0);
        let mut action_idx = row.len() - 1;
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                action_idx = i;
                break;
            }
        }
        let action = Action::from_index(action_idx).expect("action index in range");

        let prev_dist = dist;
        let mut success = false;
        let stopping = action == Action::Stop;
        if stopping {
            success = pose.position.dist_xz(spec.goal) < cfg.reward.success_radius;
        } else {
            pose = step_pose(scene, pose, action, ActuationNoise::NONE, &mut act_rng);
            dist = field.distance_at(scene, pose.position)?;
        }
        traj.graphs.push(graph);
        traj.bins.push(bins);
        traj.actions.push(action_idx);
        traj.rewards.push(compute_reward(prev_dist, dist, cov_delta, success, &cfg.reward));
        traj.values.push(value);
        traj.log_probs.push(row[action_idx] - lse);
        if stopping {
            break;
        }
    }
    Ok((traj, entropy_sum))
}

/// One optimization pass over the batch: re-forward every trajectory with
/// the current parameters, accumulate clipped-surrogate, entropy, and
/// value gradients (scaled by the batch size), and backpropagate through
/// both networks. Returns the mean policy and value losses.
fn ppo_epoch(
    model: &mut NavModel,
    batch: &[Trajectory],
    advantages: &[f64],
    returns: &[f64],
    total_steps: usize,
    cfg: &TrainPpoConfig,
) -> Result<(f64, f64)> {
    let NavModel { sgtn, policy } = model;
    let policy_hyper = policy.hyper;
    sgtn.params.zero_grads();
    policy.params.zero_grads();
    let scale = 1.0 / total_steps as f64;
    let (mut policy_loss_sum, mut value_loss_sum) = (0.0, 0.0);
    let (mut abs_logit_sum, mut logit_count) = (0.0, 0usize);
    let mut offset = 0;
    for traj in batch {
        let t_count = traj.actions.len();
        let mut caches: Vec<StepCache> = Vec::with_capacity(t_count);
        let mut sg_caches = Vec::with_capacity(t_count);
        let mut d_logits_list: Vec<Tensor2> = Vec::with_capacity(t_count);
        let mut d_values: Vec<f64> = Vec::with_capacity(t_count);
        let mut hidden = Tensor2::zeros(1, policy_hyper.hidden);
        for t in 0..t_count {
            let (pooled, sg_cache) = match &traj.graphs[t] {
                Some(g) => {
                    let (out, cache) = sgtn.forward(g);
                    (Some(pooled_features(&out.z)), Some(cache))
                }
                None => (None, None),
            };
            let prev = previous_action(&traj.actions, t);
            let (out, cache) =
                step_raw(&policy_hyper, &policy.params, pooled.as_ref(), prev, traj.bins[t], &hidden);
            hidden = out.hidden;

            let row = out.logits.row(0);
            if !out.logits.is_finite() {
                return Err(Error::Diverged("policy logits are not finite".into()));
            }
            abs_logit_sum += row.iter().map(|l| l.abs()).sum::<f64>();
            logit_count += row.len();

            let k = offset + t;
            let adv = advantages[k];
            let lse = log_sum_exp(row);
            let a_idx = traj.actions[t];
            let logp_new = row[a_idx] - lse;
            let ratio = (logp_new - traj.log_probs[t]).exp();
            let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
            let unclipped = ratio * adv;
            let clipped = clipped_ratio * adv;
            // Gradient flows only when the unclipped branch attains the min.
            let d_logp = if unclipped <= clipped { -ratio * adv } else { 0.0 };
            policy_loss_sum += -unclipped.min(clipped);

            let p = softmax(row)?;
            let entropy: f64 =
                -p.iter().filter(|&&pi| pi > 0.0).map(|&pi| pi * pi.ln()).sum::<f64>();
            let mut d_row = Tensor2::zeros(1, row.len());
            for j in 0..row.len() {
                let onehot = if j == a_idx { 1.0 } else { 0.0 };
                let mut d = d_logp * (onehot - p[j]);
                if p[j] > 0.0 {
                    d += cfg.entropy_weight * p[j] * (p[j].ln() + entropy);
                }
                d_row.set(0, j, d * scale);
            }
            let verr = out.value - returns[k];
            value_loss_sum += verr * verr;
            d_values.push(cfg.value_weight * 2.0 * verr * scale);
            d_logits_list.push(d_row);
            caches.push(cache);
            sg_caches.push(sg_cache);
        }
        let mut d_h = Tensor2::zeros(1, policy_hyper.hidden);
        for t in (0..t_count).rev() {
            let (d_h_prev, d_pooled) = step_backward_raw(
                &policy_hyper,
                &mut policy.params,
                &caches[t],
                &d_logits_list[t],
                d_values[t],
                &d_h,
            );
            d_h = d_h_prev;
            if let (Some(dp), Some(g)) = (d_pooled, &traj.graphs[t]) {
                let cache = sg_caches[t].as_ref().expect("graph step has a cache");
                let share = 1.0 / g.n as f64;
                let mut d_z = Tensor2::zeros(g.n, dp.cols());
                for i in 0..g.n {
                    for c in 0..dp.cols() {
                        d_z.set(i, c, dp.get(0, c) * share);
                    }
                }
                let grad = SgtnGrad {
                    d_node_logits: Tensor2::zeros(g.n, sgtn.hyper.k),
                    d_edge_logits: Tensor3::zeros(g.n, g.n, EDGE_TYPE_COUNT),
                    d_z,
                };
                sgtn.backward(g, cache, &grad);
            }
        }
        offset += t_count;
    }
    let mean_abs_logit = abs_logit_sum / logit_count.max(1) as f64;
    if mean_abs_logit > DIVERGENCE_LOGIT_LIMIT {
        return Err(Error::Diverged(format!(
            "mean absolute logit {mean_abs_logit:.3e} exceeds {DIVERGENCE_LOGIT_LIMIT:.0e}"
        )));
    }
    Ok((policy_loss_sum / total_steps as f64, value_loss_sum / total_steps as f64))
}
