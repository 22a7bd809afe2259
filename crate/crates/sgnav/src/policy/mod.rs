//! PointGoal navigation: a recurrent actor-critic head over pooled graph
//! embeddings, goal encoding by binned distance and angle, shaped rewards
//! with a graph-coverage bonus, imitation and PPO training, and the
//! SR/SPL/NDTW/NE evaluation suite.
//!
//! The policy consumes the mean-pooled node embeddings of the graph
//! network (or a learned null feature when nothing is visible), embeds the
//! previous action and the binned goal, and runs a single gated recurrent
//! cell whose hidden state feeds linear actor and critic heads. All
//! gradients are explicit and verified against finite differences through
//! a multi-step unroll.

mod rollout;
mod step;
mod train;

pub use rollout::{
    evaluate, ndtw, read_episode_log, run_episode, sample_episode_spec, write_episode_log,
    AgentChoice, Episode, EpisodeOutcome, EpisodeSpec, EpisodeStep, EvalMetrics, EvalSet,
    ExpertReplayAgent, NavAgent, NeverStopAgent, PolicyAgent, RandomAgent,
};
pub use train::{
    normalize_advantages, train_il, train_ppo, IlEpochMetrics, PpoUpdateMetrics, TrainIlConfig,
    TrainPpoConfig,
};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::{SgtnHyper, SgtnModel};
use crate::optim::{ParamStore, TensorEntry};
use crate::tensor::Tensor2;
use crate::world::{wrap_angle, Action, AgentPose, Vec3, ACTION_COUNT, GRID_RES};

/// Reward shaping weights for one navigation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight on geodesic progress toward the goal.
    pub progress_scale: f64,
    /// Weight on the newly observed fraction of the scene graph.
    pub coverage_scale: f64,
    /// Constant per-step penalty (negative).
    pub step_penalty: f64,
    /// One-time bonus for stopping inside the success radius.
    pub success_bonus: f64,
    /// Meters from the goal within which Stop counts as success.
    pub success_radius: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            progress_scale: 1.0,
            coverage_scale: 1.0,
            step_penalty: -0.01,
            success_bonus: 2.5,
            success_radius: 0.2,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius.is_finite() && self.success_radius > 0.0) {
            return Err(Error::arg(format!(
                "success_radius must be positive, got {}",
                self.success_radius
            )));
        }
        for (name, v) in [
            ("progress_scale", self.progress_scale),
            ("coverage_scale", self.coverage_scale),
            ("step_penalty", self.step_penalty),
            ("success_bonus", self.success_bonus),
        ] {
            if !v.is_finite() {
                return Err(Error::arg(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Shaped reward for one step: progress plus coverage gain plus the step
/// penalty, with the success bonus when the episode ends successfully.
pub fn compute_reward(
    prev_dist: f64,
    new_dist: f64,
    coverage_delta: f64,
    success: bool,
    cfg: &RewardConfig,
) -> f64 {
    cfg.progress_scale * (prev_dist - new_dist)
        + cfg.coverage_scale * coverage_delta
        + cfg.step_penalty
        + if success { cfg.success_bonus } else { 0.0 }
}

/// Bin a relative goal for the embedding tables.
///
/// Distance bins grow exponentially: bin = floor(log2(1 + d/0.25)), capped
/// at `distance_bins - 1`, so bin 0 covers [0, 0.25), bin 1 [0.25, 0.75),
/// and so on. Angle bins split [-180, 180) degrees evenly, bin 0 starting
/// at -180.
pub fn goal_bins(
    pose: &AgentPose,
    goal: Vec3,
    distance_bins: usize,
    angle_bins: usize,
) -> (usize, usize) {
    assert!(distance_bins > 0 && angle_bins > 0, "bin counts must be nonzero");
    let d = pose.position.dist_xz(goal);
    let dist_bin = ((1.0 + d / GRID_RES).log2().floor() as usize).min(distance_bins - 1);
    let rel = wrap_angle((goal.z - pose.position.z).atan2(goal.x - pose.position.x) - pose.heading);
    let width = 2.0 * std::f64::consts::PI / angle_bins as f64;
    let angle_bin =
        (((rel + std::f64::consts::PI) / width).floor() as usize).min(angle_bins - 1);
    (dist_bin, angle_bin)
}

/// Policy architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyHyper {
    /// Recurrent hidden width.
    pub hidden: usize,
    /// Width of the pooled graph feature (channels x embedding width of
    /// the paired graph network).
    pub feat_dim: usize,
    /// Width of the action and goal embeddings.
    pub embed: usize,
    /// Number of exponential goal-distance bins.
    pub distance_bins: usize,
    /// Number of goal-angle bins over the full circle.
    pub angle_bins: usize,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        PolicyHyper { hidden: 128, feat_dim: 64, embed: 32, distance_bins: 16, angle_bins: 72 }
    }
}

impl PolicyHyper {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.feat_dim == 0
            || self.embed == 0
            || self.distance_bins == 0
            || self.angle_bins == 0
        {
            return Err(Error::arg("policy hyperparameters must be nonzero"));
        }
        Ok(())
    }

    /// Width of the recurrent cell's input: transformed feature, previous
    /// action embedding, and the two goal embeddings.
    pub fn input_dim(&self) -> usize {
        self.hidden + 3 * self.embed
    }

    /// Expected parameter shapes, in name order.
    pub(crate) fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (h, input) = (self.hidden, self.input_dim());
        let mut out = vec![
            ("act_embed.w".to_string(), ACTION_COUNT, self.embed),
            ("actor.b".to_string(), 1, ACTION_COUNT),
            ("actor.w".to_string(), h, ACTION_COUNT),
            ("critic.b".to_string(), 1, 1),
            ("critic.w".to_string(), h, 1),
            ("feat_fc.b".to_string(), 1, h),
            ("feat_fc.w".to_string(), self.feat_dim, h),
            ("goal_angle.emb".to_string(), self.angle_bins, self.embed),
            ("goal_dist.emb".to_string(), self.distance_bins, self.embed),
        ];
        for gate in ["n", "r", "z"] {
            out.push((format!("gru.b{gate}"), 1, h));
            out.push((format!("gru.u{gate}"), h, h));
            out.push((format!("gru.w{gate}"), input, h));
        }
        out.push(("null.feat".to_string(), 1, self.feat_dim));
        out
    }
}

/// The recurrent actor-critic: hyperparameters plus named parameters.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub hyper: PolicyHyper,
    pub params: ParamStore,
}

impl PolicyModel {
    /// Fresh policy with small random weights and zero biases. The actor
    /// head starts near zero so the initial action distribution is close
    /// to uniform (maximum entropy) before any training signal arrives.
    pub fn new<R: Rng>(hyper: PolicyHyper, rng: &mut R) -> Result<PolicyModel> {
        hyper.validate()?;
        let mut params = ParamStore::new();
        for (name, rows, cols) in hyper.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor2::zeros(rows, cols)
            } else if name == "actor.w" {
                Tensor2::randn(rows, cols, 0.01, rng)
            } else if name.contains("emb") || name == "null.feat" {
                Tensor2::randn(rows, cols, 0.1, rng)
            } else {
                Tensor2::randn(rows, cols, (2.0 / rows as f64).sqrt(), rng)
            };
            params.insert(&name, t);
        }
        Ok(PolicyModel { hyper, params })
    }

    /// All-zero hidden state for the start of an episode.
    pub fn initial_hidden(&self) -> Tensor2 {
        Tensor2::zeros(1, self.hyper.hidden)
    }

    /// One recurrent step: transformed pooled feature (None selects the
    /// learned null feature), previous action (None at episode start), and
    /// binned goal, against the current hidden state. Returns action
    /// logits, the critic value, and the next hidden state.
    pub fn policy_step(
        &self,
        pooled: Option<&Tensor2>,
        prev_action: Option<Action>,
        bins: (usize, usize),
        hidden: &Tensor2,
    ) -> (Tensor2, f64, Tensor2) {
        let (out, _) = step::step_raw(&self.hyper, &self.params, pooled, prev_action, bins, hidden);
        (out.logits, out.value, out.hidden)
    }

    /// Concatenated distance and angle embeddings for a relative goal.
    pub fn encode_goal(&self, pose: &AgentPose, goal: Vec3) -> Vec<f64> {
        let (db, ab) = goal_bins(pose, goal, self.hyper.distance_bins, self.hyper.angle_bins);
        let mut out = Vec::with_capacity(2 * self.hyper.embed);
        out.extend_from_slice(self.params.param("goal_dist.emb").row(db));
        out.extend_from_slice(self.params.param("goal_angle.emb").row(ab));
        out
    }
}

/// Mean over node embeddings: the graph-level feature the policy consumes.
pub fn pooled_features(z: &Tensor2) -> Tensor2 {
    assert!(z.rows() > 0, "cannot pool an empty embedding matrix");
    let mut out = Tensor2::zeros(1, z.cols());
    let scale = 1.0 / z.rows() as f64;
    for i in 0..z.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(z.row(i)) {
            *o += v * scale;
        }
    }
    out
}

/// The full navigation agent: the graph network plus the policy head.
#[derive(Debug, Clone)]
pub struct NavModel {
    pub sgtn: SgtnModel,
    pub policy: PolicyModel,
}

const NAV_CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NavCheckpointFile {
    version: u32,
    sgtn_hyper: SgtnHyper,
    policy_hyper: PolicyHyper,
    sgtn_params: BTreeMap<String, TensorEntry>,
    policy_params: BTreeMap<String, TensorEntry>,
}

impl NavModel {
    /// Fresh model pair; the policy's feature width must match the graph
    /// network's pooled embedding width.
    pub fn new<R: Rng>(
        sgtn_hyper: SgtnHyper,
        policy_hyper: PolicyHyper,
        rng: &mut R,
    ) -> Result<NavModel> {
        let pooled = sgtn_hyper.channels * sgtn_hyper.d;
        if policy_hyper.feat_dim != pooled {
            return Err(Error::dim(format!(
                "policy feat_dim {} != pooled embedding width {pooled}",
                policy_hyper.feat_dim
            )));
        }
        let sgtn = SgtnModel::new(sgtn_hyper, rng)?;
        let policy = PolicyModel::new(policy_hyper, rng)?;
        Ok(NavModel { sgtn, policy })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let file = NavCheckpointFile {
            version: NAV_CHECKPOINT_VERSION,
            sgtn_hyper: self.sgtn.hyper,
            policy_hyper: self.policy.hyper,
            sgtn_params: self.sgtn.params.to_entries(),
            policy_params: self.policy.params.to_entries(),
        };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    pub fn load(path: &std::path::Path) -> Result<NavModel> {
        let s = std::fs::read_to_string(path)?;
        NavModel::from_json_str(&s)
    }

    /// Parse a checkpoint, validating both hyperparameter blocks and every
    /// parameter shape.
    pub fn from_json_str(s: &str) -> Result<NavModel> {
        let file: NavCheckpointFile = serde_json::from_str(s)?;
        if file.version != NAV_CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch {
                version: file.version,
                detail: format!("expected navigation checkpoint version {NAV_CHECKPOINT_VERSION}"),
            });
        }
        let mismatch = |e: Error| Error::CheckpointMismatch {
            version: file.version,
            detail: e.to_string(),
        };
        file.sgtn_hyper.validate().map_err(mismatch)?;
        file.policy_hyper.validate().map_err(mismatch)?;
        let pooled = file.sgtn_hyper.channels * file.sgtn_hyper.d;
        if file.policy_hyper.feat_dim != pooled {
            return Err(Error::CheckpointMismatch {
                version: file.version,
                detail: format!(
                    "policy feat_dim {} != pooled embedding width {pooled}",
                    file.policy_hyper.feat_dim
                ),
            });
        }
        let sgtn_params = ParamStore::from_entries(
            file.sgtn_params,
            &file.sgtn_hyper.param_shapes(),
            file.version,
        )?;
        let policy_params = ParamStore::from_entries(
            file.policy_params,
            &file.policy_hyper.param_shapes(),
            file.version,
        )?;
        Ok(NavModel {
            sgtn: SgtnModel { hyper: file.sgtn_hyper, params: sgtn_params },
            policy: PolicyModel { hyper: file.policy_hyper, params: policy_params },
        })
    }
}
