//! One typed document configuring every stage of the pipeline: scene
//! generation, observation, ground-truth extraction, the graph network,
//! reward shaping, training, and evaluation.
//!
//! Every field has a default, unknown keys are rejected at parse time, and
//! the document is designed to be echoed verbatim into output directories
//! so a run can always be reproduced from its artifacts. Sections reuse
//! the library's own config types wherever one exists; the two navigation
//! trainers additionally pull the shared [`RewardConfig`] and
//! [`ObsConfig`] sections in through [`Config::il_config`] and
//! [`Config::ppo_config`], so reward and observation parameters are stated
//! once per document rather than once per trainer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::{SgtnHyper, TrainSggConfig};
use crate::policy::{PolicyHyper, RewardConfig, TrainIlConfig, TrainPpoConfig};
use crate::world::{ObsConfig, SceneGenConfig, CLASS_COUNT};

/// Geometry thresholds for ground-truth extraction.
///
/// The kernel bandwidths that turn raw pair geometry into soft edge
/// features live in [`SgtnHyper::sigmas`]; only the hard coplanarity
/// tolerance belongs here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtruthSection {
    /// Coplanarity tolerance in meters, used both when extracting
    /// datasets and when building supervision graphs during navigation
    /// training.
    pub eps: f64,
}

impl Default for GtruthSection {
    fn default() -> Self {
        GtruthSection { eps: 0.05 }
    }
}

/// Imitation-learning knobs. Scalar twin of [`TrainIlConfig`] minus the
/// reward / observation / tolerance fields, which are document-wide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlSection {
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub sgg_weight: f64,
    pub value_weight: f64,
    pub min_goal_distance: f64,
    pub seed: u64,
}

impl Default for IlSection {
    fn default() -> Self {
        let base = TrainIlConfig::default();
        IlSection {
            epochs: base.epochs,
            lr: base.lr,
            gamma: base.gamma,
            sgg_weight: base.sgg_weight,
            value_weight: base.value_weight,
            min_goal_distance: base.min_goal_distance,
            seed: base.seed,
        }
    }
}

/// PPO knobs. Scalar twin of [`TrainPpoConfig`], same carve-outs as
/// [`IlSection`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    pub updates: usize,
    pub episodes_per_update: usize,
    pub epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub min_goal_distance: f64,
    pub seed: u64,
}

impl Default for PpoSection {
    fn default() -> Self {
        let base = TrainPpoConfig::default();
        PpoSection {
            updates: base.updates,
            episodes_per_update: base.episodes_per_update,
            epochs: base.epochs,
            clip: base.clip,
            gamma: base.gamma,
            gae_lambda: base.gae_lambda,
            entropy_weight: base.entropy_weight,
            value_weight: base.value_weight,
            lr: base.lr,
            max_steps: base.max_steps,
            min_goal_distance: base.min_goal_distance,
            seed: base.seed,
        }
    }
}

/// Navigation-policy width knobs. Scalar twin of [`PolicyHyper`] minus
/// `feat_dim`, which is always the graph network's pooled embedding width
/// and so is derived from the `sgtn` section instead of being stated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: usize,
    pub embed: usize,
    pub distance_bins: usize,
    pub angle_bins: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        let base = PolicyHyper::default();
        PolicySection {
            hidden: base.hidden,
            embed: base.embed,
            distance_bins: base.distance_bins,
            angle_bins: base.angle_bins,
        }
    }
}

/// Per-trainer subsections.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub sgg: TrainSggConfig,
    pub il: IlSection,
    pub ppo: PpoSection,
}

/// Episode-sampling knobs for `eval-nav`. Success is judged by
/// [`RewardConfig::success_radius`] so evaluation and reward shaping can
/// never disagree about what "reached the goal" means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Episodes sampled per scene.
    pub episodes: usize,
    /// Minimum geodesic start-goal separation, meters.
    pub min_goal_distance: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 20, min_goal_distance: 1.0, seed: 0 }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::arg("eval: episodes must be at least 1"));
        }
        if !(self.min_goal_distance.is_finite() && self.min_goal_distance >= 0.0) {
            return Err(Error::arg(format!(
                "eval: min_goal_distance must be nonnegative, got {}",
                self.min_goal_distance
            )));
        }
        Ok(())
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene_gen: SceneGenConfig,
    pub observation: ObsConfig,
    pub gtruth: GtruthSection,
    pub sgtn: SgtnHyper,
    pub policy: PolicySection,
    pub reward: RewardConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    /// The imitation trainer's config, assembled from the `train.il`
    /// scalars plus the shared reward / observation / tolerance sections.
    pub fn il_config(&self) -> TrainIlConfig {
        let s = self.train.il;
        TrainIlConfig {
            epochs: s.epochs,
            lr: s.lr,
            gamma: s.gamma,
            sgg_weight: s.sgg_weight,
            value_weight: s.value_weight,
            min_goal_distance: s.min_goal_distance,
            gt_eps: self.gtruth.eps,
            seed: s.seed,
            reward: self.reward,
            obs: self.observation,
        }
    }

    /// The navigation policy's hyperparameters, with the pooled feature
    /// width taken from the `sgtn` section.
    pub fn policy_hyper(&self) -> PolicyHyper {
        let s = self.policy;
        PolicyHyper {
            hidden: s.hidden,
            feat_dim: self.sgtn.channels * self.sgtn.d,
            embed: s.embed,
            distance_bins: s.distance_bins,
            angle_bins: s.angle_bins,
        }
    }

    /// The PPO trainer's config; same assembly rules as [`Config::il_config`].
    pub fn ppo_config(&self) -> TrainPpoConfig {
        let s = self.train.ppo;
        TrainPpoConfig {
            updates: s.updates,
            episodes_per_update: s.episodes_per_update,
            epochs: s.epochs,
            clip: s.clip,
            gamma: s.gamma,
            gae_lambda: s.gae_lambda,
            entropy_weight: s.entropy_weight,
            value_weight: s.value_weight,
            lr: s.lr,
            max_steps: s.max_steps,
            min_goal_distance: s.min_goal_distance,
            gt_eps: self.gtruth.eps,
            seed: s.seed,
            reward: self.reward,
            obs: self.observation,
        }
    }

    /// Checks every section, including the cross-section couplings: the
    /// observation descriptor width must match the network's appearance
    /// input, and the network must classify exactly the world's classes.
    pub fn validate(&self) -> Result<()> {
        self.scene_gen.validate()?;
        self.observation.validate()?;
        if !(self.gtruth.eps.is_finite() && self.gtruth.eps > 0.0) {
            return Err(Error::arg(format!(
                "gtruth: eps must be positive, got {}",
                self.gtruth.eps
            )));
        }
        self.sgtn.validate()?;
        self.policy_hyper().validate()?;
        self.reward.validate()?;
        self.train.sgg.validate()?;
        self.il_config().validate()?;
        self.ppo_config().validate()?;
        self.eval.validate()?;
        if self.observation.d_v != self.sgtn.d_v {
            return Err(Error::arg(format!(
                "observation.d_v = {} but sgtn.d_v = {}; the appearance width must match",
                self.observation.d_v, self.sgtn.d_v
            )));
        }
        if self.sgtn.k != CLASS_COUNT {
            return Err(Error::arg(format!(
                "sgtn.k = {} but the world has {CLASS_COUNT} object classes",
                self.sgtn.k
            )));
        }
        Ok(())
    }

    /// Parses and validates a JSON document. Missing fields default;
    /// unknown keys are an error.
    pub fn from_json_str(s: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty-printed JSON with a trailing newline, suitable for echoing
    /// the effective configuration into an output directory.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Config> {
        let s = std::fs::read_to_string(path)?;
        Config::from_json_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_assemble_to_the_library_defaults() {
        let cfg = Config::default();
        assert_eq!(cfg.il_config(), TrainIlConfig::default());
        assert_eq!(cfg.ppo_config(), TrainPpoConfig::default());
        assert_eq!(cfg.train.sgg, TrainSggConfig::default());
        assert_eq!(cfg.policy_hyper(), PolicyHyper::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_document_is_the_default_config() {
        let cfg = Config::from_json_str("{}").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut cfg = Config::default();
        cfg.scene_gen.rooms = 2;
        cfg.observation.fov = 1.25;
        cfg.observation.d_v = 16;
        cfg.gtruth.eps = 0.08;
        cfg.sgtn.d = 16;
        cfg.sgtn.d_v = 16;
        cfg.sgtn.sigmas = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5];
        cfg.policy.hidden = 64;
        cfg.reward.step_penalty = -0.02;
        cfg.train.sgg.epochs = 7;
        cfg.train.il.lr = 3e-4;
        cfg.train.ppo.clip = 0.1;
        cfg.eval.episodes = 5;
        let json = cfg.to_json_string();
        let back = Config::from_json_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(json, back.to_json_string());
    }

    #[test]
    fn partial_document_fills_in_defaults() {
        let cfg =
            Config::from_json_str(r#"{"sgtn":{"d":16,"d_v":16},"observation":{"d_v":16}}"#)
                .unwrap();
        assert_eq!(cfg.sgtn.d, 16);
        assert_eq!(cfg.sgtn.gt_layers, SgtnHyper::default().gt_layers);
        assert_eq!(cfg.scene_gen, SceneGenConfig::default());
        assert_eq!(cfg.il_config().obs.d_v, 16);
        assert_eq!(cfg.policy_hyper().feat_dim, 32);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"bogus":1}"#,
            r#"{"scene_gen":{"rooms":2,"bogus":1}}"#,
            r#"{"train":{"il":{"lr":0.001,"bogus":1}}}"#,
            r#"{"train":{"bogus":{}}}"#,
            r#"{"eval":{"episodes":3,"success":true}}"#,
            r#"{"policy":{"feat_dim":64}}"#,
        ] {
            assert!(Config::from_json_str(doc).is_err(), "accepted {doc}");
        }
    }

    #[test]
    fn reward_and_eps_are_stated_once_and_shared() {
        let cfg = Config::from_json_str(
            r#"{"gtruth":{"eps":0.08},"reward":{"success_radius":0.3}}"#,
        )
        .unwrap();
        assert_eq!(cfg.il_config().gt_eps, 0.08);
        assert_eq!(cfg.ppo_config().gt_eps, 0.08);
        assert_eq!(cfg.il_config().reward.success_radius, 0.3);
        assert_eq!(cfg.ppo_config().reward.success_radius, 0.3);
    }

    #[test]
    fn invalid_sections_fail_validation() {
        for doc in [
            r#"{"scene_gen":{"rooms":0}}"#,
            r#"{"observation":{"fov":0.0}}"#,
            r#"{"observation":{"d_v":0},"sgtn":{"d_v":0}}"#,
            r#"{"gtruth":{"eps":0.0}}"#,
            r#"{"sgtn":{"gt_layers":0}}"#,
            r#"{"sgtn":{"k":9}}"#,
            r#"{"policy":{"hidden":0}}"#,
            r#"{"reward":{"success_radius":-1.0}}"#,
            r#"{"train":{"sgg":{"epochs":0}}}"#,
            r#"{"train":{"il":{"lr":-1.0}}}"#,
            r#"{"train":{"ppo":{"gae_lambda":1.5}}}"#,
            r#"{"eval":{"episodes":0}}"#,
            r#"{"observation":{"d_v":16}}"#,
        ] {
            assert!(Config::from_json_str(doc).is_err(), "validated {doc}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut cfg = Config::default();
        cfg.train.il.seed = 7;
        cfg.save(&path).unwrap();
        assert_eq!(Config::load(&path).unwrap(), cfg);
    }

    #[test]
    fn load_reports_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Config::load(&dir.path().join("absent.json")).is_err());
    }
}
