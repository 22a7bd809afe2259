//! Agent kinematics and frustum observation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use super::{
    normalize_heading, wrap_angle, Action, AgentPose, Observation, ObjectClass, Roi, Scene,
    Vec3, ALL_CLASSES, GRID_RES, TURN_INCREMENT,
};
use crate::error::{Error, Result};

/// Optional Gaussian actuation noise, standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuationNoise {
    /// Meters, added to the forward step length.
    pub sigma_forward: f64,
    /// Radians, added to the turn increment.
    pub sigma_turn: f64,
}

impl ActuationNoise {
    pub const NONE: ActuationNoise = ActuationNoise { sigma_forward: 0.0, sigma_turn: 0.0 };
}

impl Default for ActuationNoise {
    fn default() -> Self {
        ActuationNoise::NONE
    }
}

/// Observation parameters: frustum shape, descriptor width, noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsConfig {
    /// Horizontal field of view, radians.
    pub fov: f64,
    /// Frustum range, meters.
    pub max_range: f64,
    /// Appearance descriptor width d_V.
    pub d_v: usize,
    /// Dimension-estimate noise sigma, meters per axis.
    pub sigma_dims: f64,
    /// Position-estimate noise sigma, meters per axis.
    pub sigma_pos: f64,
    /// Appearance noise sigma per component.
    pub sigma_app: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig {
            fov: 90.0f64.to_radians(),
            max_range: 5.0,
            d_v: 32,
            sigma_dims: 0.0,
            sigma_pos: 0.0,
            sigma_app: 0.0,
        }
    }
}

impl ObsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < 2.0 * std::f64::consts::PI) {
            return Err(Error::arg(format!("fov must be in (0, 2*pi) radians, got {}", self.fov)));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(Error::arg(format!("max_range must be positive, got {}", self.max_range)));
        }
        if self.d_v == 0 {
            return Err(Error::arg("d_v must be at least 1"));
        }
        for (name, s) in [
            ("sigma_dims", self.sigma_dims),
            ("sigma_pos", self.sigma_pos),
            ("sigma_app", self.sigma_app),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::arg(format!("{name} must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }
}

/// Advance the pose by one action. A forward step into a blocked or
/// out-of-bounds cell is a silent no-op (no sliding); turning is always
/// legal; Stop leaves the pose unchanged.
pub fn step_pose<R: Rng>(
    scene: &Scene,
    pose: AgentPose,
    action: Action,
    noise: ActuationNoise,
    rng: &mut R,
) -> AgentPose {
    match action {
        Action::Stop => pose,
        Action::TurnLeft | Action::TurnRight => {
            let mut delta = TURN_INCREMENT;
            if noise.sigma_turn > 0.0 {
                delta += noise.sigma_turn * rng.sample::<f64, _>(StandardNormal);
            }
            if action == Action::TurnRight {
                delta = -delta;
            }
            AgentPose { position: pose.position, heading: normalize_heading(pose.heading + delta) }
        }
        Action::MoveForward => {
            let mut dist = GRID_RES;
            if noise.sigma_forward > 0.0 {
                dist += noise.sigma_forward * rng.sample::<f64, _>(StandardNormal);
                dist = dist.max(0.0);
            }
            let target = pose.position.add(pose.forward().scale(dist));
            if scene.nav_grid.is_free_at(target.x, target.z) {
                AgentPose { position: target, heading: pose.heading }
            } else {
                pose
            }
        }
    }
}

/// Ids of the objects inside the horizontal view frustum, ordered by id.
///
/// An object is visible iff its AABB center lies within `max_range` of the
/// agent and within `±fov/2` of the heading in the horizontal plane. Floors
/// are excluded and there is no occlusion test.
pub fn visible_objects(scene: &Scene, pose: AgentPose, fov: f64, max_range: f64) -> Vec<u32> {
    debug_assert!(fov > 0.0 && fov < 2.0 * std::f64::consts::PI);
    debug_assert!(max_range > 0.0);
    let mut out = Vec::new();
    for obj in &scene.objects {
        if obj.class == ObjectClass::Floor {
            continue;
        }
        let center = obj.aabb().center();
        let dx = center.x - pose.position.x;
        let dz = center.z - pose.position.z;
        let dist = (dx * dx + dz * dz).sqrt();
        if dist > max_range {
            continue;
        }
        let angle = wrap_angle(dz.atan2(dx) - pose.heading);
        if angle.abs() <= fov / 2.0 {
            out.push(obj.id);
        }
    }
    out.sort_unstable();
    out
}

/// Fixed per-class appearance prototypes: `d_v` standard-normal components
/// per class, drawn once from seed 0 in class-table order.
pub fn class_prototypes(d_v: usize) -> &'static [Vec<f64>] {
    static CACHE: OnceLock<Mutex<BTreeMap<usize, &'static [Vec<f64>]>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut map = cache.lock().expect("prototype cache poisoned");
    if let Some(p) = map.get(&d_v) {
        return p;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let protos: Vec<Vec<f64>> = ALL_CLASSES
        .iter()
        .map(|_| (0..d_v).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let leaked: &'static [Vec<f64>] = Box::leak(protos.into_boxed_slice());
    map.insert(d_v, leaked);
    leaked
}

/// Observe the scene from a pose: one ROI per frustum-visible object, with
/// noisy dimension, position, and appearance estimates.
///
/// `est_pos` is the agent-frame location of the AABB face center nearest
/// the agent (x lateral-left, y up, z forward). Noise draws per ROI happen
/// in a fixed order (dims, pos, appearance) so observations are
/// deterministic in the rng state.
pub fn observe<R: Rng>(scene: &Scene, pose: AgentPose, cfg: &ObsConfig, rng: &mut R) -> Observation {
    let protos = class_prototypes(cfg.d_v);
    let ids = visible_objects(scene, pose, cfg.fov, cfg.max_range);
    let mut rois = Vec::with_capacity(ids.len());
    for id in ids {
        let obj = scene.object(id).expect("visible id exists");
        let aabb = obj.aabb();
        let extents = aabb.extents();
        let mut est_dims = extents;
        if cfg.sigma_dims > 0.0 {
            let n = Normal::new(0.0, cfg.sigma_dims).expect("sigma_dims finite");
            est_dims = Vec3::new(
                (extents.x + n.sample(rng)).max(1e-3),
                (extents.y + n.sample(rng)).max(1e-3),
                (extents.z + n.sample(rng)).max(1e-3),
            );
        }
        let nearest = aabb
            .face_centers()
            .into_iter()
            .min_by(|a, b| {
                a.dist(pose.position)
                    .partial_cmp(&b.dist(pose.position))
                    .expect("face distances are finite")
            })
            .expect("six faces");
        let mut est_pos = pose.world_to_agent(nearest);
        if cfg.sigma_pos > 0.0 {
            let n = Normal::new(0.0, cfg.sigma_pos).expect("sigma_pos finite");
            est_pos = Vec3::new(
                est_pos.x + n.sample(rng),
                est_pos.y + n.sample(rng),
                est_pos.z + n.sample(rng),
            );
        }
        let mut appearance = protos[obj.class.id()].clone();
        if cfg.sigma_app > 0.0 {
            let n = Normal::new(0.0, cfg.sigma_app).expect("sigma_app finite");
            for a in &mut appearance {
                *a += n.sample(rng);
            }
        }
        rois.push(Roi { object_id: id, class: obj.class, appearance, est_dims, est_pos });
    }
    Observation { rois, pose }
}
