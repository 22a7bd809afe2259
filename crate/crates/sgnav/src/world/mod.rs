//! Procedural synthetic 3D indoor environment: scenes of semantic AABB
//! objects over a navigable floor grid, agent kinematics, frustum
//! observations, geodesic distances and expert shortest paths.
//!
//! World frame: y is up, the floor lives in the x-z plane. Heading 0 points
//! along +x and turning left increases the heading. The nav grid maps rows
//! to z and columns to x at a fixed 0.25 m resolution, the same lattice the
//! forward step uses.

mod agent;
mod gen;
mod nav;

pub use agent::{class_prototypes, observe, step_pose, visible_objects, ActuationNoise, ObsConfig};
pub use gen::{generate_scene, sample_free_pose, SceneGenConfig};
pub use nav::{
    distance_field, expert_actions, geodesic_distance, shortest_cell_path, DistanceField,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid resolution and forward-step length, meters.
pub const GRID_RES: f64 = 0.25;
/// Turn increment, radians (15 degrees).
pub const TURN_INCREMENT: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// Eye height the agent observes from, meters.
pub const AGENT_EYE_HEIGHT: f64 = 1.25;
/// Episode step budget.
pub const MAX_EPISODE_STEPS: usize = 500;
/// Goal radius for navigation success, meters.
pub const SUCCESS_RADIUS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3 { x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    /// Distance in the horizontal (x-z) plane.
    pub fn dist_xz(self, o: Vec3) -> f64 {
        let dx = self.x - o.x;
        let dz = self.z - o.z;
        (dx * dx + dz * dz).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn center(&self) -> Vec3 {
        self.min.add(self.max).scale(0.5)
    }

    pub fn extents(&self) -> Vec3 {
        self.max.sub(self.min)
    }

    pub fn is_valid(&self) -> bool {
        self.min.x < self.max.x && self.min.y < self.max.y && self.min.z < self.max.z
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        self.min.x <= other.min.x
            && self.min.y <= other.min.y
            && self.min.z <= other.min.z
            && self.max.x >= other.max.x
            && self.max.y >= other.max.y
            && self.max.z >= other.max.z
    }

    /// Overlap in the horizontal plane, ignoring y.
    pub fn overlaps_xz(&self, other: &Aabb) -> bool {
        self.min.x < other.max.x
            && other.min.x < self.max.x
            && self.min.z < other.max.z
            && other.min.z < self.max.z
    }

    /// Centers of the six faces.
    pub fn face_centers(&self) -> [Vec3; 6] {
        let c = self.center();
        [
            Vec3::new(self.min.x, c.y, c.z),
            Vec3::new(self.max.x, c.y, c.z),
            Vec3::new(c.x, self.min.y, c.z),
            Vec3::new(c.x, self.max.y, c.z),
            Vec3::new(c.x, c.y, self.min.z),
            Vec3::new(c.x, c.y, self.max.z),
        ]
    }
}

/// The fixed semantic class table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ObjectClass {
    Floor,
    Wall,
    Door,
    Window,
    Table,
    Chair,
    Sofa,
    Bed,
    Picture,
    Plant,
}

pub const CLASS_COUNT: usize = 10;

pub const ALL_CLASSES: [ObjectClass; CLASS_COUNT] = [
    ObjectClass::Floor,
    ObjectClass::Wall,
    ObjectClass::Door,
    ObjectClass::Window,
    ObjectClass::Table,
    ObjectClass::Chair,
    ObjectClass::Sofa,
    ObjectClass::Bed,
    ObjectClass::Picture,
    ObjectClass::Plant,
];

impl ObjectClass {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Floor => "floor",
            ObjectClass::Wall => "wall",
            ObjectClass::Door => "door",
            ObjectClass::Window => "window",
            ObjectClass::Table => "table",
            ObjectClass::Chair => "chair",
            ObjectClass::Sofa => "sofa",
            ObjectClass::Bed => "bed",
            ObjectClass::Picture => "picture",
            ObjectClass::Plant => "plant",
        }
    }
}

impl TryFrom<u8> for ObjectClass {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        ALL_CLASSES
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::arg(format!("class id {v} out of range")))
    }
}

impl From<ObjectClass> for u8 {
    fn from(c: ObjectClass) -> u8 {
        c as u8
    }
}

/// One semantic object in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub class: ObjectClass,
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
    pub region: u32,
}

impl SceneObject {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.aabb_min, self.aabb_max)
    }
}

/// Occupancy grid over the floor plane. Rows index z, columns index x.
#[derive(Debug, Clone, PartialEq)]
pub struct NavGrid {
    pub resolution: f64,
    /// World (x, z) of the corner of cell (0, 0); origin.y is the floor height.
    pub origin: Vec3,
    pub rows: usize,
    pub cols: usize,
    blocked: Vec<bool>,
}

impl NavGrid {
    pub fn new(resolution: f64, origin: Vec3, rows: usize, cols: usize) -> Self {
        NavGrid { resolution, origin, rows, cols, blocked: vec![false; rows * cols] }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[self.idx(r, c)]
    }

    pub fn set_blocked(&mut self, r: usize, c: usize, v: bool) {
        let i = self.idx(r, c);
        self.blocked[i] = v;
    }

    pub fn is_free(&self, r: usize, c: usize) -> bool {
        !self.is_blocked(r, c)
    }

    /// Cell containing the world point, or None if out of bounds.
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.x) / self.resolution).floor();
        let r = ((z - self.origin.z) / self.resolution).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// World (x, z) of a cell center.
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.origin.x + (c as f64 + 0.5) * self.resolution,
            self.origin.z + (r as f64 + 0.5) * self.resolution,
        )
    }

    /// True if the world point lies over a free in-bounds cell.
    pub fn is_free_at(&self, x: f64, z: f64) -> bool {
        match self.cell_of(x, z) {
            Some((r, c)) => self.is_free(r, c),
            None => false,
        }
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.is_free(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn blocked_bits(&self) -> &[bool] {
        &self.blocked
    }

    /// Run-length encode the blocked bitmask, starting with a free run
    /// (possibly of length 0).
    pub fn rle_blocked(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len: u32 = 0;
        for &b in &self.blocked {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(
        resolution: f64,
        origin: Vec3,
        rows: usize,
        cols: usize,
        runs: &[u32],
    ) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (rows * cols) as u64 {
            return Err(Error::Parse(format!(
                "nav grid RLE covers {total} cells, expected {}",
                rows * cols
            )));
        }
        let mut blocked = Vec::with_capacity(rows * cols);
        let mut current = false;
        for &run in runs {
            blocked.extend(std::iter::repeat(current).take(run as usize));
            current = !current;
        }
        Ok(NavGrid { resolution, origin, rows, cols, blocked })
    }
}

/// Immutable world: objects, regions, and the navigable floor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub bounds: Aabb,
    pub regions: u32,
    pub objects: Vec<SceneObject>,
    pub nav_grid: NavGrid,
}

const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NavGridFile {
    resolution: f64,
    origin: Vec3,
    rows: usize,
    cols: usize,
    blocked: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    seed: u64,
    bounds: Aabb,
    regions: u32,
    objects: Vec<SceneObject>,
    nav_grid: NavGridFile,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Canonical JSON encoding; field order is fixed so equal scenes
    /// serialize byte-identically.
    pub fn to_json_string(&self) -> String {
        let file = SceneFile {
            version: SCENE_FORMAT_VERSION,
            seed: self.seed,
            bounds: self.bounds,
            regions: self.regions,
            objects: self.objects.clone(),
            nav_grid: NavGridFile {
                resolution: self.nav_grid.resolution,
                origin: self.nav_grid.origin,
                rows: self.nav_grid.rows,
                cols: self.nav_grid.cols,
                blocked: self.nav_grid.rle_blocked(),
            },
        };
        serde_json::to_string(&file).expect("scene serialization cannot fail")
    }

    /// Parse and validate a scene from its JSON encoding.
    pub fn from_json_str(s: &str) -> Result<Scene> {
        let file: SceneFile = serde_json::from_str(s)?;
        if file.version != SCENE_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported scene format version {}",
                file.version
            )));
        }
        if !(file.nav_grid.resolution.is_finite() && file.nav_grid.resolution > 0.0) {
            return Err(Error::Parse("nav grid resolution must be positive".into()));
        }
        if file.nav_grid.rows == 0
            || file.nav_grid.cols == 0
            || file.nav_grid.rows.saturating_mul(file.nav_grid.cols) > 16_000_000
        {
            return Err(Error::Parse(format!(
                "nav grid {}x{} out of range",
                file.nav_grid.rows, file.nav_grid.cols
            )));
        }
        let nav_grid = NavGrid::from_rle(
            file.nav_grid.resolution,
            file.nav_grid.origin,
            file.nav_grid.rows,
            file.nav_grid.cols,
            &file.nav_grid.blocked,
        )?;
        let scene = Scene {
            seed: file.seed,
            bounds: file.bounds,
            regions: file.regions,
            objects: file.objects,
            nav_grid,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Scene> {
        let s = std::fs::read_to_string(path)?;
        Scene::from_json_str(&s)
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.bounds.is_valid() || !self.bounds.min.is_finite() || !self.bounds.max.is_finite()
        {
            return Err(Error::Parse("invalid scene bounds".into()));
        }
        let mut seen_ids = std::collections::BTreeSet::new();
        for obj in &self.objects {
            let aabb = obj.aabb();
            if !aabb.is_valid() || !aabb.min.is_finite() || !aabb.max.is_finite() {
                return Err(Error::Parse(format!("object {} has invalid AABB", obj.id)));
            }
            if !self.bounds.contains(&aabb) {
                return Err(Error::Parse(format!(
                    "object {} extends outside scene bounds",
                    obj.id
                )));
            }
            if obj.region >= self.regions {
                return Err(Error::Parse(format!(
                    "object {} region {} out of range",
                    obj.id, obj.region
                )));
            }
            if !seen_ids.insert(obj.id) {
                return Err(Error::Parse(format!("duplicate object id {}", obj.id)));
            }
        }
        // Walls must block the cells under them.
        for obj in &self.objects {
            if obj.class != ObjectClass::Wall {
                continue;
            }
            let g = &self.nav_grid;
            let eps = 1e-9;
            let r0 = ((obj.aabb_min.z - g.origin.z) / g.resolution + eps).floor().max(0.0) as usize;
            let c0 = ((obj.aabb_min.x - g.origin.x) / g.resolution + eps).floor().max(0.0) as usize;
            let r1 = (((obj.aabb_max.z - g.origin.z) / g.resolution) - eps).ceil() as usize;
            let c1 = (((obj.aabb_max.x - g.origin.x) / g.resolution) - eps).ceil() as usize;
            for r in r0..r1.min(g.rows) {
                for c in c0..c1.min(g.cols) {
                    if g.is_free(r, c) {
                        return Err(Error::Parse(format!(
                            "free nav cell ({r},{c}) under wall object {}",
                            obj.id
                        )));
                    }
                }
            }
        }
        // Every region keeps at least one free cell: check via region floor areas.
        if self.regions > 0 {
            let mut region_has_free = vec![false; self.regions as usize];
            for obj in &self.objects {
                if obj.class != ObjectClass::Floor {
                    continue;
                }
                let g = &self.nav_grid;
                for (r, c) in g.free_cells() {
                    let (x, z) = g.cell_center(r, c);
                    if x > obj.aabb_min.x
                        && x < obj.aabb_max.x
                        && z > obj.aabb_min.z
                        && z < obj.aabb_max.z
                    {
                        region_has_free[obj.region as usize] = true;
                        break;
                    }
                }
            }
            for (region, has) in region_has_free.iter().enumerate() {
                let region_exists = self
                    .objects
                    .iter()
                    .any(|o| o.class == ObjectClass::Floor && o.region == region as u32);
                if region_exists && !has {
                    return Err(Error::Parse(format!("region {region} has no free cell")));
                }
            }
        }
        Ok(())
    }
}

/// Agent position and heading. Heading is radians in [0, 2pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPose {
    pub position: Vec3,
    pub heading: f64,
}

impl AgentPose {
    pub fn new(position: Vec3, heading: f64) -> Self {
        AgentPose { position, heading: normalize_heading(heading) }
    }

    /// Unit forward vector in the horizontal plane.
    pub fn forward(&self) -> Vec3 {
        Vec3::new(self.heading.cos(), 0.0, self.heading.sin())
    }

    /// Unit lateral vector (left of forward).
    pub fn lateral(&self) -> Vec3 {
        Vec3::new(-self.heading.sin(), 0.0, self.heading.cos())
    }

    /// World point expressed in the agent frame: x lateral, y up, z forward.
    pub fn world_to_agent(&self, p: Vec3) -> Vec3 {
        let d = p.sub(self.position);
        let f = self.forward();
        let l = self.lateral();
        Vec3::new(
            d.x * l.x + d.z * l.z,
            d.y,
            d.x * f.x + d.z * f.z,
        )
    }

    /// Inverse of [`AgentPose::world_to_agent`].
    pub fn agent_to_world(&self, p: Vec3) -> Vec3 {
        let f = self.forward();
        let l = self.lateral();
        Vec3::new(
            self.position.x + p.x * l.x + p.z * f.x,
            self.position.y + p.y,
            self.position.z + p.x * l.z + p.z * f.z,
        )
    }
}

/// Wrap a heading into [0, 2pi).
pub fn normalize_heading(h: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = h % two_pi;
    if out < 0.0 {
        out += two_pi;
    }
    out
}

/// Wrap an angle difference into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = (a + std::f64::consts::PI) % two_pi;
    if out < 0.0 {
        out += two_pi;
    }
    out - std::f64::consts::PI
}

/// The discrete action set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

pub const ACTION_COUNT: usize = 4;

pub const ALL_ACTIONS: [Action; ACTION_COUNT] =
    [Action::MoveForward, Action::TurnLeft, Action::TurnRight, Action::Stop];

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        ALL_ACTIONS.get(i).copied()
    }
}

/// One observed region of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub object_id: u32,
    /// Ground-truth class, carried for supervision only.
    pub class: ObjectClass,
    pub appearance: Vec<f64>,
    pub est_dims: Vec3,
    pub est_pos: Vec3,
}

/// Per-step set of visible object ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub rois: Vec<Roi>,
    pub pose: AgentPose,
}
