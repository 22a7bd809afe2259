//! Procedural scene generation: a lattice of rooms joined by doors,
//! walls along the lattice lines, and furniture sampled inside rooms
//! without ever disconnecting the free floor space.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    normalize_heading, Aabb, NavGrid, ObjectClass, Scene, SceneObject, Vec3, GRID_RES,
};

/// Knobs for [`generate_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    /// Number of rooms (regions).
    pub rooms: usize,
    /// Furniture items attempted per room.
    pub objects_per_room: usize,
    /// Interior side length of a room, in nav cells.
    pub room_cells: usize,
    /// Wall height, meters.
    pub wall_height: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig { rooms: 4, objects_per_room: 5, room_cells: 12, wall_height: 2.5 }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rooms == 0 {
            return Err(Error::Generation("rooms must be at least 1".into()));
        }
        if self.rooms > 64 {
            return Err(Error::Generation(format!(
                "rooms = {} exceeds the supported maximum of 64",
                self.rooms
            )));
        }
        if self.room_cells < 6 {
            return Err(Error::Generation(format!(
                "room_cells = {} is too small to furnish (minimum 6)",
                self.room_cells
            )));
        }
        if !(self.wall_height.is_finite() && self.wall_height > 1.5) {
            return Err(Error::Generation("wall_height must exceed 1.5 m".into()));
        }
        Ok(())
    }
}

const FLOOR_THICKNESS: f64 = 0.05;
const WALL_MOUNT_DEPTH: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 40;

/// Typical footprint (w, d) and height ranges per free-standing class.
fn furniture_dims(class: ObjectClass, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
    match class {
        ObjectClass::Table => (u(rng, 0.8, 1.6), u(rng, 0.6, 1.0), u(rng, 0.65, 0.8)),
        ObjectClass::Chair => (u(rng, 0.4, 0.6), u(rng, 0.4, 0.6), u(rng, 0.8, 1.0)),
        ObjectClass::Sofa => (u(rng, 1.4, 2.0), u(rng, 0.7, 1.0), u(rng, 0.7, 0.9)),
        ObjectClass::Bed => (u(rng, 1.4, 1.8), u(rng, 1.9, 2.1), u(rng, 0.5, 0.65)),
        ObjectClass::Plant => (u(rng, 0.3, 0.5), u(rng, 0.3, 0.5), u(rng, 0.8, 1.6)),
        _ => unreachable!("not a free-standing class"),
    }
}

const FREE_STANDING: [ObjectClass; 5] = [
    ObjectClass::Table,
    ObjectClass::Chair,
    ObjectClass::Sofa,
    ObjectClass::Bed,
    ObjectClass::Plant,
];

const WALL_MOUNTED: [ObjectClass; 2] = [ObjectClass::Picture, ObjectClass::Window];

/// Room slot in the lattice.
#[derive(Clone, Copy)]
struct Slot {
    sy: usize,
    sx: usize,
}

struct Layout {
    slots: Vec<Slot>,
    rooms_x: usize,
    rooms_y: usize,
    k: usize,
    rows: usize,
    cols: usize,
}

impl Layout {
    fn new(cfg: &SceneGenConfig) -> Result<Layout> {
        cfg.validate()?;
        let rooms_x = (cfg.rooms as f64).sqrt().ceil() as usize;
        let rooms_y = cfg.rooms.div_ceil(rooms_x);
        let k = cfg.room_cells;
        let slots = (0..cfg.rooms)
            .map(|i| Slot { sy: i / rooms_x, sx: i % rooms_x })
            .collect();
        Ok(Layout {
            slots,
            rooms_x,
            rooms_y,
            k,
            rows: rooms_y * (k + 1) + 1,
            cols: rooms_x * (k + 1) + 1,
        })
    }

    fn slot_index(&self, sy: usize, sx: usize) -> Option<usize> {
        if sx >= self.rooms_x || sy >= self.rooms_y {
            return None;
        }
        let i = sy * self.rooms_x + sx;
        (i < self.slots.len()).then_some(i)
    }

    /// Interior cell ranges of a slot: (r0..=r1, c0..=c1) inclusive.
    fn interior(&self, s: Slot) -> (usize, usize, usize, usize) {
        let r0 = s.sy * (self.k + 1) + 1;
        let c0 = s.sx * (self.k + 1) + 1;
        (r0, r0 + self.k - 1, c0, c0 + self.k - 1)
    }

    fn is_lattice(&self, r: usize, c: usize) -> bool {
        r % (self.k + 1) == 0 || c % (self.k + 1) == 0
    }
}

fn cell_box(origin: Vec3, r0: usize, r1: usize, c0: usize, c1: usize, y0: f64, y1: f64) -> Aabb {
    Aabb::new(
        Vec3::new(origin.x + c0 as f64 * GRID_RES, y0, origin.z + r0 as f64 * GRID_RES),
        Vec3::new(
            origin.x + (c1 + 1) as f64 * GRID_RES,
            y1,
            origin.z + (r1 + 1) as f64 * GRID_RES,
        ),
    )
}

/// 4-connected flood fill; returns the number of free cells reached from
/// the first free cell.
fn flood_count(grid: &NavGrid) -> usize {
    let start = match grid.free_cells().first().copied() {
        Some(s) => s,
        None => return 0,
    };
    let mut seen = vec![false; grid.rows * grid.cols];
    let mut stack = vec![start];
    seen[grid.idx(start.0, start.1)] = true;
    let mut count = 0;
    while let Some((r, c)) = stack.pop() {
        count += 1;
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbors {
            if nr < grid.rows && nc < grid.cols && grid.is_free(nr, nc) && !seen[grid.idx(nr, nc)]
            {
                seen[grid.idx(nr, nc)] = true;
                stack.push((nr, nc));
            }
        }
    }
    count
}

/// Block every cell the horizontal footprint overlaps.
fn block_footprint(grid: &mut NavGrid, aabb: &Aabb, blocked: bool) {
    let eps = 1e-9;
    let r0 = (((aabb.min.z - grid.origin.z) / grid.resolution) + eps).floor().max(0.0) as usize;
    let c0 = (((aabb.min.x - grid.origin.x) / grid.resolution) + eps).floor().max(0.0) as usize;
    let r1 = ((((aabb.max.z - grid.origin.z) / grid.resolution) - eps).ceil() as usize).min(grid.rows);
    let c1 = ((((aabb.max.x - grid.origin.x) / grid.resolution) - eps).ceil() as usize).min(grid.cols);
    for r in r0..r1 {
        for c in c0..c1 {
            grid.set_blocked(r, c, blocked);
        }
    }
}

/// Generate a deterministic scene from a seed and config.
///
/// Rooms sit on a `ceil(sqrt(rooms))`-wide lattice with one-cell-thick
/// walls; every pair of adjacent rooms is joined by a one-cell door in the
/// middle of their shared wall. Furniture is sampled per room and a
/// placement is rejected if it would disconnect the free floor space or
/// exhaust a room's free cells.
pub fn generate_scene(seed: u64, cfg: &SceneGenConfig) -> Result<Scene> {
    let layout = Layout::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = Vec3::zero();

    let mut grid = NavGrid::new(GRID_RES, origin, layout.rows, layout.cols);
    // Start fully blocked; open used-room interiors.
    for r in 0..layout.rows {
        for c in 0..layout.cols {
            grid.set_blocked(r, c, true);
        }
    }
    for &slot in &layout.slots {
        let (r0, r1, c0, c1) = layout.interior(slot);
        for r in r0..=r1 {
            for c in c0..=c1 {
                grid.set_blocked(r, c, false);
            }
        }
    }

    // Doors between every pair of adjacent used rooms, through the middle
    // of the shared wall.
    let mut door_cells: Vec<(usize, usize, u32)> = Vec::new(); // (r, c, region of lower-index room)
    for (i, &slot) in layout.slots.iter().enumerate() {
        // Right neighbor.
        if let Some(j) = layout.slot_index(slot.sy, slot.sx + 1) {
            debug_assert!(j > i);
            let wall_c = (slot.sx + 1) * (layout.k + 1);
            let r = slot.sy * (layout.k + 1) + 1 + layout.k / 2;
            grid.set_blocked(r, wall_c, false);
            door_cells.push((r, wall_c, i as u32));
        }
        // Below neighbor.
        if let Some(j) = layout.slot_index(slot.sy + 1, slot.sx) {
            debug_assert!(j > i);
            let wall_r = (slot.sy + 1) * (layout.k + 1);
            let c = slot.sx * (layout.k + 1) + 1 + layout.k / 2;
            grid.set_blocked(wall_r, c, false);
            door_cells.push((wall_r, c, i as u32));
        }
    }

    let mut objects: Vec<SceneObject> = Vec::new();
    let mut next_id: u32 = 0;
    let mut push = |objects: &mut Vec<SceneObject>, class, aabb: Aabb, region| {
        objects.push(SceneObject {
            id: next_id,
            class,
            aabb_min: aabb.min,
            aabb_max: aabb.max,
            region,
        });
        next_id += 1;
    };

    // Floors: one slab per used room, flush under the interior.
    for (i, &slot) in layout.slots.iter().enumerate() {
        let (r0, r1, c0, c1) = layout.interior(slot);
        let aabb = cell_box(origin, r0, r1, c0, c1, -FLOOR_THICKNESS, 0.0);
        push(&mut objects, ObjectClass::Floor, aabb, i as u32);
    }

    // Walls: maximal runs of blocked lattice cells. Horizontal lattice
    // lines claim their cells first (corners included); vertical lines
    // take what remains. Runs split at door cells and at unused-slot
    // interiors, and each run is owned by an adjacent used room when one
    // exists.
    let door_set: std::collections::BTreeSet<(usize, usize)> =
        door_cells.iter().map(|&(r, c, _)| (r, c)).collect();
    let mut claimed = vec![false; layout.rows * layout.cols];
    let owner_of = |r: usize, c: usize| -> u32 {
        // Prefer the room whose interior touches this wall cell; fall back
        // to region 0 for outer corners.
        let k1 = layout.k + 1;
        let candidates = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in candidates {
            if nr >= layout.rows || nc >= layout.cols || layout.is_lattice(nr, nc) {
                continue;
            }
            if let Some(i) = layout.slot_index(nr / k1, nc / k1) {
                return i as u32;
            }
        }
        0
    };

    // Horizontal lattice lines.
    for line in 0..=layout.rooms_y {
        let r = line * (layout.k + 1);
        let mut run_start: Option<(usize, u32)> = None;
        for c in 0..=layout.cols {
            let cell_wall = c < layout.cols && grid.is_blocked(r, c) && !door_set.contains(&(r, c));
            let owner = if cell_wall { owner_of(r, c) } else { 0 };
            match run_start {
                Some((start, run_owner)) if !cell_wall || owner != run_owner => {
                    let aabb = cell_box(origin, r, r, start, c - 1, 0.0, cfg.wall_height);
                    push(&mut objects, ObjectClass::Wall, aabb, run_owner);
                    for cc in start..c {
                        claimed[grid.idx(r, cc)] = true;
                    }
                    run_start = if cell_wall { Some((c, owner)) } else { None };
                }
                None if cell_wall => run_start = Some((c, owner)),
                _ => {}
            }
        }
    }
    // Vertical lattice lines, skipping cells already claimed above.
    for line in 0..=layout.rooms_x {
        let c = line * (layout.k + 1);
        let mut run_start: Option<(usize, u32)> = None;
        for r in 0..=layout.rows {
            let cell_wall = r < layout.rows
                && grid.is_blocked(r, c)
                && !door_set.contains(&(r, c))
                && !claimed[grid.idx(r, c)];
            let owner = if cell_wall { owner_of(r, c) } else { 0 };
            match run_start {
                Some((start, run_owner)) if !cell_wall || owner != run_owner => {
                    let aabb = cell_box(origin, start, r - 1, c, c, 0.0, cfg.wall_height);
                    push(&mut objects, ObjectClass::Wall, aabb, run_owner);
                    run_start = if cell_wall { Some((r, owner)) } else { None };
                }
                None if cell_wall => run_start = Some((r, owner)),
                _ => {}
            }
        }
    }

    // Door objects: a frame-height slab over the door cell.
    for &(r, c, region) in &door_cells {
        let aabb = cell_box(origin, r, r, c, c, 0.0, 2.1);
        push(&mut objects, ObjectClass::Door, aabb, region);
    }

    // Furniture. Free-standing pieces block the grid; wall-mounted pieces
    // (pictures, windows) sit flush against an interior wall face and do
    // not block.
    for (i, &slot) in layout.slots.iter().enumerate() {
        let region = i as u32;
        let (r0, r1, c0, c1) = layout.interior(slot);
        let x_lo = origin.x + c0 as f64 * GRID_RES;
        let x_hi = origin.x + (c1 + 1) as f64 * GRID_RES;
        let z_lo = origin.z + r0 as f64 * GRID_RES;
        let z_hi = origin.z + (r1 + 1) as f64 * GRID_RES;
        let room_free: Vec<(usize, usize)> = (r0..=r1)
            .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
            .collect();
        let count_room_free = |grid: &NavGrid| -> usize {
            room_free.iter().filter(|&&(r, c)| grid.is_free(r, c)).count()
        };
        let mut placed_standing: Vec<Aabb> = Vec::new();
        let mut placed_mounted: Vec<Aabb> = Vec::new();

        for _ in 0..cfg.objects_per_room {
            // Weight free-standing twice as often as wall-mounted.
            let class = if rng.random_range(0..3) < 2 {
                FREE_STANDING[rng.random_range(0..FREE_STANDING.len())]
            } else {
                WALL_MOUNTED[rng.random_range(0..WALL_MOUNTED.len())]
            };
            if WALL_MOUNTED.contains(&class) {
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let w = rng.random_range(0.5..1.2);
                    let (y0, y1) = match class {
                        ObjectClass::Window => (0.9, 0.9 + rng.random_range(0.8..1.2)),
                        _ => {
                            let h = rng.random_range(0.4..0.8);
                            let y0 = rng.random_range(1.1..1.4);
                            (y0, y0 + h)
                        }
                    };
                    let side = rng.random_range(0..4);
                    let along = rng.random_range(0.0..1.0);
                    let aabb = match side {
                        // North wall (min z edge): protrudes into the room.
                        0 => {
                            let x = x_lo + along * ((x_hi - x_lo) - w);
                            Aabb::new(
                                Vec3::new(x, y0, z_lo),
                                Vec3::new(x + w, y1, z_lo + WALL_MOUNT_DEPTH),
                            )
                        }
                        1 => {
                            let x = x_lo + along * ((x_hi - x_lo) - w);
                            Aabb::new(
                                Vec3::new(x, y0, z_hi - WALL_MOUNT_DEPTH),
                                Vec3::new(x + w, y1, z_hi),
                            )
                        }
                        2 => {
                            let z = z_lo + along * ((z_hi - z_lo) - w);
                            Aabb::new(
                                Vec3::new(x_lo, y0, z),
                                Vec3::new(x_lo + WALL_MOUNT_DEPTH, y1, z + w),
                            )
                        }
                        _ => {
                            let z = z_lo + along * ((z_hi - z_lo) - w);
                            Aabb::new(
                                Vec3::new(x_hi - WALL_MOUNT_DEPTH, y0, z),
                                Vec3::new(x_hi, y1, z + w),
                            )
                        }
                    };
                    if placed_mounted.iter().any(|p| p.overlaps_xz(&aabb)) {
                        continue;
                    }
                    placed_mounted.push(aabb);
                    push(&mut objects, class, aabb, region);
                    break;
                }
            } else {
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let (w, d, h) = furniture_dims(class, &mut rng);
                    let margin = 0.05;
                    if x_hi - x_lo <= w + 2.0 * margin || z_hi - z_lo <= d + 2.0 * margin {
                        continue;
                    }
                    let cx = rng.random_range((x_lo + w / 2.0 + margin)..(x_hi - w / 2.0 - margin));
                    let cz = rng.random_range((z_lo + d / 2.0 + margin)..(z_hi - d / 2.0 - margin));
                    let aabb = Aabb::new(
                        Vec3::new(cx - w / 2.0, 0.0, cz - d / 2.0),
                        Vec3::new(cx + w / 2.0, h, cz + d / 2.0),
                    );
                    if placed_standing.iter().any(|p| p.overlaps_xz(&aabb)) {
                        continue;
                    }
                    let free_before = flood_count(&grid);
                    let total_before = grid.free_cells().len();
                    debug_assert_eq!(free_before, total_before, "free space must stay connected");
                    block_footprint(&mut grid, &aabb, true);
                    let total_after = grid.free_cells().len();
                    let connected_after = flood_count(&grid);
                    // Reject placements that disconnect free space or
                    // leave the room without floor to stand on.
                    if connected_after != total_after || count_room_free(&grid) < 4 {
                        block_footprint(&mut grid, &aabb, false);
                        // Restore cells that were already blocked by other
                        // furniture overlapping is excluded above, walls are
                        // outside the interior, so a plain unblock is safe.
                        continue;
                    }
                    placed_standing.push(aabb);
                    push(&mut objects, class, aabb, region);
                    break;
                }
            }
        }
    }

    let bounds = Aabb::new(
        Vec3::new(origin.x, -FLOOR_THICKNESS, origin.z),
        Vec3::new(
            origin.x + layout.cols as f64 * GRID_RES,
            cfg.wall_height.max(2.1),
            origin.z + layout.rows as f64 * GRID_RES,
        ),
    );
    let scene = Scene {
        seed,
        bounds,
        regions: cfg.rooms as u32,
        objects,
        nav_grid: grid,
    };
    scene.validate()?;
    Ok(scene)
}

/// Sample a free-cell-center pose with a random axis-aligned heading.
pub fn sample_free_pose(scene: &Scene, rng: &mut ChaCha8Rng) -> Result<super::AgentPose> {
    let free = scene.nav_grid.free_cells();
    if free.is_empty() {
        return Err(Error::Generation("scene has no free cells".into()));
    }
    let (r, c) = free[rng.random_range(0..free.len())];
    let (x, z) = scene.nav_grid.cell_center(r, c);
    let heading = normalize_heading(rng.random_range(0..24) as f64 * super::TURN_INCREMENT);
    Ok(super::AgentPose::new(
        Vec3::new(x, super::AGENT_EYE_HEIGHT, z),
        heading,
    ))
}
