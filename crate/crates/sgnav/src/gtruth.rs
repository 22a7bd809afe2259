//! Geometry-supervised scene-graph ground truth: four relation types
//! (co-planarity along each world axis, shared region) derived directly
//! from object AABBs, per-view restriction, and episode-level coverage
//! accounting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{ObjectClass, Scene};

/// Relation vocabulary for graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    CoplanarX,
    CoplanarY,
    CoplanarZ,
    SameRegion,
}

pub const EDGE_TYPE_COUNT: usize = 4;

pub const ALL_EDGE_TYPES: [EdgeType; EDGE_TYPE_COUNT] =
    [EdgeType::CoplanarX, EdgeType::CoplanarY, EdgeType::CoplanarZ, EdgeType::SameRegion];

impl EdgeType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EdgeType> {
        ALL_EDGE_TYPES.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::CoplanarX => "coplanar_x",
            EdgeType::CoplanarY => "coplanar_y",
            EdgeType::CoplanarZ => "coplanar_z",
            EdgeType::SameRegion => "same_region",
        }
    }
}

/// Ground-truth graph over a set of objects: multi-label edges, symmetric,
/// with an empty diagonal. Nodes are kept in ascending object-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphGT {
    pub node_ids: Vec<u32>,
    pub node_classes: Vec<ObjectClass>,
    /// Dense N x N x 4 labels, index ((i * n) + j) * 4 + t.
    labels: Vec<bool>,
}

impl SceneGraphGT {
    pub fn empty(node_ids: Vec<u32>, node_classes: Vec<ObjectClass>) -> SceneGraphGT {
        assert_eq!(node_ids.len(), node_classes.len());
        let n = node_ids.len();
        SceneGraphGT { node_ids, node_classes, labels: vec![false; n * n * EDGE_TYPE_COUNT] }
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    #[inline]
    fn at(&self, i: usize, j: usize, t: EdgeType) -> usize {
        (i * self.n() + j) * EDGE_TYPE_COUNT + t.index()
    }

    pub fn label(&self, i: usize, j: usize, t: EdgeType) -> bool {
        self.labels[self.at(i, j, t)]
    }

    /// Set a label on both (i, j) and (j, i); the diagonal stays false.
    pub fn set_label(&mut self, i: usize, j: usize, t: EdgeType, v: bool) {
        if i == j {
            return;
        }
        let a = self.at(i, j, t);
        let b = self.at(j, i, t);
        self.labels[a] = v;
        self.labels[b] = v;
    }

    /// Position of an object id among the nodes.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.node_ids.iter().position(|&x| x == id)
    }

    /// All true edges as (min id, max id, type), sorted.
    pub fn edge_triples(&self) -> Vec<(u32, u32, EdgeType)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                for t in ALL_EDGE_TYPES {
                    if self.label(i, j, t) {
                        let (a, b) = (self.node_ids[i].min(self.node_ids[j]),
                                      self.node_ids[i].max(self.node_ids[j]));
                        out.push((a, b, t));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn edge_count(&self) -> usize {
        let n = self.n();
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                for t in ALL_EDGE_TYPES {
                    if self.label(i, j, t) {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

/// Extract the full ground-truth graph of a scene.
///
/// For each unordered pair and axis A, the pair is co-planar along A when
/// any of the four face-coordinate combinations (min/max of one against
/// min/max of the other) differ by less than `eps`. SameRegion holds when
/// the region ids match.
pub fn extract_gt(scene: &Scene, eps: f64) -> Result<SceneGraphGT> {
    if !(eps > 0.0) {
        return Err(Error::arg(format!("eps must be positive, got {eps}")));
    }
    let mut objects: Vec<_> = scene.objects.iter().collect();
    objects.sort_by_key(|o| o.id);
    let node_ids: Vec<u32> = objects.iter().map(|o| o.id).collect();
    let node_classes: Vec<ObjectClass> = objects.iter().map(|o| o.class).collect();
    let mut gt = SceneGraphGT::empty(node_ids, node_classes);
    for i in 0..objects.len() {
        for j in (i + 1)..objects.len() {
            let (a, b) = (objects[i], objects[j]);
            let axes = [
                (EdgeType::CoplanarX, [a.aabb_min.x, a.aabb_max.x], [b.aabb_min.x, b.aabb_max.x]),
                (EdgeType::CoplanarY, [a.aabb_min.y, a.aabb_max.y], [b.aabb_min.y, b.aabb_max.y]),
                (EdgeType::CoplanarZ, [a.aabb_min.z, a.aabb_max.z], [b.aabb_min.z, b.aabb_max.z]),
            ];
            for (t, fa, fb) in axes {
                let close =
                    fa.iter().any(|&p| fb.iter().any(|&q| (p - q).abs() < eps));
                gt.set_label(i, j, t, close);
            }
            gt.set_label(i, j, EdgeType::SameRegion, a.region == b.region);
        }
    }
    Ok(gt)
}

/// Restrict a graph to a subset of its nodes, reordered by ascending id.
pub fn visible_subgraph(gt: &SceneGraphGT, visible: &[u32]) -> Result<SceneGraphGT> {
    let mut ids: Vec<u32> = visible.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let positions: Vec<usize> = ids
        .iter()
        .map(|&id| {
            gt.index_of(id)
                .ok_or_else(|| Error::arg(format!("object id {id} not in graph")))
        })
        .collect::<Result<_>>()?;
    let classes: Vec<ObjectClass> = positions.iter().map(|&p| gt.node_classes[p]).collect();
    let mut sub = SceneGraphGT::empty(ids, classes);
    for (si, &pi) in positions.iter().enumerate() {
        for (sj, &pj) in positions.iter().enumerate().skip(si + 1) {
            for t in ALL_EDGE_TYPES {
                sub.set_label(si, sj, t, gt.label(pi, pj, t));
            }
        }
    }
    Ok(sub)
}

/// Running record of how much of the full scene graph an episode has seen.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageState {
    seen_nodes: BTreeSet<u32>,
    seen_edges: BTreeSet<(u32, u32, EdgeType)>,
    all_nodes: BTreeSet<u32>,
    all_edges: BTreeSet<(u32, u32, EdgeType)>,
}

impl CoverageState {
    pub fn new(full: &SceneGraphGT) -> CoverageState {
        CoverageState {
            seen_nodes: BTreeSet::new(),
            seen_edges: BTreeSet::new(),
            all_nodes: full.node_ids.iter().copied().collect(),
            all_edges: full.edge_triples().into_iter().collect(),
        }
    }

    /// Fraction of nodes plus edges seen so far, in [0, 1].
    pub fn coverage(&self) -> f64 {
        let total = self.all_nodes.len() + self.all_edges.len();
        if total == 0 {
            return 0.0;
        }
        (self.seen_nodes.len() + self.seen_edges.len()) as f64 / total as f64
    }

    pub fn seen_node_count(&self) -> usize {
        self.seen_nodes.len()
    }

    pub fn seen_edge_count(&self) -> usize {
        self.seen_edges.len()
    }

    /// Fold one observed subgraph into the state; returns the coverage
    /// increase (never negative). Nodes or edges outside the full graph
    /// are ignored, keeping the seen sets subsets of the totals.
    pub fn update(&mut self, obs: &SceneGraphGT) -> f64 {
        let before = self.coverage();
        for &id in &obs.node_ids {
            if self.all_nodes.contains(&id) {
                self.seen_nodes.insert(id);
            }
        }
        for triple in obs.edge_triples() {
            if self.all_edges.contains(&triple) {
                self.seen_edges.insert(triple);
            }
        }
        self.coverage() - before
    }
}
