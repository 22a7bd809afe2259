//! Trajectory-level scene-graph accumulation: confident per-frame
//! predictions are lifted to world coordinates and fused into a persistent
//! [`GlobalGraph`], which supports unsupervised room separation through
//! connected components, per-step attention tracing, and DOT/JSON export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::{build_input_graph, confident_nodes, SgtnModel, SgtnOutput};
use crate::gtruth::{EdgeType, SceneGraphGT, ALL_EDGE_TYPES, EDGE_TYPE_COUNT};
use crate::policy::{EpisodeSpec, NavAgent};
use crate::tensor::{sigmoid, Tensor2, Tensor3};
use crate::world::{
    observe, step_pose, Action, ActuationNoise, AgentPose, ObjectClass, Observation, ObsConfig,
    Scene, Vec3, CLASS_COUNT,
};

/// Probability above which a frame prediction enters the map — applied to
/// the node-class softmax and to each edge-type sigmoid.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Default node-fusion radius, meters.
pub const DEFAULT_FUSION_RADIUS: f64 = 0.5;

/// One fused object hypothesis in the accumulated map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalNode {
    pub id: u32,
    /// Predicted class shared by every detection merged in.
    pub class: ObjectClass,
    /// Running mean of the merged world-frame detection positions.
    pub position: Vec3,
    /// Number of detections merged in so far.
    pub detections: u32,
    /// Frame indices that contributed a detection, ascending, no repeats.
    pub source_frames: Vec<u32>,
}

/// Scene graph accumulated across the frames of an episode.
///
/// Nodes hold fused object hypotheses; edges are canonical unordered pairs
/// `(low id, high id, type)` carrying the best sigmoid confidence any frame
/// ever reported. Two live nodes of the same class are never within the
/// fusion radius of each other: a running-mean update that drags one node
/// into another's radius collapses the pair (the lower id survives), and
/// retired ids stay resolvable through [`GlobalGraph::resolve`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalGraph {
    /// Live nodes in ascending id order.
    nodes: Vec<GlobalNode>,
    edges: BTreeMap<(u32, u32, EdgeType), f64>,
    /// Ids retired by collapses, each mapped one step toward its survivor.
    aliases: BTreeMap<u32, u32>,
    frames: u32,
    next_id: u32,
}

impl GlobalGraph {
    pub fn new() -> GlobalGraph {
        GlobalGraph::default()
    }

    pub fn nodes(&self) -> &[GlobalNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeMap<(u32, u32, EdgeType), f64> {
        &self.edges
    }

    /// Frames folded in so far.
    pub fn frame_count(&self) -> u32 {
        self.frames
    }

    /// Follow collapse aliases down to the surviving id. Ids that never
    /// existed come back unchanged.
    pub fn resolve(&self, mut id: u32) -> u32 {
        while let Some(&next) = self.aliases.get(&id) {
            id = next;
        }
        id
    }

    /// The live node behind an id, following aliases.
    pub fn node(&self, id: u32) -> Option<&GlobalNode> {
        let id = self.resolve(id);
        self.index_of(id).map(|i| &self.nodes[i])
    }

    fn index_of(&self, id: u32) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    /// Fold one frame's predictions into the map.
    ///
    /// Every ROI whose class probability exceeds [`CONFIDENCE_THRESHOLD`]
    /// is placed at the world-frame location of its estimated position and
    /// merged into the nearest existing node of the same predicted class
    /// within `radius` (running-mean position update), or inserted fresh.
    /// Predicted edges then connect the fused endpoints, keeping the
    /// highest confidence seen across frames. Returns the global node id
    /// each ROI landed in (`None` where the class call was not confident);
    /// later fuses may retire returned ids through collapses, so persistent
    /// consumers should re-run them through [`GlobalGraph::resolve`].
    pub fn fuse(
        &mut self,
        out: &SgtnOutput,
        obs: &Observation,
        radius: f64,
    ) -> Result<Vec<Option<u32>>> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::arg(format!("fusion radius must be positive, got {radius}")));
        }
        let n = obs.rois.len();
        if out.node_logits.rows() != n {
            return Err(Error::dim(format!(
                "frame carries {} node predictions for {n} rois",
                out.node_logits.rows()
            )));
        }
        if out.edge_logits.dim0() != n || out.edge_logits.dim1() != n {
            return Err(Error::dim(format!(
                "edge logits are {}x{} for {n} rois",
                out.edge_logits.dim0(),
                out.edge_logits.dim1()
            )));
        }
        let frame = self.frames;
        let mut mapping: Vec<Option<u32>> = vec![None; n];
        for (roi_idx, class_idx, _) in confident_nodes(out, CONFIDENCE_THRESHOLD)? {
            if class_idx >= CLASS_COUNT {
                return Err(Error::arg(format!(
                    "predicted class {class_idx} outside the class table"
                )));
            }
            let class = ObjectClass::try_from(class_idx as u8)?;
            let world = obs.pose.agent_to_world(obs.rois[roi_idx].est_pos);
            let id = match self.nearest_within(class, world, radius, None) {
                Some(idx) => {
                    let node = &mut self.nodes[idx];
                    node.detections += 1;
                    let w = 1.0 / node.detections as f64;
                    node.position = Vec3::new(
                        node.position.x + (world.x - node.position.x) * w,
                        node.position.y + (world.y - node.position.y) * w,
                        node.position.z + (world.z - node.position.z) * w,
                    );
                    if node.source_frames.last() != Some(&frame) {
                        node.source_frames.push(frame);
                    }
                    let id = node.id;
                    self.collapse_overlaps(id, radius)
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.nodes.push(GlobalNode {
                        id,
                        class,
                        position: world,
                        detections: 1,
                        source_frames: vec![frame],
                    });
                    id
                }
            };
            mapping[roi_idx] = Some(id);
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (Some(gi), Some(gj)) = (mapping[i], mapping[j]) else { continue };
                let (gi, gj) = (self.resolve(gi), self.resolve(gj));
                if gi == gj {
                    continue;
                }
                for (t_idx, t) in ALL_EDGE_TYPES.iter().enumerate() {
                    let conf = sigmoid(out.edge_logits.get(i, j, t_idx));
                    if conf > CONFIDENCE_THRESHOLD {
                        let key = (gi.min(gj), gi.max(gj), *t);
                        let best = self.edges.entry(key).or_insert(0.0);
                        if conf > *best {
                            *best = conf;
                        }
                    }
                }
            }
        }
        self.frames += 1;
        for slot in &mut mapping {
            if let Some(id) = slot {
                *id = self.resolve(*id);
            }
        }
        Ok(mapping)
    }

    /// Index of the closest node of `class` strictly within `radius` of
    /// `p`, skipping `exclude`; ties keep the lowest id.
    fn nearest_within(
        &self,
        class: ObjectClass,
        p: Vec3,
        radius: f64,
        exclude: Option<usize>,
    ) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (idx, node) in self.nodes.iter().enumerate() {
            if Some(idx) == exclude || node.class != class {
                continue;
            }
            let d = node.position.dist(p);
            if d < radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, idx));
            }
        }
        best.map(|(_, idx)| idx)
    }

    /// Restore the separation invariant after the node at `id` moved:
    /// while some same-class node sits within `radius` of it, collapse the
    /// pair into the lower id, then re-check from the (again moved)
    /// survivor. Returns the id the moved node resolved to.
    fn collapse_overlaps(&mut self, mut id: u32, radius: f64) -> u32 {
        loop {
            let idx = self.index_of(id).expect("moved node is live");
            let (class, pos) = (self.nodes[idx].class, self.nodes[idx].position);
            let Some(other) = self.nearest_within(class, pos, radius, Some(idx)) else {
                return id;
            };
            id = self.merge_pair(idx, other);
        }
    }

    /// Collapse two live nodes into the one with the lower id: positions
    /// combine as a detection-weighted mean, frame lists union, and every
    /// edge touching the retired id is re-pointed (self-loops drop, the
    /// higher confidence wins). Returns the surviving id.
    fn merge_pair(&mut self, a: usize, b: usize) -> u32 {
        let (keep, drop) = if self.nodes[a].id < self.nodes[b].id { (a, b) } else { (b, a) };
        let dead = self.nodes.remove(drop);
        let keep = if drop < keep { keep - 1 } else { keep };
        let survivor = &mut self.nodes[keep];
        let total = survivor.detections + dead.detections;
        let w = dead.detections as f64 / total as f64;
        survivor.position = Vec3::new(
            survivor.position.x + (dead.position.x - survivor.position.x) * w,
            survivor.position.y + (dead.position.y - survivor.position.y) * w,
            survivor.position.z + (dead.position.z - survivor.position.z) * w,
        );
        survivor.detections = total;
        survivor.source_frames = merge_sorted_unique(&survivor.source_frames, &dead.source_frames);
        let (s_id, d_id) = (survivor.id, dead.id);
        self.aliases.insert(d_id, s_id);
        let touched: Vec<(u32, u32, EdgeType)> = self
            .edges
            .keys()
            .copied()
            .filter(|&(x, y, _)| x == d_id || y == d_id)
            .collect();
        for key in touched {
            let conf = self.edges.remove(&key).expect("key just listed");
            let (x, y, t) = key;
            let nx = if x == d_id { s_id } else { x };
            let ny = if y == d_id { s_id } else { y };
            if nx == ny {
                continue;
            }
            let canon = (nx.min(ny), nx.max(ny), t);
            let best = self.edges.entry(canon).or_insert(0.0);
            if conf > *best {
                *best = conf;
            }
        }
        s_id
    }

    /// Connected components of the subgraph that keeps only
    /// [`EdgeType::SameRegion`] edges — under good predictions, one
    /// component per room. Each component lists ids ascending; components
    /// are ordered by their smallest member and partition the node set.
    pub fn room_components(&self) -> Vec<Vec<u32>> {
        let mut adj: BTreeMap<u32, Vec<u32>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for &(a, b, t) in self.edges.keys() {
            if t == EdgeType::SameRegion {
                adj.get_mut(&a).expect("edge endpoints are live").push(b);
                adj.get_mut(&b).expect("edge endpoints are live").push(a);
            }
        }
        let mut seen = BTreeSet::new();
        let mut components = Vec::new();
        for node in &self.nodes {
            if !seen.insert(node.id) {
                continue;
            }
            let mut component = vec![node.id];
            let mut stack = vec![node.id];
            while let Some(v) = stack.pop() {
                for &w in &adj[&v] {
                    if seen.insert(w) {
                        component.push(w);
                        stack.push(w);
                    }
                }
            }
            component.sort_unstable();
            components.push(component);
        }
        components
    }

    /// Render in the requested format; both encodings order nodes and
    /// edges deterministically, so equal graphs export byte-identically.
    pub fn export(&self, format: GraphFormat) -> String {
        match format {
            GraphFormat::Dot => self.to_dot_string(),
            GraphFormat::Json => self.to_json_string(),
        }
    }

    /// GraphViz encoding: nodes labeled `class#id` ascending, one edge
    /// statement per (pair, type) in canonical order with the stored
    /// confidence to three decimals.
    pub fn to_dot_string(&self) -> String {
        let mut s = String::from("digraph scene_graph {\n");
        for node in &self.nodes {
            let _ = writeln!(s, "  n{} [label=\"{}#{}\"];", node.id, node.class.name(), node.id);
        }
        for (&(a, b, t), &conf) in &self.edges {
            let _ = writeln!(s, "  n{a} -> n{b} [label=\"{}\", confidence=\"{conf:.3}\"];", t.name());
        }
        s.push('}');
        s.push('\n');
        s
    }

    pub fn to_json_string(&self) -> String {
        let file = GraphFile {
            version: GRAPH_FORMAT_VERSION,
            frames: self.frames,
            next_id: self.next_id,
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|(&(i, j, edge_type), &confidence)| EdgeRecord { i, j, edge_type, confidence })
                .collect(),
            aliases: self.aliases.iter().map(|(&a, &b)| (a, b)).collect(),
        };
        serde_json::to_string(&file).expect("graph serialization cannot fail")
    }

    /// Parse and validate a JSON export back into a graph.
    pub fn from_json_str(s: &str) -> Result<GlobalGraph> {
        let file: GraphFile = serde_json::from_str(s)?;
        if file.version != GRAPH_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported graph format version {}",
                file.version
            )));
        }
        let mut live = BTreeSet::new();
        for pair in file.nodes.windows(2) {
            if pair[0].id >= pair[1].id {
                return Err(Error::Parse("node ids must be strictly ascending".into()));
            }
        }
        for node in &file.nodes {
            if node.id >= file.next_id {
                return Err(Error::Parse(format!("node id {} beyond next_id", node.id)));
            }
            if !node.position.is_finite() {
                return Err(Error::Parse(format!("node {} position not finite", node.id)));
            }
            if node.detections == 0 || node.source_frames.is_empty() {
                return Err(Error::Parse(format!("node {} has no detections", node.id)));
            }
            if (node.source_frames.len() as u32) > node.detections {
                return Err(Error::Parse(format!(
                    "node {} lists more frames than detections",
                    node.id
                )));
            }
            for pair in node.source_frames.windows(2) {
                if pair[0] >= pair[1] {
                    return Err(Error::Parse(format!(
                        "node {} frame list not strictly ascending",
                        node.id
                    )));
                }
            }
            if node.source_frames.last().is_some_and(|&f| f >= file.frames) {
                return Err(Error::Parse(format!("node {} cites an unseen frame", node.id)));
            }
            live.insert(node.id);
        }
        let mut edges = BTreeMap::new();
        for rec in file.edges {
            if rec.i >= rec.j {
                return Err(Error::Parse(format!(
                    "edge ({}, {}) not in canonical low-high order",
                    rec.i, rec.j
                )));
            }
            if !live.contains(&rec.i) || !live.contains(&rec.j) {
                return Err(Error::Parse(format!(
                    "edge ({}, {}) references a retired node",
                    rec.i, rec.j
                )));
            }
            if !(rec.confidence.is_finite() && rec.confidence > 0.0 && rec.confidence <= 1.0) {
                return Err(Error::Parse(format!(
                    "edge ({}, {}) confidence {} out of range",
                    rec.i, rec.j, rec.confidence
                )));
            }
            if edges.insert((rec.i, rec.j, rec.edge_type), rec.confidence).is_some() {
                return Err(Error::Parse(format!("duplicate edge ({}, {})", rec.i, rec.j)));
            }
        }
        let mut aliases = BTreeMap::new();
        for (from, to) in file.aliases {
            if live.contains(&from) || from >= file.next_id {
                return Err(Error::Parse(format!("alias source {from} must be a retired id")));
            }
            if aliases.insert(from, to).is_some() {
                return Err(Error::Parse(format!("duplicate alias for {from}")));
            }
        }
        // Every alias chain must land on a live node without cycling.
        for &start in aliases.keys() {
            let mut id = start;
            for _ in 0..=aliases.len() {
                match aliases.get(&id) {
                    Some(&next) => id = next,
                    None => break,
                }
            }
            if !live.contains(&id) {
                return Err(Error::Parse(format!("alias chain from {start} never goes live")));
            }
        }
        Ok(GlobalGraph {
            nodes: file.nodes,
            edges,
            aliases,
            frames: file.frames,
            next_id: file.next_id,
        })
    }

    pub fn save(&self, path: &std::path::Path, format: GraphFormat) -> Result<()> {
        std::fs::write(path, self.export(format))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<GlobalGraph> {
        let s = std::fs::read_to_string(path)?;
        GlobalGraph::from_json_str(&s)
    }
}

/// Ascending union of two ascending unique lists.
fn merge_sorted_unique(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(_), Some(&y)) => {
                j += 1;
                y
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!("loop condition"),
        };
        out.push(next);
    }
    out
}

const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    i: u32,
    j: u32,
    edge_type: EdgeType,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    version: u32,
    frames: u32,
    next_id: u32,
    nodes: Vec<GlobalNode>,
    edges: Vec<EdgeRecord>,
    aliases: Vec<(u32, u32)>,
}

/// Export encodings for the accumulated graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<GraphFormat> {
        match s {
            "dot" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::arg(format!("unknown graph format {other:?}; expected dot or json"))),
        }
    }
}

/// One step's input to [`attention_trace`]: the frame prediction (absent
/// when the view was empty) and the observation it came from.
#[derive(Clone, Copy)]
pub struct TraceFrame<'a> {
    pub out: Option<&'a SgtnOutput>,
    pub obs: &'a Observation,
}

/// The most-attended node of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFocus {
    /// Index into the step's ROI list.
    pub roi_index: usize,
    pub object_id: u32,
    /// Predicted class of the attended node.
    pub class: ObjectClass,
    /// Outgoing attention mass: row sum of the channel-wise maximum of
    /// the composed adjacency.
    pub score: f64,
}

/// Per-step most-attended node over an episode's frames.
///
/// A node's attention is the sum over columns of the channel-wise maximum
/// of the composed adjacency row — its outgoing weight mass; the argmax
/// node is reported with ties broken toward the lowest index. Steps whose
/// frame saw nothing yield `None`.
pub fn attention_trace(frames: &[TraceFrame<'_>]) -> Result<Vec<Option<TraceFocus>>> {
    if frames.is_empty() {
        return Err(Error::arg("attention trace needs at least one frame"));
    }
    let mut trace = Vec::with_capacity(frames.len());
    for (step, frame) in frames.iter().enumerate() {
        let n = frame.obs.rois.len();
        let Some(out) = frame.out else {
            trace.push(None);
            continue;
        };
        if n == 0 {
            trace.push(None);
            continue;
        }
        if out.node_logits.rows() != n {
            return Err(Error::dim(format!(
                "step {step}: {} node predictions for {n} rois",
                out.node_logits.rows()
            )));
        }
        if out.a_hat.is_empty() {
            return Err(Error::dim(format!("step {step}: no attention channels")));
        }
        for ch in &out.a_hat {
            if ch.rows() != n || ch.cols() != n {
                return Err(Error::dim(format!(
                    "step {step}: attention channel is {}x{} for {n} rois",
                    ch.rows(),
                    ch.cols()
                )));
            }
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..n {
            let mut score = 0.0;
            for j in 0..n {
                score += out
                    .a_hat
                    .iter()
                    .map(|ch| ch.get(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            if score > best.1 {
                best = (i, score);
            }
        }
        let (roi_index, score) = best;
        let row = out.node_logits.row(roi_index);
        let mut class_idx = 0;
        let mut class_logit = f64::NEG_INFINITY;
        for (k, &logit) in row.iter().enumerate() {
            if logit > class_logit {
                class_logit = logit;
                class_idx = k;
            }
        }
        if class_idx >= CLASS_COUNT {
            return Err(Error::arg(format!(
                "step {step}: predicted class {class_idx} outside the class table"
            )));
        }
        trace.push(Some(TraceFocus {
            roi_index,
            object_id: frame.obs.rois[roi_index].object_id,
            class: ObjectClass::try_from(class_idx as u8)?,
            score,
        }));
    }
    Ok(trace)
}

/// Logit magnitude for saturated oracle predictions.
const ORACLE_LOGIT: f64 = 10.0;

/// The output a perfect predictor would emit for an observation: node
/// logits peaked at each ROI's reference class and edge logits saturated
/// from the reference labels. Substituting this for a trained model
/// isolates the trajectory pipeline from prediction error.
pub fn oracle_frame_output(obs: &Observation, gt: &SceneGraphGT) -> Result<SgtnOutput> {
    let n = obs.rois.len();
    let mut node_logits = Tensor2::zeros(n, CLASS_COUNT);
    let mut gt_index = Vec::with_capacity(n);
    for (i, roi) in obs.rois.iter().enumerate() {
        let gi = gt.index_of(roi.object_id).ok_or_else(|| {
            Error::arg(format!("object id {} missing from the reference graph", roi.object_id))
        })?;
        node_logits.set(i, gt.node_classes[gi].id(), ORACLE_LOGIT);
        gt_index.push(gi);
    }
    let mut edge_logits = Tensor3::zeros(n, n, EDGE_TYPE_COUNT);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (t_idx, t) in ALL_EDGE_TYPES.iter().enumerate() {
                let v = if gt.label(gt_index[i], gt_index[j], *t) {
                    ORACLE_LOGIT
                } else {
                    -ORACLE_LOGIT
                };
                edge_logits.set(i, j, t_idx, v);
            }
        }
    }
    Ok(SgtnOutput {
        node_logits,
        edge_logits,
        z: Tensor2::zeros(n, 1),
        a_hat: vec![Tensor2::zeros(n, n)],
        alpha: Vec::new(),
    })
}

/// Where each frame's predictions come from during a trace: a trained
/// network, or reference labels substituted through
/// [`oracle_frame_output`].
#[derive(Clone, Copy)]
pub enum FrameSource<'a> {
    Model(&'a SgtnModel),
    Reference(&'a SceneGraphGT),
}

impl FrameSource<'_> {
    fn frame(&self, obs: &Observation) -> Result<SgtnOutput> {
        match self {
            FrameSource::Model(model) => {
                let graph = build_input_graph(obs, &model.hyper.sigmas)?;
                Ok(model.forward(&graph).0)
            }
            FrameSource::Reference(gt) => oracle_frame_output(obs, gt),
        }
    }
}

/// The trajectory-level applications run over one episode: the per-step
/// attention focus and the fused global graph.
#[derive(Debug)]
pub struct EpisodeTrace {
    /// Pose at each step, observation order.
    pub poses: Vec<AgentPose>,
    /// Most-attended node per step; `None` for empty frames. Reference
    /// frames carry all-zero attention, so their focus degenerates to the
    /// first ROI by the tie rule.
    pub focus: Vec<Option<TraceFocus>>,
    pub graph: GlobalGraph,
}

/// Fuse and trace along a fixed pose track.
pub fn trace_poses(
    scene: &Scene,
    poses: &[AgentPose],
    source: FrameSource<'_>,
    obs_cfg: &ObsConfig,
    radius: f64,
    obs_rng: &mut ChaCha8Rng,
) -> Result<EpisodeTrace> {
    if poses.is_empty() {
        return Err(Error::arg("trace needs at least one pose"));
    }
    let mut graph = GlobalGraph::new();
    let mut frames = Vec::with_capacity(poses.len());
    for &pose in poses {
        let obs = observe(scene, pose, obs_cfg, obs_rng);
        let out = source.frame(&obs)?;
        graph.fuse(&out, &obs, radius)?;
        frames.push((out, obs));
    }
    let focus = {
        let refs: Vec<TraceFrame<'_>> =
            frames.iter().map(|(out, obs)| TraceFrame { out: Some(out), obs }).collect();
        attention_trace(&refs)?
    };
    Ok(EpisodeTrace { poses: poses.to_vec(), focus, graph })
}

/// Roll an agent from `spec.start` toward `spec.goal`, fusing and tracing
/// the observation stream it acts on. The episode ends at the agent's
/// Stop or after `max_steps` decisions.
pub fn trace_rollout(
    scene: &Scene,
    spec: &EpisodeSpec,
    agent: &mut dyn NavAgent,
    source: FrameSource<'_>,
    obs_cfg: &ObsConfig,
    radius: f64,
    max_steps: usize,
    obs_rng: &mut ChaCha8Rng,
) -> Result<EpisodeTrace> {
    if max_steps == 0 {
        return Err(Error::arg("max_steps must be at least 1"));
    }
    agent.reset(scene, spec.start, spec.goal)?;
    let mut graph = GlobalGraph::new();
    let mut frames = Vec::new();
    let mut poses = Vec::new();
    let mut pose = spec.start;
    for _ in 0..max_steps {
        let obs = observe(scene, pose, obs_cfg, obs_rng);
        let out = source.frame(&obs)?;
        graph.fuse(&out, &obs, radius)?;
        poses.push(pose);
        let choice = agent.act(&obs, pose, spec.goal)?;
        frames.push((out, obs));
        if choice.action == Action::Stop {
            break;
        }
        pose = step_pose(scene, pose, choice.action, ActuationNoise::NONE, obs_rng);
    }
    let focus = {
        let refs: Vec<TraceFrame<'_>> =
            frames.iter().map(|(out, obs)| TraceFrame { out: Some(out), obs }).collect();
        attention_trace(&refs)?
    };
    Ok(EpisodeTrace { poses, focus, graph })
}
