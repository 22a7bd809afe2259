//! Graph transformer network over observed object graphs.
//!
//! An observation's ROIs become a complete graph: appearance vectors on the
//! nodes, six relative-geometry features per ordered pair on the edges. The
//! edge features are kernelized into six non-negative adjacency channels
//! (plus an identity channel), a stack of channel-attention layers composes
//! them into per-channel meta-path adjacencies, and a small GCN ensemble
//! — one GCN per output channel, concatenated — produces node embeddings.
//! Heads on top emit node class logits, multi-label edge-type logits, and
//! the pooled features the navigation policy consumes.

pub(crate) mod backward;
pub(crate) mod forward;
mod train;

pub use backward::{loss, SgtnGrad};
pub use forward::{gcn_layer, gt_layer, GtLayerOut, SgtnCache};
pub use train::{eval_sgg, train_sgg, EpochMetrics, SggMetrics, SggSample, TrainSggConfig};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{softmax, Tensor2, Tensor3};
use crate::world::{Observation, CLASS_COUNT};

/// Raw edge-feature width: per-axis dimension differences plus per-axis
/// position differences.
pub const EDGE_FEAT_DIM: usize = 6;

/// Complete graph built from one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGraph {
    pub n: usize,
    /// N x d_V appearance features.
    pub node_feats: Tensor2,
    /// N x N x 6 raw relative features, zero on the diagonal.
    pub edge_feats: Tensor3,
    /// N x N x 7 adjacency: six Gaussian-kernelized channels with zero
    /// diagonal, then the identity channel.
    pub adjacency: Tensor3,
}

/// Kernelize one observation into an [`InputGraph`].
///
/// Raw feature for the ordered pair (i, j) is
/// `(est_dims_i - est_dims_j, est_pos_i - est_pos_j)`; adjacency channel c
/// holds `exp(-raw_c^2 / sigma_c^2)` off the diagonal.
pub fn build_input_graph(obs: &Observation, kernel_sigmas: &[f64; 6]) -> Result<InputGraph> {
    let n = obs.rois.len();
    if n == 0 {
        return Err(Error::arg("observation has no rois; cannot build a graph"));
    }
    for (c, &s) in kernel_sigmas.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::arg(format!("kernel sigma {c} must be positive, got {s}")));
        }
    }
    let d_v = obs.rois[0].appearance.len();
    let mut node_feats = Tensor2::zeros(n, d_v);
    for (i, roi) in obs.rois.iter().enumerate() {
        if roi.appearance.len() != d_v {
            return Err(Error::dim(format!(
                "roi {i} appearance length {} != {d_v}",
                roi.appearance.len()
            )));
        }
        node_feats.row_mut(i).copy_from_slice(&roi.appearance);
    }
    let mut edge_feats = Tensor3::zeros(n, n, EDGE_FEAT_DIM);
    let mut adjacency = Tensor3::zeros(n, n, EDGE_FEAT_DIM + 1);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                adjacency.set(i, j, EDGE_FEAT_DIM, 1.0);
                continue;
            }
            let (a, b) = (&obs.rois[i], &obs.rois[j]);
            let raw = [
                a.est_dims.x - b.est_dims.x,
                a.est_dims.y - b.est_dims.y,
                a.est_dims.z - b.est_dims.z,
                a.est_pos.x - b.est_pos.x,
                a.est_pos.y - b.est_pos.y,
                a.est_pos.z - b.est_pos.z,
            ];
            for (c, &r) in raw.iter().enumerate() {
                edge_feats.set(i, j, c, r);
                let s = kernel_sigmas[c];
                adjacency.set(i, j, c, (-(r * r) / (s * s)).exp());
            }
        }
    }
    Ok(InputGraph { n, node_feats, edge_feats, adjacency })
}

/// Hyperparameters of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgtnHyper {
    /// Meta-path output channels.
    pub channels: usize,
    /// GCN hidden width.
    pub d: usize,
    /// Appearance feature width.
    pub d_v: usize,
    /// Node classes.
    pub k: usize,
    /// Stacked channel-attention layers.
    pub gt_layers: usize,
    /// GCN layers per channel.
    pub gcn_layers: usize,
    /// Kernel bandwidths for the six raw edge features.
    pub sigmas: [f64; 6],
}

impl Default for SgtnHyper {
    fn default() -> Self {
        SgtnHyper {
            channels: 2,
            d: 32,
            d_v: 32,
            k: CLASS_COUNT,
            gt_layers: 3,
            gcn_layers: 3,
            sigmas: [0.5; 6],
        }
    }
}

impl SgtnHyper {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d == 0 || self.d_v == 0 || self.k == 0 {
            return Err(Error::arg("hyperparameters must be nonzero"));
        }
        if self.gt_layers == 0 || self.gcn_layers == 0 {
            return Err(Error::arg("layer counts must be nonzero"));
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::arg("kernel sigmas must be positive"));
        }
        Ok(())
    }

    /// Expected parameter shapes, in name order.
    pub(crate) fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let ch = EDGE_FEAT_DIM + 1;
        let mut out = Vec::new();
        out.push(("gt0.w1".to_string(), self.channels, ch));
        out.push(("gt0.w2".to_string(), self.channels, ch));
        for l in 1..self.gt_layers {
            out.push((format!("gt{l}.w1"), self.channels, ch));
        }
        for l in 0..self.gcn_layers {
            let d_in = if l == 0 { self.d_v } else { self.d };
            for c in 0..self.channels {
                out.push((format!("gcn{l}.c{c}.w"), d_in, self.d));
            }
        }
        out.push(("node_head.w".to_string(), self.channels * self.d, self.k));
        out.push(("edge_head.w".to_string(), self.channels, crate::gtruth::EDGE_TYPE_COUNT));
        out.push(("edge_head.b".to_string(), 1, crate::gtruth::EDGE_TYPE_COUNT));
        out
    }
}

/// The model: hyperparameters plus a named parameter store.
#[derive(Debug, Clone)]
pub struct SgtnModel {
    pub hyper: SgtnHyper,
    pub params: ParamStore,
}

impl SgtnModel {
    /// Fresh model with small random weights.
    pub fn new<R: Rng>(hyper: SgtnHyper, rng: &mut R) -> Result<SgtnModel> {
        hyper.validate()?;
        let mut params = ParamStore::new();
        for (name, rows, cols) in hyper.param_shapes() {
            let t = if name.starts_with("gt") {
                // Near-uniform channel attention at the start.
                Tensor2::randn(rows, cols, 0.1, rng)
            } else if name.ends_with(".b") {
                Tensor2::zeros(rows, cols)
            } else {
                Tensor2::randn(rows, cols, (2.0 / rows as f64).sqrt(), rng)
            };
            params.insert(&name, t);
        }
        Ok(SgtnModel { hyper, params })
    }

    /// Forward pass; see [`forward::forward`] for the contract.
    pub fn forward(&self, g: &InputGraph) -> (SgtnOutput, SgtnCache) {
        forward::forward(self, g)
    }

    /// Accumulate parameter gradients for upstream output gradients.
    pub fn backward(&mut self, g: &InputGraph, cache: &SgtnCache, grad: &SgtnGrad) {
        let (store, hyper) = (&mut self.params, self.hyper);
        backward::backward_into(hyper, g, cache, grad, store);
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            hyper: self.hyper,
            params: self.params.to_entries(),
        };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    pub fn load(path: &std::path::Path) -> Result<SgtnModel> {
        let s = std::fs::read_to_string(path)?;
        SgtnModel::from_json_str(&s)
    }

    /// Parse a checkpoint, validating version and parameter shapes against
    /// the stored hyperparameters.
    pub fn from_json_str(s: &str) -> Result<SgtnModel> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch {
                version: file.version,
                detail: format!("expected checkpoint version {CHECKPOINT_VERSION}"),
            });
        }
        file.hyper.validate().map_err(|e| Error::CheckpointMismatch {
            version: file.version,
            detail: e.to_string(),
        })?;
        let params =
            ParamStore::from_entries(file.params, &file.hyper.param_shapes(), file.version)?;
        Ok(SgtnModel { hyper: file.hyper, params })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    hyper: SgtnHyper,
    params: BTreeMap<String, crate::optim::TensorEntry>,
}

/// Everything the forward pass emits.
#[derive(Debug, Clone)]
pub struct SgtnOutput {
    /// N x K class logits.
    pub node_logits: Tensor2,
    /// N x N x 4 edge-type logits; the diagonal carries no meaning.
    pub edge_logits: Tensor3,
    /// N x (C*d) concatenated node embeddings.
    pub z: Tensor2,
    /// Per-channel N x N edge tensor (the last layer's pre-normalization
    /// meta-path product).
    pub a_hat: Vec<Tensor2>,
    /// Softmaxed channel-attention vectors, one C x (d_E+1) matrix per
    /// selection in stack order.
    pub alpha: Vec<Tensor2>,
}

/// Nodes classified with max softmax probability above `p`, with their
/// argmax class index and probability.
pub fn confident_nodes(out: &SgtnOutput, p: f64) -> Result<Vec<(usize, usize, f64)>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::arg(format!("confidence threshold must be in (0,1), got {p}")));
    }
    let mut result = Vec::new();
    for i in 0..out.node_logits.rows() {
        let probs = softmax(out.node_logits.row(i))?;
        let (best, best_p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .expect("at least one class");
        if *best_p > p {
            result.push((i, best, *best_p));
        }
    }
    Ok(result)
}

/// Off-diagonal ordered pairs ranked by attention score (max over channels
/// of a_hat), top `ceil(fraction * N(N-1))`, ties broken by (i, j).
pub fn top_attention_edges(out: &SgtnOutput, fraction: f64) -> Result<Vec<(usize, usize)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("fraction must be in (0,1], got {fraction}")));
    }
    let n = out.node_logits.rows();
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let score = out
                .a_hat
                .iter()
                .map(|ch| ch.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            scored.push((score, i, j));
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite attention scores")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let count = (fraction * scored.len() as f64).ceil() as usize;
    Ok(scored.into_iter().take(count).map(|(_, i, j)| (i, j)).collect())
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng;

    use crate::world::{ObjectClass, Observation, Roi, Vec3, AgentPose};

    /// Random observation with `n` ROIs for graph-level tests.
    pub fn random_obs<R: Rng>(n: usize, d_v: usize, rng: &mut R) -> Observation {
        let rois = (0..n)
            .map(|i| Roi {
                object_id: i as u32,
                class: crate::world::ALL_CLASSES[rng.random_range(0..ObjectClass::Plant.id() + 1)],
                appearance: (0..d_v).map(|_| rng.random_range(-1.0..1.0)).collect(),
                est_dims: Vec3::new(
                    rng.random_range(0.1..2.0),
                    rng.random_range(0.1..2.0),
                    rng.random_range(0.1..2.0),
                ),
                est_pos: Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.1..5.0),
                ),
            })
            .collect();
        Observation {
            rois,
            pose: AgentPose::new(Vec3::new(0.0, 1.25, 0.0), 0.0),
        }
    }
}
