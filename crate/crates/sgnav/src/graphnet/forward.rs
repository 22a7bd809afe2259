//! Forward pass: soft channel selection, stacked meta-path composition,
//! degree-normalized message passing, and the output heads.

use crate::gtruth::EDGE_TYPE_COUNT;
use crate::tensor::{relu, softmax, Tensor2, Tensor3};

use super::{InputGraph, SgtnModel, SgtnOutput, EDGE_FEAT_DIM};

fn relu_inplace(m: &mut Tensor2) {
    for v in m.data_mut() {
        *v = relu(*v);
    }
}

/// One soft selection: channel attention and the blended adjacency.
#[derive(Debug, Clone)]
pub(crate) struct Selection {
    /// Parameter name this selection came from.
    pub param: String,
    /// C x (d_E+1) softmaxed attention, rows sum to 1.
    pub alpha: Tensor2,
    /// Per output channel, the attention-weighted sum of input channels.
    pub sel: Vec<Tensor2>,
}

fn select(param: &str, weights: &Tensor2, adjacency: &Tensor3) -> Selection {
    let n = adjacency.dim0();
    let channels = weights.rows();
    let mut alpha = Tensor2::zeros(channels, weights.cols());
    let mut sel = Vec::with_capacity(channels);
    for c in 0..channels {
        let a = softmax(weights.row(c)).expect("channel count > 0");
        alpha.row_mut(c).copy_from_slice(&a);
        let mut m = Tensor2::zeros(n, n);
        for (t, &w) in a.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                for j in 0..n {
                    m.add_at(i, j, w * adjacency.get(i, j, t));
                }
            }
        }
        sel.push(m);
    }
    Selection { param: param.to_string(), alpha, sel }
}

/// Row-normalize in place; rows with positive sum are divided by it, other
/// rows are left untouched. Returns the original row sums.
fn row_normalize(m: &mut Tensor2) -> Vec<f64> {
    let mut sums = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let r: f64 = m.row(i).iter().sum();
        if r > 0.0 {
            for v in m.row_mut(i) {
                *v /= r;
            }
        }
        sums.push(r);
    }
    sums
}

/// One stacked meta-path layer's worth of cached state.
#[derive(Debug, Clone)]
pub(crate) struct GtCache {
    /// The selections this layer made (two on the first layer, one after).
    pub sels: Vec<Selection>,
    /// Per channel: the left factor of the composition (previous layer's
    /// normalized adjacency, or the first selection on layer 0).
    pub q1: Vec<Tensor2>,
    /// Per channel: pre-normalization composition q1 * q2.
    pub comp: Vec<Tensor2>,
    /// Per channel: row sums of comp taken during normalization.
    pub rowsum: Vec<Vec<f64>>,
    /// Per channel: row-normalized composition.
    pub norm: Vec<Tensor2>,
}

/// Public result of one meta-path layer, for tests and inspection.
#[derive(Debug, Clone)]
pub struct GtLayerOut {
    /// Left factors per channel.
    pub q1: Vec<Tensor2>,
    /// Right factors (the new selection) per channel.
    pub q2: Vec<Tensor2>,
    /// Row-normalized per-channel adjacency.
    pub a_p: Vec<Tensor2>,
    /// Attention vectors, one row per output channel per selection.
    pub alpha: Vec<Tensor2>,
}

fn gt_layer_cached(
    prev: Option<&[Tensor2]>,
    adjacency: &Tensor3,
    layer: usize,
    w1: &Tensor2,
    w2: Option<&Tensor2>,
) -> GtCache {
    let s1 = select(&format!("gt{layer}.w1"), w1, adjacency);
    let (q1, s_new, sels) = match prev {
        None => {
            let s2 = select(&format!("gt{layer}.w2"), w2.expect("first layer has w2"), adjacency);
            (s1.sel.clone(), s2.sel.clone(), vec![s1, s2])
        }
        Some(prev) => (prev.to_vec(), s1.sel.clone(), vec![s1]),
    };
    let mut comp = Vec::with_capacity(q1.len());
    let mut norm = Vec::with_capacity(q1.len());
    let mut rowsum = Vec::with_capacity(q1.len());
    for c in 0..q1.len() {
        let product = q1[c].matmul(&s_new[c]).expect("square matrices");
        let mut normalized = product.clone();
        let sums = row_normalize(&mut normalized);
        comp.push(product);
        norm.push(normalized);
        rowsum.push(sums);
    }
    GtCache { sels, q1, comp, rowsum, norm }
}

/// Run one meta-path layer.
///
/// The first layer (`prev` = None) blends the input channels twice and
/// composes the two selections; every later layer composes the previous
/// layer's normalized adjacency with one new selection — a running product
/// that extends the meta-path by one hop. Compositions are row-normalized
/// (rows with positive sum) to keep magnitudes bounded across the stack.
pub fn gt_layer(
    prev: Option<&[Tensor2]>,
    adjacency: &Tensor3,
    w1: &Tensor2,
    w2: Option<&Tensor2>,
) -> GtLayerOut {
    let cache = gt_layer_cached(prev, adjacency, 0, w1, w2);
    let q2 = match cache.sels.last() {
        Some(s) => s.sel.clone(),
        None => vec![],
    };
    GtLayerOut {
        q1: cache.q1,
        q2,
        a_p: cache.norm,
        alpha: cache.sels.iter().map(|s| s.alpha.clone()).collect(),
    }
}

/// Symmetric-normalized propagation matrix of one adjacency channel:
/// `S = D^{-1/2} (A + I) D^{-1/2}` with degrees clamped at 1e-8.
/// Also returns the clamped degrees and which rows were clamped.
fn propagation(a: &Tensor2) -> (Tensor2, Vec<f64>, Vec<bool>) {
    let n = a.rows();
    let mut deg = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = 1.0; // the added self-loop
        for j in 0..n {
            sum += a.get(i, j);
        }
        if sum < 1e-8 {
            deg.push(1e-8);
            clamped.push(true);
        } else {
            deg.push(sum);
            clamped.push(false);
        }
    }
    let mut s = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let tilde = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            s.set(i, j, tilde / (deg[i] * deg[j]).sqrt());
        }
    }
    (s, deg, clamped)
}

/// One message-passing layer: `out = act(S H W)` where `S` is the
/// degree-normalized adjacency with self-loops; `act` is ReLU unless this
/// is the final layer of its stack.
pub fn gcn_layer(a_channel: &Tensor2, h: &Tensor2, w: &Tensor2, final_layer: bool) -> Tensor2 {
    let (s, _, _) = propagation(a_channel);
    let hw = h.matmul(w).expect("gcn shapes");
    let mut out = s.matmul(&hw).expect("gcn shapes");
    if !final_layer {
        relu_inplace(&mut out);
    }
    out
}

/// Cached intermediates of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct SgtnCache {
    pub(crate) gt: Vec<GtCache>,
    /// Per channel: propagation matrix, clamped degrees, clamp mask.
    pub(crate) prop: Vec<(Tensor2, Vec<f64>, Vec<bool>)>,
    /// Per channel, per layer: input H (h[0] = node features).
    pub(crate) h: Vec<Vec<Tensor2>>,
    /// Per channel, per layer: H * W.
    pub(crate) hw: Vec<Vec<Tensor2>>,
    /// Per channel, per layer: pre-activation S * H * W.
    pub(crate) pre: Vec<Vec<Tensor2>>,
    pub(crate) z: Tensor2,
}

/// Full forward pass. See the module doc for the pipeline; all
/// intermediates are cached for the explicit backward pass.
pub(crate) fn forward(model: &SgtnModel, g: &InputGraph) -> (SgtnOutput, SgtnCache) {
    forward_raw(&model.hyper, &model.params, g)
}

/// Forward pass over bare hyperparameters and a parameter store; lets
/// gradient checks and composite models drive the network without a
/// [`SgtnModel`] wrapper.
pub(crate) fn forward_raw(
    hyper: &super::SgtnHyper,
    params: &crate::optim::ParamStore,
    g: &InputGraph,
) -> (SgtnOutput, SgtnCache) {
    let n = g.n;
    debug_assert_eq!(g.adjacency.channels(), EDGE_FEAT_DIM + 1);

    // Meta-path stack.
    let mut gt_caches: Vec<GtCache> = Vec::with_capacity(hyper.gt_layers);
    for layer in 0..hyper.gt_layers {
        let w1 = params.param(&format!("gt{layer}.w1"));
        let cache = if layer == 0 {
            let w2 = params.param("gt0.w2");
            gt_layer_cached(None, &g.adjacency, 0, w1, Some(w2))
        } else {
            let prev = gt_caches[layer - 1].norm.clone();
            gt_layer_cached(Some(&prev), &g.adjacency, layer, w1, None)
        };
        gt_caches.push(cache);
    }
    let last = gt_caches.last().expect("at least one layer");
    let a_hat: Vec<Tensor2> = last.comp.clone();
    let final_adj: Vec<Tensor2> = last.norm.clone();

    // GCN ensemble: one stack per channel over the channel's meta-path
    // adjacency, concatenated into Z.
    let mut prop = Vec::with_capacity(hyper.channels);
    let mut h_all = Vec::with_capacity(hyper.channels);
    let mut hw_all = Vec::with_capacity(hyper.channels);
    let mut pre_all = Vec::with_capacity(hyper.channels);
    let mut z = Tensor2::zeros(n, hyper.channels * hyper.d);
    for c in 0..hyper.channels {
        let (s, deg, clamped) = propagation(&final_adj[c]);
        let mut hs = vec![g.node_feats.clone()];
        let mut hws = Vec::with_capacity(hyper.gcn_layers);
        let mut pres = Vec::with_capacity(hyper.gcn_layers);
        for l in 0..hyper.gcn_layers {
            let w = params.param(&format!("gcn{l}.c{c}.w"));
            let hw = hs[l].matmul(w).expect("gcn shapes");
            let pre = s.matmul(&hw).expect("gcn shapes");
            let mut out = pre.clone();
            if l + 1 < hyper.gcn_layers {
                relu_inplace(&mut out);
            }
            hws.push(hw);
            pres.push(pre);
            hs.push(out);
        }
        let h_final = hs.last().expect("gcn output");
        for i in 0..n {
            for (dj, &v) in h_final.row(i).iter().enumerate() {
                z.set(i, c * hyper.d + dj, v);
            }
        }
        prop.push((s, deg, clamped));
        h_all.push(hs);
        hw_all.push(hws);
        pre_all.push(pres);
    }

    // Heads.
    let node_logits = z.matmul(params.param("node_head.w")).expect("node head shape");
    let edge_w = params.param("edge_head.w");
    let edge_b = params.param("edge_head.b");
    let mut edge_logits = Tensor3::zeros(n, n, EDGE_TYPE_COUNT);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for t in 0..EDGE_TYPE_COUNT {
                let mut v = edge_b.get(0, t);
                for c in 0..hyper.channels {
                    v += a_hat[c].get(i, j) * edge_w.get(c, t);
                }
                edge_logits.set(i, j, t, v);
            }
        }
    }

    let alpha: Vec<Tensor2> = gt_caches
        .iter()
        .flat_map(|l| l.sels.iter().map(|s| s.alpha.clone()))
        .collect();
    let output = SgtnOutput { node_logits, edge_logits, z: z.clone(), a_hat, alpha };
    let cache = SgtnCache { gt: gt_caches, prop, h: h_all, hw: hw_all, pre: pre_all, z };
    (output, cache)
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::graphnet::testutil::random_obs;
    use crate::graphnet::{build_input_graph, SgtnHyper, SgtnModel};

    use super::*;

    /// Attention weights one-hot on channel `t` (via a huge logit).
    fn one_hot_weights(channels: usize, t: usize) -> Tensor2 {
        let mut w = Tensor2::zeros(channels, EDGE_FEAT_DIM + 1);
        for c in 0..channels {
            w.set(c, t, 1e3);
        }
        w
    }

    fn small_graph(n: usize, seed: u64) -> super::super::InputGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = random_obs(n, 8, &mut rng);
        build_input_graph(&obs, &[0.5; 6]).unwrap()
    }

    #[test]
    fn identity_selection_gives_identity_adjacency() {
        let g = small_graph(4, 1);
        let w = one_hot_weights(2, EDGE_FEAT_DIM);
        let out = gt_layer(None, &g.adjacency, &w, Some(&w));
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((out.a_p[c].get(i, j) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn one_hot_channel_matches_hand_product() {
        // 3-node graph, attention pinned to kernel channel 2.
        let g = small_graph(3, 2);
        let t = 2;
        let w = one_hot_weights(1, t);
        let out = gt_layer(None, &g.adjacency, &w, Some(&w));
        // Hand computation: M = A_t * A_t, then row-normalize.
        let a = |i: usize, j: usize| g.adjacency.get(i, j, t);
        for i in 0..3 {
            let row: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|k| a(i, k) * a(k, j)).sum::<f64>())
                .collect();
            let sum: f64 = row.iter().sum();
            for j in 0..3 {
                let want = if sum > 0.0 { row[j] / sum } else { row[j] };
                assert!(
                    (out.a_p[0].get(i, j) - want).abs() < 1e-9,
                    "({i},{j}): {} vs {want}",
                    out.a_p[0].get(i, j)
                );
            }
        }
    }

    #[test]
    fn uniform_logits_equal_mean_channel_product() {
        let g = small_graph(5, 3);
        let w = Tensor2::zeros(1, EDGE_FEAT_DIM + 1); // softmax -> uniform
        let out = gt_layer(None, &g.adjacency, &w, Some(&w));
        let n = 5;
        let ch = EDGE_FEAT_DIM + 1;
        let mut mean = Tensor2::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..ch).map(|t| g.adjacency.get(i, j, t)).sum();
                mean.set(i, j, v / ch as f64);
            }
        }
        let mut prod = mean.matmul(&mean).unwrap();
        super::row_normalize(&mut prod);
        for i in 0..n {
            for j in 0..n {
                assert!((out.a_p[0].get(i, j) - prod.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_rows_sum_to_one_and_ap_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = small_graph(6, 5);
        let model = SgtnModel::new(SgtnHyper { d_v: 8, ..Default::default() }, &mut rng).unwrap();
        let (out, cache) = model.forward(&g);
        for alpha in &out.alpha {
            for c in 0..alpha.rows() {
                let s: f64 = alpha.row(c).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        for layer in &cache.gt {
            for (c, norm) in layer.norm.iter().enumerate() {
                for i in 0..norm.rows() {
                    let s: f64 = norm.row(i).iter().sum();
                    assert!(
                        (s - 1.0).abs() < 1e-9 || s.abs() < 1e-15,
                        "layer channel {c} row {i} sums to {s}"
                    );
                }
            }
        }
        // Four selections for a 3-layer stack: two on the first layer.
        assert_eq!(out.alpha.len(), 4);
    }

    #[test]
    fn zero_adjacency_identity_weights_pass_h_through() {
        let n = 3;
        let a = Tensor2::zeros(n, n);
        let h = Tensor2::from_vec(n, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]).unwrap();
        let w = Tensor2::eye(2);
        let out = gcn_layer(&a, &h, &w, true);
        for i in 0..n {
            for j in 0..2 {
                assert!((out.get(i, j) - h.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_node_hand_computation() {
        let a = Tensor2::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let h = Tensor2::eye(2);
        let w = Tensor2::eye(2);
        let out = gcn_layer(&a, &h, &w, true);
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.get(i, j) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_applies_on_hidden_layers_only() {
        let a = Tensor2::zeros(2, 2);
        let h = Tensor2::from_vec(2, 1, vec![-1.0, 2.0]).unwrap();
        let w = Tensor2::eye(1);
        let hidden = gcn_layer(&a, &h, &w, false);
        assert_eq!(hidden.get(0, 0), 0.0);
        assert_eq!(hidden.get(1, 0), 2.0);
        let last = gcn_layer(&a, &h, &w, true);
        assert_eq!(last.get(0, 0), -1.0);
    }

    #[test]
    fn single_node_graph_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = small_graph(1, 7);
        let model = SgtnModel::new(SgtnHyper { d_v: 8, ..Default::default() }, &mut rng).unwrap();
        let (out, _) = model.forward(&g);
        assert_eq!(out.node_logits.rows(), 1);
        assert_eq!(out.node_logits.cols(), 10);
        assert!(out.node_logits.is_finite());
        assert!(out.z.is_finite());
        assert_eq!(out.edge_logits.dim0(), 1);
    }

    #[test]
    fn outputs_finite_over_random_graph_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = SgtnModel::new(SgtnHyper { d_v: 8, ..Default::default() }, &mut rng).unwrap();
        for n in 1..=16 {
            let g = small_graph(n, 100 + n as u64);
            let (out, _) = model.forward(&g);
            assert!(out.node_logits.is_finite(), "n={n}");
            assert!(out.z.is_finite(), "n={n}");
            assert!(out.edge_logits.is_finite(), "n={n}");
            for ch in &out.a_hat {
                assert!(ch.is_finite(), "n={n}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(50);
        for round in 0..50 {
            let n = seed_rng.random_range(2..=12);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + round);
            let obs = random_obs(n, 8, &mut rng);
            let g = build_input_graph(&obs, &[0.5; 6]).unwrap();
            let model =
                SgtnModel::new(SgtnHyper { d_v: 8, ..Default::default() }, &mut rng).unwrap();
            let (out, _) = model.forward(&g);

            // Random permutation of the ROIs.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut pobs = obs.clone();
            pobs.rois = perm.iter().map(|&p| obs.rois[p].clone()).collect();
            let pg = build_input_graph(&pobs, &[0.5; 6]).unwrap();
            let (pout, _) = model.forward(&pg);

            for (new_i, &old_i) in perm.iter().enumerate() {
                for k in 0..out.node_logits.cols() {
                    let a = pout.node_logits.get(new_i, k);
                    let b = out.node_logits.get(old_i, k);
                    assert!((a - b).abs() < 1e-9, "round {round} node ({new_i},{k})");
                }
                for (new_j, &old_j) in perm.iter().enumerate() {
                    for t in 0..EDGE_TYPE_COUNT {
                        let a = pout.edge_logits.get(new_i, new_j, t);
                        let b = out.edge_logits.get(old_i, old_j, t);
                        assert!((a - b).abs() < 1e-9, "round {round} edge");
                    }
                }
            }
        }
    }

    #[test]
    fn forced_identity_isolates_nodes() {
        // Pin every selection to the identity channel: message passing
        // degenerates to per-node transforms, so perturbing one node's
        // features must leave every other node's logits unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model =
            SgtnModel::new(SgtnHyper { d_v: 8, ..Default::default() }, &mut rng).unwrap();
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            if name.starts_with("gt") {
                let w = model.params.param_mut(&name);
                w.fill(0.0);
                for c in 0..w.rows() {
                    w.set(c, EDGE_FEAT_DIM, 1e3);
                }
            }
        }
        let obs = random_obs(5, 8, &mut rng);
        let g = build_input_graph(&obs, &[0.5; 6]).unwrap();
        let (out, _) = model.forward(&g);

        let mut obs2 = obs.clone();
        for v in &mut obs2.rois[2].appearance {
            *v += 1.0;
        }
        let g2 = build_input_graph(&obs2, &[0.5; 6]).unwrap();
        let (out2, _) = model.forward(&g2);
        for i in 0..5 {
            for k in 0..out.node_logits.cols() {
                let same = (out.node_logits.get(i, k) - out2.node_logits.get(i, k)).abs() < 1e-9;
                if i == 2 {
                    continue;
                }
                assert!(same, "node {i} changed");
            }
        }
    }
}
