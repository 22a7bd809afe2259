//! Explicit reverse-mode gradients for the forward pass, and the
//! supervised scene-graph loss (node cross-entropy plus multi-label edge
//! binary cross-entropy).
//!
//! The backward pass takes upstream gradients with respect to all three
//! outputs — node logits, edge logits, and the node embedding `z` — so the
//! supervised path and the policy path (which consumes `z`) share one
//! implementation.

use crate::error::{Error, Result};
use crate::gtruth::{SceneGraphGT, ALL_EDGE_TYPES, EDGE_TYPE_COUNT};
use crate::optim::ParamStore;
use crate::tensor::{bce_multilabel, cross_entropy, softmax_backward, Tensor2, Tensor3};

use super::forward::{Selection, SgtnCache};
use super::{InputGraph, SgtnHyper, SgtnOutput};

/// Upstream gradients for one forward pass, one slot per output.
///
/// Diagonal entries of `d_edge_logits` are ignored: the forward pass never
/// writes edge logits for i == j.
#[derive(Debug, Clone)]
pub struct SgtnGrad {
    pub d_node_logits: Tensor2,
    pub d_edge_logits: Tensor3,
    pub d_z: Tensor2,
}

impl SgtnGrad {
    /// All-zero upstream gradients shaped like `out`.
    pub fn zeros_like(out: &SgtnOutput) -> SgtnGrad {
        SgtnGrad {
            d_node_logits: Tensor2::zeros(out.node_logits.rows(), out.node_logits.cols()),
            d_edge_logits: Tensor3::zeros(
                out.edge_logits.dim0(),
                out.edge_logits.dim1(),
                out.edge_logits.channels(),
            ),
            d_z: Tensor2::zeros(out.z.rows(), out.z.cols()),
        }
    }

    /// Scale every upstream gradient by `s` (e.g. 1/batch for mean-loss
    /// accumulation).
    pub fn scale(&mut self, s: f64) {
        self.d_node_logits.scale(s);
        self.d_edge_logits.scale(s);
        self.d_z.scale(s);
    }
}

/// Supervised loss: mean node cross-entropy plus `w_edge` times the mean
/// multi-label binary cross-entropy over off-diagonal edge logits.
///
/// `gt` must use the same node ordering as the observation the output was
/// computed from. Returns the scalar loss and the upstream gradients for
/// [`backward_into`] (`d_z` is zero — the embedding is not supervised here).
pub fn loss(out: &SgtnOutput, gt: &SceneGraphGT, w_edge: f64) -> Result<(f64, SgtnGrad)> {
    let n = out.node_logits.rows();
    if gt.n() != n {
        return Err(Error::arg(format!(
            "loss: output has {n} nodes but ground truth has {}",
            gt.n()
        )));
    }
    let labels: Vec<usize> = gt.node_classes.iter().map(|c| c.id()).collect();
    let (node_loss, d_node_logits) = cross_entropy(&out.node_logits, &labels)?;

    // Flatten off-diagonal ordered pairs row-major into an E x 4 matrix.
    let pairs = n * (n - 1);
    let mut flat_logits = Tensor2::zeros(pairs, EDGE_TYPE_COUNT);
    let mut flat_targets = Tensor2::zeros(pairs, EDGE_TYPE_COUNT);
    let mut row = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (t, &ty) in ALL_EDGE_TYPES.iter().enumerate() {
                flat_logits.set(row, t, out.edge_logits.get(i, j, t));
                flat_targets.set(row, t, if gt.label(i, j, ty) { 1.0 } else { 0.0 });
            }
            row += 1;
        }
    }
    let (edge_loss, d_flat) = bce_multilabel(&flat_logits, &flat_targets)?;

    let mut d_edge_logits = Tensor3::zeros(n, n, EDGE_TYPE_COUNT);
    let mut row = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for t in 0..EDGE_TYPE_COUNT {
                d_edge_logits.set(i, j, t, w_edge * d_flat.get(row, t));
            }
            row += 1;
        }
    }
    let d_z = Tensor2::zeros(out.z.rows(), out.z.cols());
    Ok((node_loss + w_edge * edge_loss, SgtnGrad { d_node_logits, d_edge_logits, d_z }))
}

/// Backward through row normalization. `norm` is the normalized matrix,
/// `rowsum` the pre-normalization row sums; rows that summed to zero passed
/// through unchanged, so their gradient does too.
fn rownorm_backward(norm: &Tensor2, rowsum: &[f64], d_norm: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(norm.rows(), norm.cols());
    for i in 0..norm.rows() {
        let r = rowsum[i];
        if r > 0.0 {
            let dot: f64 = d_norm.row(i).iter().zip(norm.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..norm.cols() {
                out.set(i, j, (d_norm.get(i, j) - dot) / r);
            }
        } else {
            out.row_mut(i).copy_from_slice(d_norm.row(i));
        }
    }
    out
}

/// Backward through `S = D^{-1/2} (A + I) D^{-1/2}` to the adjacency.
///
/// Each degree is `1 + row sum of A` unless it was clamped, in which case
/// it is a constant and contributes no gradient.
fn propagation_backward(s: &Tensor2, deg: &[f64], clamped: &[bool], d_s: &Tensor2) -> Tensor2 {
    let n = s.rows();
    let mut d_deg = vec![0.0; n];
    for i in 0..n {
        if clamped[i] {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..n {
            acc += d_s.get(i, j) * s.get(i, j); // deg_i in row i of S
            acc += d_s.get(j, i) * s.get(j, i); // deg_i in column i of S
        }
        d_deg[i] = -acc / (2.0 * deg[i]);
    }
    let mut d_a = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let direct = d_s.get(i, j) / (deg[i] * deg[j]).sqrt();
            d_a.set(i, j, direct + d_deg[i]);
        }
    }
    d_a
}

/// Backward through one soft channel selection: route the per-channel
/// blended-adjacency gradient onto the selection logits.
fn selection_backward(
    sel: &Selection,
    d_sel: &[Tensor2],
    adjacency: &Tensor3,
    store: &mut ParamStore,
) {
    let channels = sel.alpha.rows();
    let t_count = sel.alpha.cols();
    let n = adjacency.dim0();
    let mut d_w = Tensor2::zeros(channels, t_count);
    for c in 0..channels {
        let mut d_alpha = vec![0.0; t_count];
        for (t, slot) in d_alpha.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += d_sel[c].get(i, j) * adjacency.get(i, j, t);
                }
            }
            *slot = acc;
        }
        let d_logits = softmax_backward(sel.alpha.row(c), &d_alpha);
        d_w.row_mut(c).copy_from_slice(&d_logits);
    }
    store.accumulate_grad(&sel.param, &d_w);
}

/// Accumulate parameter gradients for the given upstream output gradients
/// into `store`, mirroring the forward pass in reverse.
pub(crate) fn backward_into(
    hyper: SgtnHyper,
    g: &InputGraph,
    cache: &SgtnCache,
    grad: &SgtnGrad,
    store: &mut ParamStore,
) {
    let n = g.n;
    let c_count = hyper.channels;
    let d = hyper.d;

    // Node head: logits = z * W.
    let node_w = store.param("node_head.w").clone();
    let d_node_w = cache.z.transpose().matmul(&grad.d_node_logits).expect("head shapes");
    store.accumulate_grad("node_head.w", &d_node_w);
    let mut d_z = grad.d_z.clone();
    d_z.add_scaled(
        &grad.d_node_logits.matmul(&node_w.transpose()).expect("head shapes"),
        1.0,
    );

    // Edge head: logits[i][j] = b + a_hat[.][i][j] * W.
    let edge_w = store.param("edge_head.w").clone();
    let mut d_edge_w = Tensor2::zeros(c_count, EDGE_TYPE_COUNT);
    let mut d_edge_b = Tensor2::zeros(1, EDGE_TYPE_COUNT);
    let last = cache.gt.last().expect("at least one layer");
    let a_hat = &last.comp;
    let mut d_a_hat = vec![Tensor2::zeros(n, n); c_count];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for t in 0..EDGE_TYPE_COUNT {
                let up = grad.d_edge_logits.get(i, j, t);
                if up == 0.0 {
                    continue;
                }
                d_edge_b.add_at(0, t, up);
                for (c, d_ah) in d_a_hat.iter_mut().enumerate() {
                    d_edge_w.add_at(c, t, a_hat[c].get(i, j) * up);
                    d_ah.add_at(i, j, up * edge_w.get(c, t));
                }
            }
        }
    }
    store.accumulate_grad("edge_head.w", &d_edge_w);
    store.accumulate_grad("edge_head.b", &d_edge_b);

    // GCN stacks, one per channel; S is shared by all three layers, so its
    // gradient accumulates across them before going back to the adjacency.
    let mut d_final_adj: Vec<Tensor2> = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let (s, deg, clamped) = &cache.prop[c];
        let mut d_h = Tensor2::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                d_h.set(i, j, d_z.get(i, c * d + j));
            }
        }
        let mut d_s = Tensor2::zeros(n, n);
        for l in (0..hyper.gcn_layers).rev() {
            let pre = &cache.pre[c][l];
            let hw = &cache.hw[c][l];
            let h_in = &cache.h[c][l];
            let w_name = format!("gcn{l}.c{c}.w");
            let w = store.param(&w_name).clone();

            let mut d_pre = d_h;
            if l + 1 < hyper.gcn_layers {
                for (idx, slot) in d_pre.data_mut().iter_mut().enumerate() {
                    if pre.data()[idx] <= 0.0 {
                        *slot = 0.0;
                    }
                }
            }
            d_s.add_scaled(&d_pre.matmul(&hw.transpose()).expect("gcn shapes"), 1.0);
            let d_hw = s.transpose().matmul(&d_pre).expect("gcn shapes");
            let d_w = h_in.transpose().matmul(&d_hw).expect("gcn shapes");
            store.accumulate_grad(&w_name, &d_w);
            d_h = d_hw.matmul(&w.transpose()).expect("gcn shapes");
        }
        d_final_adj.push(propagation_backward(s, deg, clamped, &d_s));
    }

    // Meta-path stack, top layer down. `d_norm` is the gradient flowing
    // into each layer's normalized adjacency; the composition `q1 * q2`
    // splits it between the layer below (q1) and the new selection (q2).
    // The top layer's pre-normalization product is also `a_hat`, so it
    // picks up the edge-head gradient directly.
    let mut d_norm = d_final_adj;
    for layer in (0..hyper.gt_layers).rev() {
        let lc = &cache.gt[layer];
        let is_last = layer + 1 == hyper.gt_layers;
        let mut d_comp: Vec<Tensor2> = (0..c_count)
            .map(|c| rownorm_backward(&lc.norm[c], &lc.rowsum[c], &d_norm[c]))
            .collect();
        if is_last {
            for (dc, da) in d_comp.iter_mut().zip(&d_a_hat) {
                dc.add_scaled(da, 1.0);
            }
        }
        let new_sel = lc.sels.last().expect("every layer selects");
        let mut d_q1 = Vec::with_capacity(c_count);
        let mut d_q2 = Vec::with_capacity(c_count);
        for c in 0..c_count {
            d_q1.push(d_comp[c].matmul(&new_sel.sel[c].transpose()).expect("square"));
            d_q2.push(lc.q1[c].transpose().matmul(&d_comp[c]).expect("square"));
        }
        selection_backward(new_sel, &d_q2, &g.adjacency, store);
        if layer == 0 {
            selection_backward(&lc.sels[0], &d_q1, &g.adjacency, store);
        } else {
            d_norm = d_q1;
        }
    }
}
