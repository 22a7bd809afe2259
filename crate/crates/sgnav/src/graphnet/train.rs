//! Supervised training of the network on labeled scene-graph samples, and
//! the node / per-edge-type quality metrics reported per epoch.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtruth::{SceneGraphGT, ALL_EDGE_TYPES, EDGE_TYPE_COUNT};

use super::backward::loss;
use super::{InputGraph, SgtnModel};

/// One supervised example: a built input graph and its labels, with the
/// same node ordering in both.
#[derive(Debug, Clone)]
pub struct SggSample {
    pub graph: InputGraph,
    pub gt: SceneGraphGT,
}

/// Knobs for supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSggConfig {
    pub epochs: usize,
    /// Graphs per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the edge loss relative to the node loss.
    pub w_edge: f64,
    /// Fraction of samples held out for per-epoch evaluation. When the
    /// resulting holdout is empty the training set is evaluated instead.
    pub holdout_fraction: f64,
    /// Seed for the split and the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainSggConfig {
    fn default() -> Self {
        TrainSggConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            w_edge: 1.0,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainSggConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("train config: epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("train config: batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg(format!("train config: bad learning rate {}", self.lr)));
        }
        if !(self.w_edge.is_finite() && self.w_edge >= 0.0) {
            return Err(Error::arg(format!("train config: bad edge weight {}", self.w_edge)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::arg(format!(
                "train config: holdout fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Prediction quality over a sample set. Edge metrics use threshold 0.5 on
/// the per-type sigmoid, counted over ordered off-diagonal pairs.
#[derive(Debug, Clone, Copy)]
pub struct SggMetrics {
    /// Fraction of nodes whose argmax logit is the labeled class.
    pub node_accuracy: f64,
    pub edge_precision: [f64; EDGE_TYPE_COUNT],
    pub edge_recall: [f64; EDGE_TYPE_COUNT],
    pub edge_f1: [f64; EDGE_TYPE_COUNT],
    /// Mean of the per-type F1 scores.
    pub macro_f1: f64,
    pub mean_loss: f64,
}

/// One epoch of training as reported by [`train_sgg`].
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sample loss as encountered during the epoch (pre-update).
    pub train_loss: f64,
    pub holdout: SggMetrics,
}

/// Precision/recall/F1 from counts. A type with no labeled positives and no
/// predicted positives scores 1.0 across the board — the predictor was
/// exactly right to stay silent; F1 is 0 when both P and R are 0.
fn prf(tp: usize, fp: usize, fneg: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Evaluate the model over `samples`.
pub fn eval_sgg(model: &SgtnModel, samples: &[SggSample], w_edge: f64) -> Result<SggMetrics> {
    if samples.is_empty() {
        return Err(Error::arg("eval: no samples"));
    }
    let mut correct = 0usize;
    let mut total_nodes = 0usize;
    let mut tp = [0usize; EDGE_TYPE_COUNT];
    let mut fp = [0usize; EDGE_TYPE_COUNT];
    let mut fneg = [0usize; EDGE_TYPE_COUNT];
    let mut loss_sum = 0.0;
    for s in samples {
        let (out, _) = model.forward(&s.graph);
        let (l, _) = loss(&out, &s.gt, w_edge)?;
        loss_sum += l;
        let n = s.graph.n;
        for i in 0..n {
            let row = out.node_logits.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .expect("nonempty logit row");
            if argmax == s.gt.node_classes[i].id() {
                correct += 1;
            }
            total_nodes += 1;
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for (t, &ty) in ALL_EDGE_TYPES.iter().enumerate() {
                    let pred = out.edge_logits.get(i, j, t) > 0.0;
                    let actual = s.gt.label(i, j, ty);
                    match (pred, actual) {
                        (true, true) => tp[t] += 1,
                        (true, false) => fp[t] += 1,
                        (false, true) => fneg[t] += 1,
                        (false, false) => {}
                    }
                }
            }
        }
    }
    let mut edge_precision = [0.0; EDGE_TYPE_COUNT];
    let mut edge_recall = [0.0; EDGE_TYPE_COUNT];
    let mut edge_f1 = [0.0; EDGE_TYPE_COUNT];
    for t in 0..EDGE_TYPE_COUNT {
        let (p, r, f1) = prf(tp[t], fp[t], fneg[t]);
        edge_precision[t] = p;
        edge_recall[t] = r;
        edge_f1[t] = f1;
    }
    Ok(SggMetrics {
        node_accuracy: correct as f64 / total_nodes as f64,
        edge_precision,
        edge_recall,
        edge_f1,
        macro_f1: edge_f1.iter().sum::<f64>() / EDGE_TYPE_COUNT as f64,
        mean_loss: loss_sum / samples.len() as f64,
    })
}

/// Train the model in place with Adam, one graph at a time, gradients
/// averaged over each minibatch. Deterministic for a given config seed.
pub fn train_sgg(
    model: &mut SgtnModel,
    samples: &[SggSample],
    cfg: &TrainSggConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::arg("train: no samples"));
    }
    for (idx, s) in samples.iter().enumerate() {
        if s.graph.node_feats.cols() != model.hyper.d_v {
            return Err(Error::dim(format!(
                "sample {idx}: feature width {} but model expects {}",
                s.graph.node_feats.cols(),
                model.hyper.d_v
            )));
        }
        if s.gt.n() != s.graph.n {
            return Err(Error::dim(format!(
                "sample {idx}: {} labeled nodes for a {}-node graph",
                s.gt.n(),
                s.graph.n
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let holdout_len = (samples.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let (holdout_idx, train_slice) = order.split_at(holdout_len);
    let mut train_idx = train_slice.to_vec();
    let eval_set: Vec<SggSample> = if holdout_idx.is_empty() { &train_idx } else { holdout_idx }
        .iter()
        .map(|&i| samples[i].clone())
        .collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &si in batch {
                let s = &samples[si];
                let (out, cache) = model.forward(&s.graph);
                let (l, mut grad) = loss(&out, &s.gt, cfg.w_edge)?;
                loss_sum += l;
                grad.scale(scale);
                model.backward(&s.graph, &cache, &grad);
            }
            model.params.adam_step(cfg.lr)?;
        }
        let holdout = eval_sgg(model, &eval_set, cfg.w_edge)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            holdout,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use crate::graphnet::testutil::random_obs;
    use crate::graphnet::{build_input_graph, SgtnHyper};
    use crate::gtruth::EdgeType;
    use crate::world::ALL_CLASSES;

    use super::*;

    /// Samples over random ROIs where node classes are constant and a
    /// vertical-proximity rule generates the only edge type — both signals
    /// the network can actually pick up from its inputs.
    fn toy_samples(count: usize, seed: u64, d_v: usize) -> Vec<SggSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let n = rng.random_range(3..=6);
                let obs = random_obs(n, d_v, &mut rng);
                let graph = build_input_graph(&obs, &[0.5; 6]).unwrap();
                let ids: Vec<u32> = obs.rois.iter().map(|r| r.object_id).collect();
                let classes = vec![ALL_CLASSES[2]; n];
                let mut gt = SceneGraphGT::empty(ids, classes);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let dy = (obs.rois[i].est_pos.y - obs.rois[j].est_pos.y).abs();
                        if dy < 0.3 {
                            gt.set_label(i, j, EdgeType::CoplanarY, true);
                        }
                    }
                }
                SggSample { graph, gt }
            })
            .collect()
    }

    fn toy_model(seed: u64, d_v: usize) -> SgtnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SgtnModel::new(SgtnHyper { d_v, d: 16, ..Default::default() }, &mut rng).unwrap()
    }

    #[test]
    fn single_sample_memorizes_within_500_steps() {
        // Three distinct-class objects on one plane, every pair coplanar in
        // y: a sample the heads can represent with clean margins, so the
        // optimizer must drive the loss to the floor. Exercises every
        // gradient path without fighting head capacity.
        use crate::world::{AgentPose, ObjectClass, Observation, Roi, Vec3};
        let roi = |id: u32, class: ObjectClass, offset: f64| Roi {
            object_id: id,
            class,
            appearance: (0..8).map(|k| ((k as f64 + offset) * 0.9).sin()).collect(),
            est_dims: Vec3 { x: 0.6, y: 0.4, z: 0.6 },
            est_pos: Vec3 { x: 0.3 * offset, y: 0.5, z: 1.0 + 0.2 * offset },
        };
        let obs = Observation {
            rois: vec![
                roi(0, ObjectClass::Table, 0.0),
                roi(1, ObjectClass::Chair, 1.0),
                roi(2, ObjectClass::Sofa, 2.0),
            ],
            pose: AgentPose { position: Vec3 { x: 0.0, y: 0.0, z: 0.0 }, heading: 0.0 },
        };
        let graph = build_input_graph(&obs, &[0.5; 6]).unwrap();
        let classes: Vec<_> = obs.rois.iter().map(|r| r.class).collect();
        let mut gt = SceneGraphGT::empty(vec![0, 1, 2], classes);
        for i in 0..3 {
            for j in (i + 1)..3 {
                gt.set_label(i, j, EdgeType::CoplanarY, true);
            }
        }
        let samples = vec![SggSample { graph, gt }];
        let mut model = toy_model(41, 8);
        let cfg = TrainSggConfig {
            epochs: 500,
            batch_size: 1,
            lr: 1e-1,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let history = train_sgg(&mut model, &samples, &cfg).unwrap();
        let last = history.last().unwrap();
        assert!(last.train_loss < 1e-3, "final loss {}", last.train_loss);
    }

    #[test]
    fn training_reduces_holdout_loss() {
        let samples = toy_samples(24, 42, 8);
        let mut model = toy_model(43, 8);
        let cfg = TrainSggConfig { epochs: 30, batch_size: 4, lr: 3e-3, ..Default::default() };
        let history = train_sgg(&mut model, &samples, &cfg).unwrap();
        let first = history.first().unwrap().holdout.mean_loss;
        let last = history.last().unwrap().holdout.mean_loss;
        assert!(
            last < 0.5 * first,
            "holdout loss did not drop: {first} -> {last}"
        );
        let m = history.last().unwrap().holdout;
        assert!((0.0..=1.0).contains(&m.node_accuracy));
        for t in 0..EDGE_TYPE_COUNT {
            assert!((0.0..=1.0).contains(&m.edge_precision[t]));
            assert!((0.0..=1.0).contains(&m.edge_recall[t]));
            assert!((0.0..=1.0).contains(&m.edge_f1[t]));
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let samples = toy_samples(10, 44, 8);
        let cfg = TrainSggConfig { epochs: 3, batch_size: 4, ..Default::default() };
        let mut a = toy_model(45, 8);
        let mut b = toy_model(45, 8);
        let ha = train_sgg(&mut a, &samples, &cfg).unwrap();
        let hb = train_sgg(&mut b, &samples, &cfg).unwrap();
        for (ea, eb) in ha.iter().zip(&hb) {
            assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
            assert_eq!(ea.holdout.mean_loss.to_bits(), eb.holdout.mean_loss.to_bits());
        }
        assert_eq!(a.to_json_string(), b.to_json_string());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let samples = toy_samples(2, 46, 8);
        let mut model = toy_model(47, 8);
        for cfg in [
            TrainSggConfig { epochs: 0, ..Default::default() },
            TrainSggConfig { batch_size: 0, ..Default::default() },
            TrainSggConfig { lr: 0.0, ..Default::default() },
            TrainSggConfig { lr: f64::NAN, ..Default::default() },
            TrainSggConfig { w_edge: -1.0, ..Default::default() },
            TrainSggConfig { holdout_fraction: 1.0, ..Default::default() },
        ] {
            assert!(train_sgg(&mut model, &samples, &cfg).is_err(), "{cfg:?}");
        }
        assert!(train_sgg(&mut model, &[], &TrainSggConfig::default()).is_err());
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let samples = toy_samples(2, 48, 8);
        let mut model = toy_model(49, 16);
        assert!(train_sgg(&mut model, &samples, &TrainSggConfig::default()).is_err());
    }

    #[test]
    fn prf_conventions() {
        assert_eq!(prf(0, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(prf(0, 3, 0), (0.0, 1.0, 0.0));
        assert_eq!(prf(0, 0, 3), (1.0, 0.0, 0.0));
        let (p, r, f1) = prf(2, 2, 2);
        assert!((p - 0.5).abs() < 1e-15);
        assert!((r - 0.5).abs() < 1e-15);
        assert!((f1 - 0.5).abs() < 1e-15);
        assert_eq!(prf(5, 0, 0), (1.0, 1.0, 1.0));
    }

    #[test]
    fn eval_rejects_empty_set() {
        let model = toy_model(50, 8);
        assert!(eval_sgg(&model, &[], 1.0).is_err());
    }
}


