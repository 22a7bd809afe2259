//! JSONL datasets for supervised scene-graph learning: a metadata record
//! on the first line, then one labeled sample per line.
//!
//! A sample pairs a frustum observation with the ground-truth relations
//! over exactly the observed objects, so training never needs the source
//! scenes. Node order is ascending object id everywhere — in the ROI
//! list, in the recovered label graph, and in the kernelized input graph
//! — which keeps the three views aligned by position.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphnet::{build_input_graph, SggSample};
use crate::gtruth::{extract_gt, visible_subgraph, EdgeType, SceneGraphGT};
use crate::world::{observe, sample_free_pose, AgentPose, ObsConfig, Observation, Scene};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Poses tried per sample before giving up on the node-count bounds.
const POSE_ATTEMPTS: usize = 100;

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    /// Coplanarity tolerance the labels were extracted with, meters.
    pub eps: f64,
    /// Observation parameters the samples were rendered with.
    pub obs: ObsConfig,
    /// Base seed for pose sampling and observation noise.
    pub seed: u64,
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    /// Seed of the source scene.
    pub scene_seed: u64,
    pub pose: AgentPose,
    pub rois: Vec<crate::world::Roi>,
    /// True relations among the observed objects, as strictly ascending
    /// (min id, max id, type) triples.
    pub edges: Vec<(u32, u32, EdgeType)>,
}

impl DatasetRecord {
    /// Rebuild the training view: the kernelized input graph plus its
    /// label graph, nodes in ROI order.
    pub fn to_sample(&self, kernel_sigmas: &[f64; 6]) -> Result<SggSample> {
        let ids: Vec<u32> = self.rois.iter().map(|r| r.object_id).collect();
        let classes = self.rois.iter().map(|r| r.class).collect();
        let mut gt = SceneGraphGT::empty(ids, classes);
        for &(a, b, t) in &self.edges {
            let i = gt
                .index_of(a)
                .ok_or_else(|| Error::arg(format!("edge endpoint {a} not observed")))?;
            let j = gt
                .index_of(b)
                .ok_or_else(|| Error::arg(format!("edge endpoint {b} not observed")))?;
            gt.set_label(i, j, t, true);
        }
        let obs = Observation { rois: self.rois.clone(), pose: self.pose };
        let graph = build_input_graph(&obs, kernel_sigmas)?;
        Ok(SggSample { graph, gt })
    }
}

/// Convert every record; order is preserved.
pub fn to_samples(records: &[DatasetRecord], kernel_sigmas: &[f64; 6]) -> Result<Vec<SggSample>> {
    records.iter().map(|r| r.to_sample(kernel_sigmas)).collect()
}

/// Knobs for [`extract_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOpts {
    pub poses_per_scene: usize,
    /// Coplanarity tolerance, meters.
    pub eps: f64,
    pub seed: u64,
    /// Poses are rejected until the observed node count lands in
    /// `min_nodes..=max_nodes`.
    pub min_nodes: usize,
    pub max_nodes: usize,
}

impl Default for ExtractOpts {
    fn default() -> Self {
        ExtractOpts {
            poses_per_scene: 10,
            eps: 0.05,
            seed: 0,
            min_nodes: 1,
            max_nodes: usize::MAX,
        }
    }
}

impl ExtractOpts {
    pub fn validate(&self) -> Result<()> {
        if self.poses_per_scene == 0 {
            return Err(Error::arg("poses_per_scene must be at least 1"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::arg(format!("eps must be positive, got {}", self.eps)));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(Error::arg(format!(
                "node bounds {}..={} are unsatisfiable",
                self.min_nodes, self.max_nodes
            )));
        }
        Ok(())
    }
}

/// Sample labeled observations from every scene.
///
/// Each scene draws from its own RNG stream (derived from `opts.seed` and
/// the scene seed), so the records of one scene do not depend on which
/// other scenes are in the batch.
pub fn extract_dataset(
    scenes: &[Scene],
    obs_cfg: &ObsConfig,
    opts: &ExtractOpts,
) -> Result<(DatasetMeta, Vec<DatasetRecord>)> {
    opts.validate()?;
    obs_cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::arg("no scenes to extract from"));
    }
    let mut records = Vec::with_capacity(scenes.len() * opts.poses_per_scene);
    for scene in scenes {
        let gt = extract_gt(scene, opts.eps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ scene.seed.rotate_left(17));
        for _ in 0..opts.poses_per_scene {
            let (pose, obs) = sample_bounded_observation(scene, obs_cfg, opts, &mut rng)?;
            let ids: Vec<u32> = obs.rois.iter().map(|r| r.object_id).collect();
            let sub = visible_subgraph(&gt, &ids)?;
            records.push(DatasetRecord {
                scene_seed: scene.seed,
                pose,
                rois: obs.rois,
                edges: sub.edge_triples(),
            });
        }
    }
    let meta = DatasetMeta {
        version: DATASET_FORMAT_VERSION,
        eps: opts.eps,
        obs: *obs_cfg,
        seed: opts.seed,
    };
    Ok((meta, records))
}

fn sample_bounded_observation(
    scene: &Scene,
    obs_cfg: &ObsConfig,
    opts: &ExtractOpts,
    rng: &mut ChaCha8Rng,
) -> Result<(AgentPose, Observation)> {
    for _ in 0..POSE_ATTEMPTS {
        let pose = sample_free_pose(scene, rng)?;
        let obs = observe(scene, pose, obs_cfg, rng);
        if (opts.min_nodes..=opts.max_nodes).contains(&obs.rois.len()) {
            return Ok((pose, obs));
        }
    }
    Err(Error::Generation(format!(
        "scene {}: no pose with {}..={} visible objects in {POSE_ATTEMPTS} attempts",
        scene.seed, opts.min_nodes, opts.max_nodes
    )))
}

/// Serialize as canonical JSONL: compact lines, trailing newline.
pub fn to_jsonl_string(meta: &DatasetMeta, records: &[DatasetRecord]) -> String {
    let mut s = serde_json::to_string(meta).expect("metadata serializes");
    s.push('\n');
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

/// Parse and validate a dataset document.
///
/// Beyond per-line JSON shape this enforces the format invariants: a
/// supported version, a self-consistent metadata line, ROIs in strictly
/// ascending object-id order with uniform appearance width, finite
/// geometry, a normalized heading, and strictly ascending edge triples
/// whose endpoints are all observed.
pub fn from_jsonl_str(s: &str) -> Result<(DatasetMeta, Vec<DatasetRecord>)> {
    let mut lines = s.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty dataset".into()))?;
    let meta: DatasetMeta = serde_json::from_str(first)?;
    if meta.version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported dataset format version {}", meta.version)));
    }
    if !(meta.eps.is_finite() && meta.eps > 0.0) {
        return Err(Error::Parse(format!("metadata eps must be positive, got {}", meta.eps)));
    }
    meta.obs.validate()?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            return Err(Error::Parse(format!("line {lineno}: blank line")));
        }
        let rec: DatasetRecord = serde_json::from_str(line)?;
        validate_record(&rec, &meta)
            .map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
        records.push(rec);
    }
    Ok((meta, records))
}

fn validate_record(rec: &DatasetRecord, meta: &DatasetMeta) -> Result<()> {
    if !(rec.pose.position.is_finite()
        && (0.0..2.0 * std::f64::consts::PI).contains(&rec.pose.heading))
    {
        return Err(Error::Parse("pose is not finite and normalized".into()));
    }
    for pair in rec.rois.windows(2) {
        if pair[0].object_id >= pair[1].object_id {
            return Err(Error::Parse("roi object ids must be strictly ascending".into()));
        }
    }
    for roi in &rec.rois {
        if roi.appearance.len() != meta.obs.d_v {
            return Err(Error::Parse(format!(
                "roi {}: appearance width {} does not match metadata d_v {}",
                roi.object_id,
                roi.appearance.len(),
                meta.obs.d_v
            )));
        }
        if roi.appearance.iter().any(|a| !a.is_finite())
            || !roi.est_dims.is_finite()
            || !roi.est_pos.is_finite()
        {
            return Err(Error::Parse(format!("roi {}: non-finite feature", roi.object_id)));
        }
    }
    let ids: Vec<u32> = rec.rois.iter().map(|r| r.object_id).collect();
    for pair in rec.edges.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::Parse("edges must be strictly ascending".into()));
        }
    }
    for &(a, b, _) in &rec.edges {
        if a >= b {
            return Err(Error::Parse(format!("edge ({a}, {b}) is not in canonical order")));
        }
        if ids.binary_search(&a).is_err() || ids.binary_search(&b).is_err() {
            return Err(Error::Parse(format!("edge ({a}, {b}) references an unobserved object")));
        }
    }
    Ok(())
}

pub fn write_dataset(path: &Path, meta: &DatasetMeta, records: &[DatasetRecord]) -> Result<()> {
    std::fs::write(path, to_jsonl_string(meta, records))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, Vec<DatasetRecord>)> {
    let s = std::fs::read_to_string(path)?;
    from_jsonl_str(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_scene, SceneGenConfig, CLASS_COUNT};
    use proptest::prelude::*;

    fn small_scenes(count: u64) -> Vec<Scene> {
        let cfg = SceneGenConfig { rooms: 2, ..Default::default() };
        (0..count).map(|s| generate_scene(s, &cfg).unwrap()).collect()
    }

    #[test]
    fn extraction_round_trips_through_a_file() {
        let scenes = small_scenes(2);
        let opts = ExtractOpts { poses_per_scene: 3, ..Default::default() };
        let (meta, records) = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        assert_eq!(records.len(), 6);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_dataset(&path, &meta, &records).unwrap();
        let (meta2, records2) = read_dataset(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(records, records2);
        assert_eq!(to_jsonl_string(&meta, &records), to_jsonl_string(&meta2, &records2));
    }

    #[test]
    fn extraction_is_deterministic() {
        let scenes = small_scenes(2);
        let opts = ExtractOpts { poses_per_scene: 4, ..Default::default() };
        let a = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        let b = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        assert_eq!(to_jsonl_string(&a.0, &a.1), to_jsonl_string(&b.0, &b.1));
    }

    #[test]
    fn records_agree_with_direct_extraction() {
        let scenes = small_scenes(3);
        let opts = ExtractOpts { poses_per_scene: 5, ..Default::default() };
        let (_, records) = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        for rec in &records {
            let scene = scenes.iter().find(|s| s.seed == rec.scene_seed).unwrap();
            let gt = extract_gt(scene, opts.eps).unwrap();
            let ids: Vec<u32> = rec.rois.iter().map(|r| r.object_id).collect();
            let sub = visible_subgraph(&gt, &ids).unwrap();
            assert_eq!(rec.edges, sub.edge_triples());
            for roi in &rec.rois {
                assert_eq!(roi.class, scene.object(roi.object_id).unwrap().class);
            }
        }
    }

    #[test]
    fn node_count_bounds_are_enforced() {
        let scenes = small_scenes(2);
        let opts =
            ExtractOpts { poses_per_scene: 8, max_nodes: 8, ..Default::default() };
        let (_, records) = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        assert!(records.iter().all(|r| (1..=8).contains(&r.rois.len())));

        let impossible = ExtractOpts { min_nodes: 50, max_nodes: 50, ..Default::default() };
        assert!(extract_dataset(&scenes, &ObsConfig::default(), &impossible).is_err());
    }

    #[test]
    fn bad_opts_are_rejected() {
        let scenes = small_scenes(1);
        for opts in [
            ExtractOpts { poses_per_scene: 0, ..Default::default() },
            ExtractOpts { eps: 0.0, ..Default::default() },
            ExtractOpts { min_nodes: 0, ..Default::default() },
            ExtractOpts { min_nodes: 5, max_nodes: 4, ..Default::default() },
        ] {
            assert!(extract_dataset(&scenes, &ObsConfig::default(), &opts).is_err());
        }
        assert!(extract_dataset(&[], &ObsConfig::default(), &ExtractOpts::default()).is_err());
    }

    #[test]
    fn samples_rebuild_the_labels() {
        let scenes = small_scenes(2);
        let opts = ExtractOpts { poses_per_scene: 4, min_nodes: 2, ..Default::default() };
        let (_, records) = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        let samples = to_samples(&records, &[0.5; 6]).unwrap();
        assert_eq!(samples.len(), records.len());
        for (rec, sample) in records.iter().zip(&samples) {
            assert_eq!(sample.graph.n, rec.rois.len());
            assert_eq!(sample.gt.n(), rec.rois.len());
            assert_eq!(sample.gt.edge_triples(), rec.edges);
        }
    }

    #[test]
    fn unobserved_edge_endpoint_fails_sample_building() {
        let scenes = small_scenes(1);
        let opts = ExtractOpts { poses_per_scene: 1, ..Default::default() };
        let (_, mut records) = extract_dataset(&scenes, &ObsConfig::default(), &opts).unwrap();
        records[0].edges.push((9999, 10000, EdgeType::SameRegion));
        assert!(records[0].to_sample(&[0.5; 6]).is_err());
    }

    // A hand-written two-node document with exactly representable floats,
    // so string surgery on it cannot be defeated by float formatting.
    const GOOD: &str = concat!(
        r#"{"version":1,"eps":0.05,"obs":{"fov":1.5,"max_range":5.0,"d_v":2,"#,
        r#""sigma_dims":0.0,"sigma_pos":0.0,"sigma_app":0.0},"seed":7}"#,
        "\n",
        r#"{"scene_seed":1,"pose":{"position":[0.0,1.5,0.0],"heading":0.0},"#,
        r#""rois":[{"object_id":1,"class":1,"appearance":[0.5,0.5],"#,
        r#""est_dims":[1.0,1.0,1.0],"est_pos":[2.0,0.5,0.0]},"#,
        r#"{"object_id":3,"class":2,"appearance":[0.25,0.25],"#,
        r#""est_dims":[1.0,1.0,1.0],"est_pos":[2.0,0.5,1.0]}],"#,
        r#""edges":[[1,3,"same_region"]]}"#,
        "\n",
    );

    #[test]
    fn canonical_document_parses_and_reserializes_byte_identically() {
        let (meta, records) = from_jsonl_str(GOOD).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].edges, vec![(1, 3, EdgeType::SameRegion)]);
        assert_eq!(to_jsonl_string(&meta, &records), GOOD);

        let sample = records[0].to_sample(&[0.5; 6]).unwrap();
        assert_eq!(sample.graph.n, 2);
        assert!(sample.gt.label(0, 1, EdgeType::SameRegion));
        assert!(!sample.gt.label(0, 1, EdgeType::CoplanarX));
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(from_jsonl_str("").is_err());
        let cases: &[(&str, &str)] = &[
            ("\"version\":1", "\"version\":2"),
            ("\"eps\":0.05", "\"eps\":-1.0"),
            ("\"d_v\":2", "\"d_v\":3"),
            ("\"seed\":7}", "\"seed\":7,\"bogus\":0}"),
            ("\"object_id\":1", "\"object_id\":5"),
            ("\"heading\":0.0", "\"heading\":7.0"),
            ("[0.5,0.5]", "[0.5]"),
            ("\"class\":1", "\"class\":99"),
            ("[[1,3,\"same_region\"]]", "[[3,1,\"same_region\"]]"),
            ("[[1,3,\"same_region\"]]", "[[1,9,\"same_region\"]]"),
            (
                "[[1,3,\"same_region\"]]",
                "[[1,3,\"same_region\"],[1,3,\"same_region\"]]",
            ),
            ("[[1,3,\"same_region\"]]", "[[1,3,\"sideways\"]]"),
            ("\n{\"scene_seed\"", "\n\n{\"scene_seed\""),
        ];
        for (from, to) in cases {
            let doc = GOOD.replacen(from, to, 1);
            assert_ne!(&doc, GOOD, "mutation {from} -> {to} did not apply");
            assert!(from_jsonl_str(&doc).is_err(), "accepted {from} -> {to}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

        #[test]
        fn extracted_records_always_satisfy_the_format_invariants(
            seed in 0u64..512,
            scene_seed in 0u64..64,
        ) {
            let cfg = SceneGenConfig { rooms: 2, ..Default::default() };
            let scene = generate_scene(scene_seed, &cfg).unwrap();
            let opts = ExtractOpts { poses_per_scene: 3, seed, ..Default::default() };
            let (meta, records) =
                extract_dataset(std::slice::from_ref(&scene), &ObsConfig::default(), &opts).unwrap();
            // The strict reader accepts everything the extractor produces.
            let reparsed = from_jsonl_str(&to_jsonl_string(&meta, &records)).unwrap();
            prop_assert_eq!(&reparsed.1, &records);
            for rec in &records {
                for roi in &rec.rois {
                    prop_assert!((roi.class.id() as usize) < CLASS_COUNT);
                }
            }
        }
    }
}
