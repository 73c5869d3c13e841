//! Spatial and temporal k-nearest-neighbour graphs over a fixed node budget.
//!
//! Node `i` is region `i` of the video; nodes past the region count are
//! masked padding with empty adjacency.

use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::featurize::VideoFeatures;
use crate::geometry::{box_iou, center_distance, BBox};
use crate::synthdata::VideoSample;
use crate::tape::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalAffinity {
    #[default]
    BoxIou,
    /// Cosine similarity of motion features.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub k_s: usize,
    pub k_t: usize,
    /// Temporal neighbours come from frames `t±1 ..= t±window`.
    pub window: usize,
    pub temporal_affinity: TemporalAffinity,
    pub node_budget: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k_s: 4, k_t: 4, window: 2, temporal_affinity: TemporalAffinity::BoxIou, node_budget: 256 }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_s == 0 || self.k_t == 0 || self.window == 0 || self.node_budget == 0 {
            return Err(DstgError::Config("k_s, k_t, window and node_budget must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub region_idx: Option<usize>,
    pub frame_idx: usize,
    pub valid: bool,
}

/// Dual graph plus the raw per-node inputs. Feature matrices have one row per
/// node (zeros for padding); geometry is the 5-vector fed to the learned
/// positional projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGraph {
    pub nodes: Vec<GraphNode>,
    pub spatial_adj: Vec<Vec<usize>>,
    pub temporal_adj: Vec<Vec<usize>>,
    pub appearance: Mat,
    pub motion: Mat,
    pub geometry: Mat,
}

impl DualGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.nodes.iter().filter(|n| n.valid).count()
    }

    pub fn mask(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| if n.valid { 1.0 } else { 0.0 }).collect()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.nodes[i].valid).collect()
    }

    /// Union of spatial and temporal neighbours, sorted.
    pub fn union_adj(&self) -> Vec<Vec<usize>> {
        self.spatial_adj
            .iter()
            .zip(&self.temporal_adj)
            .map(|(s, t)| {
                let mut u: Vec<usize> = s.iter().chain(t).copied().collect();
                u.sort_unstable();
                u.dedup();
                u
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_nodes": self.len(),
            "num_valid": self.num_valid(),
            "nodes": self.nodes,
            "spatial_adj": self.spatial_adj,
            "temporal_adj": self.temporal_adj,
        })
    }
}

/// `k` same-frame nodes nearest by box-centre distance (ties: lower index).
pub fn spatial_neighbors(frames: &[usize], boxes: &[BBox], k: usize) -> Vec<Vec<usize>> {
    (0..boxes.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..boxes.len())
                .filter(|&j| j != i && frames[j] == frames[i])
                .map(|j| (center_distance(&boxes[i], &boxes[j]), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// `k` nodes in frames within `window` of the node's frame (excluding its own)
/// with the highest affinity; ties broken by smaller |Δt|, then lower index.
pub fn temporal_neighbors(
    frames: &[usize],
    affinity: impl Fn(usize, usize) -> f64,
    k: usize,
    window: usize,
) -> Vec<Vec<usize>> {
    (0..frames.len())
        .map(|i| {
            let mut cand: Vec<(f64, usize, usize)> = (0..frames.len())
                .filter(|&j| frames[j] != frames[i] && frames[j].abs_diff(frames[i]) <= window)
                .map(|j| (affinity(i, j), frames[j].abs_diff(frames[i]), j))
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cand.into_iter().take(k).map(|(_, _, j)| j).collect()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn rows_to_mat(rows: &[Vec<f64>], n: usize, width: usize) -> Mat {
    let mut m = Mat::zeros(n, width);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    m
}

/// Build the (unpadded) dual graph from flat region lists.
pub fn build_from_parts(
    frames: &[usize],
    boxes: &[BBox],
    feats: &VideoFeatures,
    cfg: &GraphConfig,
) -> Result<DualGraph> {
    cfg.validate()?;
    let n = boxes.len();
    if n == 0 {
        return Err(DstgError::Input("video has no regions".into()));
    }
    if frames.len() != n || feats.len() != n {
        return Err(DstgError::Input("region and feature counts disagree".into()));
    }
    let spatial_adj = spatial_neighbors(frames, boxes, cfg.k_s);
    let temporal_adj = match cfg.temporal_affinity {
        TemporalAffinity::BoxIou => {
            temporal_neighbors(frames, |i, j| box_iou(&boxes[i], &boxes[j]), cfg.k_t, cfg.window)
        }
        TemporalAffinity::Feature => {
            temporal_neighbors(frames, |i, j| cosine(&feats.motion[i], &feats.motion[j]), cfg.k_t, cfg.window)
        }
    };
    let d_a = feats.appearance[0].len();
    let d_m = feats.motion[0].len();
    let geo: Vec<Vec<f64>> = feats.geometry.iter().map(|g| g.to_vec()).collect();
    Ok(DualGraph {
        nodes: (0..n).map(|i| GraphNode { region_idx: Some(i), frame_idx: frames[i], valid: true }).collect(),
        spatial_adj,
        temporal_adj,
        appearance: rows_to_mat(&feats.appearance, n, d_a),
        motion: rows_to_mat(&feats.motion, n, d_m),
        geometry: rows_to_mat(&geo, n, 5),
    })
}

/// Build and pad the dual graph for a video.
pub fn build_dual_graph(sample: &VideoSample, feats: &VideoFeatures, cfg: &GraphConfig) -> Result<DualGraph> {
    let regions = sample.flat_regions();
    if regions.len() > cfg.node_budget {
        return Err(DstgError::NodeBudget { needed: regions.len(), budget: cfg.node_budget });
    }
    let frames: Vec<usize> = regions.iter().map(|r| r.frame_idx).collect();
    let boxes: Vec<BBox> = regions.iter().map(|r| r.bbox).collect();
    let g = build_from_parts(&frames, &boxes, feats, cfg)?;
    pad_to_budget(g, cfg.node_budget)
}

/// Append masked nodes until the graph has exactly `n` nodes.
pub fn pad_to_budget(mut g: DualGraph, n: usize) -> Result<DualGraph> {
    let have = g.len();
    if have > n {
        return Err(DstgError::NodeBudget { needed: have, budget: n });
    }
    let grow = |m: &Mat| {
        let mut out = Mat::zeros(n, m.cols);
        out.data[..m.data.len()].copy_from_slice(&m.data);
        out
    };
    g.appearance = grow(&g.appearance);
    g.motion = grow(&g.motion);
    g.geometry = grow(&g.geometry);
    for _ in have..n {
        g.nodes.push(GraphNode { region_idx: None, frame_idx: 0, valid: false });
        g.spatial_adj.push(Vec::new());
        g.temporal_adj.push(Vec::new());
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{featurize_sample, FeatureConfig};
    use crate::synthdata::{generate_video, GeneratorConfig};
    use proptest::prelude::*;

    fn feats(n: usize) -> VideoFeatures {
        VideoFeatures { appearance: vec![vec![0.0; 4]; n], motion: vec![vec![0.0; 4]; n], geometry: vec![[0.0; 5]; n] }
    }

    fn sq(x: f64, y: f64, s: f64) -> BBox {
        BBox::new(x, y, x + s, y + s)
    }

    #[test]
    fn two_region_frame_has_one_neighbor_each() {
        let g =
            build_from_parts(&[0, 0], &[sq(0.0, 0.0, 10.0), sq(50.0, 0.0, 10.0)], &feats(2), &GraphConfig::default())
                .unwrap();
        assert_eq!(g.spatial_adj, vec![vec![1], vec![0]]);
    }

    #[test]
    fn single_frame_has_no_temporal_edges() {
        let boxes: Vec<BBox> = (0..5).map(|i| sq(i as f64 * 20.0, 0.0, 10.0)).collect();
        let g = build_from_parts(&[0; 5], &boxes, &feats(5), &GraphConfig::default()).unwrap();
        assert!(g.temporal_adj.iter().all(Vec::is_empty));
    }

    #[test]
    fn identical_track_middle_node() {
        // Three identical boxes in frames 0..3 plus a far-away clutter box in
        // frame 2 that overlaps nothing.
        let b = sq(10.0, 10.0, 20.0);
        let frames = [0, 1, 2, 2];
        let boxes = [b, b, b, sq(200.0, 200.0, 20.0)];
        let cfg = GraphConfig { k_t: 2, window: 2, ..Default::default() };
        let g = build_from_parts(&frames, &boxes, &feats(4), &cfg).unwrap();
        // brute force: rank candidates by (-iou, |dt|, idx)
        let mut cand: Vec<(f64, usize, usize)> = (0..4)
            .filter(|&j| frames[j] != frames[1])
            .map(|j| (-box_iou(&boxes[1], &boxes[j]), frames[j].abs_diff(1), j))
            .collect();
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<usize> = cand.iter().take(2).map(|c| c.2).collect();
        assert_eq!(g.temporal_adj[1], expect);
        assert_eq!(g.temporal_adj[1], vec![0, 2]);
    }

    #[test]
    fn temporal_tie_prefers_nearer_frame() {
        let b = sq(0.0, 0.0, 10.0);
        let g =
            build_from_parts(&[0, 2, 1], &[b, b, b], &feats(3), &GraphConfig { k_t: 1, ..Default::default() }).unwrap();
        assert_eq!(g.temporal_adj[0], vec![2]);
    }

    #[test]
    fn padding() {
        let boxes: Vec<BBox> = (0..10).map(|i| sq(i as f64 * 3.0, 0.0, 10.0)).collect();
        let frames: Vec<usize> = (0..10).map(|i| i / 3).collect();
        let g = build_from_parts(&frames, &boxes, &feats(10), &GraphConfig::default()).unwrap();
        let p = pad_to_budget(g.clone(), 16).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.num_valid(), 10);
        for i in 10..16 {
            assert!(p.spatial_adj[i].is_empty() && p.temporal_adj[i].is_empty());
        }
        assert!(p.union_adj().iter().flatten().all(|&j| j < 10));
        assert_eq!(pad_to_budget(g.clone(), 10).unwrap(), g);
        assert!(pad_to_budget(g, 9).is_err());
    }

    #[test]
    fn empty_rejected() {
        assert!(build_from_parts(&[], &[], &feats(0), &GraphConfig::default()).is_err());
    }

    #[test]
    fn generated_video_graph_invariants() {
        let s = generate_video(&GeneratorConfig::default(), 11).unwrap();
        let f = featurize_sample(&s, &FeatureConfig::default()).unwrap();
        let g = build_dual_graph(&s, &f, &GraphConfig::default()).unwrap();
        assert_eq!(g.len(), 256);
        for i in 0..g.len() {
            for &j in &g.spatial_adj[i] {
                assert!(g.nodes[j].valid && j != i && g.nodes[j].frame_idx == g.nodes[i].frame_idx);
            }
            for &j in &g.temporal_adj[i] {
                let (a, b) = (g.nodes[i].frame_idx, g.nodes[j].frame_idx);
                assert!(g.nodes[j].valid && a != b && a.abs_diff(b) <= 2);
            }
            assert!(g.spatial_adj[i].len() <= 4 && g.temporal_adj[i].len() <= 4);
        }
        let j = g.to_json();
        assert_eq!(j["num_nodes"], 256);
    }

    proptest! {
        #[test]
        fn permutation_relabels_neighbors(seed in 0u64..500) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..14);
            let frames: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let boxes: Vec<BBox> = (0..n)
                .map(|_| sq(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(5.0..40.0)))
                .collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // node perm[i] in the permuted graph is node i of the original
            let mut pf = vec![0; n];
            let mut pb = vec![boxes[0]; n];
            for i in 0..n {
                pf[perm[i]] = frames[i];
                pb[perm[i]] = boxes[i];
            }
            let cfg = GraphConfig::default();
            let a = build_from_parts(&frames, &boxes, &feats(n), &cfg).unwrap();
            let b = build_from_parts(&pf, &pb, &feats(n), &cfg).unwrap();
            for i in 0..n {
                let mut sa: Vec<usize> = a.spatial_adj[i].iter().map(|&j| perm[j]).collect();
                let mut sb = b.spatial_adj[perm[i]].clone();
                sa.sort_unstable();
                sb.sort_unstable();
                prop_assert_eq!(sa, sb);
                // temporal sets can differ only on exact IoU ties (e.g. zero overlap)
                let ious: Vec<f64> = a.temporal_adj[i].iter().map(|&j| box_iou(&boxes[i], &boxes[j])).collect();
                if ious.iter().all(|&x| x > 0.0) && a.temporal_adj[i].len() == b.temporal_adj[perm[i]].len() {
                    let mut ta: Vec<usize> = a.temporal_adj[i].iter().map(|&j| perm[j]).collect();
                    let mut tb = b.temporal_adj[perm[i]].clone();
                    ta.sort_unstable();
                    tb.sort_unstable();
                    let tb_ious: Vec<f64> = b.temporal_adj[perm[i]].iter().map(|&j| box_iou(&pb[perm[i]], &pb[j])).collect();
                    if tb_ious.iter().all(|&x| x > 0.0) {
                        prop_assert_eq!(ta, tb);
                    }
                }
            }
        }
    }
}
