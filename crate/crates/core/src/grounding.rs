//! Proposal-free inference: per-region scores are linked across frames by
//! dynamic programming, thresholded into (possibly discontinuous) segments,
//! and de-duplicated with tube-level NMS.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::featurize::featurize_sample;
use crate::geometry::{box_iou, BBox};
use crate::langenc::{tokenize, Vocabulary};
use crate::metrics::tube_viou;
use crate::model::{infer, ModelConfig};
use crate::objectives::embedding_distance;
use crate::params::ParamStore;
use crate::stgraph::{build_dual_graph, GraphConfig};
use crate::synthdata::{frame_runs, VideoSample};
use crate::tape::Mat;

pub const PREDICTION_SCHEMA: &str = "pred/1";

/// `R_ij = c_i + c_j − d(h_i^s, h_j^s) − d(h_i^t, h_j^t)`.
pub fn link_reward(c_i: f64, c_j: f64, hs_i: &[f64], hs_j: &[f64], ht_i: &[f64], ht_j: &[f64]) -> f64 {
    c_i + c_j - embedding_distance(hs_i, hs_j) - embedding_distance(ht_i, ht_j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub frame: usize,
    pub region_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    /// Sorted by frame, at most one entry per frame.
    pub entries: Vec<TubeEntry>,
    /// Mean correspondence score over entries.
    pub score: f64,
    pub link_reward_total: f64,
}

impl Tube {
    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame).collect()
    }

    pub fn segments(&self) -> Vec<(usize, usize)> {
        frame_runs(&self.frames())
    }

    pub fn boxes(&self) -> Vec<(usize, BBox)> {
        self.entries.iter().map(|e| (e.frame, e.bbox)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub theta_keep: f64,
    pub min_segment_len: usize,
    pub num_seeds: usize,
    pub nms_threshold: f64,
    /// A region counts as covered by a tube when it overlaps the tube's box in
    /// its frame at least this much; covered regions are not used as seeds.
    pub seed_cover_iou: f64,
    /// Consecutive kept entries whose spatial plus temporal embedding
    /// distance exceeds this belong to different objects; a pass keeps only
    /// the part of its path on the seed's side of such breaks.
    pub split_distance: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            theta_keep: 0.5,
            min_segment_len: 2,
            num_seeds: 5,
            nms_threshold: 0.4,
            seed_cover_iou: 0.5,
            split_distance: 0.5,
        }
    }
}

/// Maximum of `Σ reward(path[k], path[k+1])` over one candidate per step,
/// optionally forcing candidate `seed.1` at step `seed.0`. Ties go to the
/// lower candidate id. Returns `(path, total)`; steps must be non-empty.
pub fn link_path(
    steps: &[Vec<usize>],
    reward: impl Fn(usize, usize) -> f64,
    seed: Option<(usize, usize)>,
) -> (Vec<usize>, f64) {
    if steps.is_empty() {
        return (Vec::new(), 0.0);
    }
    let allowed = |k: usize| -> Vec<usize> {
        match seed {
            Some((s, node)) if s == k => vec![node],
            _ => {
                let mut v = steps[k].clone();
                v.sort_unstable();
                v
            }
        }
    };
    let mut cand = allowed(0);
    let mut score = vec![0.0; cand.len()];
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(steps.len());
    back.push(vec![usize::MAX; cand.len()]);
    for k in 1..steps.len() {
        let next = allowed(k);
        let mut ns = Vec::with_capacity(next.len());
        let mut nb = Vec::with_capacity(next.len());
        for &j in &next {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (p, &i) in cand.iter().enumerate() {
                let v = score[p] + reward(i, j);
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            ns.push(best);
            nb.push(arg);
        }
        back.push(nb);
        cand = next;
        score = ns;
    }
    // Backtrack; candidate lists are recomputed deterministically.
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (p, &v) in score.iter().enumerate() {
        if v > best {
            best = v;
            arg = p;
        }
    }
    let mut path = vec![0; steps.len()];
    let mut p = arg;
    for k in (0..steps.len()).rev() {
        path[k] = allowed(k)[p];
        if k > 0 {
            p = back[k][p];
        }
    }
    (path, best)
}

/// Per-region inputs to tube building, indexed by region id.
pub struct LinkInputs<'a> {
    pub frames: &'a [usize],
    pub boxes: &'a [BBox],
    pub c: &'a [f64],
    pub h_s: &'a Mat,
    pub h_t: &'a Mat,
}

impl LinkInputs<'_> {
    /// `d(h_i^s, h_j^s) + d(h_i^t, h_j^t)`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        embedding_distance(self.h_s.row(i), self.h_s.row(j)) + embedding_distance(self.h_t.row(i), self.h_t.row(j))
    }

    pub fn reward(&self, i: usize, j: usize) -> f64 {
        link_reward(self.c[i], self.c[j], self.h_s.row(i), self.h_s.row(j), self.h_t.row(i), self.h_t.row(j))
    }

    /// Region ids grouped by frame, frames ascending.
    pub fn steps(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &f) in self.frames.iter().enumerate() {
            by.entry(f).or_default().push(i);
        }
        by.into_iter().unzip()
    }
}

/// Turn a linked path into a tube: drop entries below `theta_keep`, keep the
/// identity group containing `seed` (see [`LinkConfig::split_distance`]),
/// split into contiguous runs and discard runs shorter than
/// `min_segment_len`.
pub fn path_to_tube(inp: &LinkInputs<'_>, path: &[usize], seed: usize, cfg: &LinkConfig) -> Option<Tube> {
    let above: Vec<usize> = path.iter().copied().filter(|&i| inp.c[i] >= cfg.theta_keep).collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &above {
        match groups.last_mut() {
            Some(g) if inp.distance(*g.last().unwrap(), i) <= cfg.split_distance => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let kept = groups.into_iter().find(|g| g.contains(&seed)).unwrap_or_default();
    let frames: Vec<usize> = kept.iter().map(|&i| inp.frames[i]).collect();
    let mut entries = Vec::new();
    let mut reward = 0.0;
    for (s, e) in frame_runs(&frames) {
        if e - s < cfg.min_segment_len {
            continue;
        }
        let run: Vec<usize> = kept.iter().copied().filter(|&i| (s..e).contains(&inp.frames[i])).collect();
        for w in run.windows(2) {
            reward += inp.reward(w[0], w[1]);
        }
        entries.extend(run.iter().map(|&i| TubeEntry { frame: inp.frames[i], region_idx: i, bbox: inp.boxes[i] }));
    }
    if entries.is_empty() {
        return None;
    }
    let score = entries.iter().map(|e| inp.c[e.region_idx]).sum::<f64>() / entries.len() as f64;
    Some(Tube { entries, score, link_reward_total: reward })
}

fn covered(t: &Tube, frame: usize, b: &BBox, thr: f64) -> bool {
    t.entries.iter().any(|e| e.frame == frame && box_iou(&e.bbox, b) >= thr)
}

/// One DP pass per seed. Seeds are taken in descending score (ties: lower
/// id), skipping regions below `theta_keep` or already covered by a tube.
pub fn build_tubes(inp: &LinkInputs<'_>, cfg: &LinkConfig) -> Vec<Tube> {
    let (frame_ids, steps) = inp.steps();
    let mut order: Vec<usize> = (0..inp.c.len()).collect();
    order.sort_by(|&a, &b| inp.c[b].total_cmp(&inp.c[a]).then(a.cmp(&b)));
    let mut tubes: Vec<Tube> = Vec::new();
    let mut passes = 0;
    for s in order {
        if passes >= cfg.num_seeds || inp.c[s] < cfg.theta_keep {
            break;
        }
        if tubes.iter().any(|t| covered(t, inp.frames[s], &inp.boxes[s], cfg.seed_cover_iou)) {
            continue;
        }
        passes += 1;
        let step = frame_ids.binary_search(&inp.frames[s]).expect("seed frame present");
        let (path, _) = link_path(&steps, |i, j| inp.reward(i, j), Some((step, s)));
        if let Some(t) = path_to_tube(inp, &path, s, cfg) {
            if !tubes.iter().any(|u| u.entries == t.entries) {
                tubes.push(t);
            }
        }
    }
    tubes
}

/// Greedy tube NMS: visit tubes by descending score (stable for ties) and keep
/// a tube unless its vIoU with an already-kept tube exceeds `threshold`.
pub fn tube_nms(tubes: &[Tube], threshold: f64) -> Vec<Tube> {
    let mut order: Vec<usize> = (0..tubes.len()).collect();
    order.sort_by(|&a, &b| tubes[b].score.total_cmp(&tubes[a].score));
    let mut kept: Vec<Tube> = Vec::new();
    for i in order {
        let bi = tubes[i].boxes();
        if kept.iter().all(|k| tube_viou(&bi, &k.boxes()) <= threshold) {
            kept.push(tubes[i].clone());
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub schema: String,
    pub video_id: String,
    pub expression_idx: usize,
    /// Sorted by descending score.
    pub tubes: Vec<Tube>,
    /// Correspondence score of every region, by region id.
    pub region_scores: Vec<f64>,
}

/// Everything needed to run the trained model on a video.
pub struct Grounder<'a> {
    pub params: &'a ParamStore,
    pub model: &'a ModelConfig,
    pub graph: &'a GraphConfig,
    pub vocab: &'a Vocabulary,
    pub link: &'a LinkConfig,
}

impl Grounder<'_> {
    pub fn ground(&self, sample: &VideoSample, expression_idx: usize) -> Result<GroundingResult> {
        let case = sample
            .expressions
            .get(expression_idx)
            .ok_or_else(|| DstgError::Input(format!("{}: no expression {expression_idx}", sample.video_id)))?;
        let empty = || GroundingResult {
            schema: PREDICTION_SCHEMA.into(),
            video_id: sample.video_id.clone(),
            expression_idx,
            tubes: Vec::new(),
            region_scores: Vec::new(),
        };
        if sample.num_regions() == 0 {
            return Ok(empty());
        }
        let feats = featurize_sample(sample, &self.model.features)?;
        let g = build_dual_graph(sample, &feats, self.graph)?;
        let ids = self.vocab.encode(&case.expression.iter().flat_map(|t| tokenize(t)).collect::<Vec<_>>());
        let out = infer(self.params, self.model, &g, &ids)?;
        let regions = sample.flat_regions();
        let n = regions.len();
        let frames: Vec<usize> = regions.iter().map(|r| r.frame_idx).collect();
        let boxes: Vec<BBox> = regions.iter().map(|r| r.bbox).collect();
        let c = &out.c[..n];
        let inp = LinkInputs { frames: &frames, boxes: &boxes, c, h_s: &out.h_s, h_t: &out.h_t };
        let tubes = tube_nms(&build_tubes(&inp, self.link), self.link.nms_threshold);
        Ok(GroundingResult { region_scores: c.to_vec(), tubes, ..empty() })
    }
}

/// Random-anchor baseline: a uniformly random temporal window (at least two
/// frames) with a uniformly random region in each of its frames.
pub fn random_anchor(sample: &VideoSample, expression_idx: usize, seed: u64) -> GroundingResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.seed.rotate_left(17));
    let t = sample.num_frames;
    let len = rng.random_range(2.min(t)..=t);
    let start = rng.random_range(0..=t - len);
    let mut entries = Vec::new();
    for f in start..start + len {
        let regs = &sample.regions[f];
        if regs.is_empty() {
            continue;
        }
        let r = &regs[rng.random_range(0..regs.len())];
        entries.push(TubeEntry { frame: f, region_idx: r.region_idx, bbox: r.bbox });
    }
    let tubes =
        if entries.is_empty() { Vec::new() } else { vec![Tube { entries, score: 1.0, link_reward_total: 0.0 }] };
    GroundingResult {
        schema: PREDICTION_SCHEMA.into(),
        video_id: sample.video_id.clone(),
        expression_idx,
        tubes,
        region_scores: Vec::new(),
    }
}

/// JSON-lines predictions, optionally headed by a `{"manifest": …}` line.
pub fn write_predictions(path: &Path, manifest: Option<&serde_json::Value>, preds: &[GroundingResult]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(m) = manifest {
        writeln!(w, "{}", serde_json::json!({ "manifest": m }))?;
    }
    for p in preds {
        writeln!(w, "{}", serde_json::to_string(p)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<GroundingResult>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("manifest").is_some() {
            continue;
        }
        let p: GroundingResult = serde_json::from_value(v)?;
        if p.schema != PREDICTION_SCHEMA {
            return Err(DstgError::Format(format!("line {}: unexpected schema {:?}", k + 1, p.schema)));
        }
        out.push(p);
    }
    Ok(out)
}
