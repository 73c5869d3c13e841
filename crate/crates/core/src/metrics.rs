//! Box IoU, tube vIoU, temporal IoU, multi-target assignment and the
//! aggregated evaluation report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use crate::geometry::box_iou;
use crate::geometry::BBox;
use crate::grounding::GroundingResult;
use crate::synthdata::{CaseKind, VideoSample};

pub const REPORT_SCHEMA: &str = "eval/1";
pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// `Σ_{f ∈ F_I} IoU(pred_f, gt_f) / |F_U|` for frame-sorted tubes with at most
/// one box per frame. Two empty tubes score 0.
pub fn tube_viou(pred: &[(usize, BBox)], gt: &[(usize, BBox)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut union = 0usize;
    let mut sum = 0.0;
    while i < pred.len() || j < gt.len() {
        union += 1;
        match (pred.get(i), gt.get(j)) {
            (Some(p), Some(g)) if p.0 == g.0 => {
                sum += box_iou(&p.1, &g.1);
                i += 1;
                j += 1;
            }
            (Some(p), Some(g)) if p.0 < g.0 => i += 1,
            (Some(_), None) => i += 1,
            _ => j += 1,
        }
    }
    if union == 0 {
        0.0
    } else {
        sum / union as f64
    }
}

/// IoU of the frame sets covered by two lists of half-open `[start, end)`
/// intervals.
pub fn temporal_iou(pred: &[(usize, usize)], gt: &[(usize, usize)]) -> f64 {
    let set = |s: &[(usize, usize)]| s.iter().flat_map(|&(a, b)| a..b).collect::<BTreeSet<usize>>();
    let (p, g) = (set(pred), set(gt));
    let union = p.union(&g).count();
    if union == 0 {
        0.0
    } else {
        p.intersection(&g).count() as f64 / union as f64
    }
}

/// Maximum-weight one-to-one assignment of rows to columns. Returns, for
/// every row, the assigned column (if any) and the total weight. Exact
/// (bitmask DP over columns); intended for a handful of tubes.
pub fn assignment(w: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    assert!(cols <= 20, "too many columns for exact assignment");
    let full = 1usize << cols;
    // best[r][mask]: best total for rows r.. given used columns `mask`
    let mut best = vec![vec![0.0f64; full]; rows + 1];
    let mut choice = vec![vec![None; full]; rows];
    for r in (0..rows).rev() {
        for mask in 0..full {
            let mut b = best[r + 1][mask];
            let mut ch = None;
            for c in 0..cols {
                if mask & (1 << c) == 0 {
                    let v = w[r][c] + best[r + 1][mask | (1 << c)];
                    if v > b {
                        b = v;
                        ch = Some(c);
                    }
                }
            }
            best[r][mask] = b;
            choice[r][mask] = ch;
        }
    }
    let mut mask = 0;
    let mut out = Vec::with_capacity(rows);
    for row in &choice {
        let ch = row[mask];
        if let Some(c) = ch {
            mask |= 1 << c;
        }
        out.push(ch);
    }
    (out, best.first().map_or(0.0, |b| b[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    All,
    /// Single target, single segment.
    VgEasy,
    /// Several referred objects.
    SgHard,
    /// One target in several discontinuous segments.
    TgHard,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::All, Split::VgEasy, Split::SgHard, Split::TgHard];

    pub fn contains(self, kind: CaseKind) -> bool {
        match self {
            Split::All => true,
            Split::VgEasy => kind == CaseKind::SingleTargetSingleSegment,
            Split::SgHard => kind == CaseKind::MultiTarget,
            Split::TgHard => kind == CaseKind::SingleTargetDiscontinuous,
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Some(Split::All),
            "vg_easy" => Some(Split::VgEasy),
            "sg_hard" => Some(Split::SgHard),
            "tg_hard" => Some(Split::TgHard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub video_id: String,
    pub expression_idx: usize,
    pub case_kind: CaseKind,
    /// vIoU of each ground-truth tube against its assigned prediction (0 when
    /// unmatched).
    pub viou: Vec<f64>,
    pub tiou: Vec<f64>,
    /// Prediction index assigned to each ground-truth tube.
    pub assigned: Vec<Option<usize>>,
    pub missing_prediction: bool,
}

impl CaseRow {
    pub fn mean_viou(&self) -> f64 {
        mean(&self.viou)
    }

    pub fn mean_tiou(&self) -> f64 {
        mean(&self.tiou)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub split: Split,
    pub num_cases: usize,
    pub m_viou: f64,
    /// Keyed by the threshold printed with one decimal ("0.3", ...).
    pub viou_at: BTreeMap<String, f64>,
    pub m_tiou: f64,
    pub tiou_at: BTreeMap<String, f64>,
    pub missing: Vec<String>,
    pub rows: Vec<CaseRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

fn gt_boxes(sample: &VideoSample, entries: &[[usize; 2]]) -> Vec<(usize, BBox)> {
    entries.iter().filter_map(|e| sample.region(e[1]).map(|r| (e[0], r.bbox))).collect()
}

/// Score one case: predictions are assigned one-to-one to ground-truth tubes
/// by maximum total vIoU; unmatched ground truth scores 0.
pub fn score_case(sample: &VideoSample, expression_idx: usize, pred: Option<&GroundingResult>) -> CaseRow {
    let case = &sample.expressions[expression_idx];
    let gts: Vec<Vec<(usize, BBox)>> = case.target_tubes.iter().map(|t| gt_boxes(sample, &t.entries)).collect();
    let preds: Vec<&crate::grounding::Tube> = pred.map_or(Vec::new(), |p| p.tubes.iter().take(20).collect());
    let w: Vec<Vec<f64>> = gts.iter().map(|g| preds.iter().map(|p| tube_viou(&p.boxes(), g)).collect()).collect();
    let (assigned, _) = assignment(&w);
    let viou = assigned.iter().enumerate().map(|(g, a)| a.map_or(0.0, |p| w[g][p])).collect();
    let tiou = assigned
        .iter()
        .enumerate()
        .map(|(g, a)| a.map_or(0.0, |p| temporal_iou(&preds[p].segments(), &case.target_tubes[g].segments())))
        .collect();
    CaseRow {
        video_id: sample.video_id.clone(),
        expression_idx,
        case_kind: case.case_kind,
        viou,
        tiou,
        assigned,
        missing_prediction: pred.is_none(),
    }
}

pub fn aggregate(rows: Vec<CaseRow>, split: Split) -> EvalReport {
    let rows: Vec<CaseRow> = rows.into_iter().filter(|r| split.contains(r.case_kind)).collect();
    let at = |get: fn(&CaseRow) -> &Vec<f64>| -> BTreeMap<String, f64> {
        THRESHOLDS
            .iter()
            .map(|&t| {
                let per_case: Vec<f64> = rows
                    .iter()
                    .map(|r| mean(&get(r).iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect::<Vec<_>>()))
                    .collect();
                (format!("{t:.1}"), mean(&per_case))
            })
            .collect()
    };
    EvalReport {
        schema: REPORT_SCHEMA.into(),
        split,
        num_cases: rows.len(),
        m_viou: mean(&rows.iter().map(CaseRow::mean_viou).collect::<Vec<_>>()),
        viou_at: at(|r| &r.viou),
        m_tiou: mean(&rows.iter().map(CaseRow::mean_tiou).collect::<Vec<_>>()),
        tiou_at: at(|r| &r.tiou),
        missing: rows
            .iter()
            .filter(|r| r.missing_prediction)
            .map(|r| format!("{}#{}", r.video_id, r.expression_idx))
            .collect(),
        rows,
        manifest: None,
    }
}

/// Evaluate predictions against every (video, expression) of the dataset.
pub fn match_and_score(preds: &[GroundingResult], samples: &[VideoSample], split: Split) -> EvalReport {
    let by_key: BTreeMap<(&str, usize), &GroundingResult> =
        preds.iter().map(|p| ((p.video_id.as_str(), p.expression_idx), p)).collect();
    let mut rows = Vec::new();
    for s in samples {
        for e in 0..s.expressions.len() {
            rows.push(score_case(s, e, by_key.get(&(s.video_id.as_str(), e)).copied()));
        }
    }
    aggregate(rows, split)
}
