//! Matching loss, spatio-temporal consistency loss, the combined objective,
//! and the anchor/positive/negative sampler.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::model::{Forward, GraphPlan};
use crate::synthdata::{DistractorLabel, ReferringCase, RegionSource, VideoSample};
use crate::tape::{dot, Mat, Tape, Var};

pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy with `c` clipped to `[1e-7, 1 - 1e-7]`.
pub fn matching_loss(c: f64, y: f64) -> f64 {
    let c = c.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y * c.ln() - (1.0 - y) * (1.0 - c).ln()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Half the euclidean distance between L2-normalized inputs; in `[0, 1]`.
/// A zero vector normalizes to zero.
pub fn embedding_distance(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len());
    let (a, b) = (unit(u), unit(v));
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() / 2.0
}

/// Consistency loss from precomputed distances. Empty sets contribute 0.
pub fn consistency_from_distances(pos_s: &[f64], neg_s: &[f64], pos_t: &[f64], neg_t: &[f64]) -> f64 {
    let mean = |v: &[f64], f: fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&d| f(d)).sum::<f64>() / v.len() as f64
        }
    };
    mean(pos_s, |d| d) + mean(neg_s, |d| 1.0 - d) + mean(pos_t, |d| d) + mean(neg_t, |d| 1.0 - d)
}

/// Spatial/temporal embeddings of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    pub h_s: Vec<f64>,
    pub h_t: Vec<f64>,
}

pub fn consistency_loss(anchor: &NodeEmbedding, positives: &[NodeEmbedding], negatives: &[NodeEmbedding]) -> f64 {
    let ds = |set: &[NodeEmbedding]| set.iter().map(|e| embedding_distance(&anchor.h_s, &e.h_s)).collect::<Vec<_>>();
    let dt = |set: &[NodeEmbedding]| set.iter().map(|e| embedding_distance(&anchor.h_t, &e.h_t)).collect::<Vec<_>>();
    consistency_from_distances(&ds(positives), &ds(negatives), &dt(positives), &dt(negatives))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Σ L_c / N
    pub l_c: f64,
    /// Σ L_d / N
    pub l_d: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// `(Σ L_c + λ Σ L_d) / N`.
pub fn total_loss(l_c: &[f64], l_d: &[f64], lambda: f64, n: usize) -> LossBreakdown {
    let n = n as f64;
    let c = l_c.iter().sum::<f64>() / n;
    let d = l_d.iter().sum::<f64>() / n;
    LossBreakdown { l_c: c, l_d: d, l_total: c + lambda * d, lambda }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Negatives per positive.
    pub ratio: usize,
    /// Positives drawn per anchor.
    pub max_positives: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ratio: 5, max_positives: 2 }
    }
}

/// Match label per region: 1 for regions of a target object in a frame its
/// ground-truth tube covers (duplicates included), else 0.
pub fn match_labels(sample: &VideoSample, case: &ReferringCase, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for r in sample.flat_regions() {
        let hit = r.object_id.is_some_and(|id| {
            case.target_tubes.iter().any(|t| t.object_id == id && t.entries.iter().any(|e| e[0] == r.frame_idx))
        });
        if hit && r.region_idx < n {
            y[r.region_idx] = 1.0;
        }
    }
    y
}

/// Anchors are ground-truth tube entries; each gets up to `max_positives`
/// other entries of any target tube and `ratio × positives` negatives (at
/// least `ratio` when no positive exists), drawn without replacement from
/// labelled distractors and background regions, with at least one spatial
/// and one temporal distractor when the video has them.
pub fn sample_pairs(
    sample: &VideoSample,
    case: &ReferringCase,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let anchors: Vec<usize> = case.target_tubes.iter().flat_map(|t| t.entries.iter().map(|e| e[1])).collect();
    if anchors.is_empty() {
        return Err(DstgError::Input(format!("{}: case has no target regions", sample.video_id)));
    }
    let of_label = |l: DistractorLabel| -> Vec<usize> {
        case.distractor_labels.iter().filter(|(_, v)| **v == l).map(|(k, _)| *k).collect()
    };
    let spatial = of_label(DistractorLabel::SpatialDistractor);
    let temporal = of_label(DistractorLabel::TemporalDistractor);
    let background: Vec<usize> =
        sample.flat_regions().iter().filter(|r| r.source == RegionSource::Background).map(|r| r.region_idx).collect();
    let mut pool: Vec<usize> = spatial.iter().chain(&temporal).chain(&background).copied().collect();
    pool.sort_unstable();
    pool.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        let others: Vec<usize> = anchors.iter().copied().filter(|&p| p != a).collect();
        let positives: Vec<usize> = others.choose_multiple(&mut rng, cfg.max_positives).copied().collect();
        let want = (cfg.ratio * positives.len().max(1)).min(pool.len());
        let mut negatives: Vec<usize> = Vec::with_capacity(want);
        for group in [&spatial, &temporal] {
            if negatives.len() < want {
                if let Some(&k) = group.choose(&mut rng) {
                    negatives.push(k);
                }
            }
        }
        let mut rest: Vec<usize> = pool.iter().copied().filter(|k| !negatives.contains(k)).collect();
        rest.shuffle(&mut rng);
        negatives.extend(rest.into_iter().take(want - negatives.len()));
        out.push(TrainingPair { anchor: a, positives, negatives });
    }
    Ok(out)
}

/// Which consistency terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsistencyTerms {
    pub spatial: bool,
    pub temporal: bool,
}

/// Tape handles for the pieces of the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_c_sum: Var,
    pub l_d_sum: Option<Var>,
}

/// Σ over pairs of the consistency terms for one branch's embeddings.
fn branch_consistency(tape: &mut Tape, h: Var, pairs: &[TrainingPair]) -> Option<Var> {
    let mut a_idx = Vec::new();
    let mut b_idx = Vec::new();
    let mut w = Vec::new();
    let mut constant = 0.0;
    for p in pairs {
        for &j in &p.positives {
            a_idx.push(p.anchor);
            b_idx.push(j);
            w.push(1.0 / p.positives.len() as f64);
        }
        for &k in &p.negatives {
            a_idx.push(p.anchor);
            b_idx.push(k);
            w.push(-1.0 / p.negatives.len() as f64);
        }
        if !p.negatives.is_empty() {
            constant += 1.0;
        }
    }
    if a_idx.is_empty() {
        return None;
    }
    let u = tape.normalize_rows(h);
    let ua = tape.gather_rows(u, &a_idx);
    let ub = tape.gather_rows(u, &b_idx);
    let diff = tape.sub(ua, ub);
    let dist = tape.row_norm(diff);
    let wv = tape.constant(Mat::from_vec(w.len(), 1, w.iter().map(|x| x / 2.0).collect()));
    let weighted = tape.mul(dist, wv);
    let s = tape.sum_all(weighted);
    Some(tape.add_scalar(s, constant))
}

/// `(Σ_i BCE(c_i, y_i) + λ Σ L_d) / N` with the sum over unmasked nodes and
/// `N` the node budget.
pub fn loss_on_tape(
    tape: &mut Tape,
    fwd: &Forward,
    plan: &GraphPlan,
    labels: &[f64],
    pairs: &[TrainingPair],
    lambda: f64,
    terms: ConsistencyTerms,
) -> LossVars {
    let cv = tape.gather_rows(fwd.c, &plan.valid);
    let y: Vec<f64> = plan.valid.iter().map(|&i| labels[i]).collect();
    let bce = tape.bce(cv, &y, BCE_EPS);
    let l_c_sum = tape.sum_all(bce);
    let mut parts = Vec::new();
    if terms.spatial {
        parts.extend(branch_consistency(tape, fwd.h_s, pairs));
    }
    if terms.temporal {
        parts.extend(branch_consistency(tape, fwd.h_t, pairs));
    }
    let l_d_sum = parts.into_iter().reduce(|a, b| tape.add(a, b));
    let inv_n = 1.0 / plan.n as f64;
    let total = match l_d_sum {
        Some(d) if lambda != 0.0 => {
            let wd = tape.scale(d, lambda);
            let s = tape.add(l_c_sum, wd);
            tape.scale(s, inv_n)
        }
        _ => tape.scale(l_c_sum, inv_n),
    };
    LossVars { total, l_c_sum, l_d_sum }
}

pub fn breakdown(tape: &Tape, v: &LossVars, lambda: f64, n: usize) -> LossBreakdown {
    let n = n as f64;
    LossBreakdown {
        l_c: tape.scalar_value(v.l_c_sum) / n,
        l_d: v.l_d_sum.map_or(0.0, |d| tape.scalar_value(d)) / n,
        l_total: tape.scalar_value(v.total),
        lambda,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_video, CaseKind, GeneratorConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn matching_examples() {
        assert_abs_diff_eq!(matching_loss(0.5, 1.0), 2f64.ln(), epsilon = 1e-15);
        assert!(matching_loss(1.0 - 1e-12, 1.0) < 1e-6);
        assert_abs_diff_eq!(matching_loss(0.75, 0.0), 4f64.ln(), epsilon = 1e-15);
        assert!(matching_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(embedding_distance(&[0.3, -2.0], &[0.3, -2.0]), 0.0);
        assert_abs_diff_eq!(embedding_distance(&[1.0, 2.0], &[-2.0, -4.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(embedding_distance(&[1.0, 0.0], &[0.0, 3.0]), 2f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(embedding_distance(&[0.0, 0.0], &[0.0, 3.0]), 0.5, epsilon = 1e-15);
    }

    fn emb(s: &[f64], t: &[f64]) -> NodeEmbedding {
        NodeEmbedding { h_s: s.to_vec(), h_t: t.to_vec() }
    }

    #[test]
    fn consistency_examples() {
        let a = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let same = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let anti = emb(&[-1.0, 0.0], &[0.0, -1.0]);
        assert_eq!(consistency_loss(&a, std::slice::from_ref(&same), std::slice::from_ref(&anti)), 0.0);
        assert_eq!(consistency_loss(&a, &[anti], &[same]), 4.0);
        assert_abs_diff_eq!(consistency_from_distances(&[0.2], &[0.9], &[0.3], &[0.8]), 0.8, epsilon = 1e-15);
        assert_eq!(consistency_from_distances(&[], &[], &[], &[]), 0.0);
    }

    #[test]
    fn total_examples() {
        let b = total_loss(&[0.6], &[1.0], 0.2, 1);
        assert_abs_diff_eq!(b.l_total, 0.8, epsilon = 1e-15);
        let b0 = total_loss(&[0.6, 0.2], &[1.0, 3.0], 0.0, 2);
        assert_eq!(b0.l_total, b0.l_c);
        let b1 = total_loss(&[0.6, 0.2], &[1.0, 3.0], 0.4, 2);
        assert_eq!(b1.l_c.to_bits(), b0.l_c.to_bits());
    }

    fn case_video(seed: u64) -> VideoSample {
        generate_video(
            &GeneratorConfig { case_kind: Some(CaseKind::SingleTargetSingleSegment), ..Default::default() },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn sampler_ratio_and_determinism() {
        let s = case_video(3);
        let case = &s.expressions[0];
        let cfg = SamplerConfig::default();
        let a = sample_pairs(&s, case, &cfg, 17).unwrap();
        let b = sample_pairs(&s, case, &cfg, 17).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.positives.len(), 2);
            assert_eq!(p.negatives.len(), 10);
            let has = |l| p.negatives.iter().any(|k| case.distractor_labels.get(k) == Some(&l));
            if case.distractor_labels.values().any(|l| *l == DistractorLabel::SpatialDistractor) {
                assert!(has(DistractorLabel::SpatialDistractor));
            }
            if case.distractor_labels.values().any(|l| *l == DistractorLabel::TemporalDistractor) {
                assert!(has(DistractorLabel::TemporalDistractor));
            }
            let y = match_labels(&s, case, s.num_regions());
            assert!(p.negatives.iter().all(|&k| y[k] == 0.0));
            assert!(p.positives.iter().all(|&k| y[k] == 1.0));
        }
    }

    #[test]
    fn sampler_background_fallback_and_rejection() {
        let mut s = case_video(4);
        s.expressions[0].distractor_labels.clear();
        let case = s.expressions[0].clone();
        let pairs = sample_pairs(&s, &case, &SamplerConfig::default(), 1).unwrap();
        for p in pairs {
            assert!(p.negatives.iter().all(|&k| s.region(k).unwrap().source == RegionSource::Background));
        }
        let mut none = case;
        none.target_tubes.clear();
        assert!(sample_pairs(&s, &none, &SamplerConfig::default(), 1).is_err());
    }

    #[test]
    fn tape_consistency_matches_plain() {
        use crate::featurize::featurize_sample;
        use crate::model::{forward, init_params, ModelConfig};
        use crate::stgraph::{build_dual_graph, GraphConfig};
        let s = case_video(6);
        let case = &s.expressions[0];
        let cfg = ModelConfig::default();
        let f = featurize_sample(&s, &cfg.features).unwrap();
        let g = build_dual_graph(&s, &f, &GraphConfig::default()).unwrap();
        let plan = GraphPlan::new(&g);
        let store = init_params(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let fw = forward::<ChaCha8Rng>(&mut tape, &b, &cfg, &g, &plan, &[2, 3, 4], None).unwrap();
        let pairs = sample_pairs(&s, case, &SamplerConfig::default(), 2).unwrap();
        let y = match_labels(&s, case, g.len());
        let lv =
            loss_on_tape(&mut tape, &fw, &plan, &y, &pairs, 0.2, ConsistencyTerms { spatial: true, temporal: true });
        let got = breakdown(&tape, &lv, 0.2, g.len());

        let hs = tape.value(fw.h_s);
        let ht = tape.value(fw.h_t);
        let node = |i: usize| emb(hs.row(i), ht.row(i));
        let l_d: Vec<f64> = pairs
            .iter()
            .map(|p| {
                let pos: Vec<_> = p.positives.iter().map(|&j| node(j)).collect();
                let neg: Vec<_> = p.negatives.iter().map(|&j| node(j)).collect();
                consistency_loss(&node(p.anchor), &pos, &neg)
            })
            .collect();
        let c = &tape.value(fw.c).data;
        let l_c: Vec<f64> = plan.valid.iter().map(|&i| matching_loss(c[i], y[i])).collect();
        let want = total_loss(&l_c, &l_d, 0.2, g.len());
        assert_abs_diff_eq!(got.l_total, want.l_total, epsilon = 1e-12);
        assert_abs_diff_eq!(got.l_d, want.l_d, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn distance_in_unit_interval(u in prop::collection::vec(-5.0f64..5.0, 1..8), seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = u.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            let d = embedding_distance(&u, &v);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
            prop_assert!((d - embedding_distance(&v, &u)).abs() < 1e-15);
        }

        #[test]
        fn consistency_in_range(d in prop::collection::vec(0.0f64..=1.0, 4)) {
            let l = consistency_from_distances(&d[..1], &d[1..2], &d[2..3], &d[3..]);
            prop_assert!((0.0..=4.0).contains(&l));
        }
    }
}
