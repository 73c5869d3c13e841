//! Training loop, checkpoints, finite-difference gradient check and the
//! ablation runner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::featurize::{featurize_sample, VideoFeatures};
use crate::geometry::BBox;
use crate::grounding::{Grounder, GroundingResult, LinkConfig};
use crate::langenc::{tokenize, Dropout, Vocabulary};
use crate::metrics::{match_and_score, EvalReport, Split};
use crate::model::{forward, init_params, Ablation, GraphPlan, ModelConfig};
use crate::objectives::{
    breakdown, loss_on_tape, match_labels, sample_pairs, ConsistencyTerms, LossBreakdown, SamplerConfig, TrainingPair,
};
use crate::params::ParamStore;
use crate::stgraph::{build_dual_graph, build_from_parts, pad_to_budget, DualGraph, GraphConfig};
use crate::synthdata::VideoSample;
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Fixed-step gradient descent.
    Sgd,
    /// Adam (β = 0.9, 0.999; ε = 1e-8).
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `learning_rate` to zero over `steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub negative_ratio: usize,
    pub max_positives: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub link: LinkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            negative_ratio: 5,
            max_positives: 2,
            learning_rate: 0.003,
            optimizer: Optimizer::Adam,
            schedule: LrSchedule::Constant,
            steps: 1000,
            seed: 0,
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            link: LinkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.graph.validate()?;
        if self.lambda.is_nan() || self.lambda < 0.0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(DstgError::Config("lambda must be >= 0 and learning_rate > 0".into()));
        }
        Ok(())
    }

    pub fn terms(&self) -> ConsistencyTerms {
        let a = self.model.ablation;
        ConsistencyTerms { spatial: a.scl && a.sgb, temporal: a.tcl && a.tgb }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / self.steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { ratio: self.negative_ratio, max_positives: self.max_positives }
    }
}

/// One (video, expression) case with everything precomputed.
pub struct PreparedCase {
    pub video_id: String,
    pub graph: DualGraph,
    pub plan: GraphPlan,
    pub labels: Vec<f64>,
    pub token_ids: Vec<usize>,
    pub pairs_source: (VideoSample, usize),
}

pub fn build_vocab(samples: &[VideoSample]) -> Vocabulary {
    let corpus: Vec<Vec<String>> =
        samples.iter().flat_map(|s| s.expressions.iter().map(|e| expression_tokens(&e.expression))).collect();
    Vocabulary::build(&corpus)
}

pub fn expression_tokens(expr: &[String]) -> Vec<String> {
    expr.iter().flat_map(|t| tokenize(t)).collect()
}

pub fn prepare_cases(samples: &[VideoSample], cfg: &TrainConfig, vocab: &Vocabulary) -> Result<Vec<PreparedCase>> {
    let mut out = Vec::new();
    for s in samples {
        let feats = featurize_sample(s, &cfg.model.features)?;
        let graph = build_dual_graph(s, &feats, &cfg.graph)?;
        let plan = GraphPlan::new(&graph);
        for (e, case) in s.expressions.iter().enumerate() {
            out.push(PreparedCase {
                video_id: s.video_id.clone(),
                labels: match_labels(s, case, graph.len()),
                token_ids: vocab.encode(&expression_tokens(&case.expression)),
                graph: graph.clone(),
                plan: plan.clone(),
                pairs_source: (s.clone(), e),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub video_id: String,
    pub l_c: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// Loss and parameter gradients for one case.
pub fn case_gradients<R: Rng>(
    store: &ParamStore,
    cfg: &TrainConfig,
    case: &PreparedCase,
    pairs: &[TrainingPair],
    dropout: Option<Dropout<'_, R>>,
) -> Result<(LossBreakdown, BTreeMap<String, Mat>)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let fw = forward(&mut tape, &b, &cfg.model, &case.graph, &case.plan, &case.token_ids, dropout)?;
    let lv = loss_on_tape(&mut tape, &fw, &case.plan, &case.labels, pairs, cfg.lambda, cfg.terms());
    let br = breakdown(&tape, &lv, cfg.lambda, case.plan.n);
    let grads = tape.backward(lv.total);
    Ok((br, b.gradients(store, &grads)))
}

struct AdamState {
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
    t: i32,
}

fn apply_update(store: &mut ParamStore, grads: &BTreeMap<String, Mat>, lr: f64, adam: &mut Option<AdamState>) {
    match adam {
        None => {
            for (k, g) in grads {
                let p = store.get_mut(k);
                for (x, d) in p.data.iter_mut().zip(&g.data) {
                    *x -= lr * d;
                }
            }
        }
        Some(st) => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            for (k, g) in grads {
                let m = st.m.entry(k.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
                let v = st.v.entry(k.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
                let p = store.get_mut(k);
                for i in 0..g.data.len() {
                    m.data[i] = b1 * m.data[i] + (1.0 - b1) * g.data[i];
                    v.data[i] = b2 * v.data[i] + (1.0 - b2) * g.data[i] * g.data[i];
                    p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Learned state plus everything needed to reproduce inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

/// Train on every case of `samples`. `on_log` receives one record per step.
pub fn train(samples: &[VideoSample], cfg: &TrainConfig, mut on_log: impl FnMut(&LogRecord)) -> Result<Checkpoint> {
    cfg.validate()?;
    let vocab = build_vocab(samples);
    let cases = prepare_cases(samples, cfg, &vocab)?;
    if cases.is_empty() {
        return Err(DstgError::Input("no training cases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(&cfg.model, vocab.len(), &mut rng);
    let mut adam =
        (cfg.optimizer == Optimizer::Adam).then(|| AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 });
    let sampler = cfg.sampler();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let epoch = step / cases.len();
        if step % cases.len() == 0 {
            order = (0..cases.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ));
        }
        let case = &cases[order[step % cases.len()]];
        let (sample, e) = &case.pairs_source;
        let pair_seed = rng.random::<u64>();
        let pairs = sample_pairs(sample, &sample.expressions[*e], &sampler, pair_seed)?;
        let rate = cfg.model.lang.dropout;
        let (br, grads) = case_gradients(&params, cfg, case, &pairs, Some(Dropout { rate, rng: &mut rng }))?;
        if !br.l_total.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(DstgError::Divergence { step });
        }
        apply_update(&mut params, &grads, cfg.lr_at(step), &mut adam);
        if !params.all_finite() {
            return Err(DstgError::Divergence { step });
        }
        on_log(&LogRecord {
            step,
            video_id: case.video_id.clone(),
            l_c: br.l_c,
            l_d: br.l_d,
            l_total: br.l_total,
            lambda: br.lambda,
        });
    }
    Ok(Checkpoint { params, config: cfg.clone(), vocab, step: cfg.steps, rng })
}

/// JSONL loss log; an optional `{"manifest": ...}` line goes first.
pub fn write_log(path: &Path, manifest: Option<&serde_json::Value>, records: &[LogRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(m) = manifest {
        writeln!(w, "{}", serde_json::json!({ "manifest": m }))?;
    }
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint container.

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ckpt/1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    vocab: serde_json::Value,
    step: usize,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    /// Free-form provenance; must not contain wall-clock data.
    manifest: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self, manifest: &serde_json::Value) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab: serde_json::from_str(&self.vocab.to_json()?)?,
            step: self.step,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            manifest: manifest.clone(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(h.len() as u64).to_le_bytes());
        buf.extend_from_slice(&h);
        buf.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.params.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for x in &m.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Returns the checkpoint and its embedded manifest.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let bad = |m: &str| DstgError::Format(format!("checkpoint: {m}"));
        let mut cur = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes.get(cur..cur + k).ok_or_else(|| bad("truncated"))?;
            cur += k;
            Ok(s)
        };
        if take(6)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(hlen)?)?;
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let count = u32_of(take(4)?);
        let mut params = ParamStore::default();
        for _ in 0..count {
            let nl = u32_of(take(4)?);
            let name = String::from_utf8(take(nl)?.to_vec()).map_err(|_| bad("tensor name"))?;
            let rows = u32_of(take(4)?);
            let cols = u32_of(take(4)?);
            let raw = take(rows * cols * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Mat::from_vec(rows, cols, data));
        }
        if cur != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let seed: [u8; 32] = hex::decode(&header.rng_seed)
            .map_err(|_| bad("rng seed"))?
            .try_into()
            .map_err(|_| bad("rng seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| bad("rng word pos"))?);
        let vocab = Vocabulary::from_json(&header.vocab.to_string())?;
        Ok((Self { params, config: header.config, vocab, step: header.step, rng }, header.manifest))
    }

    pub fn save(&self, path: &Path, manifest: &serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn grounder(&self) -> Grounder<'_> {
        Grounder {
            params: &self.params,
            model: &self.config.model,
            graph: &self.config.graph,
            vocab: &self.vocab,
            link: &self.config.link,
        }
    }

    pub fn ground_all(&self, samples: &[VideoSample]) -> Result<Vec<GroundingResult>> {
        let g = self.grounder();
        let mut out = Vec::new();
        for s in samples {
            for e in 0..s.expressions.len() {
                out.push(g.ground(s, e)?);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, samples: &[VideoSample], split: Split) -> Result<EvalReport> {
        Ok(match_and_score(&self.ground_all(samples)?, samples, split))
    }
}

// ---------------------------------------------------------------------------
// Gradient check.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub lambda: f64,
    pub max_rel_error: f64,
    /// Worst relative error per parameter group.
    pub per_group: BTreeMap<String, f64>,
    pub checked: usize,
}

/// Hook to tamper with analytic gradients before comparison.
pub type GradMutation = fn(&mut BTreeMap<String, Mat>);

/// A 2-frame, 4-region instance with random features, labels and pairs.
pub fn tiny_instance(cfg: &TrainConfig, seed: u64) -> (PreparedCase, Vec<TrainingPair>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = &cfg.model.features;
    let frames = vec![0, 0, 1, 1];
    let boxes = vec![
        BBox::new(10.0, 10.0, 40.0, 40.0),
        BBox::new(60.0, 20.0, 90.0, 60.0),
        BBox::new(14.0, 12.0, 44.0, 42.0),
        BBox::new(58.0, 24.0, 92.0, 60.0),
    ];
    let mut rows = |d: usize| (0..4).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let feats = VideoFeatures {
        appearance: rows(f.d_a),
        motion: rows(f.d_m),
        geometry: boxes.iter().map(|b| crate::featurize::pos_geometry(b, 128.0, 128.0)).collect(),
    };
    let g = build_from_parts(&frames, &boxes, &feats, &cfg.graph).unwrap();
    let graph = pad_to_budget(g, 5).unwrap();
    let plan = GraphPlan::new(&graph);
    let vocab_size = 7;
    let case = PreparedCase {
        video_id: "tiny".into(),
        labels: vec![1.0, 0.0, 1.0, 0.0, 0.0],
        token_ids: vec![2, 5, 3, 6],
        graph,
        plan,
        pairs_source: (placeholder_sample(), 0),
    };
    let pairs = vec![
        TrainingPair { anchor: 0, positives: vec![2], negatives: vec![1, 3] },
        TrainingPair { anchor: 2, positives: vec![0], negatives: vec![3] },
    ];
    (case, pairs, vocab_size)
}

fn placeholder_sample() -> VideoSample {
    VideoSample {
        schema: crate::synthdata::DATASET_SCHEMA.into(),
        video_id: "tiny".into(),
        seed: 0,
        width: 128,
        height: 128,
        num_frames: 2,
        fps: 1.0,
        objects: Vec::new(),
        regions: Vec::new(),
        expressions: Vec::new(),
    }
}

/// Compare analytic gradients of the total objective against central
/// differences (five-point stencil, step 1e-3) on [`tiny_instance`]. With `max_per_tensor`, only
/// that many evenly spaced entries of each tensor are probed.
pub fn grad_check(
    cfg: &TrainConfig,
    seed: u64,
    max_per_tensor: Option<usize>,
    mutate: Option<GradMutation>,
) -> GradCheckReport {
    let (case, pairs, vocab_size) = tiny_instance(cfg, seed);
    let store = init_params(&cfg.model, vocab_size, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5));
    let loss = |s: &ParamStore| case_gradients::<ChaCha8Rng>(s, cfg, &case, &pairs, None).unwrap();
    let (_, mut grads) = loss(&store);
    if let Some(m) = mutate {
        m(&mut grads);
    }
    let h = 1e-3;
    let mut per_group: BTreeMap<String, f64> = BTreeMap::new();
    let mut checked = 0;
    let mut probe = store.clone();
    for (name, m) in &store.tensors {
        let n = m.data.len();
        let stride = max_per_tensor.map_or(1, |k| n.div_ceil(k.max(1)).max(1));
        for k in (0..n).step_by(stride) {
            let orig = m.data[k];
            let mut at = |x: f64| {
                probe.get_mut(name).data[k] = x;
                loss(&probe).0.l_total
            };
            let num = (at(orig - 2.0 * h) - 8.0 * at(orig - h) + 8.0 * at(orig + h) - at(orig + 2.0 * h)) / (12.0 * h);
            probe.get_mut(name).data[k] = orig;
            let ana = grads[name].data[k];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-7);
            let g = per_group.entry(ParamStore::group_of(name).to_string()).or_insert(0.0);
            *g = g.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        lambda: cfg.lambda,
        max_rel_error: per_group.values().copied().fold(0.0, f64::max),
        per_group,
        checked,
    }
}

// ---------------------------------------------------------------------------
// Ablation.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: Ablation,
    pub m_viou_per_seed: Vec<f64>,
    pub median_m_viou: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Train and evaluate every ablation row for each seed; rows in table order.
pub fn run_ablation(
    train_set: &[VideoSample],
    held_out: &[VideoSample],
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, flags) in Ablation::table_rows() {
        let mut scores = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.ablation = flags;
            cfg.seed = seed;
            let ck = train(train_set, &cfg, |_| {})?;
            scores.push(ck.evaluate(held_out, Split::All)?.m_viou);
        }
        rows.push(AblationRow { label: label.into(), flags, median_m_viou: median(&scores), m_viou_per_seed: scores });
    }
    Ok(rows)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| row | SGB | TGB | SCL | TCL | SA | CA | m_vIoU (median) |\n|---|---|---|---|---|---|---|---|\n",
    );
    let mark = |b: bool| if b { "x" } else { "" };
    for (i, r) in rows.iter().enumerate() {
        let f = r.flags;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {:.4} |\n",
            i + 1,
            mark(f.sgb),
            mark(f.tgb),
            mark(f.scl),
            mark(f.tcl),
            mark(f.sa),
            mark(f.ca),
            r.median_m_viou
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::FeatureConfig;
    use crate::langenc::LangConfig;
    use crate::synthdata::{generate_dataset, GeneratorConfig};

    fn small() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_h: 4,
                d_c: 3,
                features: FeatureConfig { d_a: 4, d_m: 4, d_p: 4, ..Default::default() },
                lang: LangConfig { d_tok: 3, d_r: 4, ..Default::default() },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn grad_check_passes_both_lambdas() {
        for lambda in [0.0, 0.2] {
            let r = grad_check(&TrainConfig { lambda, ..small() }, 3, None, None);
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            for g in ["pos", "spatial", "temporal", "decoder", "cross", "match", "lang"] {
                assert!(r.per_group.contains_key(g), "{g}");
            }
        }
    }

    #[test]
    fn grad_check_detects_corruption() {
        fn corrupt(g: &mut BTreeMap<String, Mat>) {
            g.get_mut("match.wh").unwrap().data.iter_mut().for_each(|x| *x *= 1.5);
        }
        let r = grad_check(&small(), 3, None, Some(corrupt));
        assert!(r.max_rel_error > 1e-2);
        assert!(r.per_group["match"] > 1e-2);
    }

    fn tiny_data() -> Vec<VideoSample> {
        generate_dataset(
            &GeneratorConfig { num_frames: 16, num_objects: 3, node_budget: 160, ..Default::default() },
            3,
            1,
        )
        .unwrap()
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig { steps, graph: GraphConfig { node_budget: 160, ..Default::default() }, ..small() }
    }

    #[test]
    fn zero_steps_is_initialisation() {
        let data = tiny_data();
        let cfg = tiny_cfg(0);
        let ck = train(&data, &cfg, |_| {}).unwrap();
        let vocab = build_vocab(&data);
        let init = init_params(&cfg.model, vocab.len(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(ck.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let mut log_a = Vec::new();
        let a = train(&data, &tiny_cfg(6), |r| log_a.push(r.clone())).unwrap();
        let b = train(&data, &tiny_cfg(6), |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(log_a.len(), 6);
        assert!(log_a.iter().all(|r| r.l_total.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let data = tiny_data();
        let ck = train(&data, &tiny_cfg(3), |_| {}).unwrap();
        let m = serde_json::json!({"command": "test"});
        let bytes = ck.to_bytes(&m).unwrap();
        let (back, m2) = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(&m2).unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data();
        let cfg = TrainConfig { learning_rate: 1e300, ..tiny_cfg(5) };
        match train(&data, &cfg, |_| {}) {
            Err(DstgError::Divergence { step }) => assert!(step < 5),
            other => panic!("expected divergence, got {:?}", other.map(|c| c.step)),
        }
    }

    #[test]
    fn consistency_loss_descends_on_frozen_instance() {
        let cfg = TrainConfig { lambda: 1.0, ..small() };
        let (case, pairs, vocab_size) = tiny_instance(&cfg, 11);
        let mut store = init_params(&cfg.model, vocab_size, &mut ChaCha8Rng::seed_from_u64(2));
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let fw = forward::<ChaCha8Rng>(&mut tape, &b, &cfg.model, &case.graph, &case.plan, &case.token_ids, None)
                .unwrap();
            let lv = loss_on_tape(&mut tape, &fw, &case.plan, &case.labels, &pairs, 1.0, cfg.terms());
            let d = lv.l_d_sum.unwrap();
            let value = tape.scalar_value(d);
            assert!(value <= prev + 1e-12, "{value} > {prev}");
            prev = value;
            let g = b.gradients(&store, &tape.backward(d));
            for (k, gm) in g {
                let p = store.get_mut(&k);
                for (x, dx) in p.data.iter_mut().zip(&gm.data) {
                    *x -= 0.05 * dx;
                }
            }
        }
    }

    #[test]
    fn ablation_rows_have_their_flags() {
        let rows = Ablation::table_rows();
        assert!(rows[0].1.sgb && !rows[0].1.tgb);
        let cfg = TrainConfig { model: ModelConfig { ablation: rows[0].1, ..small().model }, ..tiny_cfg(2) };
        assert_eq!(cfg.terms(), ConsistencyTerms { spatial: false, temporal: false });
        let ck = train(&tiny_data(), &cfg, |_| {}).unwrap();
        let out = crate::model::infer(
            &ck.params,
            &cfg.model,
            &prepare_cases(&tiny_data(), &cfg, &ck.vocab).unwrap()[0].graph,
            &[2],
        )
        .unwrap();
        assert!(out.h_t.data.iter().all(|&v| v == 0.0));
    }
}
