//! Graph encoder (decoupled spatial and temporal attention branches) and the
//! cross-modal decoder producing per-node correspondence scores.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::featurize::FeatureConfig;
use crate::langenc::{self, Dropout, LangConfig};
use crate::params::{xavier, Bound, ParamStore};
use crate::stgraph::DualGraph;
use crate::tape::{dot, leaky_relu, sigmoid, softmax_slice, Mat, Segments, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Module switches mirroring the ablation table: spatial/temporal graph
/// branches, spatial/temporal consistency terms, decoder self-attention and
/// cross-modal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub sgb: bool,
    pub tgb: bool,
    pub scl: bool,
    pub tcl: bool,
    pub sa: bool,
    pub ca: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation { sgb: true, tgb: true, scl: true, tcl: true, sa: true, ca: true };

    /// The seven ablation rows in table order, with their labels.
    pub fn table_rows() -> Vec<(&'static str, Ablation)> {
        let none = Ablation { sgb: false, tgb: false, scl: false, tcl: false, sa: false, ca: false };
        vec![
            ("SGB", Ablation { sgb: true, ..none }),
            ("SGB+TGB", Ablation { sgb: true, tgb: true, ..none }),
            ("SGB+SCL", Ablation { sgb: true, scl: true, ..none }),
            ("TGB+TCL", Ablation { tgb: true, tcl: true, ..none }),
            ("SGB+TGB+SCL+TCL", Ablation { sgb: true, tgb: true, scl: true, tcl: true, ..none }),
            ("SGB+TGB+SCL+TCL+SA", Ablation { sa: true, ..Ablation::FULL }.without_ca()),
            ("SGB+TGB+SCL+TCL+SA+CA", Ablation::FULL),
        ]
    }

    fn without_ca(mut self) -> Self {
        self.ca = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sgb && !self.tgb {
            return Err(DstgError::Config("at least one of SGB/TGB must be enabled".into()));
        }
        Ok(())
    }
}

/// Scale applied to node i before the matching head, with M unmasked nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionGate {
    /// ĥ = γ h.
    Raw,
    /// ĥ = M γ h: uniform attention leaves embeddings unscaled.
    Count,
    /// ĥ = (1 + M γ) h: attention can amplify a node but never silence it,
    /// so a mis-signed node keeps a matching gradient.
    #[default]
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_c: usize,
    pub layers: usize,
    /// Wrap the node softmax in an extra sigmoid (σ∘softmax). Breaks Σγ = 1;
    /// off by default.
    pub sigmoid_over_softmax: bool,
    /// How γ gates the node embedding before matching. γ itself always stays
    /// normalised.
    pub attention_gate: AttentionGate,
    pub ablation: Ablation,
    pub features: FeatureConfig,
    pub lang: LangConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            d_c: 32,
            layers: 2,
            sigmoid_over_softmax: false,
            attention_gate: AttentionGate::Residual,
            ablation: Ablation::FULL,
            features: FeatureConfig::default(),
            lang: LangConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.features.validate()?;
        if self.d_h == 0 || self.d_c == 0 || self.layers == 0 || self.lang.d_r < 2 || !self.lang.d_r.is_multiple_of(2) {
            return Err(DstgError::Config("model dimensions must be positive (d_r even)".into()));
        }
        Ok(())
    }
}

fn init_gat(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, layers: usize, rng: &mut impl Rng) {
    let mut d = d_in;
    for l in 0..layers {
        store.insert(format!("{prefix}.{l}.w"), xavier(d, d_out, rng));
        store.insert(format!("{prefix}.{l}.b"), Mat::zeros(1, d_out));
        store.insert(format!("{prefix}.{l}.a_src"), xavier(d_out, 1, rng));
        store.insert(format!("{prefix}.{l}.a_dst"), xavier(d_out, 1, rng));
        store.insert(format!("{prefix}.{l}.a_b"), Mat::zeros(1, 1));
        d = d_out;
    }
}

/// Fresh parameters for every group: `pos`, `spatial`, `temporal`,
/// `decoder`, `cross`, `match` and `lang`.
pub fn init_params(cfg: &ModelConfig, vocab_size: usize, rng: &mut impl Rng) -> ParamStore {
    let f = &cfg.features;
    let mut s = ParamStore::default();
    s.insert("pos.w", xavier(5, f.d_p, rng));
    s.insert("pos.b", Mat::zeros(1, f.d_p));
    init_gat(&mut s, "spatial", f.d_a + f.d_p, cfg.d_h, cfg.layers, rng);
    init_gat(&mut s, "temporal", f.d_m + f.d_p, cfg.d_h, cfg.layers, rng);
    init_gat(&mut s, "decoder", 2 * cfg.d_h, 2 * cfg.d_h, cfg.layers, rng);
    s.insert("cross.u", xavier(cfg.lang.d_r, 2 * cfg.d_h, rng));
    s.insert("match.wh", xavier(2 * cfg.d_h, cfg.d_c, rng));
    s.insert("match.wr", xavier(cfg.lang.d_r, cfg.d_c, rng));
    langenc::init_params(&mut s, &cfg.lang, vocab_size, rng);
    s
}

// ---------------------------------------------------------------------------
// Plain-value building blocks (single node), used for inspection and tests.

/// `e_j = a · [x_i ; x_j] + bias` for each neighbour `x_j`.
pub fn edge_scores(x_i: &[f64], neighbors: &[Vec<f64>], a: &[f64], bias: f64) -> Vec<f64> {
    let d = x_i.len();
    assert_eq!(a.len(), 2 * d);
    let own = dot(&a[..d], x_i);
    neighbors.iter().map(|x_j| own + dot(&a[d..], x_j) + bias).collect()
}

/// Softmax of LeakyReLU(e), slope 0.2.
pub fn normalize_attention(e: &[f64]) -> Vec<f64> {
    let l: Vec<f64> = e.iter().map(|&x| leaky_relu(x, LEAKY_SLOPE)).collect();
    softmax_slice(&l)
}

/// `σ(Σ α_j x_j + residual)`.
pub fn update_node(alpha: &[f64], neighbor_inputs: &[Vec<f64>], residual: Option<&[f64]>) -> Vec<f64> {
    let d = residual.map(<[f64]>::len).or_else(|| neighbor_inputs.first().map(Vec::len)).unwrap_or(0);
    let mut acc = residual.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
    for (w, x) in alpha.iter().zip(neighbor_inputs) {
        for (o, v) in acc.iter_mut().zip(x) {
            *o += w * v;
        }
    }
    acc.into_iter().map(sigmoid).collect()
}

/// Softmax of compatibilities over unmasked nodes; masked nodes get 0.
pub fn cross_modal_attend(compat: &[f64], mask: &[bool]) -> Vec<f64> {
    let idx: Vec<usize> = (0..compat.len()).filter(|&i| mask[i]).collect();
    let sm = softmax_slice(&idx.iter().map(|&i| compat[i]).collect::<Vec<_>>());
    let mut g = vec![0.0; compat.len()];
    for (k, &i) in idx.iter().enumerate() {
        g[i] = sm[k];
    }
    g
}

/// `σ((ĥ W_h) · (r W_r))` with `W_h: len(ĥ) × d_c`, `W_r: len(r) × d_c`.
pub fn correspondence_score(h_attended: &[f64], r: &[f64], w_h: &Mat, w_r: &Mat) -> f64 {
    let p = crate::tape::matmul(&Mat::row_vector(h_attended.to_vec()), w_h);
    let q = crate::tape::matmul(&Mat::row_vector(r.to_vec()), w_r);
    sigmoid(dot(&p.data, &q.data))
}

// ---------------------------------------------------------------------------
// Tape forward pass.

/// Edge structure of one graph, prepared once and reused across steps.
#[derive(Debug, Clone)]
pub struct GraphPlan {
    pub spatial: Rc<Segments>,
    pub temporal: Rc<Segments>,
    pub union: Rc<Segments>,
    spatial_src: Vec<usize>,
    temporal_src: Vec<usize>,
    union_src: Vec<usize>,
    pub valid: Vec<usize>,
    pub mask: Mat,
    pub n: usize,
}

impl GraphPlan {
    pub fn new(g: &DualGraph) -> Self {
        let spatial = Rc::new(Segments::from_adjacency(&g.spatial_adj));
        let temporal = Rc::new(Segments::from_adjacency(&g.temporal_adj));
        let union = Rc::new(Segments::from_adjacency(&g.union_adj()));
        Self {
            spatial_src: spatial.source_of_each_edge(),
            temporal_src: temporal.source_of_each_edge(),
            union_src: union.source_of_each_edge(),
            spatial,
            temporal,
            union,
            valid: g.valid_indices(),
            mask: Mat::from_vec(g.len(), 1, g.mask()),
            n: g.len(),
        }
    }
}

/// Handles to the intermediate results of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub h_s: Var,
    pub h_t: Var,
    /// Decoder output (equal to `[h_s, h_t]` when self-attention is off).
    pub z: Var,
    pub gamma: Var,
    pub c: Var,
    pub r: Var,
}

/// One attention layer: projection, edge scores, neighbour softmax,
/// aggregation, residual, sigmoid, LeakyReLU. Returns the node outputs and
/// the edge weights (`None` if the graph has no edges).
pub fn gat_layer(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    x: Var,
    seg: &Rc<Segments>,
    src: &[usize],
) -> (Var, Option<Var>) {
    let p = tape.linear(x, params.get(&format!("{prefix}.w")), params.get(&format!("{prefix}.b")));
    let (pre, alpha) = if seg.num_edges() == 0 {
        (p, None)
    } else {
        let s1 = tape.matmul(p, params.get(&format!("{prefix}.a_src")));
        let s2 = tape.matmul(p, params.get(&format!("{prefix}.a_dst")));
        let e1 = tape.gather_rows(s1, src);
        let e2 = tape.gather_rows(s2, &seg.targets);
        let e = tape.add(e1, e2);
        let e = tape.add_row(e, params.get(&format!("{prefix}.a_b")));
        let l = tape.leaky_relu(e, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(l, seg.clone());
        let agg = tape.segment_aggregate(alpha, p, seg.clone());
        (tape.add(agg, p), Some(alpha))
    };
    let h = tape.sigmoid(pre);
    (tape.leaky_relu(h, LEAKY_SLOPE), alpha)
}

#[allow(clippy::too_many_arguments)]
fn gat_stack(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    layers: usize,
    mut x: Var,
    seg: &Rc<Segments>,
    src: &[usize],
    mask: Var,
    residual: bool,
    mut trace: Option<&mut Vec<(String, Var)>>,
) -> Var {
    for l in 0..layers {
        let name = format!("{prefix}.{l}");
        let (y, alpha) = gat_layer(tape, params, &name, x, seg, src);
        if let (Some(t), Some(a)) = (trace.as_deref_mut(), alpha) {
            t.push((name, a));
        }
        x = if residual { tape.add(x, y) } else { y };
    }
    tape.scale_rows(x, mask)
}

/// Encoder only: `(h_s, h_t)`. Ablated branches output zeros.
pub fn encode(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, g: &DualGraph, plan: &GraphPlan) -> (Var, Var) {
    encode_traced(tape, params, cfg, g, plan, None)
}

fn encode_traced(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    g: &DualGraph,
    plan: &GraphPlan,
    mut trace: Option<&mut Vec<(String, Var)>>,
) -> (Var, Var) {
    let n = plan.n;
    let mask = tape.constant(plan.mask.clone());
    let geo = tape.constant(g.geometry.clone());
    let pos = tape.linear(geo, params.get("pos.w"), params.get("pos.b"));
    let h_s = if cfg.ablation.sgb {
        let app = tape.constant(g.appearance.clone());
        let x = tape.concat_cols(app, pos);
        gat_stack(
            tape,
            params,
            "spatial",
            cfg.layers,
            x,
            &plan.spatial,
            &plan.spatial_src,
            mask,
            false,
            trace.as_deref_mut(),
        )
    } else {
        tape.constant(Mat::zeros(n, cfg.d_h))
    };
    let h_t = if cfg.ablation.tgb {
        let mut mot = g.motion.clone();
        let k = cfg.features.motion_scale;
        mot.data.iter_mut().for_each(|v| *v *= k);
        let mot = tape.constant(mot);
        let x = tape.concat_cols(mot, pos);
        gat_stack(tape, params, "temporal", cfg.layers, x, &plan.temporal, &plan.temporal_src, mask, false, trace)
    } else {
        tape.constant(Mat::zeros(n, cfg.d_h))
    };
    (h_s, h_t)
}

fn broadcast_row(tape: &mut Tape, row: Var, n: usize) -> Var {
    tape.gather_rows(row, &vec![0; n])
}

/// Full forward pass for one (graph, expression) pair.
pub fn forward<R: Rng>(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    g: &DualGraph,
    plan: &GraphPlan,
    token_ids: &[usize],
    dropout: Option<Dropout<'_, R>>,
) -> Result<Forward> {
    forward_traced(tape, params, cfg, g, plan, token_ids, dropout, None)
}

#[allow(clippy::too_many_arguments)]
fn forward_traced<R: Rng>(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    g: &DualGraph,
    plan: &GraphPlan,
    token_ids: &[usize],
    dropout: Option<Dropout<'_, R>>,
    mut trace: Option<&mut Vec<(String, Var)>>,
) -> Result<Forward> {
    if plan.valid.is_empty() {
        return Err(DstgError::Input("graph has no unmasked nodes".into()));
    }
    let n = plan.n;
    let (h_s, h_t) = encode_traced(tape, params, cfg, g, plan, trace.as_deref_mut());
    let h = tape.concat_cols(h_s, h_t);
    let mask = tape.constant(plan.mask.clone());
    let z = if cfg.ablation.sa {
        gat_stack(tape, params, "decoder", cfg.layers, h, &plan.union, &plan.union_src, mask, true, trace)
    } else {
        h
    };
    let r = langenc::encode_on_tape(tape, params, &cfg.lang, token_ids, dropout)?.r;

    let gamma = if cfg.ablation.ca {
        let ru = tape.matmul(r, params.get("cross.u"));
        let ru = broadcast_row(tape, ru, plan.valid.len());
        let zv = tape.gather_rows(z, &plan.valid);
        let compat = tape.row_dot(zv, ru);
        let mut sm = tape.softmax(compat);
        if cfg.sigmoid_over_softmax {
            sm = tape.sigmoid(sm);
        }
        tape.scatter_rows(sm, &plan.valid, n)
    } else {
        let m = plan.valid.len() as f64;
        tape.constant(Mat::from_vec(n, 1, plan.mask.data.iter().map(|v| v / m).collect()))
    };
    let m = plan.valid.len() as f64;
    let weight = match cfg.attention_gate {
        AttentionGate::Raw => gamma,
        AttentionGate::Count => tape.scale(gamma, m),
        AttentionGate::Residual => {
            let scaled = tape.scale(gamma, m);
            let ones = tape.constant(plan.mask.clone());
            tape.add(scaled, ones)
        }
    };
    let h_att = tape.scale_rows(z, weight);
    let p = tape.matmul(h_att, params.get("match.wh"));
    let q = tape.matmul(r, params.get("match.wr"));
    let q = broadcast_row(tape, q, n);
    let logits = tape.row_dot(p, q);
    let c = tape.sigmoid(logits);
    Ok(Forward { h_s, h_t, z, gamma, c, r })
}

/// Per-node inference outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutputs {
    pub c: Vec<f64>,
    pub gamma: Vec<f64>,
    pub h_s: Mat,
    pub h_t: Mat,
}

pub fn infer(store: &ParamStore, cfg: &ModelConfig, g: &DualGraph, token_ids: &[usize]) -> Result<NodeOutputs> {
    let plan = GraphPlan::new(g);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let f = forward::<rand::rngs::ThreadRng>(&mut tape, &b, cfg, g, &plan, token_ids, None)?;
    Ok(NodeOutputs {
        c: tape.value(f.c).data.clone(),
        gamma: tape.value(f.gamma).data.clone(),
        h_s: tape.value(f.h_s).clone(),
        h_t: tape.value(f.h_t).clone(),
    })
}

/// Edge weights of one GAT layer in CSR layout: node `i`'s weights over its
/// neighbours are `weights[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    /// `spatial.0`, `temporal.1`, `decoder.0`, ...
    pub layer: String,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
}

impl LayerAttention {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Run inference and return γ together with every layer's α.
pub fn attention_weights(
    store: &ParamStore,
    cfg: &ModelConfig,
    g: &DualGraph,
    token_ids: &[usize],
) -> Result<(Vec<f64>, Vec<LayerAttention>)> {
    let plan = GraphPlan::new(g);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let mut trace = Vec::new();
    let f = forward_traced::<rand::rngs::ThreadRng>(&mut tape, &b, cfg, g, &plan, token_ids, None, Some(&mut trace))?;
    let layers = trace
        .into_iter()
        .map(|(layer, a)| {
            let seg = match layer.split('.').next() {
                Some("spatial") => &plan.spatial,
                Some("temporal") => &plan.temporal,
                _ => &plan.union,
            };
            LayerAttention {
                layer,
                offsets: seg.offsets.clone(),
                neighbors: seg.targets.clone(),
                weights: tape.value(a).data.clone(),
            }
        })
        .collect();
    Ok((tape.value(f.gamma).data.clone(), layers))
}
