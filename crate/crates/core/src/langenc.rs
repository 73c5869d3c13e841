//! Whitespace tokenization, vocabulary and the bi-directional LSTM sentence
//! encoder producing the expression embedding `r`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstgError, Result};
use crate::params::{xavier, Bound, ParamStore};
use crate::tape::{Mat, Tape, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MAX_TOKENS: usize = 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Self {
        let mut v = Self { tokens: vec![PAD_TOKEN.into(), UNK_TOKEN.into()], index: BTreeMap::new() };
        v.reindex();
        for sentence in corpus {
            for tok in sentence {
                let tok = tok.as_ref();
                if !v.index.contains_key(tok) {
                    v.index.insert(tok.to_string(), v.tokens.len());
                    v.tokens.push(tok.to_string());
                }
            }
        }
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Self = serde_json::from_str(s)?;
        if v.tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(DstgError::Format("vocabulary must start with <pad>".into()));
        }
        v.reindex();
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SentencePooling {
    /// Concatenate the last forward and last backward states.
    #[default]
    FinalState,
    /// Concatenate the per-direction mean of token states.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LangConfig {
    pub d_tok: usize,
    /// Size of `r`; each direction gets half.
    pub d_r: usize,
    pub dropout: f64,
    pub pooling: SentencePooling,
}

impl Default for LangConfig {
    fn default() -> Self {
        Self { d_tok: 32, d_r: 64, dropout: 0.1, pooling: SentencePooling::FinalState }
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &LangConfig, vocab_size: usize, rng: &mut impl Rng) {
    let h = cfg.d_r / 2;
    store.insert("lang.embed", xavier(vocab_size, cfg.d_tok, rng));
    for dir in ["fwd", "bwd"] {
        store.insert(format!("lang.{dir}.wx"), xavier(cfg.d_tok, 4 * h, rng));
        store.insert(format!("lang.{dir}.wh"), xavier(h, 4 * h, rng));
        // forget-gate bias starts at 1
        let mut b = Mat::zeros(1, 4 * h);
        b.data[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        store.insert(format!("lang.{dir}.b"), b);
    }
}

/// Token dropout masks for training mode; `None` means evaluation mode.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionEmbedding {
    pub r: Vec<f64>,
    /// T × d_r per-token states (forward ‖ backward).
    pub token_states: Mat,
}

pub struct EncodedSentence {
    pub r: Var,
    pub forward_states: Vec<Var>,
    pub backward_states: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var, hidden: usize) -> (Var, Var) {
    let xw = tape.matmul(x, wx);
    let hw = tape.matmul(h, wh);
    let pre = tape.add(xw, hw);
    let gates = tape.add(pre, b);
    let i = tape.slice_cols(gates, 0, hidden);
    let f = tape.slice_cols(gates, hidden, hidden);
    let g = tape.slice_cols(gates, 2 * hidden, hidden);
    let o = tape.slice_cols(gates, 3 * hidden, hidden);
    let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
    let g = tape.tanh(g);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc);
    (h_next, c_next)
}

/// Record the bi-LSTM over `ids` on the tape. PAD ids are skipped, ids are
/// truncated to [`MAX_TOKENS`].
pub fn encode_on_tape<R: Rng>(
    tape: &mut Tape,
    params: &Bound,
    cfg: &LangConfig,
    ids: &[usize],
    dropout: Option<Dropout<'_, R>>,
) -> Result<EncodedSentence> {
    let ids: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD).take(MAX_TOKENS).collect();
    if ids.is_empty() {
        return Err(DstgError::Input("empty token list".into()));
    }
    let hidden = cfg.d_r / 2;
    let embed = params.get("lang.embed");
    let mut x = tape.gather_rows(embed, &ids);
    if let Some(d) = dropout {
        if d.rate > 0.0 {
            let keep = 1.0 - d.rate;
            let mask: Vec<f64> = (0..ids.len() * cfg.d_tok)
                .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = tape.constant(Mat::from_vec(ids.len(), cfg.d_tok, mask));
            x = tape.mul(x, m);
        }
    }
    let steps: Vec<Var> = (0..ids.len()).map(|t| tape.gather_rows(x, &[t])).collect();
    let mut run = |dir: &str, order: Vec<usize>| -> Vec<Var> {
        let wx = params.get(&format!("lang.{dir}.wx"));
        let wh = params.get(&format!("lang.{dir}.wh"));
        let b = params.get(&format!("lang.{dir}.b"));
        let mut h = tape.constant(Mat::zeros(1, hidden));
        let mut c = tape.constant(Mat::zeros(1, hidden));
        let mut states = vec![h; order.len()];
        for t in order {
            (h, c) = lstm_step(tape, steps[t], h, c, wx, wh, b, hidden);
            states[t] = h;
        }
        states
    };
    let n = ids.len();
    let forward_states = run("fwd", (0..n).collect());
    let backward_states = run("bwd", (0..n).rev().collect());
    let r = match cfg.pooling {
        SentencePooling::FinalState => tape.concat_cols(forward_states[n - 1], backward_states[0]),
        SentencePooling::MeanPool => {
            let mean = |tape: &mut Tape, s: &[Var]| {
                let mut acc = s[0];
                for &v in &s[1..] {
                    acc = tape.add(acc, v);
                }
                tape.scale(acc, 1.0 / s.len() as f64)
            };
            let f = mean(tape, &forward_states);
            let b = mean(tape, &backward_states);
            tape.concat_cols(f, b)
        }
    };
    Ok(EncodedSentence { r, forward_states, backward_states })
}

/// Evaluate the encoder outside of training.
pub fn encode_expression(
    tokens: &[String],
    vocab: &Vocabulary,
    store: &ParamStore,
    cfg: &LangConfig,
) -> Result<ExpressionEmbedding> {
    encode_expression_with::<rand::rngs::ThreadRng>(tokens, vocab, store, cfg, None)
}

pub fn encode_expression_with<R: Rng>(
    tokens: &[String],
    vocab: &Vocabulary,
    store: &ParamStore,
    cfg: &LangConfig,
    dropout: Option<Dropout<'_, R>>,
) -> Result<ExpressionEmbedding> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let enc = encode_on_tape(&mut tape, &bound, cfg, &vocab.encode(tokens), dropout)?;
    let t = enc.forward_states.len();
    let mut states = Mat::zeros(t, cfg.d_r);
    for k in 0..t {
        let row = states.row_mut(k);
        row[..cfg.d_r / 2].copy_from_slice(&tape.value(enc.forward_states[k]).data);
        row[cfg.d_r / 2..].copy_from_slice(&tape.value(enc.backward_states[k]).data);
    }
    Ok(ExpressionEmbedding { r: tape.value(enc.r).data.clone(), token_states: states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn setup() -> (Vocabulary, ParamStore, LangConfig) {
        let vocab = Vocabulary::build(&[toks("the red striped person that is dancing"), toks("a blue shape running")]);
        let cfg = LangConfig::default();
        let mut store = ParamStore::default();
        init_params(&mut store, &cfg, vocab.len(), &mut ChaCha8Rng::seed_from_u64(3));
        (vocab, store, cfg)
    }

    #[test]
    fn vocab_counting() {
        let v = Vocabulary::build(&[vec!["a", "man"]]);
        assert_eq!(v.len(), 4);
        let v = Vocabulary::build(&[vec!["a", "a", "man", "a"]]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.id(PAD_TOKEN), PAD);
    }

    #[test]
    fn vocab_json_roundtrip() {
        let v = Vocabulary::build(&[vec!["a", "man"]]);
        let w = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(w.id("man"), 3);
        assert_eq!(v.tokens, w.tokens);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (v, s, c) = setup();
        let a = encode_expression(&toks("the red person dancing"), &v, &s, &c).unwrap();
        let b = encode_expression(&toks("the red person dancing"), &v, &s, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.r.len(), 64);
        assert_eq!(a.token_states.shape(), (4, 64));
        assert!(a.r.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn direction_sensitive() {
        let (v, s, c) = setup();
        let a = encode_expression(&toks("the red person dancing"), &v, &s, &c).unwrap();
        let b = encode_expression(&toks("dancing person red the"), &v, &s, &c).unwrap();
        assert_ne!(a.r, b.r);
    }

    #[test]
    fn dropout_is_stochastic() {
        let (v, s, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for _ in 0..100 {
            let e = encode_expression_with(
                &toks("the red striped person that is dancing"),
                &v,
                &s,
                &c,
                Some(Dropout { rate: 0.1, rng: &mut rng }),
            )
            .unwrap();
            if !seen.contains(&e.r) {
                seen.push(e.r);
            }
        }
        assert!(seen.len() >= 2);
    }

    #[test]
    fn empty_rejected_and_truncated() {
        let (v, s, c) = setup();
        assert!(encode_expression(&[], &v, &s, &c).is_err());
        let long: Vec<String> = std::iter::repeat_n("red".to_string(), 40).collect();
        let e = encode_expression(&long, &v, &s, &c).unwrap();
        assert_eq!(e.token_states.rows, MAX_TOKENS);
    }

    #[test]
    fn pad_positions_carry_no_gradient() {
        let (v, s, c) = setup();
        let grad_of = |ids: &[usize]| {
            let mut tape = Tape::new();
            let b = s.bind(&mut tape);
            let enc = encode_on_tape::<ChaCha8Rng>(&mut tape, &b, &c, ids, None).unwrap();
            let out = tape.sum_all(enc.r);
            let value = tape.scalar_value(out);
            let g = tape.backward(out);
            (value, b.gradients(&s, &g)["lang.embed"].clone())
        };
        let ids = v.encode(&toks("red person dancing"));
        let mut padded = ids.clone();
        padded.extend([PAD, PAD]);
        let (va, ga) = grad_of(&ids);
        let (vb, gb) = grad_of(&padded);
        assert_eq!(va, vb);
        assert_eq!(ga, gb);
        assert!(ga.row(PAD).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (v, s, c) = setup();
        let ids = v.encode(&toks("the red person dancing"));
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let enc = encode_on_tape::<ChaCha8Rng>(&mut tape, &b, &c, &ids, None).unwrap();
            let sq = tape.mul(enc.r, enc.r);
            let out = tape.sum_all(sq);
            (tape.scalar_value(out), tape, b, out)
        };
        let (_, tape, b, out) = loss(&s);
        let grads = b.gradients(&s, &tape.backward(out));
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for name in ["lang.fwd.wx", "lang.bwd.wh", "lang.embed", "lang.fwd.b"] {
            let m = s.get(name);
            for k in (0..m.data.len()).step_by(7) {
                let mut p = s.clone();
                p.get_mut(name).data[k] += eps;
                let mut q = s.clone();
                q.get_mut(name).data[k] -= eps;
                let num = (loss(&p).0 - loss(&q).0) / (2.0 * eps);
                let ana = grads[name].data[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }
}
