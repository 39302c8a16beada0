//! Desk-scale causal transformer with hand-written backpropagation.
//!
//! Architecture: token embedding + learned positional embedding, `n_layers` pre-norm
//! blocks (causal multi-head self-attention, then a GELU feed-forward of width
//! `4 * d_model`, each with a residual), a final layer norm and an untied output
//! projection. All parameters live in one flat `f64` buffer described by a
//! [`ParamLayout`], which keeps the optimizer, checkpointing and gradient checks
//! layout-agnostic.

mod decode;
mod forward;

pub use decode::DecodeState;
pub use forward::{BatchGrad, RowOutput};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelConfigError {
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig { vocab_size: 259, d_model: 64, n_layers: 2, n_heads: 2, seq_len: 256, init_seed: 0, init_scale: 0.02 }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<(), ModelConfigError> {
        for (v, name) in [
            (self.vocab_size, "vocab_size"),
            (self.d_model, "d_model"),
            (self.n_layers, "n_layers"),
            (self.n_heads, "n_heads"),
            (self.seq_len, "seq_len"),
        ] {
            if v == 0 {
                return Err(ModelConfigError::Zero(name));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelConfigError::HeadSplit { d_model: self.d_model, n_heads: self.n_heads });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc1: usize,
    pub b_fc1: usize,
    pub w_fc2: usize,
    pub b_fc2: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    pub(crate) b_out: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ToyLmConfig) -> Self {
        let (v, d, t, f) = (cfg.vocab_size, cfg.d_model, cfg.seq_len, cfg.ffn_dim());
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let e = ParamEntry { name, shape, offset: total };
            total += e.len();
            let off = e.offset;
            entries.push(e);
            off
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![t, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), vec![d]),
                ln1_b: push(p("ln1.bias"), vec![d]),
                w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(p("attn.b_qkv"), vec![3 * d]),
                w_o: push(p("attn.w_o"), vec![d, d]),
                b_o: push(p("attn.b_o"), vec![d]),
                ln2_g: push(p("ln2.gain"), vec![d]),
                ln2_b: push(p("ln2.bias"), vec![d]),
                w_fc1: push(p("ffn.w1"), vec![d, f]),
                b_fc1: push(p("ffn.b1"), vec![f]),
                w_fc2: push(p("ffn.w2"), vec![f, d]),
                b_fc2: push(p("ffn.b2"), vec![d]),
            });
        }
        let lnf_g = push("ln_f.gain".into(), vec![d]);
        let lnf_b = push("ln_f.bias".into(), vec![d]);
        let w_out = push("out.w".into(), vec![d, v]);
        let b_out = push("out.b".into(), vec![v]);
        ParamLayout { entries, total, tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Model weights plus their layout.
#[derive(Debug, Clone)]
pub struct ToyLm {
    cfg: ToyLmConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl ToyLm {
    /// Seeded initialization: matrices and embeddings ~ N(0, init_scale²), gains 1, biases 0.
    pub fn init(cfg: ToyLmConfig) -> Result<Self, ModelConfigError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        if cfg.init_scale > 0.0 {
            let normal = Normal::new(0.0, cfg.init_scale).expect("finite init scale");
            for e in layout.entries() {
                if e.shape.len() == 2 {
                    for p in &mut params[e.range()] {
                        *p = normal.sample(&mut rng);
                    }
                }
            }
        }
        for e in layout.entries() {
            if e.name.ends_with(".gain") {
                params[e.range()].fill(1.0);
            }
        }
        Ok(ToyLm { cfg, layout, params })
    }

    pub fn from_params(cfg: ToyLmConfig, params: Vec<f64>) -> Result<Self, ModelConfigError> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        if params.len() != layout.total() {
            return Err(ModelConfigError::ParamCount { expected: layout.total(), got: params.len() });
        }
        Ok(ToyLm { cfg, layout, params })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.params[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.params[r])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

pub(crate) fn view2(buf: &[f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &buf[off..off + rows * cols]).expect("layout slice")
}

pub(crate) fn view2_mut(buf: &mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut buf[off..off + rows * cols]).expect("layout slice")
}

pub(crate) fn view1(buf: &[f64], off: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&buf[off..off + len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_deterministic() {
        let a = ToyLm::init(ToyLmConfig::default()).unwrap();
        let b = ToyLm::init(ToyLmConfig::default()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = ToyLm::init(ToyLmConfig { init_seed: 1, ..ToyLmConfig::default() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn head_split_validated() {
        let cfg = ToyLmConfig { d_model: 10, n_heads: 3, ..ToyLmConfig::default() };
        assert_eq!(ToyLm::init(cfg).unwrap_err(), ModelConfigError::HeadSplit { d_model: 10, n_heads: 3 });
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = ParamLayout::new(&ToyLmConfig::default());
        let mut next = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, next, "{}", e.name);
            next += e.len();
        }
        assert_eq!(next, layout.total());
    }
}
