//! The fusion network: three cross-attention blocks over granularity pairs,
//! one self-attention block over the concatenated granularities, a residual
//! projection, and a per-segment MLP head.

mod attention;
pub mod checkpoint;
mod fusion;

pub use attention::{attention_block, AttentionOutput};
pub use fusion::{
    classify, classify_graph, fuse, fuse_graph, score_volume, FusionIntermediates, FusionVars,
    SegmentScores,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeGConfig {
    /// Feature width per granularity.
    pub dim: usize,
    pub heads: usize,
    pub fcn_hidden: (usize, usize),
    /// Applied after each hidden classifier layer during training.
    pub dropout_rate: f64,
    /// Wrap every attention block as `LayerNorm(query + attention)`.
    pub use_layer_norm: bool,
}

impl Default for TeGConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 4,
            fcn_hidden: (512, 128),
            dropout_rate: 0.0,
            use_layer_norm: true,
        }
    }
}

impl TeGConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn fused_width(&self) -> usize {
        3 * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(Error::config("dim and heads must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide the feature width ({})",
                self.heads, self.dim
            )));
        }
        if self.fcn_hidden.0 == 0 || self.fcn_hidden.1 == 0 {
            return Err(Error::config("classifier hidden sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.use_layer_norm && self.dim < 2 {
            return Err(Error::config("layer norm needs dim >= 2"));
        }
        Ok(())
    }
}

/// Per-head Q/K/V projections, a shared output projection and the
/// layer-norm affine parameters of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub output: T,
    pub norm_gain: T,
    pub norm_bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub w3: T,
    pub b3: T,
}

/// All learnable weights, generic over the storage so the same structure
/// holds tensors, graph handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TeGWeights<T> {
    pub mca_sm: AttentionWeights<T>,
    pub mca_ml: AttentionWeights<T>,
    pub mca_sl: AttentionWeights<T>,
    pub msa: AttentionWeights<T>,
    /// `6D × 3D` projection of the concatenated attention outputs.
    pub residual: T,
    pub classifier: ClassifierWeights<T>,
}

pub type TeGParams = TeGWeights<Tensor>;

impl<T> AttentionWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (kind, list) in [("q", &self.query), ("k", &self.key), ("v", &self.value)] {
            for (h, t) in list.iter().enumerate() {
                f(format!("{prefix}.{kind}.{h}"), t);
            }
        }
        f(format!("{prefix}.o"), &self.output);
        f(format!("{prefix}.ln.gain"), &self.norm_gain);
        f(format!("{prefix}.ln.bias"), &self.norm_bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (kind, list) in [("q", &mut self.query), ("k", &mut self.key), ("v", &mut self.value)] {
            for (h, t) in list.iter_mut().enumerate() {
                f(format!("{prefix}.{kind}.{h}"), t);
            }
        }
        f(format!("{prefix}.o"), &mut self.output);
        f(format!("{prefix}.ln.gain"), &mut self.norm_gain);
        f(format!("{prefix}.ln.bias"), &mut self.norm_bias);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            query: self.query.iter().map(&mut *f).collect(),
            key: self.key.iter().map(&mut *f).collect(),
            value: self.value.iter().map(&mut *f).collect(),
            output: f(&self.output),
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
        }
    }
}

impl<T> ClassifierWeights<T> {
    fn entries(&self) -> [(&'static str, &T); 6] {
        [
            ("fcn.0.w", &self.w1),
            ("fcn.0.b", &self.b1),
            ("fcn.1.w", &self.w2),
            ("fcn.1.b", &self.b2),
            ("fcn.2.w", &self.w3),
            ("fcn.2.b", &self.b3),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut T); 6] {
        [
            ("fcn.0.w", &mut self.w1),
            ("fcn.0.b", &mut self.b1),
            ("fcn.1.w", &mut self.w2),
            ("fcn.1.b", &mut self.b2),
            ("fcn.2.w", &mut self.w3),
            ("fcn.2.b", &mut self.b3),
        ]
    }
}

impl<T> TeGWeights<T> {
    /// Visits every weight with its stable name, in checkpoint order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.mca_sm.visit("mca_sm", f);
        self.mca_ml.visit("mca_ml", f);
        self.mca_sl.visit("mca_sl", f);
        self.msa.visit("msa", f);
        f("residual".to_string(), &self.residual);
        for (name, t) in self.classifier.entries() {
            f(name.to_string(), t);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        self.mca_sm.visit_mut("mca_sm", f);
        self.mca_ml.visit_mut("mca_ml", f);
        self.mca_sl.visit_mut("mca_sl", f);
        self.msa.visit_mut("msa", f);
        f("residual".to_string(), &mut self.residual);
        for (name, t) in self.classifier.entries_mut() {
            f(name.to_string(), t);
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> TeGWeights<U> {
        let f: &mut dyn FnMut(&T) -> U = &mut f;
        let c = &self.classifier;
        TeGWeights {
            mca_sm: self.mca_sm.map(f),
            mca_ml: self.mca_ml.map(f),
            mca_sl: self.mca_sl.map(f),
            msa: self.msa.map(f),
            residual: f(&self.residual),
            classifier: ClassifierWeights {
                w1: f(&c.w1),
                b1: f(&c.b1),
                w2: f(&c.w2),
                b2: f(&c.b2),
                w3: f(&c.w3),
                b3: f(&c.b3),
            },
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl TeGParams {
    /// Registers every weight as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> TeGWeights<Var> {
        self.map(|t| g.param(t.clone()))
    }

    /// Registers every weight as a constant (inference only).
    pub fn bind_constant(&self, g: &mut Graph) -> TeGWeights<Var> {
        self.map(|t| g.constant(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Weight shapes implied by a configuration; values are placeholders.
fn shaped(config: &TeGConfig, mut make: impl FnMut(&[usize], Init) -> Tensor) -> TeGParams {
    let d = config.dim;
    let dh = config.head_dim();
    let mut block = |width: usize, head: usize| AttentionWeights {
        query: (0..config.heads).map(|_| make(&[width, head], Init::Weight)).collect(),
        key: (0..config.heads).map(|_| make(&[width, head], Init::Weight)).collect(),
        value: (0..config.heads).map(|_| make(&[width, head], Init::Weight)).collect(),
        output: make(&[width, width], Init::Weight),
        norm_gain: make(&[width], Init::One),
        norm_bias: make(&[width], Init::Zero),
    };
    let mca_sm = block(d, dh);
    let mca_ml = block(d, dh);
    let mca_sl = block(d, dh);
    let msa = block(3 * d, 3 * dh);
    let (h1, h2) = config.fcn_hidden;
    TeGWeights {
        mca_sm,
        mca_ml,
        mca_sl,
        msa,
        residual: make(&[6 * d, 3 * d], Init::Weight),
        classifier: ClassifierWeights {
            w1: make(&[3 * d, h1], Init::Weight),
            b1: make(&[h1], Init::Zero),
            w2: make(&[h1, h2], Init::Weight),
            b2: make(&[h2], Init::Zero),
            w3: make(&[h2, 1], Init::Weight),
            b3: make(&[1], Init::Zero),
        },
    }
}

#[derive(Clone, Copy)]
enum Init {
    Weight,
    One,
    Zero,
}

/// Deterministic initialization: weight matrices uniform in
/// `±1/√fan_in`, biases zero, layer-norm gains one.
pub fn init_params(config: &TeGConfig, seed: u64) -> Result<TeGParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(shaped(config, |shape, init| match init {
        Init::Weight => {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        }
        Init::One => Tensor::filled(shape, 1.0),
        Init::Zero => Tensor::zeros(shape),
    }))
}

/// All-zero parameters with the shapes of `config`.
pub fn zero_params(config: &TeGConfig) -> Result<TeGParams> {
    config.validate()?;
    Ok(shaped(config, |shape, _| Tensor::zeros(shape)))
}
