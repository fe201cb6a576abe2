use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::attention::attention_block;
use super::{TeGConfig, TeGParams, TeGWeights};
use crate::error::{Error, Result};
use crate::granularity::FeatureVolume;
use crate::tensor::{Graph, Tensor, Var};

/// Anomaly probability per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub scores: Vec<f64>,
}

impl SegmentScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }
}

/// Graph handles of every fused matrix.
#[derive(Debug, Clone)]
pub struct FusionVars {
    pub f_sm: Var,
    pub f_ml: Var,
    pub f_sl: Var,
    pub f_sml: Var,
    pub f_res: Var,
    pub f_concat: Var,
    pub x: Var,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionIntermediates {
    pub f_sm: Tensor,
    pub f_ml: Tensor,
    pub f_sl: Tensor,
    pub f_sml: Tensor,
    pub f_res: Tensor,
    pub f_concat: Tensor,
    pub x: Tensor,
}

/// `X = [F_SM | F_ML | F_SL | F_SML] · W_res + [F_S | F_M | F_L]`.
///
/// Cross-attention queries come from the shorter granularity of each pair.
pub fn fuse_graph(
    g: &mut Graph,
    [short, medium, long]: [Var; 3],
    w: &TeGWeights<Var>,
    config: &TeGConfig,
) -> Result<FusionVars> {
    for v in [short, medium, long] {
        let (_, d) = g.value(v).dims2()?;
        if d != config.dim {
            return Err(Error::contract(format!(
                "feature width {d} does not match model width {}",
                config.dim
            )));
        }
    }
    let ln = config.use_layer_norm;
    let sm = attention_block(g, &w.mca_sm, short, medium, ln)?;
    let ml = attention_block(g, &w.mca_ml, medium, long, ln)?;
    let sl = attention_block(g, &w.mca_sl, short, long, ln)?;
    let f_concat = g.concat_cols(&[short, medium, long])?;
    let sml = attention_block(g, &w.msa, f_concat, f_concat, ln)?;
    let f_res = g.concat_cols(&[sm.output, ml.output, sl.output, sml.output])?;
    let projected = g.matmul(f_res, w.residual)?;
    let x = g.add(projected, f_concat)?;

    let attention = [sm.weights, ml.weights, sl.weights, sml.weights].concat();
    Ok(FusionVars {
        f_sm: sm.output,
        f_ml: ml.output,
        f_sl: sl.output,
        f_sml: sml.output,
        f_res,
        f_concat,
        x,
        attention,
    })
}

/// Per-row MLP `3D → h1 → h2 → 1` with ReLU and a sigmoid head; returns a
/// `T×1` column. `dropout` enables inverted dropout after hidden layers.
pub fn classify_graph(
    g: &mut Graph,
    x: Var,
    w: &TeGWeights<Var>,
    mut dropout: Option<(&mut dyn RngCore, f64)>,
) -> Result<Var> {
    let c = &w.classifier;
    let mut h = x;
    for (weight, bias) in [(c.w1, c.b1), (c.w2, c.b2)] {
        let z = g.matmul(h, weight)?;
        let z = g.add_row(z, bias)?;
        h = g.relu(z);
        if let Some((rng, rate)) = dropout.as_mut() {
            if *rate > 0.0 {
                let keep = 1.0 - *rate;
                let shape = g.shape(h).to_vec();
                let n = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = g.constant(Tensor::new(shape, mask)?);
                h = g.mul(h, m)?;
            }
        }
    }
    let z = g.matmul(h, c.w3)?;
    let z = g.add_row(z, c.b3)?;
    Ok(g.sigmoid(z))
}

pub fn fuse(
    volume: &FeatureVolume,
    params: &TeGParams,
    config: &TeGConfig,
) -> Result<(Tensor, FusionIntermediates)> {
    if volume.dim != config.dim {
        return Err(Error::contract(format!(
            "volume {} has width {}, model expects {}",
            volume.video_id, volume.dim, config.dim
        )));
    }
    let mut g = Graph::new();
    let w = params.bind_constant(&mut g);
    let inputs = [
        g.constant(volume.short.clone()),
        g.constant(volume.medium.clone()),
        g.constant(volume.long.clone()),
    ];
    let f = fuse_graph(&mut g, inputs, &w, config)?;
    let grab = |v: Var| g.value(v).clone();
    let inter = FusionIntermediates {
        f_sm: grab(f.f_sm),
        f_ml: grab(f.f_ml),
        f_sl: grab(f.f_sl),
        f_sml: grab(f.f_sml),
        f_res: grab(f.f_res),
        f_concat: grab(f.f_concat),
        x: grab(f.x),
    };
    Ok((inter.x.clone(), inter))
}

pub fn classify(x: &Tensor, params: &TeGParams) -> Result<SegmentScores> {
    let (_, width) = x.dims2()?;
    let expected = params.classifier.w1.rows();
    if width != expected {
        return Err(Error::Shape {
            op: "classify",
            lhs: x.shape().to_vec(),
            rhs: params.classifier.w1.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let w = params.bind_constant(&mut g);
    let xv = g.constant(x.clone());
    let s = classify_graph(&mut g, xv, &w, None)?;
    Ok(SegmentScores {
        scores: g.value(s).data().to_vec(),
    })
}

/// Inference: fuse then classify.
pub fn score_volume(volume: &FeatureVolume, params: &TeGParams, config: &TeGConfig) -> Result<SegmentScores> {
    let (x, _) = fuse(volume, params, config)?;
    classify(&x, params)
}
