//! Training objective.
//!
//! For an abnormal/normal pair the loss is
//! `BCE(pos) + BCE(neg) + λ_fm·max(0, m − d) + λ1·Σ s⁺² + λ2·Σ |s⁺_t − s⁺_{t−1}|`
//! where `d` is the gap between the mean top-k row norms of the fused
//! features, and each BCE uses the mean score of that video's top-k rows.
//! The batch loss is the mean over pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegmentScores;
use crate::tensor::{Graph, Tensor, Var};

/// Smoothing constant of the `|·|` surrogate in the smoothness term.
pub const SMOOTH_ABS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub k: usize,
    pub lambda_fm: f64,
    pub lambda_sparsity: f64,
    pub lambda_smoothness: f64,
    pub probability_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 100.0,
            k: 3,
            lambda_fm: 1.0,
            lambda_sparsity: 8e-4,
            lambda_smoothness: 8e-4,
            probability_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, segments: usize) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.k == 0 || self.k > segments {
            return Err(Error::config(format!("k={} outside 1..={segments}", self.k)));
        }
        for (name, v) in [
            ("lambda_fm", self.lambda_fm),
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_smoothness", self.lambda_smoothness),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.probability_clamp > 0.0 && self.probability_clamp < 0.5) {
            return Err(Error::config("probability clamp must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Weighted sum of the (already pair-averaged) components.
    pub fn combine(&self, bce: f64, fm: f64, sparsity: f64, smoothness: f64) -> f64 {
        bce + self.lambda_fm * fm + self.lambda_sparsity * sparsity + self.lambda_smoothness * smoothness
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKSelection {
    /// Row indices, largest magnitude first.
    pub indices: Vec<usize>,
    pub mean_magnitude: f64,
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn select_topk(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::contract(format!("k={k} outside 1..={}", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Mean of the `k` largest row norms of `x`, differentiable through the
/// selected rows.
pub fn topk_mean_graph(g: &mut Graph, x: Var, k: usize) -> Result<(Var, Vec<usize>)> {
    let norms = g.row_norms(x)?;
    let indices = select_topk(g.value(norms).data(), k)?;
    let selected = g.select_rows(norms, &indices)?;
    Ok((g.mean(selected), indices))
}

pub fn topk_magnitudes(x: &Tensor, k: usize) -> Result<TopKSelection> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (mean, indices) = topk_mean_graph(&mut g, xv, k)?;
    Ok(TopKSelection {
        indices,
        mean_magnitude: g.value(mean).item(),
    })
}

/// `max(0, m − (topk(X⁺) − topk(X⁻)))`.
pub fn feature_magnitude_graph(g: &mut Graph, x_pos: Var, x_neg: Var, cfg: &LossConfig) -> Result<Var> {
    if g.shape(x_pos) != g.shape(x_neg) {
        return Err(Error::Shape {
            op: "feature_magnitude_loss",
            lhs: g.shape(x_pos).to_vec(),
            rhs: g.shape(x_neg).to_vec(),
        });
    }
    let (pos, _) = topk_mean_graph(g, x_pos, cfg.k)?;
    let (neg, _) = topk_mean_graph(g, x_neg, cfg.k)?;
    let d = g.sub(pos, neg)?;
    let neg_d = g.scale(d, -1.0);
    let gap = g.offset(neg_d, cfg.margin);
    Ok(g.relu(gap))
}

/// Binary cross-entropy of the mean score over `indices`.
pub fn bce_topk_graph(g: &mut Graph, scores: Var, indices: &[usize], label: u8, cfg: &LossConfig) -> Result<Var> {
    if label > 1 {
        return Err(Error::contract(format!("label must be 0 or 1, got {label}")));
    }
    let picked = g.select_rows(scores, indices)?;
    let mean = g.mean(picked);
    let lo = cfg.probability_clamp;
    let p = if label == 1 {
        mean
    } else {
        let flipped = g.scale(mean, -1.0);
        g.offset(flipped, 1.0)
    };
    let p = g.clamp(p, lo, 1.0 - lo);
    let ln = g.log(p);
    Ok(g.scale(ln, -1.0))
}

/// `(Σ s², Σ |s_t − s_{t−1}|)` over a score column.
pub fn sparsity_smoothness_graph(g: &mut Graph, scores: Var) -> Result<(Var, Var)> {
    let n = g.value(scores).rows();
    let sq = g.mul(scores, scores)?;
    let sparsity = g.sum(sq);
    if n < 2 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((sparsity, zero));
    }
    let tail: Vec<usize> = (1..n).collect();
    let head: Vec<usize> = (0..n - 1).collect();
    let later = g.select_rows(scores, &tail)?;
    let earlier = g.select_rows(scores, &head)?;
    let diff = g.sub(later, earlier)?;
    let abs = g.smooth_abs(diff, SMOOTH_ABS_EPS);
    Ok((sparsity, g.sum(abs)))
}

/// Fused features and score column of one video inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct VideoOutputs {
    pub x: Var,
    pub scores: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub total: T,
    pub bce: T,
    pub fm: T,
    pub sparsity: T,
    pub smoothness: T,
}

impl LossTerms<Var> {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        LossTerms {
            total: g.value(self.total).item(),
            bce: g.value(self.bce).item(),
            fm: g.value(self.fm).item(),
            sparsity: g.value(self.sparsity).item(),
            smoothness: g.value(self.smoothness).item(),
        }
    }
}

impl LossTerms<f64> {
    pub fn zero() -> Self {
        Self {
            total: 0.0,
            bce: 0.0,
            fm: 0.0,
            sparsity: 0.0,
            smoothness: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &Self, w: f64) {
        self.total += w * other.total;
        self.bce += w * other.bce;
        self.fm += w * other.fm;
        self.sparsity += w * other.sparsity;
        self.smoothness += w * other.smoothness;
    }

    /// First component that is not finite.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("bce", self.bce),
            ("feature-magnitude", self.fm),
            ("sparsity", self.sparsity),
            ("smoothness", self.smoothness),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Mean over positionally paired abnormal (`pos`) and normal (`neg`) videos.
pub fn total_loss_graph(
    g: &mut Graph,
    pos: &[VideoOutputs],
    neg: &[VideoOutputs],
    cfg: &LossConfig,
) -> Result<LossTerms<Var>> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::contract(format!(
            "need equal non-empty batch halves, got {} abnormal and {} normal",
            pos.len(),
            neg.len()
        )));
    }
    let mut bce_terms = Vec::new();
    let mut fm_terms = Vec::new();
    let mut sp_terms = Vec::new();
    let mut sm_terms = Vec::new();
    for (p, n) in pos.iter().zip(neg) {
        let (_, p_idx) = topk_mean_graph(g, p.x, cfg.k)?;
        let (_, n_idx) = topk_mean_graph(g, n.x, cfg.k)?;
        let bp = bce_topk_graph(g, p.scores, &p_idx, 1, cfg)?;
        let bn = bce_topk_graph(g, n.scores, &n_idx, 0, cfg)?;
        bce_terms.push(g.add(bp, bn)?);
        fm_terms.push(feature_magnitude_graph(g, p.x, n.x, cfg)?);
        let (sp, sm) = sparsity_smoothness_graph(g, p.scores)?;
        sp_terms.push(sp);
        sm_terms.push(sm);
    }
    let pairs = pos.len() as f64;
    let mut mean = |terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, 1.0 / pairs))
    };
    let bce = mean(&bce_terms)?;
    let fm = mean(&fm_terms)?;
    let sparsity = mean(&sp_terms)?;
    let smoothness = mean(&sm_terms)?;

    let fm_w = g.scale(fm, cfg.lambda_fm);
    let sp_w = g.scale(sparsity, cfg.lambda_sparsity);
    let sm_w = g.scale(smoothness, cfg.lambda_smoothness);
    let total = g.add(bce, fm_w)?;
    let total = g.add(total, sp_w)?;
    let total = g.add(total, sm_w)?;
    Ok(LossTerms {
        total,
        bce,
        fm,
        sparsity,
        smoothness,
    })
}

fn score_column(g: &mut Graph, s: &SegmentScores) -> Var {
    let n = s.scores.len();
    g.constant(Tensor::matrix(n, 1, s.scores.clone()).expect("column"))
}

pub fn feature_magnitude_loss(x_pos: &Tensor, x_neg: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(x_pos.clone());
    let n = g.constant(x_neg.clone());
    let l = feature_magnitude_graph(&mut g, p, n, cfg)?;
    Ok(g.value(l).item())
}

pub fn bce_topk_loss(scores: &SegmentScores, x: &Tensor, label: u8, cfg: &LossConfig) -> Result<f64> {
    if scores.len() != x.rows() {
        return Err(Error::contract(format!(
            "{} scores for {} feature rows",
            scores.len(),
            x.rows()
        )));
    }
    let sel = topk_magnitudes(x, cfg.k)?;
    let mut g = Graph::new();
    let s = score_column(&mut g, scores);
    let l = bce_topk_graph(&mut g, s, &sel.indices, label, cfg)?;
    Ok(g.value(l).item())
}

pub fn sparsity_smoothness(scores: &SegmentScores) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let mut g = Graph::new();
    let s = score_column(&mut g, scores);
    let (sp, sm) = sparsity_smoothness_graph(&mut g, s).expect("score column");
    (g.value(sp).item(), g.value(sm).item())
}

/// Batch loss from already computed fused features and scores.
pub fn total_loss(
    pos: &[(Tensor, SegmentScores)],
    neg: &[(Tensor, SegmentScores)],
    cfg: &LossConfig,
) -> Result<LossTerms<f64>> {
    let mut g = Graph::new();
    let mut bind = |items: &[(Tensor, SegmentScores)]| -> Vec<VideoOutputs> {
        items
            .iter()
            .map(|(x, s)| VideoOutputs {
                x: g.constant(x.clone()),
                scores: score_column(&mut g, s),
            })
            .collect()
    };
    let p = bind(pos);
    let n = bind(neg);
    let terms = total_loss_graph(&mut g, &p, &n, cfg)?;
    Ok(terms.values(&g))
}
