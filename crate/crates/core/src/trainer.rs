//! Mini-batch training loop.
//!
//! One epoch is one balanced batch. Each abnormal/normal pair gets its own
//! graph; pair gradients are summed in batch order, so a run is a pure
//! function of its seed, configs and dataset.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch_sized, Batch, Dataset, BATCH_PER_CLASS};
use crate::error::{Error, Result};
use crate::eval::dataset_auc;
use crate::granularity::FeatureVolume;
use crate::loss::{total_loss_graph, LossConfig, LossTerms, VideoOutputs};
use crate::model::checkpoint::write_checkpoint;
use crate::model::{classify_graph, fuse_graph, init_params, TeGConfig, TeGParams, TeGWeights};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub batch_per_class: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Validation AUC every this many epochs; 0 disables.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON report, rewritten after every checkpoint and at the end.
    pub report_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            decoupled_weight_decay: false,
            batch_per_class: BATCH_PER_CLASS,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            checkpoint_dir: None,
            report_path: None,
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 200,
            ..Self::full_scale()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay {} is invalid", self.weight_decay)));
        }
        if self.batch_per_class == 0 {
            return Err(Error::config("batch must hold at least one video per class"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::config("periodic checkpoints need a checkpoint directory"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossTerms<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }

    pub fn val_auc_trace(&self) -> Vec<(usize, f64)> {
        self.epochs.iter().filter_map(|e| e.val_auc.map(|a| (e.epoch, a))).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn bind_volume(g: &mut Graph, v: &FeatureVolume) -> [Var; 3] {
    [
        g.constant(v.short.clone()),
        g.constant(v.medium.clone()),
        g.constant(v.long.clone()),
    ]
}

fn forward_video(
    g: &mut Graph,
    w: &TeGWeights<Var>,
    v: &FeatureVolume,
    config: &TeGConfig,
    rng: &mut dyn RngCore,
) -> Result<VideoOutputs> {
    let inputs = bind_volume(g, v);
    let f = fuse_graph(g, inputs, w, config)?;
    let dropout = (config.dropout_rate > 0.0).then_some((rng, config.dropout_rate));
    let scores = classify_graph(g, f.x, w, dropout)?;
    Ok(VideoOutputs { x: f.x, scores })
}

/// Loss and parameter gradients for one pair.
pub fn pair_loss_and_gradients(
    params: &TeGParams,
    abnormal: &FeatureVolume,
    normal: &FeatureVolume,
    loss_cfg: &LossConfig,
    config: &TeGConfig,
    rng: &mut dyn RngCore,
) -> Result<(LossTerms<f64>, TeGParams)> {
    let mut g = Graph::new();
    let w = params.bind(&mut g);
    let pos = forward_video(&mut g, &w, abnormal, config, rng)?;
    let neg = forward_video(&mut g, &w, normal, config, rng)?;
    let terms = total_loss_graph(&mut g, &[pos], &[neg], loss_cfg)?;
    let grads = g.backward(terms.total)?;
    let grad = w.map(|&v| grads.get(v).cloned().expect("every parameter has a gradient"));
    Ok((terms.values(&g), grad))
}

/// Mean loss and gradient over the pairs of a batch.
pub fn batch_loss_and_gradients(
    params: &TeGParams,
    dataset: &Dataset,
    batch: &Batch,
    loss_cfg: &LossConfig,
    config: &TeGConfig,
    rng: &mut dyn RngCore,
) -> Result<(LossTerms<f64>, TeGParams)> {
    if batch.abnormal.len() != batch.normal.len() || batch.abnormal.is_empty() {
        return Err(Error::contract("batch halves must be equal and non-empty"));
    }
    let w = 1.0 / batch.abnormal.len() as f64;
    let mut terms = LossTerms::zero();
    let mut grad = params.zeros_like();
    for (&a, &n) in batch.abnormal.iter().zip(&batch.normal) {
        let (t, gp) = pair_loss_and_gradients(
            params,
            &dataset.records[a].volume,
            &dataset.records[n].volume,
            loss_cfg,
            config,
            rng,
        )?;
        if let Some((which, value)) = t.first_non_finite() {
            return Err(Error::NonFinite { which, value });
        }
        terms.add_scaled(&t, w);
        for (acc, g) in grad.tensors_mut().into_iter().zip(gp.tensors()) {
            acc.axpy(w, g)?;
        }
    }
    Ok((terms, grad))
}

/// One forward, backward and Adam update on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut TeGParams,
    state: &mut AdamState,
    dataset: &Dataset,
    batch: &Batch,
    loss_cfg: &LossConfig,
    config: &TeGConfig,
    rng: &mut dyn RngCore,
) -> Result<LossTerms<f64>> {
    let (terms, grad) = batch_loss_and_gradients(params, dataset, batch, loss_cfg, config, rng)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            which: "gradient",
            value: f64::NAN,
        });
    }
    let grads: Vec<&Tensor> = grad.tensors();
    state.step(&mut params.tensors_mut(), &grads)?;
    Ok(terms)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:04}.tegw")
}

pub const FINAL_CHECKPOINT: &str = "final.tegw";

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: TeGParams,
    pub report: TrainReport,
    pub checkpoints: Vec<PathBuf>,
}

fn flush_report(cfg: &TrainConfig, report: &TrainReport) -> Result<()> {
    match &cfg.report_path {
        Some(p) => report.write_jsonl(p),
        None => Ok(()),
    }
}

/// Trains from a seeded initialization. `validation` feeds the AUC trace.
pub fn fit(
    dataset: &Dataset,
    validation: Option<&Dataset>,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    config: &TeGConfig,
) -> Result<FitOutput> {
    train_cfg.validate()?;
    config.validate()?;
    let segments = dataset.records.first().map_or(0, |r| r.volume.segments());
    loss_cfg.validate(segments)?;
    if let Some(d) = dataset.dim() {
        if d != config.dim {
            return Err(Error::config(format!("dataset width {d} but model width {}", config.dim)));
        }
    }
    if dataset.indices_with_label(0).is_empty() || dataset.indices_with_label(1).is_empty() {
        return Err(Error::contract("training set needs normal and abnormal videos"));
    }

    let mut params = init_params(config, train_cfg.seed)?;
    let mut state = AdamState::new(train_cfg.adam(), params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_ba7c);
    let mut report = TrainReport::default();
    let mut checkpoints = Vec::new();
    if let Some(dir) = &train_cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        let batch = sample_batch_sized(dataset, train_cfg.batch_per_class, &mut rng)?;
        let loss = match train_step(&mut params, &mut state, dataset, &batch, loss_cfg, config, &mut rng) {
            Ok(l) => l,
            Err(e) => {
                flush_report(train_cfg, &report)?;
                return Err(e);
            }
        };
        let val_auc = match validation {
            Some(v) if train_cfg.eval_every > 0 && epoch % train_cfg.eval_every == 0 => {
                Some(dataset_auc(&params, config, v)?)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            loss,
            val_auc,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (bce {:.4}, fm {:.4}){}",
            rec.loss.total,
            rec.loss.bce,
            rec.loss.fm,
            rec.val_auc.map(|a| format!(", val auc {a:.4}")).unwrap_or_default()
        );
        report.epochs.push(rec);

        if train_cfg.checkpoint_every > 0 && epoch % train_cfg.checkpoint_every == 0 {
            let dir = train_cfg.checkpoint_dir.as_ref().expect("validated");
            let path = dir.join(checkpoint_name(epoch));
            if let Err(e) = write_checkpoint(&path, config, &params) {
                flush_report(train_cfg, &report)?;
                return Err(e);
            }
            checkpoints.push(path);
            flush_report(train_cfg, &report)?;
        }
    }

    if let Some(dir) = &train_cfg.checkpoint_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        if let Err(e) = write_checkpoint(&path, config, &params) {
            flush_report(train_cfg, &report)?;
            return Err(e);
        }
        checkpoints.push(path);
    }
    flush_report(train_cfg, &report)?;
    Ok(FitOutput {
        params,
        report,
        checkpoints,
    })
}
