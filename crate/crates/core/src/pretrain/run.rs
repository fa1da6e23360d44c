use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::model::{AvBatch, BatchMasks, LossOptions, PretrainModel};
use crate::data::{AvExample, PairedAvDataset};
use crate::error::{Error, Result};
use crate::nn::optim::{optimizer_step, AdamConfig, AdamState};
use crate::nn::{Graph, ParamTree, Tensor};
use crate::orchestrator::{Checkpoint, Stage};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Masking ratio `φ`, shared by both modalities.
    pub mask_ratio: f64,
    /// Standardize each target frame and patch before regression.
    pub normalize_targets: bool,
    pub loss: LossOptions,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 3e-4,
            mask_ratio: 0.6,
            normalize_targets: true,
            loss: LossOptions::default(),
            seed: 0,
        }
    }
}

/// Loss values of one optimizer step; absent terms are not part of the
/// objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub l_mae: Option<f64>,
    pub l_clr: Option<f64>,
    pub l_total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLoss>,
}

/// Indices of the examples in the batch of `step`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    if n <= batch_size {
        return (0..n).collect();
    }
    let mut rng = seed::rng(seed, &format!("pretrain/batch/{step}"));
    sample(&mut rng, n, batch_size).into_vec()
}

/// Pre-trains the model held by `init` on `examples`.
///
/// Each step draws a batch and (for objectives with a reconstruction term)
/// fresh masks from streams keyed by the step index, evaluates the selected
/// objective and applies one Adam update. One JSON line per step goes to
/// `log`.
pub fn pretrain_run(
    examples: &[AvExample],
    init: &Checkpoint,
    cfg: &PretrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Validation("pre-training needs at least one example".into()));
    }
    if cfg.loss.objective != super::Objective::Mae {
        let b = cfg.batch_size.min(examples.len());
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
    }
    let model_cfg = &init.meta.model;
    let model = PretrainModel::for_params(model_cfg, &init.params)?;
    let mut params: ParamTree<f32> = init.params.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batch_indices(examples.len(), cfg.batch_size, cfg.seed, step);
        let refs: Vec<&AvExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = AvBatch::<f32>::new(&refs, cfg.normalize_targets)?;
        let masks = if cfg.loss.objective.uses_masks() {
            let mut rng = seed::rng(cfg.seed, &format!("pretrain/mask/{step}"));
            Some(BatchMasks::sample(&batch, cfg.mask_ratio, &mut rng)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let parts = model.loss(&mut g, &params, &batch, masks.as_ref(), &cfg.loss)?;
        let value = |v: Option<crate::nn::Var>| v.map(|v| g.scalar(v) as f64);
        let record = StepLoss {
            step,
            l_mae: value(parts.mae),
            l_clr: value(parts.clr),
            l_total: g.scalar(parts.total) as f64,
        };
        if !record.l_total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        losses.push(record);
        let grads = g.backward(parts.total).into_params();
        optimizer_step(&mut params, &grads, &mut state, &adam)?;
    }
    let mut meta = init.child_meta(Stage::Pretrain)?;
    meta.objective = Some(cfg.loss.objective);
    let s = &mut meta.settings;
    s.insert("steps".into(), cfg.steps.to_string());
    s.insert("batch_size".into(), cfg.batch_size.to_string());
    s.insert("lr".into(), cfg.lr.to_string());
    s.insert("mask_ratio".into(), cfg.mask_ratio.to_string());
    s.insert("normalize_targets".into(), cfg.normalize_targets.to_string());
    s.insert("clr_mode".into(), cfg.loss.clr_mode.name().into());
    s.insert("temperature".into(), cfg.loss.temperature.to_string());
    s.insert("mae_scope".into(), cfg.loss.mae_scope.name().into());
    s.insert("spatial_reduce".into(), cfg.loss.spatial_reduce.to_string());
    s.insert("seed".into(), cfg.seed.to_string());
    Ok(PretrainOutcome {
        checkpoint: Checkpoint { meta, params },
        losses,
    })
}

/// Pre-trains on a generated paired dataset and records its profile.
pub fn pretrain_dataset(
    ds: &PairedAvDataset,
    init: &Checkpoint,
    cfg: &PretrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome> {
    let mut out = pretrain_run(&ds.examples, init, cfg, log)?;
    out.checkpoint.meta.profile = Some(ds.cfg.profile);
    Ok(out)
}

/// In-batch audio→video top-1 retrieval accuracy of the embeddings of
/// `examples`.
pub fn retrieval_eval(
    model: &PretrainModel,
    params: &ParamTree<f32>,
    examples: &[&AvExample],
    spatial_reduce: bool,
) -> Result<f64> {
    let batch = AvBatch::<f32>::new(examples, false)?;
    let mut g = Graph::inference();
    let (a, v) = model.embed(&mut g, params, &batch, spatial_reduce)?;
    let to64 = |t: &Tensor<f32>| t.cast::<f64>();
    Ok(super::retrieval_accuracy(&to64(g.value(a)), &to64(g.value(v))))
}
