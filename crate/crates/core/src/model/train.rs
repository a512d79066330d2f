//! Meta-training, validation, meta-testing and checkpoint files.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{DpConvCnp, NoiseDraw};
use crate::accounting::PrivacyBudget;
use crate::dpsetconv::{ContextSet, EncodeMode, EncoderNoise};
use crate::error::{Error, Result};
use crate::gp::GaussianPrediction;
use crate::nn::{adam_step, load_checkpoint, read_manifest, save_checkpoint, AdamState, Gradients, ParamStore};
use crate::taskgen::{Task, TaskStream};

/// Noise seed used for validation and evaluation so repeated evaluations
/// of the same parameters agree exactly.
pub const EVAL_NOISE_SEED: u64 = 0x5eed_e7a1;
const TRAIN_NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation and logging cadence in steps; `None` means a 200th of
    /// the run (at least one step).
    pub eval_every: Option<usize>,
    /// Seeds the per-task training noise.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            learning_rate: AdamState::DEFAULT_LR,
            eval_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn cadence(&self) -> usize {
        self.eval_every.unwrap_or(self.steps / 200).max(1)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub train_nll: f64,
    pub val_nll: f64,
    pub lambda: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub best_val_nll: Option<f64>,
    pub best_step: Option<usize>,
}

/// Fresh noise fields for task `index`, independent of thread layout.
fn task_noise(noise: &EncoderNoise, seed: u64, index: u64) -> NoiseDraw {
    let mut rng = TaskStream::rng_for(seed, index);
    NoiseDraw::sample(noise, &mut rng)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_and_grad(
    model: &DpConvCnp,
    tasks: &[Task],
    mode: EncodeMode,
    noise_seed: u64,
    first_index: u64,
) -> Result<(f64, Gradients)> {
    let noise = model.encoder_noise()?;
    let results: Vec<Result<(f64, Gradients)>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let draw = task_noise(&noise, noise_seed, first_index + i as u64);
            model.loss_and_grad(
                &model.store,
                &task.context,
                &task.target_xs,
                &task.target_ys,
                task.budget,
                mode,
                &draw,
            )
        })
        .collect();
    let mut total = model.store.zero_grads();
    let mut loss = 0.0;
    let scale = 1.0 / tasks.len() as f64;
    for r in results {
        let (l, g) = r?;
        loss += l * scale;
        total.add_scaled(&g, scale);
    }
    Ok((loss, total))
}

/// Per-task mean target NLL with noise drawn from `noise_seed`.
pub fn evaluate_tasks(model: &DpConvCnp, tasks: &[Task], mode: EncodeMode, noise_seed: u64) -> Result<Vec<f64>> {
    let noise = model.encoder_noise()?;
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let draw = task_noise(&noise, noise_seed, i as u64);
            model.loss(
                &model.store,
                &task.context,
                &task.target_xs,
                &task.target_ys,
                task.budget,
                mode,
                &draw,
            )
        })
        .collect()
}

/// Mean with a normal-approximation 95% interval half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
    pub ci95: f64,
}

pub fn summarise(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            std_err: f64::NAN,
            ci95: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let std_err = (var / n as f64).sqrt();
    Summary {
        n,
        mean,
        std_err,
        ci95: 1.959_963_984_540_054 * std_err,
    }
}

/// Meta-trains `model` in place and leaves it at the best validation
/// checkpoint. With `checkpoint_dir` set, the best parameters are also
/// written there each time they improve.
pub fn meta_train(
    model: &mut DpConvCnp,
    stream: &TaskStream,
    validation: &[Task],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::domain("learning rate must be positive"));
    }
    let mode = model.config.train_mode;
    if mode == EncodeMode::Deploy {
        return Err(Error::domain("training mode cannot be deploy"));
    }
    let cadence = cfg.cadence();
    let mut adam = AdamState::new(&model.store, cfg.learning_rate);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let start = Instant::now();
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let noise_seed = cfg.seed ^ TRAIN_NOISE_SALT;

    for step in 1..=cfg.steps {
        let first = ((step - 1) * cfg.batch_size) as u64;
        let tasks = stream.tasks(first, cfg.batch_size)?;
        let (loss, grads) = batch_loss_and_grad(model, &tasks, mode, noise_seed, first)?;
        if !loss.is_finite() || !grads.is_finite() {
            log::error!(
                "non-finite training loss at step {step} (loss {loss}, lambda {}); aborting",
                model.lambda()
            );
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        adam_step(&mut model.store, &grads, &mut adam)?;
        window_loss += loss;
        window_steps += 1;

        if step % cadence == 0 {
            let val = if validation.is_empty() {
                f64::NAN
            } else {
                let per_task = evaluate_tasks(model, validation, mode, EVAL_NOISE_SEED)?;
                summarise(&per_task).mean
            };
            let row = LogRow {
                step,
                train_nll: window_loss / window_steps as f64,
                val_nll: val,
                lambda: model.lambda(),
                wall_ms: start.elapsed().as_millis(),
            };
            log::info!(
                "step {step}: train {:.4} val {:.4} lambda {:.4}",
                row.train_nll,
                row.val_nll,
                row.lambda
            );
            log.push(row);
            window_loss = 0.0;
            window_steps = 0;
            let improved = val.is_finite() && best.as_ref().is_none_or(|(b, _, _)| val < *b);
            if improved {
                best = Some((val, step, model.store.clone()));
                if let Some(dir) = checkpoint_dir {
                    save_model(dir, model, serde_json::json!({"step": step, "val_nll": val}))?;
                }
            }
        }
    }

    let (best_val_nll, best_step) = match best {
        Some((v, s, store)) => {
            model.store = store;
            (Some(v), Some(s))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        best_val_nll,
        best_step,
    })
}

/// One private prediction for a context set. The mechanism always runs in
/// deploy mode, so a model trained with parts of it disabled is refused.
pub fn meta_test<R: Rng + ?Sized>(
    model: &DpConvCnp,
    context: &ContextSet,
    budget: PrivacyBudget,
    target_xs: &[f64],
    rng: &mut R,
) -> Result<GaussianPrediction> {
    model.forward(context, target_xs, budget, EncodeMode::Deploy, rng)
}

/// Per-task deploy-mode NLLs, noise seeded per task from `seed`.
pub fn meta_test_nlls(model: &DpConvCnp, tasks: &[Task], seed: u64) -> Result<Vec<f64>> {
    evaluate_tasks(model, tasks, EncodeMode::Deploy, seed)
}

/// Writes parameters and configuration to `dir`.
pub fn save_model(dir: &Path, model: &DpConvCnp, info: serde_json::Value) -> Result<()> {
    let extra = serde_json::json!({
        "config": model.config,
        "info": info,
    });
    save_checkpoint(dir, &model.store, extra)
}

/// Restores a model written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<DpConvCnp> {
    let manifest = read_manifest(dir)?;
    let config: ModelConfig = serde_json::from_value(manifest.extra["config"].clone()).map_err(|e| Error::Parse {
        path: dir.join(crate::nn::checkpoint::MANIFEST_FILE),
        line: 0,
        msg: format!("bad model config: {e}"),
    })?;
    let mut model = DpConvCnp::new(config, 0)?;
    load_checkpoint(dir, &mut model.store)?;
    Ok(model)
}
