//! Stochastic training loop for the velocity network.
//!
//! Single-threaded and fully determined by the seed: the same configuration
//! and dataset always produce bitwise-identical parameters.

use super::{regcfm_gradients, BatchItem, FlowModel, TrainConfig, TrainExample};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

fn trace_tail(trace: &[f64]) -> Vec<f64> {
    trace[trace.len().saturating_sub(5)..].to_vec()
}

/// Trains a fresh model on the example set, returning it with the per-step
/// loss trace. Batches are drawn with replacement; the interpolation time is
/// uniform per batch element.
pub fn train(dataset: &[TrainExample], cfg: &TrainConfig) -> Result<(FlowModel, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs a nonempty dataset"));
    }
    let k = dataset[0].tau0.len();
    let d = dataset[0].context.len();
    for (i, ex) in dataset.iter().enumerate() {
        if ex.tau0.len() != k || ex.tau1.len() != k {
            return Err(Error::invalid(format!(
                "training example {i}: waypoint count mismatch"
            )));
        }
        if ex.context.len() != d {
            return Err(Error::invalid(format!(
                "training example {i}: context dimension mismatch"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FlowModel::new(k, d, cfg, &mut rng)?;
    let n_params = model.net.param_count();
    let mut adam_m = vec![0.0; n_params];
    let mut adam_v = vec![0.0; n_params];
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<(usize, f64)> = (0..cfg.batch_size)
            .map(|_| (rng.gen_range(0..dataset.len()), rng.gen::<f64>()))
            .collect();
        let batch: Vec<BatchItem> = picks
            .iter()
            .map(|&(idx, t)| {
                let ex = &dataset[idx];
                BatchItem {
                    tau0: &ex.tau0,
                    tau1: &ex.tau1,
                    t,
                    context: &ex.context,
                    distances: ex.distances.as_ref(),
                }
            })
            .collect();
        let (breakdown, grads) =
            regcfm_gradients(&model, &batch, cfg).map_err(|e| Error::Training {
                steps: step,
                reason: format!("{e}; recent losses {:?}", trace_tail(&trace)),
            })?;
        if !breakdown.total.is_finite() {
            return Err(Error::Training {
                steps: step,
                reason: format!(
                    "loss diverged to {}; recent losses {:?}",
                    breakdown.total,
                    trace_tail(&trace)
                ),
            });
        }
        trace.push(breakdown.total);

        match cfg.optimizer {
            Optimizer::Sgd => {
                let lr = cfg.learning_rate;
                model.net.update_params(&grads, |_, p, g| *p -= lr * g);
            }
            Optimizer::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                let b1c = 1.0 - b1_pow(b1, step + 1);
                let b2c = 1.0 - b1_pow(b2, step + 1);
                let lr = cfg.learning_rate;
                model.net.update_params(&grads, |i, p, g| {
                    adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * g;
                    adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * g * g;
                    let mh = adam_m[i] / b1c;
                    let vh = adam_v[i] / b2c;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            }
        }
    }

    // A run that makes no net progress is reported as a failure: compare the
    // leading and trailing loss windows (batch noise makes single-step
    // comparisons meaningless).
    let w = (cfg.steps / 10).clamp(1, 50);
    if trace.len() >= 2 * w {
        let head: f64 = trace[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = trace[trace.len() - w..].iter().sum::<f64>() / w as f64;
        if head > 0.0 && tail >= head {
            return Err(Error::Training {
                steps: cfg.steps,
                reason: format!(
                    "no improvement: initial window {head:.6e}, final window {tail:.6e}"
                ),
            });
        }
    }
    Ok((model, trace))
}

fn b1_pow(base: f64, steps: usize) -> f64 {
    base.powi(steps.min(i32::MAX as usize) as i32)
}
