//! Batch training loop for the token model.

use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::train::{fit, FitControl, FitReport, TrainConfig};

use super::{insert_params, loss_graph, ARParams, SequenceLayout};

/// Train on a set of equal-length clips. `with_regularizer` toggles the
/// squared head-loss-gap term; `early_stop_ce` halts once the epoch loss,
/// read as cross-entropy per token, drops below the target (the regularizer
/// contribution only makes this an overestimate, so stopping is safe).
pub fn train_ar(
    params: &mut ARParams,
    layouts: &[SequenceLayout],
    cfg: &TrainConfig,
    with_regularizer: bool,
    early_stop_ce: Option<f64>,
) -> Result<FitReport> {
    if layouts.is_empty() {
        return Err(Error::Train("no training clips".to_string()));
    }
    let chunks = layouts[0].chunks();
    if layouts.iter().any(|l| l.chunks() != chunks) {
        return Err(Error::mismatch("training clips must have equal chunk counts".to_string()));
    }
    let tokens_per_clip = (chunks * params.config.tokens_per_chunk) as f64;
    let model_cfg = params.config.clone();
    fit(
        params,
        layouts.len(),
        cfg,
        |p, batch| {
            let mut g = Graph::<f32>::new();
            let pv = insert_params(&mut g, p, true);
            let refs: Vec<&SequenceLayout> = batch.iter().map(|&i| &layouts[i]).collect();
            let (total, _, _, _) = loss_graph(&mut g, &pv, &model_cfg, &refs, with_regularizer)?;
            let loss = g.scalar(total) as f64;
            g.backward(total);
            let grads = pv.all.iter().map(|&v| g.grad_or_zeros(v)).collect();
            Ok((loss, grads))
        },
        |p| p.params_mut(),
        |_, stats| {
            if let Some(target) = early_stop_ce {
                if stats.loss / tokens_per_clip < target {
                    log::info!(
                        "early stop at epoch {}: ~{:.3} nats/token < {target:.3}",
                        stats.epoch,
                        stats.loss / tokens_per_clip
                    );
                    return Ok(FitControl::Stop);
                }
            }
            log::info!(
                "epoch {}: loss/clip {:.4} (~{:.3} nats/token), lr {:.2e}",
                stats.epoch,
                stats.loss,
                stats.loss / tokens_per_clip,
                stats.lr
            );
            Ok(FitControl::Continue)
        },
        None,
    )
}
