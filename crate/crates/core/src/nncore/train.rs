use log::debug;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, clip_gradients, Gradients, NnError, ParameterSet, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss.
    pub train_loss: f64,
    /// Validation score (higher is better).
    pub val_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_score: f64,
}

/// Minibatch Adam with global-norm clipping and early stopping.
///
/// `grad` accumulates one sample's gradient and returns its loss. `validate`
/// scores the current parameters; `None` falls back to the negated training
/// loss. Training stops after `patience` epochs without a strictly better
/// score, and the best parameters are restored.
pub fn fit<S, G, V>(
    params: &mut ParameterSet,
    samples: &[S],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut grad: G,
    mut validate: V,
) -> Result<FitLog, NnError>
where
    G: FnMut(&ParameterSet, &S, &mut Gradients) -> Result<f64, NnError>,
    V: FnMut(&ParameterSet) -> Result<Option<f64>, NnError>,
{
    config.validate()?;
    let adam = config.adam();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grads = params.zero_grads();
    let mut log = FitLog { epochs: Vec::new(), best_epoch: 0, best_score: f64::NEG_INFINITY };
    let mut best = params.clone();
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            for &i in batch {
                total += grad(params, &samples[i], &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_gradients(&mut grads, config.clip);
            adam_step(params, &grads, &adam)?;
        }
        let train_loss = if samples.is_empty() { 0.0 } else { total / samples.len() as f64 };
        let val_score = validate(params)?.unwrap_or(-train_loss);
        debug!("epoch {epoch}: loss {train_loss:.6} val {val_score:.6}");
        log.epochs.push(EpochRecord { epoch, train_loss, val_score });
        if val_score > log.best_score {
            log.best_score = val_score;
            log.best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    *params = best;
    Ok(log)
}
