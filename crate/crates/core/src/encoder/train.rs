//! Loss, gradients and SGD training of the two towers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cell::{backward, forward};
use super::{init_params, sim_unchecked, tower_of, EncoderConfig, EncoderParams, Sequence};
use crate::corpus::Arch;
use crate::error::{Error, Result};
use crate::eval::roc_auc;

/// A labeled pair already mapped to instruction-embedding sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub a: Sequence,
    pub arch_a: Arch,
    pub b: Sequence,
    pub arch_b: Arch,
    /// 1 for similar, 0 for dissimilar.
    pub label: f64,
}

fn check_dims(p: &EncoderParams, pair: &PairInput) -> Result<()> {
    for s in [&pair.a, &pair.b] {
        if s.dim() != p.shape.input_dim {
            return Err(Error::DimMismatch {
                expected: p.shape.input_dim,
                actual: s.dim(),
            });
        }
    }
    Ok(())
}

/// Similarity of the two blocks under the current parameters.
pub fn pair_similarity(p: &EncoderParams, pair: &PairInput) -> Result<f64> {
    check_dims(p, pair)?;
    let ta = forward(p.tower(pair.arch_a), p.shape, &pair.a);
    let tb = forward(p.tower(pair.arch_b), p.shape, &pair.b);
    Ok(sim_unchecked(ta.output(), tb.output()))
}

/// `Σ (y - Sim)²` over the batch.
pub fn pair_loss(p: &EncoderParams, batch: &[PairInput]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .map(|pair| pair_similarity(p, pair).map(|s| (pair.label - s).powi(2)))
        .sum()
}

/// Loss of one pair; its gradient is added to `grads`.
pub fn pair_gradients(p: &EncoderParams, pair: &PairInput, grads: &mut EncoderParams) -> Result<f64> {
    check_dims(p, pair)?;
    let ta = forward(p.tower(pair.arch_a), p.shape, &pair.a);
    let tb = forward(p.tower(pair.arch_b), p.shape, &pair.b);
    let (ha, hb) = (ta.output(), tb.output());
    let s = sim_unchecked(ha, hb);
    let resid = pair.label - s;
    // dL/dha_k = -2 (y - s) · (-s) · sign(ha_k - hb_k)
    let scale = 2.0 * resid * s;
    let dha: Vec<f64> = ha
        .iter()
        .zip(hb)
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    let dhb: Vec<f64> = dha.iter().map(|v| -v).collect();
    backward(p.tower(pair.arch_a), p.shape, &ta, &dha, &mut grads.towers[tower_of(pair.arch_a)]);
    backward(p.tower(pair.arch_b), p.shape, &tb, &dhb, &mut grads.towers[tower_of(pair.arch_b)]);
    Ok(resid * resid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean squared error over the training pairs during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUC.
    pub best: EncoderParams,
    /// Parameters after the last epoch run.
    pub last: EncoderParams,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn validate(p: &EncoderParams, val: &[PairInput]) -> Result<(f64, f64)> {
    let scores: Vec<(f64, bool)> = val
        .par_iter()
        .map(|pair| pair_similarity(p, pair).map(|s| (s, pair.label > 0.5)))
        .collect::<Result<_>>()?;
    let loss = scores
        .iter()
        .zip(val)
        .map(|((s, _), pair)| (pair.label - s).powi(2))
        .sum::<f64>()
        / val.len() as f64;
    Ok((loss, roc_auc(&scores)?.auc))
}

/// Per-pair SGD from freshly initialized parameters, keeping the best epoch
/// by validation AUC.
pub fn train(train: &[PairInput], val: &[PairInput], cfg: &EncoderConfig) -> Result<TrainOutcome> {
    let init = init_params(cfg)?;
    train_from(init, train, val, cfg)
}

/// Like [`train`] but starting from given parameters.
pub fn train_from(
    mut params: EncoderParams,
    train: &[PairInput],
    val: &[PairInput],
    cfg: &EncoderConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(val.iter().any(|p| p.label > 0.5) && val.iter().any(|p| p.label <= 0.5)) {
        return Err(Error::DegenerateLabels);
    }
    for pair in train.iter().chain(val) {
        check_dims(&params, pair)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = EncoderParams::zeros(params.shape)?;
    let mut best = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            grads.fill(0.0);
            total += pair_gradients(&params, &train[i], &mut grads)?;
            for (w, g) in params.values_mut().zip(grads.values()) {
                *w -= cfg.lr * g;
            }
        }
        let (val_loss, val_auc) = validate(&params, val)?;
        log::info!("epoch {epoch}: train loss {:.5}, val loss {val_loss:.5}, val AUC {val_auc:.4}", total / train.len() as f64);
        history.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_auc,
        });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_epoch = epoch;
            best.clone_from(&params);
        } else if epoch - best_epoch >= cfg.patience {
            log::info!("no validation gain for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        history,
    })
}

/// Largest relative error between the analytic gradient and central finite
/// differences over every parameter. Parameters whose two estimates are both
/// negligible are skipped, and the rounding error of the difference quotient
/// (a few ulps of the loss over `2 * eps`) is not counted against the gradient.
pub fn gradient_check(p: &EncoderParams, pair: &PairInput, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::BadConfig(format!("eps must be positive, got {eps}")));
    }
    let mut grads = EncoderParams::zeros(p.shape)?;
    pair_gradients(p, pair, &mut grads)?;
    let analytic: Vec<f64> = grads.values().copied().collect();
    let mut probe = p.clone();
    let batch = std::slice::from_ref(pair);
    let mut worst = 0.0f64;
    for (idx, &g) in analytic.iter().enumerate() {
        let orig = *probe.value_mut(idx).expect("index in range");
        let set = |probe: &mut EncoderParams, v: f64| *probe.value_mut(idx).expect("index in range") = v;
        set(&mut probe, orig + eps);
        let up = pair_loss(&probe, batch)?;
        set(&mut probe, orig - eps);
        let down = pair_loss(&probe, batch)?;
        set(&mut probe, orig);
        let numeric = (up - down) / (2.0 * eps);
        if g.abs() + numeric.abs() < 1e-12 {
            continue;
        }
        let noise = 16.0 * f64::EPSILON * up.abs().max(down.abs()) / (2.0 * eps);
        let err = ((g - numeric).abs() - noise).max(0.0);
        worst = worst.max(err / g.abs().max(numeric.abs()));
    }
    Ok(worst)
}
