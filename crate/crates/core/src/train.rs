//! AdamW pretraining: the effective learning-rate rule, warmup plus cosine
//! schedule, decoupled weight decay and a deterministic data-parallel
//! epoch loop with CSV loss logging and checkpoints.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::crop_or_pad_values;
use crate::error::{Error, Result};
use crate::mae::{decays, random_mask, MaeConfig, MaeModel, MaskSet};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{NamedTensors, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub min_lr: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-5,
            batch_size: 1024,
            warmup_epochs: 10,
            total_epochs: 100,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            min_lr: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the 64-spectrogram toy corpus: batch 8,
    /// 25 epochs (200 steps), 2 warmup epochs.
    pub fn toy() -> Self {
        Self {
            base_lr: 0.256,
            batch_size: 8,
            warmup_epochs: 2,
            total_epochs: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!(
                    "{} is not below total_epochs {}",
                    self.warmup_epochs, self.total_epochs
                ),
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be finite and non-negative"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return Err(Error::config("min_lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas", "both must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `base_lr * batch_size / 256`.
pub fn effective_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Learning rate at a (possibly fractional) step position.
pub fn lr_at_position(t: f64, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let peak = effective_lr(cfg.base_lr, cfg.batch_size);
    let warm = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let total = (cfg.total_epochs * steps_per_epoch) as f64;
    if t < warm {
        return peak * t.max(0.0) / warm;
    }
    if t >= total {
        return cfg.min_lr;
    }
    let progress = (t - warm) / (total - warm);
    cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear warmup to the effective rate, then cosine decay to `min_lr`.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    lr_at_position(step as f64, steps_per_epoch, cfg)
}

/// AdamW moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: NamedTensors,
    pub v: NamedTensors,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NamedTensors) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update in place. Parameters selected by [`decays`] are first
/// scaled by `1 - lr * weight_decay`.
pub fn adamw_step(
    params: &mut NamedTensors,
    grads: &NamedTensors,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "{name}: gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Divergence {
                step: state.step as usize,
                loss: f64::NAN,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let decay = if decays(name, p.shape()) {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Mean loss and mean gradients over a batch of `(patches, mask)` pairs.
/// Examples run in parallel; reduction is sequential in batch order.
pub fn batch_loss_and_grads(
    model: &MaeModel,
    batch: &[(Tensor, MaskSet)],
) -> Result<(f64, NamedTensors)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let results: Vec<Result<(f64, NamedTensors)>> = batch
        .par_iter()
        .map(|(p, m)| model.loss_and_grads(p, m))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut sum: Option<NamedTensors> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    let a = acc.get_mut(&name).expect("identical parameter sets");
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = sum.expect("non-empty batch");
    for g in grads.values_mut() {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((total * scale, grads))
}

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Where the loop writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub loss_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MaeModel,
    pub losses: Vec<LossRow>,
    pub steps_per_epoch: usize,
}

/// Pretrains a fresh model on standardized `[T, input_f]` spectrograms.
/// Each epoch reshuffles the data, redraws every crop and mask from
/// seeds derived from `train.seed`, and updates once per batch.
pub fn train(
    data: &[Tensor],
    mae: &MaeConfig,
    train: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    let model = MaeModel::init(mae)?;
    train_from(model, data, train, outputs)
}

pub fn train_from(
    mut model: MaeModel,
    data: &[Tensor],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mc = model.config().clone();
    for (i, spec) in data.iter().enumerate() {
        if spec.rank() != 2 || spec.cols() != mc.input_f {
            return Err(Error::Dimension(format!(
                "example {i} has shape {:?}, expected [T, {}]",
                spec.shape(),
                mc.input_f
            )));
        }
    }
    let spe = data.len().div_ceil(cfg.batch_size);
    let mut writer = match &outputs.loss_csv {
        Some(path) => Some(csv::Writer::from_writer(
            File::create(path).map_err(|e| Error::io(path, e))?,
        )),
        None => None,
    };
    let mut state = OptimizerState::new(model.params());
    let mut params = model.params().clone();
    let mut losses = Vec::with_capacity(spe * cfg.total_epochs);
    let mut step = 0;
    for epoch in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[0, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let crop = derive_seed(cfg.seed, &[1, epoch as u64, i as u64]);
                    let spec = crop_or_pad_values(&data[i], mc.input_t, crop)?;
                    let patches = model.patchify(&spec)?;
                    let mseed = derive_seed(cfg.seed, &[2, epoch as u64, i as u64]);
                    let mask = random_mask(mc.n_patches(), mc.mask_ratio, mseed)?;
                    Ok((patches, mask))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = match batch_loss_and_grads(&model, &batch) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let lr = lr_at(step, spe, cfg);
            adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
            model = MaeModel::from_params(mc.clone(), params.clone())?;
            let row = LossRow {
                step,
                epoch,
                lr,
                loss,
            };
            log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.6}");
            if let Some(w) = writer.as_mut() {
                w.serialize(&row)?;
            }
            losses.push(row);
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(path) = &outputs.checkpoint {
                    model.save(path)?;
                }
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()
            .map_err(|e| Error::io(outputs.loss_csv.clone().unwrap_or_default(), e))?;
    }
    if let Some(path) = &outputs.checkpoint {
        model.save(path)?;
    }
    Ok(TrainReport {
        model,
        losses,
        steps_per_epoch: spe,
    })
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_params() -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert(
            "w".into(),
            Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
        );
        p.insert("b".into(), Tensor::new(&[2], vec![0.25, -0.75]).unwrap());
        p
    }

    #[test]
    fn effective_rate_rule() {
        assert!((effective_lr(1.5e-5, 1024) - 6e-5).abs() < 1e-20);
        assert_eq!(effective_lr(3.0e-4, 256), 3.0e-4);
        assert_eq!(effective_lr(0.0, 77), 0.0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        let spe = 7;
        assert_eq!(lr_at(0, spe, &cfg), 0.0);
        assert_eq!(
            lr_at(10 * spe, spe, &cfg),
            effective_lr(cfg.base_lr, cfg.batch_size)
        );
        assert_eq!(lr_at(100 * spe, spe, &cfg), 0.0);
        assert_eq!(lr_at(100 * spe + 50, spe, &cfg), 0.0);
        let mid = lr_at(55 * spe, spe, &cfg);
        assert!((mid - 3e-5).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_end() {
        let cfg = TrainConfig::default();
        let w = (cfg.warmup_epochs * 5) as f64;
        let left = lr_at_position(w - 1e-9, 5, &cfg);
        let right = lr_at_position(w + 1e-9, 5, &cfg);
        assert!((left - right).abs() < 1e-12);
    }

    #[test]
    fn decay_only_step() {
        let cfg = TrainConfig {
            weight_decay: 0.05,
            ..TrainConfig::default()
        };
        let mut p = quad_params();
        let before = p.clone();
        let grads: NamedTensors = p
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &grads, &mut st, 0.01, &cfg).unwrap();
        for (a, b) in p["w"].data().iter().zip(before["w"].data()) {
            assert_eq!(*a, b * 0.9995);
        }
        assert_eq!(p["b"], before["b"]);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = quad_params();
        let before = p.clone();
        let g = 0.3;
        let grads: NamedTensors = p
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::full(t.shape(), g)))
            .collect();
        let mut st = OptimizerState::new(&p);
        let lr = 1e-3;
        adamw_step(&mut p, &grads, &mut st, lr, &cfg).unwrap();
        let m = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v: f64 = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let expected = lr * m / (v.sqrt() + 1e-8);
        for (a, b) in p["w"].data().iter().zip(before["w"].data()) {
            assert!((b - a - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let cfg = TrainConfig::default();
        let mut p = quad_params();
        let before = p.clone();
        let grads: NamedTensors = p
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::full(t.shape(), 1.7)))
            .collect();
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &grads, &mut st, 0.0, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let cfg = TrainConfig::default();
        let mut p = quad_params();
        let mut grads: NamedTensors = p
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        grads.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            adamw_step(&mut p, &grads, &mut st, 0.01, &cfg),
            Err(Error::Divergence { .. })
        ));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_epochs: 100,
            ..TrainConfig::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "warmup_epochs")
        );
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn smoothing_window() {
        let s = smoothed(&[4.0, 2.0, 6.0, 8.0], 2);
        assert_eq!(s, vec![4.0, 3.0, 4.0, 7.0]);
    }
}
