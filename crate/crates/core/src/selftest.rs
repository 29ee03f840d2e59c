//! Fast built-in invariant suite, run by `mwmae selftest`.

use serde::Serialize;

use crate::analysis::{
    attention_entropy, mean_attention_distance, pwcca, AttnRecord, FeatureMatrix, PatchGrid,
};
use crate::attention::{attention, win_attention, window_schedule};
use crate::audio::{logmel, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::{overall_score, TaskColumn, TaskScoreTable};
use crate::mae::{masked_mse_value, random_mask, MaeConfig, MaeModel};
use crate::rng::rng_from;
use crate::tensor::{Graph, NamedTensors, Tensor};
use crate::train::{adamw_step, effective_lr, lr_at, lr_at_position, OptimizerState, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String>;

const CHECKS: &[(&str, Check)] = &[
    ("window_schedule", window_schedule_check),
    ("win_attention_oracle", win_attention_check),
    ("mae_gradients", mae_gradient_check),
    ("masking_contract", masking_check),
    ("optimizer_numerics", optimizer_check),
    ("logmel_frames", logmel_check),
    ("analysis_oracles", analysis_check),
    ("overall_score", score_check),
    ("checkpoint_round_trip", checkpoint_check),
];

pub fn run_selftest() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}

fn window_schedule_check() -> Result<String> {
    let s = window_schedule(250)?;
    ensure(s.windows() == [2, 5, 10, 25, 50, 125, 250, 250], || {
        format!("schedule(250) = {:?}", s.windows())
    })?;
    for (n, heads) in [(125, 4), (250, 8), (500, 12), (640, 16)] {
        let h = window_schedule(n)?.heads();
        ensure(h == heads, || format!("{n} patches give {h} heads"))?;
    }
    Ok("schedule(250) and head counts match".into())
}

fn brute_window_attention(q: &Tensor, k: &Tensor, v: &Tensor, win: usize) -> Tensor {
    let (n, d) = (q.rows(), q.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for start in (0..n).step_by(win) {
        for i in start..start + win {
            let scores: Vec<f64> = (start..start + win)
                .map(|j| {
                    (0..d).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in 0..d {
                let acc: f64 = (start..start + win)
                    .zip(&exp)
                    .map(|(j, e)| e / z * v.get2(j, c))
                    .sum();
                out.data_mut()[i * d + c] = acc;
            }
        }
    }
    out
}

fn win_attention_check() -> Result<String> {
    let mut rng = rng_from(0x5e1f, &[1]);
    let mut worst: f64 = 0.0;
    for (n, win) in [(12, 3), (16, 4), (20, 5), (24, 24), (30, 10)] {
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::randn(&[n, 4], 1.0, &mut rng));
        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let out = win_attention(&mut g, qv, kv, vv, win)?;
        worst = worst.max(
            g.value(out)
                .max_abs_diff(&brute_window_attention(&q, &k, &v, win)),
        );
        if win == n {
            let full = attention(&mut g, qv, kv, vv)?;
            let d = g.value(out).max_abs_diff(g.value(full));
            ensure(d < 1e-12, || {
                format!("global window differs from attention by {d:e}")
            })?;
        }
    }
    ensure(worst < 1e-10, || format!("max abs diff {worst:e}"))?;
    Ok(format!("max abs diff {worst:.1e}"))
}

fn mae_gradient_check() -> Result<String> {
    let cfg = MaeConfig {
        enc_depth: 1,
        dec_depth: 1,
        enc_width: 8,
        mlp_ratio: 2,
        ..MaeConfig::tiny()
    };
    let model = MaeModel::init(&cfg)?;
    let spec = Tensor::randn(
        &[cfg.input_t, cfg.input_f],
        1.0,
        &mut rng_from(0x5e1f, &[2]),
    );
    let patches = model.patchify(&spec)?;
    let mask = random_mask(cfg.n_patches(), cfg.mask_ratio, 3)?;
    let err = model.grad_check_loss(&patches, &mask, 1e-5)?;
    ensure(err < 1e-4, || format!("max relative error {err:e}"))?;
    Ok(format!("max relative error {err:.1e}"))
}

fn masking_check() -> Result<String> {
    let mask = random_mask(250, 0.8, 11)?;
    ensure(
        mask.masked().len() == 200 && mask.visible().len() == 50,
        || {
            format!(
                "{} masked / {} visible",
                mask.masked().len(),
                mask.visible().len()
            )
        },
    )?;
    let mut rng = rng_from(0x5e1f, &[4]);
    let pred = Tensor::randn(&[250, 6], 1.0, &mut rng);
    let target = Tensor::randn(&[250, 6], 1.0, &mut rng);
    let mut moved = target.clone();
    for &i in mask.visible() {
        for c in 0..6 {
            moved.data_mut()[i * 6 + c] += 100.0;
        }
    }
    let d =
        (masked_mse_value(&pred, &target, &mask)? - masked_mse_value(&pred, &moved, &mask)?).abs();
    ensure(d < 1e-12, || format!("loss moved by {d:e}"))?;
    Ok("200 masked / 50 visible; loss ignores visible targets".into())
}

fn optimizer_check() -> Result<String> {
    let lr = effective_lr(1.5e-5, 1024);
    ensure((lr - 6e-5).abs() < 1e-18, || format!("effective lr {lr:e}"))?;
    let cfg = TrainConfig::default();
    let spe = 7;
    let boundary = (cfg.warmup_epochs * spe) as f64;
    let jump = (lr_at_position(boundary - 1e-9, spe, &cfg)
        - lr_at(cfg.warmup_epochs * spe, spe, &cfg))
    .abs();
    ensure(jump < 1e-12, || format!("warmup boundary jump {jump:e}"))?;
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng_from(0x5e1f, &[5]));
    let mut params = NamedTensors::from([("w".to_string(), w.clone())]);
    let grads = NamedTensors::from([("w".to_string(), Tensor::zeros(&[3, 4]))]);
    let mut state = OptimizerState::new(&params);
    adamw_step(&mut params, &grads, &mut state, 1e-3, &cfg)?;
    let expected = w.map(|x| x * (1.0 - 1e-3 * cfg.weight_decay));
    let d = params["w"].max_abs_diff(&expected);
    ensure(d == 0.0, || format!("zero-grad step off by {d:e}"))?;
    Ok("lr scaling, warmup continuity and decoupled decay hold".into())
}

fn logmel_check() -> Result<String> {
    let clip = AudioClip::new(vec![0.0; 2 * SAMPLE_RATE as usize], SAMPLE_RATE)?;
    let frames = logmel(&clip)?.frames();
    ensure(frames == 201, || format!("2 s clip gives {frames} frames"))?;
    Ok("2 s clip gives 201 frames".into())
}

fn analysis_check() -> Result<String> {
    let n = 250;
    let uniform = AttnRecord {
        layer: 0,
        head: 0,
        window: n,
        probs: vec![Tensor::full(&[n, n], 1.0 / n as f64)],
    };
    let h = attention_entropy(&uniform)?;
    ensure((h - (n as f64).ln()).abs() < 1e-9, || {
        format!("uniform entropy {h}")
    })?;
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let identity = AttnRecord {
        probs: vec![eye],
        ..uniform
    };
    let d = mean_attention_distance(&identity, &PatchGrid::new(25, 10)?)?;
    ensure(d == 0.0, || format!("identity distance {d}"))?;
    let x = FeatureMatrix::new(Tensor::randn(&[400, 6], 1.0, &mut rng_from(0x5e1f, &[6])))?;
    let r = pwcca(&x, &x)?;
    ensure((r - 1.0).abs() < 1e-6, || format!("pwcca(X, X) = {r}"))?;
    Ok("entropy, distance and PWCCA identities hold".into())
}

fn score_check() -> Result<String> {
    let table = TaskScoreTable {
        models: vec!["A".into(), "B".into(), "C".into()],
        tasks: vec![
            TaskColumn {
                name: "t1".into(),
                higher_is_better: true,
                scores: vec![10.0, 20.0, 30.0],
            },
            TaskColumn {
                name: "t2".into(),
                higher_is_better: true,
                scores: vec![50.0, 50.0, 100.0],
            },
        ],
    };
    let s = (0..3)
        .map(|m| overall_score(&table, m))
        .collect::<Result<Vec<_>>>()?;
    ensure(s == [0.0, 25.0, 100.0], || format!("scores {s:?}"))?;
    Ok("s(B) = 25, bounds 0 and 100".into())
}

fn checkpoint_check() -> Result<String> {
    let model = MaeModel::init(&MaeConfig::tiny())?;
    let dir = std::env::temp_dir().join(format!("mwmae-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("tiny.ckpt");
    let result = model.save(&path).and_then(|_| MaeModel::load(&path));
    let _ = std::fs::remove_dir_all(&dir);
    let back = result?;
    ensure(back.config() == model.config(), || "config changed".into())?;
    let d = model
        .params()
        .iter()
        .map(|(k, t)| t.max_abs_diff(&back.params()[k]))
        .fold(0.0, f64::max);
    ensure(d < 1e-6, || format!("parameters moved by {d:e}"))?;
    Ok(format!("{} tensors restored", back.params().len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
