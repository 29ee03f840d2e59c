use mwmae::analysis::{
    attention_entropy, mean_attention_distance, pwcca, AttnRecord, FeatureMatrix, PatchGrid,
};
use mwmae::attention::{attention, win_attention, window_schedule};
use mwmae::audio::{crop_or_pad_values, logmel, standardize_values, AudioClip, SAMPLE_RATE};
use mwmae::eval::{overall_scores, TaskColumn, TaskScoreTable};
use mwmae::mae::{masked_mse_value, patchify, random_mask, unpatchify};
use mwmae::rng::rng_from;
use mwmae::tensor::{decode_container, encode_container, grad_check, NamedTensors};
use mwmae::train::{adamw_step, effective_lr, lr_at, OptimizerState, TrainConfig};
use mwmae::{Graph, Tensor};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng_from(seed, &[]))
}

fn n_and_divisor() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=48).prop_flat_map(|n| {
        let divs: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
        (Just(n), proptest::sample::select(divs))
    })
}

fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_windows_divide_and_end_global(n in 2usize..700) {
        let s = window_schedule(n).unwrap();
        let w = s.windows();
        prop_assert!(w.len() >= 2);
        prop_assert!(w.iter().all(|&x| n % x == 0 && x > 1));
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
        prop_assert_eq!(&w[w.len() - 2..], &[n, n]);
        let proper = (2..n).filter(|d| n % d == 0).count();
        prop_assert_eq!(w.len(), proper + 2);
    }

    #[test]
    fn windowed_attention_matches_slice_loop((n, win) in n_and_divisor(), d in 1usize..6, seed: u64) {
        let (q, k, v) = (randn(&[n, d], seed), randn(&[n, d], seed ^ 1), randn(&[n, d], seed ^ 2));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = win_attention(&mut g, qv, kv, vv, win).unwrap();
        let got = g.value(out).clone();
        for start in (0..n).step_by(win) {
            for i in start..start + win {
                let scores: Vec<f64> = (start..start + win)
                    .map(|j| (0..d).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let p = softmax_row(&scores);
                for c in 0..d {
                    let want: f64 = (start..start + win).zip(&p).map(|(j, w)| w * v.get2(j, c)).sum();
                    prop_assert!((got.get2(i, c) - want).abs() < 1e-10);
                }
            }
        }
        if win == n {
            let full = attention(&mut g, qv, kv, vv).unwrap();
            prop_assert!(g.value(full).max_abs_diff(&got) < 1e-12);
        }
    }

    #[test]
    fn windows_do_not_see_each_other((n, win) in n_and_divisor(), seed: u64) {
        prop_assume!(win < n);
        let d = 3;
        let (q, k, v) = (randn(&[n, d], seed), randn(&[n, d], seed ^ 1), randn(&[n, d], seed ^ 2));
        let mut v2 = v.clone();
        for c in 0..d {
            v2.data_mut()[(n - 1) * d + c] += 10.0;
        }
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q), g.constant(k));
        let (vv, vv2) = (g.constant(v), g.constant(v2));
        let a = win_attention(&mut g, qv, kv, vv, win).unwrap();
        let b = win_attention(&mut g, qv, kv, vv2, win).unwrap();
        for i in 0..n - win {
            for c in 0..d {
                prop_assert_eq!(g.value(a).get2(i, c), g.value(b).get2(i, c));
            }
        }
    }

    #[test]
    fn masks_partition_the_patches(n in 2usize..400, ratio in 0.05f64..0.95, seed: u64) {
        let want = (ratio * n as f64 + 0.5).floor() as usize;
        prop_assume!(want > 0 && want < n);
        let m = random_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(m.masked().len(), want);
        let mut all: Vec<usize> = m.visible().iter().chain(m.masked()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let restore = m.restore_order();
        for (pos, &p) in m.shuffle_perm().iter().enumerate() {
            prop_assert_eq!(restore[p], pos);
        }
        let mut keep = m.keep_order().to_vec();
        keep.sort_unstable();
        prop_assert_eq!(keep.as_slice(), m.visible());
    }

    #[test]
    fn loss_ignores_visible_targets(n in 4usize..60, c in 1usize..8, seed: u64, shift in -50.0f64..50.0) {
        let m = random_mask(n, 0.75, seed).unwrap();
        let pred = randn(&[n, c], seed ^ 3);
        let target = randn(&[n, c], seed ^ 4);
        let mut moved = target.clone();
        for &i in m.visible() {
            for j in 0..c {
                moved.data_mut()[i * c + j] += shift;
            }
        }
        let a = masked_mse_value(&pred, &target, &m).unwrap();
        let b = masked_mse_value(&pred, &moved, &m).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn patchify_round_trips(gt in 1usize..6, gf in 1usize..6, pt in 1usize..5, pf in 1usize..5, seed: u64) {
        let x = randn(&[gt * pt, gf * pf], seed);
        let p = patchify(&x, pt, pf).unwrap();
        prop_assert_eq!(p.shape(), &[gt * gf, pt * pf]);
        prop_assert_eq!(unpatchify(&p, gt * pt, gf * pf, pt, pf).unwrap(), x);
    }

    #[test]
    fn standardize_is_idempotent(t in 2usize..40, f in 1usize..12, scale in 0.01f64..100.0, seed: u64) {
        let x = randn(&[t, f], seed).map(|v| v * scale + 3.0);
        let s = standardize_values(&x);
        let n = s.numel() as f64;
        let mean = s.sum() / n;
        let std = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        prop_assert!(standardize_values(&s).max_abs_diff(&s) < 1e-9);
    }

    #[test]
    fn crop_or_pad_keeps_rows(t in 1usize..50, target in 1usize..50, seed: u64) {
        let x = randn(&[t, 3], seed);
        let y = crop_or_pad_values(&x, target, seed).unwrap();
        prop_assert_eq!(y.shape(), &[target, 3]);
        if t <= target {
            prop_assert_eq!(&y.data()[..t * 3], x.data());
            prop_assert!(y.data()[t * 3..].iter().all(|&v| v == 0.0));
        } else {
            let first = y.row(0);
            let start = (0..=t - target).find(|&s| x.row(s) == first).unwrap();
            for r in 0..target {
                prop_assert_eq!(y.row(r), x.row(start + r));
            }
        }
    }

    #[test]
    fn lr_stays_between_floor_and_peak(step in 0usize..5000, spe in 1usize..50) {
        let cfg = TrainConfig { min_lr: 1e-7, ..TrainConfig::default() };
        let peak = effective_lr(cfg.base_lr, cfg.batch_size);
        let lr = lr_at(step, spe, &cfg);
        prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
        if step >= cfg.warmup_epochs * spe {
            prop_assert!(lr >= cfg.min_lr * (1.0 - 1e-12));
            prop_assert!(lr_at(step + 1, spe, &cfg) <= lr + 1e-18);
        } else {
            prop_assert!(lr_at(step + 1, spe, &cfg) >= lr);
        }
    }

    #[test]
    fn zero_gradient_step_only_decays(lr in 0.0f64..0.1, wd in 0.0f64..0.5, seed: u64) {
        let cfg = TrainConfig { weight_decay: wd, ..TrainConfig::default() };
        let w = randn(&[4, 3], seed);
        let b = randn(&[3], seed ^ 1);
        let mut params = NamedTensors::from([("w".to_string(), w.clone()), ("b".to_string(), b.clone())]);
        let grads = NamedTensors::from([("w".to_string(), Tensor::zeros(&[4, 3])), ("b".to_string(), Tensor::zeros(&[3]))]);
        let mut st = OptimizerState::new(&params);
        adamw_step(&mut params, &grads, &mut st, lr, &cfg).unwrap();
        prop_assert_eq!(&params["w"], &w.map(|x| x * (1.0 - lr * wd)));
        prop_assert_eq!(&params["b"], &b);
    }

    #[test]
    fn entropy_and_distance_are_bounded(gt in 1usize..6, gf in 1usize..6, seed: u64) {
        let n = gt * gf;
        let logits = randn(&[n, n], seed).map(|v| 3.0 * v);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| softmax_row(logits.row(i))).collect();
        let rec = AttnRecord { layer: 0, head: 0, window: n, probs: vec![Tensor::from_rows(&rows).unwrap()] };
        let h = attention_entropy(&rec).unwrap();
        prop_assert!(h >= -1e-12 && h <= (n as f64).ln() + 1e-9);
        let grid = PatchGrid::new(gt, gf).unwrap();
        let d = mean_attention_distance(&rec, &grid).unwrap();
        prop_assert!(d >= 0.0 && d <= grid.diameter() + 1e-9);
    }

    #[test]
    fn pwcca_is_a_bounded_similarity(rows in 40usize..120, cols in 1usize..6, seed: u64) {
        let x = FeatureMatrix::new(randn(&[rows, cols], seed)).unwrap();
        let y = FeatureMatrix::new(randn(&[rows, cols], seed ^ 9)).unwrap();
        let r = pwcca(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let a = randn(&[cols, cols], seed ^ 5).map(|v| v * 0.3);
        let mut a = a;
        for i in 0..cols {
            a.data_mut()[i * cols + i] += 2.0;
        }
        let xa = FeatureMatrix::new(x.values().matmul(&a).unwrap()).unwrap();
        prop_assert!((pwcca(&x, &xa).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn overall_scores_survive_affine_rescaling(
        scores in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..5),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
        col in 0usize..5,
    ) {
        let table = |rescale: bool| TaskScoreTable {
            models: vec!["a".into(), "b".into(), "c".into()],
            tasks: scores.iter().enumerate().map(|(i, s)| TaskColumn {
                name: format!("t{i}"),
                higher_is_better: i % 2 == 0,
                scores: s.iter().map(|&v| if rescale && i == col % scores.len() { a * v + b } else { v }).collect(),
            }).collect(),
        };
        let base = overall_scores(&table(false)).unwrap();
        let moved = overall_scores(&table(true)).unwrap();
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((0.0..=100.0).contains(x));
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn containers_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..3), 0..5), seed: u64) {
        let tensors: NamedTensors = shapes.iter().enumerate()
            .map(|(i, s)| (format!("t{i}"), randn(s, seed ^ i as u64).map(|v| v as f32 as f64)))
            .collect();
        let back = decode_container(&encode_container(&tensors).unwrap()).unwrap();
        prop_assert_eq!(back, tensors);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logmel_frame_count(samples in 400usize..20000) {
        let clip = AudioClip::new(vec![0.1; samples], SAMPLE_RATE).unwrap();
        let spec = logmel(&clip).unwrap();
        prop_assert_eq!(spec.frames(), samples / 160 + 1);
        prop_assert_eq!(spec.bins(), 80);
    }

    #[test]
    fn softmax_layer_norm_chain_gradients(rows in 1usize..4, cols in 2usize..6, seed: u64) {
        let x = randn(&[rows, cols], seed);
        let gamma = randn(&[cols], seed ^ 1);
        let beta = randn(&[cols], seed ^ 2);
        let err = grad_check(
            |g, v| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                let h = g.layer_norm(v, ga, be, 1e-6)?;
                let h = g.gelu(h)?;
                let p = g.softmax_lastdim(h)?;
                let sq = g.mul(p, v)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-5, "relative error {}", err);
    }
}
