use rand::Rng;

use super::*;
use crate::rng::rng_from;
use crate::tensor::{Graph, Tensor};
use crate::Error;

fn random_spec(cfg: &MaeConfig, seed: u64) -> Tensor {
    Tensor::randn(&[cfg.input_t, cfg.input_f], 1.0, &mut rng_from(seed, &[7]))
}

fn gradcheck_config() -> MaeConfig {
    MaeConfig {
        enc_depth: 1,
        dec_depth: 1,
        enc_width: 8,
        mlp_ratio: 2,
        ..MaeConfig::tiny()
    }
}

#[test]
fn forward_shapes() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let out = model.forward(&random_spec(&cfg, 1), 3).unwrap();
    assert_eq!(out.pred_patches.shape(), &[16, 4]);
    assert_eq!(out.latent.shape(), &[cfg.n_visible(), cfg.enc_width]);
    assert!(out.loss >= 0.0 && out.loss.is_finite());
    assert_eq!(model.dec_schedule().windows(), &[2, 4, 8, 16, 16]);
}

#[test]
fn reference_decoder_schedule() {
    let cfg = MaeConfig::default();
    assert_eq!(
        cfg.dec_schedule().unwrap().windows(),
        &[2, 5, 10, 25, 50, 125, 250, 250]
    );
}

#[test]
fn forward_is_bit_reproducible() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let spec = random_spec(&cfg, 2);
    let a = model.forward(&spec, 11).unwrap();
    let b = model.forward(&spec, 11).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.pred_patches, b.pred_patches);
}

#[test]
fn masked_mse_matches_double_loop() {
    let mut rng = rng_from(5, &[]);
    let pred = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let target = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let mask = MaskSet::from_permutation(vec![4, 1, 0, 5, 2, 3], 4).unwrap();
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..6 {
        if !mask.masked().contains(&i) {
            continue;
        }
        for j in 0..3 {
            acc += (pred.get2(i, j) - target.get2(i, j)).powi(2);
            count += 1;
        }
    }
    let got = masked_mse_value(&pred, &target, &mask).unwrap();
    assert!((got - acc / count as f64).abs() < 1e-12);
}

#[test]
fn masked_mse_ignores_visible_rows() {
    let target = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let mask = MaskSet::from_permutation(vec![1, 0, 2], 2).unwrap();
    let mut pred = target.clone();
    pred.data_mut()[2] = 99.0;
    pred.data_mut()[3] = -7.0;
    assert_eq!(masked_mse_value(&pred, &target, &mask).unwrap(), 0.0);
    let shifted = target.map(|v| v + 0.5);
    let mut pred = shifted.clone();
    pred.data_mut()[2..4].copy_from_slice(&[0.0, 0.0]);
    let got = masked_mse_value(&pred, &target, &mask).unwrap();
    assert!((got - 0.25).abs() < 1e-12);
}

#[test]
fn latent_ignores_masked_content() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let spec = random_spec(&cfg, 3);
    let patches = model.patchify(&spec).unwrap();
    let mask = random_mask(cfg.n_patches(), cfg.mask_ratio, 4).unwrap();
    let mut other = patches.clone();
    let pd = cfg.patch_dim();
    let mut rng = rng_from(9, &[]);
    for &m in mask.masked() {
        for v in &mut other.data_mut()[m * pd..(m + 1) * pd] {
            *v = rng.random_range(-10.0..10.0);
        }
    }
    let a = model.forward_masked(&patches, mask.clone()).unwrap();
    let b = model.forward_masked(&other, mask).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.pred_patches, b.pred_patches);
}

#[test]
fn loss_ignores_visible_targets() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let patches = model.patchify(&random_spec(&cfg, 4)).unwrap();
    let mask = random_mask(cfg.n_patches(), cfg.mask_ratio, 5).unwrap();
    let out = model.forward_masked(&patches, mask.clone()).unwrap();
    let mut target = patches.clone();
    for &v in mask.visible() {
        for x in &mut target.data_mut()[v * 4..(v + 1) * 4] {
            *x += 1e3;
        }
    }
    let loss = masked_mse_value(&out.pred_patches, &target, &mask).unwrap();
    assert!((loss - out.loss).abs() < 1e-12);
}

#[test]
fn masked_decoder_rows_are_the_mask_token() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let patches = model.patchify(&random_spec(&cfg, 6)).unwrap();
    let mask = random_mask(cfg.n_patches(), cfg.mask_ratio, 6).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let p = g.constant(patches);
    let latent = model.encode(&mut g, &vars, p, &mask).unwrap();
    let tokens = model.decoder_tokens(&mut g, &vars, latent, &mask).unwrap();
    let tokens = g.value(tokens);
    let pos = sincos_pos_embed(cfg.n_patches(), cfg.dec_width).unwrap();
    let token = model.param(MASK_TOKEN).unwrap();
    for &m in mask.masked() {
        for j in 0..cfg.dec_width {
            let got = tokens.get2(m, j) - pos.get2(m, j);
            assert!((got - token.data()[j]).abs() < 1e-15);
        }
    }
}

#[test]
fn inconsistent_mask_is_rejected() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let patches = model.patchify(&random_spec(&cfg, 1)).unwrap();
    let wrong = random_mask(20, 0.8, 0).unwrap();
    assert!(matches!(
        model.forward_masked(&patches, wrong),
        Err(Error::Contract(_))
    ));
}

#[test]
fn end_to_end_gradients() {
    let cfg = gradcheck_config();
    let model = MaeModel::init(&cfg).unwrap();
    let patches = model.patchify(&random_spec(&cfg, 8)).unwrap();
    let mask = random_mask(cfg.n_patches(), cfg.mask_ratio, 8).unwrap();
    let err = model.grad_check_loss(&patches, &mask, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradients_cover_every_parameter() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let patches = model.patchify(&random_spec(&cfg, 9)).unwrap();
    let mask = random_mask(cfg.n_patches(), cfg.mask_ratio, 9).unwrap();
    let (loss, grads) = model.loss_and_grads(&patches, &mask).unwrap();
    assert!(loss > 0.0);
    for (name, shape) in expected_shapes(&cfg) {
        assert_eq!(grads[&name].shape(), shape.as_slice(), "{name}");
    }
    assert!(grads[MASK_TOKEN].data().iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    model.save(&path).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = MaeModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for (name, t) in model.params() {
        let diff = t.max_abs_diff(back.param(name).unwrap());
        assert!(
            diff <= 1e-6 * t.data().iter().fold(1.0f64, |m, v| m.max(v.abs())),
            "{name}"
        );
    }
}

#[test]
fn checkpoint_shape_mismatch_is_reported() {
    let cfg = MaeConfig::tiny();
    let model = MaeModel::init(&cfg).unwrap();
    let mut params = model.params().clone();
    params.insert("decoder.head.bias".into(), Tensor::zeros(&[5]));
    let err = MaeModel::from_params(cfg.clone(), params).unwrap_err();
    assert!(err.to_string().contains("decoder.head.bias"));
    let mut params = model.params().clone();
    params.remove("encoder.norm.weight");
    assert!(matches!(
        MaeModel::from_params(cfg, params),
        Err(Error::Checkpoint(m)) if m.contains("encoder.norm.weight")
    ));
}

#[test]
fn mask_visibility_is_uniform() {
    let n_p = 50;
    let trials = 10_000;
    let mut counts = vec![0usize; n_p];
    for seed in 0..trials {
        for &v in random_mask(n_p, 0.8, seed).unwrap().visible() {
            counts[v] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / trials as f64;
        assert!((f - 0.2).abs() <= 0.02, "index {i}: {f}");
    }
}

#[test]
fn positions_are_distinct() {
    let n = 10_000;
    let pe = sincos_pos_embed(n, 8).unwrap();
    let mut rows: Vec<&[f64]> = (0..n).map(|i| pe.row(i)).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in rows.windows(2) {
        assert_ne!(w[0], w[1]);
    }
}

#[test]
fn unpatchify_inverts_patchify() {
    let cfg = MaeConfig::default();
    let spec = random_spec(&cfg, 10);
    let p = patchify(&spec, 4, 16).unwrap();
    assert_eq!(unpatchify(&p, 200, 80, 4, 16).unwrap(), spec);
}
