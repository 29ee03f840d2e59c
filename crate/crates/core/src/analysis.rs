//! Attention-head analysis: per-head attention entropy, mean attention
//! distance on the patch grid, and projection-weighted CCA between head
//! feature matrices.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::dense_window_probs;
use crate::error::{Error, Result};
use crate::mae::{MaeConfig, MaeModel, Stack};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Dense attention of one head over a set of examples.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub layer: usize,
    pub head: usize,
    pub window: usize,
    /// One `n x n` row-stochastic matrix per example; rows are queries.
    pub probs: Vec<Tensor>,
}

/// Patch-grid coordinates: patch `i` sits at `(i / grid_f, i % grid_f)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid_t: usize,
    pub grid_f: usize,
}

impl PatchGrid {
    pub fn new(grid_t: usize, grid_f: usize) -> Result<Self> {
        if grid_t == 0 || grid_f == 0 {
            return Err(Error::Contract(format!(
                "empty patch grid {grid_t}x{grid_f}"
            )));
        }
        Ok(Self { grid_t, grid_f })
    }

    pub fn from_config(cfg: &MaeConfig) -> Self {
        let (grid_t, grid_f) = cfg.grid();
        Self { grid_t, grid_f }
    }

    pub fn n_patches(&self) -> usize {
        self.grid_t * self.grid_f
    }

    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.grid_f, i % self.grid_f)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = self.position(i);
        let (c, d) = self.position(j);
        let dt = a as f64 - c as f64;
        let df = b as f64 - d as f64;
        (dt * dt + df * df).sqrt()
    }

    pub fn diameter(&self) -> f64 {
        self.distance(0, self.n_patches() - 1)
    }
}

fn check_probs(p: &Tensor) -> Result<usize> {
    let s = p.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Dimension(format!(
            "attention matrix must be square, got {s:?}"
        )));
    }
    if let Some(v) = p.data().iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract(format!(
            "invalid attention probability {v}"
        )));
    }
    Ok(s[0])
}

fn per_example_mean(rec: &AttnRecord, f: impl Fn(&Tensor, usize) -> f64) -> Result<f64> {
    if rec.probs.is_empty() {
        return Err(Error::Contract("attention record has no examples".into()));
    }
    let mut total = 0.0;
    for p in &rec.probs {
        let n = check_probs(p)?;
        total += f(p, n);
    }
    Ok(total / rec.probs.len() as f64)
}

/// Mean over query rows of `-sum p ln p`, then mean over examples.
pub fn attention_entropy(rec: &AttnRecord) -> Result<f64> {
    per_example_mean(rec, |p, n| {
        let mut acc = 0.0;
        for i in 0..n {
            acc -= p
                .row(i)
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>();
        }
        acc / n as f64
    })
}

/// Mean over queries of the attention-weighted Euclidean grid distance,
/// then mean over examples.
pub fn mean_attention_distance(rec: &AttnRecord, grid: &PatchGrid) -> Result<f64> {
    if let Some(p) = rec.probs.iter().find(|p| p.shape()[0] != grid.n_patches()) {
        return Err(Error::Contract(format!(
            "attention over {} tokens does not match a {}x{} grid",
            p.shape()[0],
            grid.grid_t,
            grid.grid_f
        )));
    }
    per_example_mean(rec, |p, n| {
        let mut acc = 0.0;
        for i in 0..n {
            for (j, &v) in p.row(i).iter().enumerate() {
                if v > 0.0 {
                    acc += v * grid.distance(i, j);
                }
            }
        }
        acc / n as f64
    })
}

/// Attention records for every head of a stack over `specs`. The decoder
/// is run on masks drawn from `seed` and the example index.
pub fn collect_attention(
    model: &MaeModel,
    specs: &[Tensor],
    stack: Stack,
    seed: u64,
) -> Result<Vec<AttnRecord>> {
    if specs.is_empty() {
        return Err(Error::Contract("no examples to analyse".into()));
    }
    let per_example = specs
        .par_iter()
        .enumerate()
        .map(|(e, spec)| {
            let (g, trace) = model.trace_stack(spec, stack, derive_seed(seed, &[e as u64]))?;
            trace
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|h| dense_window_probs(g.value(h.probs)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let windows = model.stack_windows(stack);
    let (depth, heads) = model.stack_dims(stack);
    let mut out = Vec::with_capacity(depth * heads);
    for layer in 0..depth {
        for (head, &window) in windows.iter().enumerate() {
            out.push(AttnRecord {
                layer,
                head,
                window,
                probs: per_example
                    .iter()
                    .map(|ex| ex[layer][head].clone())
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Entropy and distance of one head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadStat {
    pub layer: usize,
    pub head: usize,
    pub value: f64,
}

pub fn entropy_table(records: &[AttnRecord]) -> Result<Vec<HeadStat>> {
    records
        .iter()
        .map(|r| {
            Ok(HeadStat {
                layer: r.layer,
                head: r.head,
                value: attention_entropy(r)?,
            })
        })
        .collect()
}

pub fn distance_table(records: &[AttnRecord], grid: &PatchGrid) -> Result<Vec<HeadStat>> {
    records
        .iter()
        .map(|r| {
            Ok(HeadStat {
                layer: r.layer,
                head: r.head,
                value: mean_attention_distance(r, grid)?,
            })
        })
        .collect()
}

pub fn write_head_stats(path: &Path, stats: &[HeadStat]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Datapoints by features; requires more rows than columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Dimension(format!(
                "feature matrix must be 2-D, got {:?}",
                values.shape()
            )));
        }
        if values.rows() <= values.cols() {
            return Err(Error::Contract(format!(
                "feature matrix needs more rows than columns, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

pub const PWCCA_RANK_TOL: f64 = 1e-10;

fn centered(x: &Tensor) -> DMatrix<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut m = DMatrix::from_row_slice(n, d, x.data());
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

/// Orthonormal basis of the column space, truncated at a relative
/// singular-value threshold.
fn column_basis(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 || !smax.is_finite() {
        return Err(Error::Degenerate(format!(
            "{what} has rank 0 after centering"
        )));
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > PWCCA_RANK_TOL * smax)
        .map(|(i, _)| i)
        .collect();
    Ok(u.select_columns(&keep))
}

/// Projection-weighted canonical correlation of `y` against `x`: a mean
/// of canonical correlations weighted by how much of `x` each canonical
/// variate accounts for. Not symmetric.
pub fn pwcca(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "feature matrices have {} and {} rows",
            x.rows(),
            y.rows()
        )));
    }
    let xc = centered(x.values());
    let yc = centered(y.values());
    let ux = column_basis(&xc, "first feature matrix")?;
    let uy = column_basis(&yc, "second feature matrix")?;
    let cross = ux.transpose() * &uy;
    let svd = cross.svd(true, false);
    let a = svd.u.expect("requested U");
    let rho = svd.singular_values;
    let h = &ux * a;
    let proj = h.transpose() * &xc;
    let weights: Vec<f64> = proj
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum())
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "canonical variates carry no weight".into(),
        ));
    }
    let score = weights
        .iter()
        .zip(rho.iter())
        .map(|(w, r)| w * r.min(1.0))
        .sum::<f64>()
        / total;
    Ok(score.clamp(0.0, 1.0))
}

/// Post-attention, pre-output-projection activations of every head of a
/// stack, stacked over tokens and examples: `features[layer][head]`.
pub fn stack_features(
    model: &MaeModel,
    specs: &[Tensor],
    stack: Stack,
    seed: u64,
) -> Result<Vec<Vec<FeatureMatrix>>> {
    if specs.is_empty() {
        return Err(Error::Contract(
            "no examples to extract features from".into(),
        ));
    }
    let per_example = specs
        .par_iter()
        .enumerate()
        .map(|(e, spec)| {
            let (g, trace) = model.trace_stack(spec, stack, derive_seed(seed, &[e as u64]))?;
            Ok(trace
                .iter()
                .map(|layer| layer.iter().map(|h| g.value(h.output).clone()).collect())
                .collect::<Vec<Vec<Tensor>>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let (depth, heads) = model.stack_dims(stack);
    (0..depth)
        .map(|l| {
            (0..heads)
                .map(|h| {
                    let cols = per_example[0][l][h].cols();
                    let mut data = Vec::new();
                    for ex in &per_example {
                        data.extend_from_slice(ex[l][h].data());
                    }
                    FeatureMatrix::new(Tensor::new(&[data.len() / cols, cols], data)?)
                })
                .collect()
        })
        .collect()
}

/// Features of a single head; see [`stack_features`].
pub fn head_features(
    model: &MaeModel,
    specs: &[Tensor],
    stack: Stack,
    layer: usize,
    head: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    let (depth, heads) = model.stack_dims(stack);
    if layer >= depth || head >= heads {
        return Err(Error::Contract(format!(
            "no head L{layer}.H{head} in a stack of {depth} layers x {heads} heads"
        )));
    }
    let mut all = stack_features(model, specs, stack, seed)?;
    Ok(all.swap_remove(layer).swap_remove(head))
}

/// PWCCA between every ordered pair of heads, labelled `"Lx.Hy"`;
/// entry `(r, c)` is `pwcca(head_r, head_c)`.
pub fn pwcca_matrix(features: &[Vec<FeatureMatrix>]) -> Result<(Vec<String>, Tensor)> {
    let flat: Vec<(String, &FeatureMatrix)> = features
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            layer
                .iter()
                .enumerate()
                .map(move |(h, f)| (format!("L{l}.H{h}"), f))
        })
        .collect();
    let n = flat.len();
    let values = (0..n * n)
        .into_par_iter()
        .map(|k| pwcca(flat[k / n].1, flat[k % n].1))
        .collect::<Result<Vec<f64>>>()?;
    let labels = flat.into_iter().map(|(l, _)| l).collect();
    Ok((labels, Tensor::new(&[n, n], values)?))
}

pub fn write_matrix_csv(path: &Path, labels: &[String], m: &Tensor) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("head");
    for l in labels {
        text.push(',');
        text.push_str(l);
    }
    text.push('\n');
    for (i, l) in labels.iter().enumerate() {
        text.push_str(l);
        for v in m.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean PWCCA over same-window head pairs in different layers, and over
/// pairs of those heads with the global heads of the other layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowContrast {
    pub same_window: f64,
    pub with_global: f64,
}

impl WindowContrast {
    pub fn holds(&self) -> bool {
        self.same_window > self.with_global
    }
}

pub fn window_contrast(
    features: &[Vec<FeatureMatrix>],
    windows: &[usize],
    n_p: usize,
) -> Result<WindowContrast> {
    if features.len() < 2 {
        return Err(Error::Contract(
            "window contrast needs at least two layers".into(),
        ));
    }
    let local: Vec<usize> = (0..windows.len()).filter(|&h| windows[h] < n_p).collect();
    let global: Vec<usize> = (0..windows.len()).filter(|&h| windows[h] == n_p).collect();
    if local.is_empty() || global.is_empty() {
        return Err(Error::Contract(
            "schedule needs both local and global heads".into(),
        ));
    }
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for a in 0..features.len() {
        for b in 0..features.len() {
            if a == b {
                continue;
            }
            for &h in &local {
                same += pwcca(&features[a][h], &features[b][h])?;
                ns += 1;
                for &gh in &global {
                    cross += pwcca(&features[a][h], &features[b][gh])?;
                    nc += 1;
                }
            }
        }
    }
    Ok(WindowContrast {
        same_window: same / ns as f64,
        with_global: cross / nc as f64,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::rng_from;

    fn record(probs: Vec<Tensor>) -> AttnRecord {
        AttnRecord {
            layer: 0,
            head: 0,
            window: probs[0].rows(),
            probs,
        }
    }

    fn random_stochastic(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed, &[]);
        let mut rows = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s: f64 = r.iter().sum();
            rows.push(r.iter().map(|v| v / s).collect());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn entropy_reference_values() {
        let u = Tensor::full(&[250, 250], 1.0 / 250.0);
        let h = attention_entropy(&record(vec![u])).unwrap();
        assert!((h - 250f64.ln()).abs() < 1e-9);
        assert_eq!(attention_entropy(&record(vec![eye(5)])).unwrap(), 0.0);
        let half = Tensor::from_rows(&vec![vec![0.5, 0.5, 0.0, 0.0]; 4]).unwrap();
        assert!((attention_entropy(&record(vec![half])).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn negative_probability_is_rejected() {
        let bad = Tensor::from_rows(&[vec![1.5, -0.5], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            attention_entropy(&record(vec![bad])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn distance_reference_values() {
        let grid = PatchGrid::new(3, 3).unwrap();
        assert_eq!(
            mean_attention_distance(&record(vec![eye(9)]), &grid).unwrap(),
            0.0
        );
        let two = PatchGrid::new(1, 2).unwrap();
        let u = Tensor::full(&[2, 2], 0.5);
        assert!((mean_attention_distance(&record(vec![u]), &two).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            mean_attention_distance(&record(vec![eye(4)]), &grid),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn distance_matches_double_loop() {
        let grid = PatchGrid::new(3, 3).unwrap();
        let probs = vec![random_stochastic(9, 1), random_stochastic(9, 2)];
        let mut expect = 0.0;
        for p in &probs {
            let mut acc = 0.0;
            for i in 0..9 {
                for j in 0..9 {
                    let (ti, fi) = ((i / 3) as f64, (i % 3) as f64);
                    let (tj, fj) = ((j / 3) as f64, (j % 3) as f64);
                    acc += p.get2(i, j) * ((ti - tj).powi(2) + (fi - fj).powi(2)).sqrt();
                }
            }
            expect += acc / 9.0;
        }
        expect /= 2.0;
        let got = mean_attention_distance(&record(probs), &grid).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        FeatureMatrix::new(Tensor::randn(&[rows, cols], 1.0, &mut rng_from(seed, &[3]))).unwrap()
    }

    #[test]
    fn pwcca_self_and_linear_maps() {
        let x = gaussian(500, 6, 1);
        assert!((pwcca(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let a = Tensor::randn(&[6, 6], 1.0, &mut rng_from(2, &[]));
        let y = FeatureMatrix::new(x.values().matmul(&a).unwrap()).unwrap();
        assert!((pwcca(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pwcca_independent_is_small() {
        let x = gaussian(2000, 8, 4);
        let y = gaussian(2000, 8, 5);
        assert!(pwcca(&x, &y).unwrap() < 0.25);
    }

    #[test]
    fn pwcca_rank_zero_is_degenerate() {
        let x = FeatureMatrix::new(Tensor::full(&[10, 2], 3.0)).unwrap();
        let y = gaussian(10, 2, 1);
        assert!(matches!(pwcca(&x, &y), Err(Error::Degenerate(_))));
        assert!(matches!(pwcca(&y, &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn feature_matrix_needs_tall_shape() {
        assert!(FeatureMatrix::new(Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn grid_geometry() {
        let g = PatchGrid::new(25, 5).unwrap();
        assert_eq!(g.position(7), (1, 2));
        assert!((g.diameter() - (24f64.powi(2) + 16.0).sqrt()).abs() < 1e-12);
    }
}
