//! Downstream evaluation: clip-level scene embeddings, a shallow MLP
//! probe on frozen embeddings and the normalized overall score across
//! tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::xavier_uniform;
use crate::audio::{first_frames, logmel, standardize_values, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mae::MaeModel;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Graph, NamedTensors, Tensor};
use crate::train::{adamw_step, OptimizerState, TrainConfig};

pub const CHUNK_SECS: usize = 2;

/// Clip embedding: split into 2 s chunks (the last zero-padded), encode
/// every patch of each chunk without masking, concatenate the token
/// sequences in time and average them.
pub fn scene_embedding(clip: &AudioClip, model: &MaeModel) -> Result<Vec<f64>> {
    let cfg = model.config();
    let chunk = CHUNK_SECS * SAMPLE_RATE as usize;
    let samples = clip.samples();
    let n_chunks = samples.len().div_ceil(chunk).max(1);
    let mut sum = vec![0.0; cfg.enc_width];
    let mut count = 0usize;
    for c in 0..n_chunks {
        let mut buf = vec![0.0; chunk];
        let lo = c * chunk;
        let hi = samples.len().min(lo + chunk);
        buf[..hi - lo].copy_from_slice(&samples[lo..hi]);
        let spec = logmel(&AudioClip::new(buf, SAMPLE_RATE)?)?;
        let spec = first_frames(&standardize_values(spec.values()), cfg.input_t)?;
        let tokens = model.encode_all(&spec)?;
        for r in 0..tokens.rows() {
            for (s, v) in sum.iter_mut().zip(tokens.row(r)) {
                *s += v;
            }
        }
        count += tokens.rows();
    }
    Ok(sum.into_iter().map(|s| s / count as f64).collect())
}

/// Classification target of a probe task.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class index per example.
    Multiclass { labels: Vec<usize>, classes: usize },
    /// Zero or more classes per example.
    Multilabel {
        labels: Vec<Vec<usize>>,
        classes: usize,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Multiclass { labels, .. } => labels.len(),
            Targets::Multilabel { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Targets::Multiclass { classes, .. } | Targets::Multilabel { classes, .. } => *classes,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Targets::Multiclass { .. } => "accuracy",
            Targets::Multilabel { .. } => "mAP",
        }
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Multiclass { labels, classes } => Targets::Multiclass {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Multilabel { labels, classes } => Targets::Multilabel {
                labels: idx.iter().map(|&i| labels[i].clone()).collect(),
                classes: *classes,
            },
        }
    }
}

/// Embeddings with their targets.
#[derive(Clone, Debug)]
pub struct ProbeSplit {
    pub features: Tensor,
    pub targets: Targets,
}

impl ProbeSplit {
    pub fn new(features: Tensor, targets: Targets) -> Result<Self> {
        if features.rank() != 2 || features.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension(format!(
                "{} targets for features of shape {:?}",
                targets.len(),
                features.shape()
            )));
        }
        let bad = match &targets {
            Targets::Multiclass { labels, classes } => labels.iter().any(|l| l >= classes),
            Targets::Multilabel { labels, classes } => {
                labels.iter().flatten().any(|l| l >= classes)
            }
        };
        if bad {
            return Err(Error::Contract("label outside the class range".into()));
        }
        Ok(Self { features, targets })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            dropout: 0.25,
            lr: 1e-4,
            betas: (0.9, 0.95),
            max_epochs: 500,
            patience: 20,
            batch_size: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub metric: String,
    pub test: f64,
    pub best_valid: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub higher_is_better: bool,
}

fn zscore_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; d];
    for r in 0..n {
        for (j, v) in x.row(r).iter().enumerate() {
            std[j] += (v - mean[j]).powi(2) / n as f64;
        }
    }
    let std = std.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_zscore(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - mean[i % d]) / std[i % d];
    }
    out
}

fn rows_of(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = x.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(&[idx.len(), d], data)
}

fn multilabel_matrix(labels: &[Vec<usize>], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, ls) in labels.iter().enumerate() {
        for &l in ls {
            t.data_mut()[i * classes + l] = 1.0;
        }
    }
    Ok(t)
}

fn probe_logits(
    g: &mut Graph,
    params: &BTreeMap<&str, crate::Var>,
    x: crate::Var,
    dropout: Option<(f64, u64)>,
) -> Result<crate::Var> {
    let h = g.matmul(x, params["fc1.weight"])?;
    let h = g.add_bias(h, params["fc1.bias"])?;
    let mut h = g.gelu(h)?;
    if let Some((p, seed)) = dropout {
        h = g.dropout(h, p, seed)?;
    }
    let o = g.matmul(h, params["fc2.weight"])?;
    g.add_bias(o, params["fc2.bias"])
}

fn predict(params: &NamedTensors, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: BTreeMap<&str, crate::Var> = params
        .iter()
        .map(|(k, t)| (k.as_str(), g.constant(t.clone())))
        .collect();
    let xv = g.constant(x.clone());
    let out = probe_logits(&mut g, &vars, xv, None)?;
    Ok(g.value(out).clone())
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = logits.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Average precision of one ranking; `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut acc) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / total as f64)
}

/// Mean average precision over classes with at least one positive.
pub fn mean_average_precision(logits: &Tensor, labels: &[Vec<usize>]) -> f64 {
    let classes = logits.cols();
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = (0..logits.rows()).map(|i| logits.get2(i, c)).collect();
            let pos: Vec<bool> = labels.iter().map(|ls| ls.contains(&c)).collect();
            average_precision(&scores, &pos)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn task_metric(logits: &Tensor, targets: &Targets) -> f64 {
    match targets {
        Targets::Multiclass { labels, .. } => accuracy(logits, labels),
        Targets::Multilabel { labels, .. } => mean_average_precision(logits, labels),
    }
}

/// Trains a one-hidden-layer GELU MLP with dropout on `train`, early-stops
/// on the validation metric and reports the test metric of the best epoch.
/// Features are z-scored with training-split statistics.
pub fn train_probe(
    train: &ProbeSplit,
    valid: &ProbeSplit,
    test: &ProbeSplit,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let d = train.features.cols();
    if valid.features.cols() != d || test.features.cols() != d {
        return Err(Error::Dimension(
            "splits have different embedding widths".into(),
        ));
    }
    let classes = train.targets.classes();
    if classes < 2 {
        return Err(Error::Contract("probe needs at least two classes".into()));
    }
    if let Targets::Multiclass { labels, .. } = &train.targets {
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::Contract(
                "training split contains a single class".into(),
            ));
        }
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::config(
            "probe",
            "batch_size and hidden must be positive",
        ));
    }
    let (mean, std) = zscore_stats(&train.features);
    let xtr = apply_zscore(&train.features, &mean, &std);
    let xva = apply_zscore(&valid.features, &mean, &std);
    let xte = apply_zscore(&test.features, &mean, &std);

    let mut params = NamedTensors::new();
    let mut rng = rng_from(seed, &[0x9b, 0]);
    params.insert("fc1.weight".into(), xavier_uniform(d, cfg.hidden, &mut rng));
    params.insert("fc1.bias".into(), Tensor::zeros(&[cfg.hidden]));
    params.insert(
        "fc2.weight".into(),
        xavier_uniform(cfg.hidden, classes, &mut rng),
    );
    params.insert("fc2.bias".into(), Tensor::zeros(&[classes]));
    let opt_cfg = TrainConfig {
        betas: cfg.betas,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut state = OptimizerState::new(&params);

    let n = xtr.rows();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(seed, &[0x9b, 1, epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = rows_of(&xtr, chunk)?;
            let mut g = Graph::new();
            let vars: BTreeMap<&str, crate::Var> = params
                .iter()
                .map(|(k, t)| (k.as_str(), g.param(t.clone())))
                .collect();
            let xv = g.constant(xb);
            let dseed = derive_seed(seed, &[0x9b, 2, epoch as u64, b as u64]);
            let logits = probe_logits(&mut g, &vars, xv, Some((cfg.dropout, dseed)))?;
            let loss = match &train.targets.subset(chunk) {
                Targets::Multiclass { labels, .. } => g.cross_entropy(logits, labels)?,
                Targets::Multilabel { labels, classes } => {
                    g.bce_with_logits(logits, &multilabel_matrix(labels, *classes)?)?
                }
            };
            let mut grads = g.backward(loss)?;
            let grads: NamedTensors = vars
                .iter()
                .map(|(k, &v)| (k.to_string(), grads.take(v).expect("parameter gradient")))
                .collect();
            adamw_step(&mut params, &grads, &mut state, cfg.lr, &opt_cfg)?;
        }
        let v = task_metric(&predict(&params, &xva)?, &valid.targets);
        if v > best.0 {
            best = (v, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (best_valid, best_epoch, best_params) = best;
    let test_metric = task_metric(&predict(&best_params, &xte)?, &test.targets);
    Ok(ProbeResult {
        metric: train.targets.metric_name().into(),
        test: test_metric,
        best_valid,
        best_epoch,
        epochs_run,
        higher_is_better: true,
    })
}

/// One task's column of a [`TaskScoreTable`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskColumn {
    pub name: String,
    pub higher_is_better: bool,
    /// One score per model, in table order.
    pub scores: Vec<f64>,
}

/// Per-model, per-task metric matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScoreTable {
    pub models: Vec<String>,
    pub tasks: Vec<TaskColumn>,
}

impl TaskScoreTable {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.tasks.is_empty() {
            return Err(Error::Contract("score table is empty".into()));
        }
        for t in &self.tasks {
            if t.scores.len() != self.models.len() {
                return Err(Error::Contract(format!(
                    "task {} has {} scores for {} models",
                    t.name,
                    t.scores.len(),
                    self.models.len()
                )));
            }
            if t.scores.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "task {} has a non-finite score",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn model_index(&self, model: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::Contract(format!("unknown model {model}")))
    }
}

/// Mean over tasks of `100 (x - min) / (max - min)` for model `m`, with
/// the orientation flipped for lower-is-better tasks. A task on which all
/// models tie contributes 100.
pub fn overall_score(table: &TaskScoreTable, m: usize) -> Result<f64> {
    table.validate()?;
    if m >= table.models.len() {
        return Err(Error::Contract(format!("model index {m} out of range")));
    }
    let mut total = 0.0;
    for t in &table.tasks {
        let min = t.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = t.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let x = t.scores[m];
        total += if max == min {
            100.0
        } else if t.higher_is_better {
            100.0 * ((x - min) / (max - min))
        } else {
            100.0 * ((max - x) / (max - min))
        };
    }
    Ok(total / table.tasks.len() as f64)
}

pub fn overall_scores(table: &TaskScoreTable) -> Result<Vec<f64>> {
    (0..table.models.len())
        .map(|m| overall_score(table, m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn table() -> TaskScoreTable {
        TaskScoreTable {
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
        }
    }

    #[test]
    fn worked_example() {
        let t = table();
        assert_eq!(overall_score(&t, 1).unwrap(), 25.0);
        assert_eq!(overall_score(&t, 2).unwrap(), 100.0);
        assert_eq!(overall_score(&t, 0).unwrap(), 0.0);
    }

    #[test]
    fn ties_contribute_full_marks() {
        let mut t = table();
        t.tasks.push(TaskColumn {
            name: "flat".into(),
            higher_is_better: true,
            scores: vec![0.5; 3],
        });
        let s = overall_scores(&t).unwrap();
        assert_eq!(s, vec![100.0 / 3.0, 50.0, 100.0]);
    }

    #[test]
    fn lower_is_better_flips() {
        let t = TaskScoreTable {
            models: vec!["A".into(), "B".into()],
            tasks: vec![TaskColumn {
                name: "err".into(),
                higher_is_better: false,
                scores: vec![0.1, 0.3],
            }],
        };
        assert_eq!(overall_scores(&t).unwrap(), vec![100.0, 0.0]);
    }

    #[test]
    fn empty_table_is_rejected() {
        let t = TaskScoreTable {
            models: vec![],
            tasks: vec![],
        };
        assert!(matches!(overall_score(&t, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn average_precision_reference() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(average_precision(&[0.1], &[false]).is_none());
    }

    fn blobs(n: usize, d: usize, sep: f64, seed: u64) -> ProbeSplit {
        let mut rng = rng_from(seed, &[]);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            for j in 0..d {
                let c = if j == 0 && l == 1 { sep } else { 0.0 };
                data.push(c + noise.sample(&mut rng));
            }
            labels.push(l);
        }
        ProbeSplit::new(
            Tensor::new(&[n, d], data).unwrap(),
            Targets::Multiclass { labels, classes: 2 },
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs() {
        let cfg = ProbeConfig::default();
        let r = train_probe(
            &blobs(200, 4, 6.0, 1),
            &blobs(60, 4, 6.0, 2),
            &blobs(100, 4, 6.0, 3),
            &cfg,
            0,
        )
        .unwrap();
        assert!(r.test >= 0.99, "{r:?}");
    }

    #[test]
    fn single_class_is_rejected() {
        let s = ProbeSplit::new(
            Tensor::zeros(&[3, 2]),
            Targets::Multiclass {
                labels: vec![1, 1, 1],
                classes: 2,
            },
        )
        .unwrap();
        assert!(matches!(
            train_probe(&s, &s, &s, &ProbeConfig::default(), 0),
            Err(Error::Contract(_))
        ));
    }
}
