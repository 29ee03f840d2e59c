//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mwmae::analysis::{
    collect_attention, distance_table, entropy_table, pwcca_matrix, stack_features,
    write_head_stats, write_matrix_csv, PatchGrid,
};
use mwmae::audio::{first_frames, load_wav};
use mwmae::datasets::{
    gen_corpus, load_spectrograms, read_labels, wav_files, LabelRow, Split, SynthKind,
};
use mwmae::eval::{
    overall_scores, scene_embedding, train_probe, ProbeConfig, ProbeResult, ProbeSplit, Targets,
    TaskColumn, TaskScoreTable,
};
use mwmae::mae::{MaeModel, Stack};
use mwmae::selftest::run_selftest;
use mwmae::tensor::{write_container, NamedTensors};
use mwmae::train::{train, TrainOutputs};
use mwmae::{Error, Result, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn missing(field: &str, flag: &str) -> Error {
    Error::Config {
        field: field.into(),
        detail: format!("not set in the config and no {flag} given"),
    }
}

pub fn synth(kind: SynthKind, n: usize, seed: u64, out: &Path) -> Result<()> {
    let rows = gen_corpus(kind, n, seed, out)?;
    info!(
        "wrote {} {} clips to {}",
        rows.len(),
        kind.name(),
        out.display()
    );
    Ok(())
}

pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.paths.data = args.data.or(cfg.paths.data);
    cfg.paths.out = args.out.or(cfg.paths.out);
    cfg.paths.loss_csv = args.loss_csv.or(cfg.paths.loss_csv);
    cfg.validate()?;
    let data = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| missing("paths.data", "--data"))?;
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| missing("paths.out", "--out"))?;

    let specs: Vec<Tensor> = load_spectrograms(&data)?.into_values().collect();
    info!(
        "pretraining on {} spectrograms from {}",
        specs.len(),
        data.display()
    );
    let outputs = TrainOutputs {
        loss_csv: cfg.paths.loss_csv.clone(),
        checkpoint: Some(out.clone()),
    };
    let report = train(&specs, &cfg.model, &cfg.train, &outputs)?;
    if let Some(last) = report.losses.last() {
        info!("finished at step {} with loss {:.6}", last.step, last.loss);
    }
    info!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn extract(ckpt: &Path, wav_dir: &Path, out: &Path) -> Result<()> {
    let model = MaeModel::load(ckpt)?;
    let files = wav_files(wav_dir)?;
    if files.is_empty() {
        return Err(Error::Contract(format!(
            "no .wav files in {}",
            wav_dir.display()
        )));
    }
    let embeddings = files
        .par_iter()
        .map(|p| {
            let emb = scene_embedding(&load_wav(p)?, &model)?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, Tensor::new(&[emb.len()], emb)?))
        })
        .collect::<Result<NamedTensors>>()?;
    write_container(out, &embeddings)?;
    info!("wrote {} embeddings to {}", embeddings.len(), out.display());
    Ok(())
}

/// Probe metrics as written by `probe` and read back by `score`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    #[serde(flatten)]
    pub result: ProbeResult,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

pub struct ProbeArgs {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub multilabel: bool,
    pub seed: u64,
}

fn split_labels(row: &LabelRow, multilabel: bool) -> Vec<String> {
    if multilabel {
        row.label
            .split(';')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    } else {
        vec![row.label.trim().to_string()]
    }
}

/// Class names in numeric order when every name is an integer,
/// lexicographic otherwise.
fn class_order(names: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = names.into_iter().collect();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().unwrap_or_default());
    }
    v
}

pub fn probe(args: ProbeArgs) -> Result<()> {
    let mut cfg: ProbeConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => ProbeConfig::default(),
    };
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = args.max_epochs {
        cfg.max_epochs = e;
    }
    let embeddings = mwmae::tensor::read_container(&args.embeddings)?;
    let rows = read_labels(&args.labels)?;
    let names = rows
        .iter()
        .flat_map(|r| split_labels(r, args.multilabel))
        .collect::<BTreeSet<_>>();
    let classes = class_order(names);
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let build = |split: Split| -> Result<ProbeSplit> {
        let chosen: Vec<&LabelRow> = rows.iter().filter(|r| r.split == split).collect();
        if chosen.is_empty() {
            return Err(Error::Contract(format!(
                "no {split:?} rows in the labels file"
            )));
        }
        let mut data = Vec::new();
        let mut dim = None;
        for r in &chosen {
            let e = embeddings
                .get(&r.filename)
                .ok_or_else(|| Error::Contract(format!("no embedding for {}", r.filename)))?;
            if *dim.get_or_insert(e.numel()) != e.numel() {
                return Err(Error::Dimension(format!(
                    "embedding of {} has {} values",
                    r.filename,
                    e.numel()
                )));
            }
            data.extend_from_slice(e.data());
        }
        let features = Tensor::new(&[chosen.len(), dim.unwrap_or(0)], data)?;
        let ids = |r: &LabelRow| -> Vec<usize> {
            split_labels(r, args.multilabel)
                .iter()
                .map(|l| index[l.as_str()])
                .collect()
        };
        let targets = if args.multilabel {
            Targets::Multilabel {
                labels: chosen.iter().map(|r| ids(r)).collect(),
                classes: classes.len(),
            }
        } else {
            Targets::Multiclass {
                labels: chosen.iter().map(|r| ids(r)[0]).collect(),
                classes: classes.len(),
            }
        };
        ProbeSplit::new(features, targets)
    };
    let (tr, va, te) = (
        build(Split::Train)?,
        build(Split::Valid)?,
        build(Split::Test)?,
    );
    let (n_train, n_valid, n_test) = (tr.features.rows(), va.features.rows(), te.features.rows());
    let result = train_probe(&tr, &va, &te, &cfg, args.seed)?;
    info!(
        "{} {:.4} on test after {} epochs (best valid {:.4} at epoch {})",
        result.metric, result.test, result.epochs_run, result.best_valid, result.best_epoch
    );
    let report = ProbeReport {
        result,
        classes,
        n_train,
        n_valid,
        n_test,
    };
    write_json(&args.out, &report)
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum AnalysisKind {
    Entropy,
    Distance,
    Pwcca,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum StackArg {
    Encoder,
    Decoder,
}

impl From<StackArg> for Stack {
    fn from(s: StackArg) -> Self {
        match s {
            StackArg::Encoder => Stack::Encoder,
            StackArg::Decoder => Stack::Decoder,
        }
    }
}

pub struct AnalyzeArgs {
    pub kind: AnalysisKind,
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub stack: StackArg,
    pub limit: Option<usize>,
    pub seed: u64,
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    let model = MaeModel::load(&args.ckpt)?;
    let input_t = model.config().input_t;
    let specs = load_spectrograms(&args.data)?
        .into_values()
        .take(args.limit.unwrap_or(usize::MAX))
        .map(|s| first_frames(&s, input_t))
        .collect::<Result<Vec<_>>>()?;
    let stack = Stack::from(args.stack);
    info!(
        "analysing {:?} heads over {} examples",
        args.kind,
        specs.len()
    );
    match args.kind {
        AnalysisKind::Entropy => {
            let records = collect_attention(&model, &specs, stack, args.seed)?;
            write_head_stats(&args.out, &entropy_table(&records)?)
        }
        AnalysisKind::Distance => {
            let records = collect_attention(&model, &specs, stack, args.seed)?;
            let grid = PatchGrid::from_config(model.config());
            write_head_stats(&args.out, &distance_table(&records, &grid)?)
        }
        AnalysisKind::Pwcca => {
            let features = stack_features(&model, &specs, stack, args.seed)?;
            let (labels, m) = pwcca_matrix(&features)?;
            write_matrix_csv(&args.out, &labels, &m)
        }
    }
}

#[derive(Debug, Serialize)]
struct ModelScore {
    model: String,
    score: f64,
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    table: TaskScoreTable,
    overall: Vec<ModelScore>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `metrics_dir/<model>/<task>.json`, each holding a probe report.
pub fn score(metrics_dir: &Path, out: &Path) -> Result<()> {
    let mut per_model: BTreeMap<String, BTreeMap<String, ProbeReport>> = BTreeMap::new();
    for model_dir in sorted_entries(metrics_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
    {
        let mut tasks = BTreeMap::new();
        for f in sorted_entries(&model_dir)? {
            if f.extension().is_some_and(|e| e == "json") {
                let report: ProbeReport =
                    serde_json::from_str(&fs::read_to_string(&f).map_err(io_err(&f))?)?;
                tasks.insert(stem(&f), report);
            }
        }
        per_model.insert(stem(&model_dir), tasks);
    }
    let models: Vec<String> = per_model.keys().cloned().collect();
    let Some(first) = per_model.values().next() else {
        return Err(Error::Contract(format!(
            "no model directories in {}",
            metrics_dir.display()
        )));
    };
    let task_names: Vec<String> = first.keys().cloned().collect();
    let mut tasks = Vec::new();
    for name in &task_names {
        let mut scores = Vec::new();
        let mut orientation = None;
        for (model, reports) in &per_model {
            let r = reports.get(name).ok_or_else(|| {
                Error::Contract(format!("model {model} has no result for task {name}"))
            })?;
            if *orientation.get_or_insert(r.result.higher_is_better) != r.result.higher_is_better {
                return Err(Error::Contract(format!(
                    "task {name} mixes metric orientations"
                )));
            }
            scores.push(r.result.test);
        }
        tasks.push(TaskColumn {
            name: name.clone(),
            higher_is_better: orientation.unwrap_or(true),
            scores,
        });
    }
    for (model, reports) in &per_model {
        if let Some(extra) = reports.keys().find(|k| !task_names.contains(k)) {
            return Err(Error::Contract(format!(
                "task {extra} of model {model} is missing for other models"
            )));
        }
    }
    let table = TaskScoreTable { models, tasks };
    let overall = overall_scores(&table)?
        .into_iter()
        .zip(&table.models)
        .map(|(score, model)| ModelScore {
            model: model.clone(),
            score,
        })
        .collect();
    write_json(out, &ScoreReport { table, overall })
}

/// Runs the built-in suite; `Ok(false)` when any check failed.
pub fn selftest() -> Result<bool> {
    let outcomes = run_selftest();
    for c in &outcomes {
        println!(
            "{} {} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(outcomes.iter().all(|c| c.passed))
}
