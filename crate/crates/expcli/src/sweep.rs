//! Strategy × learning-rate × seed sweeps and their CSV outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use icrlab::attack::{not_r_attention, not_r_gradient};
use icrlab::curvature::{entropy_stats, input_hessian_lambda_max, param_gn_trace, snr_c, OutputCurvature, TraceMethod};
use icrlab::attribution::target_class;
use icrlab::models::Model;
use icrlab::training::{accuracy, sgd_train, Strategy, TrainOutcome};
use icrlab::Tensor;
use rayon::prelude::*;

use crate::config::{ProbeMethod, SweepConfig};
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::stats::{mean, overall_ranks, rank_methods, std_dev, Direction};

/// One measured value. `sample` indexes the probe point, absent for run-level values.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub lr: f64,
    pub method: String,
    pub metric: String,
    pub sample: Option<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunStatus {
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub lr: f64,
    /// Stop reason, or `error`.
    pub status: String,
    pub epochs: usize,
    pub final_loss: f64,
    pub val_accuracy: f64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub runs: Vec<RunStatus>,
    pub records: Vec<RunRecord>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Input `x` as the model expects it (images keep their `[c, s, s]` shape).
pub fn model_input(model: &Model, row: Tensor) -> Result<Tensor> {
    Ok(if model.is_vit() { row.reshape(&model.spec.input_dims)? } else { row })
}

struct RunKey {
    strategy: Strategy,
    lr: f64,
    seed: u64,
}

/// Attack and curvature measurements of a trained model on the leading
/// validation points.
pub fn measure(cfg: &SweepConfig, data: &Dataset, model: &Model, emit: &mut dyn FnMut(&str, &str, Option<usize>, f64)) -> Result<()> {
    let k = cfg.attack.samples.min(data.val.len());
    for method in &cfg.attack.methods {
        let name = method.to_string();
        for i in 0..k {
            let x = model_input(model, data.val.row(i))?;
            let rec = match method {
                ProbeMethod::Gradient(g) => not_r_gradient(model, *g, &x, &cfg.attack.gradient),
                ProbeMethod::Attention => not_r_attention(model, cfg.attack.layer, &x, &cfg.attack.attention),
            };
            match rec {
                Ok(r) => emit(&name, "not_r", Some(i), r.not_r),
                Err(icrlab::Error::DegenerateAttribution) => log::warn!("degenerate {name} map at probe {i}, skipped"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    if !cfg.curvature.enabled {
        return Ok(());
    }
    let k = cfg.curvature.samples.min(data.val.len());
    let mut ent: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut dist: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..k {
        let x = model_input(model, data.val.row(i))?;
        let lam = input_hessian_lambda_max(model, &x, target_class(model, &x)?)?;
        emit("input_hessian", "lambda_max", Some(i), lam.value);
        if model.is_vit() {
            let s = entropy_stats(model, &x)?;
            for (l, (e, d)) in s.entropy.iter().zip(&s.distance_to_uniform).enumerate() {
                ent.entry(l).or_default().push(*e);
                dist.entry(l).or_default().push(*d);
            }
        } else {
            match snr_c(model, &x) {
                Ok(c) => emit("snr", "snr_c", Some(i), c),
                Err(e) => log::warn!("snr at probe {i}: {e}"),
            }
        }
    }
    for (l, v) in &ent {
        emit("attention", &format!("entropy_l{l}"), None, mean(v));
        emit("attention", &format!("distance_to_uniform_l{l}"), None, mean(&dist[l]));
    }
    if model.is_vit() {
        for (l, s) in icrlab::curvature::attention_sigma(model)?.iter().enumerate() {
            emit("attention", &format!("sigma_l{l}"), None, *s);
        }
    }
    let batch = data.train.head(cfg.curvature.trace_samples).inputs;
    let tr = param_gn_trace(model, &batch, OutputCurvature::CrossEntropy, TraceMethod::Exact)?;
    emit("param_gn", "trace", None, tr);
    Ok(())
}

fn run_one(cfg: &SweepConfig, hash: &str, data: &Dataset, key: &RunKey) -> (RunStatus, Vec<RunRecord>) {
    let mut status = RunStatus {
        config_hash: hash.to_string(),
        seed: key.seed,
        strategy: key.strategy.label().to_string(),
        lr: key.lr,
        status: "error".into(),
        epochs: 0,
        final_loss: f64::NAN,
        val_accuracy: f64::NAN,
        message: String::new(),
    };
    let mut records = Vec::new();
    let result = (|| -> Result<()> {
        let model = Model::init(cfg.model_spec(data), key.seed)?;
        let tc = cfg.train_config(key.strategy, key.lr, key.seed);
        let TrainOutcome { model, trace } = sgd_train(&model, &data.train, None, &tc)?;
        status.status = trace.stop.to_string();
        status.epochs = trace.epochs.len();
        status.final_loss = trace.final_loss();
        status.val_accuracy = accuracy(&model, &data.val)?;
        if cfg.training.require_threshold && !trace.is_comparable() {
            log::warn!("{} lr={} seed={} stopped by {}, no comparison rows", status.strategy, key.lr, key.seed, trace.stop);
            return Ok(());
        }
        let mut emit = |method: &str, metric: &str, sample: Option<usize>, value: f64| {
            records.push(RunRecord {
                config_hash: hash.to_string(),
                seed: key.seed,
                strategy: status.strategy.clone(),
                lr: key.lr,
                method: method.to_string(),
                metric: metric.to_string(),
                sample,
                value,
            });
        };
        emit("-", "val_accuracy", None, status.val_accuracy);
        emit("-", "train_loss", None, status.final_loss);
        for p in &trace.probes {
            emit("probe", "lambda_max", Some(p.epoch), p.lambda_max);
            emit("probe", "gn_trace", Some(p.epoch), p.gn_trace_param);
            if let Some(e) = p.attention_entropy {
                emit("probe", "entropy_l0", Some(p.epoch), e);
            }
        }
        measure(cfg, data, &model, &mut emit)
    })();
    if let Err(e) = result {
        log::error!("run {} lr={} seed={} failed: {e}", status.strategy, key.lr, key.seed);
        if status.status != "error" {
            status.message = format!("measurement failed: {e}");
        } else {
            status.message = e.to_string();
        }
        records.clear();
    }
    (status, records)
}

/// Runs every (strategy, lr, seed) combination on a pool of `jobs` workers.
/// Results are merged in enumeration order, so they do not depend on `jobs`.
pub fn run_sweep(cfg: &SweepConfig, data: &Dataset, jobs: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let hash = cfg.hash();
    let keys: Vec<RunKey> = cfg
        .strategies
        .iter()
        .flat_map(|&strategy| {
            cfg.learning_rates
                .iter()
                .flat_map(move |&lr| cfg.seeds.iter().map(move |&seed| RunKey { strategy, lr, seed }))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<(RunStatus, Vec<RunRecord>)> =
        pool.install(|| keys.par_iter().map(|k| run_one(cfg, &hash, data, k)).collect());
    let failed = outcomes.iter().filter(|(s, _)| s.status == "error").count();
    if failed == outcomes.len() {
        return Err(CliError::AllRunsFailed(failed));
    }
    let mut result = SweepResult::default();
    for (s, r) in outcomes {
        result.runs.push(s);
        result.records.extend(r);
    }
    Ok(result)
}

pub fn write_runs(path: &Path, runs: &[RunStatus]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "seed", "strategy", "lr", "status", "epochs", "final_loss", "val_accuracy", "message"])?;
    for r in runs {
        w.write_record([
            r.config_hash.clone(),
            r.seed.to_string(),
            r.strategy.clone(),
            fmt_f64(r.lr),
            r.status.clone(),
            r.epochs.to_string(),
            fmt_f64(r.final_loss),
            fmt_f64(r.val_accuracy),
            r.message.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const RECORD_HEADER: [&str; 8] = ["config_hash", "seed", "strategy", "lr", "method", "metric", "sample", "value"];

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.config_hash.clone(),
            r.seed.to_string(),
            r.strategy.clone(),
            fmt_f64(r.lr),
            r.method.clone(),
            r.metric.clone(),
            r.sample.map_or(String::new(), |s| s.to_string()),
            fmt_f64(r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().ne(RECORD_HEADER) {
        return Err(CliError::Data(format!("{} does not have the record header", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| CliError::Data(format!("bad number `{s}`: {e}")));
    rd.records()
        .map(|row| {
            let row = row?;
            Ok(RunRecord {
                config_hash: row[0].to_string(),
                seed: row[1].parse().map_err(|e| CliError::Data(format!("bad seed: {e}")))?,
                strategy: row[2].to_string(),
                lr: num(&row[3])?,
                method: row[4].to_string(),
                metric: row[5].to_string(),
                sample: if row[6].is_empty() {
                    None
                } else {
                    Some(row[6].parse().map_err(|e| CliError::Data(format!("bad sample: {e}")))?)
                },
                value: num(&row[7])?,
            })
        })
        .collect()
}

/// `strategy@lr` label used for grouping.
fn arm(r: &RunRecord) -> String {
    format!("{}@{}", r.strategy, r.lr)
}

type Groups = BTreeMap<(String, String), BTreeMap<String, Vec<f64>>>;

/// Values per (method, metric) and arm, in first-appearance order of arms.
fn group(records: &[RunRecord]) -> (Groups, Vec<String>) {
    let mut arms: Vec<String> = Vec::new();
    let mut groups: Groups = BTreeMap::new();
    for r in records {
        let a = arm(r);
        if !arms.contains(&a) {
            arms.push(a.clone());
        }
        groups.entry((r.method.clone(), r.metric.clone())).or_default().entry(a).or_default().push(r.value);
    }
    (groups, arms)
}

/// Mean and sample standard deviation per arm, method and metric.
pub fn write_summary(path: &Path, records: &[RunRecord]) -> Result<()> {
    let (groups, arms) = group(records);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arm", "method", "metric", "n", "mean", "std"])?;
    for a in &arms {
        for ((method, metric), per_arm) in &groups {
            if let Some(v) = per_arm.get(a) {
                w.write_record([a.clone(), method.clone(), metric.clone(), v.len().to_string(), fmt_f64(mean(v)), fmt_f64(std_dev(v))])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Ranks of every arm on validation accuracy (higher is better) and on
/// each attack's ¬R (lower is better), plus the summed overall rank.
pub fn compute_ranks(records: &[RunRecord]) -> Result<Vec<(String, Vec<(String, usize)>)>> {
    let (groups, arms) = group(records);
    let mut out = Vec::new();
    for ((method, metric), per_arm) in &groups {
        let direction = match metric.as_str() {
            "val_accuracy" => Direction::HigherIsBetter,
            "not_r" => Direction::LowerIsBetter,
            _ => continue,
        };
        let list: Vec<(String, Vec<f64>)> =
            arms.iter().map(|a| (a.clone(), per_arm.get(a).cloned().unwrap_or_default())).collect();
        let label = if method == "-" { metric.clone() } else { format!("{metric}:{method}") };
        out.push((label, rank_methods(&list, direction)?));
    }
    Ok(out)
}

pub fn write_ranks(path: &Path, records: &[RunRecord]) -> Result<()> {
    let ranks = compute_ranks(records)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["arm", "criterion", "rank"])?;
    for (label, list) in &ranks {
        for (a, r) in list {
            w.write_record([a.as_str(), label.as_str(), &r.to_string()])?;
        }
    }
    let per_metric: Vec<Vec<(String, usize)>> = ranks.into_iter().map(|(_, l)| l).collect();
    for (a, sum, overall) in overall_ranks(&per_metric) {
        w.write_record([a, format!("overall_sum={sum}"), overall.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_xy(path: &Path, header: &str, rows: &[(f64, f64)]) -> Result<()> {
    let mut text = format!("# {header}\n");
    for (x, y) in rows {
        text.push_str(&format!("{} {}\n", fmt_f64(*x), fmt_f64(*y)));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Two-column plot data: learning rate against mean λ_max per strategy, and
/// per-run layer-0 entropy against mean attention ¬R.
pub fn write_plot_data(dir: &Path, records: &[RunRecord]) -> Result<()> {
    let mut lam: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut ent: BTreeMap<(String, u64, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let run = (r.strategy.clone(), r.lr.to_bits(), r.seed);
        match (r.method.as_str(), r.metric.as_str()) {
            ("input_hessian", "lambda_max") => lam.entry(r.strategy.clone()).or_default().entry(r.lr.to_bits()).or_default().push(r.value),
            ("attention", "entropy_l0") => ent.entry(run).or_default().0.push(r.value),
            ("attention", "not_r") => ent.entry(run).or_default().1.push(r.value),
            _ => {}
        }
    }
    for (strategy, per_lr) in &lam {
        let mut rows: Vec<(f64, f64)> = per_lr.iter().map(|(lr, v)| (f64::from_bits(*lr), mean(v))).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        write_xy(&dir.join(format!("plot_lr_lambda_max_{strategy}.dat")), "lr mean_lambda_max", &rows)?;
    }
    let rows: Vec<(f64, f64)> =
        ent.values().filter(|(e, n)| !e.is_empty() && !n.is_empty()).map(|(e, n)| (mean(e), mean(n))).collect();
    if !rows.is_empty() {
        write_xy(&dir.join("plot_entropy_not_r.dat"), "entropy_l0 mean_not_r_attention", &rows)?;
    }
    Ok(())
}

pub fn write_all(dir: &Path, result: &SweepResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_runs(&dir.join("runs.csv"), &result.runs)?;
    write_records(&dir.join("records.csv"), &result.records)?;
    write_report(dir, &result.records)
}

/// Summary, ranks and plot data derived from the records alone.
pub fn write_report(dir: &Path, records: &[RunRecord]) -> Result<()> {
    write_summary(&dir.join("summary.csv"), records)?;
    if !records.is_empty() {
        write_ranks(&dir.join("ranks.csv"), records)?;
    }
    write_plot_data(dir, records)
}
