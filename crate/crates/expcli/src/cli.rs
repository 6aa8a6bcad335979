use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use icrlab::curvature::{entropy_bound_oracle, entropy_grid};
use icrlab::models::Model;
use icrlab::training::{load_params, save_params, sgd_train, SwapMode, Strategy};

use crate::config::SweepConfig;
use crate::data::Dataset;
use crate::error::{CliError, Result};
use crate::sweep::{fmt_f64, measure, read_records, run_sweep, write_all, write_records, write_report, RunRecord};

#[derive(Debug, Parser)]
#[command(name = "icrlab", version, about = "Attribution robustness experiments at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed list with a single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Caps the number of dataset rows read.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the first strategy at the first learning rate and save a checkpoint.
    Train,
    /// Attack a checkpoint with the configured attribution methods.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Curvature and entropy probes of a checkpoint.
    Curvature {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Maximal deviation within the entropy superlevel sets of the simplex.
    EntropyOracle {
        #[arg(long, default_value_t = 3)]
        tokens: usize,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0.02)]
        step: f64,
    },
    /// Full strategy × learning-rate × seed sweep.
    Sweep,
    /// Recompute summary, ranks and plot data from `records.csv`.
    Report,
}

fn load_config(g: &GlobalArgs) -> Result<SweepConfig> {
    let path = g.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = SweepConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

/// Spec of the model as it is evaluated after training with `strategy`.
fn trained_model(cfg: &SweepConfig, data: &Dataset, strategy: Strategy, params: icrlab::models::ParamSet) -> Model {
    let mut model = Model { spec: cfg.model_spec(data), params };
    if let Strategy::Aar { target } | Strategy::Par { target } = strategy {
        model = icrlab::training::activation_swap(&model, target, SwapMode::Post);
    }
    model
}

fn checkpoint_path(g: &GlobalArgs, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| g.out_dir.join("model.ckpt"))
}

fn probe_checkpoint(g: &GlobalArgs, ckpt: &Option<PathBuf>, attack: bool, file: &str) -> Result<()> {
    let mut cfg = load_config(g)?;
    let data = cfg.dataset(g.limit)?;
    let params = load_params(checkpoint_path(g, ckpt))?;
    let model = trained_model(&cfg, &data, cfg.strategies[0], params);
    if attack {
        cfg.curvature.enabled = false;
    } else {
        cfg.attack.methods.clear();
    }
    let hash = cfg.hash();
    let mut records = Vec::new();
    measure(&cfg, &data, &model, &mut |method, metric, sample, value| {
        records.push(RunRecord {
            config_hash: hash.clone(),
            seed: cfg.seeds[0],
            strategy: cfg.strategies[0].label().to_string(),
            lr: cfg.learning_rates[0],
            method: method.into(),
            metric: metric.into(),
            sample,
            value,
        })
    })?;
    fs::create_dir_all(&g.out_dir)?;
    write_records(&g.out_dir.join(file), &records)?;
    println!("{} records written to {}", records.len(), g.out_dir.join(file).display());
    Ok(())
}

fn train(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let data = cfg.dataset(g.limit)?;
    let (strategy, lr, seed) = (cfg.strategies[0], cfg.learning_rates[0], cfg.seeds[0]);
    let model = Model::init(cfg.model_spec(&data), seed)?;
    let out = sgd_train(&model, &data.train, Some(&data.val), &cfg.train_config(strategy, lr, seed))?;
    fs::create_dir_all(&g.out_dir)?;
    save_params(g.out_dir.join("model.ckpt"), &out.model.params)?;
    let mut w = csv::Writer::from_path(g.out_dir.join("trace.csv"))?;
    w.write_record(["epoch", "lr", "train_loss", "val_accuracy"])?;
    for e in &out.trace.epochs {
        w.write_record([e.epoch.to_string(), fmt_f64(e.lr), fmt_f64(e.train_loss), e.val_accuracy.map_or(String::new(), fmt_f64)])?;
    }
    w.flush()?;
    println!(
        "{strategy} lr={lr} seed={seed}: {} after {} epochs, train loss {:.4}",
        out.trace.stop,
        out.trace.epochs.len(),
        out.trace.final_loss()
    );
    Ok(())
}

fn entropy_oracle(g: &GlobalArgs, tokens: usize, points: usize, step: f64) -> Result<()> {
    let grid = entropy_grid(tokens, points);
    let r = entropy_bound_oracle(tokens, &grid, step)?;
    fs::create_dir_all(&g.out_dir)?;
    let path = g.out_dir.join(format!("entropy_oracle_t{tokens}.dat"));
    let mut text = String::from("# ent_min max_deviation\n");
    for (e, m) in r.ent_min.iter().zip(&r.max_deviation) {
        text.push_str(&format!("{} {}\n", fmt_f64(*e), fmt_f64(*m)));
        println!("{e:.6} {m:.6}");
    }
    fs::write(&path, text)?;
    Ok(())
}

fn sweep(g: &GlobalArgs) -> Result<()> {
    let cfg = load_config(g)?;
    let data = cfg.dataset(g.limit)?;
    let jobs = g.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_sweep(&cfg, &data, jobs)?;
    write_all(&g.out_dir, &result)?;
    let failed = result.runs.iter().filter(|r| r.status == "error").count();
    println!(
        "config {}: {} runs ({} failed), {} records in {}",
        cfg.hash(),
        result.runs.len(),
        failed,
        result.records.len(),
        g.out_dir.display()
    );
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let records = read_records(&dir.join("records.csv"))?;
    write_report(dir, &records)?;
    print!("{}", fs::read_to_string(dir.join("summary.csv"))?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => train(g),
        Command::Attack { checkpoint } => probe_checkpoint(g, checkpoint, true, "attack.csv"),
        Command::Curvature { checkpoint } => probe_checkpoint(g, checkpoint, false, "curvature.csv"),
        Command::EntropyOracle { tokens, points, step } => entropy_oracle(g, *tokens, *points, *step),
        Command::Sweep => sweep(g),
        Command::Report => report(&g.out_dir),
    }
}
