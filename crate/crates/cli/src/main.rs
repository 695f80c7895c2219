use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Args, Parser, Subcommand};

use dpap::harness::{
    compare_runs, load_split, sweep_configs, Checkpoint, CsvSink, ExperimentConfig, Precision,
    RunMetrics, SweepPoint, SweepReport, Trainer,
};
use dpap::pruner::ElementKind;
use dpap::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "dpap", version, about = "Train spiking and conventional networks with adaptive pruning")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration.
    Train(TrainArgs),
    /// Compare two finished runs (B against reference A).
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Accuracy that counts as converged; defaults to A's best.
        #[arg(long)]
        baseline: Option<f64>,
    },
    /// Train over an epsilon × eta grid.
    Sweep(SweepArgs),
    /// Summarise a finished run.
    Report { run: PathBuf },
}

/// Every config key is also a flag; flags override the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_root: Option<String>,
    #[arg(long)]
    train_size: Option<String>,
    #[arg(long)]
    test_size: Option<String>,
    #[arg(long)]
    encoding: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    eval_batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    record_wall_time: Option<String>,
    #[arg(long)]
    time_steps: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    v_th: Option<String>,
    #[arg(long)]
    surrogate_width: Option<String>,
    #[arg(long)]
    detach_reset: Option<String>,
    #[arg(long)]
    dpap: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    c_conv: Option<String>,
    #[arg(long)]
    c_fc: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("engine", &self.engine),
            ("topology", &self.topology),
            ("precision", &self.precision),
            ("dataset", &self.dataset),
            ("data_root", &self.data_root),
            ("train_size", &self.train_size),
            ("test_size", &self.test_size),
            ("encoding", &self.encoding),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("eval_batch_size", &self.eval_batch_size),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("seed", &self.seed),
            ("record_wall_time", &self.record_wall_time),
            ("time_steps", &self.time_steps),
            ("lambda", &self.lambda),
            ("v_th", &self.v_th),
            ("surrogate_width", &self.surrogate_width),
            ("detach_reset", &self.detach_reset),
            ("dpap", &self.dpap),
            ("tau", &self.tau),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("epsilon", &self.epsilon),
            ("eta", &self.eta),
            ("c_conv", &self.c_conv),
            ("c_fc", &self.c_fc),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for metrics.csv, summary.json and checkpoints.
    #[arg(long, short, default_value = "runs/latest")]
    out: PathBuf,
    /// Also write `epoch-<n>.ckpt` every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint; its stored config wins over flags except
    /// `epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.7, 0.9])]
    epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 25.0, 50.0])]
    etas: Vec<f64>,
    #[arg(long, short, default_value = "runs/sweep")]
    out: PathBuf,
    /// Runs to execute at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_typed<S: Scalar>(mut cfg: ExperimentConfig, args: &TrainArgs) -> Result<RunMetrics> {
    let mut trainer = match &args.resume {
        Some(p) => {
            let t = Trainer::<S>::from_checkpoint(&Checkpoint::load(p)?)?;
            let epochs = cfg.epochs;
            cfg = t.config.clone();
            cfg.epochs = epochs;
            let mut t = t;
            t.config.epochs = epochs;
            t
        }
        None => Trainer::<S>::new(cfg.clone())?,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml_string())?;
    let (train, test) = load_split::<S>(&cfg)?;
    let mut sink = CsvSink::create(&args.out.join("metrics.csv"))?;
    for row in &trainer.metrics.rows {
        sink.push(row)?;
    }
    if trainer.metrics.rows.is_empty() {
        trainer.initial_row(&test, &mut (), Some(&mut sink))?;
        report_row(trainer.metrics.rows.last().expect("row"));
    }
    while trainer.epoch < cfg.epochs {
        trainer.train_epoch(&train, &test, &mut (), Some(&mut sink))?;
        report_row(trainer.metrics.rows.last().expect("row"));
        if let Some(n) = args.checkpoint_every {
            if n > 0 && trainer.epoch % n == 0 {
                let p = args.out.join(format!("epoch-{}.ckpt", trainer.epoch));
                trainer.to_checkpoint().save(&p)?;
            }
        }
    }
    trainer.to_checkpoint().save(&args.out.join("final.ckpt"))?;
    trainer.metrics.write_dir(&args.out)?;
    Ok(trainer.metrics)
}

fn report_row(r: &dpap::harness::MetricsRow) {
    eprintln!(
        "epoch {:>3}  loss {:>8.5}  acc {:.4}  retained {:>7}  pruned {:>6.2}%  ({} ms)",
        r.epoch,
        r.train_loss,
        r.test_acc,
        r.retained_params,
        100.0 * r.pruning_rate,
        r.wall_ms
    );
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let m = match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, args)?,
        Precision::F64 => train_typed::<f64>(cfg, args)?,
    };
    println!(
        "final accuracy {:.4}, pruning rate {:.4}, outputs in {}",
        m.final_accuracy(),
        m.final_pruning_rate(),
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, baseline: Option<f64>) -> Result<()> {
    let ra = RunMetrics::read_dir(a)?;
    let rb = RunMetrics::read_dir(b)?;
    print!("{}", compare_runs(&ra, &rb, baseline)?.to_text());
    Ok(())
}

fn spawn_train(cfg_path: &Path, out: &Path) -> Result<Child> {
    let exe = std::env::current_exe().map_err(|e| Error::Io {
        path: PathBuf::from("dpap"),
        source: e,
    })?;
    Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(cfg_path)
        .arg("--out")
        .arg(out)
        .spawn()
        .map_err(|e| Error::Io {
            path: out.to_path_buf(),
            source: e,
        })
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.cfg.resolve()?;
    let cfgs = sweep_configs(&base, &args.epsilons, &args.etas);
    let mut pending: Vec<(ExperimentConfig, PathBuf)> = Vec::new();
    for cfg in &cfgs {
        let dir = args.out.join(format!("eps{}-eta{}", cfg.epsilon, cfg.eta));
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_text(&dir.join("config.toml"), &cfg.to_toml_string())?;
        pending.push((cfg.clone(), dir));
    }
    let jobs = args.jobs.max(1);
    for group in pending.chunks(jobs) {
        let mut children = Vec::new();
        for (_, dir) in group {
            eprintln!("sweep: starting {}", dir.display());
            children.push((spawn_train(&dir.join("config.toml"), dir)?, dir));
        }
        for (mut child, dir) in children {
            let status = child.wait().map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            if !status.success() {
                return Err(Error::State(format!("sweep run {} failed: {status}", dir.display())));
            }
        }
    }
    let mut report = SweepReport::default();
    for (cfg, dir) in &pending {
        report.points.push(SweepPoint::from_run(cfg, &RunMetrics::read_dir(dir)?));
    }
    let table = report.to_table();
    write_text(&args.out.join("sweep.txt"), &table)?;
    write_text(
        &args.out.join("sweep.json"),
        &serde_json::to_string_pretty(&report).expect("plain data"),
    )?;
    print!("{table}");
    for (eta, ok) in report.monotone_in_epsilon() {
        println!(
            "eta {eta}: pruning rate {} in epsilon",
            if ok { "non-decreasing" } else { "NOT monotone" }
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let m = RunMetrics::read_dir(dir)?;
    let Some(last) = m.last() else {
        return Err(Error::State("run has no metrics rows".into()));
    };
    println!("run                {}", dir.display());
    println!("epochs             {}", last.epoch);
    println!("final accuracy     {:.4}", last.test_acc);
    if let Some((e, a)) = m.best() {
        println!("best accuracy      {a:.4} (epoch {e})");
    }
    println!(
        "parameters         {} of {} retained ({:.2}% pruned)",
        last.retained_params,
        m.total_params,
        100.0 * last.pruning_rate
    );
    println!(
        "pruned elements    {} synapses, {} neurons",
        m.events_of(ElementKind::Synapse).count(),
        m.events_of(ElementKind::Neuron).count()
    );
    if let Some(per_layer) = m.per_layer_retained.last() {
        let first = &m.per_layer_retained[0];
        for (k, (&now, &start)) in per_layer.iter().zip(first).enumerate() {
            println!("  layer {k:<2}         {now:>7} / {start:<7}");
        }
    }
    println!("silence violations {}", m.silent_violations);
    println!("mask violations    {}", m.mask_violations);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Compare {
            run_a,
            run_b,
            baseline,
        } => cmd_compare(run_a, run_b, *baseline),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report { run } => cmd_report(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
