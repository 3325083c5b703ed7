use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedunlearn::harness::presets::{self, PresetAction};
use fedunlearn::harness::run::{self, per_client_sweep, write_atomic, THREADS_ENV};
use fedunlearn::harness::{self, ExperimentConfig, SweepParam};
use fedunlearn::{Error, Result};

#[derive(Parser)]
#[command(name = "fedunlearn", version, about = "Federated unlearning simulator")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replicate count override.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model only.
    Train,
    /// Train, unlearn and write all artifacts.
    Unlearn,
    /// Like `unlearn`, and print the bound report.
    Bounds,
    /// One run per parameter value.
    Sweep {
        /// lambda, Lambda, alpha, T or P_J.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Run a bundled scenario.
    Preset {
        name: Option<String>,
        /// Print the preset configuration instead of running it.
        #[arg(long)]
        show: bool,
        /// List the available presets.
        #[arg(long)]
        list: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config PATH is required"))?;
    ExperimentConfig::from_path(path)
}

fn apply_overrides(cli: &Cli, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.replicates {
        cfg.replicates = r;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(out: &run::RunOutput) {
    let r = &out.report;
    println!("scenario {} mechanism {}", out.config.scenario, out.config.mechanism_name());
    println!("V = {:.6e}  S = {:.6e}  Q = {:.6e}", r.v, r.s, r.q);
    println!("V+S = {:.6e}  2V+Q = {:.6e}  Cq = {:.6e}", r.v_plus_s, r.two_v_plus_q, r.cq);
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
}

fn run_single(cfg: &ExperimentConfig, print_bounds: bool) -> Result<()> {
    let out = harness::execute(cfg)?;
    print_summary(&out);
    if print_bounds {
        let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Io(e.to_string()))?;
        println!("{json}");
    }
    Ok(())
}

fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    let (instance, traj) = run::run_training(cfg)?;
    let last = traj.records.last().expect("trajectory is never empty");
    println!("trained {} rounds: F(w_o) = {}", traj.len() - 1, last.global_loss);
    if let Some(dir) = &cfg.out_dir {
        let dir = Path::new(dir);
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        write_atomic(&dir.join("trajectory.csv"), &buf)?;
        let w = serde_json::json!({
            "w_o": traj.final_point(),
            "p": instance.spec.p(),
            "unlearn_set": instance.spec.unlearn_set(),
        });
        write_atomic(
            &dir.join("model.json"),
            serde_json::to_string_pretty(&w).map_err(|e| Error::Io(e.to_string()))?.as_bytes(),
        )?;
    }
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<()> {
    let rows = harness::sweep(cfg, param, values)?;
    print!("{}", run::sweep_table(param, &rows));
    Ok(())
}

fn run_preset(cli: &Cli, name: Option<&str>, show: bool, list: bool) -> Result<()> {
    if list || name.is_none() {
        for n in presets::names() {
            println!("{n}");
        }
        return Ok(());
    }
    let name = name.expect("checked above");
    if show {
        print!("{}", presets::find(name)?.text);
        return Ok(());
    }
    let (cfg, action) = presets::load(name)?;
    let mut cfg = apply_overrides(cli, cfg)?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(format!("out/{name}"));
    }
    match action {
        PresetAction::Single => run_single(&cfg, false),
        PresetAction::Sweep { param, values } => run_sweep(&cfg, param, &values),
        PresetAction::PerClient => {
            let rows = per_client_sweep(&cfg)?;
            print!("{}", run::impact_table(cfg.data.num_clients, &rows));
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => run_train(&apply_overrides(cli, load_config(cli)?)?),
        Command::Unlearn => run_single(&apply_overrides(cli, load_config(cli)?)?, false),
        Command::Bounds => run_single(&apply_overrides(cli, load_config(cli)?)?, true),
        Command::Sweep { param, values } => {
            let p = SweepParam::parse(param)?;
            run_sweep(&apply_overrides(cli, load_config(cli)?)?, p, values)
        }
        Command::Preset { name, show, list } => run_preset(cli, name.as_deref(), *show, *list),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = harness::with_threads(cli.threads, || dispatch(&cli)).and_then(|r| r);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
