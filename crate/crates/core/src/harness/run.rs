//! Experiment orchestration: instance construction, training, unlearning,
//! evaluation, replicates, sweeps and artifact output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{resolve_unlearn_set, ExperimentConfig, MechanismSection, ModelKind};
use crate::datagen::{self, ClientDataset, Partition};
use crate::error::{Error, Result};
use crate::federation::{self, FederationSpec, Trajectory};
use crate::linalg::ParamVector;
use crate::metrics::{self, BoundReport, Oracles, ReportContext};
use crate::objectives::{BatchSize, LogisticObjective, Objective, QuadraticObjective};
use crate::rng::{derive_seed, tag};
use crate::unlearning::{self, UnlearnResult};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "FEDUNLEARN_THREADS";

/// A generated federation ready to train.
#[derive(Clone, Debug)]
pub struct Instance {
    pub datasets: Vec<ClientDataset>,
    pub spec: FederationSpec,
    /// Largest client smoothness constant.
    pub smoothness: f64,
}

fn client_objective(cfg: &ExperimentConfig, ds: &ClientDataset) -> Result<Objective> {
    match cfg.model.kind {
        ModelKind::Quadratic => {
            let labeled = datagen::label_for_regression(ds, cfg.data.num_classes)?;
            let targets = labeled
                .targets
                .expect("regression labels attach targets")
                .into_iter()
                .map(|t| t * cfg.model.target_scale)
                .collect();
            Ok(Objective::Quadratic(QuadraticObjective::new(
                ds.features.clone(),
                targets,
                cfg.model.ridge,
            )?))
        }
        ModelKind::Logistic => {
            let labels = ds.labels.iter().map(|l| (l % 2) as f64).collect();
            Ok(Objective::Logistic(LogisticObjective::new(
                ds.features.clone(),
                labels,
                cfg.model.ridge,
            )?))
        }
    }
}

/// Generates data and builds the federation described by `cfg`.
pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    let datasets = datagen::generate(&cfg.synthetic_spec())?;
    let objectives = datasets
        .iter()
        .map(|d| client_objective(cfg, d))
        .collect::<Result<Vec<_>>>()?;
    let p = datagen::aggregation_weights(&datasets)?;
    let unlearn = resolve_unlearn_set(cfg, &p)?;
    let spec = FederationSpec::new(objectives, p, &unlearn)?;
    let smoothness = spec.objectives().iter().try_fold(0.0f64, |acc, o| {
        Ok::<_, Error>(acc.max(o.constants(1.0, BatchSize::Full)?.smoothness))
    })?;
    Ok(Instance {
        datasets,
        spec,
        smoothness,
    })
}

/// Resolved numeric settings of a run, recorded in the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub smoothness_max: f64,
    pub lr_train: f64,
    pub lr_unlearn: f64,
    pub lr_global: Option<f64>,
    pub unlearn_set: Vec<usize>,
    pub p_j: f64,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub train: u64,
    pub unlearn: u64,
    pub probes: u64,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub instance: Instance,
    pub oracles: Oracles,
    pub train: Trajectory,
    pub w_o: ParamVector,
    /// Result of the first replicate.
    pub result: UnlearnResult,
    pub report: BoundReport,
    /// Mean `f_i(w_u) − f_i(w*)` per client over replicates.
    pub deltas: Vec<f64>,
    pub resolved: Resolved,
    pub seeds: Seeds,
    pub warnings: Vec<String>,
    pub elapsed_ms: u128,
}

fn replicate_seed(base: u64, r: usize) -> u64 {
    if r == 0 {
        base
    } else {
        derive_seed(base, &[tag::REPLICATE, r as u64])
    }
}

fn run_mechanism(
    cfg: &ExperimentConfig,
    spec: &FederationSpec,
    tcfg: &federation::TrainConfig,
    smoothness: f64,
    w_o: &ParamVector,
) -> Result<UnlearnResult> {
    match &cfg.mechanism {
        MechanismSection::Retrain => unlearning::exact_retrain(spec, tcfg),
        MechanismSection::Continue => unlearning::continue_unlearn(spec, tcfg, w_o),
        MechanismSection::Stability { .. } => {
            let s = cfg.mechanism.stability_config(smoothness)?.expect("stability section");
            unlearning::stability_unlearn(spec, tcfg, &s, w_o)
        }
        MechanismSection::Fairness { .. } => {
            let f = cfg.mechanism.fairness_config().expect("fairness section");
            unlearning::fairness_unlearn(spec, tcfg, &f, w_o)
        }
    }
}

/// Trains `w^o`, runs the mechanism (with replicates), and evaluates every
/// metric and bound. Performs no file output.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let instance = build_instance(cfg).map_err(|e| e.in_stage("datagen"))?;
    let spec = &instance.spec;
    let l_max = instance.smoothness;

    let train_cfg = cfg
        .train
        .to_train_config(l_max, cfg.train_seed())
        .map_err(|e| e.in_stage("config"))?;
    let mut warnings = cfg.warnings();
    warnings.extend(train_cfg.warnings(l_max));
    let train = federation::train(spec, &train_cfg, ParamVector::zeros(spec.dim()))
        .map_err(|e| e.in_stage("train"))?;
    let w_o = train.final_point().clone();
    let oracles = Oracles::compute(spec).map_err(|e| e.in_stage("oracles"))?;

    let unlearn_base = cfg
        .unlearn
        .to_train_config(l_max, cfg.unlearn_seed())
        .map_err(|e| e.in_stage("config"))?;
    warnings.extend(unlearn_base.warnings(l_max));
    let results = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut t = unlearn_base.clone();
            t.seed = replicate_seed(unlearn_base.seed, r);
            run_mechanism(cfg, spec, &t, l_max, &w_o)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("unlearn"))?;

    let stability = cfg
        .mechanism
        .stability_config(l_max)
        .map_err(|e| e.in_stage("config"))?;
    let ctx = ReportContext {
        rounds: unlearn_base.rounds,
        lr_local: unlearn_base.lr_local,
        local_epochs: unlearn_base.local_epochs,
        batch: unlearn_base.batch,
        lambda: stability.as_ref().map_or(0.0, |s| s.lambda),
        lr_global: stability.as_ref().map_or(0.0, |s| s.lr_global),
        surrogate_smoothness: stability.as_ref().and_then(|s| s.smoothness),
        budget: cfg.report_budget(),
        zeta_source: cfg.report.zeta_source,
        radius: cfg.report.radius,
        probe_seed: cfg.probe_seed(),
    };
    let mut report = metrics::evaluate(spec, &oracles, &w_o, &results[0], &ctx)
        .map_err(|e| e.in_stage("bounds"))?;

    let n = spec.num_clients();
    let mut deltas = vec![0.0; n];
    let mut v = 0.0;
    let mut s = 0.0;
    for res in &results {
        let d = metrics::client_deltas(spec, &oracles, &res.w_u).map_err(|e| e.in_stage("bounds"))?;
        for (acc, x) in deltas.iter_mut().zip(d) {
            *acc += x;
        }
        v += metrics::metric_v(spec, &oracles, &res.w_u).map_err(|e| e.in_stage("bounds"))?;
        s += metrics::metric_s(spec, &oracles, &res.w_u).map_err(|e| e.in_stage("bounds"))?;
    }
    let r = results.len() as f64;
    deltas.iter_mut().for_each(|x| *x /= r);
    if results.len() > 1 {
        let rem: Vec<f64> = spec.remaining().iter().map(|&i| deltas[i]).collect();
        report.v = v / r;
        report.s = s / r;
        report.q = metrics::fairness_dispersion(spec.p_prime(), &rem);
        report.v_plus_s = report.v + report.s;
        report.two_v_plus_q = 2.0 * report.v + report.q;
    }

    let resolved = Resolved {
        smoothness_max: l_max,
        lr_train: train_cfg.lr_local,
        lr_unlearn: unlearn_base.lr_local,
        lr_global: stability.as_ref().map(|s| s.lr_global),
        unlearn_set: spec.unlearn_set().to_vec(),
        p_j: spec.p_j(),
        p: spec.p().to_vec(),
    };
    let seeds = Seeds {
        master: cfg.seed,
        data: cfg.data_seed(),
        train: train_cfg.seed,
        unlearn: unlearn_base.seed,
        probes: cfg.probe_seed(),
    };
    if !report.iterates_in_ball {
        warnings.push(format!(
            "iterates left the gradient-bound ball (max norm {} > radius {})",
            report.max_iterate_norm, report.radius
        ));
    }
    let result = results.into_iter().next().expect("at least one replicate");
    Ok(RunOutput {
        config: cfg.clone(),
        oracles,
        train,
        w_o,
        result,
        report,
        deltas,
        resolved,
        seeds,
        warnings,
        elapsed_ms: start.elapsed().as_millis(),
        instance,
    })
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    mechanism: &'a str,
    config: &'a ExperimentConfig,
    seeds: &'a Seeds,
    replicates: usize,
    resolved: &'a Resolved,
    deviations: Vec<String>,
    warnings: &'a [String],
    terminated_early: bool,
    timing: Timing,
    version: &'static str,
}

#[derive(Serialize)]
struct Timing {
    elapsed_ms: u128,
}

pub const SUMMARY_HEADER: &str = "V,S,Q,V_plus_S,two_V_plus_Q";

fn summary_values(r: &BoundReport) -> String {
    format!("{},{},{},{},{}", r.v, r.s, r.q, r.v_plus_s, r.two_v_plus_q)
}

/// `trajectory.csv` holds the unlearning trajectory; `train_trajectory.csv`
/// the original training run.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    out.result.trajectory.write_csv(&mut buf)?;
    write_atomic(&dir.join("trajectory.csv"), &buf)?;

    buf.clear();
    out.train.write_csv(&mut buf)?;
    write_atomic(&dir.join("train_trajectory.csv"), &buf)?;

    buf.clear();
    if out.result.write_correction_csv(&mut buf)? {
        write_atomic(&dir.join("correction.csv"), &buf)?;
    }
    buf.clear();
    if out
        .result
        .write_fairness_csv(out.instance.spec.remaining(), &mut buf)?
    {
        write_atomic(&dir.join("fairness.csv"), &buf)?;
    }

    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(&dir.join("bounds.json"), json.as_bytes())?;

    let summary = format!(
        "scenario,mechanism,{SUMMARY_HEADER},Cq,C1,C2,Cs,chi1,chi2,delta\n{},{},{},{},{},{},{},{},{},{}\n",
        out.config.scenario,
        out.config.mechanism_name(),
        summary_values(&out.report),
        out.report.cq,
        out.report.c1,
        out.report.c2,
        out.report.cs,
        out.report.chi1,
        out.report.chi2,
        out.report.delta
    );
    write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;

    let mut deviations = out.result.deviations.clone();
    if out.report.lr_stability_ambiguous {
        deviations.push("heterogeneity slope <= 1: first lower bound step size ambiguous".into());
    }
    let manifest = Manifest {
        scenario: &out.config.scenario,
        mechanism: out.config.mechanism_name(),
        config: &out.config,
        seeds: &out.seeds,
        replicates: out.config.replicates,
        resolved: &out.resolved,
        deviations,
        warnings: &out.warnings,
        terminated_early: out.result.terminated_early,
        timing: Timing {
            elapsed_ms: out.elapsed_ms,
        },
        version: env!("CARGO_PKG_VERSION"),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

/// Runs the experiment and writes artifacts when `out_dir` is set.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    if let Some(dir) = &cfg.out_dir {
        write_artifacts(&out, Path::new(dir)).map_err(|e| e.in_stage("artifacts"))?;
    }
    Ok(out)
}

/// Runs `f` on a pool of `threads` workers; `None` consults the
/// environment and otherwise uses the global pool.
pub fn with_threads<T, F>(threads: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let threads = match threads {
        Some(k) => Some(k),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer")))?,
            ),
            Err(_) => None,
        },
    };
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::config("thread count must be >= 1")),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Parameters a sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Budget,
    Alpha,
    Rounds,
    UnlearnWeight,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lambda" => Ok(SweepParam::Lambda),
            "Lambda" => Ok(SweepParam::Budget),
            "alpha" => Ok(SweepParam::Alpha),
            "T" => Ok(SweepParam::Rounds),
            "P_J" => Ok(SweepParam::UnlearnWeight),
            other => Err(Error::config(format!(
                "unknown sweep parameter '{other}' (expected lambda, Lambda, alpha, T or P_J)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Budget => "Lambda",
            SweepParam::Alpha => "alpha",
            SweepParam::Rounds => "T",
            SweepParam::UnlearnWeight => "P_J",
        }
    }
}

/// Copy of `cfg` with one parameter set.
pub fn apply_param(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParam::Lambda => match &mut c.mechanism {
            MechanismSection::Stability { lambda, .. } => *lambda = value,
            _ => return Err(Error::config("lambda sweep needs the stability mechanism")),
        },
        SweepParam::Budget => match &mut c.mechanism {
            MechanismSection::Fairness { budget, .. } => *budget = value,
            _ => return Err(Error::config("Lambda sweep needs the fairness mechanism")),
        },
        SweepParam::Alpha => match &mut c.data.partition {
            Partition::Dirichlet { alpha } => *alpha = value,
            _ => return Err(Error::config("alpha sweep needs a Dirichlet partition")),
        },
        SweepParam::Rounds => {
            if !(value >= 0.0 && value.fract() == 0.0) {
                return Err(Error::config("T values must be nonnegative integers"));
            }
            c.unlearn.rounds = value as usize;
        }
        SweepParam::UnlearnWeight => {
            c.unlearn_set = None;
            c.unlearn_weight = Some(value);
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub report: BoundReport,
}

/// One run per value; per-value artifacts go to `out_dir/<param>=<value>`
/// and the table to `out_dir/summary.csv`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = apply_param(cfg, param, v)?;
            c.out_dir = cfg
                .out_dir
                .as_ref()
                .map(|d| PathBuf::from(d).join(format!("{}={}", param.name(), v)).display().to_string());
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, &v)| execute(c).map(|o| SweepRow { value: v, report: o.report }))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.out_dir {
        let dir = Path::new(dir);
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("summary.csv"), sweep_table(param, &rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn sweep_table(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},{SUMMARY_HEADER}\n", param.name());
    for r in rows {
        out.push_str(&format!("{},{}\n", r.value, summary_values(&r.report)));
    }
    out
}

/// Per-client impact of unlearning each client in turn.
#[derive(Clone, Debug)]
pub struct ClientImpact {
    pub unlearned: usize,
    pub report: BoundReport,
    pub deltas: Vec<f64>,
}

/// Unlearns each client alone, one run per client.
pub fn per_client_sweep(cfg: &ExperimentConfig) -> Result<Vec<ClientImpact>> {
    let n = cfg.data.num_clients;
    let rows = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut c = cfg.clone();
            c.unlearn_set = Some(vec![j]);
            c.unlearn_weight = None;
            c.out_dir = cfg
                .out_dir
                .as_ref()
                .map(|d| PathBuf::from(d).join(format!("client_{j}")).display().to_string());
            execute(&c).map(|o| ClientImpact {
                unlearned: j,
                report: o.report,
                deltas: o.deltas,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.out_dir {
        let dir = Path::new(dir);
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("summary.csv"), impact_table(n, &rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn impact_table(n: usize, rows: &[ClientImpact]) -> String {
    let mut out = format!("unlearned,{SUMMARY_HEADER}");
    for i in 0..n {
        out.push_str(&format!(",df_{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.unlearned, summary_values(&r.report)));
        for d in &r.deltas {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
    }
    out
}

/// Generates the instance and trains `w^o` only.
pub fn run_training(cfg: &ExperimentConfig) -> Result<(Instance, Trajectory)> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let instance = build_instance(cfg).map_err(|e| e.in_stage("datagen"))?;
    let train_cfg = cfg
        .train
        .to_train_config(instance.smoothness, cfg.train_seed())
        .map_err(|e| e.in_stage("config"))?;
    let traj = federation::train(&instance.spec, &train_cfg, ParamVector::zeros(instance.spec.dim()))
        .map_err(|e| e.in_stage("train"))?;
    Ok((instance, traj))
}
