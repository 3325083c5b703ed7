//! FedAvg engine: weighted global objectives, client sampling, local training
//! and round aggregation.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ParamVector};
use crate::objectives::{BatchSize, Objective};
use crate::rng::{self, tag};

/// Loss level treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Slack on the `P_J ≤ 1/2` requirement, for weights that are exact halves
/// up to rounding.
const PJ_SLACK: f64 = 1e-12;

/// Client roster with aggregation weights and the unlearn set.
#[derive(Clone, Debug)]
pub struct FederationSpec {
    objectives: Vec<Objective>,
    p: Vec<f64>,
    unlearn: Vec<usize>,
    remaining: Vec<usize>,
    p_prime: Vec<f64>,
    p_j: f64,
}

/// Which clients may take part in a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Participants {
    All,
    Remaining,
}

impl FederationSpec {
    pub fn new(objectives: Vec<Objective>, p: Vec<f64>, unlearn: &[usize]) -> Result<Self> {
        let n = objectives.len();
        if n == 0 {
            return Err(Error::config("federation has no clients"));
        }
        if p.len() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: p.len(),
            });
        }
        let d = objectives[0].dim();
        if let Some(o) = objectives.iter().find(|o| o.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                actual: o.dim(),
            });
        }
        if p.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Weight("aggregation weights must be nonnegative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > linalg::WEIGHT_SUM_TOL {
            return Err(Error::Weight(format!("aggregation weights sum to {total}")));
        }
        let set: BTreeSet<usize> = unlearn.iter().copied().collect();
        if let Some(&bad) = set.iter().find(|&&j| j >= n) {
            return Err(Error::config(format!("unlearn client {bad} out of range 0..{n}")));
        }
        let unlearn: Vec<usize> = set.into_iter().collect();
        let remaining: Vec<usize> = (0..n).filter(|i| unlearn.binary_search(i).is_err()).collect();
        if remaining.is_empty() {
            return Err(Error::config("unlearn set covers every client"));
        }
        let p_j: f64 = unlearn.iter().map(|&j| p[j]).sum();
        if p_j > 0.5 + PJ_SLACK {
            return Err(Error::config(format!(
                "unlearned clients carry aggregation weight {p_j:.6} > 1/2"
            )));
        }
        let p_prime = remaining.iter().map(|&i| p[i] / (1.0 - p_j)).collect();
        Ok(FederationSpec {
            objectives,
            p,
            unlearn,
            remaining,
            p_prime,
            p_j,
        })
    }

    /// Same clients and weights, different unlearn set.
    pub fn with_unlearn_set(&self, unlearn: &[usize]) -> Result<Self> {
        Self::new(self.objectives.clone(), self.p.clone(), unlearn)
    }

    pub fn num_clients(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim(&self) -> usize {
        self.objectives[0].dim()
    }

    pub fn objective(&self, i: usize) -> &Objective {
        &self.objectives[i]
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn p_prime(&self) -> &[f64] {
        &self.p_prime
    }

    pub fn p_j(&self) -> f64 {
        self.p_j
    }

    pub fn unlearn_set(&self) -> &[usize] {
        &self.unlearn
    }

    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    pub fn all_quadratic(&self) -> bool {
        self.objectives.iter().all(|o| o.is_quadratic())
    }

    /// `(f_i, p_i)` over every client.
    pub fn global_terms(&self) -> Vec<(&Objective, f64)> {
        self.objectives.iter().zip(self.p.iter().copied()).collect()
    }

    /// `(f_i, p'_i)` over the remaining clients.
    pub fn remaining_terms(&self) -> Vec<(&Objective, f64)> {
        self.remaining
            .iter()
            .zip(&self.p_prime)
            .map(|(&i, &w)| (&self.objectives[i], w))
            .collect()
    }

    /// `(f_j, p_j / P_J)` over the unlearned clients; empty when nothing is unlearned.
    pub fn removed_terms(&self) -> Vec<(&Objective, f64)> {
        if self.unlearn.is_empty() || self.p_j == 0.0 {
            return Vec::new();
        }
        self.unlearn
            .iter()
            .map(|&j| (&self.objectives[j], self.p[j] / self.p_j))
            .collect()
    }

    fn mix_loss(terms: &[(&Objective, f64)], w: &ParamVector) -> Result<f64> {
        terms
            .iter()
            .try_fold(0.0, |acc, (o, wt)| Ok(acc + wt * o.loss(w)?))
    }

    fn mix_loss_diff(terms: &[(&Objective, f64)], u: &ParamVector, v: &ParamVector) -> Result<f64> {
        terms
            .iter()
            .try_fold(0.0, |acc, (o, wt)| Ok(acc + wt * o.loss_diff(u, v)?))
    }

    fn mix_grad(&self, terms: &[(&Objective, f64)], w: &ParamVector) -> Result<ParamVector> {
        let mut g = ParamVector::zeros(self.dim());
        for (o, wt) in terms {
            g.axpy(*wt, &o.grad(w)?)?;
        }
        Ok(g)
    }

    /// `F(w) = Σ p_i f_i(w)`.
    pub fn global_loss(&self, w: &ParamVector) -> Result<f64> {
        Self::mix_loss(&self.global_terms(), w)
    }

    /// `F_{−J}(w) = Σ_{i∉J} p'_i f_i(w)`.
    pub fn remaining_loss(&self, w: &ParamVector) -> Result<f64> {
        Self::mix_loss(&self.remaining_terms(), w)
    }

    /// `F_J(w) = Σ_{j∈J} (p_j/P_J) f_j(w)`; zero when `J` is empty.
    pub fn removed_loss(&self, w: &ParamVector) -> Result<f64> {
        Self::mix_loss(&self.removed_terms(), w)
    }

    /// `F(u) − F(v)`, exact for quadratic clients.
    pub fn global_gap(&self, u: &ParamVector, v: &ParamVector) -> Result<f64> {
        Self::mix_loss_diff(&self.global_terms(), u, v)
    }

    /// `F_{−J}(u) − F_{−J}(v)`, exact for quadratic clients.
    pub fn remaining_gap(&self, u: &ParamVector, v: &ParamVector) -> Result<f64> {
        Self::mix_loss_diff(&self.remaining_terms(), u, v)
    }

    pub fn global_grad(&self, w: &ParamVector) -> Result<ParamVector> {
        self.mix_grad(&self.global_terms(), w)
    }

    pub fn remaining_grad(&self, w: &ParamVector) -> Result<ParamVector> {
        self.mix_grad(&self.remaining_terms(), w)
    }

    pub fn removed_grad(&self, w: &ParamVector) -> Result<ParamVector> {
        self.mix_grad(&self.removed_terms(), w)
    }

    /// `f_i(w)` for every client.
    pub fn client_losses(&self, w: &ParamVector) -> Result<Vec<f64>> {
        self.objectives.iter().map(|o| o.loss(w)).collect()
    }

    fn eligible(&self, who: Participants) -> Vec<usize> {
        match who {
            Participants::All => (0..self.num_clients()).collect(),
            Participants::Remaining => self.remaining.clone(),
        }
    }
}

/// FedAvg hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    /// Local passes over the client's data per round; a full-batch pass is one
    /// gradient step.
    pub local_epochs: usize,
    pub lr_local: f64,
    pub batch: BatchSize,
    pub sample_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be >= 1"));
        }
        if !(self.lr_local >= 0.0 && self.lr_local.is_finite()) {
            return Err(Error::config("lr_local must be a finite value >= 0"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::config("sample_fraction must be in (0, 1]"));
        }
        if let BatchSize::Samples(0) = self.batch {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(())
    }

    /// Warnings for step sizes outside the `η_l ≤ 1/L` regime.
    pub fn warnings(&self, smoothness: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.lr_local * smoothness > 1.0 {
            out.push(format!(
                "lr_local = {} exceeds 1/L = {}",
                self.lr_local,
                1.0 / smoothness
            ));
        }
        out
    }
}

/// One point of a training or unlearning run.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub w: ParamVector,
    pub global_loss: f64,
    pub remaining_loss: f64,
    pub client_losses: Vec<f64>,
    /// Clients sampled in the round that produced `w` (empty for the initial point).
    pub sampled: Vec<usize>,
}

/// Sequence of round records, including the initial point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
}

impl Trajectory {
    pub fn final_point(&self) -> &ParamVector {
        &self.records.last().expect("trajectory is never empty").w
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn record(
        &mut self,
        spec: &FederationSpec,
        round: usize,
        w: ParamVector,
        sampled: Vec<usize>,
    ) -> Result<()> {
        let client_losses = spec.client_losses(&w)?;
        let global_loss = spec
            .p()
            .iter()
            .zip(&client_losses)
            .fold(0.0, |acc, (p, f)| acc + p * f);
        let remaining_loss = spec
            .remaining()
            .iter()
            .zip(spec.p_prime())
            .fold(0.0, |acc, (&i, p)| acc + p * client_losses[i]);
        if !global_loss.is_finite() || global_loss > DIVERGENCE_LOSS || !w.is_finite() {
            return Err(Error::Divergence {
                round,
                loss: global_loss,
            });
        }
        self.records.push(RoundRecord {
            round,
            w,
            global_loss,
            remaining_loss,
            client_losses,
            sampled,
        });
        Ok(())
    }

    /// CSV with header `round,F,F_rem,f_0..f_{N−1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.records.first().map(|r| r.client_losses.len()).unwrap_or(0);
        let mut header = String::from("round,F,F_rem");
        for i in 0..n {
            header.push_str(&format!(",f_{i}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.records {
            let mut line = format!("{},{},{}", r.round, r.global_loss, r.remaining_loss);
            for f in &r.client_losses {
                line.push_str(&format!(",{f}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Result of one aggregation round.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub aggregate: ParamVector,
    pub sampled: Vec<usize>,
    /// `α_i = p_i / Σ_{k∈S} p_k`, aligned with `sampled`.
    pub alpha: Vec<f64>,
}

/// Draws the participating set for `round`: uniform without replacement,
/// `⌈fraction·m⌉` of the `m` eligible clients, returned in index order.
pub fn sample_clients(
    spec: &FederationSpec,
    cfg: &TrainConfig,
    who: Participants,
    round: usize,
) -> Result<Vec<usize>> {
    let eligible = spec.eligible(who);
    if eligible.is_empty() {
        return Err(Error::Sampling { round });
    }
    let m = eligible.len();
    let k = ((cfg.sample_fraction * m as f64).ceil() as usize).clamp(1, m);
    if k == m {
        return Ok(eligible);
    }
    let mut r = rng::stream(cfg.seed, &[tag::SAMPLER, round as u64]);
    let mut picked: Vec<usize> = index::sample(&mut r, m, k)
        .into_iter()
        .map(|j| eligible[j])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Local training: `local_epochs` passes of (mini-batch) gradient descent,
/// each step scaled by `step_multiplier`.
pub fn local_train(
    objective: &Objective,
    start: &ParamVector,
    cfg: &TrainConfig,
    client: usize,
    round: usize,
    step_multiplier: f64,
) -> Result<ParamVector> {
    let n = objective.n_samples();
    let b = cfg.batch.resolve(n).min(n);
    let steps_per_epoch = if b == 0 { 1 } else { n.div_ceil(b) };
    let mut rng = rng::client_stream(cfg.seed, client, round);
    let mut w = start.clone();
    let step = cfg.lr_local * step_multiplier;
    for _ in 0..cfg.local_epochs {
        for _ in 0..steps_per_epoch {
            let g = if b >= n {
                objective.grad(&w)?
            } else {
                objective.stochastic_grad(&w, b, &mut rng)?
            };
            w.axpy(-step, &g)?;
        }
    }
    Ok(w)
}

/// One FedAvg round with per-client step multipliers.
pub fn fedavg_round_with<M>(
    w_t: &ParamVector,
    spec: &FederationSpec,
    cfg: &TrainConfig,
    who: Participants,
    round: usize,
    step_multiplier: M,
) -> Result<RoundOutput>
where
    M: Fn(usize) -> f64 + Sync,
{
    let sampled = sample_clients(spec, cfg, who, round)?;
    let mass: f64 = sampled.iter().map(|&i| spec.p()[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::Sampling { round });
    }
    let alpha: Vec<f64> = sampled.iter().map(|&i| spec.p()[i] / mass).collect();
    let models = sampled
        .par_iter()
        .map(|&i| local_train(spec.objective(i), w_t, cfg, i, round, step_multiplier(i)))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&models, &alpha)?;
    Ok(RoundOutput {
        aggregate,
        sampled,
        alpha,
    })
}

/// `Σ α_i w_i`, accumulated in client order.
fn aggregate(models: &[ParamVector], alpha: &[f64]) -> Result<ParamVector> {
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() <= linalg::WEIGHT_SUM_TOL {
        return linalg::weighted_sum(models, alpha);
    }
    Err(Error::Weight(format!("round weights sum to {total}")))
}

/// One FedAvg round: local training on the sampled clients followed by the
/// `α`-weighted average.
pub fn fedavg_round(
    w_t: &ParamVector,
    spec: &FederationSpec,
    cfg: &TrainConfig,
    who: Participants,
    round: usize,
) -> Result<RoundOutput> {
    fedavg_round_with(w_t, spec, cfg, who, round, |_| 1.0)
}

/// Runs `cfg.rounds` FedAvg rounds from `init` over the chosen participants.
pub fn run_fedavg(
    spec: &FederationSpec,
    cfg: &TrainConfig,
    who: Participants,
    init: ParamVector,
) -> Result<Trajectory> {
    cfg.validate()?;
    if init.dim() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            actual: init.dim(),
        });
    }
    let mut traj = Trajectory::default();
    traj.record(spec, 0, init, Vec::new())?;
    for t in 0..cfg.rounds {
        let out = fedavg_round(traj.final_point(), spec, cfg, who, t)?;
        traj.record(spec, t + 1, out.aggregate, out.sampled)?;
    }
    Ok(traj)
}

/// Trains the original model over all clients; the final point is `w^o`.
pub fn train(spec: &FederationSpec, cfg: &TrainConfig, init: ParamVector) -> Result<Trajectory> {
    run_fedavg(spec, cfg, Participants::All, init)
}
