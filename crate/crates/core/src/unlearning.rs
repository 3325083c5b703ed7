//! Unlearning mechanisms: exact retraining, continued training on the
//! remaining clients, the stability-penalized gradient correction and the
//! fairness-constrained multiplier scheme.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    fedavg_round, fedavg_round_with, FederationSpec, Participants, TrainConfig, Trajectory,
};
use crate::linalg::{self, ParamVector};
use crate::objectives::{exact_minimizer, BatchSize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Retrain,
    Continue,
    Stability,
    Fairness,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Retrain => "retrain",
            MechanismKind::Continue => "continue",
            MechanismKind::Stability => "stability",
            MechanismKind::Fairness => "fairness",
        }
    }
}

/// Vector the penalty is projected against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionBase {
    /// Exact gradient of the sampled remaining objective at the aggregate.
    #[default]
    ExactGradient,
    /// `(w_t − w̄) / (η_l E)`.
    PseudoGradient,
}

/// Anchor gradient of the linearized surrogate `ĝ_J`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateBase {
    /// `∇F_J(w^o)`.
    #[default]
    Unlearned,
    /// `∇F_{−J}(w^o)`.
    Remaining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub lambda: f64,
    pub lr_global: f64,
    /// Smoothness used in `ĝ_J`; `None` means the largest smoothness among
    /// the remaining clients.
    #[serde(default)]
    pub smoothness: Option<f64>,
    #[serde(default)]
    pub projection: ProjectionBase,
    #[serde(default)]
    pub surrogate: SurrogateBase,
}

impl StabilityConfig {
    pub fn new(lambda: f64, lr_global: f64) -> Self {
        StabilityConfig {
            lambda,
            lr_global,
            smoothness: None,
            projection: ProjectionBase::default(),
            surrogate: SurrogateBase::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be a finite value >= 0"));
        }
        if !(self.lr_global >= 0.0 && self.lr_global.is_finite()) {
            return Err(Error::config("lr_global must be a finite value >= 0"));
        }
        if let Some(l) = self.smoothness {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config("smoothness must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessConfig {
    /// Multiplier budget `Λ`.
    #[serde(rename = "Lambda")]
    pub budget: f64,
    /// Regret threshold; `None` means `(F_{−J}(w^o) − F*_{−J}) / Λ`.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl FairnessConfig {
    fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::config("Lambda must be a finite value >= 0"));
        }
        if let Some(e) = self.epsilon {
            if !e.is_finite() {
                return Err(Error::config("epsilon must be finite"));
            }
        }
        Ok(())
    }
}

/// Per-round record of the gradient correction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectionRecord {
    pub round: usize,
    pub gc_norm: f64,
    pub gc_dot_gs: f64,
    /// Cosine between `ĝ_J` and the projection base.
    pub cos_theta: f64,
    pub g_hat_norm: f64,
    pub g_s_norm: f64,
    /// `λ² P_J² (1 + cos²θ)`.
    pub phi: f64,
    /// `‖∇F_{−J}‖` at the round start and at the aggregate.
    pub grad_rem_start: f64,
    pub grad_rem_aggregate: f64,
}

/// Per-round record of the multiplier scheme.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FairnessRecord {
    pub round: usize,
    pub max_regret: f64,
    pub mu_sum: f64,
    /// Multipliers of the remaining clients after the round.
    pub mu: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct UnlearnResult {
    pub mechanism: MechanismKind,
    pub w_u: ParamVector,
    pub trajectory: Trajectory,
    pub correction_log: Option<Vec<CorrectionRecord>>,
    pub fairness_log: Option<Vec<FairnessRecord>>,
    pub terminated_early: bool,
    /// Threshold used by the fairness mechanism.
    pub epsilon: Option<f64>,
    pub deviations: Vec<String>,
}

impl UnlearnResult {
    fn plain(mechanism: MechanismKind, trajectory: Trajectory) -> Self {
        UnlearnResult {
            mechanism,
            w_u: trajectory.final_point().clone(),
            trajectory,
            correction_log: None,
            fairness_log: None,
            terminated_early: false,
            epsilon: None,
            deviations: Vec::new(),
        }
    }

    /// CSV of the correction log; `None` for other mechanisms.
    pub fn write_correction_csv<W: Write>(&self, mut out: W) -> Result<bool> {
        let Some(log) = &self.correction_log else {
            return Ok(false);
        };
        writeln!(
            out,
            "round,gc_norm,gc_dot_gs,cos_theta,g_hat_norm,g_s_norm,phi,grad_rem_start,grad_rem_aggregate"
        )?;
        for r in log {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                r.gc_norm,
                r.gc_dot_gs,
                r.cos_theta,
                r.g_hat_norm,
                r.g_s_norm,
                r.phi,
                r.grad_rem_start,
                r.grad_rem_aggregate
            )?;
        }
        Ok(true)
    }

    /// CSV of the fairness log; `None` for other mechanisms.
    pub fn write_fairness_csv<W: Write>(&self, remaining: &[usize], mut out: W) -> Result<bool> {
        let Some(log) = &self.fairness_log else {
            return Ok(false);
        };
        let mut header = String::from("round,max_regret,mu_sum");
        for i in remaining {
            header.push_str(&format!(",mu_{i}"));
        }
        writeln!(out, "{header}")?;
        for r in log {
            let mut line = format!("{},{},{}", r.round, r.max_regret, r.mu_sum);
            for m in &r.mu {
                line.push_str(&format!(",{m}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(true)
    }
}

fn require_unlearn_set(spec: &FederationSpec) -> Result<()> {
    if spec.unlearn_set().is_empty() {
        return Err(Error::config("unlearn set is empty"));
    }
    Ok(())
}

fn check_dim(spec: &FederationSpec, w: &ParamVector) -> Result<()> {
    if w.dim() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            actual: w.dim(),
        });
    }
    Ok(())
}

/// Largest smoothness constant among the remaining clients.
pub fn remaining_smoothness(spec: &FederationSpec) -> Result<f64> {
    spec.remaining().iter().try_fold(0.0f64, |acc, &i| {
        Ok(acc.max(spec.objective(i).constants(1.0, BatchSize::Full)?.smoothness))
    })
}

/// FedAvg from the zero vector over the remaining clients; yields `w^r`.
pub fn exact_retrain(spec: &FederationSpec, cfg: &TrainConfig) -> Result<UnlearnResult> {
    require_unlearn_set(spec)?;
    let traj = crate::federation::run_fedavg(
        spec,
        cfg,
        Participants::Remaining,
        ParamVector::zeros(spec.dim()),
    )?;
    Ok(UnlearnResult::plain(MechanismKind::Retrain, traj))
}

/// FedAvg over the remaining clients starting from the trained model.
pub fn continue_unlearn(
    spec: &FederationSpec,
    cfg: &TrainConfig,
    w_o: &ParamVector,
) -> Result<UnlearnResult> {
    check_dim(spec, w_o)?;
    let traj = crate::federation::run_fedavg(spec, cfg, Participants::Remaining, w_o.clone())?;
    Ok(UnlearnResult::plain(MechanismKind::Continue, traj))
}

/// Continued training with an orthogonalized stability correction after
/// each aggregation. Unlearned clients are queried once, at `w^o`.
pub fn stability_unlearn(
    spec: &FederationSpec,
    cfg: &TrainConfig,
    scfg: &StabilityConfig,
    w_o: &ParamVector,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    scfg.validate()?;
    check_dim(spec, w_o)?;
    let lambda = scfg.lambda;
    let p_j = spec.p_j();
    let l_used = match scfg.smoothness {
        Some(l) => l,
        None => remaining_smoothness(spec)?,
    };
    let anchor = match scfg.surrogate {
        SurrogateBase::Unlearned => spec.removed_grad(w_o)?,
        SurrogateBase::Remaining => spec.remaining_grad(w_o)?,
    };
    let tau = linalg::projection_tau(spec.dim());

    let mut traj = Trajectory::default();
    traj.record(spec, 0, w_o.clone(), Vec::new())?;
    let mut log = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let w_t = traj.final_point().clone();
        let out = fedavg_round(&w_t, spec, cfg, Participants::Remaining, t)?;
        let w_bar = out.aggregate;

        let g_s = match scfg.projection {
            ProjectionBase::ExactGradient => {
                let mut g = ParamVector::zeros(spec.dim());
                for (&i, &a) in out.sampled.iter().zip(&out.alpha) {
                    g.axpy(a, &spec.objective(i).grad(&w_bar)?)?;
                }
                g
            }
            ProjectionBase::PseudoGradient => {
                let denom = cfg.lr_local * cfg.local_epochs as f64;
                if denom > 0.0 {
                    w_t.sub(&w_bar)?.scaled(1.0 / denom)
                } else {
                    ParamVector::zeros(spec.dim())
                }
            }
        };
        let mut g_hat = anchor.clone();
        g_hat.axpy(l_used, &w_bar.sub(w_o)?)?;

        let mut h = g_s.scaled(lambda * (1.0 - p_j));
        h.axpy(lambda * p_j, &g_hat)?;
        let g_c = orth_or_zero(&h, &g_s, lambda)?;

        let g_s_norm = g_s.norm();
        let g_hat_norm = g_hat.norm();
        let cos_theta = if g_s.norm_sq() > tau && g_hat_norm > 0.0 {
            (g_hat.dot(&g_s)? / (g_hat_norm * g_s_norm)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        log.push(CorrectionRecord {
            round: t,
            gc_norm: g_c.norm(),
            gc_dot_gs: g_c.dot(&g_s)?,
            cos_theta,
            g_hat_norm,
            g_s_norm,
            phi: lambda * lambda * p_j * p_j * (1.0 + cos_theta * cos_theta),
            grad_rem_start: spec.remaining_grad(&w_t)?.norm(),
            grad_rem_aggregate: spec.remaining_grad(&w_bar)?.norm(),
        });

        let mut w_next = w_bar;
        if lambda > 0.0 {
            w_next.axpy(-scfg.lr_global, &g_c)?;
        }
        traj.record(spec, t + 1, w_next, out.sampled)?;
    }
    let mut res = UnlearnResult::plain(MechanismKind::Stability, traj);
    res.correction_log = Some(log);
    if scfg.surrogate == SurrogateBase::Remaining {
        res.deviations
            .push("surrogate anchored at the remaining-clients gradient".into());
    }
    if scfg.projection == ProjectionBase::PseudoGradient {
        res.deviations
            .push("projection against the round pseudo-gradient".into());
    }
    Ok(res)
}

fn orth_or_zero(h: &ParamVector, g: &ParamVector, lambda: f64) -> Result<ParamVector> {
    if lambda == 0.0 {
        return Ok(ParamVector::zeros(h.dim()));
    }
    linalg::orth_residual(h, g)
}

/// Multipliers `μ_i = Λ e^{r_i} / (1 + Σ_k e^{r_k})`, evaluated with a
/// shifted exponent so large regrets do not overflow.
pub fn softmax_multipliers(budget: f64, regrets: &[f64]) -> Vec<f64> {
    let m = regrets.iter().copied().fold(0.0f64, f64::max);
    let denom = (-m).exp() + regrets.iter().map(|r| (r - m).exp()).sum::<f64>();
    regrets.iter().map(|r| budget * (r - m).exp() / denom).collect()
}

/// Continued training where each remaining client's local step is scaled by
/// `1 + μ_i`, with multipliers driven by the regret `f_i(w) − f_i(w^o)`.
/// Stops once every sampled client's regret at the new aggregate is at most
/// `ε`.
pub fn fairness_unlearn(
    spec: &FederationSpec,
    cfg: &TrainConfig,
    fcfg: &FairnessConfig,
    w_o: &ParamVector,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    fcfg.validate()?;
    check_dim(spec, w_o)?;
    let budget = fcfg.budget;
    if budget == 0.0 {
        let mut res = continue_unlearn(spec, cfg, w_o)?;
        res.mechanism = MechanismKind::Fairness;
        res.fairness_log = Some(Vec::new());
        return Ok(res);
    }
    let epsilon = match fcfg.epsilon {
        Some(e) => e,
        None => {
            let w_rs = exact_minimizer(&spec.remaining_terms())?;
            spec.remaining_gap(w_o, &w_rs)?.max(0.0) / budget
        }
    };
    let n = spec.num_clients();
    let remaining = spec.remaining().to_vec();
    let f_o = spec.client_losses(w_o)?;
    let mut regret = vec![0.0; n];
    let mut mu = vec![0.0; n];

    let mut traj = Trajectory::default();
    traj.record(spec, 0, w_o.clone(), Vec::new())?;
    let mut log = Vec::new();
    let mut terminated_early = false;
    for t in 0..cfg.rounds {
        let w_t = traj.final_point().clone();
        let out = fedavg_round_with(&w_t, spec, cfg, Participants::Remaining, t, |i| 1.0 + mu[i])?;
        traj.record(spec, t + 1, out.aggregate, out.sampled.clone())?;
        let losses = &traj.records.last().expect("just recorded").client_losses;
        let mut max_regret = f64::NEG_INFINITY;
        for &i in &out.sampled {
            regret[i] = losses[i] - f_o[i];
            max_regret = max_regret.max(regret[i]);
        }
        if max_regret <= epsilon {
            log.push(FairnessRecord {
                round: t,
                max_regret,
                mu_sum: remaining.iter().map(|&i| mu[i]).sum(),
                mu: remaining.iter().map(|&i| mu[i]).collect(),
            });
            terminated_early = true;
            break;
        }
        let r: Vec<f64> = remaining.iter().map(|&i| regret[i]).collect();
        for (&i, m) in remaining.iter().zip(softmax_multipliers(budget, &r)) {
            mu[i] = m;
        }
        log.push(FairnessRecord {
            round: t,
            max_regret,
            mu_sum: remaining.iter().map(|&i| mu[i]).sum(),
            mu: remaining.iter().map(|&i| mu[i]).collect(),
        });
    }
    let mut res = UnlearnResult::plain(MechanismKind::Fairness, traj);
    res.fairness_log = Some(log);
    res.terminated_early = terminated_early;
    res.epsilon = Some(epsilon);
    res.deviations
        .push("local step scaled by (1 + mu_i) times the client gradient".into());
    res.deviations
        .push("termination checked on regrets at the new aggregate".into());
    Ok(res)
}
