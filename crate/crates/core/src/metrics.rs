//! Verification, stability and fairness metrics against exact optima, the
//! heterogeneity envelope fit, and evaluators for the trade-off and
//! convergence bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{FederationSpec, Trajectory};
use crate::linalg::{self, Matrix, ParamVector};
use crate::objectives::{exact_minimizer, quadratic_mixture, BatchSize};
use crate::rng::{self, tag};
use crate::unlearning::{MechanismKind, UnlearnResult};

/// Exact optima of an instance.
#[derive(Clone, Debug)]
pub struct Oracles {
    /// Minimizer of `F`.
    pub w_star: ParamVector,
    /// Minimizer of `F_{−J}`.
    pub w_rem_star: ParamVector,
    /// Minimizer of each `f_i`.
    pub local: Vec<ParamVector>,
}

impl Oracles {
    pub fn compute(spec: &FederationSpec) -> Result<Self> {
        let w_star = exact_minimizer(&spec.global_terms())?;
        let w_rem_star = exact_minimizer(&spec.remaining_terms())?;
        let local = spec
            .objectives()
            .iter()
            .map(|o| exact_minimizer(&[(o, 1.0)]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Oracles {
            w_star,
            w_rem_star,
            local,
        })
    }

    /// `F*_{−J}`.
    pub fn remaining_optimum(&self, spec: &FederationSpec) -> Result<f64> {
        spec.remaining_loss(&self.w_rem_star)
    }

    /// Largest norm among the client minimizers.
    pub fn farthest_local_norm(&self) -> f64 {
        self.local.iter().map(|w| w.norm()).fold(0.0, f64::max)
    }
}

/// `V = F_{−J}(w_u) − F_{−J}(w^{r*})`.
pub fn metric_v(spec: &FederationSpec, oracles: &Oracles, w_u: &ParamVector) -> Result<f64> {
    spec.remaining_gap(w_u, &oracles.w_rem_star)
}

/// `S = F(w_u) − F(w*)`.
pub fn metric_s(spec: &FederationSpec, oracles: &Oracles, w_u: &ParamVector) -> Result<f64> {
    spec.global_gap(w_u, &oracles.w_star)
}

/// `f_i(w_u) − f_i(w*)` for every client.
pub fn client_deltas(spec: &FederationSpec, oracles: &Oracles, w_u: &ParamVector) -> Result<Vec<f64>> {
    spec.objectives()
        .iter()
        .map(|o| o.loss_diff(w_u, &oracles.w_star))
        .collect()
}

/// Weighted mean absolute deviation `Σ p_i |Δ_i − Σ p_k Δ_k|`.
pub fn fairness_dispersion(weights: &[f64], deltas: &[f64]) -> f64 {
    let mean: f64 = weights.iter().zip(deltas).map(|(p, d)| p * d).sum();
    weights
        .iter()
        .zip(deltas)
        .map(|(p, d)| p * (d - mean).abs())
        .sum()
}

/// `Q`: dispersion of the remaining clients' utility changes relative to `w*`.
pub fn metric_q(spec: &FederationSpec, oracles: &Oracles, w_u: &ParamVector) -> Result<f64> {
    let deltas = client_deltas(spec, oracles, w_u)?;
    let rem: Vec<f64> = spec.remaining().iter().map(|&i| deltas[i]).collect();
    Ok(fairness_dispersion(spec.p_prime(), &rem))
}

/// Affine envelopes `y ≤ ζ² + β² x` of client gradient dispersion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityEstimate {
    pub zeta_sq: f64,
    pub beta_sq: f64,
    pub zeta_prime_sq: f64,
    pub beta_prime_sq: f64,
    /// RMS residual of the least-squares fit before inflation.
    pub residual: f64,
    pub residual_prime: f64,
    pub probes: usize,
}

/// Nonnegative least-squares fit of `y ≈ a + b x`, then `a` raised to the
/// smallest value that makes `a + b x_k ≥ y_k` at every point.
/// Returns `(a, b, rms residual of the fit)`.
pub fn fit_envelope(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len().min(y.len());
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let nf = n as f64;
    let sse = |a: f64, b: f64| -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| (yi - a - b * xi).powi(2))
            .sum()
    };
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let xx: f64 = x.iter().map(|xi| xi * xi).sum();
    let xy: f64 = x.iter().zip(y).map(|(xi, yi)| xi * yi).sum();

    let mut candidates = vec![(0.0, 0.0), (my.max(0.0), 0.0)];
    if xx > 0.0 {
        candidates.push((0.0, (xy / xx).max(0.0)));
    }
    if sxx > 0.0 {
        let b = sxy / sxx;
        let a = my - b * mx;
        if a >= 0.0 && b >= 0.0 {
            candidates.push((a, b));
        }
    }
    let (a_fit, b) = candidates
        .into_iter()
        .map(|(a, b)| (sse(a, b), (a, b)))
        .min_by(|l, r| l.0.total_cmp(&r.0))
        .map(|(_, ab)| ab)
        .expect("candidate list is nonempty");
    let residual = (sse(a_fit, b) / nf).sqrt();
    let a = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| yi - b * xi)
        .fold(0.0f64, f64::max);
    (a, b, residual)
}

/// Linearized surrogate `ĝ_J(w) = anchor + L (w − w^o)`.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub anchor: ParamVector,
    pub w_o: ParamVector,
    pub smoothness: f64,
}

impl Surrogate {
    pub fn at(&self, w: &ParamVector) -> Result<ParamVector> {
        let mut g = self.anchor.clone();
        g.axpy(self.smoothness, &w.sub(&self.w_o)?)?;
        Ok(g)
    }
}

/// `Σ p'_i ‖∇f_i(w) − ∇F_{−J}(w)‖²` and `‖∇F_{−J}(w)‖²`.
pub fn remaining_dispersion(spec: &FederationSpec, w: &ParamVector) -> Result<(f64, f64)> {
    let g = spec.remaining_grad(w)?;
    let mut y = 0.0;
    for (&i, &p) in spec.remaining().iter().zip(spec.p_prime()) {
        y += p * spec.objective(i).grad(w)?.dist_sq(&g)?;
    }
    Ok((y, g.norm_sq()))
}

/// Fits both heterogeneity envelopes over the probe points; the
/// between-group pair is zero when no surrogate is given.
pub fn estimate_heterogeneity(
    spec: &FederationSpec,
    probes: &[ParamVector],
    surrogate: Option<&Surrogate>,
) -> Result<HeterogeneityEstimate> {
    if probes.len() < 2 {
        return Err(Error::config("heterogeneity fit needs at least 2 probe points"));
    }
    let mut xs = Vec::with_capacity(probes.len());
    let mut ys = Vec::with_capacity(probes.len());
    let mut ys_prime = Vec::with_capacity(probes.len());
    for w in probes {
        let (y, x) = remaining_dispersion(spec, w)?;
        xs.push(x);
        ys.push(y);
        if let Some(s) = surrogate {
            ys_prime.push(s.at(w)?.dist_sq(&spec.remaining_grad(w)?)?);
        }
    }
    let (zeta_sq, beta_sq, residual) = fit_envelope(&xs, &ys);
    let (zeta_prime_sq, beta_prime_sq, residual_prime) = if surrogate.is_some() {
        fit_envelope(&xs, &ys_prime)
    } else {
        (0.0, 0.0, 0.0)
    };
    Ok(HeterogeneityEstimate {
        zeta_sq,
        beta_sq,
        zeta_prime_sq,
        beta_prime_sq,
        residual,
        residual_prime,
        probes: probes.len(),
    })
}

/// Probe set around `center`: the center, `±radius` along each axis, and
/// seeded random points in the ball, at least `min_count` in total.
pub fn default_probes(center: &ParamVector, radius: f64, min_count: usize, seed: u64) -> Vec<ParamVector> {
    use rand_distr::{Distribution, StandardNormal};
    let d = center.dim();
    let mut out = vec![center.clone()];
    for k in 0..d {
        for sign in [1.0, -1.0] {
            let mut w = center.clone();
            w.as_mut_slice()[k] += sign * radius;
            out.push(w);
        }
    }
    let mut r = rng::stream(seed, &[tag::INSTANCE, 0xB0]);
    let mut j = 0usize;
    while out.len() < min_count.max(8) {
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let scale = radius * (j % 3 + 1) as f64 / 3.0 / norm;
        let mut w = center.clone();
        for (wk, dk) in w.as_mut_slice().iter_mut().zip(dir) {
            *wk += scale * dk;
        }
        out.push(w);
        j += 1;
    }
    out
}

/// Step size `(1/(T√μ))·√((β−1)/min{μ(β−1), L(β−1)})`, returned with a flag
/// set when `β ≤ 1` leaves the expression ambiguous. For `β < 1` the
/// minimum is attained by the `L` branch; at `β = 1` the `β > 1` limit is used.
pub fn stability_learning_rate(mu: f64, smoothness: f64, beta: f64, rounds: usize) -> (f64, bool) {
    let t = rounds as f64;
    let d = beta - 1.0;
    let ratio = if d == 0.0 {
        1.0 / mu
    } else {
        d / (mu * d).min(smoothness * d)
    };
    ((1.0 / (t * mu.sqrt())) * ratio.sqrt(), beta <= 1.0)
}

/// `C₁` and its ingredients.
pub fn bound_c1(
    gap_star_rem: f64,
    gap_o_star: f64,
    beta_sq: f64,
    sigma_bar_sq: f64,
    zeta_bar_sq: f64,
    smoothness: f64,
    rounds: usize,
) -> f64 {
    let t = rounds as f64;
    (1.0 + (beta_sq - 1.0) / t) * (gap_star_rem + gap_o_star)
        + (sigma_bar_sq + zeta_bar_sq) / (2.0 * smoothness * t)
}

/// `C₂ = (P_J η T / 2)·div + δ`.
pub fn bound_c2(p_j: f64, eta: f64, rounds: usize, divergence_sq: f64, delta: f64) -> f64 {
    p_j * eta * rounds as f64 / 2.0 * divergence_sq + delta
}

/// `C_s = P_J/(√2 μ)·div + δ + C₁`.
pub fn bound_cs(p_j: f64, mu: f64, divergence_sq: f64, delta: f64, c1: f64) -> f64 {
    p_j / (std::f64::consts::SQRT_2 * mu) * divergence_sq + delta + c1
}

/// `C_q = F*_{−J} − Σ p'_i f_i(w_i*)`, accumulated as a sum of exact
/// per-client gaps.
pub fn bound_cq(spec: &FederationSpec, oracles: &Oracles) -> Result<f64> {
    spec.remaining()
        .iter()
        .zip(spec.p_prime())
        .try_fold(0.0, |acc, (&i, &p)| {
            Ok(acc
                + p * spec
                    .objective(i)
                    .loss_diff(&oracles.w_rem_star, &oracles.local[i])?)
        })
}

/// Inputs of the verification upper bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm4Inputs {
    pub smoothness: f64,
    pub rounds: usize,
    pub beta_sq: f64,
    pub zeta_sq: f64,
    pub sigma_sq: f64,
    pub zeta_prime_sq: f64,
    pub beta_prime_sq: f64,
    pub phi: f64,
    /// Largest squared-gradient ratio across a round.
    pub epsilon_ratio: f64,
    /// `F_{−J}(w^o) − F_{−J}(w^{r*})`.
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm4Output {
    pub chi1: f64,
    pub chi2: f64,
    pub zeta_dd_sq: f64,
    pub beta_dd_sq: f64,
    pub rounds_required: f64,
    pub rounds_ok: bool,
    /// The paired step size `η_l = η_g = 2/(LT)`.
    pub lr: f64,
}

pub fn bound_thm4(inp: &Thm4Inputs) -> Thm4Output {
    let l = inp.smoothness;
    let t = inp.rounds as f64;
    let zeta_dd_sq = inp.phi * inp.zeta_prime_sq;
    let beta_dd_sq = inp.phi * inp.epsilon_ratio * inp.beta_prime_sq + inp.phi * inp.epsilon_ratio + 1.0;
    let delta = (1.0 - 16.0 * l * (inp.beta_sq + 1.0)).max(0.0).sqrt();
    let delta_p = (1.0 - l * (beta_dd_sq + 1.0)).max(0.0).sqrt();
    let rounds_required = (2.0 * inp.beta_sq + 2.0)
        .max((1.0 + delta) / (4.0 * l))
        .max(0.5 * (beta_dd_sq + 1.0))
        .max((1.0 + delta_p) / l);
    let base1 = 1.0 - 1.0 / (2.0 * l * t) + (inp.beta_sq + 1.0) / (l * t * t);
    let base2 = 1.0 - 1.0 / (l * t) + (beta_dd_sq + 1.0) / (l * t * t);
    let chi1 = 0.5 * base1.powf(t) * inp.d + (inp.sigma_sq + inp.zeta_sq) / (2.0 * l * t);
    let chi2 = 0.5 * base2.powf(t) * inp.d + zeta_dd_sq / (2.0 * l * t);
    Thm4Output {
        chi1,
        chi2,
        zeta_dd_sq,
        beta_dd_sq,
        rounds_required,
        rounds_ok: t >= rounds_required,
        lr: 2.0 / (l * t),
    }
}

/// `(ε, ν)` for budget `Λ > 0`: `ε = (F_{−J}(w^o) − F*_{−J})/Λ`, `ν = 2ρ²Λ`.
pub fn bound_thm5(d: f64, budget: f64, rho: f64) -> Result<(f64, f64)> {
    if !(budget > 0.0) {
        return Err(Error::config("Lambda must be positive for the fairness bound"));
    }
    Ok((d / budget, 2.0 * rho * rho * budget))
}

/// `max_{i∉J, t} |f_i(w_t) − f_i(w^o) − ε|` over a trajectory.
pub fn measured_rho(spec: &FederationSpec, traj: &Trajectory, f_o: &[f64], epsilon: f64) -> f64 {
    traj.records
        .iter()
        .flat_map(|r| {
            spec.remaining()
                .iter()
                .map(move |&i| (r.client_losses[i] - f_o[i] - epsilon).abs())
        })
        .fold(0.0, f64::max)
}

/// Labeled terms of the convergence diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm3Terms {
    #[serde(rename = "B")]
    pub b: f64,
    pub v: f64,
    pub gamma_het: f64,
    pub step_beta: f64,
    pub step_gamma: f64,
    pub surcharge: f64,
    pub term_decay: f64,
    pub term_penalty: f64,
    pub term_distance: f64,
    pub rhs: f64,
    pub dist_rem_o_sq: f64,
    pub dist_rem_h_sq: f64,
    /// Measured `H(w_u) − H*`.
    pub h_gap: f64,
}

/// Inputs of the convergence diagnostic beyond the instance itself.
#[derive(Clone, Debug)]
pub struct Thm3Inputs {
    pub lambda: f64,
    pub smoothness: f64,
    pub mu: f64,
    pub grad_bound: f64,
    pub sigma_sq: f64,
    pub zeta_sq: f64,
    pub beta_sq: f64,
    pub zeta_prime_sq: f64,
    pub beta_prime_sq: f64,
    pub phi: f64,
    pub lr_global: f64,
    pub lr_local: f64,
    pub local_epochs: usize,
    pub rounds: usize,
}

/// Minimizer of `H(w) = (1+λ(1−P_J))F_{−J}(w) + λP_J(⟨∇F_J(w^o), w−w^o⟩ + (L/2)‖w−w^o‖²)`
/// for quadratic clients.
pub fn penalized_minimizer(
    spec: &FederationSpec,
    w_o: &ParamVector,
    lambda: f64,
    smoothness: f64,
) -> Result<ParamVector> {
    if !spec.all_quadratic() {
        return Err(Error::Unsupported(
            "penalized optimum is only available in closed form for quadratic clients".into(),
        ));
    }
    let (h_rem, c_rem) = quadratic_mixture(&spec.remaining_terms())?;
    let p = spec.p_j();
    let a = 1.0 + lambda * (1.0 - p);
    let k = lambda * p;
    let mut m = h_rem.scaled(a);
    m.add_scaled(k * smoothness, &Matrix::identity(spec.dim()))?;
    let anchor = spec.removed_grad(w_o)?;
    let rhs: Vec<f64> = (0..spec.dim())
        .map(|j| a * c_rem[j] - k * anchor[j] + k * smoothness * w_o[j])
        .collect();
    Ok(ParamVector::new(linalg::solve_spd(&m, &rhs)?))
}

fn penalized_value(
    spec: &FederationSpec,
    w_o: &ParamVector,
    lambda: f64,
    smoothness: f64,
    w: &ParamVector,
) -> Result<f64> {
    let p = spec.p_j();
    let diff = w.sub(w_o)?;
    let lin = spec.removed_grad(w_o)?.dot(&diff)?;
    Ok((1.0 + lambda * (1.0 - p)) * spec.remaining_loss(w)?
        + lambda * p * (lin + 0.5 * smoothness * diff.norm_sq()))
}

pub fn diag_thm3(
    spec: &FederationSpec,
    oracles: &Oracles,
    w_o: &ParamVector,
    w_u: &ParamVector,
    inp: &Thm3Inputs,
) -> Result<Thm3Terms> {
    let w_h = penalized_minimizer(spec, w_o, inp.lambda, inp.smoothness)?;
    let l = inp.smoothness;
    let gamma_het = bound_cq(spec, oracles)?;
    let e = inp.local_epochs as f64;
    let ratio = if inp.lr_local > 0.0 {
        inp.lr_global / inp.lr_local
    } else {
        0.0
    };
    let g2 = inp.grad_bound * inp.grad_bound;
    let surcharge = 2.0 * inp.phi * ratio * ratio * ((inp.beta_prime_sq + 1.0) * g2 + inp.zeta_prime_sq);
    let b = inp.sigma_sq
        + 6.0 * l * gamma_het
        + 8.0 * (inp.zeta_sq + (inp.beta_sq + 1.0) * g2) * (e - 1.0).powi(2)
        + surcharge;
    let step_beta = 5.0 / inp.mu;
    let step_gamma = 2.0 * step_beta * l;
    let dist_rem_o_sq = oracles.w_rem_star.dist_sq(w_o)?;
    let dist_rem_h_sq = oracles.w_rem_star.dist_sq(&w_h)?;
    let v = (step_beta * step_beta * b / (step_beta * inp.mu - 4.0))
        .max((step_gamma + 1.0) * dist_rem_o_sq);
    let p = spec.p_j();
    let term_decay = l * v / (step_gamma + inp.rounds as f64);
    let term_penalty = p * p * inp.lambda * inp.lambda * g2 / (2.0 * l);
    let term_distance = l / 2.0 * (dist_rem_o_sq + dist_rem_h_sq);
    let h_gap = penalized_value(spec, w_o, inp.lambda, l, w_u)?
        - penalized_value(spec, w_o, inp.lambda, l, &w_h)?;
    Ok(Thm3Terms {
        b,
        v,
        gamma_het,
        step_beta,
        step_gamma,
        surcharge,
        term_decay,
        term_penalty,
        term_distance,
        rhs: term_decay + term_penalty + term_distance,
        dist_rem_o_sq,
        dist_rem_h_sq,
        h_gap,
    })
}

/// Round-count estimate for an approximate saddle point with the unknown
/// constants set to 1; `None` when the estimate's denominator is not positive.
pub fn fairness_rounds(
    c_rt: f64,
    budget: f64,
    mu: f64,
    gamma: f64,
    dist_o_rem_sq: f64,
    nu: f64,
) -> (f64, Option<f64>) {
    let (m, kappa) = (1.0, 1.0);
    let c = 2.0 * c_rt / ((1.0 + budget) * mu) + (1.0 + budget) * mu * gamma / 2.0 * dist_o_rem_sq;
    let denom = nu * (gamma + 1.0) - 2.0 * kappa * c;
    let t = if denom > 0.0 && nu > 0.0 {
        Some((m / nu + 2.0 * kappa * c * (gamma - 1.0)) / denom)
    } else {
        None
    };
    (c, t)
}

/// Largest squared ratio `‖∇F_{−J}(end)‖² / ‖∇F_{−J}(start)‖²` over the rounds.
pub fn gradient_ratio(spec: &FederationSpec, res: &UnlearnResult) -> Result<f64> {
    let mut ratio = 0.0f64;
    if let Some(log) = &res.correction_log {
        for r in log {
            if r.grad_rem_start > 0.0 {
                ratio = ratio.max((r.grad_rem_aggregate / r.grad_rem_start).powi(2));
            }
        }
        return Ok(ratio);
    }
    let norms = res
        .trajectory
        .records
        .iter()
        .map(|r| spec.remaining_grad(&r.w).map(|g| g.norm_sq()))
        .collect::<Result<Vec<_>>>()?;
    for pair in norms.windows(2) {
        if pair[0] > 0.0 {
            ratio = ratio.max(pair[1] / pair[0]);
        }
    }
    Ok(ratio)
}

/// Mean over rounds of `Σ_{i∈S_t} α_i² Var_i(w_t)` for the configured batch.
pub fn trajectory_sigma_bar(spec: &FederationSpec, traj: &Trajectory, batch: BatchSize) -> Result<f64> {
    let rounds: Vec<_> = traj.records.windows(2).collect();
    if rounds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for pair in &rounds {
        let (start, end) = (&pair[0], &pair[1]);
        let mass: f64 = end.sampled.iter().map(|&i| spec.p()[i]).sum();
        for &i in &end.sampled {
            let o = spec.objective(i);
            let b = batch.resolve(o.n_samples());
            if b >= o.n_samples() || b == 0 {
                continue;
            }
            let a = spec.p()[i] / mass;
            total += a * a * o.batch_grad_variance(&start.w, b)?;
        }
    }
    Ok(total / rounds.len() as f64)
}

/// Mean over rounds of the remaining-client dispersion at the round start.
pub fn trajectory_zeta_bar(spec: &FederationSpec, traj: &Trajectory) -> Result<f64> {
    let n = traj.records.len().saturating_sub(1);
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in &traj.records[..n] {
        total += remaining_dispersion(spec, &r.w)?.0;
    }
    Ok(total / n as f64)
}

/// Source of `ζ̄²` in the first lower bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaSource {
    #[default]
    Trajectory,
    Envelope,
}

/// Run parameters the report needs besides the instance.
#[derive(Clone, Debug)]
pub struct ReportContext {
    pub rounds: usize,
    pub lr_local: f64,
    pub local_epochs: usize,
    pub batch: BatchSize,
    /// Penalty of the stability mechanism; 0 for the others.
    pub lambda: f64,
    pub lr_global: f64,
    /// Smoothness used in the surrogate; `None` for the remaining-client maximum.
    pub surrogate_smoothness: Option<f64>,
    /// Multiplier budget used for the fairness quantities.
    pub budget: f64,
    pub zeta_source: ZetaSource,
    /// Radius of the gradient-bound ball; `None` for 10× the farthest
    /// client minimizer norm.
    pub radius: Option<f64>,
    pub probe_seed: u64,
}

/// Every metric and bound of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mechanism: MechanismKind,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "V_plus_S")]
    pub v_plus_s: f64,
    #[serde(rename = "two_V_plus_Q")]
    pub two_v_plus_q: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "Cs")]
    pub cs: f64,
    #[serde(rename = "Cq")]
    pub cq: f64,
    pub chi1: f64,
    pub chi2: f64,
    pub delta: f64,
    pub epsilon_fair: f64,
    pub nu: f64,
    pub rho: f64,
    pub fairness_v_bound: f64,
    pub phi: f64,
    pub cos_theta_sq: f64,
    pub thm3_rhs_terms: Option<Thm3Terms>,
    pub sigma_bar_sq: f64,
    pub zeta_bar_sq: f64,
    pub zeta_bar_source: ZetaSource,
    pub zeta_bar_sq_trajectory: f64,
    pub mu: f64,
    #[serde(rename = "L")]
    pub smoothness: f64,
    #[serde(rename = "G")]
    pub grad_bound: f64,
    pub radius: f64,
    pub max_iterate_norm: f64,
    pub iterates_in_ball: bool,
    pub heterogeneity: HeterogeneityEstimate,
    pub divergence_sq: f64,
    pub gap_star_rem: f64,
    pub gap_o_star: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub lr_stability: f64,
    pub lr_stability_ambiguous: bool,
    pub c2_regime_ok: bool,
    pub thm4: Thm4Output,
    pub epsilon_ratio: f64,
    #[serde(rename = "Lambda")]
    pub budget: f64,
    pub fairness_c: f64,
    pub fairness_rounds: Option<f64>,
    pub terminated_early: bool,
}

impl BoundReport {
    /// Names of the numeric fields every report carries.
    pub const FIELDS: &'static [&'static str] = &[
        "V", "S", "Q", "C1", "C2", "Cs", "Cq", "chi1", "chi2", "delta", "epsilon_fair", "nu",
        "rho", "phi", "cos_theta_sq", "thm3_rhs_terms", "sigma_bar_sq", "zeta_bar_sq",
    ];

    /// True when every reported real is finite.
    pub fn all_finite(&self) -> bool {
        let core = [
            self.v,
            self.s,
            self.q,
            self.c1,
            self.c2,
            self.cs,
            self.cq,
            self.chi1,
            self.chi2,
            self.delta,
            self.epsilon_fair,
            self.nu,
            self.rho,
            self.phi,
            self.cos_theta_sq,
            self.sigma_bar_sq,
            self.zeta_bar_sq,
        ];
        core.iter().all(|v| v.is_finite())
    }
}

/// Evaluates all metrics and bounds for a finished run.
pub fn evaluate(
    spec: &FederationSpec,
    oracles: &Oracles,
    w_o: &ParamVector,
    res: &UnlearnResult,
    ctx: &ReportContext,
) -> Result<BoundReport> {
    if ctx.rounds == 0 {
        return Err(Error::config("bounds need at least one unlearning round"));
    }
    let w_u = &res.w_u;
    let v = metric_v(spec, oracles, w_u)?;
    let s = metric_s(spec, oracles, w_u)?;
    let q = metric_q(spec, oracles, w_u)?;

    let radius = ctx
        .radius
        .unwrap_or_else(|| 10.0 * oracles.farthest_local_norm())
        .max(f64::MIN_POSITIVE);
    let mut mu = f64::INFINITY;
    let mut smoothness = 0.0f64;
    let mut grad_bound = 0.0f64;
    for o in spec.objectives() {
        let c = o.constants(radius, ctx.batch)?;
        mu = mu.min(c.mu);
        smoothness = smoothness.max(c.smoothness);
        grad_bound = grad_bound.max(c.grad_bound);
    }
    let max_iterate_norm = res
        .trajectory
        .records
        .iter()
        .map(|r| r.w.norm())
        .fold(w_o.norm(), f64::max);

    let surrogate_smoothness = match ctx.surrogate_smoothness {
        Some(l) => l,
        None => crate::unlearning::remaining_smoothness(spec)?,
    };
    let anchor = spec.removed_grad(w_o)?;
    let surrogate = Surrogate {
        anchor: anchor.clone(),
        w_o: w_o.clone(),
        smoothness: surrogate_smoothness,
    };
    // Probes span the ball the unlearning iterates travel through.
    let probe_radius = (2.0 * w_o.dist_sq(&oracles.w_rem_star)?.sqrt()).max(1e-3);
    let probes = default_probes(&oracles.w_rem_star, probe_radius, 2 * spec.dim() + 8, ctx.probe_seed);
    let has_removed = !spec.unlearn_set().is_empty();
    let het = estimate_heterogeneity(spec, &probes, has_removed.then_some(&surrogate))?;

    let delta = spec.global_gap(w_o, &oracles.w_star)?;
    let gap_star_rem = spec.remaining_gap(&oracles.w_star, &oracles.w_rem_star)?;
    let gap_o_star = spec.remaining_gap(w_o, &oracles.w_star)?;
    let d = spec.remaining_gap(w_o, &oracles.w_rem_star)?;
    let divergence_sq = spec.remaining_grad(w_o)?.dist_sq(&anchor)?;

    let sigma_bar_sq = trajectory_sigma_bar(spec, &res.trajectory, ctx.batch)?;
    let zeta_traj = trajectory_zeta_bar(spec, &res.trajectory)?;
    let zeta_bar_sq = match ctx.zeta_source {
        ZetaSource::Trajectory => zeta_traj,
        ZetaSource::Envelope => het.zeta_sq,
    };
    let c1 = bound_c1(
        gap_star_rem,
        gap_o_star,
        het.beta_sq,
        sigma_bar_sq,
        zeta_bar_sq,
        smoothness,
        ctx.rounds,
    );
    let (lr_stability, lr_stability_ambiguous) =
        stability_learning_rate(mu, smoothness, het.beta_sq.sqrt(), ctx.rounds);
    let c2 = bound_c2(spec.p_j(), ctx.lr_local, ctx.rounds, divergence_sq, delta);
    let c2_regime_ok = ctx.lr_local > 0.0 && ctx.rounds as f64 >= mu / (ctx.lr_local * ctx.lr_local);
    let cs = bound_cs(spec.p_j(), mu, divergence_sq, delta, c1);
    let cq = bound_cq(spec, oracles)?;

    let lambda = if res.mechanism == MechanismKind::Stability {
        ctx.lambda
    } else {
        0.0
    };
    let cos_theta_sq = match &res.correction_log {
        Some(log) if !log.is_empty() => log.iter().map(|r| r.cos_theta * r.cos_theta).fold(0.0, f64::max),
        _ => {
            let g = spec.remaining_grad(w_o)?;
            let (na, ng) = (anchor.norm(), g.norm());
            if na > 0.0 && ng > 0.0 {
                (anchor.dot(&g)? / (na * ng)).clamp(-1.0, 1.0).powi(2)
            } else {
                0.0
            }
        }
    };
    let p_j = spec.p_j();
    let phi = lambda * lambda * p_j * p_j * (1.0 + cos_theta_sq);
    let epsilon_ratio = gradient_ratio(spec, res)?;
    let thm4 = bound_thm4(&Thm4Inputs {
        smoothness,
        rounds: ctx.rounds,
        beta_sq: het.beta_sq,
        zeta_sq: het.zeta_sq,
        sigma_sq: sigma_bar_sq,
        zeta_prime_sq: het.zeta_prime_sq,
        beta_prime_sq: het.beta_prime_sq,
        phi,
        epsilon_ratio,
        d,
    });

    let budget = if ctx.budget > 0.0 { ctx.budget } else { 1.0 };
    let (epsilon_fair, _) = bound_thm5(d, budget, 0.0)?;
    let epsilon = res.epsilon.unwrap_or(epsilon_fair);
    let f_o = spec.client_losses(w_o)?;
    let rho = measured_rho(spec, &res.trajectory, &f_o, epsilon);
    let (_, nu) = bound_thm5(d, budget, rho)?;

    let thm3_rhs_terms = if spec.all_quadratic() {
        Some(diag_thm3(
            spec,
            oracles,
            w_o,
            w_u,
            &Thm3Inputs {
                lambda,
                smoothness: surrogate_smoothness,
                mu,
                grad_bound,
                sigma_sq: sigma_bar_sq,
                zeta_sq: het.zeta_sq,
                beta_sq: het.beta_sq,
                zeta_prime_sq: het.zeta_prime_sq,
                beta_prime_sq: het.beta_prime_sq,
                phi,
                lr_global: ctx.lr_global,
                lr_local: ctx.lr_local,
                local_epochs: ctx.local_epochs,
                rounds: ctx.rounds,
            },
        )?)
    } else {
        None
    };
    let e = ctx.local_epochs as f64;
    let c_rt = sigma_bar_sq
        + 6.0 * smoothness * cq
        + 8.0 * (e - 1.0).powi(2) * (het.zeta_sq + (het.beta_sq + 1.0) * grad_bound * grad_bound);
    let step_gamma = 2.0 * (5.0 / mu) * smoothness;
    let (fairness_c, fairness_rounds) = fairness_rounds(
        c_rt,
        budget,
        mu,
        step_gamma,
        w_o.dist_sq(&oracles.w_rem_star)?,
        nu,
    );

    Ok(BoundReport {
        mechanism: res.mechanism,
        v,
        s,
        q,
        v_plus_s: v + s,
        two_v_plus_q: 2.0 * v + q,
        c1,
        c2,
        cs,
        cq,
        chi1: thm4.chi1,
        chi2: thm4.chi2,
        delta,
        epsilon_fair,
        nu,
        rho,
        fairness_v_bound: 2.0 * nu,
        phi,
        cos_theta_sq,
        thm3_rhs_terms,
        sigma_bar_sq,
        zeta_bar_sq,
        zeta_bar_source: ctx.zeta_source,
        zeta_bar_sq_trajectory: zeta_traj,
        mu,
        smoothness,
        grad_bound,
        radius,
        max_iterate_norm,
        iterates_in_ball: max_iterate_norm <= radius,
        heterogeneity: het,
        divergence_sq,
        gap_star_rem,
        gap_o_star,
        d,
        lr_stability,
        lr_stability_ambiguous,
        c2_regime_ok,
        thm4,
        epsilon_ratio,
        budget,
        fairness_c,
        fairness_rounds,
        terminated_early: res.terminated_early,
    })
}
