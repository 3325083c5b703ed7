//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured quantities, then asserts.

mod common;

use common::{full_batch, median, random_quadratic, remaining_l, trained, verdict};
use fedunlearn::federation::FederationSpec;
use fedunlearn::harness::config::{BatchSpec, MechanismSection, StepSize};
use fedunlearn::harness::presets;
use fedunlearn::harness::run::{apply_param, run_experiment, with_threads, write_artifacts, SweepParam};
use fedunlearn::harness::ExperimentConfig;
use fedunlearn::linalg::{Matrix, ParamVector};
use fedunlearn::metrics::{
    bound_cq, estimate_heterogeneity, evaluate, default_probes, metric_q, metric_v, Oracles,
    ReportContext, ZetaSource,
};
use fedunlearn::objectives::{exact_minimizer, BatchSize, LogisticObjective, Objective, QuadraticObjective};
use fedunlearn::rng;
use fedunlearn::unlearning::{
    continue_unlearn, exact_retrain, fairness_unlearn, stability_unlearn, FairnessConfig,
    StabilityConfig, UnlearnResult,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn with_mechanism(cfg: &ExperimentConfig, m: MechanismSection) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.mechanism = m;
    c
}

fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c
}

// 1 ------------------------------------------------------------------------

#[test]
fn criterion_01_verification_fairness_inequality() {
    const TOL: f64 = 1e-8;
    const T: usize = 300;
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut worst = (0.0f64, 0u64, "", 0.0, 0.0);
    for k in 0..100u64 {
        let inst = random_quadratic(1000 + k);
        let spec = &inst.spec;
        let oracles = Oracles::compute(spec).unwrap();
        let w_o = trained(&inst, T);
        let cq = bound_cq(spec, &oracles).unwrap();
        let cfg = full_batch(T, 1.0 / inst.smoothness, 7);
        let l = remaining_l(spec);
        let runs: Vec<UnlearnResult> = vec![
            exact_retrain(spec, &cfg).unwrap(),
            continue_unlearn(spec, &cfg, &w_o).unwrap(),
            stability_unlearn(spec, &cfg, &StabilityConfig::new(1.0, 1.0 / l), &w_o).unwrap(),
            fairness_unlearn(
                spec,
                &cfg,
                &FairnessConfig {
                    budget: 1.0,
                    epsilon: None,
                },
                &w_o,
            )
            .unwrap(),
        ];
        for res in &runs {
            let v = metric_v(spec, &oracles, &res.w_u).unwrap();
            let q = metric_q(spec, &oracles, &res.w_u).unwrap();
            let lhs = 2.0 * v + q;
            checked += 1;
            if lhs < cq - TOL {
                violations += 1;
                let gap = cq - lhs;
                if gap > worst.0 {
                    worst = (gap, 1000 + k, res.mechanism.name(), lhs, cq);
                }
            }
        }
    }
    let ok = violations == 0;
    println!(
        "criterion 1: {} 2V+Q >= Cq - {TOL:e}: {violations}/{checked} violations; worst seed {} ({}) 2V+Q = {:.6e} vs Cq = {:.6e}",
        verdict(ok),
        worst.1,
        worst.2,
        worst.3,
        worst.4
    );
    assert!(ok, "{violations} of {checked} runs have 2V+Q < Cq");
}

// 2 ------------------------------------------------------------------------

#[test]
fn criterion_02_homogeneity_collapse() {
    let cfg = presets::config("homogeneous").unwrap();
    let out = run_experiment(&cfg).unwrap();
    let r = &out.report;
    let ok = r.cq <= 1e-10 && r.q <= 1e-6 && r.gap_star_rem <= 1e-10 && r.divergence_sq <= 1e-8;
    println!(
        "criterion 2: {} Cq = {:.3e} (<= 1e-10), Q = {:.3e} (<= 1e-6), gap(w*, w^r*) = {:.3e} (<= 1e-10), divergence = {:.3e} (<= 1e-8)",
        verdict(ok),
        r.cq,
        r.q,
        r.gap_star_rem,
        r.divergence_sq
    );
    assert!(ok);
}

// 3 ------------------------------------------------------------------------

#[test]
fn criterion_03_verification_convergence() {
    const T: usize = 500;
    let mut failures = Vec::new();
    let mut worst_ratio = 0.0f64;
    let mut worst_dist = 0.0f64;
    for k in 0..20u64 {
        let inst = random_quadratic(3000 + k);
        let spec = &inst.spec;
        let oracles = Oracles::compute(spec).unwrap();
        let w_o = trained(&inst, 300);
        let cfg = full_batch(T, 1.0 / inst.smoothness, 3);
        let res = continue_unlearn(spec, &cfg, &w_o).unwrap();
        let vs: Vec<f64> = res
            .trajectory
            .records
            .iter()
            .map(|r| spec.remaining_gap(&r.w, &oracles.w_rem_star).unwrap())
            .collect();
        let v0 = vs[0];
        let monotone = vs.windows(2).all(|w| w[1] <= w[0] + 1e-12 * v0);
        let ratio = vs[T] / v0;
        worst_ratio = worst_ratio.max(ratio);
        let retrain = exact_retrain(spec, &cfg).unwrap();
        let dist = retrain.w_u.dist_sq(&oracles.w_rem_star).unwrap().sqrt();
        worst_dist = worst_dist.max(dist);
        if !monotone || ratio > 1e-6 || dist > 1e-6 {
            failures.push((3000 + k, monotone, ratio, dist));
        }
    }
    let ok = failures.is_empty();
    println!(
        "criterion 3: {} 20 instances: worst V(500)/V(0) = {worst_ratio:.3e} (<= 1e-6), worst retrain distance = {worst_dist:.3e} (<= 1e-6), failures {:?}",
        verdict(ok),
        failures
    );
    assert!(ok);
}

// 4 ------------------------------------------------------------------------

#[test]
fn criterion_04_correction_structure() {
    let cfg = presets::config("two-group").unwrap();
    let out = run_experiment(&cfg).unwrap();
    let log = out.result.correction_log.as_ref().unwrap();
    let mut worst_orth = 0.0f64;
    let mut worst_norm = f64::NEG_INFINITY;
    for rec in log {
        let scale = rec.gc_norm * rec.g_s_norm;
        if scale > 0.0 {
            worst_orth = worst_orth.max(rec.gc_dot_gs.abs() / scale);
        }
        let bound = rec.phi * rec.g_hat_norm * rec.g_hat_norm;
        worst_norm = worst_norm.max(rec.gc_norm * rec.gc_norm - bound * (1.0 + 1e-12));
    }
    let orth_ok = worst_orth <= 1e-10;
    let norm_ok = worst_norm <= 0.0;

    // λ = 0 against continued training, random sampling and minibatches.
    let inst = random_quadratic(4242);
    let spec = &inst.spec;
    let w_o = trained(&inst, 100);
    let mut tc = full_batch(60, 0.5 / inst.smoothness, 99);
    tc.batch = BatchSize::Samples(5);
    tc.sample_fraction = 0.6;
    let a = stability_unlearn(spec, &tc, &StabilityConfig::new(0.0, 0.3), &w_o).unwrap();
    let b = continue_unlearn(spec, &tc, &w_o).unwrap();
    let bitwise = a.trajectory.records.len() == b.trajectory.records.len()
        && a.trajectory
            .records
            .iter()
            .zip(&b.trajectory.records)
            .all(|(x, y)| {
                x.w.as_slice()
                    .iter()
                    .zip(y.w.as_slice())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
            });
    let ok = orth_ok && norm_ok && bitwise && !log.is_empty();
    println!(
        "criterion 4: {} {} rounds: max |<g_c,g_S>|/(|g_c||g_S|) = {worst_orth:.3e} (<= 1e-10), max |g_c|^2 - phi|g_hat|^2 = {worst_norm:.3e} (<= 0), lambda=0 bitwise equal = {bitwise}",
        verdict(ok),
        log.len()
    );
    assert!(ok);
}

// 5 ------------------------------------------------------------------------

fn stability_vs(cfg: &ExperimentConfig, lambdas: &[f64]) -> Vec<(f64, f64)> {
    lambdas
        .iter()
        .map(|&l| {
            let c = apply_param(cfg, SweepParam::Lambda, l).unwrap();
            let r = run_experiment(&c).unwrap().report;
            (r.v, r.s)
        })
        .collect()
}

#[test]
fn criterion_05_stability_direction() {
    let cfg = presets::config("two-group").unwrap();
    let fixed = stability_vs(&cfg, &[0.0, 1.0, 5.0]);
    let [(v0, s0), (v1, s1), (v5, s5)] = [fixed[0], fixed[1], fixed[2]];
    let fixed_ok = s1 < s0 && v1 >= v0 - 1e-9 && v5 + s5 <= v0 + s0;

    let mut cols: [Vec<f64>; 6] = Default::default();
    for k in 0..20u64 {
        let rows = stability_vs(&with_seed(&cfg, 500 + k), &[0.0, 1.0, 5.0]);
        cols[0].push(rows[0].1);
        cols[1].push(rows[1].1);
        cols[2].push(rows[0].0);
        cols[3].push(rows[1].0);
        cols[4].push(rows[0].0 + rows[0].1);
        cols[5].push(rows[2].0 + rows[2].1);
    }
    let m: Vec<f64> = cols.iter().map(|c| median(c.clone())).collect();
    let median_ok = m[1] < m[0] && m[3] >= m[2] - 1e-9 && m[5] <= m[4];
    let ok = fixed_ok && median_ok;
    println!(
        "criterion 5: {} fixed seed: S(0) = {s0:.4e}, S(1) = {s1:.4e}, V(0) = {v0:.4e}, V(1) = {v1:.4e}, V+S(0) = {:.4e}, V+S(5) = {:.4e}; medians over 20 seeds: S(0) = {:.4e}, S(1) = {:.4e}, V(0) = {:.4e}, V(1) = {:.4e}, V+S(0) = {:.4e}, V+S(5) = {:.4e}",
        verdict(ok),
        v0 + s0,
        v5 + s5,
        m[0],
        m[1],
        m[2],
        m[3],
        m[4],
        m[5]
    );
    assert!(ok);
}

// 6 ------------------------------------------------------------------------

struct FairnessCheck {
    q_fair: f64,
    q_retrain: f64,
    termination_ok: bool,
    v: f64,
    v_bound: f64,
}

fn fairness_check(cfg: &ExperimentConfig) -> FairnessCheck {
    let fair = run_experiment(&with_mechanism(
        cfg,
        MechanismSection::Fairness {
            budget: 1.0,
            epsilon: None,
        },
    ))
    .unwrap();
    let retrain = run_experiment(&with_mechanism(cfg, MechanismSection::Retrain)).unwrap();
    let res = &fair.result;
    let spec = &fair.instance.spec;
    let termination_ok = if res.terminated_early {
        let eps = res.epsilon.unwrap();
        let f_o = spec.client_losses(&fair.w_o).unwrap();
        let last = res.trajectory.records.last().unwrap();
        spec.remaining()
            .iter()
            .all(|&i| last.client_losses[i] - f_o[i] <= eps)
    } else {
        true
    };
    let r = &fair.report;
    FairnessCheck {
        q_fair: r.q,
        q_retrain: retrain.report.q,
        termination_ok,
        v: r.v,
        v_bound: 4.0 * r.rho * r.rho * r.budget,
    }
}

#[test]
fn criterion_06_fairness_direction() {
    let cfg = presets::config("two-group").unwrap();
    let fixed = fairness_check(&cfg);
    let mut q_fair = Vec::new();
    let mut q_retrain = Vec::new();
    let mut all_terminations = fixed.termination_ok;
    let mut all_v = fixed.v <= fixed.v_bound + 1e-6;
    for k in 0..20u64 {
        let c = fairness_check(&with_seed(&cfg, 600 + k));
        q_fair.push(c.q_fair);
        q_retrain.push(c.q_retrain);
        all_terminations &= c.termination_ok;
        all_v &= c.v <= c.v_bound + 1e-6;
    }
    let (mf, mr) = (median(q_fair), median(q_retrain));
    let ok = fixed.q_fair < fixed.q_retrain && mf < mr && all_terminations && all_v;
    println!(
        "criterion 6: {} fixed seed Q(fair) = {:.5e} vs Q(retrain) = {:.5e}; medians over 20 seeds {mf:.5e} vs {mr:.5e}; early-termination regrets <= eps: {all_terminations}; V = {:.3e} <= 4 rho^2 Lambda + 1e-6 = {:.3e} (all seeds: {all_v})",
        verdict(ok),
        fixed.q_fair,
        fixed.q_retrain,
        fixed.v,
        fixed.v_bound + 1e-6
    );
    assert!(ok);
}

// 7 ------------------------------------------------------------------------

fn thm4_run(spec: &FederationSpec, oracles: &Oracles, w_o: &ParamVector, l: f64, rounds: usize) -> (f64, f64, f64, bool) {
    let lr = 2.0 / (l * rounds as f64);
    let cfg = full_batch(rounds, lr, 5);
    let scfg = StabilityConfig::new(1.0, lr);
    let res = stability_unlearn(spec, &cfg, &scfg, w_o).unwrap();
    let ctx = ReportContext {
        rounds,
        lr_local: lr,
        local_epochs: 1,
        batch: BatchSize::Full,
        lambda: 1.0,
        lr_global: lr,
        surrogate_smoothness: None,
        budget: 1.0,
        zeta_source: ZetaSource::Trajectory,
        radius: None,
        probe_seed: 5,
    };
    let r = evaluate(spec, oracles, w_o, &res, &ctx).unwrap();
    (r.v, r.chi1 + r.chi2, r.thm4.rounds_required, r.thm4.rounds_ok)
}

#[test]
fn criterion_07_verification_upper_bound() {
    let mut violations = Vec::new();
    let mut worst_slack = f64::INFINITY;
    for k in 0..50u64 {
        let inst = random_quadratic(7000 + k);
        let spec = &inst.spec;
        let oracles = Oracles::compute(spec).unwrap();
        let w_o = trained(&inst, 300);
        let l = inst.smoothness;
        let mut rounds = 300;
        let (mut v, mut bound, req, ok) = thm4_run(spec, &oracles, &w_o, l, rounds);
        if !ok {
            rounds = req.ceil() as usize;
            (v, bound, _, _) = thm4_run(spec, &oracles, &w_o, l, rounds);
        }
        worst_slack = worst_slack.min(bound + 1e-8 - v);
        if v > bound + 1e-8 {
            violations.push((7000 + k, v, bound));
        }
    }
    let ok = violations.is_empty();
    println!(
        "criterion 7: {} 50 instances: min (chi1 + chi2 + 1e-8 - V) = {worst_slack:.3e}; violations {:?}",
        verdict(ok),
        violations
    );
    assert!(ok);
}

// 8 ------------------------------------------------------------------------

#[test]
fn criterion_08_heterogeneity_machinery() {
    let homo = run_experiment(&presets::config("homogeneous").unwrap()).unwrap();
    let spec = &homo.instance.spec;
    let probes = default_probes(&homo.oracles.w_rem_star, 2.0, 2 * spec.dim() + 8, 3);
    let het = estimate_heterogeneity(spec, &probes, None).unwrap();
    let identical_ok = het.zeta_sq <= 1e-10 && het.beta_sq <= 1e-10;

    let base = presets::config("table3-dirichlet").unwrap();
    let alphas = [0.1, 0.4, 0.7];
    let mut zeta = Vec::new();
    let mut s = Vec::new();
    for &a in &alphas {
        let mut z = Vec::new();
        let mut sv = Vec::new();
        for k in 0..20u64 {
            let c = apply_param(&with_seed(&base, 800 + k), SweepParam::Alpha, a).unwrap();
            let r = run_experiment(&c).unwrap().report;
            z.push(r.heterogeneity.zeta_sq);
            sv.push(r.s);
        }
        zeta.push(median(z));
        s.push(median(sv));
    }
    let zeta_ok = zeta[0] > zeta[1] && zeta[1] > zeta[2];
    let s_ok = s[0] >= s[1] && s[1] >= s[2];
    let ok = identical_ok && zeta_ok && s_ok;
    println!(
        "criterion 8: {} identical clients zeta^2 = {:.3e}, beta^2 = {:.3e} (<= 1e-10); median zeta^2 over alpha {alphas:?} = {:.4e}, {:.4e}, {:.4e}; median S(retrain) = {:.4e}, {:.4e}, {:.4e}",
        verdict(ok),
        het.zeta_sq,
        het.beta_sq,
        zeta[0],
        zeta[1],
        zeta[2],
        s[0],
        s[1],
        s[2]
    );
    assert!(ok);
}

// 9 ------------------------------------------------------------------------

fn fd_rel_error(obj: &Objective, w: &ParamVector) -> f64 {
    let g = obj.grad(w).unwrap();
    let h = 1e-5;
    let mut num = vec![0.0; w.dim()];
    for (k, n) in num.iter_mut().enumerate() {
        let mut up = w.clone();
        up.as_mut_slice()[k] += h;
        let mut dn = w.clone();
        dn.as_mut_slice()[k] -= h;
        *n = (obj.loss(&up).unwrap() - obj.loss(&dn).unwrap()) / (2.0 * h);
    }
    let num = ParamVector::new(num);
    num.dist_sq(&g).unwrap().sqrt() / g.norm().max(1.0)
}

#[test]
fn criterion_09_gradient_correctness() {
    let mut r = rng::stream(99, &[rng::tag::INSTANCE, 9]);
    let gauss = move |r: &mut rng::RngStream| -> f64 { StandardNormal.sample(r) };
    let (m, d) = (25usize, 5usize);
    let a: Vec<f64> = (0..m * d).map(|_| gauss(&mut r)).collect();
    let b: Vec<f64> = (0..m).map(|_| gauss(&mut r)).collect();
    let y: Vec<f64> = (0..m).map(|_| f64::from(r.random_bool(0.5) as u8)).collect();
    let feats = Matrix::from_rows(m, d, a).unwrap();
    let objs = [
        Objective::Quadratic(QuadraticObjective::new(feats.clone(), b, 0.1).unwrap()),
        Objective::Logistic(LogisticObjective::new(feats, y, 0.1).unwrap()),
    ];
    let mut worst_fd = 0.0f64;
    for obj in &objs {
        for _ in 0..20 {
            let w = ParamVector::new((0..d).map(|_| 2.0 * gauss(&mut r)).collect());
            worst_fd = worst_fd.max(fd_rel_error(obj, &w));
        }
    }
    let mut worst_min = 0.0f64;
    for obj in &objs {
        let w = exact_minimizer(&[(obj, 1.0)]).unwrap();
        worst_min = worst_min.max(obj.grad(&w).unwrap().norm());
    }
    for k in 0..10u64 {
        let inst = random_quadratic(9000 + k);
        let spec = &inst.spec;
        for terms in [spec.global_terms(), spec.remaining_terms()] {
            let w = exact_minimizer(&terms).unwrap();
            let mut g = ParamVector::zeros(spec.dim());
            for (o, p) in &terms {
                g.axpy(*p, &o.grad(&w).unwrap()).unwrap();
            }
            worst_min = worst_min.max(g.norm());
        }
    }
    let ok = worst_fd <= 1e-6 && worst_min <= 1e-8;
    println!(
        "criterion 9: {} max FD relative error = {worst_fd:.3e} (<= 1e-6), max minimizer gradient norm = {worst_min:.3e} (<= 1e-8)",
        verdict(ok)
    );
    assert!(ok);
}

// 10 -----------------------------------------------------------------------

#[test]
fn criterion_10_thread_determinism() {
    let mut cfg = presets::config("two-group").unwrap();
    cfg.train.rounds = 60;
    cfg.unlearn.rounds = 40;
    cfg.unlearn.batch = BatchSpec::Samples(8);
    cfg.unlearn.sample_fraction = 0.7;
    cfg.unlearn.lr_local = StepSize::Value(0.02);
    cfg.replicates = 3;
    let mut outputs = Vec::new();
    for threads in [1usize, 4, 8] {
        let dir = tempfile::tempdir().unwrap();
        let out = with_threads(Some(threads), || run_experiment(&cfg)).unwrap().unwrap();
        write_artifacts(&out, dir.path()).unwrap();
        let traj = std::fs::read(dir.path().join("trajectory.csv")).unwrap();
        let bounds = std::fs::read(dir.path().join("bounds.json")).unwrap();
        outputs.push((traj, bounds));
    }
    let ok = outputs.windows(2).all(|w| w[0] == w[1]);
    println!(
        "criterion 10: {} trajectory.csv and bounds.json byte-identical across 1, 4 and 8 threads ({} and {} bytes)",
        verdict(ok),
        outputs[0].0.len(),
        outputs[0].1.len()
    );
    assert!(ok);
}
