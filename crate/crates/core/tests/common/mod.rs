#![allow(dead_code)]

use fedunlearn::datagen::weights_from_sizes;
use fedunlearn::federation::{train, FederationSpec, TrainConfig};
use fedunlearn::linalg::{Matrix, ParamVector};
use fedunlearn::objectives::{BatchSize, Objective, QuadraticObjective};
use fedunlearn::rng;
use fedunlearn::unlearning::remaining_smoothness;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random heterogeneous quadratic federation with `P_J ≤ 1/2`.
pub struct RandomInstance {
    pub spec: FederationSpec,
    pub smoothness: f64,
}

fn gauss(r: &mut rng::RngStream) -> f64 {
    StandardNormal.sample(r)
}

pub fn random_quadratic(seed: u64) -> RandomInstance {
    let mut r = rng::stream(seed, &[rng::tag::INSTANCE]);
    let n = r.random_range(3..=6usize);
    let d = r.random_range(2..=8usize);
    let shared: Vec<f64> = (0..d).map(|_| gauss(&mut r)).collect();
    let mut objectives = Vec::with_capacity(n);
    let mut sizes = Vec::with_capacity(n);
    for _ in 0..n {
        let m = r.random_range(2 * d + 4..=4 * d + 12);
        let theta: Vec<f64> = shared.iter().map(|s| s + gauss(&mut r)).collect();
        let shift: Vec<f64> = (0..d).map(|_| 0.5 * gauss(&mut r)).collect();
        let mut a = Vec::with_capacity(m * d);
        let mut b = Vec::with_capacity(m);
        for _ in 0..m {
            let row: Vec<f64> = shift.iter().map(|s| s + gauss(&mut r)).collect();
            let y = row.iter().zip(&theta).map(|(x, t)| x * t).sum::<f64>() + 0.1 * gauss(&mut r);
            a.extend(row);
            b.push(y);
        }
        let obj = QuadraticObjective::new(Matrix::from_rows(m, d, a).unwrap(), b, 0.1).unwrap();
        objectives.push(Objective::Quadratic(obj));
        sizes.push(m);
    }
    let p = weights_from_sizes(&sizes).unwrap();
    let unlearn = loop {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        let k = r.random_range(1..=n / 2);
        let mut j = idx[..k].to_vec();
        j.sort_unstable();
        if j.iter().map(|&i| p[i]).sum::<f64>() <= 0.5 {
            break j;
        }
    };
    let spec = FederationSpec::new(objectives, p, &unlearn).unwrap();
    let smoothness = spec
        .objectives()
        .iter()
        .map(|o| o.constants(1.0, BatchSize::Full).unwrap().smoothness)
        .fold(0.0, f64::max);
    RandomInstance { spec, smoothness }
}

pub fn full_batch(rounds: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        rounds,
        local_epochs: 1,
        lr_local: lr,
        batch: BatchSize::Full,
        sample_fraction: 1.0,
        seed,
    }
}

/// Trained model `w^o` after `rounds` full-batch rounds at step `1/L`.
pub fn trained(inst: &RandomInstance, rounds: usize) -> ParamVector {
    let cfg = full_batch(rounds, 1.0 / inst.smoothness, 1);
    train(&inst.spec, &cfg, ParamVector::zeros(inst.spec.dim()))
        .unwrap()
        .final_point()
        .clone()
}

pub fn remaining_l(spec: &FederationSpec) -> f64 {
    remaining_smoothness(spec).unwrap()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
