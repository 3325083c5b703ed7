//! Synthetic non-IID client data.
//!
//! Each class has a Gaussian prototype; samples are prototype plus isotropic
//! noise. Clients receive classes either by a rotating fixed-size slice or by
//! per-class Dirichlet label skew.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, tag};

/// How class labels are distributed over clients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Partition {
    /// Client `i` holds classes `i, i+1, …, i+k−1 (mod C)` in equal shares.
    ClassSlice { classes_per_client: usize },
    /// Each class is split across clients by one Dirichlet(α·1_N) draw.
    Dirichlet { alpha: f64 },
    /// Every client holds a copy of the same sample set.
    Identical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_client: usize,
    pub class_sep: f64,
    pub noise_sd: f64,
    pub partition: Partition,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_classes == 0 || self.dim == 0 {
            return Err(Error::config(
                "num_clients, num_classes and dim must be positive",
            ));
        }
        if self.samples_per_client == 0 {
            return Err(Error::config("samples_per_client must be positive"));
        }
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return Err(Error::config("class_sep must be > 0"));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("noise_sd must be > 0"));
        }
        match self.partition {
            Partition::ClassSlice { classes_per_client } => {
                if classes_per_client == 0 || classes_per_client > self.num_classes {
                    return Err(Error::config(format!(
                        "classes_per_client must be in 1..={}",
                        self.num_classes
                    )));
                }
            }
            Partition::Dirichlet { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config("Dirichlet alpha must be > 0"));
                }
            }
            Partition::Identical => {}
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.samples_per_client < self.dim {
            out.push(format!(
                "samples_per_client ({}) < dim ({}): local Hessians are rank deficient without ridge",
                self.samples_per_client, self.dim
            ));
        }
        out
    }
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Regression targets, filled by [`label_for_regression`].
    pub targets: Option<Vec<f64>>,
}

impl ClientDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

/// Class prototypes with pairwise distance at least `class_sep`.
///
/// With `C ≤ d` the prototypes sit on scaled coordinate axes and every pair is
/// exactly `class_sep` apart. Otherwise Gaussian directions are rescaled so
/// that the closest pair is exactly `class_sep` apart.
pub fn class_prototypes(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let (c, d) = (spec.num_classes, spec.dim);
    if c <= d {
        let s = spec.class_sep / std::f64::consts::SQRT_2;
        return (0..c)
            .map(|k| {
                let mut v = vec![0.0; d];
                v[k] = s;
                v
            })
            .collect();
    }
    let mut r = rng::stream(spec.seed, &[tag::DATA, 0xC1A55]);
    let raw: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..c {
        for j in i + 1..c {
            let dsq: f64 = raw[i].iter().zip(&raw[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            min_dist = min_dist.min(dsq.sqrt());
        }
    }
    let scale = spec.class_sep / min_dist;
    raw.into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Splits `total` into `weights.len()` nonnegative integers proportional to
/// `weights`, using largest-remainder rounding (ties broken by index).
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet(α·1_N) proportions over clients.
pub fn dirichlet_proportions(spec: &SyntheticSpec, alpha: f64) -> Result<Vec<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut r = rng::stream(spec.seed, &[tag::DATA, 0xD1]);
    let n = spec.num_clients;
    let mut out = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut r)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 {
            out.push(draws.iter().map(|g| g / sum).collect());
        } else {
            // every draw underflowed; put the whole class on one client
            let pick = r.random_range(0..n);
            out.push((0..n).map(|i| if i == pick { 1.0 } else { 0.0 }).collect());
        }
    }
    Ok(out)
}

/// Sample counts, indexed `[client][class]`.
pub fn class_counts(spec: &SyntheticSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let (n, c, s) = (spec.num_clients, spec.num_classes, spec.samples_per_client);
    let mut counts = vec![vec![0usize; c]; n];
    match spec.partition {
        Partition::ClassSlice { classes_per_client: k } => {
            let shares = largest_remainder(s, &vec![1.0; k]);
            for (i, row) in counts.iter_mut().enumerate() {
                for (j, share) in shares.iter().enumerate() {
                    row[(i + j) % c] += share;
                }
            }
        }
        Partition::Identical => {
            let shares = largest_remainder(s, &vec![1.0; c]);
            for row in counts.iter_mut() {
                row.copy_from_slice(&shares);
            }
        }
        Partition::Dirichlet { alpha } => {
            let per_class = largest_remainder(n * s, &vec![1.0; c]);
            let props = dirichlet_proportions(spec, alpha)?;
            for (class, (total, p)) in per_class.iter().zip(&props).enumerate() {
                for (i, k) in largest_remainder(*total, p).into_iter().enumerate() {
                    counts[i][class] = k;
                }
            }
            // every client needs at least one sample
            for i in 0..n {
                if counts[i].iter().sum::<usize>() > 0 {
                    continue;
                }
                let donor = (0..n)
                    .max_by_key(|&k| (counts[k].iter().sum::<usize>(), std::cmp::Reverse(k)))
                    .unwrap();
                let class = (0..c)
                    .max_by_key(|&j| (counts[donor][j], std::cmp::Reverse(j)))
                    .unwrap();
                counts[donor][class] -= 1;
                counts[i][class] += 1;
            }
        }
    }
    Ok(counts)
}

/// Generates all client datasets. Fully determined by `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<ClientDataset>> {
    let counts = class_counts(spec)?;
    let protos = class_prototypes(spec);
    let d = spec.dim;
    let draw = |client: usize, row: &[usize]| -> Result<ClientDataset> {
        let mut r = rng::stream(spec.seed, &[tag::DATA, 0x5A, client as u64]);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (class, &k) in row.iter().enumerate() {
            for _ in 0..k {
                for x in &protos[class] {
                    feats.push(x + spec.noise_sd * r.sample::<f64, _>(StandardNormal));
                }
                labels.push(class);
            }
        }
        Ok(ClientDataset {
            client_id: client,
            features: Matrix::from_rows(labels.len(), d, feats)?,
            labels,
            targets: None,
        })
    };
    match spec.partition {
        Partition::Identical => {
            let base = draw(0, &counts[0])?;
            Ok((0..spec.num_clients)
                .map(|i| ClientDataset {
                    client_id: i,
                    ..base.clone()
                })
                .collect())
        }
        _ => counts
            .iter()
            .enumerate()
            .map(|(i, row)| draw(i, row))
            .collect(),
    }
}

/// Fixed class → target value table, evenly spaced on [−1, 1].
pub fn class_value_table(num_classes: usize) -> Vec<f64> {
    if num_classes <= 1 {
        return vec![0.0; num_classes];
    }
    (0..num_classes)
        .map(|c| -1.0 + 2.0 * c as f64 / (num_classes - 1) as f64)
        .collect()
}

/// Attaches scalar regression targets: each label maps through
/// [`class_value_table`].
pub fn label_for_regression(ds: &ClientDataset, num_classes: usize) -> Result<ClientDataset> {
    let table = class_value_table(num_classes);
    let targets = ds
        .labels
        .iter()
        .map(|&l| {
            table
                .get(l)
                .copied()
                .ok_or_else(|| Error::config(format!("label {l} outside 0..{num_classes}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientDataset {
        targets: Some(targets),
        ..ds.clone()
    })
}

/// `p_i = n_i / Σ n_k`.
pub fn aggregation_weights(datasets: &[ClientDataset]) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = datasets.iter().map(|d| d.n()).collect();
    weights_from_sizes(&sizes)
}

pub fn weights_from_sizes(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::config("no clients"));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::config("all clients are empty"));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Writes `client_id,label,f0..f{d-1}` rows.
pub fn write_csv<W: Write>(datasets: &[ClientDataset], mut out: W) -> Result<()> {
    let d = datasets.first().map(|ds| ds.features.cols()).unwrap_or(0);
    let mut header = String::from("client_id,label");
    for j in 0..d {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for ds in datasets {
        for (k, label) in ds.labels.iter().enumerate() {
            let mut line = format!("{},{}", ds.client_id, label);
            for x in ds.features.row(k) {
                line.push_str(&format!(",{x}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}
