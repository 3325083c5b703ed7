//! Strongly convex local objectives with exact constants and minimizers.
//!
//! The ridge-regularized least-squares objective is the primary model family:
//! its minimizers, curvature constants and objective gaps are all available in
//! closed form, which makes every bound ingredient exactly computable. The
//! ridge-regularized logistic objective is provided as a less idealized
//! alternative and is minimized with a damped Newton iteration.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot_slices, Matrix, ParamVector};
use crate::rng::RngStream;

/// Gradient-norm tolerance for iterative (logistic) minimizers.
pub const ITERATIVE_GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON_ITERS: usize = 200;

/// Strong convexity, smoothness, gradient bound and stochastic-gradient
/// variance cap of one objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConstants {
    pub mu: f64,
    #[serde(rename = "L")]
    pub smoothness: f64,
    /// Gradient norm bound over the ball of the configured radius.
    #[serde(rename = "G")]
    pub grad_bound: f64,
    pub sigma_sq: f64,
}

/// Mini-batch size used for local gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSize {
    Full,
    Samples(usize),
}

impl BatchSize {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::Full => n,
            BatchSize::Samples(b) => b,
        }
    }
}

/// `(1/(2n))‖A w − b‖² + (ridge/2)‖w‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    features: Matrix,
    targets: Vec<f64>,
    ridge: f64,
    // AᵀA/n + ridge·I
    hessian: Matrix,
    // Aᵀb/n
    linear: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(features: Matrix, targets: Vec<f64>, ridge: f64) -> Result<Self> {
        if targets.len() != features.rows() {
            return Err(Error::Dimension {
                expected: features.rows(),
                actual: targets.len(),
            });
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::config(format!("ridge must be a finite value >= 0, got {ridge}")));
        }
        let d = features.cols();
        let n = features.rows();
        let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let mut hessian = features.gram().scaled(inv_n);
        hessian.add_scaled(ridge, &Matrix::identity(d))?;
        let linear = features
            .tmul_vec(&targets)?
            .into_iter()
            .map(|v| v * inv_n)
            .collect();
        Ok(QuadraticObjective {
            features,
            targets,
            ridge,
            hessian,
            linear,
        })
    }

    /// `(ridge/2)‖w‖²` with no data term.
    pub fn ridge_only(dim: usize, ridge: f64) -> Result<Self> {
        Self::new(Matrix::zeros(0, dim), Vec::new(), ridge)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Constant Hessian `AᵀA/n + ridge·I`.
    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    /// `Aᵀb/n`, so that `∇f(w) = H w − linear`.
    pub fn linear_term(&self) -> &[f64] {
        &self.linear
    }
}

/// `(1/n) Σ [log(1 + e^{z_k}) − y_k z_k] + (ridge/2)‖w‖²` with `z = A w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticObjective {
    features: Matrix,
    labels: Vec<f64>,
    ridge: f64,
}

impl LogisticObjective {
    pub fn new(features: Matrix, labels: Vec<f64>, ridge: f64) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::config("logistic objective needs at least one sample"));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::config("logistic labels must be 0 or 1"));
        }
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::config(format!("logistic ridge must be > 0, got {ridge}")));
        }
        Ok(LogisticObjective {
            features,
            labels,
            ridge,
        })
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A local objective `f_i`.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Logistic(LogisticObjective),
}

impl Objective {
    pub fn dim(&self) -> usize {
        self.features().cols()
    }

    pub fn n_samples(&self) -> usize {
        self.features().rows()
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Objective::Quadratic(_))
    }

    fn features(&self) -> &Matrix {
        match self {
            Objective::Quadratic(q) => &q.features,
            Objective::Logistic(l) => &l.features,
        }
    }

    fn ridge(&self) -> f64 {
        match self {
            Objective::Quadratic(q) => q.ridge,
            Objective::Logistic(l) => l.ridge,
        }
    }

    fn check(&self, w: &ParamVector) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: w.dim(),
            });
        }
        Ok(())
    }

    pub fn loss(&self, w: &ParamVector) -> Result<f64> {
        self.check(w)?;
        let a = self.features();
        let n = a.rows();
        let z = a.mul_vec(w.as_slice())?;
        let data = match self {
            Objective::Quadratic(q) => {
                z.iter()
                    .zip(&q.targets)
                    .fold(0.0, |acc, (zi, bi)| acc + (zi - bi) * (zi - bi))
                    / 2.0
            }
            Objective::Logistic(l) => z
                .iter()
                .zip(&l.labels)
                .fold(0.0, |acc, (zi, yi)| acc + softplus(*zi) - yi * zi),
        };
        let data = if n == 0 { 0.0 } else { data / n as f64 };
        Ok(data + 0.5 * self.ridge() * w.norm_sq())
    }

    /// `f(u) − f(v)`. Exact for quadratics via
    /// `⟨∇f(v), u−v⟩ + ½ (u−v)ᵀ H (u−v)`, which avoids cancellation when
    /// both points sit near the optimum.
    pub fn loss_diff(&self, u: &ParamVector, v: &ParamVector) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        match self {
            Objective::Quadratic(q) => {
                let e = u.sub(v)?;
                let gv = self.grad(v)?;
                let he = q.hessian.mul_vec(e.as_slice())?;
                Ok(gv.dot(&e)? + 0.5 * dot_slices(e.as_slice(), &he))
            }
            Objective::Logistic(_) => Ok(self.loss(u)? - self.loss(v)?),
        }
    }

    pub fn grad(&self, w: &ParamVector) -> Result<ParamVector> {
        self.check(w)?;
        match self {
            Objective::Quadratic(q) => {
                let hw = q.hessian.mul_vec(w.as_slice())?;
                Ok(ParamVector::new(
                    hw.iter().zip(&q.linear).map(|(a, b)| a - b).collect(),
                ))
            }
            Objective::Logistic(_) => {
                let all: Vec<usize> = (0..self.n_samples()).collect();
                self.batch_grad(w, &all)
            }
        }
    }

    /// Gradient of the sample-average loss over `indices` (plus the ridge term).
    pub fn batch_grad(&self, w: &ParamVector, indices: &[usize]) -> Result<ParamVector> {
        self.check(w)?;
        let a = self.features();
        let d = self.dim();
        let mut out = vec![0.0; d];
        for &k in indices {
            let row = a.row(k);
            let z = dot_slices(row, w.as_slice());
            let coef = match self {
                Objective::Quadratic(q) => z - q.targets[k],
                Objective::Logistic(l) => sigmoid(z) - l.labels[k],
            };
            for (o, x) in out.iter_mut().zip(row) {
                *o += coef * x;
            }
        }
        let inv = if indices.is_empty() {
            0.0
        } else {
            1.0 / indices.len() as f64
        };
        let ridge = self.ridge();
        Ok(ParamVector::new(
            out.iter()
                .zip(w.as_slice())
                .map(|(g, wi)| g * inv + ridge * wi)
                .collect(),
        ))
    }

    /// Mini-batch gradient on a batch drawn uniformly without replacement.
    pub fn stochastic_grad(
        &self,
        w: &ParamVector,
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<ParamVector> {
        let n = self.n_samples();
        if batch_size < 1 || batch_size > n {
            return Err(Error::config(format!(
                "batch size {batch_size} outside 1..={n}"
            )));
        }
        if batch_size == n {
            return self.grad(w);
        }
        let mut idx = index::sample(rng, n, batch_size).into_vec();
        idx.sort_unstable();
        self.batch_grad(w, &idx)
    }

    /// Exact variance `E‖g_B(w) − ∇f(w)‖²` of the mini-batch gradient at `w`.
    pub fn batch_grad_variance(&self, w: &ParamVector, batch_size: usize) -> Result<f64> {
        let n = self.n_samples();
        if batch_size < 1 || batch_size > n {
            return Err(Error::config(format!(
                "batch size {batch_size} outside 1..={n}"
            )));
        }
        if batch_size == n {
            return Ok(0.0);
        }
        let mean = self.batch_grad(w, &(0..n).collect::<Vec<_>>())?;
        let mut pop = 0.0;
        for k in 0..n {
            pop += self.batch_grad(w, &[k])?.dist_sq(&mean)?;
        }
        pop /= n as f64;
        Ok(without_replacement_factor(n, batch_size) * pop)
    }

    /// Hessian at `w`.
    pub fn hessian_at(&self, w: &ParamVector) -> Result<Matrix> {
        self.check(w)?;
        match self {
            Objective::Quadratic(q) => Ok(q.hessian.clone()),
            Objective::Logistic(l) => {
                let d = self.dim();
                let n = l.features.rows();
                let mut h = Matrix::identity(d).scaled(l.ridge);
                let mut data = vec![0.0; d * d];
                for k in 0..n {
                    let row = l.features.row(k);
                    let s = sigmoid(dot_slices(row, w.as_slice()));
                    let c = s * (1.0 - s) / n as f64;
                    for i in 0..d {
                        for j in 0..d {
                            data[i * d + j] += c * row[i] * row[j];
                        }
                    }
                }
                h.add_scaled(1.0, &Matrix::from_rows(d, d, data)?)?;
                Ok(h)
            }
        }
    }

    /// Constants over the ball of radius `radius` around the origin, with the
    /// variance cap evaluated for the given mini-batch size.
    pub fn constants(&self, radius: f64, batch: BatchSize) -> Result<ObjectiveConstants> {
        let d = self.dim();
        let n = self.n_samples();
        let ridge = self.ridge();
        let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let scaled_gram = self.features().gram().scaled(inv_n);
        let (lo, hi) = linalg::sym_eigen_extremes(&scaled_gram);
        let (mu, smoothness) = match self {
            Objective::Quadratic(_) => (ridge + lo.max(0.0), ridge + hi.max(0.0)),
            Objective::Logistic(_) => (ridge, ridge + hi.max(0.0) / 4.0),
        };
        let g0 = self.grad(&ParamVector::zeros(d))?.norm();
        let grad_bound = smoothness * radius + g0;

        let b = batch.resolve(n);
        let sigma_sq = if n <= 1 || b >= n {
            0.0
        } else {
            let factor = without_replacement_factor(n, b);
            let a = self.features();
            let second_moment = match self {
                Objective::Quadratic(q) => {
                    // per-sample deviation (a aᵀ − AᵀA/n) w − (a b − Aᵀb/n), bounded on the ball
                    let mut acc = 0.0;
                    for k in 0..n {
                        let row = a.row(k);
                        let mut m = Matrix::from_rows(
                            d,
                            d,
                            (0..d * d).map(|ij| row[ij / d] * row[ij % d]).collect(),
                        )?;
                        m.add_scaled(-1.0, &scaled_gram)?;
                        let dev: f64 = row
                            .iter()
                            .zip(&q.linear)
                            .map(|(x, c)| {
                                let v = x * q.targets[k] - c;
                                v * v
                            })
                            .sum::<f64>()
                            .sqrt();
                        let bound = linalg::sym_spectral_norm(&m) * radius + dev;
                        acc += bound * bound;
                    }
                    acc * inv_n
                }
                // |σ(z) − y| ≤ 1, so each per-sample data gradient has norm ≤ ‖a_k‖
                Objective::Logistic(_) => {
                    (0..n).map(|k| dot_slices(a.row(k), a.row(k))).sum::<f64>() * inv_n
                }
            };
            factor * second_moment
        };
        Ok(ObjectiveConstants {
            mu,
            smoothness,
            grad_bound,
            sigma_sq,
        })
    }
}

fn without_replacement_factor(n: usize, b: usize) -> f64 {
    if b >= n || n <= 1 {
        return 0.0;
    }
    (n - b) as f64 / ((n - 1) as f64 * b as f64)
}

fn check_weights(terms: &[(&Objective, f64)]) -> Result<usize> {
    let first = terms
        .first()
        .ok_or_else(|| Error::Weight("no objectives supplied".into()))?;
    let d = first.0.dim();
    for (o, w) in terms {
        if o.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: o.dim(),
            });
        }
        if !(*w >= 0.0) {
            return Err(Error::Weight(format!("negative weight {w}")));
        }
    }
    let total: f64 = terms.iter().map(|t| t.1).sum();
    if (total - 1.0).abs() > linalg::WEIGHT_SUM_TOL {
        return Err(Error::Weight(format!("weights sum to {total}, not 1")));
    }
    Ok(d)
}

/// Weighted Hessian `Σ w_k H_k` and linear term `Σ w_k c_k` of a mixture of
/// quadratics, so that the mixture gradient is `H x − c`.
pub fn quadratic_mixture(terms: &[(&Objective, f64)]) -> Result<(Matrix, Vec<f64>)> {
    let d = terms
        .first()
        .map(|t| t.0.dim())
        .ok_or_else(|| Error::Weight("no objectives supplied".into()))?;
    let mut h = Matrix::zeros(d, d);
    let mut c = vec![0.0; d];
    for (o, w) in terms {
        let Objective::Quadratic(q) = o else {
            return Err(Error::Unsupported(
                "closed-form mixture requires quadratic objectives".into(),
            ));
        };
        h.add_scaled(*w, &q.hessian)?;
        for (ci, li) in c.iter_mut().zip(&q.linear) {
            *ci += w * li;
        }
    }
    Ok((h, c))
}

/// Minimizer of `Σ weight_k f_k`.
///
/// Quadratic mixtures are solved directly from the normal equations; logistic
/// mixtures use damped Newton steps until the gradient norm is at most
/// [`ITERATIVE_GRAD_TOL`].
pub fn exact_minimizer(terms: &[(&Objective, f64)]) -> Result<ParamVector> {
    let d = check_weights(terms)?;
    let all_quadratic = terms.iter().all(|t| t.0.is_quadratic());
    let all_logistic = terms.iter().all(|t| !t.0.is_quadratic());
    if all_quadratic {
        let (h, c) = quadratic_mixture(terms)?;
        let (lo, hi) = linalg::sym_eigen_extremes(&h);
        if !(lo > 1e-13 * hi.abs().max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularSystem(format!(
                "weighted Hessian has smallest eigenvalue {lo:e}"
            )));
        }
        return Ok(ParamVector::new(linalg::solve_spd(&h, &c)?));
    }
    if !all_logistic {
        return Err(Error::Unsupported(
            "mixtures of quadratic and logistic objectives".into(),
        ));
    }
    let mixture_loss = |w: &ParamVector| -> Result<f64> {
        terms
            .iter()
            .try_fold(0.0, |acc, (o, wt)| Ok(acc + wt * o.loss(w)?))
    };
    let mixture_grad = |w: &ParamVector| -> Result<ParamVector> {
        let mut g = ParamVector::zeros(d);
        for (o, wt) in terms {
            g.axpy(*wt, &o.grad(w)?)?;
        }
        Ok(g)
    };
    let mut w = ParamVector::zeros(d);
    for _ in 0..MAX_NEWTON_ITERS {
        let g = mixture_grad(&w)?;
        if g.norm() <= ITERATIVE_GRAD_TOL {
            return Ok(w);
        }
        let mut h = Matrix::zeros(d, d);
        for (o, wt) in terms {
            h.add_scaled(*wt, &o.hessian_at(&w)?)?;
        }
        let step = ParamVector::new(linalg::solve_spd(&h, g.as_slice())?);
        let f0 = mixture_loss(&w)?;
        let slope = g.dot(&step)?;
        let mut t = 1.0;
        loop {
            let mut cand = w.clone();
            cand.axpy(-t, &step)?;
            if mixture_loss(&cand)? <= f0 - 1e-4 * t * slope || t < 1e-12 {
                w = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let g = mixture_grad(&w)?;
    if g.norm() <= ITERATIVE_GRAD_TOL {
        Ok(w)
    } else {
        Err(Error::SingularSystem(format!(
            "Newton iteration stalled at gradient norm {:e}",
            g.norm()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn quad(rows: usize, cols: usize, a: Vec<f64>, b: Vec<f64>, ridge: f64) -> Objective {
        Objective::Quadratic(
            QuadraticObjective::new(Matrix::from_rows(rows, cols, a).unwrap(), b, ridge).unwrap(),
        )
    }

    fn random_objectives(seed: u64) -> Vec<Objective> {
        let mut r = rng::stream(seed, &[99]);
        let (n, d) = (12, 4);
        let a: Vec<f64> = (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|k| (k % 2) as f64).collect();
        vec![
            quad(n, d, a.clone(), b, 0.05),
            Objective::Logistic(
                LogisticObjective::new(Matrix::from_rows(n, d, a).unwrap(), y, 0.1).unwrap(),
            ),
        ]
    }

    fn central_difference(f: &Objective, w: &ParamVector, h: f64) -> Vec<f64> {
        (0..w.dim())
            .map(|i| {
                let mut up = w.clone();
                let mut dn = w.clone();
                up.as_mut_slice()[i] += h;
                dn.as_mut_slice()[i] -= h;
                (f.loss(&up).unwrap() - f.loss(&dn).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn loss_examples() {
        let f = quad(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.0);
        assert_eq!(f.loss(&ParamVector::zeros(2)).unwrap(), 0.0);
        let f = quad(1, 1, vec![1.0], vec![2.0], 0.0);
        assert_eq!(f.loss(&ParamVector::zeros(1)).unwrap(), 2.0);
        assert_eq!(f.grad(&ParamVector::zeros(1)).unwrap().as_slice(), &[-2.0]);
        let lg = &random_objectives(3)[1];
        let l0 = lg.loss(&ParamVector::zeros(4)).unwrap();
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(f.loss(&ParamVector::zeros(2)).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..3 {
            for f in random_objectives(seed) {
                let mut r = rng::stream(seed, &[7]);
                for _ in 0..20 {
                    let w = ParamVector::new((0..4).map(|_| r.random_range(-1.5..1.5)).collect());
                    let g = f.grad(&w).unwrap();
                    let fd = central_difference(&f, &w, 1e-5);
                    for (a, b) in g.as_slice().iter().zip(&fd) {
                        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn minimizer_examples() {
        let f = quad(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.7, -1.3], 0.0);
        let w = exact_minimizer(&[(&f, 1.0)]).unwrap();
        assert!((w[0] - 0.7).abs() < 1e-14 && (w[1] + 1.3).abs() < 1e-14);
        assert!(f.grad(&w).unwrap().norm() < 1e-10);

        let f1 = quad(1, 1, vec![1.0], vec![0.0], 0.0);
        let f2 = quad(1, 1, vec![1.0], vec![2.0], 0.0);
        let w = exact_minimizer(&[(&f1, 0.5), (&f2, 0.5)]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-14);

        let flat = quad(1, 2, vec![1.0, 0.0], vec![1.0], 0.0);
        assert!(matches!(
            exact_minimizer(&[(&flat, 1.0)]),
            Err(Error::SingularSystem(_))
        ));
        assert!(matches!(
            exact_minimizer(&[(&f1, 0.5), (&f2, 0.6)]),
            Err(Error::Weight(_))
        ));
    }

    #[test]
    fn logistic_minimizer_reaches_tolerance() {
        let fs = random_objectives(11);
        let w = exact_minimizer(&[(&fs[1], 1.0)]).unwrap();
        assert!(fs[1].grad(&w).unwrap().norm() <= ITERATIVE_GRAD_TOL);
        assert!(exact_minimizer(&[(&fs[0], 0.5), (&fs[1], 0.5)]).is_err());
    }

    #[test]
    fn constants_examples() {
        let f = quad(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.1);
        let c = f.constants(1.0, BatchSize::Full).unwrap();
        assert!((c.mu - 0.6).abs() < 1e-14 && (c.smoothness - 0.6).abs() < 1e-14);
        let bowl = Objective::Quadratic(QuadraticObjective::ridge_only(3, 0.25).unwrap());
        let c = bowl.constants(1.0, BatchSize::Full).unwrap();
        assert_eq!((c.mu, c.smoothness), (0.25, 0.25));
        for f in random_objectives(5) {
            let c = f.constants(3.0, BatchSize::Full).unwrap();
            assert!(c.smoothness >= c.mu && c.mu > 0.0);
            assert_eq!(c.sigma_sq, 0.0);
        }
    }

    #[test]
    fn convexity_and_smoothness_inequalities() {
        for f in random_objectives(21) {
            let c = f.constants(1.0, BatchSize::Full).unwrap();
            let mut r = rng::stream(21, &[1]);
            for _ in 0..100 {
                let u = ParamVector::new((0..4).map(|_| r.random_range(-3.0..3.0)).collect());
                let v = ParamVector::new((0..4).map(|_| r.random_range(-3.0..3.0)).collect());
                let lin = f.loss(&v).unwrap() + f.grad(&v).unwrap().dot(&u.sub(&v).unwrap()).unwrap();
                let dsq = u.dist_sq(&v).unwrap();
                let fu = f.loss(&u).unwrap();
                assert!(fu >= lin + 0.5 * c.mu * dsq - 1e-9);
                assert!(fu <= lin + 0.5 * c.smoothness * dsq + 1e-9);
            }
        }
    }

    #[test]
    fn stochastic_gradient_examples() {
        let f = &random_objectives(2)[0];
        let w = ParamVector::new(vec![0.3, -0.2, 0.1, 0.5]);
        let mut s = rng::stream(1, &[2]);
        assert_eq!(f.stochastic_grad(&w, 12, &mut s).unwrap(), f.grad(&w).unwrap());
        assert!(matches!(f.stochastic_grad(&w, 0, &mut s), Err(Error::Config(_))));
        assert!(matches!(f.stochastic_grad(&w, 13, &mut s), Err(Error::Config(_))));

        // n = 2, batch 1: the two possible batches average to the full gradient
        let g2 = quad(2, 2, vec![1.0, 2.0, -0.5, 0.3], vec![1.0, -1.0], 0.2);
        let w2 = ParamVector::new(vec![0.4, -0.9]);
        let mean = g2
            .batch_grad(&w2, &[0])
            .unwrap()
            .add(&g2.batch_grad(&w2, &[1]).unwrap())
            .unwrap()
            .scaled(0.5);
        assert!(mean.dist_sq(&g2.grad(&w2).unwrap()).unwrap().sqrt() < 1e-12);
    }

    #[test]
    fn monte_carlo_variance_within_cap() {
        for f in random_objectives(8) {
            let radius = 2.0;
            let c = f.constants(radius, BatchSize::Samples(3)).unwrap();
            let w = ParamVector::new(vec![0.9, -0.4, 0.6, 0.8]);
            assert!(w.norm() <= radius);
            let full = f.grad(&w).unwrap();
            let mut s = rng::stream(4, &[4]);
            let draws = 10_000;
            let mut acc = 0.0;
            for _ in 0..draws {
                acc += f.stochastic_grad(&w, 3, &mut s).unwrap().dist_sq(&full).unwrap();
            }
            let mc = acc / draws as f64;
            let exact = f.batch_grad_variance(&w, 3).unwrap();
            assert!((mc - exact).abs() <= 0.1 * exact, "mc {mc} exact {exact}");
            assert!(mc <= c.sigma_sq, "mc {mc} cap {}", c.sigma_sq);
        }
    }
}
