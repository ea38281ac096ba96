//! Synthetic distributed objectives `f(x) = (1/n) sum_i f_i(x)`, one data
//! shard per worker.
//!
//! * `Quadratic`: `f_i(x) = 1/2 ||A_i x - b_i||^2` with `A_i = diag(s_i) R`,
//!   `R` a random rotation and `s_i` in `[1, 10]`, so the Hessian has
//!   condition number at most 100. `b_i = A_i x*` makes `x*` the exact
//!   minimizer.
//! * `Logistic`: binary logistic regression with an optional ridge term on
//!   two Gaussian blobs. Points are drawn in a whitened space, labelled by a
//!   random hyperplane and rejected inside a margin, then every feature is
//!   rescaled by a log-uniform factor so the problem is badly conditioned.
//! * `Mlp`: one tanh hidden layer on the same data, for a non-convex smoke test.
//!
//! Stochastic gradients are minibatch gradients (quadratic: exact shard
//! gradient) plus uniform noise on `[-a, a]^p` with `a = sigma sqrt(3 / p)`,
//! which has total variance exactly `sigma^2` and is bounded.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, SeededRng};

/// Largest parameter count accepted for the MLP kind.
pub const MLP_MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Feature dimension (equals the parameter dimension except for `Mlp`).
    pub dim: usize,
    pub workers: usize,
    /// Rows per shard for logistic / MLP data. Ignored by `Quadratic`.
    pub samples_per_worker: usize,
    /// Minibatch size; `0` or `>= samples_per_worker` means full shard.
    pub batch_size: usize,
    /// Total standard deviation of the additive gradient noise.
    pub sigma: f32,
    pub hidden: usize,
    /// Half-width of the rejected band around the labelling hyperplane.
    pub margin: f32,
    /// Ridge coefficient for logistic / MLP.
    pub l2: f32,
    pub seed: u64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            kind: ProblemKind::Logistic,
            dim: 50,
            workers: 1,
            samples_per_worker: 256,
            batch_size: 32,
            sigma: 0.0,
            hidden: 16,
            margin: 0.5,
            l2: 1e-3,
            seed: 0,
        }
    }
}

impl ProblemSpec {
    pub fn param_dim(&self) -> usize {
        match self.kind {
            ProblemKind::Quadratic | ProblemKind::Logistic => self.dim,
            ProblemKind::Mlp => self.hidden * (self.dim + 2) + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Hyper("problem dimension must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::Topology("need at least one worker"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Hyper("sigma must be finite and nonnegative"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Hyper("l2 must be finite and nonnegative"));
        }
        match self.kind {
            ProblemKind::Quadratic => Ok(()),
            ProblemKind::Logistic | ProblemKind::Mlp => {
                if self.samples_per_worker == 0 {
                    return Err(Error::Hyper("samples_per_worker must be positive"));
                }
                if !(self.margin >= 0.0 && self.margin < 3.0) {
                    return Err(Error::Hyper("margin must lie in [0, 3)"));
                }
                if self.kind == ProblemKind::Mlp && (self.hidden == 0 || self.param_dim() > MLP_MAX_PARAMS) {
                    return Err(Error::Hyper("mlp needs 1..=10000 parameters"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Shard {
    /// Row-major `rows x cols`.
    features: Vec<f32>,
    /// Targets `b` (quadratic) or labels in {-1, +1}.
    targets: Vec<f32>,
}

impl Shard {
    fn rows(&self) -> usize {
        self.targets.len()
    }

    fn row(&self, r: usize, cols: usize) -> &[f32] {
        &self.features[r * cols..(r + 1) * cols]
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    spec: ProblemSpec,
    shards: Vec<Shard>,
    minimizer: Option<DenseVector>,
    initial: DenseVector,
    smoothness: f32,
}

fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthogonal matrix (row-major) by modified Gram-Schmidt.
fn random_rotation(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut q: Vec<f64> = (0..d * d).map(|_| normal(rng)).collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| q[i * d + k] * q[j * d + k]).sum();
            for k in 0..d {
                q[i * d + k] -= dot * q[j * d + k];
            }
        }
        let norm = libm::sqrt((0..d).map(|k| q[i * d + k] * q[i * d + k]).sum::<f64>());
        for k in 0..d {
            q[i * d + k] /= norm;
        }
    }
    q
}

#[inline]
fn dot(a: &[f32], x: &[f32]) -> f64 {
    a.iter().zip(x).map(|(&a, &x)| f64::from(a) * f64::from(x)).sum()
}

/// `log(1 + exp(-z))`, stable for large |z|.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        libm::log1p(libm::exp(-z))
    } else {
        -z + libm::log1p(libm::exp(z))
    }
}

/// `sigma(-z) = 1 / (1 + exp(z))`.
fn sigmoid_neg(z: f64) -> f64 {
    if z > 0.0 {
        let e = libm::exp(-z);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + libm::exp(z))
    }
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::for_stream(spec.seed, u64::MAX);
        match spec.kind {
            ProblemKind::Quadratic => Ok(Self::quadratic(spec, &mut rng)),
            ProblemKind::Logistic | ProblemKind::Mlp => Ok(Self::classification(spec, &mut rng)),
        }
    }

    fn quadratic(spec: ProblemSpec, rng: &mut SeededRng) -> Self {
        let d = spec.dim;
        let rotation = random_rotation(d, rng);
        let scale_dist = Uniform::new(1.0f64, 10.0).expect("valid range");
        let x_star: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let mut curvature = vec![0f64; d];
        let shards = (0..spec.workers)
            .map(|_| {
                let scales: Vec<f64> = (0..d).map(|_| scale_dist.sample(rng)).collect();
                let mut features = Vec::with_capacity(d * d);
                let mut targets = Vec::with_capacity(d);
                for (r, &s) in scales.iter().enumerate() {
                    curvature[r] += s * s;
                    let row: Vec<f32> = (0..d).map(|k| (s * rotation[r * d + k]) as f32).collect();
                    targets.push(dot(&row, &x_star.iter().map(|&v| v as f32).collect::<Vec<_>>()) as f32);
                    features.extend(row);
                }
                Shard { features, targets }
            })
            .collect();
        let smoothness = curvature.iter().copied().fold(0.0, f64::max) / spec.workers as f64;
        Self {
            spec,
            shards,
            minimizer: Some(DenseVector::from_vec_unchecked(x_star.iter().map(|&v| v as f32).collect())),
            initial: DenseVector::zeros(d),
            smoothness: smoothness as f32,
        }
    }

    fn classification(spec: ProblemSpec, rng: &mut SeededRng) -> Self {
        let d = spec.dim;
        let mut normal_dir: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let len = libm::sqrt(normal_dir.iter().map(|v| v * v).sum::<f64>());
        normal_dir.iter_mut().for_each(|v| *v /= len);
        let log_scale = Uniform::new(libm::log(0.1f64), libm::log(10.0)).expect("valid range");
        let feature_scale: Vec<f64> = (0..d).map(|_| libm::exp(log_scale.sample(rng))).collect();

        let mut max_row_sq = 0f64;
        let shards = (0..spec.workers)
            .map(|_| {
                let mut features = Vec::with_capacity(spec.samples_per_worker * d);
                let mut targets = Vec::with_capacity(spec.samples_per_worker);
                while targets.len() < spec.samples_per_worker {
                    let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                    let side: f64 = z.iter().zip(&normal_dir).map(|(a, b)| a * b).sum();
                    if libm::fabs(side) < f64::from(spec.margin) {
                        continue;
                    }
                    let row: Vec<f32> = z.iter().zip(&feature_scale).map(|(z, s)| (z * s) as f32).collect();
                    max_row_sq = max_row_sq.max(dot(&row, &row));
                    features.extend(row);
                    targets.push(if side > 0.0 { 1.0 } else { -1.0 });
                }
                Shard { features, targets }
            })
            .collect();

        let (initial, smoothness) = match spec.kind {
            ProblemKind::Mlp => {
                let h = spec.hidden;
                let mut x = vec![0f32; spec.param_dim()];
                let w1 = 1.0 / libm::sqrt(d as f64);
                let w2 = 1.0 / libm::sqrt(h as f64);
                for v in &mut x[..h * d] {
                    *v = (normal(rng) * w1) as f32;
                }
                for v in &mut x[h * d + h..h * d + 2 * h] {
                    *v = (normal(rng) * w2) as f32;
                }
                (DenseVector::from_vec_unchecked(x), 0.0)
            }
            _ => (
                DenseVector::zeros(d),
                (0.25 * max_row_sq + f64::from(spec.l2)) as f32,
            ),
        };
        Self {
            spec,
            shards,
            minimizer: None,
            initial,
            smoothness,
        }
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn param_dim(&self) -> usize {
        self.spec.param_dim()
    }

    pub fn workers(&self) -> usize {
        self.spec.workers
    }

    /// Known minimizer (quadratic only).
    pub fn minimizer(&self) -> Option<&DenseVector> {
        self.minimizer.as_ref()
    }

    pub fn initial_point(&self) -> DenseVector {
        self.initial.clone()
    }

    /// Upper estimate of the gradient Lipschitz constant (0 when unknown).
    pub fn smoothness_estimate(&self) -> f32 {
        self.smoothness
    }

    fn check(&self, worker: usize, x: &DenseVector) -> Result<()> {
        if worker >= self.spec.workers {
            return Err(Error::Topology("worker id out of range"));
        }
        x.check_dim(self.param_dim())
    }

    /// Adds the loss and gradient of one sample (or quadratic row) to the
    /// accumulators, returns the loss.
    fn accumulate(&self, shard: &Shard, r: usize, x: &[f32], grad: Option<&mut [f64]>) -> f64 {
        let d = self.spec.dim;
        let a = shard.row(r, d);
        let y = f64::from(shard.targets[r]);
        match self.spec.kind {
            ProblemKind::Quadratic => {
                let resid = dot(a, x) - y;
                if let Some(g) = grad {
                    for (gk, &ak) in g.iter_mut().zip(a) {
                        *gk += resid * f64::from(ak);
                    }
                }
                0.5 * resid * resid
            }
            ProblemKind::Logistic => {
                let margin = y * dot(a, x);
                if let Some(g) = grad {
                    let coef = -y * sigmoid_neg(margin);
                    for (gk, &ak) in g.iter_mut().zip(a) {
                        *gk += coef * f64::from(ak);
                    }
                }
                softplus_neg(margin)
            }
            ProblemKind::Mlp => {
                let h = self.spec.hidden;
                let (w1, rest) = x.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let act: Vec<f64> = (0..h)
                    .map(|j| libm::tanh(dot(&w1[j * d..(j + 1) * d], a) + f64::from(b1[j])))
                    .collect();
                let logit = act.iter().zip(w2).map(|(a, &w)| a * f64::from(w)).sum::<f64>() + f64::from(b2[0]);
                let margin = y * logit;
                if let Some(g) = grad {
                    let dl = -y * sigmoid_neg(margin);
                    let (gw1, grest) = g.split_at_mut(h * d);
                    let (gb1, grest) = grest.split_at_mut(h);
                    let (gw2, gb2) = grest.split_at_mut(h);
                    gb2[0] += dl;
                    for j in 0..h {
                        gw2[j] += dl * act[j];
                        let dh = dl * f64::from(w2[j]) * (1.0 - act[j] * act[j]);
                        gb1[j] += dh;
                        for (gk, &ak) in gw1[j * d..(j + 1) * d].iter_mut().zip(a) {
                            *gk += dh * f64::from(ak);
                        }
                    }
                }
                softplus_neg(margin)
            }
        }
    }

    /// Sample-averaged data term for classification, plain sum for quadratic.
    fn data_weight(&self, rows: usize) -> f64 {
        match self.spec.kind {
            ProblemKind::Quadratic => 1.0,
            _ => 1.0 / rows as f64,
        }
    }

    fn ridge(&self) -> f64 {
        match self.spec.kind {
            ProblemKind::Quadratic => 0.0,
            _ => f64::from(self.spec.l2),
        }
    }

    fn finish_gradient(&self, acc: Vec<f64>, weight: f64, x: &[f32]) -> DenseVector {
        let ridge = self.ridge();
        DenseVector::from_vec_unchecked(
            acc.iter()
                .zip(x)
                .map(|(&g, &xk)| (g * weight + ridge * f64::from(xk)) as f32)
                .collect(),
        )
    }

    fn ridge_loss(&self, x: &[f32]) -> f64 {
        0.5 * self.ridge() * dot(x, x)
    }

    /// Exact `f_i(x)`.
    pub fn shard_loss(&self, worker: usize, x: &DenseVector) -> Result<f64> {
        self.check(worker, x)?;
        let shard = &self.shards[worker];
        let sum: f64 = (0..shard.rows()).map(|r| self.accumulate(shard, r, x.as_slice(), None)).sum();
        Ok(sum * self.data_weight(shard.rows()) + self.ridge_loss(x.as_slice()))
    }

    /// Exact `grad f_i(x)`.
    pub fn exact_gradient(&self, worker: usize, x: &DenseVector) -> Result<DenseVector> {
        self.check(worker, x)?;
        let shard = &self.shards[worker];
        let mut acc = vec![0f64; self.param_dim()];
        for r in 0..shard.rows() {
            self.accumulate(shard, r, x.as_slice(), Some(&mut acc));
        }
        Ok(self.finish_gradient(acc, self.data_weight(shard.rows()), x.as_slice()))
    }

    /// Global objective, one pass over the pooled data of every shard.
    pub fn loss(&self, x: &DenseVector) -> Result<f64> {
        x.check_dim(self.param_dim())?;
        let (sum, rows) = self.pooled(x.as_slice(), None);
        Ok(sum * self.pooled_weight(rows) + self.ridge_loss(x.as_slice()))
    }

    /// Global gradient, one pass over the pooled data of every shard.
    pub fn full_gradient(&self, x: &DenseVector) -> Result<DenseVector> {
        x.check_dim(self.param_dim())?;
        let mut acc = vec![0f64; self.param_dim()];
        let (_, rows) = self.pooled(x.as_slice(), Some(&mut acc));
        Ok(self.finish_gradient(acc, self.pooled_weight(rows), x.as_slice()))
    }

    fn pooled(&self, x: &[f32], mut grad: Option<&mut [f64]>) -> (f64, usize) {
        let mut sum = 0.0;
        let mut rows = 0;
        for shard in &self.shards {
            for r in 0..shard.rows() {
                sum += self.accumulate(shard, r, x, grad.as_deref_mut());
            }
            rows += shard.rows();
        }
        (sum, rows)
    }

    /// Shards have equal size, so pooling all rows with weight `1/(n m)`
    /// (or `1/n` for the summed quadratic) equals the mean of shard objectives.
    fn pooled_weight(&self, rows: usize) -> f64 {
        match self.spec.kind {
            ProblemKind::Quadratic => 1.0 / self.spec.workers as f64,
            _ => 1.0 / rows as f64,
        }
    }

    /// Unbiased stochastic gradient of `f_i` with bounded noise.
    pub fn sample_gradient(&self, worker: usize, x: &DenseVector, rng: &mut SeededRng) -> Result<DenseVector> {
        self.check(worker, x)?;
        let shard = &self.shards[worker];
        let batch = self.spec.batch_size;
        let mut g = if self.spec.kind == ProblemKind::Quadratic || batch == 0 || batch >= shard.rows() {
            self.exact_gradient(worker, x)?
        } else {
            let mut acc = vec![0f64; self.param_dim()];
            for _ in 0..batch {
                let r = rng.random_range(0..shard.rows());
                self.accumulate(shard, r, x.as_slice(), Some(&mut acc));
            }
            self.finish_gradient(acc, 1.0 / batch as f64, x.as_slice())
        };
        if self.spec.sigma > 0.0 {
            let p = self.param_dim() as f64;
            let half_width = f64::from(self.spec.sigma) * libm::sqrt(3.0 / p);
            let noise = Uniform::new_inclusive(-half_width, half_width).expect("finite width");
            for gk in g.as_mut_slice() {
                *gk = (f64::from(*gk) + noise.sample(rng)) as f32;
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_norm;

    fn spec(kind: ProblemKind) -> ProblemSpec {
        ProblemSpec {
            kind,
            dim: 12,
            workers: 3,
            samples_per_worker: 40,
            batch_size: 8,
            hidden: 4,
            seed: 9,
            ..ProblemSpec::default()
        }
    }

    fn rel_close(a: &DenseVector, b: &DenseVector, tol: f64) -> bool {
        let scale = f64::from(l2_norm(b)).max(1e-12);
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| f64::from((x - y).abs()) <= tol * scale)
    }

    #[test]
    fn quadratic_minimizer_has_zero_gradient() {
        let p = Problem::new(ProblemSpec {
            sigma: 0.0,
            ..spec(ProblemKind::Quadratic)
        })
        .unwrap();
        let x_star = p.minimizer().unwrap().clone();
        for w in 0..3 {
            let g = p.sample_gradient(w, &x_star, &mut SeededRng::new(1)).unwrap();
            assert!(l2_norm(&g) < 1e-4, "{}", l2_norm(&g));
        }
        assert!(p.loss(&x_star).unwrap() < 1e-9);
    }

    #[test]
    fn noiseless_quadratic_sample_is_exact() {
        let p = Problem::new(spec(ProblemKind::Quadratic)).unwrap();
        let x = DenseVector::from_vec_unchecked((0..12).map(|i| i as f32 * 0.1 - 0.4).collect());
        let g = p.sample_gradient(1, &x, &mut SeededRng::new(2)).unwrap();
        assert_eq!(g, p.exact_gradient(1, &x).unwrap());
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let p = Problem::new(spec(ProblemKind::Quadratic)).unwrap();
        let x = DenseVector::from_vec_unchecked((0..12).map(|i| (i as f32 * 0.37).sin()).collect());
        let g = p.exact_gradient(0, &x).unwrap();
        fd_check(&p, 0, &x, &g, 1e-3, 2e-2);
    }

    #[test]
    fn logistic_and_mlp_gradients_match_finite_differences() {
        for kind in [ProblemKind::Logistic, ProblemKind::Mlp] {
            let p = Problem::new(spec(kind)).unwrap();
            let mut x = p.initial_point().into_vec();
            for (i, v) in x.iter_mut().enumerate() {
                *v += ((i * 7 % 11) as f32 - 5.0) * 0.02;
            }
            let x = DenseVector::new(x).unwrap();
            let g = p.exact_gradient(2, &x).unwrap();
            fd_check(&p, 2, &x, &g, 1e-3, 1e-2);
        }
    }

    fn fd_check(p: &Problem, w: usize, x: &DenseVector, g: &DenseVector, h: f32, tol: f64) {
        for k in 0..x.dim() {
            let mut plus = x.clone().into_vec();
            let mut minus = plus.clone();
            plus[k] += h;
            minus[k] -= h;
            let lp = p.shard_loss(w, &DenseVector::new(plus).unwrap()).unwrap();
            let lm = p.shard_loss(w, &DenseVector::new(minus).unwrap()).unwrap();
            let fd = (lp - lm) / (2.0 * f64::from(h));
            let an = f64::from(g.as_slice()[k]);
            assert!((fd - an).abs() <= tol * (1.0 + an.abs()), "coord {k}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn global_gradient_is_mean_of_shards() {
        for kind in [ProblemKind::Quadratic, ProblemKind::Logistic, ProblemKind::Mlp] {
            let p = Problem::new(spec(kind)).unwrap();
            let mut x = p.initial_point().into_vec();
            x.iter_mut().enumerate().for_each(|(i, v)| *v += (i as f32 * 0.13).cos() * 0.3);
            let x = DenseVector::new(x).unwrap();
            let shards: Vec<DenseVector> = (0..3).map(|w| p.exact_gradient(w, &x).unwrap()).collect();
            let mean: Vec<f32> = (0..x.dim())
                .map(|k| (shards.iter().map(|g| f64::from(g.as_slice()[k])).sum::<f64>() / 3.0) as f32)
                .collect();
            let mean = DenseVector::new(mean).unwrap();
            assert!(rel_close(&mean, &p.full_gradient(&x).unwrap(), 1e-6), "{kind:?}");

            let loss_mean = (0..3).map(|w| p.shard_loss(w, &x).unwrap()).sum::<f64>() / 3.0;
            assert!((loss_mean - p.loss(&x).unwrap()).abs() <= 1e-9 * loss_mean.abs().max(1.0));
        }
    }

    #[test]
    fn sample_gradient_is_unbiased() {
        let sigma = 0.5;
        let p = Problem::new(ProblemSpec {
            sigma,
            ..spec(ProblemKind::Logistic)
        })
        .unwrap();
        let x = DenseVector::from_vec_unchecked(vec![0.05; 12]);
        let exact = p.exact_gradient(0, &x).unwrap();
        let mut rng = SeededRng::new(5);
        let trials = 10_000;
        let mut mean = vec![0f64; 12];
        for _ in 0..trials {
            let g = p.sample_gradient(0, &x, &mut rng).unwrap();
            mean.iter_mut().zip(g.as_slice()).for_each(|(m, &v)| *m += f64::from(v));
        }
        // minibatch noise adds to the additive part; allow for both
        let minibatch_spread = 4.0 * f64::from(l2_norm(&exact)).max(1.0);
        for (k, m) in mean.iter().enumerate() {
            let m = m / trials as f64;
            let tol = 3.0 * (f64::from(sigma) + minibatch_spread) / 100.0;
            assert!((m - f64::from(exact.as_slice()[k])).abs() < tol);
        }
    }

    #[test]
    fn noise_only_sample_mean_within_tolerance() {
        let sigma = 2.0f32;
        let p = Problem::new(ProblemSpec {
            sigma,
            ..spec(ProblemKind::Quadratic)
        })
        .unwrap();
        let x = DenseVector::zeros(12);
        let exact = p.exact_gradient(0, &x).unwrap();
        let mut rng = SeededRng::new(6);
        let trials = 10_000;
        let mut mean = vec![0f64; 12];
        let mut total_var = 0f64;
        for _ in 0..trials {
            let g = p.sample_gradient(0, &x, &mut rng).unwrap();
            for (k, (&v, &e)) in g.as_slice().iter().zip(exact.as_slice()).enumerate() {
                mean[k] += f64::from(v);
                total_var += f64::from(v - e).powi(2);
            }
        }
        for (k, m) in mean.iter().enumerate() {
            assert!((m / trials as f64 - f64::from(exact.as_slice()[k])).abs() < 3.0 * f64::from(sigma) / 100.0);
        }
        let var = total_var / trials as f64;
        assert!((var / f64::from(sigma * sigma) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn noise_is_bounded() {
        let sigma = 1.0f32;
        let p = Problem::new(ProblemSpec {
            sigma,
            ..spec(ProblemKind::Quadratic)
        })
        .unwrap();
        let x = DenseVector::zeros(12);
        let exact = p.exact_gradient(0, &x).unwrap();
        let bound = sigma * libm::sqrtf(3.0 / 12.0) + 1e-5;
        let mut rng = SeededRng::new(7);
        for _ in 0..1000 {
            let g = p.sample_gradient(0, &x, &mut rng).unwrap();
            for (v, e) in g.as_slice().iter().zip(exact.as_slice()) {
                assert!((v - e).abs() <= bound * (1.0 + e.abs() * 1e-6));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Problem::new(spec(ProblemKind::Logistic)).unwrap();
        let b = Problem::new(spec(ProblemKind::Logistic)).unwrap();
        let x = DenseVector::from_vec_unchecked(vec![0.1; 12]);
        assert_eq!(a.loss(&x).unwrap(), b.loss(&x).unwrap());
        let mut other = spec(ProblemKind::Logistic);
        other.seed = 10;
        assert_ne!(Problem::new(other).unwrap().loss(&x).unwrap(), a.loss(&x).unwrap());
    }

    #[test]
    fn validation() {
        assert!(Problem::new(ProblemSpec { dim: 0, ..spec(ProblemKind::Logistic) }).is_err());
        assert!(Problem::new(ProblemSpec { sigma: -1.0, ..spec(ProblemKind::Logistic) }).is_err());
        assert!(Problem::new(ProblemSpec { hidden: 1000, dim: 100, ..spec(ProblemKind::Mlp) }).is_err());
        let p = Problem::new(spec(ProblemKind::Logistic)).unwrap();
        assert!(p.sample_gradient(3, &DenseVector::zeros(12), &mut SeededRng::new(0)).is_err());
        assert!(p.sample_gradient(0, &DenseVector::zeros(11), &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn quadratic_conditioning() {
        let p = Problem::new(spec(ProblemKind::Quadratic)).unwrap();
        // Hessian eigenvalues are mean_i s_ij^2 in [1, 100]
        assert!(p.smoothness_estimate() <= 100.0 && p.smoothness_estimate() >= 1.0);
    }
}
