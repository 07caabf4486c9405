//! Class-conditional Gaussian-mixture data model with exact noised
//! marginals, exact scores, and exact robust/non-robust classifier
//! posteriors plus their input gradients.
//!
//! Noising a class Gaussian `N(m_y, S_y)` with signal retention `abar_t`
//! yields `N(sqrt(abar_t) m_y, abar_t S_y + (1 - abar_t) I)` in closed form,
//! so every quantity the guided sampler needs has a ground-truth value here.
//! All mixture arithmetic is done in log space with max subtraction;
//! per-(class, t) Cholesky factors and inverses are precomputed once when a
//! mixture is bound to a schedule, after which every query is pure.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Which posterior a classifier query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorKind {
    /// Bayes posterior of the noised mixture at the query's time step.
    Robust,
    /// Bayes posterior of the clean mixture, whatever the actual noise level.
    Nonrobust,
}

/// Class priors plus per-class Gaussians.
#[derive(Debug, Clone)]
pub struct ClassGmm {
    priors: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    chol_lower: Vec<DMatrix<f64>>,
    dim: usize,
}

impl ClassGmm {
    pub fn new(
        priors: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = priors.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid(
                "priors, means and covariances must have the same nonzero length",
            ));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("priors sum to {sum}, not 1")));
        }
        if priors.iter().any(|&p| p <= 0.0) {
            return Err(Error::invalid("all priors must be > 0"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid("means must share a nonzero dimension"));
        }
        let mut cov_mats = Vec::with_capacity(k);
        let mut chol_lower = Vec::with_capacity(k);
        for c in &covariances {
            if c.len() != dim || c.iter().any(|row| row.len() != dim) {
                return Err(Error::invalid("covariance shape does not match dimension"));
            }
            let m = DMatrix::from_fn(dim, dim, |i, j| c[i][j]);
            let asym = (&m - m.transpose()).norm();
            if asym > 1e-12 {
                return Err(Error::invalid(format!(
                    "covariance not symmetric (asymmetry {asym:.3e})"
                )));
            }
            let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
            chol_lower.push(chol.l());
            cov_mats.push(m);
        }
        Ok(Self {
            priors,
            means: means.into_iter().map(DVector::from_vec).collect(),
            covariances: cov_mats,
            chol_lower,
            dim,
        })
    }

    /// The default benchmark world: four well-separated classes on a circle
    /// of radius 3 in the plane, covariance 0.15 I, equal priors.
    pub fn benchmark_world() -> Self {
        let means = vec![
            vec![3.0, 0.0],
            vec![0.0, 3.0],
            vec![-3.0, 0.0],
            vec![0.0, -3.0],
        ];
        let cov = vec![vec![0.15, 0.0], vec![0.0, 0.15]];
        ClassGmm::new(vec![0.25; 4], means, vec![cov.clone(); 4])
            .expect("benchmark world parameters are valid")
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn mean(&self, y: usize) -> Vec<f64> {
        self.means[y].iter().copied().collect()
    }

    pub fn covariance(&self, y: usize) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.covariances[y][(i, j)]).collect())
            .collect()
    }

    /// Mean of the full mixture.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut m = DVector::zeros(self.dim);
        for (p, mu) in self.priors.iter().zip(&self.means) {
            m += mu * *p;
        }
        m.iter().copied().collect()
    }

    /// Draw `n` labeled points; labels follow the priors, points the labeled
    /// Gaussian. Deterministic given the RNG state.
    pub fn sample_data<R: Rng>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<(ndarray::Array2<f64>, Vec<usize>)> {
        if n == 0 {
            return Err(Error::invalid("n must be >= 1"));
        }
        let mut points = ndarray::Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = self.priors.len() - 1;
            for (k, &p) in self.priors.iter().enumerate() {
                acc += p;
                if u < acc {
                    y = k;
                    break;
                }
            }
            let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &self.means[y] + &self.chol_lower[y] * z;
            for (j, v) in x.iter().enumerate() {
                points[(i, j)] = *v;
            }
            labels.push(y);
        }
        Ok((points, labels))
    }
}

struct ClassFactor {
    mean: DVector<f64>,
    inv: DMatrix<f64>,
    /// -0.5 * (d ln 2pi + ln det C)
    log_norm: f64,
    /// sqrt(abar_t) * S_y * C^{-1}, the gain of E[x0 | x_t, y].
    x0_gain: DMatrix<f64>,
}

/// A mixture bound to a noise schedule, with per-(class, t) Gaussian
/// factors of the noised marginals precomputed for t in 0..=T.
pub struct GmmOracle {
    gmm: ClassGmm,
    num_steps: usize,
    alpha_bars: Vec<f64>,
    factors: Vec<Vec<ClassFactor>>,
}

impl GmmOracle {
    pub fn new(gmm: ClassGmm, sched: &NoiseSchedule) -> Result<Self> {
        let d = gmm.dim;
        let eye = DMatrix::identity(d, d);
        let mut factors = Vec::with_capacity(sched.num_steps() + 1);
        for t in 0..=sched.num_steps() {
            let ab = sched.alpha_bar(t);
            let sa = ab.sqrt();
            let mut row = Vec::with_capacity(gmm.num_classes());
            for y in 0..gmm.num_classes() {
                let cov = &gmm.covariances[y] * ab + &eye * (1.0 - ab);
                let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
                let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let inv = chol.inverse();
                let x0_gain = &gmm.covariances[y] * &inv * sa;
                row.push(ClassFactor {
                    mean: &gmm.means[y] * sa,
                    inv,
                    log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
                    x0_gain,
                });
            }
            factors.push(row);
        }
        Ok(Self {
            gmm,
            num_steps: sched.num_steps(),
            alpha_bars: (0..=sched.num_steps()).map(|t| sched.alpha_bar(t)).collect(),
            factors,
        })
    }

    pub fn gmm(&self) -> &ClassGmm {
        &self.gmm
    }

    pub fn num_classes(&self) -> usize {
        self.gmm.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.gmm.dim
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let min = usize::from(!allow_zero);
        if (t == 0 && !allow_zero) || t > self.num_steps {
            return Err(Error::StepOutOfRange {
                t,
                min,
                max: self.num_steps,
            });
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.gmm.dim {
            return Err(Error::ShapeMismatch {
                expected: self.gmm.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// log q_t(x | y): the exact Gaussian log-density of the noised class
    /// marginal. t = 0 is the clean density.
    pub fn noised_class_log_density(&self, x: &[f64], t: usize, y: usize) -> Result<f64> {
        self.check_t(t, true)?;
        self.check_dim(x)?;
        let f = &self.factors[t][y];
        let diff = DVector::from_row_slice(x) - &f.mean;
        let quad = (&f.inv * &diff).dot(&diff);
        Ok(f.log_norm - 0.5 * quad)
    }

    fn class_log_joint(&self, x: &DVector<f64>, t: usize) -> Vec<f64> {
        self.factors[t]
            .iter()
            .zip(&self.gmm.priors)
            .map(|(f, &p)| {
                let diff = x - &f.mean;
                let quad = (&f.inv * &diff).dot(&diff);
                p.ln() + f.log_norm - 0.5 * quad
            })
            .collect()
    }

    /// Bayes posterior over classes of the noised mixture at step t,
    /// as a log-softmax vector.
    pub fn robust_log_posterior(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t, true)?;
        self.check_dim(x)?;
        let xv = DVector::from_row_slice(x);
        Ok(log_softmax(&self.class_log_joint(&xv, t)))
    }

    /// Clean Bayes posterior evaluated wherever the query point happens to
    /// be, regardless of its actual noise level.
    pub fn nonrobust_log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.robust_log_posterior(x, 0)
    }

    /// Exact input gradient of the selected log posterior entry y.
    pub fn grad_log_posterior(
        &self,
        x: &[f64],
        t: usize,
        y: usize,
        kind: PosteriorKind,
    ) -> Result<Vec<f64>> {
        self.check_t(t, true)?;
        self.check_dim(x)?;
        let t_eff = match kind {
            PosteriorKind::Robust => t,
            PosteriorKind::Nonrobust => 0,
        };
        let xv = DVector::from_row_slice(x);
        let logp = log_softmax(&self.class_log_joint(&xv, t_eff));
        let mut grad = DVector::zeros(self.gmm.dim);
        let mut grad_y = DVector::zeros(self.gmm.dim);
        for (k, f) in self.factors[t_eff].iter().enumerate() {
            let s_k = -(&f.inv * (&xv - &f.mean));
            if k == y {
                grad_y = s_k.clone();
            }
            grad += s_k * logp[k].exp();
        }
        Ok((grad_y - grad).iter().copied().collect())
    }

    /// Score of the noised mixture marginal at step t.
    pub fn exact_score(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t, false)?;
        self.check_dim(x)?;
        let xv = DVector::from_row_slice(x);
        Ok(self.score_vec(&xv, t).iter().copied().collect())
    }

    fn score_vec(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        let resp = log_softmax(&self.class_log_joint(x, t));
        let mut score = DVector::zeros(self.gmm.dim);
        for (k, f) in self.factors[t].iter().enumerate() {
            let s_k = -(&f.inv * (x - &f.mean));
            score += s_k * resp[k].exp();
        }
        score
    }

    /// Training-free noise prediction: `-sqrt(1 - abar_t) * score`.
    pub fn exact_eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t, false)?;
        self.check_dim(x)?;
        let xv = DVector::from_row_slice(x);
        let s = self.score_vec(&xv, t);
        let c = -(1.0 - self.alpha_bars[t]).sqrt();
        Ok(s.iter().map(|v| c * v).collect())
    }

    /// Action of the transposed Jacobian of `exact_eps` on a cotangent:
    /// `J_eps^T u = -sqrt(1 - abar_t) H u`, H the mixture log-density Hessian.
    pub fn eps_vjp(&self, x: &[f64], t: usize, u: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t, false)?;
        self.check_dim(x)?;
        self.check_dim(u)?;
        let xv = DVector::from_row_slice(x);
        let uv = DVector::from_row_slice(u);
        let resp = log_softmax(&self.class_log_joint(&xv, t));
        // H u = sum_k r_k (-C_k^{-1} u + s_k (s_k . u)) - sbar (sbar . u)
        let mut hu = DVector::zeros(self.gmm.dim);
        let mut sbar = DVector::zeros(self.gmm.dim);
        for (k, f) in self.factors[t].iter().enumerate() {
            let r = resp[k].exp();
            let s_k = -(&f.inv * (&xv - &f.mean));
            hu += (-(&f.inv * &uv) + &s_k * s_k.dot(&uv)) * r;
            sbar += s_k * r;
        }
        hu -= &sbar * sbar.dot(&uv);
        let c = -(1.0 - self.alpha_bars[t]).sqrt();
        Ok(hu.iter().map(|v| c * v).collect())
    }

    /// Posterior mean of the clean point given the noisy one:
    /// responsibility-weighted per-class Gaussian conditional means.
    pub fn posterior_mean_x0(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t, false)?;
        self.check_dim(x)?;
        let xv = DVector::from_row_slice(x);
        let resp = log_softmax(&self.class_log_joint(&xv, t));
        let mut out = DVector::zeros(self.gmm.dim);
        for (k, f) in self.factors[t].iter().enumerate() {
            let cond = &self.gmm.means[k] + &f.x0_gain * (&xv - &f.mean);
            out += cond * resp[k].exp();
        }
        Ok(out.iter().copied().collect())
    }
}

/// log softmax with max subtraction.
pub(crate) fn log_softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    a.iter().map(|v| v - lse).collect()
}
