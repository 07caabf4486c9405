//! Classifier-guided ancestral sampling.
//!
//! Each reverse step assembles the unguided mean from a denoiser, computes a
//! classifier gradient through one of four paths (plain or denoised-estimate
//! chain rule, raw or ADAM-adjusted), shifts the mean by the configured
//! guidance rule, and records the conditioning term plus diagnostics in a
//! per-chain trace.

pub mod adam;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gmm::{GmmOracle, PosteriorKind};
use crate::nn::{time_features, Mlp};
use crate::schedule::NoiseSchedule;
use adam::{adam_transform, AdamState};

/// How the classifier gradient shifts the reverse-step mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceRule {
    /// `mu + s sigma^2 g`.
    Classic,
    /// `mu + s sigma^2 |mu| g / |g|`; the gradient only contributes its
    /// direction, so the scale stays comparable across setups.
    #[default]
    Normalized,
}

/// Order of the ADAM adjustment relative to the normalization of the
/// normalized rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdamOrder {
    /// Adjust the raw gradient, then normalize what the rule consumes.
    #[default]
    TransformThenNormalize,
    /// Normalize the raw gradient first, then adjust the unit vector.
    NormalizeThenTransform,
}

/// Which classifier drives the guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// Exact Bayes posterior of the noised mixture.
    GmmRobust,
    /// Exact clean Bayes posterior evaluated on noisy latents.
    GmmNonrobust,
    /// A trained network; robustness is a property of how it was trained.
    Mlp,
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub variant: GuidanceRule,
    pub use_x0_pred: bool,
    pub use_adam: bool,
    pub adam_order: AdamOrder,
    pub target_class: usize,
    pub classifier_kind: ClassifierKind,
    pub num_chains: usize,
    /// Steps at which the trace keeps a copy of the pre-update state.
    pub snapshot_steps: Vec<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 0.04,
            variant: GuidanceRule::Normalized,
            use_x0_pred: false,
            use_adam: false,
            adam_order: AdamOrder::default(),
            target_class: 0,
            classifier_kind: ClassifierKind::GmmRobust,
            num_chains: 64,
            snapshot_steps: Vec::new(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 {
            return Err(Error::invalid("guidance scale must be >= 0"));
        }
        if self.num_chains == 0 {
            return Err(Error::invalid("num_chains must be >= 1"));
        }
        Ok(())
    }
}

/// Noise-prediction source for the sampler.
pub enum DenoiserHandle<'a> {
    GmmExact(&'a GmmOracle),
    Mlp(&'a Mlp),
}

impl DenoiserHandle<'_> {
    pub fn dim(&self) -> usize {
        match self {
            DenoiserHandle::GmmExact(o) => o.dim(),
            DenoiserHandle::Mlp(net) => net.data_dim(),
        }
    }

    pub fn eps_batch(&self, x: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
        match self {
            DenoiserHandle::GmmExact(o) => {
                let mut out = Array2::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let e = o.exact_eps(row.as_slice().unwrap(), t)?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&e));
                }
                Ok(out)
            }
            DenoiserHandle::Mlp(net) => {
                let tf = time_feature_rows(t, sched, x.nrows());
                net.forward(x, Some(&tf))
            }
        }
    }

    /// `J_eps^T u` per row, J the Jacobian of the noise prediction in x.
    pub fn eps_vjp_batch(
        &self,
        x: &Array2<f64>,
        t: usize,
        u: &Array2<f64>,
        sched: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        match self {
            DenoiserHandle::GmmExact(o) => {
                let mut out = Array2::zeros(x.raw_dim());
                for (i, (row, urow)) in x.rows().into_iter().zip(u.rows()).enumerate() {
                    let v = o.eps_vjp(row.as_slice().unwrap(), t, urow.as_slice().unwrap())?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
                }
                Ok(out)
            }
            DenoiserHandle::Mlp(net) => {
                let tf = time_feature_rows(t, sched, x.nrows());
                let full = net.vjp_input(x, Some(&tf), u)?;
                Ok(full.slice(ndarray::s![.., ..net.data_dim()]).to_owned())
            }
        }
    }
}

/// Classifier the guidance differentiates through.
pub enum ClassifierHandle<'a> {
    GmmRobust(&'a GmmOracle),
    GmmNonrobust(&'a GmmOracle),
    Mlp(&'a Mlp),
}

impl ClassifierHandle<'_> {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            ClassifierHandle::GmmRobust(_) => ClassifierKind::GmmRobust,
            ClassifierHandle::GmmNonrobust(_) => ClassifierKind::GmmNonrobust,
            ClassifierHandle::Mlp(_) => ClassifierKind::Mlp,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierHandle::GmmRobust(o) | ClassifierHandle::GmmNonrobust(o) => o.num_classes(),
            ClassifierHandle::Mlp(net) => net.output_dim(),
        }
    }

    /// Log posterior rows at noise level t (t = 0 means clean).
    pub fn log_posterior_batch(
        &self,
        x: &Array2<f64>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        match self {
            ClassifierHandle::GmmRobust(o) => {
                let mut out = Array2::zeros((x.nrows(), o.num_classes()));
                for (i, row) in x.rows().into_iter().enumerate() {
                    let lp = o.robust_log_posterior(row.as_slice().unwrap(), t)?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&lp));
                }
                Ok(out)
            }
            ClassifierHandle::GmmNonrobust(o) => {
                let mut out = Array2::zeros((x.nrows(), o.num_classes()));
                for (i, row) in x.rows().into_iter().enumerate() {
                    let lp = o.nonrobust_log_posterior(row.as_slice().unwrap())?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&lp));
                }
                Ok(out)
            }
            ClassifierHandle::Mlp(net) => {
                let tf = net
                    .time_conditioning()
                    .then(|| time_feature_rows(t, sched, x.nrows()));
                net.log_posterior(x, tf.as_ref())
            }
        }
    }

    /// Gradient of the target-class log posterior per row.
    pub fn grad_target_batch(
        &self,
        x: &Array2<f64>,
        t: usize,
        target: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        match self {
            ClassifierHandle::GmmRobust(o) => {
                let mut out = Array2::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let g = o.grad_log_posterior(
                        row.as_slice().unwrap(),
                        t,
                        target,
                        PosteriorKind::Robust,
                    )?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
                }
                Ok(out)
            }
            ClassifierHandle::GmmNonrobust(o) => {
                let mut out = Array2::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let g = o.grad_log_posterior(
                        row.as_slice().unwrap(),
                        t,
                        target,
                        PosteriorKind::Nonrobust,
                    )?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
                }
                Ok(out)
            }
            ClassifierHandle::Mlp(net) => {
                let tf = net
                    .time_conditioning()
                    .then(|| time_feature_rows(t, sched, x.nrows()));
                net.input_gradient(x, tf.as_ref(), target)
            }
        }
    }
}

fn time_feature_rows(t: usize, sched: &NoiseSchedule, n: usize) -> Array2<f64> {
    let f = time_features(t, sched);
    let mut tf = Array2::zeros((n, 2));
    for mut row in tf.rows_mut() {
        row[0] = f[0];
        row[1] = f[1];
    }
    tf
}

/// World bindings for a sampling run. The denoiser is optional so that
/// plain-gradient queries can run without one; sampling requires it.
pub struct WorldHandles<'a> {
    pub denoiser: Option<DenoiserHandle<'a>>,
    pub classifier: ClassifierHandle<'a>,
}

impl WorldHandles<'_> {
    fn validate(&self, cfg: &GuidanceConfig) -> Result<()> {
        cfg.validate()?;
        if self.classifier.kind() != cfg.classifier_kind {
            return Err(Error::invalid(format!(
                "classifier handle {:?} does not match configured kind {:?}",
                self.classifier.kind(),
                cfg.classifier_kind
            )));
        }
        if cfg.target_class >= self.classifier.num_classes() {
            return Err(Error::invalid(format!(
                "target class {} out of range (K = {})",
                cfg.target_class,
                self.classifier.num_classes()
            )));
        }
        if cfg.use_x0_pred && self.denoiser.is_none() {
            return Err(Error::MissingHandle("denoiser (required by x0 prediction)"));
        }
        Ok(())
    }
}

/// Classifier gradient `g_t` for a batch of states, through the configured
/// path. With x0 prediction the gradient is pulled back through the one-step
/// denoised estimate: `g = (u - sqrt(1 - abar) J_eps^T u) / sqrt(abar)`
/// with `u` the clean-classifier gradient at the estimate.
pub fn classifier_grad(
    x: &Array2<f64>,
    t: usize,
    cfg: &GuidanceConfig,
    handles: &WorldHandles,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    handles.validate(cfg)?;
    Ok(grad_and_logp(x, t, cfg, handles, sched, None)?.0)
}

/// Shared gradient/diagnostic computation. When `eps_hat` for step t is
/// already known the x0-prediction path reuses it.
fn grad_and_logp(
    x: &Array2<f64>,
    t: usize,
    cfg: &GuidanceConfig,
    handles: &WorldHandles,
    sched: &NoiseSchedule,
    eps_hat: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let y = cfg.target_class;
    if cfg.use_x0_pred {
        let den = handles
            .denoiser
            .as_ref()
            .ok_or(Error::MissingHandle("denoiser (required by x0 prediction)"))?;
        let eps_owned;
        let eps = match eps_hat {
            Some(e) => e,
            None => {
                eps_owned = den.eps_batch(x, t, sched)?;
                &eps_owned
            }
        };
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        // one-step denoised estimate per row
        let x0 = (x - &(eps * sn)) / sa;
        let u = handles.classifier.grad_target_batch(&x0, 0, y, sched)?;
        let jvp = den.eps_vjp_batch(x, t, &u, sched)?;
        let g = (&u - &(jvp * sn)) / sa;
        let lp = handles.classifier.log_posterior_batch(&x0, 0, sched)?;
        let logp = lp.column(y).to_vec();
        Ok((g, logp))
    } else {
        let g = handles.classifier.grad_target_batch(x, t, y, sched)?;
        let lp = handles.classifier.log_posterior_batch(x, t, sched)?;
        Ok((g, lp.column(y).to_vec()))
    }
}

/// Shift the mean along the raw gradient: `mu + s sigma^2 g`.
pub fn guided_mean_classic(mu: &[f64], sigma2: f64, g: &[f64], s: f64) -> Vec<f64> {
    mu.iter()
        .zip(g)
        .map(|(m, gi)| m + s * sigma2 * gi)
        .collect()
}

/// Shift the mean along the gradient direction with norm
/// `s sigma^2 |mu|`. A zero gradient contributes nothing.
pub fn guided_mean_normalized(mu: &[f64], sigma2: f64, g: &[f64], s: f64) -> Vec<f64> {
    let gn = norm(g);
    if gn == 0.0 {
        return mu.to_vec();
    }
    let mn = norm(mu);
    let c = s * sigma2 * mn / gn;
    mu.iter().zip(g).map(|(m, gi)| m + c * gi).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-(chain, step) diagnostics. `grad_norm` is the norm of the gradient
/// the guidance rule consumed (after ADAM when enabled); `raw_grad_norm` is
/// the classifier gradient before adjustment.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub cond: Vec<f64>,
    pub cond_norm: f64,
    pub grad_norm: f64,
    pub raw_grad_norm: f64,
    pub logp_target: f64,
    pub mu_norm: f64,
}

/// Full per-chain record of a sampling run, in execution order (descending t).
pub struct SamplerTrace {
    pub steps: Vec<usize>,
    /// records[chain][step_index]
    pub records: Vec<Vec<StepRecord>>,
    /// pre-update states at the configured snapshot steps
    pub snapshots: Vec<(usize, Array2<f64>)>,
    /// per-chain ADAM step counts (empty when ADAM is off)
    pub adam_steps: Vec<u64>,
}

impl SamplerTrace {
    pub fn num_chains(&self) -> usize {
        self.records.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Run the guided ancestral sampler. Chains start from the standard normal
/// prior and step down t = T..1; the last step adds no noise. Deterministic
/// given (config, seed, world).
pub fn sample_guided(
    handles: &WorldHandles,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Array2<f64>, SamplerTrace)> {
    handles.validate(cfg)?;
    let den = handles
        .denoiser
        .as_ref()
        .ok_or(Error::MissingHandle("denoiser"))?;
    let d = den.dim();
    let n = cfg.num_chains;
    let big_t = sched.num_steps();

    let mut rngs = chain_rngs(seed, n);
    let mut x = Array2::zeros((n, d));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..d {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut adam_states: Vec<AdamState> = if cfg.use_adam {
        (0..n).map(|_| AdamState::new(d)).collect()
    } else {
        Vec::new()
    };

    let mut trace = SamplerTrace {
        steps: Vec::with_capacity(big_t),
        records: vec![Vec::with_capacity(big_t); n],
        snapshots: Vec::new(),
        adam_steps: Vec::new(),
    };

    for t in (1..=big_t).rev() {
        if cfg.snapshot_steps.contains(&t) {
            trace.snapshots.push((t, x.clone()));
        }
        let eps_hat = den.eps_batch(&x, t, sched)?;
        // mu = (x - beta eps / sqrt(1 - abar)) / sqrt(alpha), batched
        let coeff = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let mu = (&x - &(&eps_hat * coeff)) * inv_sqrt_alpha;

        let (g_raw, logp) = grad_and_logp(&x, t, cfg, handles, sched, Some(&eps_hat))?;
        let sigma2 = sched.posterior_variance(t);
        trace.steps.push(t);

        let mut x_next = Array2::zeros((n, d));
        for i in 0..n {
            let mu_row: Vec<f64> = mu.row(i).to_vec();
            let raw: Vec<f64> = g_raw.row(i).to_vec();
            let raw_norm = norm(&raw);
            let g_eff = apply_adjustments(&raw, cfg, adam_states.get_mut(i))?;
            let mu_prime = match cfg.variant {
                GuidanceRule::Classic => guided_mean_classic(&mu_row, sigma2, &g_eff, cfg.scale),
                GuidanceRule::Normalized => {
                    guided_mean_normalized(&mu_row, sigma2, &g_eff, cfg.scale)
                }
            };
            let cond: Vec<f64> = mu_prime.iter().zip(&mu_row).map(|(a, b)| a - b).collect();
            trace.records[i].push(StepRecord {
                t,
                cond_norm: norm(&cond),
                grad_norm: norm(&g_eff),
                raw_grad_norm: raw_norm,
                logp_target: logp[i],
                mu_norm: norm(&mu_row),
                cond,
            });
            let sigma = sigma2.sqrt();
            for j in 0..d {
                let z: f64 = if t > 1 {
                    rngs[i].sample(StandardNormal)
                } else {
                    0.0
                };
                x_next[(i, j)] = mu_prime[j] + sigma * z;
            }
        }
        x = x_next;
    }

    if cfg.use_adam {
        trace.adam_steps = adam_states.iter().map(|s| s.step_count()).collect();
    }
    Ok((x, trace))
}

fn apply_adjustments(
    raw: &[f64],
    cfg: &GuidanceConfig,
    state: Option<&mut AdamState>,
) -> Result<Vec<f64>> {
    if !cfg.use_adam {
        return Ok(raw.to_vec());
    }
    let state = state.expect("adam state allocated per chain");
    match cfg.adam_order {
        AdamOrder::TransformThenNormalize => adam_transform(raw, state),
        AdamOrder::NormalizeThenTransform => {
            let n = norm(raw);
            let unit: Vec<f64> = if n == 0.0 {
                vec![0.0; raw.len()]
            } else {
                raw.iter().map(|v| v / n).collect()
            };
            adam_transform(&unit, state)
        }
    }
}

/// Unguided ancestral sampling with the same randomness consumption as the
/// guided sampler, so an s = 0 guided run is bitwise identical.
pub fn sample_unguided(
    denoiser: &DenoiserHandle,
    sched: &NoiseSchedule,
    num_chains: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if num_chains == 0 {
        return Err(Error::invalid("num_chains must be >= 1"));
    }
    let d = denoiser.dim();
    let big_t = sched.num_steps();
    let mut rngs = chain_rngs(seed, num_chains);
    let mut x = Array2::zeros((num_chains, d));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..d {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    for t in (1..=big_t).rev() {
        let eps_hat = denoiser.eps_batch(&x, t, sched)?;
        let coeff = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let mu = (&x - &(&eps_hat * coeff)) * inv_sqrt_alpha;
        let sigma = sched.posterior_variance(t).sqrt();
        let mut x_next = mu;
        if t > 1 {
            for i in 0..num_chains {
                for j in 0..d {
                    let z: f64 = rngs[i].sample(StandardNormal);
                    x_next[(i, j)] += sigma * z;
                }
            }
        }
        x = x_next;
    }
    Ok(x)
}

fn chain_rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rng
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::ClassGmm;
    use crate::schedule::linear_schedule;
    use approx::assert_relative_eq;

    fn world() -> (GmmOracle, NoiseSchedule) {
        let sched = linear_schedule(40, 1e-3, 0.05).unwrap();
        let oracle = GmmOracle::new(ClassGmm::benchmark_world(), &sched).unwrap();
        (oracle, sched)
    }

    #[test]
    fn classic_mean_identities() {
        let mu = [1.0, -2.0];
        let g = [0.5, 0.25];
        assert_eq!(guided_mean_classic(&mu, 0.3, &g, 0.0), mu.to_vec());
        let m1 = guided_mean_classic(&mu, 0.3, &g, 2.0);
        let m2 = guided_mean_classic(&mu, 0.3, &g, 4.0);
        for j in 0..2 {
            let c1 = m1[j] - mu[j];
            let c2 = m2[j] - mu[j];
            assert_relative_eq!(c2, 2.0 * c1, max_relative = 1e-15);
        }
        let cn: f64 = m1
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let gn = (0.5f64 * 0.5 + 0.25 * 0.25).sqrt();
        assert_relative_eq!(cn, 2.0 * 0.3 * gn, max_relative = 1e-12);
    }

    #[test]
    fn normalized_mean_identities() {
        let mu = [3.0, 4.0];
        let g = [0.2, -0.1];
        let s = 1.7;
        let sigma2 = 0.05;
        let m = guided_mean_normalized(&mu, sigma2, &g, s);
        let cn: f64 = m
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(cn, s * sigma2 * 5.0, max_relative = 1e-12);
        // invariance to positive rescaling of g
        let g2: Vec<f64> = g.iter().map(|v| 37.0 * v).collect();
        let m2 = guided_mean_normalized(&mu, sigma2, &g2, s);
        for j in 0..2 {
            assert_relative_eq!(m[j], m2[j], max_relative = 1e-12);
        }
        // zero gradient and zero scale are both the identity
        assert_eq!(guided_mean_normalized(&mu, sigma2, &[0.0, 0.0], s), mu.to_vec());
        assert_eq!(guided_mean_normalized(&mu, sigma2, &g, 0.0), mu.to_vec());
    }

    #[test]
    fn single_class_world_has_zero_gradient_on_all_paths() {
        let sched = linear_schedule(20, 1e-3, 0.05).unwrap();
        let gmm = ClassGmm::new(vec![1.0], vec![vec![0.5, -0.5]], vec![vec![vec![0.2, 0.0], vec![0.0, 0.2]]]).unwrap();
        let oracle = GmmOracle::new(gmm, &sched).unwrap();
        for use_x0 in [false, true] {
            let cfg = GuidanceConfig {
                use_x0_pred: use_x0,
                num_chains: 3,
                ..GuidanceConfig::default()
            };
            let handles = WorldHandles {
                denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
                classifier: ClassifierHandle::GmmRobust(&oracle),
            };
            let x = Array2::from_shape_fn((3, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64);
            let g = classifier_grad(&x, 10, &cfg, &handles, &sched).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-12), "x0={use_x0}: {g:?}");
        }
    }

    #[test]
    fn x0_gradient_approaches_clean_gradient_at_small_t() {
        // soft-covariance world: the size of the (1 - abar) correction is
        // governed by the posterior curvature, which the benchmark world's
        // tight covariances make large everywhere; unit covariances keep it
        // well under the asserted bound
        let sched = linear_schedule(200, 1e-4, 0.02).unwrap();
        let gmm = ClassGmm::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2],
        )
        .unwrap();
        let oracle = GmmOracle::new(gmm, &sched).unwrap();
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmNonrobust(&oracle),
        };
        let cfg_plain = GuidanceConfig {
            classifier_kind: ClassifierKind::GmmNonrobust,
            num_chains: 1,
            ..GuidanceConfig::default()
        };
        let cfg_x0 = GuidanceConfig {
            use_x0_pred: true,
            ..cfg_plain.clone()
        };
        let x = ndarray::array![[0.3, 0.2], [-0.5, 0.8], [1.2, -0.4]];
        let plain = classifier_grad(&x, 1, &cfg_plain, &handles, &sched).unwrap();
        let through_x0 = classifier_grad(&x, 1, &cfg_x0, &handles, &sched).unwrap();
        for (pa, pb) in plain.rows().into_iter().zip(through_x0.rows()) {
            let diff: f64 = pa
                .iter()
                .zip(pb.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = pa.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / norm <= 1e-2, "rel {}", diff / norm);
        }
    }

    #[test]
    fn missing_denoiser_rejected_for_x0_path() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            use_x0_pred: true,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: None,
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let x = Array2::zeros((2, 2));
        assert!(matches!(
            classifier_grad(&x, 5, &cfg, &handles, &sched),
            Err(Error::MissingHandle(_))
        ));
    }

    #[test]
    fn zero_scale_is_bitwise_unguided() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            scale: 0.0,
            num_chains: 8,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let (guided, _) = sample_guided(&handles, &cfg, &sched, 99).unwrap();
        let unguided =
            sample_unguided(&DenoiserHandle::GmmExact(&oracle), &sched, 8, 99).unwrap();
        assert_eq!(guided, unguided);
    }

    #[test]
    fn sampling_is_reproducible() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            num_chains: 4,
            use_adam: true,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let (a, ta) = sample_guided(&handles, &cfg, &sched, 5).unwrap();
        let (b, tb) = sample_guided(&handles, &cfg, &sched, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.steps, tb.steps);
        for (ra, rb) in ta.records.iter().zip(&tb.records) {
            for (sa, sb) in ra.iter().zip(rb) {
                assert_eq!(sa.cond, sb.cond);
            }
        }
        let (c, _) = sample_guided(&handles, &cfg, &sched, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gradient_scale_invariance_of_normalized_rule() {
        // scaling all covariances scales clean-posterior gradients by a
        // constant; the normalized no-ADAM trajectory must not care.
        // Here we test directly: a classifier handle wrapper is not
        // available, so instead verify at the guided-mean level across the
        // trace: conditioning norms obey the law at every step.
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            num_chains: 8,
            scale: 0.5,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let (_, trace) = sample_guided(&handles, &cfg, &sched, 17).unwrap();
        for rec in trace.records.iter().flatten() {
            let sigma2 = sched.posterior_variance(rec.t);
            let law = cfg.scale * sigma2 * rec.mu_norm;
            assert!(
                rec.cond_norm == 0.0 || (rec.cond_norm - law).abs() <= 1e-9,
                "t={} cond={} law={}",
                rec.t,
                rec.cond_norm,
                law
            );
        }
    }

    #[test]
    fn classic_rule_conditioning_law() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            num_chains: 4,
            variant: GuidanceRule::Classic,
            scale: 0.3,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let (_, trace) = sample_guided(&handles, &cfg, &sched, 23).unwrap();
        for rec in trace.records.iter().flatten() {
            let sigma2 = sched.posterior_variance(rec.t);
            let law = cfg.scale * sigma2 * rec.grad_norm;
            assert!(
                (rec.cond_norm - law).abs() <= 1e-9,
                "t={} cond={} law={}",
                rec.t,
                rec.cond_norm,
                law
            );
        }
    }

    #[test]
    fn adam_state_advances_once_per_step() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            num_chains: 3,
            use_adam: true,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let (_, trace) = sample_guided(&handles, &cfg, &sched, 3).unwrap();
        assert_eq!(trace.adam_steps, vec![sched.num_steps() as u64; 3]);
        // and the trace differs from the non-ADAM run
        let cfg_plain = GuidanceConfig {
            use_adam: false,
            ..cfg
        };
        let (_, plain) = sample_guided(&handles, &cfg_plain, &sched, 3).unwrap();
        let differs = trace
            .records
            .iter()
            .flatten()
            .zip(plain.records.iter().flatten())
            .any(|(a, b)| a.cond != b.cond);
        assert!(differs);
    }

    #[test]
    fn trace_covers_executed_steps_descending() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            num_chains: 2,
            snapshot_steps: vec![40, 20, 1],
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        let (_, trace) = sample_guided(&handles, &cfg, &sched, 1).unwrap();
        let expect: Vec<usize> = (1..=40).rev().collect();
        assert_eq!(trace.steps, expect);
        assert_eq!(trace.snapshots.len(), 3);
        assert_eq!(trace.snapshots[0].0, 40);
        for rec in &trace.records {
            let ts: Vec<usize> = rec.iter().map(|r| r.t).collect();
            assert_eq!(ts, expect);
        }
    }

    #[test]
    fn mismatched_classifier_kind_rejected() {
        let (oracle, sched) = world();
        let cfg = GuidanceConfig {
            classifier_kind: ClassifierKind::Mlp,
            ..GuidanceConfig::default()
        };
        let handles = WorldHandles {
            denoiser: Some(DenoiserHandle::GmmExact(&oracle)),
            classifier: ClassifierHandle::GmmRobust(&oracle),
        };
        assert!(sample_guided(&handles, &cfg, &sched, 0).is_err());
    }
}
