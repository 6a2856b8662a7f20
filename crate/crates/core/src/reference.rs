//! Reference posteriors: a Hamiltonian Monte Carlo sampler for tiny models
//! and the closed-form conjugate linear-Gaussian posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::model::{log_prior_and_grad, nll_and_grad, Dataset, MlpSpec, ParameterVector};
use crate::rng::{derive_seed, rng};

/// A differentiable log density.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// Log density (up to a constant) and its gradient at `x`.
    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F> LogDensity for (usize, F)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.0
    }

    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.1)(x))
    }
}

fn default_prior_std() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub num_samples: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "one")]
    pub thinning: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    /// Doubling/halving step-size search during burn-in.
    #[serde(default)]
    pub adapt_step_size: bool,
}

fn one() -> usize {
    1
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            config_bail!("step_size must be positive");
        }
        if self.leapfrog_steps == 0 || self.num_samples == 0 || self.thinning == 0 {
            config_bail!("leapfrog_steps, num_samples and thinning must be positive");
        }
        if !(self.prior_std > 0.0) {
            config_bail!("prior_std must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub acceptance_rate: f64,
    pub mean_potential: f64,
    pub sample_mean: Vec<f64>,
    pub sample_variance: Vec<f64>,
    pub final_step_size: f64,
    pub warnings: Vec<String>,
}

/// `steps` leapfrog steps of size `eps` for the Hamiltonian with potential
/// `-log p` and identity mass.
pub fn leapfrog<F>(
    position: &[f64],
    momentum: &[f64],
    mut grad_log_p: F,
    eps: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut q = position.to_vec();
    let mut p = momentum.to_vec();
    let mut g = grad_log_p(&q)?;
    for _ in 0..steps {
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * eps * gi;
        }
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += eps * pi;
        }
        g = grad_log_p(&q)?;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * eps * gi;
        }
    }
    Ok((q, p))
}

/// Draws `cfg.num_samples` post-burn-in, thinned samples from `target`
/// starting at `init`.
pub fn hmc_sample<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &HmcConfig,
) -> Result<(Vec<Vec<f64>>, ChainDiagnostics)> {
    cfg.validate()?;
    let d = target.dim();
    if init.len() != d {
        config_bail!(
            "initial position has length {}, target dim is {d}",
            init.len()
        );
    }
    let mut r = rng(cfg.seed);
    let mut q = init.to_vec();
    let (mut logp, _) = target.log_density_and_grad(&q)?;
    if !logp.is_finite() {
        return Err(Error::Divergence {
            batch: 0,
            detail: "non-finite potential at the initial position".into(),
        });
    }
    let mut eps = cfg.step_size;
    let total = cfg.burn_in + cfg.num_samples * cfg.thinning;
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut accepted = 0usize;
    let mut proposals = 0usize;
    let mut potential_sum = 0.0;
    // burn-in acceptance window for step-size search
    let (mut win_acc, mut win_n) = (0usize, 0usize);
    // the searched step size whose window rate came closest to 0.7 (rate ≥ 0.6)
    let mut best: Option<(f64, f64)> = None;

    for iter in 0..total {
        let p0: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let (q1, p1) = leapfrog(
            &q,
            &p0,
            |x| target.log_density_and_grad(x).map(|(_, g)| g),
            eps,
            cfg.leapfrog_steps,
        )?;
        let (logp1, _) = target.log_density_and_grad(&q1)?;
        let kinetic0: f64 = 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let kinetic1: f64 = 0.5 * p1.iter().map(|v| v * v).sum::<f64>();
        let log_ratio = (logp1 - kinetic1) - (logp - kinetic0);
        let accept = logp1.is_finite() && (log_ratio >= 0.0 || r.random::<f64>().ln() < log_ratio);
        if accept {
            q = q1;
            logp = logp1;
        }
        if iter < cfg.burn_in {
            win_n += 1;
            win_acc += usize::from(accept);
            if cfg.adapt_step_size && win_n == 20 {
                let rate = win_acc as f64 / win_n as f64;
                if rate >= 0.6 && best.is_none_or(|(_, b)| (rate - 0.7).abs() <= (b - 0.7).abs()) {
                    best = Some((eps, rate));
                }
                if rate < 0.6 {
                    eps *= 0.5;
                } else if rate > 0.8 {
                    eps *= 2.0;
                }
                win_n = 0;
                win_acc = 0;
            }
            if cfg.adapt_step_size && iter + 1 == cfg.burn_in {
                if let Some((e, _)) = best {
                    eps = e;
                }
            }
            continue;
        }
        proposals += 1;
        accepted += usize::from(accept);
        if !logp.is_finite() {
            return Err(Error::Divergence {
                batch: iter,
                detail: "non-finite potential".into(),
            });
        }
        if (iter - cfg.burn_in + 1) % cfg.thinning == 0 {
            potential_sum += -logp;
            samples.push(q.clone());
        }
    }

    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in &samples {
        for ((vv, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *vv += (v - m) * (v - m) / (n - 1.0).max(1.0);
        }
    }
    let acceptance_rate = accepted as f64 / proposals.max(1) as f64;
    let mut warnings = Vec::new();
    if acceptance_rate < 0.2 {
        warnings.push(format!(
            "acceptance rate {acceptance_rate:.3} below 0.2; step size {eps} is likely too large"
        ));
        log::warn!("{}", warnings[0]);
    }
    Ok((
        samples,
        ChainDiagnostics {
            acceptance_rate,
            mean_potential: potential_sum / n,
            sample_mean: mean,
            sample_variance: var,
            final_step_size: eps,
            warnings,
        },
    ))
}

/// Runs chains with seeds `seed, seed+1, ...` and reports the largest
/// disagreement between chain means, in units of the pooled posterior std.
pub fn multi_chain_discrepancy<T: LogDensity + Sync + ?Sized>(
    target: &T,
    init: &[f64],
    cfg: &HmcConfig,
    chains: usize,
) -> Result<f64> {
    let runs: Vec<ChainDiagnostics> = (0..chains as u64)
        .map(|c| {
            let mut c_cfg = cfg.clone();
            c_cfg.seed = derive_seed(cfg.seed, c);
            hmc_sample(target, init, &c_cfg).map(|(_, d)| d)
        })
        .collect::<Result<_>>()?;
    let d = init.len();
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let sd = (runs.iter().map(|r| r.sample_variance[k]).sum::<f64>() / chains as f64).sqrt();
        let lo = runs
            .iter()
            .map(|r| r.sample_mean[k])
            .fold(f64::INFINITY, f64::min);
        let hi = runs
            .iter()
            .map(|r| r.sample_mean[k])
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((hi - lo) / sd.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// Unnormalized log posterior of a model's parameters given a training set:
/// `-N · mean NLL + log N(θ; 0, σ_p² I)`.
pub struct ModelPosterior<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
    pub prior_std: f64,
    pub template: ParameterVector,
}

impl LogDensity for ModelPosterior<'_> {
    fn dim(&self) -> usize {
        self.template.len()
    }

    fn log_density_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.template.with_values(x.to_vec());
        let n = self.data.len() as f64;
        let (nll, g) = nll_and_grad(self.spec, &p, &self.data.inputs, &self.data.targets)?;
        let (lp, gp) = log_prior_and_grad(&p, self.prior_std)?;
        let grad = g
            .values
            .iter()
            .zip(&gp.values)
            .map(|(a, b)| -n * a + b)
            .collect();
        Ok((-n * nll + lp, grad))
    }
}

/// Bayesian linear regression with known noise and an isotropic Gaussian prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateLinearModel {
    pub design: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub noise_std: f64,
    pub prior_std: f64,
}

impl ConjugateLinearModel {
    pub fn dim(&self) -> usize {
        self.design.first().map_or(0, Vec::len)
    }
}

/// Returns (posterior mean, posterior covariance) for a model with `d`
/// features; `d` is needed when the design has no rows.
pub fn analytic_linear_gaussian_posterior(
    model: &ConjugateLinearModel,
    d: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if model.design.len() != model.targets.len() {
        config_bail!("design rows and targets disagree");
    }
    if model.design.iter().any(|r| r.len() != d) {
        config_bail!("design rows must have {d} columns");
    }
    let x = DMatrix::from_fn(model.design.len(), d, |i, j| model.design[i][j]);
    let y = DVector::from_column_slice(&model.targets);
    let noise_var = model.noise_std * model.noise_std;
    let precision = x.transpose() * &x / noise_var
        + DMatrix::identity(d, d) / (model.prior_std * model.prior_std);
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Input("posterior precision is not positive definite".into()))?;
    let cov = chol.inverse();
    let mean = &cov * (x.transpose() * y) / noise_var;
    Ok((
        mean.iter().copied().collect(),
        (0..d)
            .map(|i| (0..d).map(|j| cov[(i, j)]).collect())
            .collect(),
    ))
}
