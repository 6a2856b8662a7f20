//! Stein variational gradient descent over a set of parameter particles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::model::{
    log_prior_and_grad, nll_and_grad, predict, Dataset, MlpSpec, ParameterVector, PredictionSet,
};
use crate::rng::derive_seed;

use super::{epoch_batches, member_init, Optimizer, PosteriorApproximation, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// h = median pairwise distance² / ln(n + 1).
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

fn d_particles() -> usize {
    5
}
fn d_prior() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgdOptions {
    #[serde(default = "d_particles")]
    pub particles: usize,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    #[serde(default = "d_prior")]
    pub prior_std: f64,
}

impl Default for SvgdOptions {
    fn default() -> Self {
        Self {
            particles: d_particles(),
            bandwidth: Bandwidth::default(),
            prior_std: d_prior(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgdState {
    pub particles: Vec<ParameterVector>,
    pub bandwidth: Bandwidth,
}

impl PosteriorApproximation for SvgdState {
    fn is_deterministic(&self) -> bool {
        true
    }

    /// Every particle contributes one predictive set.
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        _: usize,
        _: u64,
    ) -> Result<Vec<PredictionSet>> {
        self.particles
            .iter()
            .map(|p| predict(spec, p, data, None))
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn bandwidth_value(particles: &[Vec<f64>], mode: Bandwidth) -> f64 {
    let h = match mode {
        Bandwidth::Fixed(h) => h,
        Bandwidth::MedianHeuristic => {
            let n = particles.len();
            let mut d: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| sq_dist(&particles[i], &particles[j]).sqrt())
                .collect();
            if d.is_empty() {
                return 1.0;
            }
            d.sort_by(f64::total_cmp);
            let m = d.len();
            let med = if m % 2 == 1 {
                d[m / 2]
            } else {
                0.5 * (d[m / 2 - 1] + d[m / 2])
            };
            med * med / ((n + 1) as f64).ln()
        }
    };
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1.0
    }
}

/// φ(θ_i) = (1/n) Σ_j [k(θ_j, θ_i) ∇log p(θ_j) + ∇_{θ_j} k(θ_j, θ_i)] with
/// the RBF kernel k(x, y) = exp(−‖x − y‖²/h).
pub fn svgd_direction(
    particles: &[Vec<f64>],
    grads: &[Vec<f64>],
    bandwidth: Bandwidth,
) -> Result<Vec<Vec<f64>>> {
    if particles.is_empty() {
        config_bail!("SVGD needs at least one particle");
    }
    if grads.len() != particles.len() {
        config_bail!("gradient count does not match particle count");
    }
    let dim = particles[0].len();
    if particles.iter().chain(grads).any(|p| p.len() != dim) {
        config_bail!("particles and gradients must share one dimension");
    }
    if let Bandwidth::Fixed(h) = bandwidth {
        if !(h > 0.0) {
            config_bail!("fixed bandwidth must be positive");
        }
    }
    let h = bandwidth_value(particles, bandwidth);
    let n = particles.len() as f64;
    Ok(particles
        .iter()
        .map(|xi| {
            let mut phi = vec![0.0; dim];
            for (xj, gj) in particles.iter().zip(grads) {
                let k = (-sq_dist(xj, xi) / h).exp();
                for d in 0..dim {
                    phi[d] += k * gj[d] + 2.0 * (xi[d] - xj[d]) / h * k;
                }
            }
            for v in &mut phi {
                *v /= n;
            }
            phi
        })
        .collect())
}

/// One explicit step θ_i ← θ_i + lr · φ(θ_i).
pub fn svgd_update(
    particles: &[Vec<f64>],
    grads: &[Vec<f64>],
    bandwidth: Bandwidth,
    learning_rate: f64,
) -> Result<Vec<Vec<f64>>> {
    let phi = svgd_direction(particles, grads, bandwidth)?;
    Ok(particles
        .iter()
        .zip(phi)
        .map(|(x, f)| {
            x.iter()
                .zip(f)
                .map(|(a, b)| a + learning_rate * b)
                .collect()
        })
        .collect())
}

pub fn train_svgd(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &SvgdOptions,
) -> Result<SvgdState> {
    train_svgd_from(spec, data, cfg, opts, None)
}

/// Particles start from independent seeded initializations (sharing
/// non-head layers with `shared` when given). Each step uses the minibatch
/// estimate of ∇log p(θ | D) and feeds −φ/N to the optimizer.
pub fn train_svgd_from(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &SvgdOptions,
    shared: Option<&ParameterVector>,
) -> Result<SvgdState> {
    spec.validate()?;
    data.check_against(spec)?;
    cfg.validate(data.len())?;
    if opts.particles == 0 {
        config_bail!("SVGD needs at least one particle");
    }
    if !(opts.prior_std > 0.0) {
        config_bail!("prior_std must be positive");
    }
    let template = member_init(spec, cfg.seed, shared)?;
    let mut particles: Vec<Vec<f64>> = (0..opts.particles as u64)
        .map(|i| member_init(spec, derive_seed(cfg.seed, 0x5_0000 + i), shared).map(|p| p.values))
        .collect::<Result<_>>()?;
    let n = data.len();
    let nf = n as f64;
    let dim = template.len();
    let mut opt = Optimizer::new(cfg, dim * particles.len());
    let total = cfg.epochs * cfg.steps_per_epoch(n);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let sub = data.subset(&batch);
            let grads: Vec<Vec<f64>> = particles
                .par_iter()
                .map(|v| {
                    let p = template.with_values(v.clone());
                    let (nll, g) = nll_and_grad(spec, &p, &sub.inputs, &sub.targets)?;
                    if !nll.is_finite() {
                        return Err(Error::Divergence {
                            batch: step,
                            detail: format!("non-finite loss {nll}"),
                        });
                    }
                    let (_, gp) = log_prior_and_grad(&p, opts.prior_std)?;
                    Ok(g.values
                        .iter()
                        .zip(&gp.values)
                        .map(|(a, b)| -nf * a + b)
                        .collect())
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::EpochDivergence { epoch, detail },
                    other => other,
                })?;
            let phi = svgd_direction(&particles, &grads, opts.bandwidth)?;
            let mut flat: Vec<f64> = particles.concat();
            let g: Vec<f64> = phi.iter().flatten().map(|v| -v / nf).collect();
            opt.step(&mut flat, &g, cfg.lr_at(step, total));
            for (p, chunk) in particles.iter_mut().zip(flat.chunks(dim)) {
                p.copy_from_slice(chunk);
            }
            step += 1;
        }
    }
    Ok(SvgdState {
        particles: particles
            .into_iter()
            .map(|v| template.with_values(v))
            .collect(),
        bandwidth: opts.bandwidth,
    })
}
