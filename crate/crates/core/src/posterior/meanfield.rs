//! Diagonal-Gaussian variational posteriors: Bayes-by-Backprop (ELBO with
//! the local reparameterization trick) and a variational online Newton
//! optimizer with per-parameter curvature.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::model::{
    fan_in_scale, head_loss, init_params, nll_and_grad, predict, sigmoid, Dataset, Layout, Matrix,
    MlpSpec, ParameterVector, PredictionSet,
};
use crate::rng::{derive_seed, rng, Rng};

use super::{epoch_batches, per_sample, Optimizer, PosteriorApproximation, TrainConfig, ViConfig};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// q(θ) = N(mu, diag(softplus(rho)²)). Entries with `rho = -inf` are point
/// estimates (std exactly 0) and are excluded from the KL.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeanField {
    pub mu: ParameterVector,
    pub rho: ParameterVector,
}

impl GaussianMeanField {
    pub fn std(&self) -> Vec<f64> {
        self.rho.values.iter().map(|&r| softplus(r)).collect()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.mu.layout()
    }

    /// θ = mu + σ ⊙ ε.
    pub fn sample(&self, r: &mut Rng) -> ParameterVector {
        let values = self
            .mu
            .values
            .iter()
            .zip(&self.rho.values)
            .map(|(&m, &rho)| {
                let z: f64 = StandardNormal.sample(r);
                m + softplus(rho) * z
            })
            .collect();
        self.mu.with_values(values)
    }

    fn is_point(&self, i: usize) -> bool {
        self.rho.values[i] == f64::NEG_INFINITY
    }
}

impl PosteriorApproximation for GaussianMeanField {
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        per_sample(eval_samples, seed, |s| {
            predict(spec, &self.sample(&mut rng(s)), data, None)
        })
    }
}

fn kl_terms(mu: f64, sigma: f64, prior_std: f64) -> (f64, f64, f64) {
    let pv = prior_std * prior_std;
    let kl = 0.5 * ((mu * mu + sigma * sigma) / pv - 1.0 - (sigma * sigma).ln() + pv.ln());
    (kl, mu / pv, sigma / pv - 1.0 / sigma)
}

/// Closed-form KL(q ‖ N(0, prior_std² I)).
pub fn kl_diag_gaussian(q: &GaussianMeanField, prior_std: f64) -> Result<f64> {
    if !(prior_std > 0.0) {
        config_bail!("prior_std must be positive");
    }
    Ok(q.mu
        .values
        .iter()
        .zip(q.std())
        .enumerate()
        .filter(|(i, _)| !q.is_point(*i))
        .map(|(_, (&m, s))| kl_terms(m, s, prior_std).0)
        .sum())
}

struct LrtLayer {
    input: Vec<f64>,
    pre: Vec<f64>,
    sd: Vec<f64>,
    eps: Vec<f64>,
}

/// One local-reparameterization pass. Returns the summed batch NLL and its
/// gradients with respect to mu and σ.
fn lrt_pass(
    spec: &MlpSpec,
    mu: &ParameterVector,
    sigma: &[f64],
    inputs: &Matrix,
    targets: &crate::model::Targets,
    r: &mut Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let layout = Arc::clone(mu.layout());
    let n = inputs.rows();
    let last = layout.layers.len() - 1;
    let mut layers: Vec<LrtLayer> = Vec::with_capacity(layout.layers.len());
    let mut a = inputs.as_slice().to_vec();
    let mut out = Vec::new();
    for (l, seg) in layout.layers.iter().enumerate() {
        let w = &mu.values[seg.weight_range()];
        let sw = &sigma[seg.weight_range()];
        let b = seg.bias_range().map(|r| &mu.values[r]);
        let sb = seg.bias_range().map(|r| &sigma[r]);
        let mut pre = vec![0.0; n * seg.rows];
        let mut sd = vec![0.0; n * seg.rows];
        let mut eps = vec![0.0; n * seg.rows];
        for i in 0..n {
            let x = &a[i * seg.cols..(i + 1) * seg.cols];
            for rr in 0..seg.rows {
                let wr = &w[rr * seg.cols..(rr + 1) * seg.cols];
                let swr = &sw[rr * seg.cols..(rr + 1) * seg.cols];
                let mut m = b.map_or(0.0, |b| b[rr]);
                let mut v = sb.map_or(0.0, |s| s[rr] * s[rr]);
                for c in 0..seg.cols {
                    m += wr[c] * x[c];
                    v += x[c] * x[c] * swr[c] * swr[c];
                }
                let e: f64 = StandardNormal.sample(r);
                let s = v.sqrt();
                let k = i * seg.rows + rr;
                pre[k] = m + s * e;
                sd[k] = s;
                eps[k] = e;
            }
        }
        if l == last {
            out = pre.clone();
        } else {
            let h: Vec<f64> = pre.iter().map(|&z| spec.activation.apply(z)).collect();
            layers.push(LrtLayer {
                input: a,
                pre,
                sd,
                eps,
            });
            a = h;
            continue;
        }
        layers.push(LrtLayer {
            input: a.clone(),
            pre,
            sd,
            eps,
        });
    }
    let out = Matrix::from_vec(n, layout.last_layer().rows, out)?;
    let (losses, delta) = head_loss(spec, &out, targets)?;
    let total: f64 = losses.iter().sum();
    if !total.is_finite() {
        return Err(Error::Divergence {
            batch: 0,
            detail: format!("non-finite ELBO likelihood term {total}"),
        });
    }

    let mut g_mu = vec![0.0; layout.total];
    let mut g_sigma = vec![0.0; layout.total];
    let mut delta = delta.as_slice().to_vec();
    for (l, seg) in layout.layers.iter().enumerate().rev() {
        let lay = &layers[l];
        let w = &mu.values[seg.weight_range()];
        let sw = &sigma[seg.weight_range()];
        let wr0 = seg.weight_offset;
        let mut prev = vec![0.0; n * seg.cols];
        for i in 0..n {
            let x = &lay.input[i * seg.cols..(i + 1) * seg.cols];
            for rr in 0..seg.rows {
                let k = i * seg.rows + rr;
                let d = delta[k];
                let dvar = if lay.sd[k] > 0.0 {
                    d * lay.eps[k] / (2.0 * lay.sd[k])
                } else {
                    0.0
                };
                for c in 0..seg.cols {
                    let idx = wr0 + rr * seg.cols + c;
                    g_mu[idx] += d * x[c];
                    g_sigma[idx] += dvar * 2.0 * x[c] * x[c] * sw[rr * seg.cols + c];
                    if l > 0 {
                        let s = sw[rr * seg.cols + c];
                        prev[i * seg.cols + c] +=
                            d * w[rr * seg.cols + c] + dvar * 2.0 * x[c] * s * s;
                    }
                }
                if let Some(br) = seg.bias_range() {
                    g_mu[br.start + rr] += d;
                    g_sigma[br.start + rr] += dvar * 2.0 * sigma[br.start + rr];
                }
            }
        }
        if l == 0 {
            break;
        }
        let below = &layers[l - 1];
        for (p, &z) in prev.iter_mut().zip(&below.pre) {
            *p *= spec.activation.derivative(z);
        }
        delta = prev;
    }
    Ok((total, g_mu, g_sigma))
}

/// Negative ELBO on a minibatch:
/// `(N/B) · Σ_batch E_q[-log p(y|x,θ)] + λ · KL(q ‖ p)`, with the expectation
/// estimated from `vi.train_mc_samples` local-reparameterization passes.
/// Returns the loss and its gradients with respect to mu and rho.
pub fn elbo_loss_and_grad(
    spec: &MlpSpec,
    q: &GaussianMeanField,
    batch: &Dataset,
    dataset_size: usize,
    vi: &ViConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    vi.validate()?;
    if **q.layout() != spec.layout() {
        config_bail!("variational posterior layout does not match the model spec");
    }
    if batch.is_empty() {
        config_bail!("empty batch");
    }
    let sigma = q.std();
    let mut r = rng(seed);
    let s = vi.train_mc_samples;
    let scale = dataset_size as f64 / batch.len() as f64 / s as f64;
    let mut loss = 0.0;
    let mut g_mu = vec![0.0; q.mu.len()];
    let mut g_sigma = vec![0.0; q.mu.len()];
    for _ in 0..s {
        let (nll, gm, gs) = lrt_pass(spec, &q.mu, &sigma, &batch.inputs, &batch.targets, &mut r)?;
        loss += scale * nll;
        for i in 0..g_mu.len() {
            g_mu[i] += scale * gm[i];
            g_sigma[i] += scale * gs[i];
        }
    }
    let lambda = vi.kl_scale;
    let mut g_rho = vec![0.0; q.mu.len()];
    for i in 0..g_mu.len() {
        if q.is_point(i) {
            g_sigma[i] = 0.0;
            continue;
        }
        let (kl, dmu, dsig) = kl_terms(q.mu.values[i], sigma[i], vi.prior_std);
        loss += lambda * kl;
        g_mu[i] += lambda * dmu;
        g_rho[i] = (g_sigma[i] + lambda * dsig) * sigmoid(q.rho.values[i]);
    }
    Ok((loss, g_mu, g_rho))
}

pub fn elbo_loss(
    spec: &MlpSpec,
    q: &GaussianMeanField,
    batch: &Dataset,
    dataset_size: usize,
    vi: &ViConfig,
    seed: u64,
) -> Result<f64> {
    elbo_loss_and_grad(spec, q, batch, dataset_size, vi, seed).map(|r| r.0)
}

/// Indices of parameters that stay frozen point estimates.
fn frozen_mask(layout: &Layout, vi: &ViConfig) -> Vec<bool> {
    let head = layout.last_layer().full_range();
    (0..layout.total)
        .map(|i| vi.last_layer_only && !head.contains(&i))
        .collect()
}

fn initial_rho(layout: &Layout, vi: &ViConfig, frozen: &[bool]) -> Vec<f64> {
    let mut rho = vec![0.0; layout.total];
    for seg in &layout.layers {
        let r = vi
            .init_rho
            .unwrap_or_else(|| softplus_inv(0.05 * fan_in_scale(seg.cols)));
        for v in &mut rho[seg.full_range()] {
            *v = r;
        }
    }
    for (v, &f) in rho.iter_mut().zip(frozen) {
        if f {
            *v = f64::NEG_INFINITY;
        }
    }
    rho
}

/// Bayes-by-Backprop from the seeded initialization.
pub fn train_bbb(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    vi: &ViConfig,
) -> Result<GaussianMeanField> {
    train_bbb_from(spec, data, cfg, vi, init_params(spec, cfg.seed))
}

pub fn train_bbb_from(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    vi: &ViConfig,
    init: ParameterVector,
) -> Result<GaussianMeanField> {
    spec.validate()?;
    vi.validate()?;
    data.check_against(spec)?;
    cfg.validate(data.len())?;
    let layout = Arc::clone(init.layout());
    let frozen = frozen_mask(&layout, vi);
    let p = layout.total;
    let mut q = GaussianMeanField {
        rho: init.with_values(initial_rho(&layout, vi, &frozen)),
        mu: init,
    };
    let n = data.len();
    let mut opt = Optimizer::new(cfg, 2 * p);
    let total_steps = cfg.epochs * cfg.steps_per_epoch(n);
    let mut step = 0;
    let mut theta: Vec<f64> = q.mu.values.iter().chain(&q.rho.values).copied().collect();
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let sub = data.subset(&batch);
            let (loss, g_mu, g_rho) =
                elbo_loss_and_grad(spec, &q, &sub, n, vi, derive_seed(cfg.seed, step as u64))
                    .map_err(|e| divergence_at(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::EpochDivergence {
                    epoch,
                    detail: format!("non-finite ELBO {loss}"),
                });
            }
            let mut grad: Vec<f64> = g_mu.iter().chain(&g_rho).map(|g| g / n as f64).collect();
            for (i, &f) in frozen.iter().enumerate() {
                if f {
                    grad[i] = 0.0;
                    grad[p + i] = 0.0;
                }
            }
            opt.step(&mut theta, &grad, cfg.lr_at(step, total_steps));
            for (i, &f) in frozen.iter().enumerate() {
                if f {
                    theta[p + i] = f64::NEG_INFINITY;
                }
            }
            q.mu.values.copy_from_slice(&theta[..p]);
            q.rho.values.copy_from_slice(&theta[p..]);
            step += 1;
        }
    }
    Ok(q)
}

fn divergence_at(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::EpochDivergence { epoch, detail },
        other => other,
    }
}

fn d_beta2() -> f64 {
    0.999
}
fn d_aug() -> f64 {
    1.0
}
fn d_hess_init() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvonOptions {
    /// Averaging factor of the curvature estimate.
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Multiplies the training-set size in the precision; inert at 1.
    #[serde(default = "d_aug")]
    pub augmentation_factor: f64,
    /// Initial curvature; a zero start makes the first steps explode.
    #[serde(default = "d_hess_init")]
    pub hess_init: f64,
}

impl Default for IvonOptions {
    fn default() -> Self {
        Self {
            beta2: d_beta2(),
            augmentation_factor: d_aug(),
            hess_init: d_hess_init(),
        }
    }
}

/// Variational online Newton from the seeded initialization.
pub fn train_ivon(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    vi: &ViConfig,
    prior_precision: f64,
) -> Result<GaussianMeanField> {
    train_ivon_from(
        spec,
        data,
        cfg,
        vi,
        prior_precision,
        &IvonOptions::default(),
        init_params(spec, cfg.seed),
    )
}

/// Keeps a mean `m` and curvature `h` per parameter; σ² = 1/(N·h + δ).
///
/// Each step samples θ ~ N(m, σ²), averages the minibatch NLL gradient ĝ and
/// the reparameterization curvature estimate ĝ ⊙ (θ − m)/σ², moves the
/// per-example precision h + δ/N toward that estimate along a
/// positivity-preserving update, and takes the preconditioned step
/// m ← m − α (ĝ + δ m / N) / (h + δ/N).
pub fn train_ivon_from(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    vi: &ViConfig,
    prior_precision: f64,
    opts: &IvonOptions,
    init: ParameterVector,
) -> Result<GaussianMeanField> {
    spec.validate()?;
    vi.validate()?;
    data.check_against(spec)?;
    cfg.validate(data.len())?;
    if !(prior_precision > 0.0) {
        config_bail!("iVON prior precision must be positive");
    }
    if !(0.0..1.0).contains(&opts.beta2) || !(opts.augmentation_factor > 0.0) {
        config_bail!("invalid iVON options");
    }
    let layout = Arc::clone(init.layout());
    let frozen = frozen_mask(&layout, vi);
    let n = data.len();
    let n_eff = n as f64 * opts.augmentation_factor;
    let delta = prior_precision;
    let dim = layout.total;
    let mut m = init.values.clone();
    // per-example precision p = h + δ/N
    let mut prec = vec![opts.hess_init + delta / n_eff; dim];
    let total_steps = cfg.epochs * cfg.steps_per_epoch(n);
    let s = vi.train_mc_samples;
    let b2 = opts.beta2;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let sub = data.subset(&batch);
            let sd: Vec<f64> = prec
                .iter()
                .zip(&frozen)
                .map(|(&p, &f)| if f { 0.0 } else { 1.0 / (n_eff * p).sqrt() })
                .collect();
            let mut r = rng(derive_seed(cfg.seed, step as u64));
            let mut g_hat = vec![0.0; dim];
            let mut h_hat = vec![0.0; dim];
            for _ in 0..s {
                let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                let theta: Vec<f64> = (0..dim).map(|i| m[i] + sd[i] * eps[i]).collect();
                let (nll, g) =
                    nll_and_grad(spec, &init.with_values(theta), &sub.inputs, &sub.targets)
                        .map_err(|e| divergence_at(e, epoch))?;
                if !nll.is_finite() {
                    return Err(Error::EpochDivergence {
                        epoch,
                        detail: format!(
                            "non-finite loss {nll}; try a prior precision from {{1, 10, 100, 500}}"
                        ),
                    });
                }
                for i in 0..dim {
                    g_hat[i] += g.values[i] / s as f64;
                    if sd[i] > 0.0 {
                        h_hat[i] += g.values[i] * eps[i] / sd[i] / s as f64;
                    }
                }
            }
            let lr = cfg.lr_at(step, total_steps);
            for i in 0..dim {
                if frozen[i] {
                    continue;
                }
                let target = h_hat[i] + delta / n_eff;
                let u = (1.0 - b2) * (target - prec[i]);
                prec[i] += u + 0.5 * u * u / prec[i];
                m[i] -= lr * (g_hat[i] + delta * m[i] / n_eff) / prec[i];
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::EpochDivergence {
                    epoch,
                    detail: "non-finite mean; try a prior precision from {1, 10, 100, 500}".into(),
                });
            }
            step += 1;
        }
    }
    let rho = prec
        .iter()
        .zip(&frozen)
        .map(|(&p, &f)| {
            if f {
                f64::NEG_INFINITY
            } else {
                softplus_inv(1.0 / (n_eff * p).sqrt())
            }
        })
        .collect();
    Ok(GaussianMeanField {
        mu: init.with_values(m),
        rho: init.with_values(rho),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Activation, Head, Split, Targets};

    fn toy_classification(n: usize, seed: u64) -> Dataset {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..n * 2).map(|_| StandardNormal.sample(&mut r)).collect();
        let y = (0..n)
            .map(|i| usize::from(x[2 * i] + x[2 * i + 1] > 0.0))
            .collect();
        Dataset::new(
            Matrix::from_vec(n, 2, x).unwrap(),
            Targets::Classes(y),
            None,
            Split::Train,
        )
        .unwrap()
    }

    fn field(spec: &MlpSpec, seed: u64, rho: f64) -> GaussianMeanField {
        let mu = init_params(spec, seed);
        let rho = mu.with_values(vec![rho; mu.len()]);
        GaussianMeanField { mu, rho }
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-8, 0.05, 1.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn kl_examples() {
        let layout = Arc::new(Layout::for_widths(&[1, 1], false));
        let q = GaussianMeanField {
            mu: ParameterVector::from_values(Arc::clone(&layout), vec![0.0]).unwrap(),
            rho: ParameterVector::from_values(Arc::clone(&layout), vec![softplus_inv(2.0)])
                .unwrap(),
        };
        assert!(kl_diag_gaussian(&q, 2.0).unwrap().abs() < 1e-12);

        let q = GaussianMeanField {
            mu: ParameterVector::from_values(Arc::clone(&layout), vec![1.0]).unwrap(),
            rho: ParameterVector::from_values(Arc::clone(&layout), vec![softplus_inv(1.0)])
                .unwrap(),
        };
        let kl = kl_diag_gaussian(&q, 1.0).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);

        // Monte-Carlo oracle: E_q[log q - log p] with 10^6 draws
        let mut r = rng(1);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut r);
            let x = 1.0 + z;
            let v = -0.5 * z * z + 0.5 * x * x;
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - kl).abs() < 3.0 * se,
            "mc {mean} closed {kl} se {se}"
        );
    }

    #[test]
    fn kl_is_nonnegative_and_matches_mc_for_random_fields() {
        let spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        for seed in 0..5u64 {
            let mut q = field(&spec, seed, -1.0);
            let mut r = rng(seed + 100);
            for v in &mut q.rho.values {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += 0.5 * z;
            }
            let kl = kl_diag_gaussian(&q, 0.7).unwrap();
            assert!(kl >= 0.0);
            let sig = q.std();
            let draws = 20_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..draws {
                let mut v = 0.0;
                for (m, s) in q.mu.values.iter().zip(&sig) {
                    let z: f64 = StandardNormal.sample(&mut r);
                    let x = m + s * z;
                    v += -0.5 * z * z - s.ln() + 0.5 * x * x / 0.49 + 0.7f64.ln();
                }
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / draws as f64;
            let se = ((s2 / draws as f64 - mean * mean) / draws as f64).sqrt();
            assert!((mean - kl).abs() < 3.0 * se, "seed {seed}: {mean} vs {kl}");
        }
    }

    #[test]
    fn elbo_without_kl_weight_is_scaled_nll_at_delta() {
        let spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        let data = toy_classification(12, 3);
        let q = field(&spec, 4, -20.0);
        let vi = ViConfig {
            kl_scale: 1e-300,
            ..ViConfig::default()
        };
        let loss = elbo_loss(&spec, &q, &data, 12, &vi, 0).unwrap();
        let (nll, _) = nll_and_grad(&spec, &q.mu, &data.inputs, &data.targets).unwrap();
        assert!((loss - 12.0 * nll).abs() < 1e-6, "{loss} vs {}", 12.0 * nll);
    }

    #[test]
    fn elbo_without_likelihood_is_kl() {
        let spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        let data = toy_classification(5, 3);
        let q = field(&spec, 4, -2.0);
        let vi = ViConfig {
            kl_scale: 0.3,
            ..ViConfig::default()
        };
        let loss = elbo_loss(&spec, &q, &data, 0, &vi, 0).unwrap();
        assert!((loss - 0.3 * kl_diag_gaussian(&q, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        spec.activation = Activation::Swish;
        let data = toy_classification(6, 8);
        let q = field(&spec, 2, -1.5);
        let vi = ViConfig::default();
        let (_, gm, gr) = elbo_loss_and_grad(&spec, &q, &data, 30, &vi, 42).unwrap();
        let h = 1e-5;
        for i in 0..q.mu.len() {
            for (which, g) in [(0, &gm), (1, &gr)] {
                let mut qp = q.clone();
                let mut qm = q.clone();
                if which == 0 {
                    qp.mu.values[i] += h;
                    qm.mu.values[i] -= h;
                } else {
                    qp.rho.values[i] += h;
                    qm.rho.values[i] -= h;
                }
                let fd = (elbo_loss(&spec, &qp, &data, 30, &vi, 42).unwrap()
                    - elbo_loss(&spec, &qm, &data, 30, &vi, 42).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-3 * fd.abs().max(1.0),
                    "param {i} kind {which}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn near_delta_prediction_matches_deterministic_net() {
        let spec = MlpSpec::new(vec![2, 8, 3], Head::Categorical);
        let data = toy_classification(10, 1);
        let q = field(&spec, 6, -20.0);
        let bma =
            crate::model::bma_predict(&q.sample_predictions(&spec, &data, 10, 3).unwrap()).unwrap();
        let det = predict(&spec, &q.mu, &data, None).unwrap();
        for (a, b) in bma
            .probs()
            .unwrap()
            .as_slice()
            .iter()
            .zip(det.probs().unwrap().as_slice())
        {
            assert!((a - b).abs() < 1e-4);
        }
        let _ = forward(&spec, &q.mu, &data.inputs, None).unwrap();
    }

    #[test]
    fn bbb_is_deterministic_and_tempering_lowers_loss() {
        let spec = MlpSpec::new(vec![2, 8, 2], Head::Categorical);
        let data = toy_classification(64, 11);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let vi = ViConfig::default();
        let a = train_bbb(&spec, &data, &cfg, &vi).unwrap();
        let b = train_bbb(&spec, &data, &cfg, &vi).unwrap();
        assert_eq!(a, b);

        let cold = ViConfig {
            kl_scale: 0.2,
            ..vi.clone()
        };
        let c = train_bbb(&spec, &data, &cfg, &cold).unwrap();
        let mean_loss = |q: &GaussianMeanField, v: &ViConfig| {
            (0..20u64)
                .map(|s| elbo_loss(&spec, q, &data, 64, v, s).unwrap())
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_loss(&c, &cold) < mean_loss(&a, &vi));
    }

    #[test]
    fn last_layer_only_freezes_feature_layers() {
        let spec = MlpSpec::new(vec![2, 4, 2], Head::Categorical);
        let data = toy_classification(32, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let vi = ViConfig {
            last_layer_only: true,
            ..ViConfig::default()
        };
        let init = init_params(&spec, 0);
        let q = train_bbb(&spec, &data, &cfg, &vi).unwrap();
        let head = q.layout().last_layer().full_range();
        for i in 0..q.mu.len() {
            if head.contains(&i) {
                assert!(q.std()[i] > 0.0);
            } else {
                assert_eq!(q.mu.values[i], init.values[i]);
                assert_eq!(q.std()[i], 0.0);
            }
        }
        assert!(kl_diag_gaussian(&q, 1.0).unwrap().is_finite());
    }

    #[test]
    fn ivon_initial_std_and_determinism() {
        let spec = MlpSpec::new(vec![2, 2], Head::Categorical);
        let data = toy_classification(50, 1);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let q = train_ivon(&spec, &data, &cfg, &ViConfig::default(), 50.0).unwrap();
        // σ = 1/√(N·h0 + δ) with N = 50, h0 = 1
        for s in q.std() {
            assert!((s - 0.1).abs() < 1e-12);
        }
        let flat = IvonOptions {
            hess_init: 0.0,
            ..IvonOptions::default()
        };
        let q = train_ivon_from(
            &spec,
            &data,
            &cfg,
            &ViConfig::default(),
            50.0,
            &flat,
            init_params(&spec, 0),
        )
        .unwrap();
        for s in q.std() {
            assert!((s - 1.0 / 50f64.sqrt()).abs() < 1e-12);
        }
        let cfg = TrainConfig { epochs: 4, ..cfg };
        let a = train_ivon(&spec, &data, &cfg, &ViConfig::default(), 10.0).unwrap();
        let b = train_ivon(&spec, &data, &cfg, &ViConfig::default(), 10.0).unwrap();
        assert_eq!(a, b);
    }
}
