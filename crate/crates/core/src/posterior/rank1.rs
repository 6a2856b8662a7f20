//! Rank-1 variational inference: each layer's weight matrix is a point
//! estimate W multiplied elementwise by the outer product r sᵀ of two
//! Gaussian factor vectors, with C mixture components.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_bail, Error, Result};
use crate::model::{
    head_loss, init_params, predict, sigmoid, Dataset, Layout, Matrix, MlpSpec, ParameterVector,
    PredictionSet, Targets,
};
use crate::rng::{derive_seed, rng, Rng};

use super::meanfield::{softplus, softplus_inv};
use super::{epoch_batches, Optimizer, PosteriorApproximation, TrainConfig, ViConfig};

/// Per-component factor offsets: layer l uses `r` at `[r_off, r_off+rows)`
/// and `s` at `[s_off, s_off+cols)` inside one component block.
#[derive(Debug, Clone, PartialEq)]
struct FactorLayout {
    offsets: Vec<(usize, usize)>,
    per_component: usize,
}

impl FactorLayout {
    fn new(layout: &Layout) -> Self {
        let mut acc = 0;
        let offsets = layout
            .layers
            .iter()
            .map(|seg| {
                let o = (acc, acc + seg.rows);
                acc += seg.rows + seg.cols;
                o
            })
            .collect();
        Self {
            offsets,
            per_component: acc,
        }
    }
}

/// Base weights plus `components` blocks of factor means and pre-softplus
/// stds. Factor entries with `rho = -inf` are fixed at their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1State {
    pub base: ParameterVector,
    pub factor_mu: Vec<f64>,
    pub factor_rho: Vec<f64>,
    pub components: usize,
    factors: FactorLayout,
}

impl Rank1State {
    /// Factors with mean `1` and pre-softplus std `rho` for every component.
    pub fn identity(base: ParameterVector, components: usize, rho: f64) -> Result<Self> {
        if components == 0 {
            config_bail!("rank-1 VI needs at least one component");
        }
        let factors = FactorLayout::new(base.layout());
        let len = factors.per_component * components;
        Ok(Self {
            base,
            factor_mu: vec![1.0; len],
            factor_rho: vec![rho; len],
            components,
            factors,
        })
    }

    pub fn from_parts(
        base: ParameterVector,
        factor_mu: Vec<f64>,
        factor_rho: Vec<f64>,
        components: usize,
    ) -> Result<Self> {
        let mut s = Self::identity(base, components, 0.0)?;
        if factor_mu.len() != s.factor_mu.len() || factor_rho.len() != s.factor_rho.len() {
            config_bail!("rank-1 factor arrays do not match the layout");
        }
        s.factor_mu = factor_mu;
        s.factor_rho = factor_rho;
        Ok(s)
    }

    fn block(&self, c: usize) -> std::ops::Range<usize> {
        c * self.factors.per_component..(c + 1) * self.factors.per_component
    }

    fn sample_factors(&self, c: usize, r: &mut Rng) -> Vec<f64> {
        self.factor_mu[self.block(c)]
            .iter()
            .zip(&self.factor_rho[self.block(c)])
            .map(|(&m, &rho)| {
                let z: f64 = StandardNormal.sample(r);
                m + softplus(rho) * z
            })
            .collect()
    }

    /// Base weights scaled elementwise by `r sᵀ` for one factor draw.
    pub fn effective_params(&self, factors: &[f64]) -> ParameterVector {
        let mut p = self.base.clone();
        for (seg, &(ro, so)) in p.layout().clone().layers.iter().zip(&self.factors.offsets) {
            let w = &mut p.values[seg.weight_range()];
            for rr in 0..seg.rows {
                for c in 0..seg.cols {
                    w[rr * seg.cols + c] *= factors[ro + rr] * factors[so + c];
                }
            }
        }
        p
    }

    /// Effective parameters at the factor means of component `c`.
    pub fn component_mean_params(&self, c: usize) -> ParameterVector {
        self.effective_params(&self.factor_mu[self.block(c)])
    }

    /// KL of all factor distributions against N(1, prior_std²), summed
    /// and divided by the number of components.
    pub fn factor_kl(&self, prior_std: f64) -> f64 {
        let pv = prior_std * prior_std;
        let kl: f64 = self
            .factor_mu
            .iter()
            .zip(&self.factor_rho)
            .filter(|(_, &rho)| rho != f64::NEG_INFINITY)
            .map(|(&m, &rho)| {
                let s = softplus(rho);
                0.5 * (((m - 1.0).powi(2) + s * s) / pv - 1.0 - (s * s).ln() + pv.ln())
            })
            .sum();
        kl / self.components as f64
    }
}

impl PosteriorApproximation for Rank1State {
    /// Sample k draws factors from component k mod C.
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        (0..eval_samples)
            .map(|k| {
                let mut r = rng(derive_seed(seed, k as u64));
                let f = self.sample_factors(k % self.components, &mut r);
                predict(spec, &self.effective_params(&f), data, None)
            })
            .collect()
    }
}

struct Rank1Layer {
    input: Vec<f64>,
    pre: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    s: Vec<f64>,
    er: Vec<f64>,
    es: Vec<f64>,
}

/// Forward and backward pass for one component with per-example factor
/// draws. Returns the summed NLL and gradients for the base weights and the
/// component's factor means and rhos.
fn component_pass(
    spec: &MlpSpec,
    state: &Rank1State,
    c: usize,
    inputs: &Matrix,
    targets: &Targets,
    rand: &mut Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let layout = Arc::clone(state.base.layout());
    let n = inputs.rows();
    let last = layout.layers.len() - 1;
    let mu = &state.factor_mu[state.block(c)];
    let rho = &state.factor_rho[state.block(c)];
    let sd: Vec<f64> = rho.iter().map(|&r| softplus(r)).collect();
    let mut layers = Vec::with_capacity(layout.layers.len());
    let mut a = inputs.as_slice().to_vec();
    let mut out = Vec::new();
    for (l, (seg, &(ro, so))) in layout.layers.iter().zip(&state.factors.offsets).enumerate() {
        let w = &state.base.values[seg.weight_range()];
        let b = seg.bias_range().map(|r| &state.base.values[r]);
        let mut draw = |off: usize, len: usize| -> (Vec<f64>, Vec<f64>) {
            let mut v = Vec::with_capacity(n * len);
            let mut e = Vec::with_capacity(n * len);
            for _ in 0..n {
                for j in 0..len {
                    let z: f64 = StandardNormal.sample(rand);
                    v.push(mu[off + j] + sd[off + j] * z);
                    e.push(z);
                }
            }
            (v, e)
        };
        let (rv, er) = draw(ro, seg.rows);
        let (sv, es) = draw(so, seg.cols);
        let mut u = vec![0.0; n * seg.rows];
        let mut pre = vec![0.0; n * seg.rows];
        for i in 0..n {
            let x = &a[i * seg.cols..(i + 1) * seg.cols];
            let si = &sv[i * seg.cols..(i + 1) * seg.cols];
            for rr in 0..seg.rows {
                let wr = &w[rr * seg.cols..(rr + 1) * seg.cols];
                let mut acc = 0.0;
                for k in 0..seg.cols {
                    acc += wr[k] * si[k] * x[k];
                }
                let k = i * seg.rows + rr;
                u[k] = acc;
                pre[k] = rv[k] * acc + b.map_or(0.0, |b| b[rr]);
            }
        }
        let next = if l == last {
            out = pre.clone();
            Vec::new()
        } else {
            pre.iter().map(|&z| spec.activation.apply(z)).collect()
        };
        layers.push(Rank1Layer {
            input: std::mem::replace(&mut a, next),
            pre,
            u,
            r: rv,
            s: sv,
            er,
            es,
        });
    }
    let out = Matrix::from_vec(n, layout.last_layer().rows, out)?;
    let (losses, delta) = head_loss(spec, &out, targets)?;
    let total: f64 = losses.iter().sum();
    if !total.is_finite() {
        return Err(Error::Divergence {
            batch: 0,
            detail: format!("non-finite rank-1 likelihood term {total}"),
        });
    }

    let mut g_base = vec![0.0; layout.total];
    let mut g_mu = vec![0.0; state.factors.per_component];
    let mut g_rho = vec![0.0; state.factors.per_component];
    let mut delta = delta.as_slice().to_vec();
    for (l, (seg, &(ro, so))) in layout
        .layers
        .iter()
        .zip(&state.factors.offsets)
        .enumerate()
        .rev()
    {
        let lay = &layers[l];
        let w = &state.base.values[seg.weight_range()];
        let w0 = seg.weight_offset;
        let mut prev = vec![0.0; n * seg.cols];
        for i in 0..n {
            let x = &lay.input[i * seg.cols..(i + 1) * seg.cols];
            let si = &lay.s[i * seg.cols..(i + 1) * seg.cols];
            let mut t = vec![0.0; seg.cols];
            for rr in 0..seg.rows {
                let k = i * seg.rows + rr;
                let d = delta[k];
                if let Some(br) = seg.bias_range() {
                    g_base[br.start + rr] += d;
                }
                let gr = d * lay.u[k];
                g_mu[ro + rr] += gr;
                g_rho[ro + rr] += gr * lay.er[k];
                let v = d * lay.r[k];
                for kk in 0..seg.cols {
                    g_base[w0 + rr * seg.cols + kk] += v * si[kk] * x[kk];
                    t[kk] += v * w[rr * seg.cols + kk];
                }
            }
            for kk in 0..seg.cols {
                let gs = t[kk] * x[kk];
                g_mu[so + kk] += gs;
                g_rho[so + kk] += gs * lay.es[i * seg.cols + kk];
                prev[i * seg.cols + kk] = t[kk] * si[kk];
            }
        }
        if l == 0 {
            break;
        }
        for (p, &z) in prev.iter_mut().zip(&layers[l - 1].pre) {
            *p *= spec.activation.derivative(z);
        }
        delta = prev;
    }
    for (g, &r) in g_rho.iter_mut().zip(rho) {
        *g *= sigmoid(r);
    }
    Ok((total, g_base, g_mu, g_rho))
}

/// Negative ELBO: `(N/B)` times the batch NLL averaged over components and
/// factor draws, plus `λ` times the factor KL. Returns the loss and
/// gradients for base weights, factor means and factor rhos.
pub(crate) fn rank1_loss_and_grad(
    spec: &MlpSpec,
    state: &Rank1State,
    batch: &Dataset,
    dataset_size: usize,
    vi: &ViConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut r = rng(seed);
    let passes = (vi.train_mc_samples * state.components) as f64;
    let scale = dataset_size as f64 / batch.len() as f64 / passes;
    let mut loss = 0.0;
    let mut g_base = vec![0.0; state.base.len()];
    let mut g_mu = vec![0.0; state.factor_mu.len()];
    let mut g_rho = vec![0.0; state.factor_rho.len()];
    for _ in 0..vi.train_mc_samples {
        for c in 0..state.components {
            let (nll, gb, gm, gr) =
                component_pass(spec, state, c, &batch.inputs, &batch.targets, &mut r)?;
            loss += scale * nll;
            for (a, b) in g_base.iter_mut().zip(&gb) {
                *a += scale * b;
            }
            let blk = state.block(c);
            for (j, i) in blk.enumerate() {
                g_mu[i] += scale * gm[j];
                g_rho[i] += scale * gr[j];
            }
        }
    }
    let lambda = vi.kl_scale;
    let pv = vi.prior_std * vi.prior_std;
    let cf = state.components as f64;
    loss += lambda * state.factor_kl(vi.prior_std);
    for i in 0..g_mu.len() {
        let rho = state.factor_rho[i];
        if rho == f64::NEG_INFINITY {
            g_mu[i] = 0.0;
            g_rho[i] = 0.0;
            continue;
        }
        let s = softplus(rho);
        g_mu[i] += lambda * (state.factor_mu[i] - 1.0) / pv / cf;
        g_rho[i] += lambda * (s / pv - 1.0 / s) / cf * sigmoid(rho);
    }
    Ok((loss, g_base, g_mu, g_rho))
}

pub fn train_rank1(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    vi: &ViConfig,
    components: usize,
) -> Result<Rank1State> {
    train_rank1_from(spec, data, cfg, vi, components, init_params(spec, cfg.seed))
}

/// Trains base weights and factors jointly. Base weights get `weight_decay`
/// as an L2 penalty; biases stay point estimates. With
/// `vi.last_layer_only`, earlier layers keep their initial weights and unit
/// factors.
pub fn train_rank1_from(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    vi: &ViConfig,
    components: usize,
    init: ParameterVector,
) -> Result<Rank1State> {
    spec.validate()?;
    vi.validate()?;
    data.check_against(spec)?;
    cfg.validate(data.len())?;
    let layout = Arc::clone(init.layout());
    let rho0 = vi.init_rho.unwrap_or_else(|| softplus_inv(0.05));
    let mut state = Rank1State::identity(init, components, rho0)?;
    let last = layout.layers.len() - 1;
    let mut jitter = rng(derive_seed(cfg.seed, 0x0F_AC70));
    let head = layout.last_layer().full_range();
    let mut frozen_factor = vec![false; state.factor_mu.len()];
    for c in 0..components {
        let base = c * state.factors.per_component;
        for (l, (seg, &(ro, so))) in layout.layers.iter().zip(&state.factors.offsets).enumerate() {
            let idx = (ro..ro + seg.rows).chain(so..so + seg.cols);
            for j in idx {
                if vi.last_layer_only && l != last {
                    state.factor_rho[base + j] = f64::NEG_INFINITY;
                    frozen_factor[base + j] = true;
                } else {
                    let z: f64 = StandardNormal.sample(&mut jitter);
                    state.factor_mu[base + j] = 1.0 + 0.1 * z;
                }
            }
        }
    }
    let frozen_base: Vec<bool> = (0..layout.total)
        .map(|i| vi.last_layer_only && !head.contains(&i))
        .collect();

    let n = data.len();
    let nb = layout.total;
    let nf = state.factor_mu.len();
    let mut theta: Vec<f64> = state
        .base
        .values
        .iter()
        .chain(&state.factor_mu)
        .chain(&state.factor_rho)
        .copied()
        .collect();
    let mut opt = Optimizer::new(cfg, theta.len());
    let total_steps = cfg.epochs * cfg.steps_per_epoch(n);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let sub = data.subset(&batch);
            let (loss, gb, gm, gr) = rank1_loss_and_grad(
                spec,
                &state,
                &sub,
                n,
                vi,
                derive_seed(cfg.seed, step as u64),
            )
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::EpochDivergence { epoch, detail },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::EpochDivergence {
                    epoch,
                    detail: format!("non-finite rank-1 ELBO {loss}"),
                });
            }
            let mut grad = Vec::with_capacity(theta.len());
            for i in 0..nb {
                let g = gb[i] / n as f64 + cfg.weight_decay * theta[i];
                grad.push(if frozen_base[i] { 0.0 } else { g });
            }
            grad.extend(gm.iter().map(|g| g / n as f64));
            grad.extend(gr.iter().map(|g| g / n as f64));
            opt.step(&mut theta, &grad, cfg.lr_at(step, total_steps));
            for (j, &f) in frozen_factor.iter().enumerate() {
                if f {
                    theta[nb + j] = 1.0;
                    theta[nb + nf + j] = f64::NEG_INFINITY;
                }
            }
            state.base.values.copy_from_slice(&theta[..nb]);
            state.factor_mu.copy_from_slice(&theta[nb..nb + nf]);
            state.factor_rho.copy_from_slice(&theta[nb + nf..]);
            step += 1;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bma_predict, Activation, Head, Split};

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut r = rng(seed);
        let x: Vec<f64> = (0..n * 2).map(|_| StandardNormal.sample(&mut r)).collect();
        let y = (0..n)
            .map(|i| usize::from(x[2 * i] - x[2 * i + 1] > 0.0))
            .collect();
        Dataset::new(
            Matrix::from_vec(n, 2, x).unwrap(),
            Targets::Classes(y),
            None,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn unit_factors_reproduce_the_base_network() {
        let spec = MlpSpec::new(vec![2, 5, 2], Head::Categorical);
        let data = toy(8, 0);
        let base = init_params(&spec, 3);
        let s = Rank1State::identity(base.clone(), 1, -20.0).unwrap();
        let det = predict(&spec, &base, &data, None).unwrap();
        for p in s.sample_predictions(&spec, &data, 3, 1).unwrap() {
            for (a, b) in p
                .probs()
                .unwrap()
                .as_slice()
                .iter()
                .zip(det.probs().unwrap().as_slice())
            {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn four_components_average_per_component_predictives() {
        let spec = MlpSpec::new(vec![2, 4, 2], Head::Categorical);
        let data = toy(40, 1);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let vi = ViConfig {
            init_rho: Some(-20.0),
            ..ViConfig::default()
        };
        let mut st = train_rank1(&spec, &data, &cfg, &vi, 4).unwrap();
        for r in &mut st.factor_rho {
            *r = -40.0;
        }
        let bma = bma_predict(&st.sample_predictions(&spec, &data, 4, 0).unwrap()).unwrap();
        let explicit: Vec<_> = (0..4)
            .map(|c| predict(&spec, &st.component_mean_params(c), &data, None).unwrap())
            .collect();
        let oracle = explicit.iter().fold(vec![0.0; 80], |mut acc, p| {
            for (a, v) in acc.iter_mut().zip(p.probs().unwrap().as_slice()) {
                *a += v / 4.0;
            }
            acc
        });
        for (a, b) in bma.probs().unwrap().as_slice().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_kl_vanishes_at_the_prior() {
        let spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        let s = Rank1State::identity(init_params(&spec, 0), 2, softplus_inv(0.3)).unwrap();
        assert!(s.factor_kl(0.3).abs() < 1e-12);
        assert!(s.factor_kl(1.0) > 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        spec.activation = Activation::Swish;
        let data = toy(5, 2);
        let mut st = Rank1State::identity(init_params(&spec, 1), 2, -1.0).unwrap();
        let mut r = rng(5);
        for v in &mut st.factor_mu {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += 0.2 * z;
        }
        let vi = ViConfig::default();
        let (_, gb, gm, gr) = rank1_loss_and_grad(&spec, &st, &data, 20, &vi, 9).unwrap();
        let f = |s: &Rank1State| rank1_loss_and_grad(&spec, s, &data, 20, &vi, 9).unwrap().0;
        let h = 1e-5;
        for i in 0..st.base.len() {
            let (mut p, mut m) = (st.clone(), st.clone());
            p.base.values[i] += h;
            m.base.values[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - gb[i]).abs() < 1e-4 * fd.abs().max(1.0),
                "base {i}: {fd} vs {}",
                gb[i]
            );
        }
        for i in 0..st.factor_mu.len() {
            let (mut p, mut m) = (st.clone(), st.clone());
            p.factor_mu[i] += h;
            m.factor_mu[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - gm[i]).abs() < 1e-4 * fd.abs().max(1.0),
                "mu {i}: {fd} vs {}",
                gm[i]
            );
            let (mut p, mut m) = (st.clone(), st.clone());
            p.factor_rho[i] += h;
            m.factor_rho[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - gr[i]).abs() < 1e-4 * fd.abs().max(1.0),
                "rho {i}: {fd} vs {}",
                gr[i]
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let spec = MlpSpec::new(vec![2, 8, 2], Head::Categorical);
        let data = toy(64, 4);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        let vi = ViConfig::default();
        let a = train_rank1(&spec, &data, &cfg, &vi, 2).unwrap();
        assert_eq!(a, train_rank1(&spec, &data, &cfg, &vi, 2).unwrap());
        let bma = bma_predict(&a.sample_predictions(&spec, &data, 10, 0).unwrap()).unwrap();
        let acc = crate::metrics::task_accuracy(&bma, crate::metrics::TaskMetric::Accuracy, None)
            .unwrap();
        assert!(acc > 0.85, "accuracy {acc}");
    }
}
