//! Posterior approximations.
//!
//! Every algorithm produces a [`Posterior`]: the model spec plus an
//! [`Approximation`] that can emit per-sample predictive sets. The
//! Bayesian-model-average predictive is the mean over those sets.

mod ensemble;
mod laplace;
mod meanfield;
mod optim;
mod persist;
mod point;
mod rank1;
mod svgd;
mod swag;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};
use crate::model::{bma_predict, init_params, Dataset, MlpSpec, ParameterVector, PredictionSet};
use crate::rng::{derive_seed, rng};

pub use ensemble::{train_multix, train_multix_with_seeds, EnsembleState, MultiXOptions};
pub use laplace::{fit_laplace_last_layer, laplace_tune_prior_precision, LaplaceState};
pub use meanfield::{
    elbo_loss, elbo_loss_and_grad, kl_diag_gaussian, softplus, softplus_inv, train_bbb,
    train_bbb_from, train_ivon, train_ivon_from, GaussianMeanField, IvonOptions,
};
pub use optim::Optimizer;
pub use persist::{load_posterior, save_posterior};
pub use point::{mcd_predict, train_map, train_map_from, PointEstimate, SampleSet};
pub use rank1::{train_rank1, train_rank1_from, Rank1State};
pub use svgd::{
    svgd_direction, svgd_update, train_svgd, train_svgd_from, Bandwidth, SvgdOptions, SvgdState,
};
pub use swag::{swag_collect, swag_sample, SwagState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

fn d_lr() -> f64 {
    0.01
}
fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    32
}
fn d_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            weight_decay: 0.0,
            seed: 0,
            optimizer: OptimizerKind::default(),
            momentum: d_momentum(),
            lr_schedule: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            config_bail!("learning_rate must be nonnegative");
        }
        if self.batch_size == 0 {
            config_bail!("batch_size must be positive");
        }
        if self.batch_size > train_size {
            config_bail!(
                "batch_size {} exceeds training-set size {train_size}",
                self.batch_size
            );
        }
        if !(self.weight_decay >= 0.0) {
            config_bail!("weight_decay must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            config_bail!("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

fn d_prior_std() -> f64 {
    1.0
}
fn d_kl_scale() -> f64 {
    1.0
}
fn d_mc() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViConfig {
    #[serde(default = "d_prior_std")]
    pub prior_std: f64,
    /// KL tempering factor λ.
    #[serde(default = "d_kl_scale")]
    pub kl_scale: f64,
    #[serde(default = "d_mc")]
    pub train_mc_samples: usize,
    /// Pre-softplus std initialization; `None` uses 5% of the fan-in scale.
    #[serde(default)]
    pub init_rho: Option<f64>,
    /// Only the final layer is variational; earlier layers stay frozen at
    /// their initial point estimate.
    #[serde(default)]
    pub last_layer_only: bool,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            prior_std: d_prior_std(),
            kl_scale: d_kl_scale(),
            train_mc_samples: d_mc(),
            init_rho: None,
            last_layer_only: false,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0) {
            config_bail!("prior_std must be positive");
        }
        if !(self.kl_scale > 0.0) {
            config_bail!("kl_scale must be positive");
        }
        if self.kl_scale > 1.0 {
            log::warn!("kl_scale {} above 1 over-weights the prior", self.kl_scale);
        }
        if self.train_mc_samples == 0 {
            config_bail!("train_mc_samples must be positive");
        }
        Ok(())
    }
}

/// Shuffled minibatch index lists for one epoch.
pub(crate) fn epoch_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive_seed(seed, 0x5EED_0000 + epoch as u64)));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Minibatch optimization loop shared by the gradient-based trainers.
///
/// `loss_grad(values, batch, step)` returns the per-example-normalized loss
/// and its gradient. Divergence is reported with the epoch number.
pub(crate) fn run_sgd<F>(
    cfg: &TrainConfig,
    data: &Dataset,
    mut values: Vec<f64>,
    mut loss_grad: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &Dataset, u64) -> Result<(f64, Vec<f64>)>,
{
    let n = data.len();
    let total = cfg.epochs * cfg.steps_per_epoch(n);
    let mut opt = Optimizer::new(cfg, values.len());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let sub = data.subset(&batch);
            let (loss, grad) = loss_grad(&values, &sub, derive_seed(cfg.seed, step as u64))
                .map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::EpochDivergence { epoch, detail },
                    other => other,
                })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::EpochDivergence {
                    epoch,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            opt.step(&mut values, &grad, cfg.lr_at(step, total));
            step += 1;
        }
    }
    Ok(values)
}

/// Fresh initialization for `seed`, with every layer but the last copied
/// from `shared` when given.
pub fn member_init(
    spec: &MlpSpec,
    seed: u64,
    shared: Option<&ParameterVector>,
) -> Result<ParameterVector> {
    let mut p = init_params(spec, seed);
    if let Some(s) = shared {
        if s.layout() != p.layout() && **s.layout() != **p.layout() {
            config_bail!("shared initialization does not match the model layout");
        }
        let head = p.layout().last_layer().full_range();
        for (i, v) in p.values.iter_mut().enumerate() {
            if !head.contains(&i) {
                *v = s.values[i];
            }
        }
    }
    Ok(p)
}

/// Anything that can emit posterior predictive samples.
pub trait PosteriorApproximation {
    /// Deterministic approximations ignore the requested sample count.
    fn is_deterministic(&self) -> bool {
        false
    }

    /// One predictive set per posterior sample.
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Approximation {
    Map(PointEstimate),
    Mcd(PointEstimate),
    Bbb(GaussianMeanField),
    Ivon(GaussianMeanField),
    Rank1(Rank1State),
    Swag(SwagState),
    Laplace(LaplaceState),
    Svgd(SvgdState),
    Hmc(SampleSet),
    Ensemble(EnsembleState),
}

impl Approximation {
    pub fn name(&self) -> &'static str {
        match self {
            Approximation::Map(_) => "map",
            Approximation::Mcd(_) => "mcd",
            Approximation::Bbb(_) => "bbb",
            Approximation::Ivon(_) => "ivon",
            Approximation::Rank1(_) => "rank1",
            Approximation::Swag(_) => "swag",
            Approximation::Laplace(_) => "laplace",
            Approximation::Svgd(_) => "svgd",
            Approximation::Hmc(_) => "hmc",
            Approximation::Ensemble(_) => "multi",
        }
    }

    fn inner(&self) -> &dyn PosteriorApproximation {
        match self {
            Approximation::Map(s) => s,
            Approximation::Mcd(s) => s,
            Approximation::Bbb(s) | Approximation::Ivon(s) => s,
            Approximation::Rank1(s) => s,
            Approximation::Swag(s) => s,
            Approximation::Laplace(s) => s,
            Approximation::Svgd(s) => s,
            Approximation::Hmc(s) => s,
            Approximation::Ensemble(s) => s,
        }
    }
}

/// A trained approximation together with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub spec: MlpSpec,
    pub approx: Approximation,
}

impl Posterior {
    pub fn new(spec: MlpSpec, approx: Approximation) -> Self {
        Self { spec, approx }
    }

    pub fn sample_predictions(
        &self,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        self.approx
            .inner()
            .sample_predictions(&self.spec, data, eval_samples.max(1), seed)
    }

    pub fn is_deterministic(&self) -> bool {
        self.approx.inner().is_deterministic()
    }

    /// Per-member BMA predictives for ensembles; a single entry otherwise.
    pub fn member_predictions(
        &self,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        match &self.approx {
            Approximation::Ensemble(e) => {
                e.member_predictives(&self.spec, data, eval_samples, seed)
            }
            _ => Ok(vec![posterior_predict(self, data, eval_samples, seed)?]),
        }
    }
}

/// Bayesian model average over `eval_samples` posterior draws.
pub fn posterior_predict(
    approx: &Posterior,
    data: &Dataset,
    eval_samples: usize,
    seed: u64,
) -> Result<PredictionSet> {
    bma_predict(&approx.sample_predictions(data, eval_samples, seed)?)
}

fn d_components() -> usize {
    4
}
fn d_snapshots() -> usize {
    30
}
fn d_rank() -> usize {
    20
}
fn d_tau() -> f64 {
    1.0
}
fn d_members() -> usize {
    5
}
fn d_mcd_rate() -> f64 {
    0.1
}

/// One algorithm entry of an experiment, with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    Map {},
    Mcd {
        #[serde(default = "d_mcd_rate")]
        dropout_rate: f64,
    },
    Bbb {
        #[serde(default)]
        vi: ViConfig,
    },
    Rank1 {
        #[serde(default)]
        vi: ViConfig,
        #[serde(default = "d_components")]
        components: usize,
    },
    Ivon {
        #[serde(default)]
        vi: ViConfig,
        #[serde(default = "d_tau")]
        prior_precision: f64,
        #[serde(default)]
        options: IvonOptions,
    },
    Swag {
        #[serde(default = "d_snapshots")]
        snapshots: usize,
        #[serde(default = "d_rank")]
        rank: usize,
        /// Learning rate while collecting; defaults to the training rate.
        #[serde(default)]
        swag_learning_rate: Option<f64>,
    },
    Laplace {
        #[serde(default = "d_tau")]
        prior_precision: f64,
        /// Candidate prior precisions tuned on the validation split.
        #[serde(default)]
        tune_grid: Option<Vec<f64>>,
    },
    Svgd {
        #[serde(default)]
        options: SvgdOptions,
    },
    Hmc {
        hmc: crate::reference::HmcConfig,
    },
    Multi {
        #[serde(default = "d_members")]
        members: usize,
        base: Box<AlgorithmSpec>,
        /// Initialize every member's feature layers from one MAP model.
        #[serde(default)]
        shared_init: bool,
    },
}

impl AlgorithmSpec {
    pub fn default_name(&self) -> String {
        match self {
            AlgorithmSpec::Map {} => "map".into(),
            AlgorithmSpec::Mcd { .. } => "mcd".into(),
            AlgorithmSpec::Bbb { .. } => "bbb".into(),
            AlgorithmSpec::Rank1 { .. } => "rank1".into(),
            AlgorithmSpec::Ivon { .. } => "ivon".into(),
            AlgorithmSpec::Swag { .. } => "swag".into(),
            AlgorithmSpec::Laplace { .. } => "laplace".into(),
            AlgorithmSpec::Svgd { .. } => "svgd".into(),
            AlgorithmSpec::Hmc { .. } => "hmc".into(),
            AlgorithmSpec::Multi { members, base, .. } => match base.as_ref() {
                AlgorithmSpec::Map {} => format!("deep-ensemble-{members}"),
                b => format!("multi-{}-{members}", b.default_name()),
            },
        }
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, AlgorithmSpec::Multi { .. })
    }
}

/// Trains one approximation. `val` is used only by algorithms that tune on
/// held-out data (Laplace prior precision).
pub fn fit(
    spec: &MlpSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    algo: &AlgorithmSpec,
    shared_init: Option<&ParameterVector>,
) -> Result<Posterior> {
    spec.validate()?;
    train.check_against(spec)?;
    let init = || member_init(spec, cfg.seed, shared_init);
    let approx = match algo {
        AlgorithmSpec::Map {} => Approximation::Map(PointEstimate::map(train_map_from(
            spec,
            train,
            cfg,
            init()?,
        )?)),
        AlgorithmSpec::Mcd { dropout_rate } => {
            let mut s = spec.clone();
            s.dropout_rate = *dropout_rate;
            s.validate()?;
            if s.dropout_rate <= 0.0 {
                config_bail!("MC dropout needs a positive dropout rate");
            }
            let params = train_map_from(&s, train, cfg, init()?)?;
            return Ok(Posterior::new(
                s.clone(),
                Approximation::Mcd(PointEstimate::dropout(params)),
            ));
        }
        AlgorithmSpec::Bbb { vi } => {
            Approximation::Bbb(train_bbb_from(spec, train, cfg, vi, init()?)?)
        }
        AlgorithmSpec::Rank1 { vi, components } => Approximation::Rank1(train_rank1_from(
            spec,
            train,
            cfg,
            vi,
            *components,
            init()?,
        )?),
        AlgorithmSpec::Ivon {
            vi,
            prior_precision,
            options,
        } => Approximation::Ivon(train_ivon_from(
            spec,
            train,
            cfg,
            vi,
            *prior_precision,
            options,
            init()?,
        )?),
        AlgorithmSpec::Swag {
            snapshots,
            rank,
            swag_learning_rate,
        } => {
            // SGD for the first two thirds of the epochs, then `snapshots`
            // evenly spaced snapshots over the final third
            let spe = cfg.steps_per_epoch(train.len());
            let collect_epochs = cfg.epochs / 3;
            let mut warm_cfg = cfg.clone();
            warm_cfg.epochs = cfg.epochs - collect_epochs;
            let warm = train_map_from(spec, train, &warm_cfg, init()?)?;
            let mut swag_cfg = cfg.clone();
            if let Some(lr) = swag_learning_rate {
                swag_cfg.learning_rate = *lr;
            }
            swag_cfg.seed = derive_seed(cfg.seed, 0x5A6);
            let interval = (collect_epochs * spe / *snapshots).max(1);
            Approximation::Swag(swag_collect(
                spec, train, &swag_cfg, &warm, *snapshots, interval, *rank,
            )?)
        }
        AlgorithmSpec::Laplace {
            prior_precision,
            tune_grid,
        } => {
            let map = train_map_from(spec, train, cfg, init()?)?;
            let mut state = fit_laplace_last_layer(spec, &map, train, *prior_precision)?;
            if let (Some(grid), Some(v)) = (tune_grid, val) {
                state = laplace_tune_prior_precision(
                    spec,
                    &state,
                    v,
                    grid,
                    derive_seed(cfg.seed, 0x1A9),
                )?;
            }
            Approximation::Laplace(state)
        }
        AlgorithmSpec::Svgd { options } => {
            Approximation::Svgd(train_svgd_from(spec, train, cfg, options, shared_init)?)
        }
        AlgorithmSpec::Hmc { hmc } => {
            let mut h = hmc.clone();
            h.seed = derive_seed(cfg.seed, h.seed);
            Approximation::Hmc(SampleSet::from_hmc(spec, train, &h, init()?)?)
        }
        AlgorithmSpec::Multi {
            members,
            base,
            shared_init: use_shared,
        } => {
            let shared = if *use_shared && shared_init.is_none() {
                Some(train_map(spec, train, cfg)?)
            } else {
                shared_init.cloned()
            };
            let opts = MultiXOptions {
                members: *members,
                shared_init: shared,
            };
            return train_multix(base, spec, train, val, cfg, &opts);
        }
    };
    Ok(Posterior::new(spec.clone(), approx))
}

pub(crate) fn per_sample<F>(count: usize, seed: u64, mut f: F) -> Result<Vec<PredictionSet>>
where
    F: FnMut(u64) -> Result<PredictionSet>,
{
    (0..count as u64).map(|k| f(derive_seed(seed, k))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_cover_all_indices() {
        let b = epoch_batches(10, 3, 1, 0);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 1, 0));
        assert_ne!(b, epoch_batches(10, 3, 1, 1));
    }

    #[test]
    fn batch_larger_than_data_rejected() {
        let cfg = TrainConfig {
            batch_size: 11,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(10).is_err());
        assert!(cfg.validate(11).is_ok());
    }

    #[test]
    fn algorithm_spec_json_round_trip() {
        let j = r#"{"kind":"multi","members":5,"base":{"kind":"swag","snapshots":10}}"#;
        let a: AlgorithmSpec = serde_json::from_str(j).unwrap();
        assert_eq!(a.default_name(), "multi-swag-5");
        let back: AlgorithmSpec =
            serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, back);
        assert!(serde_json::from_str::<AlgorithmSpec>(r#"{"kind":"map","typo":1}"#).is_err());
    }

    #[test]
    fn shared_init_keeps_feature_layers() {
        let spec = MlpSpec::new(vec![2, 4, 3], crate::model::Head::Categorical);
        let shared = init_params(&spec, 100);
        let a = member_init(&spec, 1, Some(&shared)).unwrap();
        let b = member_init(&spec, 2, Some(&shared)).unwrap();
        let head = shared.layout().last_layer().full_range();
        for i in 0..shared.len() {
            if head.contains(&i) {
                continue;
            }
            assert_eq!(a.values[i], shared.values[i]);
            assert_eq!(b.values[i], shared.values[i]);
        }
        assert_ne!(a.values[head.clone()], b.values[head]);
    }
}
