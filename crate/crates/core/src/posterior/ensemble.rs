//! MultiX: ensembles of independently trained approximations of one kind.

use rayon::prelude::*;

use crate::error::{config_bail, Error, Result};
use crate::model::{Dataset, MlpSpec, ParameterVector, PredictionSet};
use crate::rng::derive_seed;

use super::{
    fit, posterior_predict, AlgorithmSpec, Approximation, Posterior, PosteriorApproximation,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub members: Vec<Posterior>,
    pub member_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiXOptions {
    pub members: usize,
    /// Starting point for every member's non-head layers.
    pub shared_init: Option<ParameterVector>,
}

impl EnsembleState {
    /// Each member's BMA predictive over `max(1, eval_samples / members)`
    /// of its own samples.
    pub fn member_predictives(
        &self,
        _spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        let per = (eval_samples / self.members.len()).max(1);
        self.members
            .par_iter()
            .enumerate()
            .map(|(i, m)| posterior_predict(m, data, per, derive_seed(seed, i as u64)))
            .collect()
    }
}

impl PosteriorApproximation for EnsembleState {
    fn is_deterministic(&self) -> bool {
        self.members.iter().all(Posterior::is_deterministic)
    }

    /// One predictive set per member (its own BMA), so the overall BMA is
    /// the average of member predictives.
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        self.member_predictives(spec, data, eval_samples, seed)
    }
}

/// Trains `opts.members` approximations with seeds `cfg.seed + i`.
pub fn train_multix(
    base: &AlgorithmSpec,
    spec: &MlpSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &MultiXOptions,
) -> Result<Posterior> {
    if opts.members < 2 {
        config_bail!("MultiX needs at least 2 members, got {}", opts.members);
    }
    let seeds: Vec<u64> = (0..opts.members as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    train_multix_with_seeds(
        base,
        spec,
        train,
        val,
        cfg,
        &seeds,
        opts.shared_init.as_ref(),
    )
}

/// Members trained in parallel, one per seed, merged in seed order.
pub fn train_multix_with_seeds(
    base: &AlgorithmSpec,
    spec: &MlpSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seeds: &[u64],
    shared_init: Option<&ParameterVector>,
) -> Result<Posterior> {
    if base.is_multi() {
        config_bail!("MultiX members cannot themselves be ensembles");
    }
    if seeds.is_empty() {
        config_bail!("ensemble needs at least one member");
    }
    let members: Vec<Posterior> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let c = TrainConfig {
                seed: s,
                ..cfg.clone()
            };
            fit(spec, train, val, &c, base, shared_init).map_err(|e| Error::Member {
                member: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let outer = members[0].spec.clone();
    Ok(Posterior::new(
        outer,
        Approximation::Ensemble(EnsembleState {
            members,
            member_seeds: seeds.to_vec(),
        }),
    ))
}
