use crate::error::{config_bail, Result};
use crate::model::{
    bma_predict, init_params, nll_and_grad_with_dropout, predict, Dataset, MlpSpec,
    ParameterVector, PredictionSet,
};
use crate::reference::{hmc_sample, ChainDiagnostics, HmcConfig, ModelPosterior};

use super::{per_sample, run_sgd, PosteriorApproximation, TrainConfig};

/// A single parameter vector. With `mc_dropout` set, predictions average
/// stochastic dropout passes (MC Dropout); otherwise it is a MAP delta.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub params: ParameterVector,
    pub mc_dropout: bool,
}

impl PointEstimate {
    pub fn map(params: ParameterVector) -> Self {
        Self {
            params,
            mc_dropout: false,
        }
    }

    pub fn dropout(params: ParameterVector) -> Self {
        Self {
            params,
            mc_dropout: true,
        }
    }
}

impl PosteriorApproximation for PointEstimate {
    fn is_deterministic(&self) -> bool {
        !self.mc_dropout
    }

    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        if self.mc_dropout {
            per_sample(eval_samples, seed, |s| {
                predict(spec, &self.params, data, Some(s))
            })
        } else {
            Ok(vec![predict(spec, &self.params, data, None)?])
        }
    }
}

/// MAP training: minimizes mean NLL + weight_decay·‖θ‖²/2 from the seeded
/// initialization. Dropout is active during training when the spec has it.
pub fn train_map(spec: &MlpSpec, data: &Dataset, cfg: &TrainConfig) -> Result<ParameterVector> {
    train_map_from(spec, data, cfg, init_params(spec, cfg.seed))
}

pub fn train_map_from(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    init: ParameterVector,
) -> Result<ParameterVector> {
    spec.validate()?;
    data.check_against(spec)?;
    cfg.validate(data.len())?;
    let use_dropout = spec.dropout_rate > 0.0;
    let wd = cfg.weight_decay;
    let values = run_sgd(cfg, data, init.values.clone(), |v, batch, step_seed| {
        let p = init.with_values(v.to_vec());
        let (nll, mut g) = nll_and_grad_with_dropout(
            spec,
            &p,
            &batch.inputs,
            &batch.targets,
            use_dropout.then_some(step_seed),
        )?;
        if wd > 0.0 {
            for (gi, vi) in g.values.iter_mut().zip(v) {
                *gi += wd * vi;
            }
        }
        Ok((nll + 0.5 * wd * p.squared_norm(), g.values))
    })?;
    Ok(init.with_values(values))
}

/// BMA over `mc_samples` stochastic dropout passes.
pub fn mcd_predict(
    spec: &MlpSpec,
    params: &ParameterVector,
    data: &Dataset,
    mc_samples: usize,
    seed: u64,
) -> Result<PredictionSet> {
    if spec.dropout_rate <= 0.0 {
        config_bail!("MC dropout requires dropout_rate > 0");
    }
    if mc_samples == 0 {
        config_bail!("mc_samples must be at least 1");
    }
    let passes =
        PointEstimate::dropout(params.clone()).sample_predictions(spec, data, mc_samples, seed)?;
    bma_predict(&passes)
}

/// Stored posterior samples (the HMC reference); every sample is used.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<ParameterVector>,
    pub diagnostics: Option<ChainDiagnostics>,
}

impl SampleSet {
    pub fn from_hmc(
        spec: &MlpSpec,
        train: &Dataset,
        cfg: &HmcConfig,
        init: ParameterVector,
    ) -> Result<Self> {
        let target = ModelPosterior {
            spec,
            data: train,
            prior_std: cfg.prior_std,
            template: init.clone(),
        };
        let (draws, diag) = hmc_sample(&target, &init.values, cfg)?;
        Ok(Self {
            samples: draws.into_iter().map(|d| init.with_values(d)).collect(),
            diagnostics: Some(diag),
        })
    }
}

impl PosteriorApproximation for SampleSet {
    fn is_deterministic(&self) -> bool {
        true
    }

    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        _: usize,
        _: u64,
    ) -> Result<Vec<PredictionSet>> {
        self.samples
            .iter()
            .map(|p| predict(spec, p, data, None))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Head, Matrix, Split, Targets};
    use crate::rng::rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn line_data(n: usize, seed: u64) -> Dataset {
        let mut r = rng(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + noise.sample(&mut r)).collect();
        Dataset::new(
            Matrix::from_vec(n, 1, xs).unwrap(),
            Targets::Values(ys),
            None,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn map_recovers_least_squares_slope() {
        let data = line_data(200, 1);
        let Targets::Values(y) = &data.targets else {
            unreachable!()
        };
        let x = data.inputs.as_slice();
        // OLS oracle (no intercept in the generator, but the model has a bias)
        let (mx, my) = (x.iter().sum::<f64>() / 200.0, y.iter().sum::<f64>() / 200.0);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let ols = sxy / sxx;

        let spec = MlpSpec::new(vec![1, 1], Head::GaussianFixedStd);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let p = train_map(&spec, &data, &cfg).unwrap();
        assert!((p.values[0] - 2.0).abs() < 0.1);
        assert!(
            (p.values[0] - ols).abs() < 0.02,
            "{} vs {}",
            p.values[0],
            ols
        );
    }

    #[test]
    fn zero_epochs_is_identity_and_runs_are_deterministic() {
        let data = line_data(40, 2);
        let spec = MlpSpec::new(vec![1, 8, 1], Head::GaussianFixedStd);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        assert_eq!(
            train_map(&spec, &data, &cfg).unwrap(),
            init_params(&spec, 3)
        );
        let cfg = TrainConfig { epochs: 5, ..cfg };
        let a = train_map(&spec, &data, &cfg).unwrap();
        let b = train_map(&spec, &data, &cfg).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn training_reduces_loss() {
        let data = line_data(60, 5);
        let spec = MlpSpec::new(vec![1, 8, 1], Head::GaussianFixedStd);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let init = init_params(&spec, 0);
        let p = train_map(&spec, &data, &cfg).unwrap();
        let loss = |p: &ParameterVector| {
            crate::model::nll_and_grad(&spec, p, &data.inputs, &data.targets)
                .unwrap()
                .0
        };
        assert!(loss(&p) < loss(&init));
    }

    #[test]
    fn mcd_examples() {
        let spec = MlpSpec::new(vec![2, 16, 3], Head::Categorical);
        let p = init_params(&spec, 4);
        let mut r = rng(9);
        let x = Matrix::from_vec(
            5,
            2,
            (0..10).map(|_| StandardNormal.sample(&mut r)).collect(),
        )
        .unwrap();
        let d = Dataset::new(x, Targets::Classes(vec![0; 5]), None, Split::TestId).unwrap();
        assert!(mcd_predict(&spec, &p, &d, 10, 0).is_err());

        let mut tiny = spec.clone();
        tiny.dropout_rate = 1e-6;
        let det = predict(&spec, &p, &d, None).unwrap();
        let mc = mcd_predict(&tiny, &p, &d, 100, 7).unwrap();
        for (a, b) in mc
            .probs()
            .unwrap()
            .as_slice()
            .iter()
            .zip(det.probs().unwrap().as_slice())
        {
            assert!((a - b).abs() < 1e-3);
        }

        let mut half = spec.clone();
        half.dropout_rate = 0.5;
        let one = mcd_predict(&half, &p, &d, 1, 3).unwrap();
        let single_pass = predict(&half, &p, &d, Some(crate::rng::derive_seed(3, 0))).unwrap();
        assert_eq!(one, single_pass);
        assert_eq!(
            mcd_predict(&half, &p, &d, 8, 3).unwrap(),
            mcd_predict(&half, &p, &d, 8, 3).unwrap()
        );
    }
}
