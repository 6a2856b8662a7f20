//! Diagonal last-layer Laplace approximation with generalized Gauss-Newton
//! curvature.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{config_bail, Result};
use crate::metrics::log_likelihoods;
use crate::model::{
    bma_predict, forward, penultimate_features, predict, Dataset, Head, MlpSpec, ParameterVector,
    PredictionSet,
};
use crate::rng::{derive_seed, rng};

use super::PosteriorApproximation;

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceState {
    pub map_params: ParameterVector,
    /// Diagonal GGN over the last layer's parameters (weights, then bias).
    pub curvature: Vec<f64>,
    pub prior_precision: f64,
}

impl LaplaceState {
    pub fn with_prior_precision(&self, tau: f64) -> Self {
        Self {
            prior_precision: tau,
            ..self.clone()
        }
    }

    /// Posterior precision `curvature + τ` per last-layer parameter.
    pub fn precision(&self) -> Vec<f64> {
        self.curvature
            .iter()
            .map(|h| h + self.prior_precision)
            .collect()
    }

    pub fn sample(&self, seed: u64) -> ParameterVector {
        let mut r = rng(seed);
        let range = self.map_params.layout().last_layer().full_range();
        let mut v = self.map_params.values.clone();
        for (t, p) in v[range].iter_mut().zip(self.precision()) {
            let z: f64 = StandardNormal.sample(&mut r);
            *t += z / p.sqrt();
        }
        self.map_params.with_values(v)
    }
}

impl PosteriorApproximation for LaplaceState {
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        (0..eval_samples as u64)
            .map(|k| predict(spec, &self.sample(derive_seed(seed, k)), data, None))
            .collect()
    }
}

/// Accumulates the diagonal GGN of the summed NLL over `data` for the last
/// layer, at `map_params`.
pub fn fit_laplace_last_layer(
    spec: &MlpSpec,
    map_params: &ParameterVector,
    data: &Dataset,
    prior_precision: f64,
) -> Result<LaplaceState> {
    spec.validate()?;
    data.check_against(spec)?;
    if !(prior_precision > 0.0) {
        config_bail!("prior precision must be positive");
    }
    let seg = map_params.layout().last_layer().clone();
    let feats = penultimate_features(spec, map_params, &data.inputs)?;
    let out = forward(spec, map_params, &data.inputs, None)?;
    let mut curv = vec![0.0; seg.full_range().len()];
    let nw = seg.rows * seg.cols;
    let has_bias = seg.bias_offset.is_some();
    for i in 0..data.len() {
        let a = feats.row(i);
        // per-output GGN weight: ∂²NLL/∂z_k² for the head
        let lam: Vec<f64> = match spec.head {
            Head::Categorical => {
                let mut p = out.row(i).to_vec();
                crate::model::softmax_in_place(&mut p);
                p.iter().map(|pk| pk * (1.0 - pk)).collect()
            }
            Head::GaussianFixedStd => vec![1.0 / (spec.fixed_output_std * spec.fixed_output_std)],
            Head::GaussianLearnedStd => vec![(-2.0 * out.get(i, 1)).exp(), 2.0],
        };
        for (k, &l) in lam.iter().enumerate() {
            for (j, &aj) in a.iter().enumerate() {
                curv[k * seg.cols + j] += l * aj * aj;
            }
            if has_bias {
                curv[nw + k] += l;
            }
        }
    }
    if curv.iter().all(|&h| h == 0.0) {
        log::warn!("last-layer curvature is all zero; Laplace falls back to the prior precision");
    }
    Ok(LaplaceState {
        map_params: map_params.clone(),
        curvature: curv,
        prior_precision,
    })
}

/// Picks τ from `grid` maximizing the validation log-likelihood of the
/// 10-sample BMA predictive. Ties go to the larger τ.
pub fn laplace_tune_prior_precision(
    spec: &MlpSpec,
    state: &LaplaceState,
    val: &Dataset,
    grid: &[f64],
    seed: u64,
) -> Result<LaplaceState> {
    if grid.is_empty() {
        config_bail!("prior-precision grid is empty");
    }
    if grid.iter().any(|&t| !(t > 0.0)) {
        config_bail!("prior-precision grid entries must be positive");
    }
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&tau| {
            let cand = state.with_prior_precision(tau);
            let bma = bma_predict(&cand.sample_predictions(spec, val, 10, seed)?)?;
            Ok(log_likelihoods(&bma)?.iter().sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] > grid[best]) {
            best = i;
        }
    }
    log::debug!(
        "laplace tuning: tau = {} (val ll {})",
        grid[best],
        scores[best]
    );
    Ok(state.with_prior_precision(grid[best]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Matrix, Split, Targets};
    use crate::reference::{analytic_linear_gaussian_posterior, ConjugateLinearModel};

    fn linear_task() -> (MlpSpec, Dataset, ConjugateLinearModel) {
        // orthogonal design columns: XᵀX = diag(4, 4)
        let rows = vec![
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ];
        let y = vec![0.3, -0.2, 0.5, 0.1];
        let mut spec = MlpSpec::new(vec![2, 1], Head::GaussianFixedStd);
        spec.bias = false;
        spec.fixed_output_std = 0.5;
        let data = Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            Targets::Values(y.clone()),
            None,
            Split::Train,
        )
        .unwrap();
        let model = ConjugateLinearModel {
            design: rows,
            targets: y,
            noise_std: 0.5,
            prior_std: 2.0,
        };
        (spec, data, model)
    }

    #[test]
    fn linear_gaussian_covariance_is_exact() {
        let (spec, data, model) = linear_task();
        let (_, cov) = analytic_linear_gaussian_posterior(&model, 2).unwrap();
        let st = fit_laplace_last_layer(&spec, &init_params(&spec, 0), &data, 0.25).unwrap();
        let p = st.precision();
        for i in 0..2 {
            assert!((1.0 / p[i] - cov[i][i]).abs() < 1e-6);
            for j in 0..2 {
                if i != j {
                    assert!(cov[i][j].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicated_data_doubles_curvature() {
        let spec = MlpSpec::new(vec![2, 4, 3], Head::Categorical);
        let p = init_params(&spec, 1);
        let x = Matrix::from_vec(3, 2, vec![0.1, 0.5, -1.0, 0.3, 0.8, -0.6]).unwrap();
        let d = Dataset::new(x, Targets::Classes(vec![0, 2, 1]), None, Split::Train).unwrap();
        let dd = d.subset(&[0, 1, 2, 0, 1, 2]);
        let a = fit_laplace_last_layer(&spec, &p, &d, 1.0).unwrap();
        let b = fit_laplace_last_layer(&spec, &p, &dd, 1.0).unwrap();
        for (x, y) in a.curvature.iter().zip(&b.curvature) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert!(a.precision().iter().all(|&v| v >= 1.0));
    }

    #[test]
    fn huge_prior_precision_collapses_to_map() {
        let spec = MlpSpec::new(vec![2, 4, 3], Head::Categorical);
        let p = init_params(&spec, 2);
        let x = Matrix::from_vec(2, 2, vec![0.4, -0.5, 1.0, 0.2]).unwrap();
        let d = Dataset::new(x, Targets::Classes(vec![0, 1]), None, Split::TestId).unwrap();
        let st = fit_laplace_last_layer(&spec, &p, &d, 1e14).unwrap();
        let bma = bma_predict(&st.sample_predictions(&spec, &d, 10, 0).unwrap()).unwrap();
        let det = predict(&spec, &p, &d, None).unwrap();
        for (a, b) in bma
            .probs()
            .unwrap()
            .as_slice()
            .iter()
            .zip(det.probs().unwrap().as_slice())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tuning_rules() {
        let (spec, data, _) = linear_task();
        let st = fit_laplace_last_layer(&spec, &init_params(&spec, 0), &data, 1.0).unwrap();
        let one = laplace_tune_prior_precision(&spec, &st, &data, &[3.0], 0).unwrap();
        assert_eq!(one.prior_precision, 3.0);
        // zero last-layer inputs make every candidate's likelihood identical
        let x = Matrix::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let flat = Dataset::new(x, Targets::Values(vec![0.1, 0.2]), None, Split::Val).unwrap();
        let t = laplace_tune_prior_precision(&spec, &st, &flat, &[0.5, 10.0, 2.0], 0).unwrap();
        assert_eq!(t.prior_precision, 10.0);
        assert!(laplace_tune_prior_precision(&spec, &st, &flat, &[], 0).is_err());
    }
}
