//! SWAG: a Gaussian with diagonal plus low-rank covariance fitted to the
//! SGD trajectory.

use std::collections::VecDeque;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_bail, Error, Result};
use crate::model::{
    nll_and_grad_with_dropout, predict, Dataset, MlpSpec, ParameterVector, PredictionSet,
};
use crate::rng::{derive_seed, rng};

use super::{epoch_batches, Optimizer, PosteriorApproximation, TrainConfig};

pub const VARIANCE_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct SwagState {
    pub mean: ParameterVector,
    pub sq_mean: ParameterVector,
    /// Most recent deviations θ_i − mean_i, oldest first.
    pub deviations: VecDeque<Vec<f64>>,
    pub rank_k: usize,
    pub snapshots_taken: usize,
}

impl SwagState {
    pub fn new(template: &ParameterVector, rank_k: usize) -> Result<Self> {
        if rank_k == 0 {
            config_bail!("SWAG rank must be positive");
        }
        let zeros = template.with_values(vec![0.0; template.len()]);
        Ok(Self {
            mean: zeros.clone(),
            sq_mean: zeros,
            deviations: VecDeque::with_capacity(rank_k + 1),
            rank_k,
            snapshots_taken: 0,
        })
    }

    /// Folds one snapshot into the running moments with the incremental
    /// update `m += (θ − m)/(n+1)`, which stays exact on constant
    /// trajectories.
    pub fn observe(&mut self, theta: &[f64]) {
        let n = self.snapshots_taken as f64;
        for ((m, s), &t) in self
            .mean
            .values
            .iter_mut()
            .zip(self.sq_mean.values.iter_mut())
            .zip(theta)
        {
            *m += (t - *m) / (n + 1.0);
            *s += (t * t - *s) / (n + 1.0);
        }
        self.snapshots_taken += 1;
        let dev = theta
            .iter()
            .zip(&self.mean.values)
            .map(|(t, m)| t - m)
            .collect();
        self.deviations.push_back(dev);
        while self.deviations.len() > self.rank_k {
            self.deviations.pop_front();
        }
    }

    /// `sq_mean − mean²`, floored at 1e-30.
    pub fn diag_variance(&self) -> Vec<f64> {
        self.sq_mean
            .values
            .iter()
            .zip(&self.mean.values)
            .map(|(s, m)| (s - m * m).max(VARIANCE_FLOOR))
            .collect()
    }
}

/// θ = mean + √diag ⊙ z₁/√2 + D z₂/√(2(K−1)). Variances at the floor count
/// as zero, so a degenerate state returns its mean exactly.
pub fn swag_sample(state: &SwagState, seed: u64) -> Result<ParameterVector> {
    if state.snapshots_taken < 2 {
        config_bail!("SWAG sampling needs at least 2 snapshots");
    }
    let mut r = rng(seed);
    let diag = state.diag_variance();
    let mut theta = state.mean.values.clone();
    for (t, &v) in theta.iter_mut().zip(&diag) {
        let z: f64 = StandardNormal.sample(&mut r);
        if v > VARIANCE_FLOOR {
            *t += v.sqrt() * z / std::f64::consts::SQRT_2;
        }
    }
    let k = state.deviations.len();
    let scale = 1.0 / (2.0 * (k.max(2) - 1) as f64).sqrt();
    for col in &state.deviations {
        let z: f64 = StandardNormal.sample(&mut r);
        if z == 0.0 {
            continue;
        }
        for (t, d) in theta.iter_mut().zip(col) {
            *t += scale * d * z;
        }
    }
    Ok(state.mean.with_values(theta))
}

impl PosteriorApproximation for SwagState {
    fn sample_predictions(
        &self,
        spec: &MlpSpec,
        data: &Dataset,
        eval_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictionSet>> {
        (0..eval_samples as u64)
            .map(|k| predict(spec, &swag_sample(self, derive_seed(seed, k))?, data, None))
            .collect()
    }
}

/// Continues SGD from `warm_start` for `snapshots · snapshot_interval_steps`
/// steps, recording a snapshot at the end of every interval.
pub fn swag_collect(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    warm_start: &ParameterVector,
    snapshots: usize,
    snapshot_interval_steps: usize,
    rank_k: usize,
) -> Result<SwagState> {
    spec.validate()?;
    data.check_against(spec)?;
    cfg.validate(data.len())?;
    if snapshots < 2 {
        config_bail!("SWAG needs at least 2 snapshots");
    }
    if rank_k > snapshots {
        config_bail!("SWAG rank {rank_k} exceeds the snapshot count {snapshots}");
    }
    if snapshot_interval_steps == 0 {
        config_bail!("snapshot interval must be positive");
    }
    let mut state = SwagState::new(warm_start, rank_k)?;
    let n = data.len();
    let mut values = warm_start.values.clone();
    let mut opt = Optimizer::new(cfg, values.len());
    let use_dropout = spec.dropout_rate > 0.0;
    let total = snapshots * snapshot_interval_steps;
    let mut step = 0;
    let mut epoch = 0;
    'outer: loop {
        for batch in epoch_batches(n, cfg.batch_size, cfg.seed, epoch) {
            let sub = data.subset(&batch);
            let p = warm_start.with_values(values.clone());
            let (nll, mut g) = nll_and_grad_with_dropout(
                spec,
                &p,
                &sub.inputs,
                &sub.targets,
                use_dropout.then(|| derive_seed(cfg.seed, step as u64)),
            )
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::EpochDivergence { epoch, detail },
                other => other,
            })?;
            if !nll.is_finite() {
                return Err(Error::EpochDivergence {
                    epoch,
                    detail: format!("non-finite loss {nll}"),
                });
            }
            for (gi, v) in g.values.iter_mut().zip(&values) {
                *gi += cfg.weight_decay * v;
            }
            opt.step(&mut values, &g.values, cfg.learning_rate);
            step += 1;
            if step % snapshot_interval_steps == 0 {
                state.observe(&values);
            }
            if step == total {
                break 'outer;
            }
        }
        epoch += 1;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Head, Layout, Matrix, Split, Targets};
    use std::sync::Arc;

    fn template(len: usize) -> ParameterVector {
        let layout = Arc::new(Layout::for_widths(&[len, 1], false));
        ParameterVector::zeros(layout)
    }

    #[test]
    fn hand_fed_trajectory_has_exact_moments() {
        let t = template(3);
        let mut s = SwagState::new(&t, 2).unwrap();
        // every intermediate of the incremental update is representable
        let traj = [[1.0, 0.0, 0.5], [1.0, 0.0, 0.5], [4.0, 3.0, 2.0]];
        for v in &traj {
            s.observe(v);
        }
        for j in 0..3 {
            let m = (traj[0][j] + traj[1][j] + traj[2][j]) / 3.0;
            let sq =
                (traj[0][j] * traj[0][j] + traj[1][j] * traj[1][j] + traj[2][j] * traj[2][j]) / 3.0;
            assert_eq!(s.mean.values[j], m);
            assert_eq!(s.sq_mean.values[j], sq);
        }
        assert_eq!(s.deviations.len(), 2);
        assert_eq!(s.snapshots_taken, 3);
    }

    #[test]
    fn degenerate_state_samples_its_mean() {
        let t = template(4);
        let mut s = SwagState::new(&t, 3).unwrap();
        for _ in 0..5 {
            s.observe(&[0.3, -1.7, 2.0, 1e-3]);
        }
        assert!(s.diag_variance().iter().all(|&v| v == VARIANCE_FLOOR));
        for seed in 0..5 {
            assert_eq!(swag_sample(&s, seed).unwrap().values, s.mean.values);
        }
    }

    #[test]
    fn sample_covariance_matches_the_swag_formula() {
        let t = template(2);
        let mut s = SwagState::new(&t, 3).unwrap();
        s.mean.values = vec![1.0, -1.0];
        s.sq_mean.values = vec![1.0 + 0.4, 1.0 + 0.9];
        s.snapshots_taken = 3;
        s.deviations = VecDeque::from(vec![vec![0.5, 0.2], vec![-0.3, 0.6], vec![0.1, -0.4]]);
        let diag = [0.4, 0.9];
        let mut expect = [[0.0; 2]; 2];
        for a in 0..2 {
            expect[a][a] += diag[a] / 2.0;
            for b in 0..2 {
                for d in &s.deviations {
                    expect[a][b] += d[a] * d[b] / (2.0 * 2.0);
                }
            }
        }
        let draws = 100_000;
        let mut sum = [0.0; 2];
        let mut cross = [[0.0; 2]; 2];
        for k in 0..draws {
            let x = swag_sample(&s, k).unwrap().values;
            for a in 0..2 {
                sum[a] += x[a];
                for b in 0..2 {
                    cross[a][b] += x[a] * x[b];
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let c = cross[a][b] / draws as f64 - sum[a] * sum[b] / (draws as f64).powi(2);
                let tol = 0.05
                    * expect[a][b]
                        .abs()
                        .max(expect[a][a].sqrt() * expect[b][b].sqrt() * 0.2);
                assert!(
                    (c - expect[a][b]).abs() < tol,
                    "cov[{a}][{b}] {c} vs {}",
                    expect[a][b]
                );
            }
        }
        assert_eq!(swag_sample(&s, 7).unwrap(), swag_sample(&s, 7).unwrap());
    }

    #[test]
    fn collect_with_zero_rate_and_rank_cap() {
        let spec = MlpSpec::new(vec![2, 3, 2], Head::Categorical);
        let x = Matrix::from_vec(6, 2, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let data = Dataset::new(
            x,
            Targets::Classes(vec![0, 1, 0, 1, 1, 0]),
            None,
            Split::Train,
        )
        .unwrap();
        let warm = init_params(&spec, 1);
        let still = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let s = swag_collect(&spec, &data, &still, &warm, 5, 2, 3).unwrap();
        assert!(s.diag_variance().iter().all(|&v| v == VARIANCE_FLOOR));
        assert!(s.deviations.iter().flatten().all(|&d| d == 0.0));

        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let s = swag_collect(&spec, &data, &cfg, &warm, 30, 1, 20).unwrap();
        assert_eq!(s.deviations.len(), 20);
        assert_eq!(s.snapshots_taken, 30);
        assert!(swag_collect(&spec, &data, &cfg, &warm, 1, 1, 1).is_err());
        assert!(swag_collect(&spec, &data, &cfg, &warm, 3, 1, 4).is_err());
    }
}
