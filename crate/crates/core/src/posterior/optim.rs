use super::{OptimizerKind, TrainConfig};

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: &TrainConfig, dim: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            first: vec![0.0; dim],
            second: match cfg.optimizer {
                OptimizerKind::Adam => vec![0.0; dim],
                OptimizerKind::SgdMomentum => Vec::new(),
            },
            t: 0,
        }
    }

    /// Descends `grad` in place. Adam uses `momentum` as its β₁.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t = self.t.saturating_add(1);
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                optimizer: kind,
                ..TrainConfig::default()
            };
            let mut opt = Optimizer::new(&cfg, 2);
            let mut x = vec![3.0, -2.0];
            for _ in 0..3000 {
                let g = vec![2.0 * (x[0] - 1.0), 4.0 * (x[1] + 0.5)];
                opt.step(&mut x, &g, 0.01);
            }
            assert!(
                (x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3,
                "{kind:?} {x:?}"
            );
        }
    }
}
