//! Adam and the learning-rate / scheduled-sampling schedules.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Moment buffers and step count, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::new(params),
        }
    }

    /// Bias-corrected update. Rejects non-finite gradients, naming the
    /// parameter, before touching any state.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.state.m.len() != params.len() {
            return Err(Error::LengthMismatch {
                op: "adam_step",
                left: params.len(),
                right: grads.len(),
            });
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::BadGradient(params.names()[i].clone()));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.state.m)
            .zip(&mut self.state.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step-decayed learning rate and stepped scheduled-sampling probability.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub ss_increment: f64,
    pub ss_every: usize,
    pub ss_max: f64,
    pub scst_lr: f64,
    pub scst_anneal: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            base_lr: 5e-4,
            decay_factor: 0.8,
            decay_every: 3,
            ss_increment: 0.05,
            ss_every: 5,
            ss_max: 1.0,
            scst_lr: 5e-5,
            scst_anneal: 0.5,
        }
    }
}

impl TrainingSchedule {
    /// `(lr, ss_prob)` for an XE epoch.
    pub fn at(&self, epoch: usize) -> (f64, f64) {
        let lr = self.base_lr * self.decay_factor.powi((epoch / self.decay_every.max(1)) as i32);
        let ss = (self.ss_increment * (epoch / self.ss_every.max(1)) as f64)
            .min(self.ss_max)
            .min(1.0);
        (lr, ss)
    }

    pub fn validate(&self) -> Result<()> {
        let probs_ok = (0.0..=1.0).contains(&self.ss_increment) && (0.0..=1.0).contains(&self.ss_max);
        if !(self.base_lr > 0.0 && self.scst_lr > 0.0) || !probs_ok {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }
}

/// Self-critical phase learning rate: halves whenever dev CIDEr-D fails to
/// improve on the best seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstLrController {
    pub lr: f64,
    pub anneal: f64,
    pub best: Option<f64>,
}

impl ScstLrController {
    pub fn new(schedule: &TrainingSchedule) -> Self {
        ScstLrController {
            lr: schedule.scst_lr,
            anneal: schedule.scst_anneal,
            best: None,
        }
    }

    /// Records an epoch's dev score and returns the rate for the next one.
    pub fn observe(&mut self, dev_score: f64) -> f64 {
        match self.best {
            Some(b) if dev_score <= b => self.lr *= self.anneal,
            _ => self.best = Some(dev_score),
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(values.to_vec()).unwrap());
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = one_param(&[1.0, -2.0]);
        let mut adam = Adam::new(&ps, 1e-3);
        adam.step(&mut ps, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut ps = one_param(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(&ps, 1e-3);
        adam.step(&mut ps, &[Tensor::vector(vec![0.5, -3.0, 2e-3]).unwrap()]).unwrap();
        let d = ps.tensors()[0].data();
        for (x, s) in d.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::vector(vec![0.3]).unwrap());
        ps.add("b", Tensor::vector(vec![0.3]).unwrap());
        let mut adam = Adam::new(&ps, 1e-2);
        for _ in 0..5 {
            let g = Tensor::vector(vec![0.7]).unwrap();
            adam.step(&mut ps, &[g.clone(), g]).unwrap();
        }
        assert_eq!(ps.tensors()[0], ps.tensors()[1]);
    }

    #[test]
    fn nan_gradient_rejected_with_name() {
        let mut ps = ParamSet::new();
        ps.add("editnet.w_out", Tensor::vector(vec![0.0]).unwrap());
        let mut adam = Adam::new(&ps, 1e-3);
        let err = adam.step(&mut ps, &[Tensor::from_parts(vec![1], vec![f64::NAN])]).unwrap_err();
        assert!(err.to_string().contains("editnet.w_out"), "{err}");
        assert_eq!(adam.state.step, 0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = 1/2 x^T A x - b^T x, minimiser A^-1 b = [0.2, 1.4]
        let a = [[3.0, 1.0], [1.0, 2.0]];
        let b = [2.0, 3.0];
        let x_star = [0.2, 1.4];
        let f = |x: &[f64]| {
            let ax = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
            0.5 * (x[0] * ax[0] + x[1] * ax[1]) - b[0] * x[0] - b[1] * x[1]
        };
        let mut ps = one_param(&[-1.0, 0.5]);
        let mut adam = Adam::new(&ps, 0.1);
        for _ in 0..200 {
            let x = ps.tensors()[0].data().to_vec();
            let grad = vec![
                a[0][0] * x[0] + a[0][1] * x[1] - b[0],
                a[1][0] * x[0] + a[1][1] * x[1] - b[1],
            ];
            adam.step(&mut ps, &[Tensor::vector(grad).unwrap()]).unwrap();
        }
        let x = ps.tensors()[0].data();
        assert!(f(x) - f(&x_star) < 1e-6, "gap {}", f(x) - f(&x_star));
        for (xi, si) in x.iter().zip(x_star) {
            assert!((xi - si).abs() < 1e-3);
        }
    }

    #[test]
    fn schedule_examples() {
        let s = TrainingSchedule::default();
        assert_eq!(s.at(0), (5e-4, 0.0));
        assert!((s.at(3).0 - 4e-4).abs() < 1e-18);
        assert!((s.at(10).1 - 0.10).abs() < 1e-15);
        assert_eq!(s.at(500).1, 1.0);
    }

    #[test]
    fn scst_lr_halves_without_improvement() {
        let mut c = ScstLrController::new(&TrainingSchedule::default());
        assert_eq!(c.observe(1.0), 5e-5);
        assert_eq!(c.observe(1.2), 5e-5);
        assert_eq!(c.observe(1.1), 2.5e-5);
        assert_eq!(c.observe(1.2), 1.25e-5);
    }
}
