//! First-order optimizers over flat parameter/gradient slices.
//!
//! Parameters live in plain `Vec<f64>` buffers owned by the models; an
//! optimizer owns one state slot per parameter tensor and updates values in
//! place from a gradient slice of the same length.

use crate::{BudaError, Result};

/// Polynomially decayed SGD with heavy-ball momentum and decoupled-from-
/// schedule weight decay folded into the gradient.
///
/// lr(i) = base_lr * (1 - i / max_iter)^power, evaluated at the pre-step
/// iteration count; stepping past `max_iter` is an error rather than a
/// silent lr of zero.
#[derive(Debug, Clone)]
pub struct SgdPoly {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: u64,
    iter: u64,
    velocity: Vec<Vec<f64>>,
}

impl SgdPoly {
    pub fn new(base_lr: f64, power: f64, momentum: f64, weight_decay: f64, max_iter: u64) -> Self {
        SgdPoly { base_lr, power, momentum, weight_decay, max_iter, iter: 0, velocity: Vec::new() }
    }

    /// Iterations applied so far.
    pub fn iter(&self) -> u64 {
        self.iter
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.base_lr * (1.0 - self.iter as f64 / self.max_iter as f64).powf(self.power)
    }

    /// Applies one step over parallel lists of parameter and gradient
    /// slices. The slot layout must be identical on every call.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if self.iter >= self.max_iter {
            return Err(BudaError::ScheduleExhausted(self.max_iter));
        }
        if params.len() != grads.len() {
            return Err(BudaError::Contract(format!(
                "optimizer got {} param slots but {} grad slots",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(BudaError::Contract("optimizer slot count changed between steps".into()));
        }
        let lr = self.current_lr();
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.velocity[slot].len() {
                return Err(BudaError::Contract(format!(
                    "optimizer slot {slot}: param/grad/state lengths {} / {} / {}",
                    p.len(),
                    g.len(),
                    self.velocity[slot].len()
                )));
            }
            let v = &mut self.velocity[slot];
            for i in 0..p.len() {
                let update = self.momentum * v[i] - lr * (g[i] + self.weight_decay * p[i]);
                v[i] = update;
                p[i] += update;
            }
        }
        self.iter += 1;
        Ok(())
    }
}

/// Adam with the standard bias correction (Kingma & Ba defaults unless
/// overridden).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(BudaError::Contract(format!(
                "optimizer got {} param slots but {} grad slots",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(BudaError::Contract("optimizer slot count changed between steps".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(BudaError::Contract(format!(
                    "optimizer slot {slot}: param/grad lengths {} / {}",
                    p.len(),
                    g.len()
                )));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_at_half_schedule() {
        let opt = SgdPoly::new(1e-2, 0.9, 0.0, 0.0, 100);
        let mut opt2 = opt.clone();
        let mut p = [0.0f64];
        for _ in 0..50 {
            let mut refs: Vec<&mut [f64]> = vec![&mut p];
            opt2.step(&mut refs, &[&[0.0]]).unwrap();
        }
        assert_eq!(opt2.iter(), 50);
        let expected = 1e-2 * 0.5f64.powf(0.9);
        assert!((opt2.current_lr() - expected).abs() < 1e-15);
        assert!((opt.current_lr() - 1e-2).abs() < 1e-18);
    }

    #[test]
    fn sgd_first_step_is_minus_lr_times_grad() {
        let mut opt = SgdPoly::new(0.1, 0.9, 0.9, 0.0, 10);
        let mut p = [1.0f64, 2.0];
        let g = [0.5f64, -1.0];
        let mut refs: Vec<&mut [f64]> = vec![&mut p];
        opt.step(&mut refs, &[&g]).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert!((p[1] - (2.0 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_carries_velocity() {
        let mut opt = SgdPoly::new(0.1, 0.0, 0.9, 0.0, 100);
        // power 0 keeps lr constant so the recurrence is easy to track.
        let mut p = [0.0f64];
        let g = [1.0f64];
        let mut v = 0.0;
        let mut expect = 0.0;
        for _ in 0..5 {
            let mut refs: Vec<&mut [f64]> = vec![&mut p];
            opt.step(&mut refs, &[&g]).unwrap();
            v = 0.9 * v - 0.1;
            expect += v;
            assert!((p[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut opt = SgdPoly::new(0.1, 0.0, 0.0, 0.5, 10);
        let mut p = [2.0f64];
        let mut refs: Vec<&mut [f64]> = vec![&mut p];
        opt.step(&mut refs, &[&[0.0]]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn stepping_past_schedule_is_an_error() {
        let mut opt = SgdPoly::new(0.1, 0.9, 0.0, 0.0, 2);
        let mut p = [0.0f64];
        for _ in 0..2 {
            let mut refs: Vec<&mut [f64]> = vec![&mut p];
            opt.step(&mut refs, &[&[1.0]]).unwrap();
        }
        let mut refs: Vec<&mut [f64]> = vec![&mut p];
        match opt.step(&mut refs, &[&[1.0]]) {
            Err(BudaError::ScheduleExhausted(2)) => {}
            other => panic!("expected schedule exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With bias correction, the first Adam step is -lr * g/|g| up to eps.
        let mut opt = Adam::new(2e-4);
        let mut p = [1.0f64, -3.0];
        let g = [0.01f64, -42.0];
        let mut refs: Vec<&mut [f64]> = vec![&mut p];
        opt.step(&mut refs, &[&g]).unwrap();
        assert!((p[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((p[1] - (-3.0 + 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut opt = Adam::new(2e-4);
        let mut p = [0.7f64];
        let mut refs: Vec<&mut [f64]> = vec![&mut p];
        opt.step(&mut refs, &[&[0.0]]).unwrap();
        assert_eq!(p[0], 0.7);
    }
}
