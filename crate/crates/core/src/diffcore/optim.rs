use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Per-parameter moment buffers and hyperparameters of AdamW.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    state: OptimizerState,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            state: OptimizerState {
                lr,
                weight_decay,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    /// Applies one update from the gradients held in `params`.
    ///
    /// Every gradient is checked before any parameter moves, so a non-finite
    /// gradient leaves the store untouched.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let s = &mut self.state;
        if s.first.len() != params.len() {
            s.first = params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
            s.second = s.first.clone();
        }
        for (_, p) in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { name: p.name.clone() });
                }
            }
        }
        s.step += 1;
        let t = s.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decay { s.weight_decay } else { 0.0 };
            let numel = p.tensor.numel();
            let grad: Vec<f64> = match p.tensor.grad() {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; numel],
            };
            let (m, v) = (&mut s.first[i], &mut s.second[i]);
            for (j, value) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g;
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g * g;
                let mut x = value.as_f64();
                if decay != 0.0 {
                    x -= s.lr * decay * x;
                }
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + s.eps);
                if update != 0.0 {
                    x -= s.lr * update;
                }
                *value = T::lit(x);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store(value: f64) -> (ParamStore<f64>, crate::diffcore::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[1], vec![value]).unwrap(), true).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(1.0);
        s.accumulate_grad(id, &[1.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut s).unwrap();
        let after = s.value(id).data()[0];
        assert!((1.0 - after - 0.1).abs() < 1e-8, "{after}");
        assert_eq!(opt.state().step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = store(0.731);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..5 {
            s.zero_grad();
            s.accumulate_grad(id, &[0.0]).unwrap();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 0.731);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // f(w) = (w - 3)^2, df = 2(w - 3)
        let (mut s, id) = store(0.0);
        let mut opt = AdamW::new(0.5, 0.0);
        let f = |w: f64| (w - 3.0) * (w - 3.0);
        let mut trace = vec![f(0.0)];
        for _ in 0..2 {
            let w = s.value(id).data()[0];
            s.zero_grad();
            s.accumulate_grad(id, &[2.0 * (w - 3.0)]).unwrap();
            opt.step(&mut s).unwrap();
            trace.push(f(s.value(id).data()[0]));
        }
        // scalar oracle: step 1 moves by lr; step 2 by lr * m̂/sqrt(v̂) with g shrinking
        assert!((trace[1] - 2.5f64.powi(2)).abs() < 1e-6);
        assert!(trace[0] > trace[1] && trace[1] > trace[2], "{trace:?}");
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut s, id) = store(1.0);
        s.accumulate_grad(id, &[f64::NAN]).unwrap();
        let err = AdamW::new(0.1, 0.0).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }
}
