//! AdamW with decoupled weight decay and an optional one-cycle
//! learning-rate schedule.

use ndarray::Zip;

use super::{ParamStore};
use crate::scalar::Scalar;

/// One-cycle schedule: linear warmup from `peak / start_div` to the peak
/// learning rate over `warmup_frac` of the run, then cosine annealing down
/// to `peak / final_div`.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(total_steps: u64) -> Self {
        Self {
            total_steps: total_steps.max(1),
            warmup_frac: 0.1,
            start_div: 25.0,
            final_div: 1000.0,
        }
    }

    fn factor(&self, step: u64) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        let w = self.warmup_frac.clamp(1e-6, 1.0);
        if t < w {
            let lo = 1.0 / self.start_div;
            lo + (1.0 - lo) * (t / w)
        } else {
            let u = (t - w) / (1.0 - w).max(1e-12);
            let lo = 1.0 / self.final_div;
            lo + (1.0 - lo) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
        }
    }
}

/// Decoupled-weight-decay Adam. `step` consumes the accumulated gradients
/// in a [`ParamStore`] (without zeroing them) and updates every trainable
/// entry in registration order.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    pub schedule: Option<OneCycle>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.99),
            eps: S::lit(1e-8),
            weight_decay: S::lit(0.01),
            schedule: None,
            t: 0,
        }
    }

    pub fn with_schedule(mut self, schedule: OneCycle) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn with_weight_decay(mut self, wd: S) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Learning rate the next `step` call will use.
    pub fn current_lr(&self) -> S {
        match self.schedule {
            Some(s) => self.lr * S::lit(s.factor(self.t)),
            None => self.lr,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) {
        let lr = self.current_lr();
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let (eps, wd) = (self.eps, self.weight_decay);
        for id in store.trainable_ids() {
            store.adam_update(id, |value, grad, m, v| {
                Zip::from(value)
                    .and(grad)
                    .and(m)
                    .and(v)
                    .for_each(|p, &g, m, v| {
                        *m = b1 * *m + (S::one() - b1) * g;
                        *v = b2 * *v + (S::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                    });
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::arr2;

    #[test]
    fn adamw_solves_least_squares() {
        // minimize ||X w - y||^2 for the exact solution w* = (1, -2)
        let x = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]]);
        let w_star = arr2(&[[1.0], [-2.0]]);
        let y = x.dot(&w_star);

        let mut st = ParamStore::<f64>::new();
        let wid = st.register("w", arr2(&[[0.0], [0.0]]).into_dyn()).unwrap();
        let mut opt = AdamW::new(0.05).with_weight_decay(0.0);

        let mut last_loss = f64::INFINITY;
        for _ in 0..800 {
            st.zero_grads();
            let mut g = Graph::<f64>::new();
            let xn = g.constant2(x.clone());
            let yn = g.constant2(y.clone());
            let w = g.param(&st, wid);
            let pred = g.matmul(xn, w).unwrap();
            let r = g.sub(pred, yn).unwrap();
            let r2 = g.mul(r, r).unwrap();
            let loss = g.sum_all(r2);
            last_loss = g.scalar(loss);
            g.backward(loss).unwrap();
            g.accumulate_grads(&mut st);
            opt.step(&mut st);
        }
        assert!(last_loss < 1e-8, "loss did not converge: {last_loss}");
        let w = st.value(wid);
        assert!((w[[0, 0]] - 1.0).abs() < 1e-3);
        assert!((w[[1, 0]] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn one_cycle_warms_up_then_decays() {
        let s = OneCycle::new(100);
        assert!(s.factor(0) < 0.05);
        let peak_region = s.factor(10);
        assert!((peak_region - 1.0).abs() < 1e-9, "peak at end of warmup");
        assert!(s.factor(50) < 1.0);
        assert!(s.factor(100) <= s.factor(60));
        assert!(s.factor(100) >= 1.0 / 1000.0 - 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let mut st = ParamStore::<f64>::new();
        let id = st.register("w", arr2(&[[10.0]]).into_dyn()).unwrap();
        let mut opt = AdamW::new(0.1);
        for _ in 0..10 {
            opt.step(&mut st);
        }
        let v = st.value(id)[[0, 0]];
        assert!(v < 10.0 && v > 9.8, "decoupled decay only: {v}");
    }
}
