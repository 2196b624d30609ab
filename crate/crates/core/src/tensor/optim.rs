use super::ParamStore;
use crate::error::{Error, Result};

/// In-place parameter update from the gradients held in a [`ParamStore`].
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore) -> Result<()>;
}

fn check_finite(params: &ParamStore) -> Result<()> {
    for id in params.ids() {
        if let Some(g) = params.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        check_finite(params)?;
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            for (w, g) in t.data_mut().iter_mut().zip(g) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        check_finite(params)?;
        if self.m.len() != params.len() {
            self.m = params
                .ids()
                .map(|id| vec![0.0; params.get(id).len()])
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn square_grad(store: &mut ParamStore) {
        store.zero_grad();
        let id = store.id_of("w").unwrap();
        let mut tape = Tape::with_params(store);
        let w = tape.param(id);
        let sq = tape.mul(w, w).unwrap();
        tape.backward(sq).unwrap();
        let grads: Vec<(_, Vec<f32>)> = tape.param_grads().map(|(i, g)| (i, g.to_vec())).collect();
        drop(tape);
        for (i, g) in grads {
            store.get_mut(i).accumulate_grad(&g);
        }
    }

    #[test]
    fn sgd_on_square_decays_geometrically() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        let mut opt = Sgd { lr: 0.1 };
        for _ in 0..50 {
            square_grad(&mut store);
            opt.step(&mut store).unwrap();
        }
        let w = store.get(store.id_of("w").unwrap()).item();
        // w_{t+1} = (1 - 2 lr) w_t = 0.8^t
        assert!((w - 0.8f32.powi(50)).abs() < 1e-7);
        assert!(w.abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.3, -0.7]));
        store.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        Sgd { lr: 0.5 }.step(&mut store).unwrap();
        assert_eq!(store.get(id).data(), &[0.3, -0.7]);
        Adam::new(0.5, 0.9, 0.999, 1e-8).step(&mut store).unwrap();
        assert_eq!(store.get(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so Δw = -lr · g / (|g| + ε) ≈ -lr
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.5));
        store.get_mut(id).accumulate_grad(&[1.0]);
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        opt.step(&mut store).unwrap();
        let delta = store.get(id).item() - 0.5;
        assert!((delta + 1e-3).abs() < 1e-7, "delta {delta}");
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("ok", Tensor::scalar(0.0));
        let bad = store.add("head_q.weight", Tensor::scalar(0.0));
        store.get_mut(bad).accumulate_grad(&[f32::NAN]);
        match (Sgd { lr: 0.1 }).step(&mut store) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "head_q.weight"),
            other => panic!("{other:?}"),
        }
    }
}
