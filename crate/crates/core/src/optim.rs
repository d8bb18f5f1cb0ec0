//! Adam with L2 weight decay folded into the gradient.

use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_EPS: f32 = 1e-8;

/// Moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    /// Indexed by parameter id; created on first update.
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32, n_params: usize) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            weight_decay,
            state: vec![None; n_params],
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(id.0).and_then(Option::as_ref)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Option<Moments>) {
        if self.state.len() <= id.0 {
            self.state.resize(id.0 + 1, None);
        }
        self.state[id.0] = m;
    }

    /// Applies one update to every parameter listed in `grads`. Normalization
    /// parameters are exempt from weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, grad) in grads {
            let p = store.get_mut(*id);
            let decay = if p.kind == ParamKind::Norm {
                0.0
            } else {
                self.weight_decay
            };
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - (b1 as f64).powi(st.step as i32);
            let bc2 = 1.0 - (b2 as f64).powi(st.step as i32);
            let step_size = (self.lr as f64 / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let w = p.value.data_mut();
            for (((w, g), m), v) in w
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let g = g + decay * *w;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() / bc2_sqrt + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), ParamKind::Weight, Group::G_XY);
        let mut adam = Adam::new(0.1, 0.5, 0.999, 0.0, store.len());
        adam.step(&mut store, &[(id, Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())]);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        assert_eq!(adam.moments(id).unwrap().step, 1);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![0.3, 1.7, -2.0]).unwrap(), ParamKind::Weight, Group::C_X);
        let before = store.value(id).clone();
        let mut adam = Adam::new(0.0, 0.5, 0.999, 1e-4, store.len());
        for _ in 0..3 {
            adam.step(&mut store, &[(id, Tensor::full(&[3], 0.25))]);
        }
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn norm_parameters_skip_decay() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[1], 5.0), ParamKind::Weight, Group::G_XY);
        let r = store.add("rho", Tensor::full(&[1], 5.0), ParamKind::Norm, Group::G_XY);
        let mut adam = Adam::new(0.01, 0.5, 0.999, 1.0, store.len());
        adam.step(&mut store, &[(w, Tensor::zeros(&[1])), (r, Tensor::zeros(&[1]))]);
        assert!(store.value(w).item() < 5.0);
        assert_eq!(store.value(r).item(), 5.0);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 3.0), ParamKind::Weight, Group::G_XY);
        let mut adam = Adam::new(0.05, 0.9, 0.999, 0.0, store.len());
        for _ in 0..2000 {
            let w = store.value(id).item();
            adam.step(&mut store, &[(id, Tensor::full(&[1], 2.0 * (w - 1.0)))]);
        }
        assert!((store.value(id).item() - 1.0).abs() < 1e-2);
    }
}
