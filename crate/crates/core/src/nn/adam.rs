//! Adam with L2 weight decay folded into the gradient.

use ndarray::ArrayD;

use super::ParamFn;

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    t: u64,
    state: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
            t: 0,
            state: Vec::new(),
        }
    }

    /// Applies one update to every parameter the visitor yields, then zeroes
    /// the gradients. Parameters must be visited in a stable order; state is
    /// keyed by visit position.
    pub fn step(&mut self, visit: impl FnOnce(&mut ParamFn)) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let lr_t = (self.lr as f64 * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);

        let state = &mut self.state;
        let mut idx = 0usize;
        visit(&mut |_name, mut p| {
            if state.len() == idx {
                state.push((
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                ));
            }
            let (m, v) = &mut state[idx];
            idx += 1;
            let values = p.value.as_slice_mut().expect("contiguous param");
            let grads = p.grad.as_slice_mut().expect("contiguous grad");
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..values.len() {
                let g = grads[i] + wd * values[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                values[i] -= lr_t * ms[i] / (vs[i].sqrt() + eps);
                grads[i] = 0.0;
            }
        });
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Optimizer state arrays (first/second moments) in visit order,
    /// exposed for checkpointing.
    pub fn state(&self) -> &[(ArrayD<f32>, ArrayD<f32>)] {
        &self.state
    }

    /// Restores optimizer state saved by [`Adam::state`].
    pub fn restore(&mut self, t: u64, state: Vec<(ArrayD<f32>, ArrayD<f32>)>) {
        self.t = t;
        self.state = state;
    }
}
