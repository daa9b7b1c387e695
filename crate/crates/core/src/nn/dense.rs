//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};

use super::{join, kaiming_fill, ParamFn, ParamRef, StateFn};
use crate::linalg;

/// Affine layer `y = x Wᵀ + b`.
pub struct Linear {
    w: Array2<f32>, // (out, in)
    b: Array1<f32>,
    gw: Array2<f32>,
    gb: Array1<f32>,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut w = Array2::zeros((out_features, in_features));
        kaiming_fill(w.as_slice_mut().unwrap(), in_features, rng);
        Self {
            gw: Array2::zeros(w.dim()),
            w,
            b: Array1::zeros(out_features),
            gb: Array1::zeros(out_features),
            cache: None,
        }
    }

    pub fn out_features(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let mut y = linalg::matmul_nt(&x.view(), &self.w.view());
        y += &self.b.view().insert_axis(Axis(0));
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.take().expect("linear backward without forward");
        self.gw += &linalg::matmul_tn(&dy.view(), &x.view());
        self.gb += &dy.sum_axis(Axis(0));
        linalg::matmul(&dy.view(), &self.w.view())
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(
            &join(prefix, "weight"),
            ParamRef {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view_mut().into_dyn(),
            },
        );
        f(
            &join(prefix, "bias"),
            ParamRef {
                value: self.b.view_mut().into_dyn(),
                grad: self.gb.view_mut().into_dyn(),
            },
        );
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        f(&join(prefix, "weight"), self.w.view().into_dyn());
        f(&join(prefix, "bias"), self.b.view().into_dyn());
    }
}
