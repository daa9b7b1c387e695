//! Batch normalization over NCHW maps and over plain feature batches.

use ndarray::{Array1, Array2, Array4, Axis};

use super::{join, BufferFn, ParamFn, ParamRef, StateFn};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

struct Bn2dCache {
    x_hat: Array4<f32>,
    inv_std: Array1<f32>,
}

/// Per-channel batch normalization for NCHW activations.
pub struct BatchNorm2d {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    ggamma: Array1<f32>,
    gbeta: Array1<f32>,
    running_mean: Array1<f32>,
    running_var: Array1<f32>,
    cache: Option<Bn2dCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f32;
        let mut y = x.clone();
        if train {
            let mut x_hat = x.clone();
            let mut inv_std = Array1::zeros(c);
            for ci in 0..c {
                let plane = x.index_axis(Axis(1), ci);
                let mean = plane.sum() / m;
                let mut var = 0.0f32;
                for &v in plane.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var /= m;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std[ci] = istd;
                let mut xh = x_hat.index_axis_mut(Axis(1), ci);
                xh.mapv_inplace(|v| (v - mean) * istd);
                let g = self.gamma[ci];
                let b = self.beta[ci];
                let mut yc = y.index_axis_mut(Axis(1), ci);
                yc.assign(&xh);
                yc.mapv_inplace(|v| v * g + b);
                // Running estimates use the unbiased variance.
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_mean[ci] = (1.0 - MOMENTUM) * self.running_mean[ci] + MOMENTUM * mean;
                self.running_var[ci] = (1.0 - MOMENTUM) * self.running_var[ci] + MOMENTUM * unbiased;
            }
            self.cache = Some(Bn2dCache { x_hat, inv_std });
        } else {
            for ci in 0..c {
                let mean = self.running_mean[ci];
                let istd = 1.0 / (self.running_var[ci] + EPS).sqrt();
                let g = self.gamma[ci];
                let b = self.beta[ci];
                let mut yc = y.index_axis_mut(Axis(1), ci);
                yc.mapv_inplace(|v| (v - mean) * istd * g + b);
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f32;
        let mut dx = dy.clone();
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.x_hat.index_axis(Axis(1), ci);
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xh = 0.0f32;
            for (&d, &xv) in dyc.iter().zip(xh.iter()) {
                sum_dy += d;
                sum_dy_xh += d * xv;
            }
            self.gbeta[ci] += sum_dy;
            self.ggamma[ci] += sum_dy_xh;
            let scale = self.gamma[ci] * cache.inv_std[ci] / m;
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            for (d, (&dyv, &xv)) in dxc.iter_mut().zip(dyc.iter().zip(xh.iter())) {
                *d = scale * (m * dyv - sum_dy - xv * sum_dy_xh);
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(
            &join(prefix, "gamma"),
            ParamRef {
                value: self.gamma.view_mut().into_dyn(),
                grad: self.ggamma.view_mut().into_dyn(),
            },
        );
        f(
            &join(prefix, "beta"),
            ParamRef {
                value: self.beta.view_mut().into_dyn(),
                grad: self.gbeta.view_mut().into_dyn(),
            },
        );
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        f(&join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
        f(&join(prefix, "running_var"), self.running_var.view_mut().into_dyn());
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
        f(&join(prefix, "running_mean"), self.running_mean.view().into_dyn());
        f(&join(prefix, "running_var"), self.running_var.view().into_dyn());
    }
}

struct Bn1dCache {
    x_hat: Array2<f32>,
    inv_std: Array1<f32>,
}

/// Per-feature batch normalization for (N, F) batches.
pub struct BatchNorm1d {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    ggamma: Array1<f32>,
    gbeta: Array1<f32>,
    running_mean: Array1<f32>,
    running_var: Array1<f32>,
    cache: Option<Bn1dCache>,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            ggamma: Array1::zeros(features),
            gbeta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let (n, f) = x.dim();
        let m = n as f32;
        let mut y = x.clone();
        if train {
            let mut x_hat = x.clone();
            let mut inv_std = Array1::zeros(f);
            for fi in 0..f {
                let col = x.index_axis(Axis(1), fi);
                let mean = col.sum() / m;
                let mut var = 0.0f32;
                for &v in col.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var /= m;
                let istd = 1.0 / (var + EPS).sqrt();
                inv_std[fi] = istd;
                let mut xc = x_hat.index_axis_mut(Axis(1), fi);
                xc.mapv_inplace(|v| (v - mean) * istd);
                let g = self.gamma[fi];
                let b = self.beta[fi];
                let mut yc = y.index_axis_mut(Axis(1), fi);
                yc.assign(&xc);
                yc.mapv_inplace(|v| v * g + b);
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_mean[fi] = (1.0 - MOMENTUM) * self.running_mean[fi] + MOMENTUM * mean;
                self.running_var[fi] = (1.0 - MOMENTUM) * self.running_var[fi] + MOMENTUM * unbiased;
            }
            self.cache = Some(Bn1dCache { x_hat, inv_std });
        } else {
            for fi in 0..f {
                let mean = self.running_mean[fi];
                let istd = 1.0 / (self.running_var[fi] + EPS).sqrt();
                let g = self.gamma[fi];
                let b = self.beta[fi];
                let mut yc = y.index_axis_mut(Axis(1), fi);
                yc.mapv_inplace(|v| (v - mean) * istd * g + b);
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (n, f) = dy.dim();
        let m = n as f32;
        let mut dx = dy.clone();
        for fi in 0..f {
            let dyc = dy.index_axis(Axis(1), fi);
            let xh = cache.x_hat.index_axis(Axis(1), fi);
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xh = 0.0f32;
            for (&d, &xv) in dyc.iter().zip(xh.iter()) {
                sum_dy += d;
                sum_dy_xh += d * xv;
            }
            self.gbeta[fi] += sum_dy;
            self.ggamma[fi] += sum_dy_xh;
            let scale = self.gamma[fi] * cache.inv_std[fi] / m;
            let mut dxc = dx.index_axis_mut(Axis(1), fi);
            for (d, (&dyv, &xv)) in dxc.iter_mut().zip(dyc.iter().zip(xh.iter())) {
                *d = scale * (m * dyv - sum_dy - xv * sum_dy_xh);
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(
            &join(prefix, "gamma"),
            ParamRef {
                value: self.gamma.view_mut().into_dyn(),
                grad: self.ggamma.view_mut().into_dyn(),
            },
        );
        f(
            &join(prefix, "beta"),
            ParamRef {
                value: self.beta.view_mut().into_dyn(),
                grad: self.gbeta.view_mut().into_dyn(),
            },
        );
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn) {
        f(&join(prefix, "running_mean"), self.running_mean.view_mut().into_dyn());
        f(&join(prefix, "running_var"), self.running_var.view_mut().into_dyn());
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
        f(&join(prefix, "running_mean"), self.running_mean.view().into_dyn());
        f(&join(prefix, "running_var"), self.running_var.view().into_dyn());
    }
}
