//! 2-D convolution via im2col and blocked GEMM.

use ndarray::{Array2, Array4};
use rayon::prelude::*;

use super::{join, kaiming_fill, ParamFn, ParamRef, StateFn};
use crate::linalg;

struct ConvCache {
    cols: Array2<f32>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

/// 3x3 (or kxk) convolution without bias; batch norm always follows it.
pub struct Conv2d {
    w: Array2<f32>, // (cout, cin*k*k)
    gw: Array2<f32>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let mut w = Array2::zeros((cout, cin * k * k));
        kaiming_fill(w.as_slice_mut().unwrap(), cin * k * k, rng);
        Self {
            gw: Array2::zeros(w.dim()),
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn param_count(&self) -> usize {
        self.w.len()
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "channel mismatch");
        let (ho, wo) = self.out_size(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, ho, wo);
        let out_mat = linalg::matmul_nt(&cols.view(), &self.w.view());
        let out = mat_to_nchw(&out_mat, n, self.cout, ho, wo);
        if train {
            self.cache = Some(ConvCache {
                cols,
                in_dims: (n, cin, h, w),
                out_hw: (ho, wo),
            });
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("conv backward without forward");
        let (n, cin, h, w) = cache.in_dims;
        let (ho, wo) = cache.out_hw;
        let dy_mat = nchw_to_mat(dy);
        self.gw += &linalg::matmul_tn(&dy_mat.view(), &cache.cols.view());
        let dcols = linalg::matmul(&dy_mat.view(), &self.w.view());
        col2im(&dcols, n, cin, h, w, self.k, self.stride, self.pad, ho, wo)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(
            &join(prefix, "weight"),
            ParamRef {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view_mut().into_dyn(),
            },
        );
    }

    pub fn visit_state(&self, prefix: &str, f: &mut StateFn) {
        f(&join(prefix, "weight"), self.w.view().into_dyn());
    }
}

/// Unfolds NCHW input into (N*Ho*Wo, C*k*k) patch rows, zero-padded.
fn im2col(x: &Array4<f32>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let ckk = c * k * k;
    let xs = x.as_slice().expect("contiguous input");
    let mut cols = vec![0.0f32; n * ho * wo * ckk];
    cols.par_chunks_mut(ho * wo * ckk)
        .enumerate()
        .for_each(|(ni, chunk)| {
            let xn = &xs[ni * c * h * w..(ni + 1) * c * h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = &mut chunk[(oh * wo + ow) * ckk..(oh * wo + ow + 1) * ckk];
                    let mut q = 0;
                    for ci in 0..c {
                        let base = ci * h * w;
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                q += k;
                                continue;
                            }
                            let rowbase = base + ih as usize * w;
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    row[q] = xn[rowbase + iw as usize];
                                }
                                q += 1;
                            }
                        }
                    }
                }
            }
        });
    Array2::from_shape_vec((n * ho * wo, ckk), cols).unwrap()
}

/// Folds (N*Ho*Wo, C*k*k) patch-row gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f32> {
    let ckk = c * k * k;
    let ds = dcols.as_slice().expect("contiguous dcols");
    let mut dx = vec![0.0f32; n * c * h * w];
    dx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, dxn)| {
        let chunk = &ds[ni * ho * wo * ckk..(ni + 1) * ho * wo * ckk];
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &chunk[(oh * wo + ow) * ckk..(oh * wo + ow + 1) * ckk];
                let mut q = 0;
                for ci in 0..c {
                    let base = ci * h * w;
                    for ki in 0..k {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            q += k;
                            continue;
                        }
                        let rowbase = base + ih as usize * w;
                        for kj in 0..k {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dxn[rowbase + iw as usize] += row[q];
                            }
                            q += 1;
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((n, c, h, w), dx).unwrap()
}

/// Max pooling with argmax cache; only used by full-size stems.
pub struct MaxPool2d {
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize), (usize, usize))>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let ho = (h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.k) / self.stride + 1;
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut r = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ki in 0..self.k {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..self.k {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let v = x[[ni, ci, ih as usize, iw as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = ih as usize * w + iw as usize;
                                }
                            }
                        }
                        out[[ni, ci, oh, ow]] = best;
                        argmax[r] = best_idx;
                        r += 1;
                    }
                }
            }
        }
        if train {
            self.cache = Some((argmax, (n, c, h, w), (ho, wo)));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (argmax, (n, c, h, w), (ho, wo)) =
            self.cache.take().expect("pool backward without forward");
        let mut dx = Array4::zeros((n, c, h, w));
        let mut r = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let idx = argmax[r];
                        dx[[ni, ci, idx / w, idx % w]] += dy[[ni, ci, oh, ow]];
                        r += 1;
                    }
                }
            }
        }
        dx
    }
}

/// (N*Ho*Wo, Cout) -> NCHW.
fn mat_to_nchw(mat: &Array2<f32>, n: usize, cout: usize, ho: usize, wo: usize) -> Array4<f32> {
    let ms = mat.as_slice().expect("contiguous");
    let mut out = vec![0.0f32; n * cout * ho * wo];
    out.par_chunks_mut(cout * ho * wo).enumerate().for_each(|(ni, chunk)| {
        let src = &ms[ni * ho * wo * cout..(ni + 1) * ho * wo * cout];
        for co in 0..cout {
            let dst = &mut chunk[co * ho * wo..(co + 1) * ho * wo];
            for (r, d) in dst.iter_mut().enumerate() {
                *d = src[r * cout + co];
            }
        }
    });
    Array4::from_shape_vec((n, cout, ho, wo), out).unwrap()
}

/// NCHW -> (N*Ho*Wo, Cout).
fn nchw_to_mat(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, ho, wo) = x.dim();
    let xs = x.as_slice().expect("contiguous");
    let mut out = vec![0.0f32; n * ho * wo * c];
    out.par_chunks_mut(ho * wo * c).enumerate().for_each(|(ni, chunk)| {
        let src = &xs[ni * c * ho * wo..(ni + 1) * c * ho * wo];
        for co in 0..c {
            let s = &src[co * ho * wo..(co + 1) * ho * wo];
            for (r, &v) in s.iter().enumerate() {
                chunk[r * c + co] = v;
            }
        }
    });
    Array2::from_shape_vec((n * ho * wo, c), out).unwrap()
}
