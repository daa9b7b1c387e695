//! Deterministic parallel matrix products.
//!
//! All heavy products route through these helpers. Work is split into a
//! fixed number of chunks independent of the thread count, each chunk is a
//! single-threaded GEMM, and partial results are combined in a fixed order,
//! so results are bitwise reproducible on any machine regardless of how many
//! rayon workers happen to run.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

/// Number of work chunks. Fixed so that chunk boundaries (and therefore
/// floating-point summation order) never depend on the thread count.
const CHUNKS: usize = 8;

fn row_ranges(rows: usize) -> Vec<(usize, usize)> {
    let step = rows.div_ceil(CHUNKS).max(1);
    (0..rows)
        .step_by(step)
        .map(|lo| (lo, (lo + step).min(rows)))
        .collect()
}

/// `C = A · B` for `A: (m, k)`, `B: (k, n)`; parallel over row blocks of `A`.
pub fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let (m, k) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(k, kb, "inner dimensions must agree");
    let mut out = Array2::<f32>::zeros((m, n));
    let ranges = row_ranges(m);
    let blocks: Vec<Array2<f32>> = ranges
        .par_iter()
        .map(|&(lo, hi)| a.slice(s![lo..hi, ..]).dot(b))
        .collect();
    for (&(lo, hi), block) in ranges.iter().zip(blocks) {
        out.slice_mut(s![lo..hi, ..]).assign(&block);
    }
    out
}

/// `C = Aᵀ · B` for `A: (r, m)`, `B: (r, n)`, contracting over the shared
/// leading axis. Partial products per row block are summed in block order.
pub fn matmul_tn(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let (r, m) = a.dim();
    let (rb, n) = b.dim();
    assert_eq!(r, rb, "contraction dimensions must agree");
    let ranges = row_ranges(r);
    let partials: Vec<Array2<f32>> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            a.slice(s![lo..hi, ..])
                .t()
                .dot(&b.slice(s![lo..hi, ..]))
        })
        .collect();
    let mut out = Array2::<f32>::zeros((m, n));
    for p in partials {
        out += &p;
    }
    out
}

/// `C = A · Bᵀ` for `A: (m, k)`, `B: (n, k)`; parallel over row blocks of `A`.
pub fn matmul_nt(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Array2<f32> {
    let (m, k) = a.dim();
    let (n, kb) = b.dim();
    assert_eq!(k, kb, "inner dimensions must agree");
    let mut out = Array2::<f32>::zeros((m, n));
    let ranges = row_ranges(m);
    let bt = b.t();
    let blocks: Vec<Array2<f32>> = ranges
        .par_iter()
        .map(|&(lo, hi)| a.slice(s![lo..hi, ..]).dot(&bt))
        .collect();
    for (&(lo, hi), block) in ranges.iter().zip(blocks) {
        out.slice_mut(s![lo..hi, ..]).assign(&block);
    }
    out
}

/// Mean over rows, kept here so reductions share one (sequential) code path.
pub fn col_mean(a: &ArrayView2<f32>) -> ndarray::Array1<f32> {
    a.mean_axis(Axis(0)).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
        let (m, k) = a.dim();
        let n = b.dim().1;
        let mut c = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for l in 0..k {
                    acc += a[[i, l]] * b[[l, j]];
                }
                c[[i, j]] = acc;
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let a = Array::from_shape_fn((37, 19), |(i, j)| ((i * 7 + j * 3) % 13) as f32 - 6.0);
        let b = Array::from_shape_fn((19, 23), |(i, j)| ((i * 5 + j * 11) % 17) as f32 - 8.0);
        let c = matmul(&a.view(), &b.view());
        let expect = naive(&a, &b);
        assert!(c.iter().zip(expect.iter()).all(|(x, y)| (x - y).abs() < 1e-3));

        let ct = matmul_tn(&a.t().to_owned().view(), &b.t().to_owned().view());
        let expect_t = naive(&a.t().to_owned(), &b.t().to_owned());
        assert!(ct.iter().zip(expect_t.iter()).all(|(x, y)| (x - y).abs() < 1e-3));

        let cn = matmul_nt(&a.view(), &b.t().to_owned().view());
        assert!(cn.iter().zip(expect.iter()).all(|(x, y)| (x - y).abs() < 1e-3));
    }

    #[test]
    fn reproducible_across_pool_sizes() {
        let a = Array::from_shape_fn((200, 64), |(i, j)| (i as f32 * 0.37 + j as f32 * 0.11).sin());
        let b = Array::from_shape_fn((200, 48), |(i, j)| (i as f32 * 0.19 - j as f32 * 0.23).cos());
        let wide = matmul_tn(&a.view(), &b.view());
        let narrow = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| matmul_tn(&a.view(), &b.view()));
        assert_eq!(wide, narrow);
    }
}
