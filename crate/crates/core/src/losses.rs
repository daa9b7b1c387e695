//! Training objectives: contrastive NT-Xent, cross-peer KL distillation,
//! negative cosine similarity, and their weighted combination.
//!
//! Everything here is a pure function over immutable inputs, computed in
//! f64. Each objective comes in two flavors: a value-only form matching the
//! public contract, and a `*_with_grad` form returning analytic gradients
//! with respect to the live (non-detached) embedding inputs, used by the
//! training loop. Softmax and log-softmax subtract the row maximum before
//! exponentiation; KL stays in log space throughout.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the two correlated views an embedding batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    View1,
    View2,
}

/// Which peer produced an embedding batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerTag {
    Peer1,
    Peer2,
}

impl PeerTag {
    pub fn index(self) -> usize {
        match self {
            PeerTag::Peer1 => 0,
            PeerTag::Peer2 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PeerTag::Peer1 => "peer1",
            PeerTag::Peer2 => "peer2",
        }
    }
}

/// One batch of projection vectors, one row per sample view.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub values: Array2<f64>,
    pub view: ViewTag,
    pub peer: PeerTag,
}

impl EmbeddingBatch {
    /// Wraps an `N x m` array, checking `N >= 1`, `m >= 2` and finiteness.
    pub fn new(values: Array2<f64>, view: ViewTag, peer: PeerTag) -> Result<Self> {
        let (n, m) = values.dim();
        if n < 1 || m < 2 {
            return Err(Error::DimensionMismatch(format!(
                "embedding batch must be at least 1x2, got {n}x{m}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss(
                "embedding batch contains non-finite entries".into(),
            ));
        }
        Ok(Self { values, view, peer })
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Row-stochastic matrix of softmaxed temperature-scaled cosine similarities.
#[derive(Debug, Clone)]
pub struct SimilarityDistribution {
    probs: Array2<f64>,
    temperature: f64,
}

/// Row sums of a valid distribution must land within this tolerance of 1.
pub const ROW_SUM_TOL: f64 = 1e-6;

impl SimilarityDistribution {
    /// Validates an `N x N` row-stochastic matrix with entries in (0, 1).
    pub fn new(probs: Array2<f64>, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::TemperatureNonPositive(temperature));
        }
        let (n, m) = probs.dim();
        if n != m {
            return Err(Error::InvalidDistribution(format!(
                "similarity distribution must be square, got {n}x{m}"
            )));
        }
        for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidDistribution(format!(
                        "row {i} has entry {p} outside (0, 1)"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "row {i} sums to {sum}, expected 1 within {ROW_SUM_TOL:e}"
                )));
            }
        }
        Ok(Self { probs, temperature })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }
}

/// A scalar loss together with its named components.
///
/// The scalar always equals the arithmetic combination of the recorded
/// components (for single-term losses, the single component itself).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), value);
        Self { value, components }
    }
}

fn check_same_shape(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::shape(
            &[a.values.nrows(), a.values.ncols()],
            &[b.values.nrows(), b.values.ncols()],
        ));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::TemperatureNonPositive(tau));
    }
    Ok(())
}

/// Minimum row norm accepted by [`normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

fn row_norms(values: &Array2<f64>) -> Result<Array1<f64>> {
    let norms: Array1<f64> = values
        .axis_iter(Axis(0))
        .map(|row| row.dot(&row).sqrt())
        .collect();
    for (i, &n) in norms.iter().enumerate() {
        if n <= NORM_FLOOR {
            return Err(Error::ZeroNormRow { row: i, norm: n });
        }
    }
    Ok(norms)
}

fn normalized(values: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = row_norms(values)?;
    let mut unit = values.clone();
    for (mut row, &n) in unit.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((unit, norms))
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let (unit, _) = normalized(&batch.values)?;
    Ok(EmbeddingBatch {
        values: unit,
        view: batch.view,
        peer: batch.peer,
    })
}

/// Pulls a row gradient back through row normalization:
/// given `u = v / |v|` and `g = dL/du`, returns `dL/dv`.
fn unnormalize_grad(grad_unit: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for ((mut row, (g, u)), &n) in out
        .axis_iter_mut(Axis(0))
        .zip(grad_unit.axis_iter(Axis(0)).zip(unit.axis_iter(Axis(0))))
        .zip(norms.iter())
    {
        let proj = g.dot(&u);
        for (o, (&gv, &uv)) in row.iter_mut().zip(g.iter().zip(u.iter())) {
            *o = (gv - proj * uv) / n;
        }
    }
    out
}

/// Matrix of pairwise cosine similarities; entry `(i, j)` compares row `i`
/// of `a` against row `j` of `b`. Rows are normalized internally.
pub fn cosine_similarity_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Array2<f64>> {
    check_same_shape(a, b)?;
    let (ua, _) = normalized(&a.values)?;
    let (ub, _) = normalized(&b.values)?;
    Ok(ua.dot(&ub.t()))
}

/// Row-wise log-softmax with max subtraction. Returns (log_probs, probs).
fn log_softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut logp = logits.clone();
    for mut row in logp.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    let probs = logp.mapv(f64::exp);
    (logp, probs)
}

/// Softmax probabilities of temperature-scaled cosine similarities between
/// the two views of one peer. Row `i` is sample `i`'s distribution over all
/// view-b samples.
pub fn similarity_distribution(
    z_a: &EmbeddingBatch,
    z_b: &EmbeddingBatch,
    tau: f64,
) -> Result<SimilarityDistribution> {
    check_temperature(tau)?;
    let sims = cosine_similarity_matrix(z_a, z_b)?;
    let logits = sims.mapv(|s| s / tau);
    let (_, mut probs) = log_softmax_rows(&logits);
    // Keep entries strictly inside (0, 1) even when extreme temperatures
    // underflow the softmax tails.
    probs.mapv_inplace(|p| p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
    SimilarityDistribution::new(probs, tau)
}

/// Normalized temperature-scaled cross entropy over a batch of positive
/// pairs, averaged over all `2N` anchors. For each anchor the positive is
/// the other view of the same sample and the negatives are the `2(N - 1)`
/// remaining views in the concatenated batch.
pub fn nt_xent_loss(z1: &EmbeddingBatch, z2: &EmbeddingBatch, tau_c: f64) -> Result<LossValue> {
    nt_xent_inner(z1, z2, tau_c, false).map(|(loss, _, _)| loss)
}

/// [`nt_xent_loss`] plus analytic gradients with respect to `z1` and `z2`.
pub fn nt_xent_loss_with_grad(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    tau_c: f64,
) -> Result<(LossValue, Array2<f64>, Array2<f64>)> {
    nt_xent_inner(z1, z2, tau_c, true).map(|(loss, g1, g2)| (loss, g1.unwrap(), g2.unwrap()))
}

#[allow(clippy::type_complexity)]
fn nt_xent_inner(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    tau_c: f64,
    want_grad: bool,
) -> Result<(LossValue, Option<Array2<f64>>, Option<Array2<f64>>)> {
    check_temperature(tau_c)?;
    check_same_shape(z1, z2)?;
    let n = z1.batch_size();
    let m = z1.dim();
    let total = 2 * n;

    // Concatenate both views and normalize once; anchor i's positive sits at
    // (i + n) mod 2n.
    let mut stacked = Array2::<f64>::zeros((total, m));
    stacked.slice_mut(ndarray::s![..n, ..]).assign(&z1.values);
    stacked.slice_mut(ndarray::s![n.., ..]).assign(&z2.values);
    let (unit, norms) = normalized(&stacked)?;
    let logits = unit.dot(&unit.t()).mapv(|s| s / tau_c);

    let mut loss_sum = 0.0;
    // dL/d(logits), built anchor row by anchor row.
    let mut glogits = want_grad.then(|| Array2::<f64>::zeros((total, total)));

    for i in 0..total {
        let pos = (i + n) % total;
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..total {
            if j != i && row[j] > max {
                max = row[j];
            }
        }
        let mut denom = 0.0;
        for j in 0..total {
            if j != i {
                denom += (row[j] - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss_sum += lse - row[pos];
        if let Some(g) = glogits.as_mut() {
            let scale = 1.0 / total as f64;
            for j in 0..total {
                if j != i {
                    let p = (row[j] - lse).exp();
                    g[[i, j]] = scale * (p - if j == pos { 1.0 } else { 0.0 });
                }
            }
        }
    }

    let value = loss_sum / total as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("nt_xent produced {value}")));
    }
    let loss = LossValue::single("cl", value);
    if !want_grad {
        return Ok((loss, None, None));
    }

    // logits = (u uᵀ) / tau with the diagonal unused, so
    // dL/du = (G + Gᵀ) u / tau, then back through row normalization.
    let g = glogits.unwrap();
    let gsym = (&g + &g.t()).mapv(|v| v / tau_c);
    let gunit = gsym.dot(&unit);
    let graw = unnormalize_grad(&gunit, &unit, &norms);
    let g1 = graw.slice(ndarray::s![..n, ..]).to_owned();
    let g2 = graw.slice(ndarray::s![n.., ..]).to_owned();
    Ok((loss, Some(g1), Some(g2)))
}

/// KL divergence from `peer_dist` (constant target) to `self_dist`, averaged
/// over rows: `mean_i sum_j peer[i,j] * log(peer[i,j] / self[i,j])`.
pub fn kd_loss(
    self_dist: &SimilarityDistribution,
    peer_dist: &SimilarityDistribution,
) -> Result<LossValue> {
    if self_dist.n() != peer_dist.n() {
        return Err(Error::shape(
            &[peer_dist.n(), peer_dist.n()],
            &[self_dist.n(), self_dist.n()],
        ));
    }
    let n = self_dist.n() as f64;
    let mut sum = 0.0;
    for (p_row, q_row) in self_dist
        .probs
        .axis_iter(Axis(0))
        .zip(peer_dist.probs.axis_iter(Axis(0)))
    {
        for (&p, &q) in p_row.iter().zip(q_row.iter()) {
            sum += q * (q.ln() - p.ln());
        }
    }
    let value = sum / n;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("kd loss produced {value}")));
    }
    Ok(LossValue::single("kd", value))
}

/// Distillation loss evaluated from the producing embeddings, with analytic
/// gradients into them. `peer_dist` is a constant target: no gradient is
/// defined with respect to it or its producers.
pub fn kd_loss_with_grad(
    z_a: &EmbeddingBatch,
    z_b: &EmbeddingBatch,
    tau: f64,
    peer_dist: &SimilarityDistribution,
) -> Result<(LossValue, Array2<f64>, Array2<f64>)> {
    check_temperature(tau)?;
    check_same_shape(z_a, z_b)?;
    let n = z_a.batch_size();
    if peer_dist.n() != n {
        return Err(Error::shape(&[n, n], &[peer_dist.n(), peer_dist.n()]));
    }
    let (ua, na) = normalized(&z_a.values)?;
    let (ub, nb) = normalized(&z_b.values)?;
    let logits = ua.dot(&ub.t()).mapv(|s| s / tau);
    let (logp, probs) = log_softmax_rows(&logits);

    let q = peer_dist.probs();
    let mut sum = 0.0;
    for (q_row, lp_row) in q.axis_iter(Axis(0)).zip(logp.axis_iter(Axis(0))) {
        for (&qv, &lp) in q_row.iter().zip(lp_row.iter()) {
            sum += qv * (qv.ln() - lp);
        }
    }
    let value = sum / n as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("kd loss produced {value}")));
    }

    // dL/d(logits) = (P - Q) / N; logits = (A Bᵀ) / tau.
    let gl = (&probs - q).mapv(|v| v / (n as f64 * tau));
    let ga_unit = gl.dot(&ub);
    let gb_unit = gl.t().dot(&ua);
    let ga = unnormalize_grad(&ga_unit, &ua, &na);
    let gb = unnormalize_grad(&gb_unit.to_owned(), &ub, &nb);
    Ok((LossValue::single("kd", value), ga, gb))
}

/// Negative cosine similarity between matched rows, averaged over the batch.
/// `z` is a constant (stop-gradient) target.
pub fn simsiam_loss(p: &EmbeddingBatch, z: &EmbeddingBatch) -> Result<LossValue> {
    simsiam_inner(p, z, false).map(|(loss, _)| loss)
}

/// [`simsiam_loss`] plus the analytic gradient with respect to `p`. The
/// stop-gradient on `z` means its gradient is identically zero and is not
/// materialized.
pub fn simsiam_loss_with_grad(
    p: &EmbeddingBatch,
    z: &EmbeddingBatch,
) -> Result<(LossValue, Array2<f64>)> {
    simsiam_inner(p, z, true).map(|(loss, g)| (loss, g.unwrap()))
}

fn simsiam_inner(
    p: &EmbeddingBatch,
    z: &EmbeddingBatch,
    want_grad: bool,
) -> Result<(LossValue, Option<Array2<f64>>)> {
    check_same_shape(p, z)?;
    let n = p.batch_size();
    let (up, np) = normalized(&p.values)?;
    let (uz, _) = normalized(&z.values)?;
    let mut value = 0.0;
    for (pr, zr) in up.axis_iter(Axis(0)).zip(uz.axis_iter(Axis(0))) {
        value -= pr.dot(&zr);
    }
    value /= n as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(format!("simsiam produced {value}")));
    }
    let loss = LossValue::single("ss", value);
    if !want_grad {
        return Ok((loss, None));
    }
    let gunit = uz.mapv(|v| -v / n as f64);
    let grad = unnormalize_grad(&gunit, &up, &np);
    Ok((loss, Some(grad)))
}

/// `task + lambda * kd`, with the components recorded alongside the total.
pub fn combined_objective(
    task_loss: &LossValue,
    kd: &LossValue,
    lambda: f64,
) -> Result<LossValue> {
    if !task_loss.value.is_finite() || !kd.value.is_finite() || !lambda.is_finite() || lambda < 0.0
    {
        return Err(Error::NonFiniteLoss(format!(
            "combined objective over task={} kd={} lambda={lambda}",
            task_loss.value, kd.value
        )));
    }
    let total = task_loss.value + lambda * kd.value;
    let task_name = task_loss
        .components
        .keys()
        .next()
        .map(String::as_str)
        .unwrap_or("task");
    let mut components = BTreeMap::new();
    components.insert(task_name.to_string(), task_loss.value);
    components.insert("kd".to_string(), kd.value);
    components.insert("total".to_string(), total);
    Ok(LossValue {
        value: total,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch(values: Array2<f64>) -> EmbeddingBatch {
        EmbeddingBatch::new(values, ViewTag::View1, PeerTag::Peer1).unwrap()
    }

    #[test]
    fn normalize_rows_examples() {
        let b = batch(array![[3.0, 4.0]]);
        let out = normalize_rows(&b).unwrap();
        assert_abs_diff_eq!(out.values[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.values[[0, 1]], 0.8, epsilon = 1e-12);

        let b = batch(array![[1.0, 0.0, 0.0]]);
        let out = normalize_rows(&b).unwrap();
        assert_eq!(out.values, array![[1.0, 0.0, 0.0]]);

        let b = batch(array![[1.0, 1.0]]);
        let out = normalize_rows(&b).unwrap();
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert_abs_diff_eq!(out.values[[0, 0]], inv_sqrt2, epsilon = 1e-9);
        assert_abs_diff_eq!(out.values[[0, 1]], inv_sqrt2, epsilon = 1e-9);
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let b = batch(array![[1.0, 1.0], [0.0, 1e-13]]);
        match normalize_rows(&b) {
            Err(Error::ZeroNormRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected ZeroNormRow, got {other:?}"),
        }
    }

    #[test]
    fn cosine_similarity_examples() {
        let a = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        let s = cosine_similarity_matrix(&a, &a).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[[0, 1]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[[1, 1]], 1.0, epsilon = 1e-12);

        let a = batch(array![[1.0, 0.0]]);
        let b = batch(array![[-1.0, 0.0]]);
        let s = cosine_similarity_matrix(&a, &b).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], -1.0, epsilon = 1e-12);

        let a = batch(array![[1.0, 0.0]]);
        let b = batch(array![[1.0, 1.0]]);
        let s = cosine_similarity_matrix(&a, &b).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], 1.0 / 2.0f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn cosine_similarity_shape_mismatch() {
        let a = batch(array![[1.0, 0.0]]);
        let b = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            cosine_similarity_matrix(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nt_xent_single_pair_is_zero() {
        let z1 = batch(array![[0.3, -0.7]]);
        let z2 = batch(array![[0.3, -0.7]]);
        let loss = nt_xent_loss(&z1, &z2, 0.5).unwrap();
        assert_abs_diff_eq!(loss.value, 0.0, epsilon = 1e-12);
        let (_, g1, g2) = nt_xent_loss_with_grad(&z1, &z2, 0.5).unwrap();
        assert!(g1.iter().chain(g2.iter()).all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn nt_xent_orthogonal_closed_form() {
        // z1 = z2 = orthonormal rows: positive similarity 1, all 2(N-1)
        // negatives at 0, so per-anchor loss = log(1 + 2(N-1) e^{-1/tau}).
        let z = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        let loss = nt_xent_loss(&z, &z, 0.5).unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert_abs_diff_eq!(loss.value, expect, epsilon = 1e-9);
        assert_abs_diff_eq!(loss.value, 0.2395, epsilon = 5e-4);
    }

    #[test]
    fn nt_xent_rejects_bad_temperature() {
        let z = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            nt_xent_loss(&z, &z, 0.0),
            Err(Error::TemperatureNonPositive(_))
        ));
        assert!(matches!(
            nt_xent_loss(&z, &z, -1.0),
            Err(Error::TemperatureNonPositive(_))
        ));
    }

    #[test]
    fn nt_xent_scale_invariant() {
        let z1 = batch(array![[0.2, 0.8, -0.4], [1.0, -0.3, 0.5], [-0.6, 0.1, 0.9]]);
        let z2 = batch(array![[0.7, -0.2, 0.3], [-0.5, 0.4, 0.8], [0.3, 0.9, -0.1]]);
        let base = nt_xent_loss(&z1, &z2, 0.5).unwrap().value;
        for c in [0.1, 10.0] {
            let mut scaled = z1.values.clone();
            scaled.row_mut(1).mapv_inplace(|v| v * c);
            let zs = batch(scaled);
            let v = nt_xent_loss(&zs, &z2, 0.5).unwrap().value;
            assert_abs_diff_eq!(v, base, epsilon = 1e-6);
        }
    }

    #[test]
    fn nt_xent_permutation_invariant() {
        let z1 = batch(array![[0.2, 0.8], [1.0, -0.3], [-0.6, 0.1], [0.5, 0.5]]);
        let z2 = batch(array![[0.7, -0.2], [-0.5, 0.4], [0.3, 0.9], [-0.2, -0.8]]);
        let base = nt_xent_loss(&z1, &z2, 0.5).unwrap().value;
        let perm = [2usize, 0, 3, 1];
        let p1 = batch(ndarray::stack(
            Axis(0),
            &perm.iter().map(|&i| z1.values.row(i)).collect::<Vec<_>>(),
        )
        .unwrap());
        let p2 = batch(ndarray::stack(
            Axis(0),
            &perm.iter().map(|&i| z2.values.row(i)).collect::<Vec<_>>(),
        )
        .unwrap());
        let v = nt_xent_loss(&p1, &p2, 0.5).unwrap().value;
        assert_abs_diff_eq!(v, base, epsilon = 1e-9);
    }

    #[test]
    fn similarity_distribution_rows_sum_to_one() {
        let z = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        for tau in [1e-3, 0.1, 1.0, 1e6] {
            let d = similarity_distribution(&z, &z, tau).unwrap();
            for row in d.probs().axis_iter(Axis(0)) {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn similarity_distribution_temperature_limits() {
        let z = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        // Huge temperature washes out the scores.
        let d = similarity_distribution(&z, &z, 1e6).unwrap();
        for &p in d.probs() {
            assert_abs_diff_eq!(p, 0.5, epsilon = 1e-5);
        }
        // Small temperature sharpens the diagonal: e^10 / (e^10 + 1).
        let d = similarity_distribution(&z, &z, 0.1).unwrap();
        let expect = (10.0f64).exp() / ((10.0f64).exp() + 1.0);
        assert_abs_diff_eq!(d.probs()[[0, 0]], expect, epsilon = 1e-9);
        assert_abs_diff_eq!(d.probs()[[0, 0]], 0.9999546, epsilon = 1e-7);
    }

    #[test]
    fn kd_loss_identical_is_zero() {
        let z = batch(array![[0.4, -0.6], [0.9, 0.2]]);
        let d = similarity_distribution(&z, &z, 0.5).unwrap();
        let v = kd_loss(&d, &d).unwrap();
        assert!(v.value.abs() < 1e-12);
    }

    #[test]
    fn kd_loss_two_term_oracle() {
        let self_d = SimilarityDistribution::new(array![[0.9, 0.1], [0.1, 0.9]], 0.1).unwrap();
        let peer_d = SimilarityDistribution::new(array![[0.5, 0.5], [0.5, 0.5]], 0.1).unwrap();
        let v = kd_loss(&self_d, &peer_d).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(v.value, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(v.value, 0.51083, epsilon = 1e-4);
    }

    #[test]
    fn kd_loss_rejects_invalid_rows() {
        assert!(matches!(
            SimilarityDistribution::new(array![[0.9, 0.2], [0.5, 0.5]], 0.1),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(matches!(
            SimilarityDistribution::new(array![[1.0, 0.0], [0.5, 0.5]], 0.1),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn kd_loss_nonnegative_property() {
        let mut rng = crate::rng::derive_rng(11, crate::rng::Domain::Probe, &[0]);
        use rand::Rng;
        for _ in 0..50 {
            let n = rng.random_range(2..6);
            let m = rng.random_range(2..8);
            let za = batch(Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0)));
            let zb = batch(Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0)));
            let zc = batch(Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0)));
            let zd = batch(Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0)));
            let p = similarity_distribution(&za, &zb, 0.1).unwrap();
            let q = similarity_distribution(&zc, &zd, 0.1).unwrap();
            assert!(kd_loss(&p, &q).unwrap().value >= -1e-9);
            assert!(kd_loss(&p, &p).unwrap().value < 1e-9);
        }
    }

    #[test]
    fn simsiam_trivial_geometries() {
        let p = batch(array![[0.5, 0.5], [1.0, -1.0]]);
        let same = simsiam_loss(&p, &p).unwrap();
        assert_abs_diff_eq!(same.value, -1.0, epsilon = 1e-9);

        let a = batch(array![[1.0, 0.0], [0.0, 2.0]]);
        let b = batch(array![[0.0, 3.0], [-1.0, 0.0]]);
        let ortho = simsiam_loss(&a, &b).unwrap();
        assert_abs_diff_eq!(ortho.value, 0.0, epsilon = 1e-9);

        let neg = batch(a.values.mapv(|v| -v));
        let anti = simsiam_loss(&a, &neg).unwrap();
        assert_abs_diff_eq!(anti.value, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn combined_objective_arithmetic() {
        let task = LossValue::single("cl", 0.5);
        let kd = LossValue::single("kd", 0.01);
        let c = combined_objective(&task, &kd, 100.0).unwrap();
        assert_abs_diff_eq!(c.value, 1.5, epsilon = 1e-12);
        assert_eq!(c.components["total"], c.value);
        assert_eq!(c.components["cl"], 0.5);
        assert_eq!(c.components["kd"], 0.01);

        let zero = combined_objective(&task, &kd, 0.0).unwrap();
        assert_eq!(zero.value, task.value);
    }

    #[test]
    fn combined_objective_rejects_non_finite() {
        let task = LossValue::single("cl", f64::NAN);
        let kd = LossValue::single("kd", 0.01);
        assert!(matches!(
            combined_objective(&task, &kd, 1.0),
            Err(Error::NonFiniteLoss(_))
        ));
    }
}
