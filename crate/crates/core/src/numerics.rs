//! Dense vectors and matrices, probability primitives, k-means and a
//! finite-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    KMeans = 3,
    Data = 4,
    Shift = 5,
}

pub fn rng_for(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite value at index {i}")));
    }
    Ok(())
}

/// A non-empty vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty vector"));
        }
        check_finite(&values, "vector")?;
        Ok(Vector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl std::ops::Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Entries in `[0, 1]` summing to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_probs(&values)?;
        Ok(ProbVector(values))
    }

    pub fn uniform(k: usize) -> Self {
        ProbVector(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.0)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn validate_probs(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(v: ProbVector) -> Self {
        v.0
    }
}

impl std::ops::Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; a 0-column matrix has no row data
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Overwrites `values` with their softmax.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(values: &[f64]) -> Result<ProbVector> {
    if values.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    check_finite(values, "softmax input")?;
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector(out))
}

/// Shannon entropy in nats of a raw probability slice (`0 ln 0 = 0`).
pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

/// Cross entropy of raw slices; `pred` is clamped at [`LOG_EPS`].
pub fn cross_entropy_of(target: &[f64], pred: &[f64]) -> f64 {
    -target
        .iter()
        .zip(pred)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &p)| t * p.max(LOG_EPS).ln())
        .sum::<f64>()
}

pub fn cross_entropy(target: &ProbVector, pred: &ProbVector) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::invalid(format!(
            "cross entropy length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(cross_entropy_of(target, pred))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine similarity length mismatch"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { max_iter: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one assignment step")
    }
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// center (lowest index on ties).
pub fn kmeans(points: &Matrix, m: usize, seed: u64, cfg: KMeansConfig) -> Result<KMeansResult> {
    let n = points.rows();
    if m == 0 {
        return Err(Error::invalid("k-means needs at least one center"));
    }
    if m > n {
        return Err(Error::invalid(format!("k-means with {m} centers over {n} points")));
    }
    if cfg.max_iter == 0 {
        return Err(Error::invalid("k-means max_iter must be at least 1"));
    }
    let mut rng = rng_for(seed, Purpose::KMeans);
    let mut centers = kmeanspp_seed(points, m, &mut rng);
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut trace = vec![assign(points, &centers, &mut assignments, &mut dists)];

    for _ in 0..cfg.max_iter {
        update_centers(points, &mut centers, &assignments, &dists);
        let obj = assign(points, &centers, &mut assignments, &mut dists);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if prev - obj < cfg.tol {
            break;
        }
    }
    Ok(KMeansResult { centers, assignments, objective_trace: trace })
}

fn kmeanspp_seed(points: &Matrix, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let d = points.cols();
    let mut centers = Matrix::zeros(m, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut closest: Vec<f64> = points.iter_rows().map(|p| squared_distance(p, points.row(first))).collect();

    for c in 1..m {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in closest.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            closest[i] = closest[i].min(squared_distance(p, points.row(pick)));
        }
    }
    centers
}

fn assign(points: &Matrix, centers: &Matrix, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter_rows().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter_rows().enumerate() {
            let d = squared_distance(p, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        dists[i] = best_d;
        total += best_d;
    }
    total
}

fn update_centers(points: &Matrix, centers: &mut Matrix, assignments: &[usize], dists: &[f64]) {
    let m = centers.rows();
    let d = centers.cols();
    let mut sums = Matrix::zeros(m, d);
    let mut counts = vec![0usize; m];
    for (i, p) in points.iter_rows().enumerate() {
        let c = assignments[i];
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut taken = vec![false; points.rows()];
    for c in 0..m {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        } else {
            let mut far = None;
            for (i, &dist) in dists.iter().enumerate() {
                if !taken[i] && far.is_none_or(|(_, best)| dist > best) {
                    far = Some((i, dist));
                }
            }
            if let Some((i, _)) = far {
                taken[i] = true;
                centers.row_mut(c).copy_from_slice(points.row(i));
            }
        }
    }
}

/// Maximum relative error between the analytic gradient returned by
/// `loss_fn` and central finite differences with step `h`.
///
/// Relative error per coordinate is `|g_a - g_fd| / max(1, |g_a|, |g_fd|)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameters");
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let (up, _) = loss_fn(&probe);
        probe[i] = params[i] - h;
        let (down, _) = loss_fn(&probe);
        probe[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / 1f64.max(analytic[i].abs()).max(fd.abs());
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        let big = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!(close(big[0], 1.0, 1e-15));
    }

    #[test]
    fn entropy_examples() {
        assert!(close(entropy(&ProbVector::new(vec![0.5, 0.5]).unwrap()), LN_2, 1e-15));
        assert_eq!(entropy(&ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap()), 0.0);
        assert!(close(entropy(&ProbVector::uniform(10)), 10f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_examples() {
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let one = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert!(close(cross_entropy(&half, &half).unwrap(), LN_2, 1e-15));
        assert!(close(cross_entropy(&one, &half).unwrap(), LN_2, 1e-15));
        assert!(cross_entropy(&one, &one).unwrap() <= 1e-11);
        let three = ProbVector::uniform(3);
        assert!(matches!(cross_entropy(&one, &three), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        assert!(close(cosine_similarity(&a, &a).unwrap(), 1.0, 1e-15));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(close(cosine_similarity(&a, &neg).unwrap(), -1.0, 1e-15));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn type_invariants() {
        assert!(Vector::new(vec![]).is_err());
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ProbVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn kmeans_repeated_point() {
        let pts = Matrix::from_rows(&vec![vec![1.5, -2.0]; 7]).unwrap();
        let r = kmeans(&pts, 1, 3, KMeansConfig::default()).unwrap();
        assert_eq!(r.centers.row(0), &[1.5, -2.0]);
        assert_eq!(r.objective(), 0.0);
    }

    /// Enumerates every 2-partition of the four points and keeps the one
    /// with the smallest within-cluster sum of squares.
    fn best_two_partition(pts: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
        let n = pts.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            let mut centers = vec![];
            for side in [true, false] {
                let members: Vec<_> = (0..n).filter(|i| ((mask >> i) & 1 == 1) == side).collect();
                let c = [
                    members.iter().map(|&i| pts[i][0]).sum::<f64>() / members.len() as f64,
                    members.iter().map(|&i| pts[i][1]).sum::<f64>() / members.len() as f64,
                ];
                cost += members.iter().map(|&i| squared_distance(&pts[i], &c)).sum::<f64>();
                centers.push(c);
            }
            if cost < best.0 {
                best = (cost, centers);
            }
        }
        best
    }

    #[test]
    fn kmeans_two_pairs_matches_exhaustive() {
        let raw = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let (best_cost, best_centers) = best_two_partition(&raw);
        assert_eq!(best_cost, 1.0);
        let pts = Matrix::from_rows(&raw).unwrap();
        for seed in 0..10 {
            let r = kmeans(&pts, 2, seed, KMeansConfig::default()).unwrap();
            assert!(close(r.objective(), best_cost, 1e-12));
            let mut got: Vec<Vec<f64>> = r.centers.to_rows();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            let mut want: Vec<Vec<f64>> = best_centers.iter().map(|c| c.to_vec()).collect();
            want.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(got, want);
            assert_eq!(want, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        }
    }

    #[test]
    fn kmeans_distinct_points_zero_objective() {
        let raw = [[0.0, 0.0], [1.0, 2.0], [3.0, -1.0], [0.0, 0.0], [1.0, 2.0]];
        let pts = Matrix::from_rows(&raw).unwrap();
        let r = kmeans(&pts, 3, 11, KMeansConfig::default()).unwrap();
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn kmeans_errors() {
        let pts = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(kmeans(&pts, 3, 0, KMeansConfig::default()).is_err());
        assert!(kmeans(&pts, 1, 0, KMeansConfig { max_iter: 0, tol: 1e-6 }).is_err());
    }

    #[test]
    fn kmeans_empty_cluster_reseeds() {
        let pts = Matrix::from_rows(&[[0.0], [1.0], [5.0], [9.0]]).unwrap();
        let mut centers = Matrix::from_rows(&[[0.0], [100.0]]).unwrap();
        let mut assignments = vec![0; 4];
        let mut dists = vec![0.0; 4];
        assign(&pts, &centers, &mut assignments, &mut dists);
        assert_eq!(assignments, vec![0, 0, 0, 0]);
        update_centers(&pts, &mut centers, &assignments, &dists);
        // center 1 was empty and moves onto the farthest point (9.0)
        assert_eq!(centers.row(1), &[9.0]);
        assert_eq!(centers.row(0), &[3.75]);
    }

    #[test]
    fn grad_check_exact_cases() {
        let quad = |x: &[f64]| (0.5 * dot(x, x), x.to_vec());
        assert!(grad_check(quad, &[0.3, -2.0, 7.5], 1e-5) < 1e-9);
        let c = [1.0, -3.0, 0.25];
        let lin = |x: &[f64]| (dot(&c, x), c.to_vec());
        assert!(grad_check(lin, &[4.0, 1.0, -1.0], 1e-5) < 1e-9);
        let wrong = |x: &[f64]| (dot(x, x), x.to_vec());
        assert!(grad_check(wrong, &[1.0, 2.0], 1e-5) > 0.1);
    }

    fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, len)
    }

    fn prob_vec(k: usize) -> impl Strategy<Value = ProbVector> {
        proptest::collection::vec(-8.0f64..8.0, k).prop_map(|v| softmax(&v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_is_prob_and_entropy_bounded(v in finite_vec(1..40)) {
            let p = softmax(&v).unwrap();
            prop_assert!(validate_probs(&p).is_ok());
            let h = entropy(&p);
            prop_assert!(h >= 0.0 && h <= (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(v in finite_vec(2..20), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn gibbs_inequality((p, q) in (2usize..12).prop_flat_map(|k| (prob_vec(k), prob_vec(k)))) {
            prop_assert!(cross_entropy(&p, &q).unwrap() >= entropy(&p) - 1e-9);
        }

        #[test]
        fn kmeans_monotone_and_deterministic(
            flat in proptest::collection::vec(-5.0f64..5.0, 20..120),
            m in 1usize..6,
            seed in any::<u64>(),
        ) {
            let n = flat.len() / 2;
            let pts = Matrix::new(n, 2, flat[..n * 2].to_vec()).unwrap();
            let cfg = KMeansConfig { max_iter: 50, tol: 0.0 };
            let a = kmeans(&pts, m, seed, cfg).unwrap();
            for w in a.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            let b = kmeans(&pts, m, seed, cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
