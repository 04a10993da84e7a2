//! Dense row-major containers, the seeded generator and the scalar
//! primitives everything else is built from.
//!
//! All arithmetic is `f64`. The hot kernels (`mul_transpose`,
//! `transpose_mul`, `matmul_into`) are plain loops ordered for
//! row-major access; no BLAS.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized form of any parameter tensor: shape metadata plus a flat
/// row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRecord", into = "TensorRecord")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Checked constructor: length must equal `rows * cols` and every value
    /// must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Column sums (sum over the batch dimension).
    pub fn column_sums(&self) -> Vector {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Vector(out)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`, checked.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl TryFrom<TensorRecord> for Matrix {
    type Error = Error;

    fn try_from(rec: TensorRecord) -> Result<Self> {
        match rec.shape.as_slice() {
            &[rows, cols] => Matrix::from_vec(rows, cols, rec.data),
            other => Err(Error::Checkpoint(format!("expected a 2-d tensor, got shape {other:?}"))),
        }
    }
}

impl From<Matrix> for TensorRecord {
    fn from(m: Matrix) -> Self {
        TensorRecord {
            shape: vec![m.rows, m.cols],
            data: m.data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "TensorRecord", into = "TensorRecord")]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Vector(vec![value; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl TryFrom<TensorRecord> for Vector {
    type Error = Error;

    fn try_from(rec: TensorRecord) -> Result<Self> {
        match rec.shape.as_slice() {
            &[n] if n == rec.data.len() => {
                check_finite(&rec.data, "vector")?;
                Ok(Vector(rec.data))
            }
            other => Err(Error::Checkpoint(format!(
                "expected a 1-d tensor of {} values, got shape {other:?}",
                rec.data.len()
            ))),
        }
    }
}

impl From<Vector> for TensorRecord {
    fn from(v: Vector) -> Self {
        TensorRecord {
            shape: vec![v.0.len()],
            data: v.0,
        }
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numerical(format!(
            "{what} holds non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Standard matrix product. Errors on inner-dimension mismatch or if the
/// product overflows to a non-finite value.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Config(format!(
            "matmul dimension mismatch: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out);
    check_finite(&out.data, "matmul result")?;
    Ok(out)
}

/// `out = a * b` without checks.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    out.data.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
}

/// `a * bᵀ` where `a` is n×k and `b` is m×k.
pub(crate) fn mul_transpose(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    out
}

/// `aᵀ * b` where `a` is n×k and `b` is n×m.
pub(crate) fn transpose_mul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &v) in out_row.iter_mut().zip(br) {
                *o += ari * v;
            }
        }
    }
    out
}

/// Dot product with eight independent partial sums so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the sigmoid; `p` must lie in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn relu(v: &[f64]) -> Vector {
    Vector(v.iter().map(|&x| relu_scalar(x)).collect())
}

pub fn sigmoid(v: &[f64]) -> Vector {
    Vector(v.iter().map(|&x| sigmoid_scalar(x)).collect())
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vector {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Vector(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Elementwise nonlinearity of a perceptron layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => relu_scalar(z),
            Activation::Sigmoid => sigmoid_scalar(z),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and output `h`. ReLU'(0) = 0.
    pub fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Identity => 1.0,
        }
    }
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut work = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Vector(grad))
}

/// Serializable generator state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub s: [u64; 4],
    pub spare_gaussian: Option<u64>,
}

/// xoshiro256** seeded through SplitMix64.
///
/// Seeding: `s[i]` is the i-th output of SplitMix64 started at `seed`
/// (`z += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
/// z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`).
///
/// Step: `out = rotl(s1 * 5, 7) * 9; t = s1 << 17; s2 ^= s0; s3 ^= s1;
/// s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)`.
///
/// Uniforms are `(out >> 11) * 2^-53` in [0, 1). Gaussians use the polar-free
/// Box–Muller form `sqrt(-2 ln(1-u1)) * (cos, sin)(2π u2)`, caching the sine
/// half for the next call.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    s: [u64; 4],
    spare_gaussian: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in s.iter_mut() {
            *slot = splitmix64(&mut sm);
        }
        Rng {
            seed,
            s,
            spare_gaussian: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let out = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        out
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` by rejection; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fisher–Yates, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Glorot-uniform `rows x cols` matrix (fan_out = rows, fan_in = cols).
    pub fn glorot(&mut self, rows: usize, cols: usize) -> Matrix {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.uniform(-bound, bound)).collect();
        Matrix { rows, cols, data }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            s: self.s,
            spare_gaussian: self.spare_gaussian.map(f64::to_bits),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        Rng {
            seed: state.seed,
            s: state.s,
            spare_gaussian: state.spare_gaussian.map(f64::from_bits),
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_5x4_by_4x3() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, 5, 4);
        let b = random(&mut rng, 4, 3);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn transposed_kernels_agree_with_naive() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 6, 4);
        let b = random(&mut rng, 5, 4);
        let c = random(&mut rng, 6, 3);
        let t1 = mul_transpose(&a, &b);
        let t2 = naive(&a, &b.transpose());
        assert!(t1
            .as_slice()
            .iter()
            .zip(t2.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let t3 = transpose_mul(&a, &c);
        let t4 = naive(&a.transpose(), &c);
        assert!(t3
            .as_slice()
            .iter()
            .zip(t4.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn activations() {
        assert_eq!(relu(&[-1.0, 2.0]).0, vec![0.0, 2.0]);
        assert_eq!(sigmoid(&[0.0]).0, vec![0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]).0, vec![0.5, 0.5]);
        assert!((sigmoid_scalar(-800.0)).is_finite());
        assert!((logit(0.5)).abs() < 1e-15);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0], 1e-5).unwrap();
        assert_eq!(g.0, vec![0.0, 0.0]);
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(1).next_u64(), Rng::new(2).next_u64());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = Rng::new(9);
        a.gaussian();
        let mut b = Rng::from_state(&a.state());
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(5);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(1);
        let m = rng.glorot(10, 2);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(m.as_slice().iter().all(|v| v.abs() <= bound));
    }

    proptest! {
        #[test]
        fn matmul_agrees_with_naive(r in 1usize..=16, k in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = random(&mut rng, r, k);
            let b = random(&mut rng, k, c);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive(&a, &b);
            for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
