//! Dense arrays, deterministic sampling and the RMS statistic.
//!
//! Every reduction in this module sums sequentially along the contraction
//! axis, in index order. Two rows (or columns) holding bitwise-equal inputs
//! therefore produce bitwise-equal outputs, which the symmetry tests rely on.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with an explicit
//! 64-bit seed. Gaussian draws use the ziggurat sampler of `rand_distr`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision of a [`NumArray`].
///
/// Values are always held as `f64`; a `Single` array has every element
/// rounded to the nearest `f32` and is stored as 4-byte floats on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Double => 8,
            Precision::Single => 4,
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl NumArray {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            precision: Precision::Double,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            precision: Precision::Double,
        })
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(&[r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Returns a copy with the given precision, rounding through `f32` when
    /// narrowing.
    pub fn to_precision(&self, precision: Precision) -> Self {
        let mut out = self.clone();
        out.precision = precision;
        if precision == Precision::Single {
            for x in &mut out.data {
                *x = *x as f32 as f64;
            }
        }
        out
    }

    /// `(rows, cols)` of a 2-D array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x = f(*x));
        out
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn max_abs_diff(&self, other: &NumArray) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
            precision: self.precision,
        })
    }

    pub fn matmul(&self, other: &NumArray) -> Result<Self> {
        matmul(self, other)
    }

    /// Contiguous slice `[start, end)` along `axis` of a 2-D array.
    pub fn slice2(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > extent {
            return Err(Error::shape(format!(
                "bad slice {start}..{end} on axis {axis} of {:?}",
                self.shape
            )));
        }
        let out = if axis == 0 {
            self.data[start * c..end * c].to_vec()
        } else {
            (0..r)
                .flat_map(|i| self.data[i * c + start..i * c + end].iter().copied())
                .collect()
        };
        let shape = if axis == 0 {
            vec![end - start, c]
        } else {
            vec![r, end - start]
        };
        Self::from_vec(&shape, out)
    }

    /// Concatenates along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn concat(&self, other: &NumArray, axis: usize) -> Result<Self> {
        match (self.shape.as_slice(), other.shape.as_slice(), axis) {
            ([_], [_], 0) => {
                let mut data = self.data.clone();
                data.extend_from_slice(&other.data);
                Self::from_vec(&[data.len()], data)
            }
            ([r1, c1], [r2, c2], 0) if c1 == c2 => {
                let mut data = self.data.clone();
                data.extend_from_slice(&other.data);
                Self::from_vec(&[r1 + r2, *c1], data)
            }
            ([r1, c1], [r2, c2], 1) if r1 == r2 => {
                let mut data = Vec::with_capacity(r1 * (c1 + c2));
                for i in 0..*r1 {
                    data.extend_from_slice(&self.data[i * c1..(i + 1) * c1]);
                    data.extend_from_slice(&other.data[i * c2..(i + 1) * c2]);
                }
                Self::from_vec(&[*r1, c1 + c2], data)
            }
            _ => Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?} on axis {axis}",
                self.shape, other.shape
            ))),
        }
    }

    /// Mean and population standard deviation of all elements.
    pub fn mean_std(&self) -> (f64, f64) {
        if self.data.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Matrix product `a (m×k) · b (k×n)`.
///
/// Each output element is `sum_p a[i,p]·b[p,j]` accumulated for
/// `p = 0, 1, …, k-1` in that order.
pub fn matmul(a: &NumArray, b: &NumArray) -> Result<NumArray> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(&a.data, &b.data, &mut out, m, k, n);
    NumArray::from_vec(&[m, n], out)
}

/// Root-mean-square along `axis`; the axis is removed from the result.
pub fn rms(v: &NumArray, axis: usize) -> Result<NumArray> {
    if axis >= v.ndim() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {:?}",
            v.shape
        )));
    }
    let extent = v.shape[axis];
    if extent == 0 {
        return Err(Error::shape("rms over an empty axis"));
    }
    let outer: usize = v.shape[..axis].iter().product();
    let inner: usize = v.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0;
            for a in 0..extent {
                let x = v.data[(o * extent + a) * inner + i];
                acc += x * x;
            }
            out[o * inner + i] = (acc / extent as f64).sqrt();
        }
    }
    let mut shape = v.shape.clone();
    shape.remove(axis);
    NumArray::from_vec(&shape, out)
}

/// RMS of a flat slice.
pub fn rms_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Seeded ChaCha8 generator.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator derived from `seed` and a label, so streams do
    /// not depend on the order in which callers request them.
    pub fn derived(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

/// FNV-1a over the label, mixed with the seed through SplitMix64.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// I.i.d. normal samples in row-major order.
pub fn sample_gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<NumArray> {
    if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian needs finite mean and std >= 0, got mean={mean}, std={std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| mean + std * rng.standard_normal())
        .collect();
    NumArray::from_vec(shape, data)
}

/// Slice kernels shared by the model and optimizers.
pub(crate) mod kernels {
    /// `c (m×n) += a (m×k) · b (k×n)`, summing over `p` in increasing order.
    pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        gemm_strided(a, k, b, n, c, n, m, k, n);
    }

    /// [`gemm`] on sub-matrices addressed by row strides `lda`, `ldb`, `ldc`.
    ///
    /// Every output element is accumulated as `c + a₀b₀ + a₁b₁ + …` in
    /// exactly that order whichever tile it falls in, so results do not
    /// depend on the blocking. Products and sums are separate roundings
    /// (no fused multiply-add), so the AVX2 path is bitwise equal to the
    /// portable one.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_strided(
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        gemm_general(a, lda, 1, b, ldb, c, ldc, m, k, n);
    }

    /// Like [`gemm_strided`] with `a` read transposed: element `(i, p)` of
    /// the left operand is `a[p·lda + i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_strided_tn(
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        gemm_general(a, 1, lda, b, ldb, c, ldc, m, k, n);
    }

    /// Left operand element `(i, p)` is `a[i·rs + p·cs]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_general(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(a, rs, cs, b, ldb, c, ldc, m, k, n) };
            return;
        }
        gemm_portable(a, rs, cs, b, ldb, c, ldc, m, k, n);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_avx2(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        gemm_portable(a, rs, cs, b, ldb, c, ldc, m, k, n);
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn gemm_portable(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        m: usize,
        k: usize,
        n: usize,
    ) {
        const MR: usize = 4;
        const NR: usize = 8;
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i + r) * ldc + j..(i + r) * ldc + j + NR]);
                }
                for p in 0..k {
                    let bv: &[f64; NR] = b[p * ldb + j..p * ldb + j + NR].try_into().unwrap();
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * rs + p * cs];
                        for (x, y) in row.iter_mut().zip(bv) {
                            *x += av * y;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * ldc + j..(i + r) * ldc + j + NR].copy_from_slice(row);
                }
                j += NR;
            }
            if j < n {
                gemm_rows(a, rs, cs, b, ldb, c, ldc, i..i + MR, k, j..n);
            }
            i += MR;
        }
        gemm_rows(a, rs, cs, b, ldb, c, ldc, i..m, k, 0..n);
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn gemm_rows(
        a: &[f64],
        rs: usize,
        cs: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
        rows: std::ops::Range<usize>,
        k: usize,
        cols: std::ops::Range<usize>,
    ) {
        for i in rows {
            let crow = &mut c[i * ldc + cols.start..i * ldc + cols.end];
            for p in 0..k {
                let av = a[i * rs + p * cs];
                let brow = &b[p * ldb + cols.start..p * ldb + cols.end];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
    pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
        gemm_strided_tn(a, m, b, n, c, n, m, k, n);
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &NumArray, b: &NumArray) -> NumArray {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = NumArray::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_vector() {
        let v = NumArray::from_vec(&[3, 1], vec![1.5, -2.0, 7.0]).unwrap();
        let out = NumArray::identity(3).matmul(&v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn unit_column_selection() {
        let a = NumArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let e = NumArray::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(a.matmul(&e).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = sample_gaussian(&mut rng, &[8, 8], 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut rng, &[8, 8], 0.0, 1.0).unwrap();
        let diff = a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)).unwrap();
        assert!(diff <= 1e-14, "{diff}");
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = NumArray::zeros(&[2, 3]);
        let b = NumArray::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicated_rows_give_bitwise_duplicated_outputs() {
        let mut rng = Rng::new(5);
        let a = sample_gaussian(&mut rng, &[3, 7], 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut rng, &[7, 4], 0.0, 1.0).unwrap();
        let out = a.concat(&a, 0).unwrap().matmul(&b).unwrap();
        assert_eq!(out.slice2(0, 0, 3).unwrap(), out.slice2(0, 3, 6).unwrap());
    }

    #[test]
    fn gaussian_degenerate_and_deterministic() {
        let mut rng = Rng::new(1);
        let g = sample_gaussian(&mut rng, &[5], 2.5, 0.0).unwrap();
        assert!(g.data().iter().all(|&x| x == 2.5));
        let a = sample_gaussian(&mut Rng::new(7), &[4], 0.0, 1.0).unwrap();
        let b = sample_gaussian(&mut Rng::new(7), &[4], 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian(&mut rng, &[2], 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_sample_std() {
        let g = sample_gaussian(&mut Rng::new(3), &[100_000], 0.0, 1.0).unwrap();
        let (_, std) = g.mean_std();
        assert!((0.99..=1.01).contains(&std), "{std}");
    }

    #[test]
    fn rms_examples() {
        let v = NumArray::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(rms(&v, 0).unwrap().data()[0], (12.5f64).sqrt());
        let c = NumArray::filled(&[6], -1.25);
        assert_eq!(rms(&c, 0).unwrap().data()[0], 1.25);
        let e = NumArray::from_vec(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(rms(&e, 0).unwrap().data()[0], 0.5);
        assert!(rms(&NumArray::zeros(&[0]), 0).is_err());
        assert!(rms(&v, 1).is_err());
    }

    #[test]
    fn rms_along_rows_and_columns() {
        let m = NumArray::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(rms(&m, 1).unwrap().shape(), &[2]);
        assert_eq!(rms(&m, 0).unwrap().data(), &[(4.5f64).sqrt(), 8.0_f64.sqrt()]);
    }

    #[test]
    fn single_precision_rounds() {
        let v = NumArray::from_vec(&[1], vec![0.1]).unwrap();
        let s = v.to_precision(Precision::Single);
        assert_eq!(s.data()[0], 0.1f32 as f64);
        assert_eq!(s.precision(), Precision::Single);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use super::Rng;

        proptest! {
            #[test]
            fn rms_is_homogeneous(v in prop::collection::vec(-100.0f64..100.0, 1..40), alpha in -10.0f64..10.0) {
                let a = NumArray::from_vec(&[v.len()], v.clone()).unwrap();
                let lhs = rms(&a.scale(alpha), 0).unwrap().data()[0];
                let rhs = alpha.abs() * rms(&a, 0).unwrap().data()[0];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
            }

            #[test]
            fn rms_duplication_invariant(v in prop::collection::vec(-100.0f64..100.0, 1..40)) {
                let a = NumArray::from_vec(&[v.len()], v).unwrap();
                let d = a.concat(&a, 0).unwrap();
                let r1 = rms(&a, 0).unwrap().data()[0];
                let r2 = rms(&d, 0).unwrap().data()[0];
                prop_assert!((r1 - r2).abs() <= 1e-14 * (1.0 + r1));
            }

            #[test]
            fn sampling_is_reproducible(seed in any::<u64>()) {
                let a = sample_gaussian(&mut Rng::new(seed), &[16], 0.0, 1.0).unwrap();
                let b = sample_gaussian(&mut Rng::new(seed), &[16], 0.0, 1.0).unwrap();
                prop_assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                                b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
