//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built on: matmul, relayout, pairwise contraction and seeded
//! sampling.
//!
//! Every GEMM issued through [`matmul`] (and the quantized GEMM in
//! [`crate::smx`]) is recorded in a thread-local counter, see [`gemm_stats`].

use std::cell::Cell;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{param_err, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimensions collapsed into rows, last dimension as columns.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [lead @ .., last] => (lead.iter().product(), *last),
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix_dims().0
    }

    pub fn cols(&self) -> usize {
        self.matrix_dims().1
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} += {:?}", self.shape, other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return shape_err(format!("sub {:?} - {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&DenseTensor]) -> Result<DenseTensor> {
        let cols = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return shape_err(format!("vstack column mismatch {} vs {cols}", p.cols()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        DenseTensor::matrix(rows, cols, data)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GemmStats {
    pub calls: u64,
    pub macs: u64,
}

thread_local! {
    static GEMM_STATS: Cell<GemmStats> = const { Cell::new(GemmStats { calls: 0, macs: 0 }) };
}

pub(crate) fn record_gemm(m: usize, k: usize, n: usize) {
    GEMM_STATS.with(|s| {
        let mut v = s.get();
        v.calls += 1;
        v.macs += (m * k * n) as u64;
        s.set(v);
    });
}

/// GEMM calls and multiply-accumulates issued on this thread since the last
/// [`reset_gemm_stats`].
pub fn gemm_stats() -> GemmStats {
    GEMM_STATS.with(|s| s.get())
}

pub fn reset_gemm_stats() {
    GEMM_STATS.with(|s| s.set(GemmStats::default()));
}

/// Logical `(rows, cols)` of a matrix operand after optional transposition.
pub(crate) fn op_dims(t: &DenseTensor, transpose: bool) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return shape_err(format!("matmul operand must be 2-D, got {:?}", t.shape()));
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    Ok(if transpose { (c, r) } else { (r, c) })
}

/// `op(a) · op(b)` where `op` optionally transposes. Transposition is handled
/// through strides, so no copy is made.
pub fn matmul(a: &DenseTensor, b: &DenseTensor, ta: bool, tb: bool) -> Result<DenseTensor> {
    let (m, k) = op_dims(a, ta)?;
    let (k2, n) = op_dims(b, tb)?;
    if k != k2 {
        return shape_err(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        ));
    }
    record_gemm(m, k, n);
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        let (ars, acs) = if ta { (1, a.shape[1]) } else { (a.shape[1], 1) };
        let (brs, bcs) = if tb { (1, b.shape[1]) } else { (b.shape[1], 1) };
        // SAFETY: strides and extents describe the exact backing slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                ars as isize,
                acs as isize,
                b.data.as_ptr(),
                brs as isize,
                bcs as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    DenseTensor::matrix(m, n, out)
}

pub fn reshape(x: &DenseTensor, new_shape: &[usize]) -> Result<DenseTensor> {
    DenseTensor::new(new_shape.to_vec(), x.data.clone())
}

impl DenseTensor {
    pub fn reshaped(self, new_shape: &[usize]) -> Result<DenseTensor> {
        DenseTensor::new(new_shape.to_vec(), self.data)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
pub fn transpose(x: &DenseTensor, perm: &[usize]) -> Result<DenseTensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return shape_err(format!("{perm:?} is not a permutation of {nd} axes"));
    }
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(x.data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    DenseTensor::new(out_shape, out)
}

/// 2-D transpose shorthand.
pub fn transpose2(x: &DenseTensor) -> Result<DenseTensor> {
    transpose(x, &[1, 0])
}

/// Pairwise contraction over `axes_a[i] <-> axes_b[i]`. The result carries the
/// free axes of `a` (in order) followed by the free axes of `b`.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor> {
    contract_with(a, b, axes_a, axes_b, |x, y| matmul(x, y, false, false))
}

/// [`contract`] with a caller-supplied GEMM for the flattened operands.
pub fn contract_with(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
    gemm: impl FnOnce(&DenseTensor, &DenseTensor) -> Result<DenseTensor>,
) -> Result<DenseTensor> {
    if axes_a.len() != axes_b.len() {
        return shape_err("contract needs the same number of axes on both sides");
    }
    for (&i, &j) in axes_a.iter().zip(axes_b) {
        if i >= a.ndim() || j >= b.ndim() || a.shape[i] != b.shape[j] {
            return shape_err(format!(
                "cannot pair axis {i} of {:?} with axis {j} of {:?}",
                a.shape, b.shape
            ));
        }
    }
    let free_a: Vec<usize> = (0..a.ndim()).filter(|i| !axes_a.contains(i)).collect();
    let free_b: Vec<usize> = (0..b.ndim()).filter(|i| !axes_b.contains(i)).collect();
    if free_a.len() + axes_a.len() != a.ndim() || free_b.len() + axes_b.len() != b.ndim() {
        return shape_err("repeated contraction axis");
    }
    let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let fa: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let fb: usize = free_b.iter().map(|&i| b.shape[i]).product();
    let p: usize = axes_a.iter().map(|&i| a.shape[i]).product();

    let am = maybe_permute(a, &perm_a)?.reshaped(&[fa, p])?;
    let bm = maybe_permute(b, &perm_b)?.reshaped(&[p, fb])?;
    let out = gemm(&am, &bm)?;
    let out_shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    out.reshaped(&out_shape)
}

fn maybe_permute(x: &DenseTensor, perm: &[usize]) -> Result<DenseTensor> {
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        Ok(x.clone())
    } else {
        transpose(x, perm)
    }
}

/// Seeded, platform-independent random stream (ChaCha8 with an explicit
/// stream id).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent stream under the same seed.
    pub fn substream(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }
}

pub fn sample_gaussian(shape: &[usize], sigma: f64, rng: &mut RngStream) -> Result<DenseTensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return param_err(format!("gaussian sigma must be positive and finite, got {sigma}"));
    }
    Ok(DenseTensor::from_fn(shape, |_| sigma * rng.standard_normal()))
}

pub fn sample_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Result<DenseTensor> {
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return param_err(format!("uniform bounds must satisfy lo < hi, got [{lo}, {hi})"));
    }
    Ok(DenseTensor::from_fn(shape, |_| rng.uniform(lo, hi)))
}

const DENSE_MAGIC: &[u8; 4] = b"QPDT";
const DENSE_VERSION: u16 = 1;

/// Dense dump: magic, version, rank, dims (u64 LE), then `f64` LE values.
pub fn write_dense(w: &mut impl Write, t: &DenseTensor) -> Result<()> {
    w.write_all(DENSE_MAGIC)?;
    w.write_all(&DENSE_VERSION.to_le_bytes())?;
    w.write_all(&[t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dense(r: &mut impl Read) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DENSE_MAGIC {
        return Err(Error::Format("not a dense tensor dump".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != DENSE_VERSION {
        return Err(Error::Format(format!("unsupported dense dump version {version}")));
    }
    let mut nd = [0u8; 1];
    r.read_exact(&mut nd)?;
    let mut shape = Vec::with_capacity(nd[0] as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..nd[0] {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    DenseTensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = RngStream::new(seed, 0);
        sample_uniform(shape, -1.0, 1.0, &mut rng).unwrap()
    }

    fn naive_matmul(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        DenseTensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum()
        })
    }

    #[test]
    fn matmul_hand_case() {
        let a = DenseTensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseTensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b, false, false).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = random(&[7, 5], 1);
        let c = matmul(&a, &DenseTensor::identity(5), false, false).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn matmul_transpose_identity() {
        let a = random(&[7, 5], 2);
        let b = random(&[5, 3], 3);
        let ab_t = transpose2(&matmul(&a, &b, false, false).unwrap()).unwrap();
        let bt_at = matmul(&b, &a, true, true).unwrap();
        for (x, y) in ab_t.data().iter().zip(bt_at.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_strided_transposes_match_materialized() {
        let a = random(&[6, 4], 4);
        let b = random(&[3, 6], 5);
        let got = matmul(&a, &b, true, true).unwrap();
        let want = naive_matmul(&transpose2(&a).unwrap(), &transpose2(&b).unwrap());
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = random(&[2, 3], 1);
        assert!(matches!(matmul(&a, &a, false, false), Err(Error::Shape(_))));
    }

    #[test]
    fn reshape_round_trip_and_bad_count() {
        let x = random(&[2, 3, 4], 9);
        let y = reshape(&reshape(&x, &[6, 4]).unwrap(), &[2, 3, 4]).unwrap();
        assert_eq!(x, y);
        assert!(reshape(&x, &[5, 5]).is_err());
    }

    #[test]
    fn transpose_inverse_is_identity() {
        let x = random(&[2, 3, 4, 5], 10);
        let perm = [2, 0, 3, 1];
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = transpose(&transpose(&x, &perm).unwrap(), &inv).unwrap();
        assert_eq!(x, y);
        assert!(transpose(&x, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn contract_matches_loop_oracle() {
        // (2,3,4) x (4,3,5) pairing the 4-axes -> (2,3,3,5)
        let a = random(&[2, 3, 4], 11);
        let b = random(&[4, 3, 5], 12);
        let c = contract(&a, &b, &[2], &[0]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 5]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..5 {
                        let want: f64 = (0..4)
                            .map(|t| a.data()[i * 12 + j * 4 + t] * b.data()[t * 15 + k * 5 + l])
                            .sum();
                        let got = c.data()[((i * 3 + j) * 3 + k) * 5 + l];
                        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn contract_rejects_bad_axes() {
        let a = random(&[2, 3], 1);
        let b = random(&[4, 2], 1);
        assert!(contract(&a, &b, &[1], &[0]).is_err());
        assert!(contract(&a, &b, &[0, 0], &[1, 1]).is_err());
    }

    #[test]
    fn gaussian_mean_within_clt_bound() {
        let mut rng = RngStream::new(42, 7);
        let n = 1_000_000;
        let sigma = 0.01;
        let x = sample_gaussian(&[n], sigma, &mut rng).unwrap();
        let mean = x.data().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn samplers_are_deterministic_and_validate() {
        let a = sample_gaussian(&[64], 1.0, &mut RngStream::new(3, 4)).unwrap();
        let b = sample_gaussian(&[64], 1.0, &mut RngStream::new(3, 4)).unwrap();
        let c = sample_gaussian(&[64], 1.0, &mut RngStream::new(3, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut rng = RngStream::new(0, 0);
        assert!(sample_gaussian(&[2], 0.0, &mut rng).is_err());
        assert!(sample_uniform(&[2], 1.0, 1.0, &mut rng).is_err());
        let u = sample_uniform(&[1000], -2.0, 3.0, &mut rng).unwrap();
        assert!(u.data().iter().all(|&v| (-2.0..3.0).contains(&v)));
    }

    #[test]
    fn gemm_counter_tracks_macs() {
        reset_gemm_stats();
        let a = random(&[3, 4], 1);
        let b = random(&[4, 5], 2);
        matmul(&a, &b, false, false).unwrap();
        matmul(&b, &a, true, true).unwrap();
        assert_eq!(gemm_stats(), GemmStats { calls: 2, macs: 120 });
    }

    #[test]
    fn dense_dump_round_trip() {
        let x = random(&[3, 1, 4], 5);
        let mut buf = Vec::new();
        write_dense(&mut buf, &x).unwrap();
        let y = read_dense(&mut buf.as_slice()).unwrap();
        assert_eq!(x, y);
        buf[0] = b'X';
        assert!(read_dense(&mut buf.as_slice()).is_err());
    }
}
