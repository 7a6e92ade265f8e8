//! Dense row-major matrices, the handful of kernels the model needs, and
//! seeded random streams.
//!
//! Every product here sums in a fixed index order per output row, so the
//! results are bitwise identical no matter how many threads rayon uses.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows per rayon task; below this the work is done inline.
const PAR_MIN_ROWS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "hadamard")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// New matrix made of the listed rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self[idx[o]] += src[o]` for every row `o` of `src`.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Self) {
        debug_assert_eq!(idx.len(), src.rows);
        for (o, &i) in idx.iter().enumerate() {
            for (a, b) in self.row_mut(i).iter_mut().zip(src.row(o)) {
                *a += b;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

/// Four independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results stay deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy_slice(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Runs `f` compiled with AVX2 when the CPU supports it. This only widens
/// vector registers; multiply-adds are never fused, so results are bitwise
/// identical to the baseline path.
#[inline(always)]
pub(crate) fn wide<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn run<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { run(f) };
        }
    }
    f()
}

#[inline(always)]
pub(crate) fn for_each_row(out: &mut DenseMatrix, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    let cols = out.cols.max(1);
    if out.rows >= PAR_MIN_ROWS * 2 && rayon::current_num_threads() > 1 {
        out.data
            .par_chunks_mut(cols)
            .with_min_len(PAR_MIN_ROWS)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
    } else {
        wide(
            #[inline(always)]
            || {
                for (r, row) in out.data.chunks_mut(cols).enumerate() {
                    f(r, row);
                }
            },
        );
    }
}

/// `A · B`
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    for_each_row(
        &mut out,
        #[inline(always)]
        |r, row| {
            for (t, &av) in a.row(r).iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(b.row(t)) {
                    *o += av * bv;
                }
            }
        },
    );
    Ok(out)
}

/// `Aᵀ · B` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    if out.rows >= PAR_MIN_ROWS * 2 && rayon::current_num_threads() > 1 {
        for_each_row(
            &mut out,
            #[inline(always)]
            |r, row| {
                for t in 0..a.rows {
                    let av = a.data[t * a.cols + r];
                    if av != 0.0 {
                        axpy_slice(row, av, b.row(t));
                    }
                }
            },
        );
    } else {
        // Same per-entry summation order as the parallel branch, but one
        // sequential sweep over the rows of both inputs.
        let cols = b.cols;
        wide(
            #[inline(always)]
            || {
                for t in 0..a.rows {
                    let br = b.row(t);
                    for (r, &av) in a.row(t).iter().enumerate() {
                        if av != 0.0 {
                            axpy_slice(&mut out.data[r * cols..(r + 1) * cols], av, br);
                        }
                    }
                }
            },
        );
    }
    Ok(out)
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    if b.rows == 0 {
        return Ok(out);
    }
    for_each_row(
        &mut out,
        #[inline(always)]
        |r, row| {
            let ar = a.row(r);
            for (j, o) in row.iter_mut().enumerate() {
                *o = dot(ar, b.row(j));
            }
        },
    );
    Ok(out)
}

#[inline]
pub fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky`] at `x`; the kink at 0 takes the positive branch.
#[inline]
pub fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Elementwise LeakyReLU. `slope = 1` is the identity.
pub fn leaky_relu(x: &DenseMatrix, slope: f64) -> DenseMatrix {
    debug_assert!((0.0..=1.0).contains(&slope));
    x.map(|v| leaky(v, slope))
}

/// Divides each row by `max(‖row‖₂, eps)`. Zero rows stay zero.
pub fn l2_normalize_rows(x: &DenseMatrix, eps: f64) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let denom = dot(row, row).sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// Backward of [`l2_normalize_rows`] given the forward input and the
/// upstream gradient on the normalized output.
pub fn l2_normalize_rows_backward(
    x: &DenseMatrix,
    grad_out: &DenseMatrix,
    eps: f64,
) -> DenseMatrix {
    let mut g = DenseMatrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let xr = x.row(r);
        let gr = grad_out.row(r);
        let norm = dot(xr, xr).sqrt();
        let out = g.row_mut(r);
        if norm > eps {
            // y = x/‖x‖, dy/dx = (I − y yᵀ)/‖x‖
            let proj = dot(xr, gr) / (norm * norm);
            for ((o, &gv), &xv) in out.iter_mut().zip(gr).zip(xr) {
                *o = (gv - xv * proj) / norm;
            }
        } else {
            for (o, &gv) in out.iter_mut().zip(gr) {
                *o = gv / eps;
            }
        }
    }
    g
}

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Two instances with the same seed and stream label produce the same
/// sequence. The position can be captured and restored for resumable runs.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream_id: String,
    inner: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream_id: String,
    /// ChaCha word position, decimal; u128 does not fit a JSON number.
    pub word_pos: String,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_key(stream_id));
        Self {
            seed,
            stream_id: stream_id.to_owned(),
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Stable 64-bit key for counter-based draws derived from this stream.
    pub fn counter_key(&self) -> u64 {
        mix64(self.seed ^ stream_key(&self.stream_id).rotate_left(17))
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream_id: self.stream_id.clone(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Result<Self> {
        let mut rng = Self::new(snap.seed, &snap.stream_id);
        let pos: u128 = snap
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", snap.word_pos)))?;
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn stream_key(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based uniform draw in `[0, 1)`: a pure function of its inputs,
/// so draws can be made in any order (or in parallel) with the same result.
#[inline]
pub fn counter_uniform(key: u64, counter: u64) -> f64 {
    let bits = mix64(key ^ mix64(counter));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
