//! Dense row-major f64 tensors and the matrix kernels backing the 3-D
//! convolution engine.
//!
//! Everything in the numeric pipeline runs on one canonical element type
//! (f64) so the finite-difference gradient checks and the training path
//! exercise identical code.

use rayon::prelude::*;

/// Dense n-dimensional array, C (row-major) element order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k] = v;
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Minimum number of multiply-adds before `gemm` bothers spawning threads.
const PAR_GEMM_THRESHOLD: usize = 1 << 18;

/// C (m x n) += A (m x k) * B (k x n), all row-major.
///
/// Accumulation order over k is fixed per output element irrespective of the
/// thread count, so results are bit-identical for any rayon pool size.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_GEMM_THRESHOLD && m >= 16 && rayon::current_num_threads() > 1 {
        let rows_per_chunk = m.div_ceil(2 * rayon::current_num_threads()).max(8);
        c.par_chunks_mut(rows_per_chunk * n)
            .enumerate()
            .for_each(|(ci, c_block)| {
                let i0 = ci * rows_per_chunk;
                let rows = c_block.len() / n;
                gemm_serial(rows, k, n, &a[i0 * k..(i0 + rows) * k], b, c_block);
            });
    } else {
        gemm_serial(m, k, n, a, b, c);
    }
}

fn gemm_serial(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const NC: usize = 512;
    const KC: usize = 512;
    for j0 in (0..n).step_by(NC) {
        let nb = NC.min(n - j0);
        for k0 in (0..k).step_by(KC) {
            let k1 = (k0 + KC).min(k);
            let mut i = 0;
            // 8 output rows at a time so each loaded B row feeds 8 FMA streams
            while i + 8 <= m {
                let (r0, rest) = c[i * n..(i + 8) * n].split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, rest) = rest.split_at_mut(n);
                let (r3, rest) = rest.split_at_mut(n);
                let (r4, rest) = rest.split_at_mut(n);
                let (r5, rest) = rest.split_at_mut(n);
                let (r6, r7) = rest.split_at_mut(n);
                for p in k0..k1 {
                    let a0 = a[i * k + p];
                    let a1 = a[(i + 1) * k + p];
                    let a2 = a[(i + 2) * k + p];
                    let a3 = a[(i + 3) * k + p];
                    let a4 = a[(i + 4) * k + p];
                    let a5 = a[(i + 5) * k + p];
                    let a6 = a[(i + 6) * k + p];
                    let a7 = a[(i + 7) * k + p];
                    let br = &b[p * n + j0..p * n + j0 + nb];
                    macro_rules! axpy {
                        ($row:ident, $alpha:expr) => {
                            for (cv, bv) in $row[j0..j0 + nb].iter_mut().zip(br.iter()) {
                                *cv += $alpha * *bv;
                            }
                        };
                    }
                    axpy!(r0, a0);
                    axpy!(r1, a1);
                    axpy!(r2, a2);
                    axpy!(r3, a3);
                    axpy!(r4, a4);
                    axpy!(r5, a5);
                    axpy!(r6, a6);
                    axpy!(r7, a7);
                }
                i += 8;
            }
            while i < m {
                for p in k0..k1 {
                    let aip = a[i * k + p];
                    let br = &b[p * n + j0..p * n + j0 + nb];
                    let cr = &mut c[i * n + j0..i * n + j0 + nb];
                    for (cv, bv) in cr.iter_mut().zip(br.iter()) {
                        *cv += aip * *bv;
                    }
                }
                i += 1;
            }
        }
    }
}

/// C (m x n) += A^T (A is k x m) * B (k x n).
///
/// Used for input gradients where the weight matrix is consumed transposed.
pub fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_GEMM_THRESHOLD && m >= 16 && rayon::current_num_threads() > 1 {
        let rows_per_chunk = m.div_ceil(2 * rayon::current_num_threads()).max(8);
        c.par_chunks_mut(rows_per_chunk * n)
            .enumerate()
            .for_each(|(ci, c_block)| {
                let i0 = ci * rows_per_chunk;
                let rows = c_block.len() / n;
                gemm_at_serial(i0, rows, m, k, n, a, b, c_block);
            });
    } else {
        gemm_at_serial(0, m, m, k, n, a, b, c);
    }
}

fn gemm_at_serial(i0: usize, rows: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for (local_i, c_row) in c.chunks_mut(n).take(rows).enumerate() {
        let i = i0 + local_i;
        for p in 0..k {
            let aip = a[p * m + i];
            if aip == 0.0 {
                continue;
            }
            let br = &b[p * n..p * n + n];
            for (cv, bv) in c_row.iter_mut().zip(br.iter()) {
                *cv += aip * *bv;
            }
        }
    }
}

/// C (m x n) += A (m x k) * B^T (B is n x k): the weight-gradient shape.
pub fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    let do_row = |i: usize, c_row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in ar.iter().zip(br.iter()) {
                acc += *av * *bv;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_GEMM_THRESHOLD && m >= 2 && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| do_row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            do_row(i, c_row);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
