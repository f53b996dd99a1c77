//! Dense row-major products used by the grid engine.
//!
//! Each output entry is accumulated in the same order whether or not the work
//! is split across threads, so parallel results are bit-identical to the
//! sequential ones.

use rayon::prelude::*;

/// Sets flush-to-zero and denormals-are-zero for the current thread while
/// alive. Products that would land below `f64::MIN_POSITIVE` become 0 instead
/// of taking the slow subnormal path; nothing representable above that
/// threshold changes.
pub(crate) struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    pub(crate) fn new() -> Self {
        const FTZ_DAZ: u32 = (1 << 15) | (1 << 6);
        let mut saved: u32 = 0;
        // SAFETY: stmxcsr/ldmxcsr only read and write the SSE control register
        // of the current thread.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let set = saved | FTZ_DAZ;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &set, options(nostack, readonly));
        }
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub(crate) fn new() -> Self {
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value saved in `new`.
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack, readonly));
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 16;
const COL_CHUNK: usize = 128;

/// `out[j] = sum_i v[i] * mat[i, j]` for a row-major `rows x cols` matrix.
pub(crate) fn vec_mat(v: &[f64], mat: &[f64], cols: usize) -> Vec<f64> {
    let rows = v.len();
    debug_assert_eq!(mat.len(), rows * cols);
    let mut out = vec![0.0; cols];
    let fill = |start: usize, chunk: &mut [f64]| {
        let _ftz = FlushDenormals::new();
        let width = chunk.len();
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &mat[i * cols + start..i * cols + start + width];
            for (o, &m) in chunk.iter_mut().zip(row) {
                *o += vi * m;
            }
        }
    };
    if rows * cols >= PAR_THRESHOLD {
        out.par_chunks_mut(COL_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| fill(c * COL_CHUNK, chunk));
    } else {
        for (c, chunk) in out.chunks_mut(COL_CHUNK).enumerate() {
            fill(c * COL_CHUNK, chunk);
        }
    }
    out
}

/// [`vec_mat`] for several vectors at once, reading `mat` a single time.
/// Each output equals the corresponding `vec_mat` result bit for bit.
pub(crate) fn vec_mat_many(vs: &[&[f64]], mat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    let k = vs.len();
    let rows = vs.first().map_or(0, |v| v.len());
    debug_assert!(vs.iter().all(|v| v.len() == rows));
    debug_assert_eq!(mat.len(), rows * cols);
    let mut flat = vec![0.0; k * cols];
    // chunk c of the output holds COL_CHUNK columns for each of the k vectors
    let fill = |start: usize, chunk: &mut [f64]| {
        let _ftz = FlushDenormals::new();
        let width = chunk.len() / k;
        for i in 0..rows {
            let row = &mat[i * cols + start..i * cols + start + width];
            for (t, v) in vs.iter().enumerate() {
                let vi = v[i];
                if vi == 0.0 {
                    continue;
                }
                for (o, &m) in chunk[t * width..(t + 1) * width].iter_mut().zip(row) {
                    *o += vi * m;
                }
            }
        }
    };
    let mut chunks: Vec<(usize, &mut [f64])> = Vec::new();
    let mut rest = flat.as_mut_slice();
    let mut start = 0;
    while start < cols {
        let width = COL_CHUNK.min(cols - start);
        let (head, tail) = rest.split_at_mut(width * k);
        chunks.push((start, head));
        rest = tail;
        start += width;
    }
    if rows * cols >= PAR_THRESHOLD {
        chunks.into_par_iter().for_each(|(s, c)| fill(s, c));
    } else {
        chunks.into_iter().for_each(|(s, c)| fill(s, c));
    }
    let mut out = vec![Vec::with_capacity(cols); k];
    let mut start = 0;
    let mut offset = 0;
    while start < cols {
        let width = COL_CHUNK.min(cols - start);
        for (t, o) in out.iter_mut().enumerate() {
            o.extend_from_slice(&flat[offset + t * width..offset + (t + 1) * width]);
        }
        offset += width * k;
        start += width;
    }
    out
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[i] = sum_j mat[i, j] * u[j]` for a row-major `rows x cols` matrix.
pub(crate) fn mat_vec(mat: &[f64], u: &[f64], rows: usize) -> Vec<f64> {
    let cols = u.len();
    debug_assert_eq!(mat.len(), rows * cols);
    let row_dot = |i: usize| -> f64 {
        let _ftz = FlushDenormals::new();
        dot(&mat[i * cols..(i + 1) * cols], u)
    };
    if rows * cols >= PAR_THRESHOLD {
        (0..rows).into_par_iter().map(row_dot).collect()
    } else {
        (0..rows).map(row_dot).collect()
    }
}

/// Row-major product of `a` (`n x m`) and `b` (`m x p`).
pub(crate) fn mat_mat(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), m * p);
    let mut out = vec![0.0; n * p];
    let row = |i: usize, out_row: &mut [f64]| {
        let _ftz = FlushDenormals::new();
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o += aik * bkj;
            }
        }
    };
    if n * m * p >= PAR_THRESHOLD {
        out.par_chunks_mut(p.max(1))
            .enumerate()
            .for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(p.max(1)).enumerate() {
            row(i, r);
        }
    }
    out
}
