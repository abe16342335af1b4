//! Forward kernels on raw row-major buffers. Reverse rules live with the
//! tape; the heavy ones reuse these kernels.

use crate::par;

/// `c = a · b` for row-major `a: m×k`, `b: k×n`. Rows of `c` are split
/// across threads; each row is accumulated in a fixed order.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let rows_per_task = (m / (4 * par::threads().max(1))).max(1);
    par::for_each_chunk_mut(&mut c, rows_per_task * n, m * k * n, |ci, block| {
        let row0 = ci * rows_per_task;
        gemm_rows(a, b, block, row0, k, n);
    });
    c
}

/// Sequential `c = a · b`, used as the reference in benches.
pub fn gemm_sequential(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_rows(a, b, &mut c, 0, k, n);
    c
}

fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], row0: usize, k: usize, n: usize) {
    for (r, crow) in c.chunks_exact_mut(n).enumerate() {
        let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    t[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    t
}

/// Batched `c[b] = a[b] · b[b]`.
pub(crate) fn batched_gemm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    par::for_each_chunk_mut(&mut c, m * n, batch * m * k * n, |bi, block| {
        gemm_rows(
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            block,
            0,
            k,
            n,
        );
    });
    c
}

/// Transposes the last two axes of `batch` stacked `rows×cols` matrices.
pub(crate) fn batched_transpose(a: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for bi in 0..batch {
        out.extend(transpose2(
            &a[bi * rows * cols..(bi + 1) * rows * cols],
            rows,
            cols,
        ));
    }
    out
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    // Copy contiguous runs when the innermost axis stays innermost.
    let (outer_rank, run) = if perm[rank - 1] == rank - 1 {
        (rank - 1, out_shape[rank - 1])
    } else {
        (rank, 1)
    };
    let outer: usize = out_shape[..outer_rank].iter().product();
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    for _ in 0..outer {
        out.extend_from_slice(&data[off..off + run]);
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row-wise softmax over the trailing axis of length `n`.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum += *ov;
        }
        let inv = 1.0 / sum;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Row-wise log-softmax over the trailing axis of length `n`.
pub(crate) fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = v - lse;
        }
    }
    out
}

/// Geometry of non-overlapping square patches over `channels×h×w` images.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PatchGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn grid_w(&self) -> usize {
        self.w / self.patch
    }
    pub fn num_patches(&self) -> usize {
        (self.h / self.patch) * self.grid_w()
    }
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Calls `f(image_offset, patch_offset)` for every pixel of one image,
    /// pairing its `(c, y, x)` location with its slot in the patch matrix.
    pub fn for_each_pixel(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.patch;
        let gw = self.grid_w();
        let pd = self.patch_dim();
        for c in 0..self.channels {
            for y in 0..self.h {
                for x in 0..self.w {
                    let patch_idx = (y / p) * gw + x / p;
                    let feat = c * p * p + (y % p) * p + x % p;
                    f((c * self.h + y) * self.w + x, patch_idx * pd + feat);
                }
            }
        }
    }
}

/// Rotation table for rotary embeddings: `(cos, sin)` for each position and
/// frequency `base^(-2i/head_dim)`.
pub(crate) fn rope_table(positions: &[usize], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotates interleaved pairs of `x: [..., seq, heads, head_dim]`. `sign`
/// of -1 applies the inverse rotation.
pub(crate) fn rope_rotate(
    x: &[f64],
    seq: usize,
    heads: usize,
    head_dim: usize,
    cos: &[f64],
    sin: &[f64],
    sign: f64,
) -> Vec<f64> {
    let half = head_dim / 2;
    let mut out = vec![0.0; x.len()];
    let per_seq = seq * heads * head_dim;
    for (xb, ob) in x.chunks_exact(per_seq).zip(out.chunks_exact_mut(per_seq)) {
        for s in 0..seq {
            let cs = &cos[s * half..(s + 1) * half];
            let sn = &sin[s * half..(s + 1) * half];
            for h in 0..heads {
                let base = (s * heads + h) * head_dim;
                for i in 0..half {
                    let (x0, x1) = (xb[base + 2 * i], xb[base + 2 * i + 1]);
                    let (c, si) = (cs[i], sign * sn[i]);
                    ob[base + 2 * i] = x0 * c - x1 * si;
                    ob[base + 2 * i + 1] = x0 * si + x1 * c;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = gemm(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
        assert_eq!(c, gemm_sequential(&a, &b, m, k, n));
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4, 5];
        let data: Vec<f64> = (0..120).map(|i| i as f64).collect();
        let perm = [2, 0, 3, 1];
        let (s, p) = permute(&data, &shape, &perm);
        assert_eq!(s, vec![4, 2, 5, 3]);
        // out[i,j,k,l] = in[j,l,i,k]
        assert_eq!(p[((2 + 1) * 5 + 2) * 3 + 2], data[((3 + 2) * 4 + 1) * 5 + 2]);
        let (s2, back) = permute(&p, &s, &inverse_permutation(&perm));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn permute_keeping_last_axis() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (_, p) = permute(&data, &shape, &[1, 0, 2]);
        assert_eq!(&p[..8], &[0., 1., 2., 3., 12., 13., 14., 15.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -1.0, -1.0, 1000.0];
        let s = softmax_rows(&x, 3);
        assert!((s[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((s[5] - 1.0).abs() < 1e-15);
        let ls = log_softmax_rows(&x, 3);
        for (a, b) in s.iter().zip(&ls) {
            assert!((a.ln() - b).abs() < 1e-12 || *a == 0.0);
        }
    }
}
