//! Raw math kernels shared by the autodiff graph and the plain inference
//! path. Both call exactly these functions so the two paths produce
//! bit-identical outputs for the same weights.

use crate::scalar::{fl, Scalar};

/// `out[r, c] = sum_k a[r, k] * b[k, c]`, accumulated in the scalar type.
/// ikj loop order keeps the inner loop contiguous for both `b` and `out`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = F::zero();
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[r, c] += a[r, k] * b[k, c]` without zeroing `out` first.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[r, c] += a[k, r] * b[k, c]` (a transposed), used for weight grads.
pub fn matmul_at_b_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    // a is [k, m] logically; out is [m, n].
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_pi * b_pj;
            }
        }
    }
}

/// `out[r, c] += a[r, k] * b[c, k]` (b transposed), used for input grads.
pub fn matmul_a_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    // b is [n, k] logically; out is [m, n].
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&a_ip, &b_jp) in a_row.iter().zip(b_row.iter()) {
                acc += a_ip * b_jp;
            }
            *o += acc;
        }
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Tanh-form gaussian error linear unit.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c: F = fl(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k: F = fl(0.044715);
    let half: F = fl(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

/// Derivative of the tanh-form gelu at `x`.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c: F = fl(0.797_884_560_802_865_4);
    let k: F = fl(0.044715);
    let half: F = fl(0.5);
    let three: F = fl(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    let d_inner = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * sech2 * d_inner
}

/// Softmax over each row of a `[rows, cols]` matrix, in place, with the
/// max-subtraction trick for stability.
pub fn softmax_rows<F: Scalar>(data: &mut [F], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Normalize each row to zero mean and unit variance, then apply per-column
/// gain and bias. Writes the per-row mean and reciprocal std into `mean` and
/// `rstd` for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    mean: &mut [F],
    rstd: &mut [F],
    rows: usize,
    cols: usize,
    eps: F,
) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(gain.len(), cols);
    debug_assert_eq!(bias.len(), cols);
    let n = fl::<F>(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut m = F::zero();
        for &v in row {
            m += v;
        }
        m = m / n;
        let mut var = F::zero();
        for &v in row {
            let d = v - m;
            var += d * d;
        }
        var = var / n;
        let rs = F::one() / (var + eps).sqrt();
        mean[r] = m;
        rstd[r] = rs;
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out_row[c] = (row[c] - m) * rs * gain[c] + bias[c];
        }
    }
}

pub fn transpose<F: Scalar>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Column means over the first `n` rows of a `[rows, cols]` matrix.
pub fn mean_rows_prefix<F: Scalar>(x: &[F], cols: usize, n: usize, out: &mut [F]) {
    debug_assert!(n >= 1 && n * cols <= x.len());
    debug_assert_eq!(out.len(), cols);
    for v in out.iter_mut() {
        *v = F::zero();
    }
    for row in x.chunks_exact(cols).take(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = F::one() / fl::<F>(n as f64);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Column means over the rows whose mask entry is true. Returns the number of
/// rows averaged; zero means the caller must treat the result as undefined.
/// For a mask that is true on a prefix, the accumulation order matches
/// [`mean_rows_prefix`] exactly.
pub fn masked_mean_rows<F: Scalar>(x: &[F], cols: usize, mask: &[bool], out: &mut [F]) -> usize {
    debug_assert_eq!(x.len(), cols * mask.len());
    debug_assert_eq!(out.len(), cols);
    for v in out.iter_mut() {
        *v = F::zero();
    }
    let mut count = 0usize;
    for (row, &keep) in x.chunks_exact(cols).zip(mask) {
        if keep {
            count += 1;
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    if count > 0 {
        let inv = F::one() / fl::<F>(count as f64);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }
    count
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors. Returns `None` when either
/// norm underflows to effectively zero.
pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> Option<F> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    let tiny: F = fl(1e-30);
    if na < tiny || nb < tiny {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference matmul with the textbook ijk loop, used as the oracle for
    /// the production ikj kernel.
    fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; m * n];
            matmul(&a, &b, &mut out, m, k, n);
            let oracle = matmul_naive(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(oracle.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &eye, &mut out, 2, 2, 2);
        assert_eq!(out, a);
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // a^T b via the kernel.
        let mut out = vec![0.0; m * n];
        matmul_at_b_acc(&a, &b, &mut out, m, k, n);
        // Explicit transpose then plain matmul.
        let mut at = vec![0.0; m * k];
        for p in 0..k {
            for i in 0..m {
                at[i * k + p] = a[p * m + i];
            }
        }
        let oracle = matmul_naive(&at, &b, m, k, n);
        for (x, y) in out.iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a b^T via the kernel.
        let a2: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out2 = vec![0.0; m * n];
        matmul_a_bt_acc(&a2, &b2, &mut out2, m, k, n);
        let mut b2t = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                b2t[p * n + j] = b2[j * k + p];
            }
        }
        let oracle2 = matmul_naive(&a2, &b2t, m, k, n);
        for (x, y) in out2.iter().zip(oracle2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_known_values() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        // 1 / (1 + e^0.2)
        assert!((sigmoid(-0.2f64) - 0.45016600268752214).abs() < 1e-15);
        assert!(sigmoid(40.0f64) > 0.999999);
        assert!(sigmoid(-40.0f64) < 1e-6);
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1000.0];
        softmax_rows(&mut x, 2, 3);
        for r in 0..2 {
            let row = &x[r * 3..(r + 1) * 3];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Large logit dominates without overflow.
        assert!(x[5] > 0.999);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_zero_mean_unit_var() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.5, 2.5, 9.0];
        let gain = vec![1.0; 4];
        let bias = vec![0.0; 4];
        let mut out = vec![0.0; 8];
        let (mut mean, mut rstd) = (vec![0.0; 2], vec![0.0; 2]);
        layer_norm_rows(&x, &gain, &bias, &mut out, &mut mean, &mut rstd, 2, 4, 1e-5);
        for r in 0..2 {
            let row = &out[r * 4..(r + 1) * 4];
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn masked_mean_matches_prefix_mean_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (rows, cols, n) = (7, 5, 4);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut mask = vec![false; rows];
        mask[..n].fill(true);
        let mut a = vec![0.0; cols];
        let mut b = vec![0.0; cols];
        mean_rows_prefix(&x, cols, n, &mut a);
        let count = masked_mean_rows(&x, cols, &mask, &mut b);
        assert_eq!(count, n);
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_degenerate_is_none() {
        assert!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]).is_none());
        let c = cosine(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        let d = cosine(&[1.0f64, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((d + 1.0).abs() < 1e-15);
    }
}
