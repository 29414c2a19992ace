//! Slice-level kernels shared by the eager ops and the tape.

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub(crate) fn softmax_rows(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &a[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Normalizes `count` vectors of length `len` laid out with the given strides
/// to zero mean and unit variance. Returns the per-vector `1/sqrt(var + eps)`.
pub(crate) fn normalize_strided(
    src: &[f64],
    dst: &mut [f64],
    count: usize,
    len: usize,
    outer_stride: usize,
    inner_stride: usize,
    eps: f64,
) -> Vec<f64> {
    let mut inv_stds = Vec::with_capacity(count);
    for v in 0..count {
        let base = v * outer_stride;
        let idx = |e: usize| base + e * inner_stride;
        let mean = (0..len).map(|e| src[idx(e)]).sum::<f64>() / len as f64;
        let var = (0..len).map(|e| (src[idx(e)] - mean).powi(2)).sum::<f64>() / len as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for e in 0..len {
            dst[idx(e)] = (src[idx(e)] - mean) * inv;
        }
        inv_stds.push(inv);
    }
    inv_stds
}

/// Backward of [`normalize_strided`]:
/// `dx = inv * (g - mean(g) - y * mean(g ⊙ y))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn normalize_strided_backward(
    y: &[f64],
    g: &[f64],
    inv_stds: &[f64],
    count: usize,
    len: usize,
    outer_stride: usize,
    inner_stride: usize,
    out: &mut [f64],
) {
    for v in 0..count {
        let base = v * outer_stride;
        let idx = |e: usize| base + e * inner_stride;
        let gm = (0..len).map(|e| g[idx(e)]).sum::<f64>() / len as f64;
        let gym = (0..len).map(|e| g[idx(e)] * y[idx(e)]).sum::<f64>() / len as f64;
        for e in 0..len {
            let i = idx(e);
            out[i] += inv_stds[v] * (g[i] - gm - y[i] * gym);
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 3×3, padding-1 patch extraction over a `h×w` grid whose cells are rows of
/// `a` (row index `i * w + j`). Output row `i * w + j` holds the nine
/// neighbours in `(di, dj)` row-major order, `c` values each; out-of-grid
/// neighbours are zero.
pub(crate) fn im2col3(a: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 9 * c];
    for i in 0..h {
        for j in 0..w {
            let orow = (i * w + j) * 9 * c;
            for di in 0..3 {
                for dj in 0..3 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni == 0 || nj == 0 || ni > h || nj > w {
                        continue;
                    }
                    let src = ((ni - 1) * w + (nj - 1)) * c;
                    let dst = orow + (di * 3 + dj) * c;
                    out[dst..dst + c].copy_from_slice(&a[src..src + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn im2col3_backward(g: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let grow = (i * w + j) * 9 * c;
            for di in 0..3 {
                for dj in 0..3 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni == 0 || nj == 0 || ni > h || nj > w {
                        continue;
                    }
                    let dst = ((ni - 1) * w + (nj - 1)) * c;
                    let src = grow + (di * 3 + dj) * c;
                    for k in 0..c {
                        out[dst + k] += g[src + k];
                    }
                }
            }
        }
    }
}
