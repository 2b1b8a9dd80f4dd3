//! Raw numeric kernels shared by the forward and backward passes.

use crate::exec::Exec;

/// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

fn pick(exec: Exec, work: usize) -> Exec {
    if work < PAR_THRESHOLD {
        Exec::Sequential
    } else {
        exec
    }
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// `a[p×q] · b[q×r]`
///
/// Register-tiled; every output element still accumulates over `k` in
/// increasing order, so results match the naive triple loop bit for bit.
pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    if r == 0 {
        return out;
    }
    pick(exec, p * q * r).for_each_row(&mut out, TILE_ROWS * r, |blk, chunk| {
        let rows = chunk.len() / r;
        let i0 = blk * TILE_ROWS;
        if rows == TILE_ROWS {
            tile_block(a, b, q, r, i0, chunk);
        } else {
            for ii in 0..rows {
                let arow = &a[(i0 + ii) * q..(i0 + ii + 1) * q];
                let row = &mut chunk[ii * r..(ii + 1) * r];
                for (k, &aik) in arow.iter().enumerate() {
                    let brow = &b[k * r..(k + 1) * r];
                    for (o, &bkj) in row.iter_mut().zip(brow) {
                        *o += aik * bkj;
                    }
                }
            }
        }
    });
    out
}

fn tile_block(a: &[f64], b: &[f64], q: usize, r: usize, i0: usize, chunk: &mut [f64]) {
    let arows: [&[f64]; TILE_ROWS] = std::array::from_fn(|ii| &a[(i0 + ii) * q..(i0 + ii + 1) * q]);
    let mut j = 0;
    while j + TILE_COLS <= r {
        let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
        for k in 0..q {
            let bk: &[f64; TILE_COLS] = b[k * r + j..k * r + j + TILE_COLS].try_into().expect("tile width");
            for ii in 0..TILE_ROWS {
                let aik = arows[ii][k];
                for jj in 0..TILE_COLS {
                    acc[ii][jj] += aik * bk[jj];
                }
            }
        }
        for ii in 0..TILE_ROWS {
            chunk[ii * r + j..ii * r + j + TILE_COLS].copy_from_slice(&acc[ii]);
        }
        j += TILE_COLS;
    }
    if j < r {
        for ii in 0..TILE_ROWS {
            for jj in j..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += arows[ii][k] * b[k * r + jj];
                }
                chunk[ii * r + jj] = s;
            }
        }
    }
}

/// `g[p×r] · b[q×r]ᵀ`
pub fn matmul_nt(g: &[f64], b: &[f64], p: usize, q: usize, r: usize, exec: Exec) -> Vec<f64> {
    matmul(g, &transpose(b, q, r), p, r, q, exec)
}

/// `a[p×q]ᵀ · g[p×r]`
pub fn matmul_tn(a: &[f64], g: &[f64], p: usize, q: usize, r: usize, exec: Exec) -> Vec<f64> {
    matmul(&transpose(a, p, q), g, q, p, r, exec)
}

/// Row-major `x[p×q]` to `[q×p]`.
pub fn transpose(x: &[f64], p: usize, q: usize) -> Vec<f64> {
    let mut t = vec![0.0; p * q];
    for i in 0..p {
        for k in 0..q {
            t[k * p + i] = x[i * q + k];
        }
    }
    t
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable log-sum-exp of a slice; `-inf` entries contribute
/// nothing and an all `-inf` slice yields `-inf`.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C: f64 = 0.044_715;

/// Tanh-form approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    out[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        out
    }

    #[test]
    fn transposed_products_agree_with_naive() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.11).cos()).collect();
        // a: 4x3, b: 3x5
        let ab = matmul(&a, &b, 4, 3, 5, Exec::Sequential);
        let oracle = naive(&a, &b, 4, 3, 5);
        for (x, y) in ab.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        // g: 4x5, b: 3x5 -> g bᵀ : 4x3
        let bt: Vec<f64> = {
            let mut t = vec![0.0; 15];
            for i in 0..3 {
                for j in 0..5 {
                    t[j * 3 + i] = b[i * 5 + j];
                }
            }
            t
        };
        let nt = matmul_nt(&ab, &b, 4, 3, 5, Exec::Sequential);
        let oracle = naive(&ab, &bt, 4, 5, 3);
        for (x, y) in nt.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        let at: Vec<f64> = {
            let mut t = vec![0.0; 12];
            for i in 0..4 {
                for j in 0..3 {
                    t[j * 4 + i] = a[i * 3 + j];
                }
            }
            t
        };
        let tn = matmul_tn(&a, &ab, 4, 3, 5, Exec::Sequential);
        let oracle = naive(&at, &ab, 3, 4, 5);
        for (x, y) in tn.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -20..=20 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn logsumexp_ignores_masked_entries() {
        let v = [0.0, f64::NEG_INFINITY, 3f64.ln()];
        assert!((logsumexp(v.iter().copied()) - 4f64.ln()).abs() < 1e-15);
        let all = [f64::NEG_INFINITY; 3];
        assert_eq!(logsumexp(all.iter().copied()), f64::NEG_INFINITY);
    }
}
