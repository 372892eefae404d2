//! Dense kernels and layer forward/backward passes on row-major `f64` buffers.
//!
//! Backward functions accumulate (`+=`) into parameter gradients and
//! overwrite input gradients unless stated otherwise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Strided matrix view: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

fn view(data: &[f64], rs: usize, cs: usize) -> View<'_> {
    View { data, rs, cs }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "matrix view out of bounds");
    }
}

/// `c = alpha * a · b + beta * c` with `a: m × k`, `b: k × n`, `c: m × n`.
/// With `beta == 0` the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], rsc: usize, csc: usize) {
    check_extent(a.data.len(), m, k, a.rs, a.cs);
    check_extent(b.data.len(), k, n, b.rs, b.cs);
    check_extent(c.len(), m, n, rsc, csc);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched is bounded by the extent checks above, and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out = x · w + b` with `x: rows × k`, `w: k × n`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    for o in out[..rows * n].chunks_exact_mut(n) {
        o.copy_from_slice(b);
    }
    gemm(rows, k, n, 1.0, view(x, k, 1), view(w, n, 1), 1.0, out, n, 1);
}

/// Gradients of [`linear`]. `dx` is overwritten when given.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    k: usize,
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for g in dy[..rows * n].chunks_exact(n) {
        axpy(1.0, g, db);
    }
    gemm(k, rows, n, 1.0, view(x, 1, k), view(dy, n, 1), 1.0, dw, n, 1);
    if let Some(dx) = dx {
        gemm(rows, n, k, 1.0, view(dy, n, 1), view(w, 1, n), 0.0, dx, k, 1);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization. Stores normalized rows and inverse std for
/// the backward pass.
pub fn layer_norm(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    d: usize,
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * g[c] + b[c];
        }
    }
}

/// Gradient of [`layer_norm`]; `dx` is accumulated.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let inv_d = 1.0 / d as f64;
    let mut dxhat = vec![0.0; d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xr[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xr[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for c in 0..d {
            dx[r * d + c] += rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
        }
    }
}

/// Sum with four independent accumulators.
#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let c = a.chunks_exact(4);
    let rem = c.remainder();
    for x in c {
        acc[0] += x[0];
        acc[1] += x[1];
        acc[2] += x[2];
        acc[3] += x[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for x in rem {
        s += x;
    }
    s
}

/// True when no element is NaN or infinite.
pub fn all_finite(a: &[f64]) -> bool {
    // x * 0 is NaN exactly when x is not finite.
    let mut acc = [0.0f64; 4];
    let c = a.chunks_exact(4);
    let rem = c.remainder();
    for x in c {
        for t in 0..4 {
            acc[t] += x[t] * 0.0;
        }
    }
    let s = rem.iter().fold((acc[0] + acc[1]) + (acc[2] + acc[3]), |s, x| s + x * 0.0);
    s == 0.0
}

/// `exp(x)` with relative error below 1e-15, written without branches or
/// library calls so loops over it vectorize. Inputs are clamped to
/// `[-708, 709]`.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-708.0).min(709.0);
    let shifted = x * std::f64::consts::LOG2_E + SHIFT;
    let k = shifted - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to r^12 / 12! on |r| <= ln2 / 2.
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = shifted.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(ki.wrapping_add(1023) << 52)
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (exp(2.0 * x) + 1.0)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// Tanh approximation of GELU. Writes activations and the tanh values the
/// gradient needs.
pub fn gelu(x: &[f64], out: &mut [f64], t: &mut [f64]) {
    for ((o, ti), &v) in out.iter_mut().zip(t.iter_mut()).zip(x) {
        let th = tanh(GELU_K * (v + GELU_C * v * v * v));
        *ti = th;
        *o = 0.5 * v * (1.0 + th);
    }
}

/// Multiplies `g` in place by the GELU derivative at `x`.
pub fn gelu_backward(x: &[f64], t: &[f64], g: &mut [f64]) {
    for ((gi, &v), &th) in g.iter_mut().zip(x).zip(t) {
        *gi *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
    }
}

/// Multi-head self-attention core. `qkv` is `n × 3d` (queries, keys, values
/// side by side); `probs` receives `heads × n × n` softmax weights and `out`
/// the `n × d` concatenated head outputs.
pub fn attention(qkv: &[f64], n: usize, d: usize, heads: usize, probs: &mut [f64], out: &mut [f64]) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let s3 = 3 * d;
    for h in 0..heads {
        let q = &qkv[h * hd..];
        let k = &qkv[d + h * hd..];
        let v = &qkv[2 * d + h * hd..];
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        gemm(n, hd, n, scale, view(q, s3, 1), view(k, 1, s3), 0.0, p, n, 1);
        for row in p.chunks_exact_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m });
            for x in row.iter_mut() {
                *x = exp(*x - max);
            }
            let inv = 1.0 / sum(row);
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        gemm(n, n, hd, 1.0, view(p, n, 1), view(v, s3, 1), 0.0, &mut out[h * hd..], d, 1);
    }
}

/// Gradient of [`attention`] with respect to `qkv` (overwritten).
pub fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [f64],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let s3 = 3 * d;
    let mut ds = vec![0.0; n * n];
    for h in 0..heads {
        let q = &qkv[h * hd..];
        let k = &qkv[d + h * hd..];
        let v = &qkv[2 * d + h * hd..];
        let p = &probs[h * n * n..(h + 1) * n * n];
        let dout = &dout[h * hd..];
        gemm(n, n, hd, 1.0, view(p, 1, n), view(dout, d, 1), 0.0, &mut dqkv[2 * d + h * hd..], s3, 1);
        gemm(n, hd, n, 1.0, view(dout, d, 1), view(v, 1, s3), 0.0, &mut ds, n, 1);
        for (dr, pr) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let s = dot(pr, dr);
            for (g, &pj) in dr.iter_mut().zip(pr) {
                *g = pj * (*g - s);
            }
        }
        gemm(n, n, hd, scale, view(&ds, n, 1), view(k, s3, 1), 0.0, &mut dqkv[h * hd..], s3, 1);
        gemm(n, n, hd, scale, view(&ds, 1, n), view(q, s3, 1), 0.0, &mut dqkv[d + h * hd..], s3, 1);
    }
}

/// Normal draw with the given std, redrawn until it lies within two std.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_hand_product() {
        // [1 2] · [[1 0 2], [0 1 3]] + [1 1 1] = [2 3 9]
        let mut out = vec![0.0; 3];
        linear(&[1.0, 2.0], &[1.0, 0.0, 2.0, 0.0, 1.0, 3.0], &[1.0; 3], 1, 2, 3, &mut out);
        assert_eq!(out, vec![2.0, 3.0, 9.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0];
        let (mut out, mut xh, mut rs) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 2]);
        layer_norm(&x, &[1.0; 4], &[0.0; 4], 4, &mut out, &mut xh, &mut rs);
        for row in out.chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn exp_matches_std() {
        let mut x = -700.0;
        while x < 700.0 {
            let (a, b) = (exp(x), x.exp());
            assert!(((a - b) / b).abs() < 1e-15, "exp({x}): {a} vs {b}");
            x += 0.137;
        }
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-1e9), exp(-708.0));
    }

    #[test]
    fn tanh_matches_std() {
        for i in -400..400 {
            let x = i as f64 * 0.05;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let xs = [-3.0, -0.7, 0.0, 0.4, 2.5];
        let f = |x: f64| {
            let (mut o, mut t) = ([0.0], [0.0]);
            gelu(&[x], &mut o, &mut t);
            o[0]
        };
        let (mut o, mut t) = ([0.0; 5], [0.0; 5]);
        gelu(&xs, &mut o, &mut t);
        let mut g = [1.0; 5];
        gelu_backward(&xs, &t, &mut g);
        for (k, &x) in xs.iter().enumerate() {
            let h = 1e-6;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let n = 5;
        let d = 4;
        let qkv: Vec<f64> = (0..n * 3 * d).map(|i| ((i * 7) % 11) as f64 * 0.1).collect();
        let mut p = vec![0.0; 2 * n * n];
        let mut out = vec![0.0; n * d];
        attention(&qkv, n, d, 2, &mut p, &mut out);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
