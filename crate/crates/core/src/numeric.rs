//! Small numerical utilities shared by the solver modules.

use crate::error::{Error, Result};

/// Linear interpolation of nodal values on the uniform grid `{i·h}`.
/// Arguments past the last node return the last value.
pub fn interp_uniform(values: &[f64], h: f64, x: f64) -> f64 {
    let n = values.len();
    if n == 1 || x <= 0.0 {
        return values[0];
    }
    let s = x / h;
    let i = s.floor() as usize;
    if i >= n - 1 {
        return values[n - 1];
    }
    let t = s - i as f64;
    values[i] + t * (values[i + 1] - values[i])
}

/// Weighted least-squares projection onto nondecreasing sequences
/// (pool-adjacent-violators).
pub fn isotonic_increasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // Blocks of (weighted mean, weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let mut cur = (v, w, 1usize);
        while let Some(&(pm, pw, pl)) = blocks.last() {
            if pm <= cur.0 {
                break;
            }
            blocks.pop();
            let tw = pw + cur.1;
            cur = ((pm * pw + cur.0 * cur.1) / tw, tw, pl + cur.2);
        }
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, _, l) in blocks {
        out.extend(std::iter::repeat(m).take(l));
    }
    out
}

pub fn isotonic_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    isotonic_increasing(&neg, weights)
        .into_iter()
        .map(|v| -v)
        .collect()
}

/// First derivative at node `i` of a uniform grid: five-point central
/// stencil where possible, three-point or one-sided near the ends.
pub fn derivative(values: &[f64], h: f64, i: usize) -> f64 {
    let n = values.len();
    assert!(n >= 2);
    if i >= 2 && i + 2 < n {
        (values[i - 2] - 8.0 * values[i - 1] + 8.0 * values[i + 1] - values[i + 2]) / (12.0 * h)
    } else if i >= 1 && i + 1 < n {
        (values[i + 1] - values[i - 1]) / (2.0 * h)
    } else if i == 0 {
        (values[1] - values[0]) / h
    } else {
        (values[n - 1] - values[n - 2]) / h
    }
}

/// Median of a nonempty slice.
pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolated empirical quantile.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty());
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] + (pos - i as f64) * (s[i + 1] - s[i])
}

/// Bisection for a sign change of `f` on `[lo, hi]`, stopping when the
/// bracket is shorter than `tol`. Returns the final bracket.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut flo = f(lo);
    let mut n = 0;
    while hi - lo > tol && n < 200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        n += 1;
    }
    (lo, hi)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_2,
    0.063_092_092_629_979_0,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for j in 0..7 {
        let x = r * GK_NODES[j];
        let s = f(c - x) + f(c + x);
        k += GK_WK[j] * s;
        if j % 2 == 1 {
            g += GK_WG[j / 2] * s;
        }
    }
    (k * r, ((k - g) * r).abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (i0, e0) = gk15(&f, a, b);
    let mut parts = vec![(a, b, i0, e0)];
    for _ in 0..2000 {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        let (k, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let (lo, hi, _, _) = parts.swap_remove(k);
        let mid = 0.5 * (lo + hi);
        let (il, el) = gk15(&f, lo, mid);
        let (ir, er) = gk15(&f, mid, hi);
        parts.push((lo, mid, il, el));
        parts.push((mid, hi, ir, er));
    }
    Err(Error::Quadrature { lo: a, hi: b })
}

/// `ln(e^x + e^y)` without overflow.
pub fn log_add_exp(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let m = x.max(y);
    m + ((x - m).exp() + (y - m).exp()).ln()
}
