//! Independent oracles shared by the integration tests. Nothing here calls the
//! library's quantization code.

#![allow(dead_code, clippy::manual_div_ceil)]

/// Nearest grid level by exhaustive search over every integer level.
/// Ties go to the level farther from zero in `x/Δ + z` space.
pub fn brute_quantize(x: f64, delta: f64, zero: f64, qmin: i64, qmax: i64) -> f64 {
    let u = x / delta + zero;
    let mut best = qmin;
    let mut best_d = f64::INFINITY;
    for k in qmin..=qmax {
        let d = (u - k as f64).abs();
        let better = d < best_d || (d == best_d && (k as f64).abs() > (best as f64).abs() && u.signum() == (k as f64).signum());
        if better {
            best = k;
            best_d = d;
        }
    }
    (best as f64 - zero) * delta
}

/// Grid of a `bits`-bit quantizer for `[lo, hi]` as `(delta, zero, qmin, qmax)`,
/// derived by scanning every admissible integer zero-point.
pub fn brute_grid(lo: f64, hi: f64, bits: u32, symmetric: bool) -> (f64, f64, i64, i64) {
    let n = (1u64 << bits) as f64 - 1.0;
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    if symmetric {
        let m = lo.abs().max(hi.abs());
        let q = (1i64 << (bits - 1)) - 1;
        return (2.0 * m / n, 0.0, -q, q);
    }
    let mut best = (f64::INFINITY, 0.0);
    for z in 0..=(n as i64) {
        let z = z as f64;
        let d_lo = if z > 0.0 { -lo / z } else if lo < 0.0 { f64::INFINITY } else { 0.0 };
        let d_hi = if z < n { hi / (n - z) } else if hi > 0.0 { f64::INFINITY } else { 0.0 };
        let d = d_lo.max(d_hi);
        if d < best.0 {
            best = (d, z);
        }
    }
    (best.0, best.1, 0, n as i64)
}

pub fn brute_mse(xs: &[f64], lo: f64, hi: f64, bits: u32, symmetric: bool) -> f64 {
    let (d, z, qmin, qmax) = brute_grid(lo, hi, bits, symmetric);
    xs.iter()
        .map(|&x| {
            let e = brute_quantize(x, d, z, qmin, qmax) - x;
            e * e
        })
        .sum::<f64>()
        / xs.len() as f64
}

/// Nearest-rank percentile by full sort, with the percent given in hundredths
/// so the rank is computed in integer arithmetic.
pub fn sorted_rank_percentile(values: &[f64], hundredths: u64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as u64;
    let k = ((hundredths * n + 9999) / 10000).clamp(1, n);
    v[(k - 1) as usize]
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let num: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    num / weights.iter().sum::<f64>()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
