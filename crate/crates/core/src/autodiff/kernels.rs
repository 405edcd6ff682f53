//! Plain numeric kernels shared by the tape ops and by code that only needs
//! forward values (masks, metrics). Keeping one implementation guarantees the
//! two paths agree bit for bit.

/// Row-wise softmax of `row / temperature`, max-subtracted.
pub fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v / temperature - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise `log softmax(row / temperature)` via log-sum-exp.
///
/// The max entry contributes exactly 1 to the shifted sum, so the remainder
/// goes through `ln_1p` to keep confident rows accurate.
pub fn log_softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let top = argmax(row);
    let max = row[top] / temperature;
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &v)| (v / temperature - max).exp())
        .sum();
    let lse = rest.ln_1p();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v / temperature - max) - lse;
    }
}

/// Softmax over the last axis of a flat buffer with `width` columns.
pub fn softmax(data: &[f64], width: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        softmax_row(src, temperature, dst);
    }
    out
}

pub fn log_softmax(data: &[f64], width: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        log_softmax_row(src, temperature, dst);
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`, i-k-j loop order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`; result `k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` where `a` is `m×n` and `b` is `k×n`; result `m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}
