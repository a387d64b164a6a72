//! Dense building blocks with explicit backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::Real;

pub const NORM_EPS: f64 = 1e-6;

/// RMS normalization with a per-feature gain (`g` is 1×D). Returns the
/// output and the per-row inverse RMS.
pub fn rmsnorm<T: Real>(x: ArrayView2<T>, g: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let d = T::from_usize(x.ncols()).unwrap();
    let eps = T::from_f64(NORM_EPS).unwrap();
    let inv: Array1<T> = x
        .rows()
        .into_iter()
        .map(|r| T::one() / ((r.iter().map(|&v| v * v).sum::<T>() / d) + eps).sqrt())
        .collect();
    let mut y = x.to_owned();
    let gr = g.row(0);
    Zip::from(y.rows_mut()).and(&inv).for_each(|mut row, &r| {
        Zip::from(&mut row).and(&gr).for_each(|v, &gi| *v = *v * r * gi);
    });
    (y, inv)
}

/// Returns `(dx, dg)`.
pub fn rmsnorm_backward<T: Real>(
    x: ArrayView2<T>,
    g: &Array2<T>,
    inv: &Array1<T>,
    dy: &Array2<T>,
) -> (Array2<T>, Array2<T>) {
    let d = T::from_usize(x.ncols()).unwrap();
    let gr = g.row(0);
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dg = Array2::zeros(g.raw_dim());
    for ((i, xr), dyr) in x.rows().into_iter().enumerate().zip(dy.rows()) {
        let r = inv[i];
        let mut dot = T::zero();
        for j in 0..xr.len() {
            dot += dyr[j] * gr[j] * xr[j];
            dg[[0, j]] += dyr[j] * xr[j] * r;
        }
        let c = r * r * r * dot / d;
        let mut out = dx.row_mut(i);
        for j in 0..xr.len() {
            out[j] = r * gr[j] * dyr[j] - c * xr[j];
        }
    }
    (dx, dg)
}

/// Precomputed rotary phases; positions beyond the table are computed on
/// the fly.
#[derive(Debug, Clone)]
pub struct Rope {
    half: usize,
    inv_freq: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, theta: f64, table_len: usize) -> Self {
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| theta.powf(-(2.0 * i as f64) / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(table_len * half);
        let mut sin = Vec::with_capacity(table_len * half);
        for p in 0..table_len {
            for f in &inv_freq {
                let (s, c) = (p as f64 * f).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Rope {
            half,
            inv_freq,
            cos,
            sin,
        }
    }

    fn phase(&self, pos: usize, i: usize) -> (f64, f64) {
        let idx = pos * self.half + i;
        if idx < self.cos.len() {
            (self.cos[idx], self.sin[idx])
        } else {
            let (s, c) = (pos as f64 * self.inv_freq[i]).sin_cos();
            (c, s)
        }
    }

    /// Rotates every head of every row in place by its position's phase;
    /// `inverse` applies the transpose rotation (used in backward).
    pub fn apply<T: Real>(&self, x: &mut Array2<T>, positions: &[usize], inverse: bool) {
        let hd = self.half * 2;
        let heads = x.ncols() / hd;
        for (mut row, &p) in x.rows_mut().into_iter().zip(positions) {
            for i in 0..self.half {
                let (c, s) = self.phase(p, i);
                let c = T::from_f64(c).unwrap();
                let s = if inverse { T::from_f64(-s).unwrap() } else { T::from_f64(s).unwrap() };
                for h in 0..heads {
                    let a = h * hd + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = if *v == T::neg_infinity() { T::zero() } else { (*v - mx).exp() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention. `q` is n×D, `k`/`v` are m×D.
/// With `causal`, query i attends to keys `0..=i`.
pub fn attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    causal: bool,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = q.ncols();
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if causal {
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                row.slice_mut(s![i + 1..]).fill(T::neg_infinity());
            }
        }
        softmax_rows(&mut sc);
        out.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
    dout: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let heads = probs.len();
    let d = q.ncols();
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let dout_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&v.slice(cols).t());
        let mut ds = &dp * p;
        let rs = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut()).and(p.rows()).and(&rs).for_each(|mut dr, pr, &r| {
            Zip::from(&mut dr).and(&pr).for_each(|dv, &pv| *dv -= pv * r);
        });
        let ds = ds * scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

pub fn silu<T: Real>(a: T) -> T {
    a / (T::one() + (-a).exp())
}

pub fn silu_grad<T: Real>(a: T) -> T {
    let s = T::one() / (T::one() + (-a).exp());
    s * (T::one() + a * (T::one() - s))
}

/// Softmax in f64 over a logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
