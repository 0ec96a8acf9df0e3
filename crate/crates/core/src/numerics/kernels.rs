//! Loop kernels behind the graph primitives. Slices are row-major.

use super::tensor::{c, Element};

/// `a[m, k] · b[k, n]`.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m, k] · b[n, k]ᵀ`.
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out.push(s);
        }
    }
    out
}

/// `a[m, k]ᵀ · b[m, n]`.
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Tanh-approximated GELU and its derivative.
pub fn gelu<T: Element>(x: T) -> (T, T) {
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044_715);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = k * (T::one() + three * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

pub fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

/// Max-subtracted softmax in place.
pub fn softmax_inplace<T: Element>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Zero-mean, unit-variance rows. Returns the output and per-row `1/σ`.
pub fn normalize_rows<T: Element>(x: &[T], m: usize, n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(m * n);
    let mut rstd = Vec::with_capacity(m);
    let inv_n: T = c(1.0 / n as f64);
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mu = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        out.extend(row.iter().map(|&v| (v - mu) * r));
    }
    (out, rstd)
}

pub fn normalize_rows_backward<T: Element>(y: &[T], dy: &[T], rstd: &[T], m: usize, n: usize) -> Vec<T> {
    let inv_n: T = c(1.0 / n as f64);
    let mut dx = Vec::with_capacity(m * n);
    for i in 0..m {
        let (yr, gr) = (&y[i * n..(i + 1) * n], &dy[i * n..(i + 1) * n]);
        let mg = gr.iter().copied().sum::<T>() * inv_n;
        let mgy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() * inv_n;
        dx.extend(gr.iter().zip(yr).map(|(&g, &v)| rstd[i] * (g - mg - v * mgy)));
    }
    dx
}

/// Per-row cos/sin tables of shape `[positions.len(), d_head / 2]`.
pub fn rope_tables<T: Element>(positions: &[usize], d_head: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
            cos.push(c(theta.cos()));
            sin.push(c(theta.sin()));
        }
    }
    (cos, sin)
}

pub fn rope_apply<T: Element>(
    x: &[T],
    t: usize,
    heads: usize,
    d_head: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) -> Vec<T> {
    let half = d_head / 2;
    let d = heads * d_head;
    let mut out = vec![T::zero(); t * d];
    for r in 0..t {
        for h in 0..heads {
            let base = r * d + h * d_head;
            for i in 0..half {
                let (cs, mut sn) = (cos[r * half + i], sin[r * half + i]);
                if inverse {
                    sn = -sn;
                }
                let (a, b) = (x[base + 2 * i], x[base + 2 * i + 1]);
                out[base + 2 * i] = a * cs - b * sn;
                out[base + 2 * i + 1] = a * sn + b * cs;
            }
        }
    }
    out
}
