//! Dense matrix kernels shared by the autodiff ops.
//!
//! Every output element is accumulated in the same order whether or not the
//! `parallel` feature is enabled, so results are bit-identical across the
//! two paths. Rows are the unit of parallel work.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (in multiply-adds) below which the parallel path is not worth it.
pub const PAR_THRESHOLD: usize = 1 << 15;

fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (i, out) in c.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out);
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out)| matmul_row(&a[i * k..(i + 1) * k], b, n, out));
}

pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        return matmul_par(a, b, c, m, k, n);
    }
    matmul_seq(a, b, c, m, k, n)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `c[m×k] = g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    let row = |i: usize, out: &mut [f64]| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in out.iter_mut().enumerate() {
            *o = dot(g_row, &b[p * n..(p + 1) * n]);
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(|(i, out)| row(i, out));
        return;
    }
    c.chunks_mut(k).enumerate().for_each(|(i, out)| row(i, out));
}

/// `c[k×n] = aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // each output row p sums over i in fixed order
    let row = |p: usize, out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *o += av * gv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(p, out)| row(p, out));
        return;
    }
    c.chunks_mut(n).enumerate().for_each(|(p, out)| row(p, out));
}
