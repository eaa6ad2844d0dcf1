//! Raw loops over row-major slices. Shapes are checked by the callers.

use super::Real;

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_tn_acc<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Geometry of a 3×3, stride-1, zero-padded convolution over `[channels, height, width]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    /// For tap `(di, dj)`: output rows, output columns, and the input offsets `(dy, dx)`.
    #[inline]
    fn tap_window(
        &self,
        di: usize,
        dj: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>, isize, isize) {
        let (dy, dx) = (di as isize - 1, dj as isize - 1);
        let rows = (dy.min(0).unsigned_abs())..(self.h as isize - dy.max(0)).max(0) as usize;
        let cols = (dx.min(0).unsigned_abs())..(self.w as isize - dx.max(0)).max(0) as usize;
        (rows, cols, dy, dx)
    }
}

/// Row slices `(output, input)` of one tap over row `i`.
#[inline]
fn shifted(
    i: usize,
    cols: &std::ops::Range<usize>,
    dy: isize,
    dx: isize,
    w: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let y = (i as isize + dy) as usize;
    let out = i * w + cols.start..i * w + cols.end;
    let start = (y * w + cols.start) as isize + dx;
    let inp = start as usize..(start as usize + cols.len());
    (out, inp)
}

pub(crate) fn conv3x3_forward<T: Real>(g: ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.h * g.w;
    let mut out = vec![T::zero(); g.cout * plane];
    for o in 0..g.cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.cin {
            let k = &weight[(o * g.cin + c) * 9..(o * g.cin + c + 1) * 9];
            let in_plane = &x[c * plane..(c + 1) * plane];
            for (t, &kv) in k.iter().enumerate() {
                if kv == T::zero() {
                    continue;
                }
                let (rows, cols, dy, dx) = g.tap_window(t / 3, t % 3);
                for i in rows {
                    let (or, ir) = shifted(i, &cols, dy, dx, g.w);
                    for (acc, &v) in out_plane[or].iter_mut().zip(&in_plane[ir]) {
                        *acc = *acc + kv * v;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)` for upstream gradient `grad`.
pub(crate) fn conv3x3_backward<T: Real>(
    g: ConvGeom,
    x: &[T],
    weight: &[T],
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.h * g.w;
    let mut dx = vec![T::zero(); g.cin * plane];
    let mut dw = vec![T::zero(); g.cout * g.cin * 9];
    let mut db = vec![T::zero(); g.cout];
    for o in 0..g.cout {
        let g_plane = &grad[o * plane..(o + 1) * plane];
        db[o] = g_plane.iter().copied().sum();
        for c in 0..g.cin {
            let base = (o * g.cin + c) * 9;
            let in_plane = &x[c * plane..(c + 1) * plane];
            let dx_plane = &mut dx[c * plane..(c + 1) * plane];
            for t in 0..9 {
                let kv = weight[base + t];
                let (rows, cols, dy, dxo) = g.tap_window(t / 3, t % 3);
                let mut acc = T::zero();
                for i in rows {
                    let (gr, ir) = shifted(i, &cols, dy, dxo, g.w);
                    let g_row = &g_plane[gr];
                    for (&gv, &v) in g_row.iter().zip(&in_plane[ir.clone()]) {
                        acc = acc + gv * v;
                    }
                    for (d, &gv) in dx_plane[ir].iter_mut().zip(g_row) {
                        *d = *d + gv * kv;
                    }
                }
                dw[base + t] = dw[base + t] + acc;
            }
        }
    }
    (dx, dw, db)
}
