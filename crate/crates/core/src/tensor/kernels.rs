//! Raw-slice numeric kernels used by the tape.

use crate::parallel::Exec;

/// Below this many multiply-adds a GEMM stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
pub fn gemm(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let exec = if m * k * n < PAR_THRESHOLD {
        Exec::Sequential
    } else {
        exec
    };
    exec.for_each_row(&mut c, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Valid dilated cross-correlation.
///
/// `x` is `rows × len`, `w` is `filters × width`; the result is
/// `rows × filters × out_len` with `out[r, f, j] = Σ_p x[r, j + dilation·p] · w[f, p]`.
pub fn conv1d(
    exec: Exec,
    x: &[f64],
    rows: usize,
    len: usize,
    w: &[f64],
    filters: usize,
    width: usize,
    dilation: usize,
) -> Vec<f64> {
    let out_len = len - dilation * (width - 1);
    let mut out = vec![0.0; rows * filters * out_len];
    let exec = if rows * filters * out_len * width < PAR_THRESHOLD {
        Exec::Sequential
    } else {
        exec
    };
    exec.for_each_row(&mut out, filters * out_len, |r, block| {
        let xr = &x[r * len..(r + 1) * len];
        for f in 0..filters {
            let wf = &w[f * width..(f + 1) * width];
            let o = &mut block[f * out_len..(f + 1) * out_len];
            for (j, ov) in o.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (p, &wv) in wf.iter().enumerate() {
                    acc += xr[j + dilation * p] * wv;
                }
                *ov = acc;
            }
        }
    });
    out
}

/// Gradients of [`conv1d`] with respect to its input and its filters.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    grad: &[f64],
    x: &[f64],
    rows: usize,
    len: usize,
    w: &[f64],
    filters: usize,
    width: usize,
    dilation: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let out_len = len - dilation * (width - 1);
    let mut dx = want_x.then(|| vec![0.0; rows * len]);
    let mut dw = want_w.then(|| vec![0.0; filters * width]);
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        for f in 0..filters {
            let g = &grad[(r * filters + f) * out_len..(r * filters + f + 1) * out_len];
            let wf = &w[f * width..(f + 1) * width];
            for (j, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for p in 0..width {
                    let t = j + dilation * p;
                    if let Some(dx) = dx.as_mut() {
                        dx[r * len + t] += gv * wf[p];
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[f * width + p] += gv * xr[t];
                    }
                }
            }
        }
    }
    (dx, dw)
}
