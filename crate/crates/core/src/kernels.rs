//! Slice-level numeric kernels shared by the autograd ops.

/// `c = a · b (+ c if accumulate)` for row-major `a` (`m×k`, or `k×m` when
/// `trans_a`) and `b` (`k×n`, or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are sized m*k, k*n and m*n as asserted above and
    // the strides describe exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a temporal convolution over `[N, C_in, T, V]` with kernel `[C_out, C_in, K, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub v: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k
    }

    fn col_cols(&self) -> usize {
        self.t_out * self.v
    }
}

/// Unfolds one sample `[C_in, T, V]` into `[C_in*K, T_out*V]`.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (tv_out, v) = (g.col_cols(), g.v);
    for ci in 0..g.c_in {
        let xc = &x[ci * g.t_in * v..(ci + 1) * g.t_in * v];
        for kk in 0..g.k {
            let row = &mut col[(ci * g.k + kk) * tv_out..(ci * g.k + kk + 1) * tv_out];
            for to in 0..g.t_out {
                let ti = (to * g.stride + kk) as isize - g.pad as isize;
                let dst = &mut row[to * v..(to + 1) * v];
                if ti < 0 || ti as usize >= g.t_in {
                    dst.fill(0.0);
                } else {
                    let ti = ti as usize;
                    dst.copy_from_slice(&xc[ti * v..(ti + 1) * v]);
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (tv_out, v) = (g.col_cols(), g.v);
    for ci in 0..g.c_in {
        let dxc = &mut dx[ci * g.t_in * v..(ci + 1) * g.t_in * v];
        for kk in 0..g.k {
            let row = &col[(ci * g.k + kk) * tv_out..(ci * g.k + kk + 1) * tv_out];
            for to in 0..g.t_out {
                let ti = (to * g.stride + kk) as isize - g.pad as isize;
                if ti < 0 || ti as usize >= g.t_in {
                    continue;
                }
                let ti = ti as usize;
                for (d, s) in dxc[ti * v..(ti + 1) * v].iter_mut().zip(&row[to * v..(to + 1) * v]) {
                    *d += s;
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let in_len = g.c_in * g.t_in * g.v;
    let out_len = g.c_out * g.col_cols();
    let mut out = vec![0.0; g.n * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ys = &mut out[s * out_len..(s + 1) * out_len];
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        gemm(g.c_out, g.col_rows(), g.col_cols(), w, false, src, false, ys, false);
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.c_in * g.t_in * g.v;
    let out_len = g.c_out * g.col_cols();
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for s in 0..g.n {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let src: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm(g.c_out, g.col_cols(), g.col_rows(), dys, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(g.c_in, g.c_out, g.col_cols(), w, true, dys, false, dxs, true);
            } else {
                gemm(g.col_rows(), g.c_out, g.col_cols(), w, true, dys, false, &mut col, false);
                col2im_add(g, &col, dxs);
            }
        }
    }
    (dx, dw)
}

/// Per-axis strides into a tensor of `small` shape when it is broadcast to `full`.
pub(crate) fn broadcast_strides(small: &[usize], full: &[usize]) -> Vec<usize> {
    debug_assert_eq!(small.len(), full.len());
    let mut strides = vec![0; full.len()];
    let mut acc = 1;
    for ax in (0..full.len()).rev() {
        strides[ax] = if small[ax] == 1 && full[ax] != 1 { 0 } else { acc };
        acc *= small[ax];
    }
    strides
}

/// Walks every index of `full` in row-major order, passing the linear index and
/// the matching offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    full: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = full.iter().product();
    let nd = full.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < full[ax] {
                break;
            }
            oa -= sa[ax] * full[ax];
            ob -= sb[ax] * full[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped `full`) down to `small` along broadcast axes.
pub(crate) fn reduce_to(g: &[f64], full: &[usize], small: &[usize]) -> Vec<f64> {
    if full == small {
        return g.to_vec();
    }
    let n: usize = small.iter().product();
    let mut out = vec![0.0; n];
    let s = broadcast_strides(small, full);
    for_each_broadcast(full, &s, &s, |i, o, _| out[o] += g[i]);
    out
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(3, 4, 5, &a, &b);
        let at = transpose(3, 4, &a);
        let bt = transpose(4, 5, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; 15];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(3, 4, 5, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_reduce_sums_singleton_axes() {
        let g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to(&g, &[2, 3], &[1, 3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        assert_eq!(reduce_to(&g, &[2, 3], &[1, 1]), vec![21.0]);
    }
}
