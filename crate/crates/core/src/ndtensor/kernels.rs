//! Numeric kernels shared by the tape ops.

/// `c ← alpha·a·b + beta·c` on strided row/column views.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // bounds of the strided views
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a view out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b view out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c view out of bounds");

    if m * n * k <= 2048 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let slot = &mut c[i * rsc + j * csc];
                *slot = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * *slot };
            }
        }
        return;
    }
    // SAFETY: the views were bounds-checked above and `c` does not alias `a`/`b`
    // (it is a distinct `&mut` borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub joints: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }

    /// Output frame range `[t0, t1)` whose input frame `t + shift` is inside the sequence
    /// (stride 1 only).
    fn valid_range(&self, shift: isize) -> (usize, usize) {
        let t = self.t_in as isize;
        let t0 = (-shift).max(0);
        let t1 = (t - shift).min(t);
        if t1 <= t0 {
            (0, 0)
        } else {
            (t0 as usize, t1 as usize)
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let v = g.joints;
    let in_sz = g.c_in * g.t_in * v;
    let out_sz = g.c_out * g.t_out * v;
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        for c in 0..g.c_out {
            ob[c * g.t_out * v..(c + 1) * g.t_out * v].fill(bias[c]);
        }
        if g.stride == 1 {
            let tv = g.t_in * v;
            for tau in 0..g.kernel {
                let shift = tau as isize - g.pad();
                let (t0, t1) = g.valid_range(shift);
                if t0 == t1 {
                    continue;
                }
                let src0 = ((t0 as isize + shift) as usize) * v;
                gemm(
                    g.c_out,
                    g.c_in,
                    (t1 - t0) * v,
                    1.0,
                    &w[tau..],
                    (g.c_in * g.kernel, g.kernel),
                    &xb[src0..],
                    (tv, 1),
                    1.0,
                    &mut ob[t0 * v..],
                    (tv, 1),
                );
            }
        } else {
            for c in 0..g.c_out {
                for t in 0..g.t_out {
                    for ci in 0..g.c_in {
                        for tau in 0..g.kernel {
                            let src = (t * g.stride + tau) as isize - g.pad();
                            if src < 0 || src >= g.t_in as isize {
                                continue;
                            }
                            let wv = w[(c * g.c_in + ci) * g.kernel + tau];
                            let xrow = &xb[(ci * g.t_in + src as usize) * v..][..v];
                            let orow = &mut ob[(c * g.t_out + t) * v..][..v];
                            for (o, xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of the temporal convolution.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let v = g.joints;
    let in_sz = g.c_in * g.t_in * v;
    let out_sz = g.c_out * g.t_out * v;
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let gb = &dout[b * out_sz..(b + 1) * out_sz];
        if let Some(db) = db.as_deref_mut() {
            for (c, slot) in db.iter_mut().enumerate() {
                *slot += gb[c * g.t_out * v..(c + 1) * g.t_out * v].iter().sum::<f64>();
            }
        }
        if g.stride == 1 {
            let tv = g.t_in * v;
            for tau in 0..g.kernel {
                let shift = tau as isize - g.pad();
                let (t0, t1) = g.valid_range(shift);
                if t0 == t1 {
                    continue;
                }
                let cols = (t1 - t0) * v;
                let src0 = ((t0 as isize + shift) as usize) * v;
                if let Some(dx) = dx.as_deref_mut() {
                    let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
                    gemm(
                        g.c_in,
                        g.c_out,
                        cols,
                        1.0,
                        &w[tau..],
                        (g.kernel, g.c_in * g.kernel),
                        &gb[t0 * v..],
                        (tv, 1),
                        1.0,
                        &mut dxb[src0..],
                        (tv, 1),
                    );
                }
                if let Some(dw) = dw.as_deref_mut() {
                    gemm(
                        g.c_out,
                        cols,
                        g.c_in,
                        1.0,
                        &gb[t0 * v..],
                        (tv, 1),
                        &xb[src0..],
                        (1, tv),
                        1.0,
                        &mut dw[tau..],
                        (g.c_in * g.kernel, g.kernel),
                    );
                }
            }
        } else {
            for c in 0..g.c_out {
                for t in 0..g.t_out {
                    let grow = &gb[(c * g.t_out + t) * v..][..v];
                    for ci in 0..g.c_in {
                        for tau in 0..g.kernel {
                            let src = (t * g.stride + tau) as isize - g.pad();
                            if src < 0 || src >= g.t_in as isize {
                                continue;
                            }
                            let widx = (c * g.c_in + ci) * g.kernel + tau;
                            let xoff = (ci * g.t_in + src as usize) * v;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[widx] +=
                                    grow.iter().zip(&xb[xoff..xoff + v]).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let wv = w[widx];
                                let row = &mut dx[b * in_sz + xoff..][..v];
                                for (d, gv) in row.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Above this input `tanh(softplus(x))` is 1 to double precision.
const MISH_LINEAR: f64 = 20.0;

/// `x·tanh(softplus(x))` with one exponential: for `n = eˣ(eˣ + 2)`,
/// `tanh(ln(1 + eˣ)) = n / (n + 2)`.
#[inline]
pub(crate) fn mish(x: f64) -> f64 {
    if x > MISH_LINEAR {
        return x;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

/// d/dx [x·tanh(softplus(x))] = tanh(sp) + x·sech²(sp)·σ(x)
#[inline]
pub(crate) fn mish_grad(x: f64) -> f64 {
    if x > MISH_LINEAR {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let t = n / (n + 2.0);
    let sech2 = 4.0 * (n + 1.0) / ((n + 2.0) * (n + 2.0));
    t + x * sech2 * e / (1.0 + e)
}
