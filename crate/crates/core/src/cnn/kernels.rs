//! Batched layer kernels. Activations are flat `f64` buffers holding `n`
//! examples back to back, each laid out channel-major (`[c][h][w]`).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn size(self) -> usize {
        self.c * self.h * self.w
    }
}

/// `C = A B + beta C` for row-major `C` (`m x n`); `A` and `B` are described
/// by row/column strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], s: Shape, kh: usize, kw: usize, cols: &mut [f64]) {
    let (ho, wo) = (s.h - kh + 1, s.w - kw + 1);
    let p = ho * wo;
    for ci in 0..s.c {
        for dy in 0..kh {
            for dx in 0..kw {
                let k = (ci * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let src = ci * s.h * s.w + (oy + dy) * s.w + dx;
                    cols[k * p + oy * wo..k * p + oy * wo + wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], s: Shape, kh: usize, kw: usize, dx_out: &mut [f64]) {
    let (ho, wo) = (s.h - kh + 1, s.w - kw + 1);
    let p = ho * wo;
    for ci in 0..s.c {
        for dy in 0..kh {
            for dx in 0..kw {
                let k = (ci * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let dst = ci * s.h * s.w + (oy + dy) * s.w + dx;
                    let row = &cols[k * p + oy * wo..k * p + oy * wo + wo];
                    for (d, v) in dx_out[dst..dst + wo].iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Valid, stride-1 convolution. `w` is `[cout][cin][kh][kw]`.
pub(crate) fn conv_forward(x: &[f64], n: usize, s: Shape, w: &[f64], b: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let cout = b.len();
    let p = (s.h - kh + 1) * (s.w - kw + 1);
    let k = s.c * kh * kw;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; n * cout * p];
    for i in 0..n {
        im2col(&x[i * s.size()..(i + 1) * s.size()], s, kh, kw, &mut cols);
        let o = &mut out[i * cout * p..(i + 1) * cout * p];
        gemm(cout, k, p, w, k, 1, &cols, p, 1, o, 0.0);
        for (co, bias) in b.iter().enumerate() {
            for v in &mut o[co * p..(co + 1) * p] {
                *v += bias;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grads` (if given) and returns the
/// input gradient (if requested).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    n: usize,
    s: Shape,
    w: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    dout: &[f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
    need_dx: bool,
) -> Option<Vec<f64>> {
    let p = (s.h - kh + 1) * (s.w - kw + 1);
    let k = s.c * kh * kw;
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    let mut dx = need_dx.then(|| vec![0.0; n * s.size()]);
    for i in 0..n {
        let d = &dout[i * cout * p..(i + 1) * cout * p];
        if let Some((gw, gb)) = grads.as_mut() {
            im2col(&x[i * s.size()..(i + 1) * s.size()], s, kh, kw, &mut cols);
            gemm(cout, p, k, d, p, 1, &cols, 1, p, gw, 1.0);
            for co in 0..cout {
                gb[co] += d[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(k, cout, p, w, 1, k, d, p, 1, &mut dcols, 0.0);
            col2im_add(&dcols, s, kh, kw, &mut dx[i * s.size()..(i + 1) * s.size()]);
        }
    }
    dx
}

/// Output shape of the stride-1 max pool: the window is clipped at the
/// bottom edge so the height is kept, and slides without padding along the
/// width.
pub(crate) fn pool_shape(s: Shape, pw: usize) -> Shape {
    Shape { c: s.c, h: s.h, w: s.w - pw + 1 }
}

/// Returns pooled values and, per output, the flat in-example index of the
/// winning input. Ties go to the first maximum in row-major window order.
pub(crate) fn pool_forward(x: &[f64], n: usize, s: Shape, ph: usize, pw: usize) -> (Vec<f64>, Vec<u32>) {
    let os = pool_shape(s, pw);
    let mut out = Vec::with_capacity(n * os.size());
    let mut arg = Vec::with_capacity(n * os.size());
    for i in 0..n {
        let ex = &x[i * s.size()..(i + 1) * s.size()];
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for y in oy..(oy + ph).min(s.h) {
                        for xx in ox..ox + pw {
                            let idx = (c * s.h + y) * s.w + xx;
                            if ex[idx] > best {
                                best = ex[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool_backward(arg: &[u32], n: usize, s: Shape, dout: &[f64]) -> Vec<f64> {
    let per_out = arg.len() / n.max(1);
    let mut dx = vec![0.0; n * s.size()];
    for i in 0..n {
        let base = i * s.size();
        for j in 0..per_out {
            dx[base + arg[i * per_out + j] as usize] += dout[i * per_out + j];
        }
    }
    dx
}

/// `y = x W^T + b` with `w` stored `[units][fan_in]`.
pub(crate) fn dense_forward(x: &[f64], n: usize, fan_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let units = b.len();
    let mut out = vec![0.0; n * units];
    gemm(n, fan_in, units, x, fan_in, 1, w, 1, fan_in, &mut out, 0.0);
    for row in out.chunks_exact_mut(units) {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    x: &[f64],
    n: usize,
    fan_in: usize,
    w: &[f64],
    units: usize,
    dout: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    need_dx: bool,
) -> Option<Vec<f64>> {
    if let Some((gw, gb)) = grads {
        gemm(units, n, fan_in, dout, 1, units, x, fan_in, 1, gw, 1.0);
        for row in dout.chunks_exact(units) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![0.0; n * fan_in];
        gemm(n, units, fan_in, dout, units, 1, w, fan_in, 1, &mut dx, 0.0);
        dx
    })
}
