//! Dense kernels behind the graph ops: GEMM-backed convolution and the
//! fixed resampling operators.

use super::Tensor;

/// `c = a·b + beta·c` for row-major operands, with optional transposition of
/// `a` (stored `k×m`) and `b` (stored `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major extents whose lengths were checked.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub k: usize,
    pub dilation: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k / 2)) as isize
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let hw = h * w;
    let pad = g.pad();
    let d = g.dilation as isize;
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = ky as isize * d - pad;
                let ox = kx as isize * d - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, v) in line.iter_mut().enumerate() {
                        let sx = xo as isize + ox;
                        *v = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let hw = h * w;
    let pad = g.pad();
    let d = g.dilation as isize;
    for c in 0..g.cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = ky as isize * d - pad;
                let ox = kx as isize * d - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &src[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, v) in line.iter().enumerate() {
                        let sx = xo as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let g = ConvGeom {
        cin,
        k,
        dilation,
        h,
        w,
    };
    let hw = h * w;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut cols = if k == 1 {
        Vec::new()
    } else {
        vec![0.0; g.rows() * hw]
    };
    for b in 0..n {
        let xs = x.sample(b);
        let dst = &mut out.data_mut()[b * cout * hw..(b + 1) * cout * hw];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if k == 1 {
            gemm(cout, cin, hw, weight.data(), false, xs, false, beta, dst);
        } else {
            im2col(xs, &g, &mut cols);
            gemm(cout, g.rows(), hw, weight.data(), false, &cols, false, beta, dst);
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dilation: usize,
    grad: &Tensor,
    want: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let g = ConvGeom {
        cin,
        k,
        dilation,
        h,
        w,
    };
    let hw = h * w;
    let rows = g.rows();
    let mut dx = want[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = want[1].then(|| Tensor::zeros(weight.shape()));
    let db = want[2].then(|| {
        let mut db = Tensor::zeros([1, cout, 1, 1]);
        for b in 0..n {
            for co in 0..cout {
                let s: f64 = grad.sample(b)[co * hw..(co + 1) * hw].iter().sum();
                db.data_mut()[co] += s;
            }
        }
        db
    });
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    for b in 0..n {
        let gs = grad.sample(b);
        if let Some(dw) = dw.as_mut() {
            if k == 1 {
                gemm(cout, hw, cin, gs, false, x.sample(b), true, 1.0, dw.data_mut());
            } else {
                im2col(x.sample(b), &g, &mut cols);
                gemm(cout, hw, rows, gs, false, &cols, true, 1.0, dw.data_mut());
            }
        }
        if let Some(dx) = dx.as_mut() {
            let per = cin * hw;
            let dst = &mut dx.data_mut()[b * per..(b + 1) * per];
            if k == 1 {
                gemm(cin, cout, hw, weight.data(), true, gs, false, 1.0, dst);
            } else {
                gemm(rows, cout, hw, weight.data(), true, gs, false, 0.0, &mut cols);
                col2im(&cols, &g, dst);
            }
        }
    }
    (dx, dw, db)
}

/// One-dimensional correlation along height (`vertical`) or width, with zero
/// padding and a single filter shared by every channel.
pub(crate) fn shared_conv1d_forward(x: &Tensor, taps: &[f64], vertical: bool) -> Tensor {
    let [n, c, h, w] = x.shape();
    let r = (taps.len() / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xi in 0..w {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let (sy, sx) = if vertical {
                        (y as isize + off, xi as isize)
                    } else {
                        (y as isize, xi as isize + off)
                    };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += wt * src[base + sy as usize * w + sx as usize];
                    }
                }
                dst[base + y * w + xi] = acc;
            }
        }
    }
    out
}

pub(crate) fn shared_conv1d_backward(
    x: &Tensor,
    taps: &[f64],
    vertical: bool,
    grad: &Tensor,
) -> (Tensor, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let r = (taps.len() / 2) as isize;
    let mut dx = Tensor::zeros(x.shape());
    let mut dtaps = vec![0.0; taps.len()];
    let src = x.data();
    let g = grad.data();
    let dxd = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xi in 0..w {
                let gv = g[base + y * w + xi];
                if gv == 0.0 {
                    continue;
                }
                for (t, &wt) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let (sy, sx) = if vertical {
                        (y as isize + off, xi as isize)
                    } else {
                        (y as isize, xi as isize + off)
                    };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        let si = base + sy as usize * w + sx as usize;
                        dxd[si] += wt * gv;
                        dtaps[t] += src[si] * gv;
                    }
                }
            }
        }
    }
    (dx, dtaps)
}

pub(crate) fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let sb = plane * h * w;
        let db = plane * oh * ow;
        for y in 0..oh {
            for xi in 0..ow {
                let a = sb + 2 * y * w + 2 * xi;
                dst[db + y * ow + xi] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(in_shape);
    let g = grad.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let sb = plane * h * w;
        let gb = plane * oh * ow;
        for y in 0..oh {
            for xi in 0..ow {
                let v = 0.25 * g[gb + y * ow + xi];
                let a = sb + 2 * y * w + 2 * xi;
                d[a] += v;
                d[a + 1] += v;
                d[a + w] += v;
                d[a + w + 1] += v;
            }
        }
    }
    dx
}

/// Source taps for ×2 bilinear upsampling with half-pixel centers and edge
/// clamping: output `o` reads `(i0, i1, frac)`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    let mut rows = vec![0.0; h * ow];
    for plane in 0..n * c {
        let sb = plane * h * w;
        for y in 0..h {
            for (xo, &(x0, x1, f)) in tx.iter().enumerate() {
                rows[y * ow + xo] =
                    (1.0 - f) * src[sb + y * w + x0] + f * src[sb + y * w + x1];
            }
        }
        let db = plane * oh * ow;
        for (yo, &(y0, y1, f)) in ty.iter().enumerate() {
            for xo in 0..ow {
                dst[db + yo * ow + xo] = (1.0 - f) * rows[y0 * ow + xo] + f * rows[y1 * ow + xo];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Tensor::zeros(in_shape);
    let g = grad.data();
    let d = dx.data_mut();
    let mut rows = vec![0.0; h * ow];
    for plane in 0..n * c {
        rows.fill(0.0);
        let gb = plane * oh * ow;
        for (yo, &(y0, y1, f)) in ty.iter().enumerate() {
            for xo in 0..ow {
                let v = g[gb + yo * ow + xo];
                rows[y0 * ow + xo] += (1.0 - f) * v;
                rows[y1 * ow + xo] += f * v;
            }
        }
        let db = plane * h * w;
        for y in 0..h {
            for (xo, &(x0, x1, f)) in tx.iter().enumerate() {
                let v = rows[y * ow + xo];
                d[db + y * w + x0] += (1.0 - f) * v;
                d[db + y * w + x1] += f * v;
            }
        }
    }
    dx
}
