//! Raw numeric kernels behind the tape operations. Activations are NHWC.

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`, both
/// row-major; `ta`/`tb` read the operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above cover every strided access.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Same-padded patch matrix of one sample: `(h w) x (kh kw cin)`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let k = g.k();
    for y in 0..g.h {
        for x0 in 0..g.w {
            let row = &mut cols[(y * g.w + x0) * k..(y * g.w + x0 + 1) * k];
            for ki in 0..g.kh {
                let yy = y as isize + ki as isize - ph as isize;
                for kj in 0..g.kw {
                    let xx = x0 as isize + kj as isize - pw as isize;
                    let dst = &mut row[(ki * g.kw + kj) * g.cin..(ki * g.kw + kj + 1) * g.cin];
                    if yy < 0 || xx < 0 || yy >= g.h as isize || xx >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let s = (yy as usize * g.w + xx as usize) * g.cin;
                        dst.copy_from_slice(&x[s..s + g.cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the sample gradient.
pub(crate) fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let k = g.k();
    for y in 0..g.h {
        for x0 in 0..g.w {
            let row = &cols[(y * g.w + x0) * k..(y * g.w + x0 + 1) * k];
            for ki in 0..g.kh {
                let yy = y as isize + ki as isize - ph as isize;
                if yy < 0 || yy >= g.h as isize {
                    continue;
                }
                for kj in 0..g.kw {
                    let xx = x0 as isize + kj as isize - pw as isize;
                    if xx < 0 || xx >= g.w as isize {
                        continue;
                    }
                    let s = (yy as usize * g.w + xx as usize) * g.cin;
                    let src = &row[(ki * g.kw + kj) * g.cin..(ki * g.kw + kj + 1) * g.cin];
                    for (d, v) in dx[s..s + g.cin].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with same padding. Returns the pooled values and, per
/// output entry, the flat input index of the first maximum in row-major
/// window order.
pub(crate) fn maxpool2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; n * ho * wo * c];
    let mut arg = vec![0usize; out.len()];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let o = ((b * ho + oy) * wo + ox) * c + ch;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y >= h || xx >= w {
                            continue;
                        }
                        let i = ((b * h + y) * w + xx) * c + ch;
                        if x[i] > out[o] {
                            out[o] = x[i];
                            arg[o] = i;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let s = ((b * h + y / 2) * w + xx / 2) * c;
                let d = ((b * ho + y) * wo + xx) * c;
                out[d..d + c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &[f64], n: usize, h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let (ho, wo) = (2 * h, 2 * w);
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let s = ((b * h + y / 2) * w + xx / 2) * c;
                let d = ((b * ho + y) * wo + xx) * c;
                for ch in 0..c {
                    dx[s + ch] += dout[d + ch];
                }
            }
        }
    }
}

/// `out[.., i, j, ..] = x[.., i + di, j + dj, ..]`, zero outside the grid
/// (`wrap = false`) or periodic (`wrap = true`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn translate(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    di: isize,
    dj: isize,
    wrap: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..h {
            let si = i as isize + di;
            let si = if wrap {
                si.rem_euclid(h as isize)
            } else if si < 0 || si >= h as isize {
                continue;
            } else {
                si
            } as usize;
            for j in 0..w {
                let sj = j as isize + dj;
                let sj = if wrap {
                    sj.rem_euclid(w as isize)
                } else if sj < 0 || sj >= w as isize {
                    continue;
                } else {
                    sj
                } as usize;
                let d = ((b * h + i) * w + j) * c;
                let s = ((b * h + si) * w + sj) * c;
                out[d..d + c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    out
}
