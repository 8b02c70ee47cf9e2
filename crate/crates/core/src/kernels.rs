//! Raw numeric kernels on row-major slices. No shape checking here; the
//! callers on the tape validate shapes first.

use crate::parallel;

/// Below this many multiply-adds the thread dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row = |i: usize, out: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        parallel::for_each_chunk(&mut c, n, row);
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, out)| row(i, out));
    }
    c
}

/// `c[k×n] = aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out = &mut c[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    if m == 0 || k == 0 {
        return c;
    }
    let row = |i: usize, out: &mut [f64]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, o) in out.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        parallel::for_each_chunk(&mut c, k, row);
    } else {
        c.chunks_mut(k).enumerate().for_each(|(i, out)| row(i, out));
    }
    c
}

/// Geometry of a 2-D convolution over one `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one image into a `(C·k·k) × (H'·W')` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + ii as usize) * g.width..][..g.width];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[oi * ow + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto a `C×H×W` image.
pub fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let cols = g.col_cols();
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols_data[r * cols..(r + 1) * cols];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.height + ii as usize) * g.width..][..g.width];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}
