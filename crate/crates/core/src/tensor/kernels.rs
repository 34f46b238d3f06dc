//! Dense kernels shared by the graph ops. Everything here is single-threaded
//! and has a fixed summation order, so results are bit-reproducible.

/// Row-major matrix view: `rows x cols` with explicit strides so transposes
/// are free.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were built from slices at least rows*cols long with
    // matching strides, and `c` holds m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded sliding window over a `h x w` image
/// with `gh x gw` window positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub gh: usize,
    pub gw: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.gh * self.gw
    }

    #[inline]
    fn source(&self, oy: usize, kr: usize) -> Option<usize> {
        let y = (oy * self.stride + kr) as isize - self.pad as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    #[inline]
    fn source_x(&self, ox: usize, kc: usize) -> Option<usize> {
        let x = (ox * self.stride + kc) as isize - self.pad as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }
}

/// Unfold `img` (`channels x h x w`) into `cols` (`channels*k*k x gh*gw`).
pub(crate) fn im2col(img: &[f64], win: &Window, cols: &mut [f64]) {
    let ncols = win.col_cols();
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &img[c * win.h * win.w..(c + 1) * win.h * win.w];
        for kr in 0..win.k {
            for kc in 0..win.k {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.gh {
                    let line = &mut dst[oy * win.gw..(oy + 1) * win.gw];
                    match win.source(oy, kr) {
                        None => line.fill(0.0),
                        Some(y) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = win.source_x(ox, kc).map_or(0.0, |x| plane[y * win.w + x]);
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `img`.
pub(crate) fn col2im(cols: &[f64], win: &Window, img: &mut [f64]) {
    let ncols = win.col_cols();
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &mut img[c * win.h * win.w..(c + 1) * win.h * win.w];
        for kr in 0..win.k {
            for kc in 0..win.k {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.gh {
                    if let Some(y) = win.source(oy, kr) {
                        for ox in 0..win.gw {
                            if let Some(x) = win.source_x(ox, kc) {
                                plane[y * win.w + x] += src[oy * win.gw + ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let mut d = [0.0; 4];
        // a * a^T
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&a, 2, 3).t(), &mut d, 0.0);
        assert_eq!(d, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let win = Window { channels: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1, gh: 3, gw: 2 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..win.col_rows() * win.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &win, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
