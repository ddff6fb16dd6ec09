//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Row-major matrix view: data plus (row stride, column stride).
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the views were built from slices whose lengths were checked
    // against rows × cols, and every stride combination used here stays
    // inside those slices. `c` has exactly m × n elements with row stride n.
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
