use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// Strided 2D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

fn view<'a>(data: &'a [f64], l: Layout) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(
        (l.rows, l.cols).strides((l.row_stride, l.col_stride)),
        &data[l.offset..],
    )
    .expect("gemm operand layout out of bounds")
}

/// `c ← alpha·a·b + beta·c`
pub(crate) fn gemm(alpha: f64, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64], lc: Layout) {
    debug_assert_eq!(la.cols, lb.rows);
    debug_assert_eq!((la.rows, lb.cols), (lc.rows, lc.cols));
    let a = view(a, la);
    let b = view(b, lb);
    let mut c = ArrayViewMut2::from_shape(
        (lc.rows, lc.cols).strides((lc.row_stride, lc.col_stride)),
        &mut c[lc.offset..],
    )
    .expect("gemm output layout out of bounds");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}
