//! Strided 2D cross-correlation over NCHW batches.
//!
//! Each kernel tap is handled as one matrix product over the output positions
//! where that tap lands inside the input, so zero padding is never
//! materialized and no work is spent on it.

use std::ops::Range;

use crate::gemm::{gemm, Layout};

/// Output length and `(low, high)` zero padding for the "same-ceil" rule:
/// the output has `ceil(len / stride)` positions and the total padding
/// `max(0, (out - 1)·stride + kernel - len)` is split with the smaller half
/// first.
pub fn same_ceil_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    let low = total / 2;
    (out, low, total - low)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn same_ceil(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let (out_h, pad_top, _) = same_ceil_padding(in_h, kernel, stride);
        let (out_w, pad_left, _) = same_ceil_padding(in_w, kernel, stride);
        Self {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        }
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn taps(&self) -> impl Iterator<Item = Tap> + '_ {
        let k = self.kernel;
        (0..k * k).filter_map(move |t| {
            let (ki, kj) = (t / k, t % k);
            let rows = valid_outputs(ki, self.stride, self.pad_top, self.in_h, self.out_h);
            let cols = valid_outputs(kj, self.stride, self.pad_left, self.in_w, self.out_w);
            (!rows.is_empty() && !cols.is_empty()).then_some(Tap { ki, kj, rows, cols })
        })
    }

    /// Kernel slice for one tap as a `[out_channels, in_channels]` matrix.
    fn tap_weights(&self, tap: &Tap) -> Layout {
        let kk = self.kernel * self.kernel;
        Layout {
            offset: tap.ki * self.kernel + tap.kj,
            rows: self.out_channels,
            cols: self.in_channels,
            row_stride: self.in_channels * kk,
            col_stride: kk,
        }
    }
}

struct Tap {
    ki: usize,
    kj: usize,
    rows: Range<usize>,
    cols: Range<usize>,
}

impl Tap {
    fn positions(&self, batch: usize) -> usize {
        batch * self.rows.len() * self.cols.len()
    }
}

/// Output indices `o` with `0 <= o·stride + tap - pad < in_len`.
fn valid_outputs(tap: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> Range<usize> {
    let lo = pad.saturating_sub(tap).div_ceil(stride);
    if in_len + pad < tap + 1 {
        return 0..0;
    }
    let hi = ((in_len - 1 + pad - tap) / stride + 1).min(out_len);
    lo..hi.max(lo)
}

/// Copies `src[b, c, tap-mapped position]` into a `[channels, positions]` matrix.
fn gather_input(g: &ConvGeometry, tap: &Tap, src: &[f64], dst: &mut Vec<f64>) {
    let m = tap.positions(g.batch);
    dst.clear();
    dst.resize(g.in_channels * m, 0.0);
    for c in 0..g.in_channels {
        let mut p = c * m;
        for b in 0..g.batch {
            let plane = (b * g.in_channels + c) * g.in_h * g.in_w;
            for oi in tap.rows.clone() {
                let row = plane + (oi * g.stride + tap.ki - g.pad_top) * g.in_w;
                for oj in tap.cols.clone() {
                    dst[p] = src[row + oj * g.stride + tap.kj - g.pad_left];
                    p += 1;
                }
            }
        }
    }
}

fn scatter_input(g: &ConvGeometry, tap: &Tap, src: &[f64], dst: &mut [f64]) {
    let m = tap.positions(g.batch);
    for c in 0..g.in_channels {
        let mut p = c * m;
        for b in 0..g.batch {
            let plane = (b * g.in_channels + c) * g.in_h * g.in_w;
            for oi in tap.rows.clone() {
                let row = plane + (oi * g.stride + tap.ki - g.pad_top) * g.in_w;
                for oj in tap.cols.clone() {
                    dst[row + oj * g.stride + tap.kj - g.pad_left] += src[p];
                    p += 1;
                }
            }
        }
    }
}

fn gather_output(g: &ConvGeometry, tap: &Tap, src: &[f64], dst: &mut Vec<f64>) {
    let m = tap.positions(g.batch);
    dst.clear();
    dst.resize(g.out_channels * m, 0.0);
    for c in 0..g.out_channels {
        let mut p = c * m;
        for b in 0..g.batch {
            let plane = (b * g.out_channels + c) * g.out_h * g.out_w;
            for oi in tap.rows.clone() {
                let row = plane + oi * g.out_w;
                let n = tap.cols.len();
                dst[p..p + n].copy_from_slice(&src[row + tap.cols.start..row + tap.cols.end]);
                p += n;
            }
        }
    }
}

fn scatter_output(g: &ConvGeometry, tap: &Tap, src: &[f64], dst: &mut [f64]) {
    let m = tap.positions(g.batch);
    for c in 0..g.out_channels {
        let mut p = c * m;
        for b in 0..g.batch {
            let plane = (b * g.out_channels + c) * g.out_h * g.out_w;
            for oi in tap.rows.clone() {
                let row = plane + oi * g.out_w;
                for (d, s) in dst[row + tap.cols.start..row + tap.cols.end].iter_mut().zip(&src[p..]) {
                    *d += s;
                }
                p += tap.cols.len();
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.output_len()];
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias[i % g.out_channels]);
        }
    }
    let (mut cols, mut prod) = (Vec::new(), Vec::new());
    for tap in g.taps() {
        let m = tap.positions(g.batch);
        gather_input(g, &tap, input, &mut cols);
        prod.clear();
        prod.resize(g.out_channels * m, 0.0);
        gemm(
            1.0,
            kernel,
            g.tap_weights(&tap),
            &cols,
            Layout::row_major(g.in_channels, m),
            0.0,
            &mut prod,
            Layout::row_major(g.out_channels, m),
        );
        scatter_output(g, &tap, &prod, &mut out);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let [need_input, need_kernel, need_bias] = need;
    let mut d_input = need_input.then(|| vec![0.0; g.input_len()]);
    let mut d_kernel = need_kernel.then(|| vec![0.0; g.kernel_len()]);
    let d_bias = need_bias.then(|| {
        let plane = g.out_h * g.out_w;
        let mut db = vec![0.0; g.out_channels];
        for (i, chunk) in grad_out.chunks(plane).enumerate() {
            db[i % g.out_channels] += chunk.iter().sum::<f64>();
        }
        db
    });
    if need_input || need_kernel {
        let (mut dy, mut cols) = (Vec::new(), Vec::new());
        for tap in g.taps() {
            let m = tap.positions(g.batch);
            gather_output(g, &tap, grad_out, &mut dy);
            let dy_layout = Layout::row_major(g.out_channels, m);
            if let Some(dk) = d_kernel.as_mut() {
                gather_input(g, &tap, input, &mut cols);
                gemm(
                    1.0,
                    &dy,
                    dy_layout,
                    &cols,
                    Layout::row_major(g.in_channels, m).t(),
                    1.0,
                    dk,
                    g.tap_weights(&tap),
                );
            }
            if let Some(dx) = d_input.as_mut() {
                cols.clear();
                cols.resize(g.in_channels * m, 0.0);
                gemm(
                    1.0,
                    kernel,
                    g.tap_weights(&tap).t(),
                    &dy,
                    dy_layout,
                    0.0,
                    &mut cols,
                    Layout::row_major(g.in_channels, m),
                );
                scatter_input(g, &tap, &cols, dx);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
