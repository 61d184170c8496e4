//! Multilayer dense representation: a voxel grid cut into `k` equal
//! segments along each axis, each segment collapsed to a 2D count image.
//!
//! Sequence order is the `k` z-segments, then the `k` x-segments, then the
//! `k` y-segments, each in ascending position. Segment `i` covers the
//! half-open range `[i·n, (i+1)·n)` with `n = side / k`. Cell coordinates:
//! z-slices are indexed `(x, y)`, x-slices `(y, z)`, y-slices `(x, z)`.

use std::fmt::{self, Write as _};

use mdrnet_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Z,
    X,
    Y,
}

impl Axis {
    pub const ORDER: [Axis; 3] = [Axis::Z, Axis::X, Axis::Y];

    pub fn letter(self) -> char {
        match self {
            Axis::Z => 'z',
            Axis::X => 'x',
            Axis::Y => 'y',
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Divisors of `side`, the admissible slice counts.
pub fn valid_ks(side: usize) -> Vec<usize> {
    (1..=side).filter(|k| side % k == 0).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MdrSequence {
    k: usize,
    n: usize,
    side: usize,
    /// `3k` row-major `side × side` slices, concatenated.
    cells: Vec<u32>,
}

impl MdrSequence {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Segment thickness.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        3 * self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slice(&self, index: usize) -> &[u32] {
        let area = self.side * self.side;
        &self.cells[index * area..(index + 1) * area]
    }

    pub fn cell(&self, index: usize, row: usize, col: usize) -> u32 {
        self.slice(index)[row * self.side + col]
    }

    /// Axis and segment position of sequence element `index`.
    pub fn slice_axis(&self, index: usize) -> (Axis, usize) {
        (Axis::ORDER[index / self.k], index % self.k)
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }
}

pub fn compute_mdr(grid: &VoxelGrid, k: usize) -> Result<MdrSequence> {
    let side = grid.cubic_side().ok_or(CoreError::NonCubic(grid.dims()))?;
    if k == 0 || side % k != 0 {
        return Err(CoreError::InvalidK {
            k,
            dim: side,
            valid: valid_ks(side),
        });
    }
    let n = side / k;
    let area = side * side;
    let mut cells = vec![0u32; 3 * k * area];
    grid.for_each_occupied(|x, y, z| {
        cells[(z / n) * area + x * side + y] += 1;
        cells[(k + x / n) * area + y * side + z] += 1;
        cells[(2 * k + y / n) * area + x * side + z] += 1;
    });
    Ok(MdrSequence { k, n, side, cells })
}

/// MDR scaled to `[0, 1]` by the segment thickness.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMdr {
    k: usize,
    n: usize,
    side: usize,
    cells: Vec<f64>,
}

impl NormalizedMdr {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        3 * self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slice(&self, index: usize) -> &[f64] {
        let area = self.side * self.side;
        &self.cells[index * area..(index + 1) * area]
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Builds a normalized sequence from raw values, mainly for tests and
    /// downsized networks.
    pub fn from_cells(slices: usize, side: usize, cells: Vec<f64>) -> Result<Self> {
        if slices == 0 || slices % 3 != 0 || cells.len() != slices * side * side {
            return Err(CoreError::Mismatch(format!(
                "{} cells cannot form {slices} slices of {side}×{side}",
                cells.len()
            )));
        }
        Ok(Self {
            k: slices / 3,
            n: 1,
            side,
            cells,
        })
    }

    /// `[3k, 1, side, side]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 1, self.side, self.side], self.cells.clone()).expect("consistent MDR shape")
    }
}

pub fn normalize_mdr(seq: &MdrSequence) -> NormalizedMdr {
    let scale = seq.n as f64;
    NormalizedMdr {
        k: seq.k,
        n: seq.n,
        side: seq.side,
        cells: seq.cells.iter().map(|&c| c as f64 / scale).collect(),
    }
}

/// Binary PGM of one slice, pixel = round(255·cell/n).
pub fn export_slice_pgm(seq: &MdrSequence, index: usize) -> Result<Vec<u8>> {
    if index >= seq.len() {
        return Err(CoreError::SliceIndex {
            index,
            count: seq.len(),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", seq.side, seq.side).into_bytes();
    let n = seq.n as f64;
    out.extend(seq.slice(index).iter().map(|&c| (255.0 * c as f64 / n).round() as u8));
    Ok(out)
}

/// Text export: header `MDR k=<k> dim=<side>` then one line of `side²`
/// space-separated integers per slice.
pub fn format_mdr(seq: &MdrSequence) -> String {
    let mut out = format!("MDR k={} dim={}\n", seq.k, seq.side);
    for i in 0..seq.len() {
        let mut first = true;
        for c in seq.slice(i) {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn header_value(word: Option<&str>, key: &str) -> Result<usize> {
    word.and_then(|w| w.strip_prefix(key))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CoreError::format("MDR file", format!("expected `{key}<int>` in header")))
}

pub fn parse_mdr(text: &str) -> Result<MdrSequence> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut words = header.split_whitespace();
    if words.next() != Some("MDR") {
        return Err(CoreError::format("MDR file", "missing `MDR` header"));
    }
    let k = header_value(words.next(), "k=")?;
    let side = header_value(words.next(), "dim=")?;
    if k == 0 || side % k != 0 {
        return Err(CoreError::InvalidK {
            k,
            dim: side,
            valid: valid_ks(side),
        });
    }
    let cells = lines
        .flat_map(str::split_whitespace)
        .map(|w| {
            w.parse::<u32>()
                .map_err(|_| CoreError::format("MDR file", format!("bad cell `{w}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = side / k;
    if cells.len() != 3 * k * side * side || cells.iter().any(|&c| c as usize > n) {
        return Err(CoreError::format("MDR file", "wrong cell count or value above n"));
    }
    Ok(MdrSequence { k, n, side, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_gives_zero_slices() {
        let seq = compute_mdr(&VoxelGrid::cube(30).unwrap(), 3).unwrap();
        assert_eq!(seq.len(), 9);
        assert!(seq.cells().iter().all(|&c| c == 0));
        assert!(normalize_mdr(&seq).cells().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn full_grid_gives_n_everywhere() {
        let full = VoxelGrid::from_fn([30; 3], |_, _, _| true).unwrap();
        let seq = compute_mdr(&full, 3).unwrap();
        assert_eq!(seq.n(), 10);
        assert!(seq.cells().iter().all(|&c| c == 10));
        assert!(normalize_mdr(&seq).cells().iter().all(|&c| c == 1.0));
        let pgm = export_slice_pgm(&seq, 4).unwrap();
        assert!(pgm.starts_with(b"P5\n30 30\n255\n"));
        assert!(pgm[13..].iter().all(|&p| p == 255));
        assert_eq!(pgm.len(), 13 + 900);
    }

    #[test]
    fn single_voxel_lands_in_three_slices() {
        let mut g = VoxelGrid::cube(30).unwrap();
        g.set(5, 12, 20, true);
        let seq = compute_mdr(&g, 3).unwrap();
        let nonzero: Vec<(usize, usize, usize)> = (0..9)
            .flat_map(|i| (0..30).flat_map(move |r| (0..30).map(move |c| (i, r, c))))
            .filter(|&(i, r, c)| seq.cell(i, r, c) != 0)
            .collect();
        assert_eq!(nonzero, vec![(2, 5, 12), (3, 12, 20), (7, 5, 20)]);
        let norm = normalize_mdr(&seq);
        assert_eq!(norm.slice(2)[5 * 30 + 12], 0.1);
        assert_eq!(norm.slice(3)[12 * 30 + 20], 0.1);
        assert_eq!(norm.slice(7)[5 * 30 + 20], 0.1);
        assert_eq!(seq.slice_axis(7), (Axis::Y, 1));
    }

    #[test]
    fn rejects_bad_k() {
        let g = VoxelGrid::cube(30).unwrap();
        for k in [0, 4, 7, 31] {
            assert!(matches!(compute_mdr(&g, k), Err(CoreError::InvalidK { .. })));
        }
        assert_eq!(valid_ks(30), vec![1, 2, 3, 5, 6, 10, 15, 30]);
        assert!(matches!(
            compute_mdr(&VoxelGrid::empty([30, 30, 20]).unwrap(), 2),
            Err(CoreError::NonCubic(_))
        ));
    }

    #[test]
    fn pgm_index_out_of_range() {
        let seq = compute_mdr(&VoxelGrid::cube(30).unwrap(), 3).unwrap();
        assert!(matches!(
            export_slice_pgm(&seq, 9),
            Err(CoreError::SliceIndex { index: 9, count: 9 })
        ));
        let pgm = export_slice_pgm(&seq, 0).unwrap();
        assert!(pgm[13..].iter().all(|&p| p == 0));
    }

    #[test]
    fn text_format_round_trip() {
        let g = crate::synth::generate(crate::synth::ShapeClass::Pyramid, 3);
        let seq = compute_mdr(&g, 5).unwrap();
        let text = format_mdr(&seq);
        assert!(text.starts_with("MDR k=5 dim=30\n"));
        assert_eq!(text.lines().count(), 16);
        assert_eq!(text.lines().nth(1).unwrap().split(' ').count(), 900);
        assert_eq!(parse_mdr(&text).unwrap(), seq);
        assert!(parse_mdr("MDR k=5 dim=30\n1 2 3\n").is_err());
    }
}
