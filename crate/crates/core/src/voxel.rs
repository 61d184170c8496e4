//! Binary occupancy grids and the binvox run-length format.

use bitvec::vec::BitVec;

use crate::error::{CoreError, Result};

/// Binary occupancy over a `dx × dy × dz` lattice.
///
/// Cells are stored in binvox order: x-major, then z, with y fastest
/// (`index = x·dy·dz + z·dy + y`). Callers go through [`VoxelGrid::get`] and
/// [`VoxelGrid::set`] rather than raw indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    occupancy: BitVec,
}

impl VoxelGrid {
    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidDims(dims));
        }
        Ok(Self {
            dims,
            occupancy: BitVec::repeat(false, dims.iter().product()),
        })
    }

    pub fn cube(side: usize) -> Result<Self> {
        Self::empty([side; 3])
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut g = Self::empty(dims)?;
        for x in 0..dims[0] {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    if f(x, y, z) {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
        Ok(g)
    }

    /// Grid from cells already in binvox order.
    pub fn from_cells(dims: [usize; 3], cells: BitVec) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidDims(dims));
        }
        let expected = dims.iter().product();
        if cells.len() != expected {
            return Err(CoreError::BinvoxLength {
                expected,
                got: cells.len(),
            });
        }
        Ok(Self { dims, occupancy: cells })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cubic_side(&self) -> Option<usize> {
        let [a, b, c] = self.dims;
        (a == b && b == c).then_some(a)
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [dx, dy, dz] = self.dims;
        assert!(
            x < dx && y < dy && z < dz,
            "voxel ({x},{y},{z}) outside {:?}",
            self.dims
        );
        x * dy * dz + z * dy + y
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.occupancy.set(i, value);
    }

    /// Cells in binvox order.
    pub fn cells(&self) -> &BitVec {
        &self.occupancy
    }

    pub fn count_occupied(&self) -> usize {
        self.occupancy.count_ones()
    }

    /// Calls `f(x, y, z)` for every occupied cell.
    pub fn for_each_occupied(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [_, dy, dz] = self.dims;
        for i in self.occupancy.iter_ones() {
            f(i / (dy * dz), i % dy, (i / dy) % dz);
        }
    }
}

pub fn count_occupied(grid: &VoxelGrid) -> usize {
    grid.count_occupied()
}

fn header_err(msg: impl Into<String>) -> CoreError {
    CoreError::BinvoxHeader(msg.into())
}

/// Parses a binvox stream. `translate` and `scale` lines are accepted and
/// ignored.
pub fn load_binvox(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut pos = 0;
    let mut next_line = || -> Result<&[u8]> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err("unterminated header line"))?;
        pos += end + 1;
        let line = &rest[..end];
        Ok(line.strip_suffix(b"\r").unwrap_or(line))
    };

    let magic = next_line()?;
    if magic != b"#binvox 1" {
        return Err(header_err(format!(
            "expected `#binvox 1`, found `{}`",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut dims = None;
    loop {
        let line = std::str::from_utf8(next_line()?).map_err(|_| header_err("header is not UTF-8"))?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("dim") => {
                let parsed: Vec<usize> = words
                    .map(|w| w.parse::<usize>().map_err(|_| header_err(format!("bad dim `{line}`"))))
                    .collect::<Result<_>>()?;
                let d: [usize; 3] = parsed
                    .try_into()
                    .map_err(|_| header_err(format!("dim needs three values: `{line}`")))?;
                if d.contains(&0) {
                    return Err(CoreError::InvalidDims(d));
                }
                dims = Some(d);
            }
            Some("translate") | Some("scale") => {
                for w in words {
                    w.parse::<f64>()
                        .map_err(|_| header_err(format!("bad number in `{line}`")))?;
                }
            }
            Some("data") => break,
            _ => return Err(header_err(format!("unexpected line `{line}`"))),
        }
    }
    let dims = dims.ok_or_else(|| header_err("missing dim line"))?;
    let expected: usize = dims.iter().product();

    let data = &bytes[pos..];
    let mut cells = BitVec::with_capacity(expected);
    let mut decoded = 0usize;
    let mut pairs = data.chunks(2);
    for (i, pair) in pairs.by_ref().enumerate() {
        let &[value, count] = pair else {
            return Err(header_err("run-length data ends with a lone octet"));
        };
        if value > 1 {
            return Err(CoreError::BinvoxValue(value));
        }
        if count == 0 {
            return Err(CoreError::BinvoxZeroRun(pos + 2 * i));
        }
        decoded += count as usize;
        if decoded > expected {
            let rest: usize = data[2 * (i + 1)..]
                .chunks(2)
                .filter_map(|p| p.get(1))
                .map(|&c| c as usize)
                .sum();
            return Err(CoreError::BinvoxLength {
                expected,
                got: decoded + rest,
            });
        }
        cells.extend(std::iter::repeat(value == 1).take(count as usize));
    }
    if decoded != expected {
        return Err(CoreError::BinvoxLength { expected, got: decoded });
    }
    VoxelGrid::from_cells(dims, cells)
}

/// Canonical binvox encoding: fixed header, maximal runs capped at 255.
pub fn save_binvox(grid: &VoxelGrid) -> Vec<u8> {
    let [dx, dy, dz] = grid.dims;
    let mut out = format!("#binvox 1\ndim {dx} {dy} {dz}\ntranslate 0 0 0\nscale 1\ndata\n").into_bytes();
    let cells = grid.cells();
    let mut i = 0;
    while i < cells.len() {
        let value = cells[i];
        let mut run = 1;
        while run < 255 && i + run < cells.len() && cells[i + run] == value {
            run += 1;
        }
        out.push(value as u8);
        out.push(run as u8);
        i += run;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(d: usize) -> Vec<u8> {
        format!("#binvox 1\ndim {d} {d} {d}\ntranslate 0.5 -1 2\nscale 0.9\ndata\n").into_bytes()
    }

    fn runs(value: u8, mut total: usize) -> Vec<u8> {
        let mut out = Vec::new();
        while total > 0 {
            let n = total.min(255);
            out.extend([value, n as u8]);
            total -= n;
        }
        out
    }

    #[test]
    fn all_empty_stream() {
        let mut bytes = header(30);
        bytes.extend(runs(0, 27000));
        let g = load_binvox(&bytes).unwrap();
        assert_eq!(g.dims(), [30, 30, 30]);
        assert_eq!(g.count_occupied(), 0);
    }

    #[test]
    fn leading_run_fills_first_indices() {
        let mut bytes = header(30);
        bytes.extend(runs(1, 255));
        bytes.extend(runs(0, 26745));
        let g = load_binvox(&bytes).unwrap();
        assert_eq!(g.count_occupied(), 255);
        assert_eq!(g.cells().first_zero(), Some(255));
        assert!(g.cells()[..255].all());
        // index 255 = x 0, z 8, y 15
        assert!(g.get(0, 14, 8) && !g.get(0, 15, 8));
    }

    #[test]
    fn canonical_empty_and_full_runs() {
        let empty = VoxelGrid::cube(30).unwrap();
        let bytes = save_binvox(&empty);
        let head = b"#binvox 1\ndim 30 30 30\ntranslate 0 0 0\nscale 1\ndata\n";
        assert!(bytes.starts_with(head));
        let data = &bytes[head.len()..];
        let mut expected = [0u8, 255].repeat(105);
        expected.extend([0, 225]);
        assert_eq!(data, expected.as_slice());

        let full = VoxelGrid::from_fn([30; 3], |_, _, _| true).unwrap();
        let data = save_binvox(&full)[head.len()..].to_vec();
        let mut expected = [1u8, 255].repeat(105);
        expected.extend([1, 225]);
        assert_eq!(data, expected);
    }

    #[test]
    fn single_voxel_at_origin() {
        let mut g = VoxelGrid::cube(30).unwrap();
        g.set(0, 0, 0, true);
        let bytes = save_binvox(&g);
        let data = &bytes[bytes.len() - 2 * 107..];
        assert_eq!(&data[..2], &[1, 1]);
        let zeros: usize = data[2..]
            .chunks(2)
            .map(|p| {
                assert_eq!(p[0], 0);
                p[1] as usize
            })
            .sum();
        assert_eq!(zeros, 26999);
    }

    #[test]
    fn rejects_bad_streams() {
        assert!(matches!(load_binvox(b"#binvox 2\n"), Err(CoreError::BinvoxHeader(_))));
        assert!(matches!(
            load_binvox(b"#binvox 1\ndata\n"),
            Err(CoreError::BinvoxHeader(_))
        ));
        assert!(matches!(
            load_binvox(b"#binvox 1\ndim 2 2\ndata\n"),
            Err(CoreError::BinvoxHeader(_))
        ));

        let mut short = header(2);
        short.extend([1, 7]);
        assert!(matches!(
            load_binvox(&short),
            Err(CoreError::BinvoxLength { expected: 8, got: 7 })
        ));
        let mut long = header(2);
        long.extend([1, 7, 0, 2]);
        assert!(matches!(
            load_binvox(&long),
            Err(CoreError::BinvoxLength { expected: 8, got: 9 })
        ));
        let mut bad_value = header(2);
        bad_value.extend([2, 8]);
        assert!(matches!(load_binvox(&bad_value), Err(CoreError::BinvoxValue(2))));
        let mut zero_run = header(2);
        zero_run.extend([1, 0, 1, 8]);
        assert!(matches!(load_binvox(&zero_run), Err(CoreError::BinvoxZeroRun(_))));
    }

    #[test]
    fn accessor_matches_binvox_index() {
        let mut g = VoxelGrid::empty([3, 4, 5]).unwrap();
        g.set(2, 1, 3, true);
        assert_eq!(g.cells().first_one(), Some(2 * 4 * 5 + 3 * 4 + 1));
        let mut seen = Vec::new();
        g.for_each_occupied(|x, y, z| seen.push((x, y, z)));
        assert_eq!(seen, vec![(2, 1, 3)]);
    }
}
