//! Procedural 30³ shape classes used in place of a scanned dataset.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::voxel::VoxelGrid;

pub const SYNTH_SIDE: usize = 30;
const MID: i64 = SYNTH_SIDE as i64 / 2;
const JITTER: i64 = 3;
const BAR_HALF_WIDTH: i64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Box,
    Cross,
    Pyramid,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Sphere, Self::Box, Self::Cross, Self::Pyramid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Box => "box",
            Self::Cross => "cross",
            Self::Pyramid => "pyramid",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::UnknownClass(s.to_string()))
    }
}

fn cube() -> VoxelGrid {
    VoxelGrid::cube(SYNTH_SIDE).expect("nonzero side")
}

/// Sets every voxel of the half-open integer box `lo..hi`, clipped to the grid.
fn fill_box(g: &mut VoxelGrid, lo: [i64; 3], hi: [i64; 3]) {
    let side = SYNTH_SIDE as i64;
    let clip = |v: i64| v.clamp(0, side) as usize;
    for x in clip(lo[0])..clip(hi[0]) {
        for y in clip(lo[1])..clip(hi[1]) {
            for z in clip(lo[2])..clip(hi[2]) {
                g.set(x, y, z, true);
            }
        }
    }
}

/// Solid ball: voxel centres within `radius` of `center` (continuous coordinates).
pub fn sphere_grid(center: [f64; 3], radius: f64) -> VoxelGrid {
    VoxelGrid::from_fn([SYNTH_SIDE; 3], |x, y, z| {
        let d2: f64 = [x, y, z]
            .iter()
            .zip(center)
            .map(|(&i, c)| (i as f64 + 0.5 - c).powi(2))
            .sum();
        d2 <= radius * radius
    })
    .expect("nonzero side")
}

pub fn box_grid(origin: [i64; 3], edges: [i64; 3]) -> VoxelGrid {
    let mut g = cube();
    let hi = [0, 1, 2].map(|a| origin[a] + edges[a]);
    fill_box(&mut g, origin, hi);
    g
}

/// Three orthogonal bars of 6×6 cross-section and common `length`, all
/// passing through `center`.
pub fn cross_grid(center: [i64; 3], length: i64) -> VoxelGrid {
    let mut g = cube();
    for axis in 0..3 {
        let mut lo = center.map(|c| c - BAR_HALF_WIDTH);
        let mut hi = center.map(|c| c + BAR_HALF_WIDTH);
        lo[axis] = center[axis] - length / 2;
        hi[axis] = lo[axis] + length;
        fill_box(&mut g, lo, hi);
    }
    g
}

/// Square layers stacked upward along z from `base_z`, each 2 voxels
/// narrower than the one below, until the width reaches zero.
pub fn pyramid_grid(center_xy: [i64; 2], base_z: i64, base_width: i64) -> VoxelGrid {
    let mut g = cube();
    let mut width = base_width;
    let mut z = base_z;
    while width > 0 {
        let lo = center_xy.map(|c| c - width / 2);
        fill_box(&mut g, [lo[0], lo[1], z], [lo[0] + width, lo[1] + width, z + 1]);
        width -= 2;
        z += 1;
    }
    g
}

pub fn pyramid_height(base_width: i64) -> i64 {
    (base_width + 1) / 2
}

fn jittered(rng: &mut ChaCha8Rng) -> i64 {
    MID + rng.gen_range(-JITTER..=JITTER)
}

/// Deterministic shape of `class` for `seed`.
pub fn generate(class: ShapeClass, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.stream());
    match class {
        ShapeClass::Sphere => {
            let radius = rng.gen_range(6.0..=11.0);
            let center = [0; 3].map(|_| jittered(&mut rng) as f64);
            sphere_grid(center, radius)
        }
        ShapeClass::Box => {
            let edges = [0; 3].map(|_| rng.gen_range(10..=22i64));
            let side = SYNTH_SIDE as i64;
            let origin = edges.map(|e| ((side - e) / 2 + rng.gen_range(-JITTER..=JITTER)).clamp(0, side - e));
            box_grid(origin, edges)
        }
        ShapeClass::Cross => {
            let length = rng.gen_range(18..=30i64);
            let center = [0; 3].map(|_| jittered(&mut rng));
            cross_grid(center, length)
        }
        ShapeClass::Pyramid => {
            let width = rng.gen_range(14..=24i64);
            let center = [0; 2].map(|_| jittered(&mut rng));
            let base_z = (SYNTH_SIDE as i64 - pyramid_height(width)) / 2 + rng.gen_range(-JITTER..=JITTER);
            pyramid_grid(center, base_z, width)
        }
    }
}

/// [`generate`] keyed by class name.
pub fn generate_synthetic(class_name: &str, seed: u64) -> Result<VoxelGrid> {
    Ok(generate(class_name.parse()?, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_grid() {
        for class in ShapeClass::ALL {
            assert_eq!(generate(class, 11), generate(class, 11));
        }
        assert_ne!(generate(ShapeClass::Sphere, 1), generate(ShapeClass::Sphere, 2));
    }

    #[test]
    fn classes_use_independent_streams() {
        assert_ne!(generate(ShapeClass::Box, 5), generate(ShapeClass::Cross, 5));
    }

    #[test]
    fn unknown_class_name() {
        assert!(matches!(
            generate_synthetic("torus", 0),
            Err(CoreError::UnknownClass(_))
        ));
        assert!(generate_synthetic("pyramid", 0).is_ok());
    }

    /// Brute-force bounding box of occupied cells.
    fn bounds(g: &VoxelGrid) -> ([usize; 3], [usize; 3]) {
        let (mut lo, mut hi) = ([usize::MAX; 3], [0; 3]);
        g.for_each_occupied(|x, y, z| {
            for (a, v) in [x, y, z].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v + 1);
            }
        });
        (lo, hi)
    }

    #[test]
    fn boxes_are_single_full_cuboids() {
        for seed in 0..40 {
            let g = generate(ShapeClass::Box, seed);
            let (lo, hi) = bounds(&g);
            let edges: Vec<usize> = (0..3).map(|a| hi[a] - lo[a]).collect();
            assert!(edges.iter().all(|e| (10..=22).contains(e)), "{edges:?}");
            assert_eq!(g.count_occupied(), edges.iter().product::<usize>());
        }
    }

    #[test]
    fn centred_cross_is_invariant_under_axis_cycle() {
        for length in [18, 21, 24, 30] {
            let g = cross_grid([15; 3], length);
            for x in 0..30 {
                for y in 0..30 {
                    for z in 0..30 {
                        assert_eq!(g.get(x, y, z), g.get(y, z, x));
                        assert_eq!(g.get(x, y, z), g.get(y, x, z));
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_radius_and_centre_in_range() {
        for seed in 0..20 {
            let g = generate(ShapeClass::Sphere, seed);
            let (lo, hi) = bounds(&g);
            for a in 0..3 {
                let extent = hi[a] - lo[a];
                assert!((11..=23).contains(&extent), "extent {extent}");
                let mid = (lo[a] + hi[a]) as f64 / 2.0;
                assert!((mid - 15.0).abs() <= 3.0 + 1e-9);
            }
        }
    }

    #[test]
    fn pyramid_layers_shrink() {
        let g = pyramid_grid([15, 15], 5, 20);
        let mut prev = usize::MAX;
        for z in 5..5 + pyramid_height(20) as usize {
            let layer = (0..30)
                .flat_map(|x| (0..30).map(move |y| (x, y)))
                .filter(|&(x, y)| g.get(x, y, z))
                .count();
            assert!(layer < prev && layer > 0);
            prev = layer;
        }
        assert_eq!(g.count_occupied(), (1..=10).map(|i| (2 * i) * (2 * i)).sum::<usize>());
    }
}
