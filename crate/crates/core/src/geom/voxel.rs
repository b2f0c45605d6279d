use super::{PointCloud, Vec3, NORMALIZED_TOLERANCE, UNIT_HALF_EXTENT};
use crate::{Error, Result};
use std::io::{Read, Write};

/// Affine map between normalized world coordinates and continuous grid
/// coordinates: `grid = (world - origin) / cell_size`. Cell `i` spans
/// `[i, i + 1)` in grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridTransform {
    pub origin: f64,
    pub cell_size: f64,
}

impl GridTransform {
    pub fn unit_cube(resolution: usize) -> Self {
        GridTransform {
            origin: -UNIT_HALF_EXTENT,
            cell_size: 2.0 * UNIT_HALF_EXTENT / resolution as f64,
        }
    }

    pub fn to_grid(&self, p: &Vec3) -> Vec3 {
        p.map(|c| (c - self.origin) / self.cell_size)
    }

    pub fn to_world(&self, g: &Vec3) -> Vec3 {
        g.map(|c| c * self.cell_size + self.origin)
    }

    pub fn cell_center(&self, cell: [usize; 3]) -> Vec3 {
        self.to_world(&Vec3::new(
            cell[0] as f64 + 0.5,
            cell[1] as f64 + 0.5,
            cell[2] as f64 + 0.5,
        ))
    }
}

/// `M x M x M` binary occupancy, stored x-major: index `(x * M + y) * M + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    occupancy: Vec<bool>,
    transform: GridTransform,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> Self {
        VoxelGrid {
            resolution,
            occupancy: vec![false; resolution.pow(3)],
            transform: GridTransform::unit_cube(resolution),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn transform(&self) -> &GridTransform {
        &self.transform
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn linear_index(&self, cell: [usize; 3]) -> usize {
        (cell[0] * self.resolution + cell[1]) * self.resolution + cell[2]
    }

    pub fn is_occupied(&self, cell: [usize; 3]) -> bool {
        self.occupancy[self.linear_index(cell)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Cell containing `p`; points on the upper boundary clamp into the last cell.
    pub fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        let g = self.transform.to_grid(p);
        let m = self.resolution as f64;
        let idx = |c: f64| (c.floor().clamp(0.0, m - 1.0)) as usize;
        [idx(g.x), idx(g.y), idx(g.z)]
    }

    pub fn set(&mut self, cell: [usize; 3]) {
        let i = self.linear_index(cell);
        self.occupancy[i] = true;
    }

    const MAGIC: &'static [u8; 8] = b"PVUDFVOX";
    const VERSION: u32 = 1;

    /// Writes the grid as `magic, version, M, origin, cell_size, packed bits`
    /// (little-endian, bits packed LSB-first in linear-index order).
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        w.write_all(&self.transform.origin.to_le_bytes())?;
        w.write_all(&self.transform.cell_size.to_le_bytes())?;
        let mut bytes = vec![0u8; self.occupancy.len().div_ceil(8)];
        for (i, &o) in self.occupancy.iter().enumerate() {
            if o {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::parse("voxel grid", e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::MAGIC {
            return Err(Error::parse("voxel grid", "bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(bad)?;
        if u32::from_le_bytes(b4) != Self::VERSION {
            return Err(Error::parse("voxel grid", "unsupported version"));
        }
        r.read_exact(&mut b4).map_err(bad)?;
        let m = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(bad)?;
        let origin = f64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(bad)?;
        let cell_size = f64::from_le_bytes(b8);
        let n = m.pow(3);
        let mut bytes = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bytes).map_err(bad)?;
        let occupancy = (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(VoxelGrid {
            resolution: m,
            occupancy,
            transform: GridTransform { origin, cell_size },
        })
    }
}

/// Discretizes a normalized cloud into an `M^3` occupancy grid over the unit cube.
pub fn voxelize(cloud: &PointCloud, resolution: usize) -> Result<VoxelGrid> {
    if resolution < 2 {
        return Err(Error::InvalidConfig(format!(
            "voxel resolution must be at least 2, got {resolution}"
        )));
    }
    if !cloud.is_normalized() {
        let lim = UNIT_HALF_EXTENT + NORMALIZED_TOLERANCE;
        let bad = cloud
            .points()
            .iter()
            .find(|p| p.iter().any(|c| c.abs() > lim))
            .copied();
        return Err(Error::DegenerateInput(format!(
            "cloud is not normalized to the unit cube (e.g. point {bad:?})"
        )));
    }
    let mut grid = VoxelGrid::empty(resolution);
    for p in cloud.points() {
        let c = grid.cell_of(p);
        grid.set(c);
    }
    Ok(grid)
}

/// Fraction of input points merged away by voxelization: `(N - occupied) / N`.
pub fn lost_point_fraction(cloud: &PointCloud, resolution: usize) -> Result<f64> {
    let grid = voxelize(cloud, resolution)?;
    let n = cloud.len() as f64;
    Ok((n - grid.occupied_count() as f64) / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Vec3::from(*p)).collect()).unwrap()
    }

    #[test]
    fn single_point_occupies_one_cell() {
        let g = voxelize(&cloud(&[[0.0, 0.0, 0.0]]), 2).unwrap();
        assert_eq!(g.occupied_count(), 1);
        assert!(g.is_occupied([1, 1, 1]));
    }

    #[test]
    fn cell_centers_fill_the_grid() {
        let mut pts = Vec::new();
        for x in [-0.25, 0.25] {
            for y in [-0.25, 0.25] {
                for z in [-0.25, 0.25] {
                    pts.push([x, y, z]);
                }
            }
        }
        let c = cloud(&pts);
        assert_eq!(voxelize(&c, 2).unwrap().occupied_count(), 8);
        assert_eq!(lost_point_fraction(&c, 2).unwrap(), 0.0);
    }

    #[test]
    fn collisions_count_as_lost() {
        let c = cloud(&[[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]);
        assert_eq!(lost_point_fraction(&c, 2).unwrap(), 0.5);
    }

    #[test]
    fn upper_boundary_clamps_into_last_cell() {
        let g = voxelize(&cloud(&[[0.5, 0.5, -0.5]]), 4).unwrap();
        assert!(g.is_occupied([3, 3, 0]));
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        assert!(voxelize(&cloud(&[[0.7, 0.0, 0.0]]), 4).is_err());
        assert!(voxelize(&cloud(&[[0.0, 0.0, 0.0]]), 1).is_err());
    }

    #[test]
    fn grid_file_round_trips() {
        let g = voxelize(&cloud(&[[0.1, -0.3, 0.2], [0.4, 0.4, 0.4]]), 5).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        assert_eq!(VoxelGrid::read_from(buf.as_slice()).unwrap(), g);
    }
}
