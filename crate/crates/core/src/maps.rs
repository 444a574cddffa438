//! Voxel geometry and per-voxel scalar maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Where each voxel column lives on a regular 3-D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub grid_shape: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    /// Grid coordinate of every voxel, in column order.
    pub voxel_coords: Vec<[usize; 3]>,
}

impl Geometry {
    /// Every grid point is a voxel; x varies fastest, z slowest.
    pub fn full_grid(grid_shape: [usize; 3], voxel_size_mm: [f64; 3]) -> Self {
        let [nx, ny, nz] = grid_shape;
        let mut voxel_coords = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxel_coords.push([x, y, z]);
                }
            }
        }
        Geometry {
            grid_shape,
            voxel_size_mm,
            voxel_coords,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_coords.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("voxel sizes must be positive"));
        }
        let mut seen = vec![false; self.grid_shape.iter().product()];
        for c in &self.voxel_coords {
            if (0..3).any(|a| c[a] >= self.grid_shape[a]) {
                return Err(Error::invalid(format!(
                    "voxel {c:?} outside grid {:?}",
                    self.grid_shape
                )));
            }
            let idx = self.linear_index(*c);
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::invalid(format!("voxel {c:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn linear_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.grid_shape[0] * (c[1] + self.grid_shape[1] * c[2])
    }

    pub fn same_space(&self, other: &Geometry) -> bool {
        self == other
    }

    /// Hemisphere of a voxel from the sign of its x coordinate relative to
    /// the grid midline; `None` for voxels on the midline.
    pub fn hemisphere(&self, voxel: usize) -> Option<Hemisphere> {
        let x2 = 2 * self.voxel_coords[voxel][0];
        let mid2 = self.grid_shape[0] - 1;
        match x2.cmp(&mid2) {
            std::cmp::Ordering::Less => Some(Hemisphere::Left),
            std::cmp::Ordering::Greater => Some(Hemisphere::Right),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn hemisphere_mask(&self, hemi: Hemisphere) -> Vec<bool> {
        (0..self.n_voxels()).map(|v| self.hemisphere(v) == Some(hemi)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hemisphere {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    R,
    DeltaR,
    T,
    Z,
    P,
    Specificity,
    Mask,
}

/// A per-voxel scalar map: R, ΔR, t, z, p, specificity or a 0/1 mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub values: Vec<f64>,
    pub geometry: Geometry,
    pub kind: MapKind,
    /// Names of the models / maps this one was derived from.
    pub provenance: Vec<String>,
    /// FDR threshold on z-scores, for thresholded maps.
    pub z_fdr: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MapSidecar {
    kind: MapKind,
    n_voxels: usize,
    grid_shape: [usize; 3],
    voxel_size_mm: [f64; 3],
    voxel_coords: Vec<[usize; 3]>,
    #[serde(default)]
    provenance: Vec<String>,
    #[serde(default)]
    z_fdr: Option<f64>,
}

impl VoxelMap {
    pub fn new(values: Vec<f64>, geometry: Geometry, kind: MapKind) -> Result<Self> {
        if values.len() != geometry.n_voxels() {
            return Err(Error::shape(format!(
                "{} values for {} voxels",
                values.len(),
                geometry.n_voxels()
            )));
        }
        Ok(VoxelMap {
            values,
            geometry,
            kind,
            provenance: Vec::new(),
            z_fdr: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Vec<String>) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_mask(mask: &[bool], geometry: Geometry) -> Result<Self> {
        VoxelMap::new(
            mask.iter().map(|&b| f64::from(u8::from(b))).collect(),
            geometry,
            MapKind::Mask,
        )
    }

    pub fn as_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0.0 && !v.is_nan()).collect()
    }

    pub(crate) fn check_same_space(&self, other: &VoxelMap) -> Result<()> {
        if !self.geometry.same_space(&other.geometry) {
            return Err(Error::shape("maps live on different geometries"));
        }
        Ok(())
    }

    /// Writes `path` (raw f32) and its JSON sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        io::write_f32_raw(path, &self.values)?;
        let side = MapSidecar {
            kind: self.kind,
            n_voxels: self.values.len(),
            grid_shape: self.geometry.grid_shape,
            voxel_size_mm: self.geometry.voxel_size_mm,
            voxel_coords: self.geometry.voxel_coords.clone(),
            provenance: self.provenance.clone(),
            z_fdr: self.z_fdr,
        };
        io::write_json(io::sidecar_path(path), &side)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: MapSidecar = io::read_json(io::sidecar_path(path))?;
        let values = io::read_f32_raw(path, side.n_voxels)?;
        let geometry = Geometry {
            grid_shape: side.grid_shape,
            voxel_size_mm: side.voxel_size_mm,
            voxel_coords: side.voxel_coords,
        };
        geometry.validate()?;
        let mut map = VoxelMap::new(values, geometry, side.kind)?;
        map.provenance = side.provenance;
        map.z_fdr = side.z_fdr;
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_order_and_hemispheres() {
        let g = Geometry::full_grid([3, 2, 1], [4.0; 3]);
        assert_eq!(g.voxel_coords[..4], [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]);
        assert_eq!(g.hemisphere(0), Some(Hemisphere::Left));
        assert_eq!(g.hemisphere(1), None);
        assert_eq!(g.hemisphere(2), Some(Hemisphere::Right));
        let even = Geometry::full_grid([4, 1, 1], [4.0; 3]);
        let hemis: Vec<_> = (0..4).map(|v| even.hemisphere(v)).collect();
        assert_eq!(
            hemis,
            [
                Some(Hemisphere::Left),
                Some(Hemisphere::Left),
                Some(Hemisphere::Right),
                Some(Hemisphere::Right)
            ]
        );
        g.validate().unwrap();
    }

    #[test]
    fn map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::full_grid([2, 2, 1], [4.0, 4.0, 4.0]);
        let mut m = VoxelMap::new(vec![0.5, -0.25, 0.0, 1.0], g, MapKind::R)
            .unwrap()
            .with_provenance(vec!["glove-syntactic".into()]);
        m.z_fdr = Some(3.1);
        let p = dir.path().join("r.map");
        m.save(&p).unwrap();
        assert_eq!(VoxelMap::load(&p).unwrap(), m);
    }

    #[test]
    fn rejects_wrong_length() {
        let g = Geometry::full_grid([2, 2, 1], [4.0; 3]);
        assert!(VoxelMap::new(vec![0.0; 3], g, MapKind::R).is_err());
    }
}
