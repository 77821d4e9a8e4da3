use nalgebra::Vector3;

/// Boolean voxelization sharing the layout of [`super::TsdfVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        Self {
            origin,
            voxel_size,
            dims,
            occupied: vec![false; dims.iter().product()],
        }
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.index(i, j, k);
        self.occupied[idx] = value;
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupied[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|o| **o).count()
    }

    /// Voxel containing `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Positions outside the grid are free.
    pub fn is_occupied_at(&self, p: &Vector3<f64>) -> bool {
        self.voxel_of(p).is_some_and(|[i, j, k]| self.get(i, j, k))
    }

    /// Distance from `p` to the nearest occupied voxel center, `f64::MAX`
    /// when no voxel is occupied.
    ///
    /// Inside the grid the search grows cubic shells of voxels around `p`
    /// and stops once no unvisited voxel can beat the best hit. Outside the
    /// grid it falls back to a full scan.
    pub fn clearance(&self, p: &Vector3<f64>) -> f64 {
        let Some(home) = self.voxel_of(p) else {
            return self.clearance_brute_force(p);
        };
        let max_shell = *self.dims.iter().max().expect("3 dims");
        let mut best_sq = f64::MAX;
        for r in 0..=max_shell {
            // Every voxel on shell r is at least (r - 1) voxels away from p.
            let reach = (r as f64 - 1.0).max(0.0) * self.voxel_size;
            if best_sq < f64::MAX && reach * reach > best_sq {
                break;
            }
            self.for_each_on_shell(home, r, |i, j, k| {
                if self.get(i, j, k) {
                    best_sq = best_sq.min((self.voxel_center(i, j, k) - p).norm_squared());
                }
            });
        }
        if best_sq == f64::MAX {
            f64::MAX
        } else {
            best_sq.sqrt()
        }
    }

    /// Reference implementation of [`Self::clearance`] scanning every voxel.
    pub fn clearance_brute_force(&self, p: &Vector3<f64>) -> f64 {
        let mut best_sq = f64::MAX;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    if self.get(i, j, k) {
                        best_sq = best_sq.min((self.voxel_center(i, j, k) - p).norm_squared());
                    }
                }
            }
        }
        if best_sq == f64::MAX {
            f64::MAX
        } else {
            best_sq.sqrt()
        }
    }

    fn for_each_on_shell(
        &self,
        home: [usize; 3],
        r: usize,
        mut f: impl FnMut(usize, usize, usize),
    ) {
        let r = r as i64;
        let lo = |a: usize| (home[a] as i64 - r).max(0);
        let hi = |a: usize| (home[a] as i64 + r).min(self.dims[a] as i64 - 1);
        for k in lo(2)..=hi(2) {
            for j in lo(1)..=hi(1) {
                for i in lo(0)..=hi(0) {
                    let d = (i - home[0] as i64)
                        .abs()
                        .max((j - home[1] as i64).abs())
                        .max((k - home[2] as i64).abs());
                    if d == r {
                        f(i as usize, j as usize, k as usize);
                    }
                }
            }
        }
    }
}
