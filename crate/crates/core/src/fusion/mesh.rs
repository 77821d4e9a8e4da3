//! Marching cubes over the fused field.
//!
//! The 256-entry case table is generated at first use instead of being
//! typed in. Each cube face is walked counter-clockwise around its outward
//! normal; every edge where the walk leaves the inside region is joined to
//! the nearest preceding edge where it entered. On ambiguous faces this
//! keeps inside corners apart, and neighboring cubes make the same choice,
//! so shared faces always agree and the surface has no cracks. The directed
//! face segments chain into closed loops that are fan-triangulated with
//! normals pointing toward positive distance.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;

use nalgebra::Vector3;

use super::{FusionError, TsdfVolume};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_colors: Option<Vec<[u8; 3]>>,
}

impl TriangleMesh {
    /// Number of undirected edges not shared by exactly two triangles.
    pub fn boundary_edge_count(&self) -> usize {
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().filter(|&&c| c != 2).count()
    }
}

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const FACES: [[u8; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

/// The 12 cube edges as `(low corner, axis)`.
const EDGES: [(u8, u8); 12] = [
    (0, 0),
    (2, 0),
    (4, 0),
    (6, 0),
    (0, 1),
    (1, 1),
    (4, 1),
    (5, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

fn edge_index(a: u8, b: u8) -> u8 {
    let lo = a.min(b);
    let axis = (a ^ b).trailing_zeros() as u8;
    EDGES
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("cube edge") as u8
}

/// Triangles (as edge indices) for one inside-corner mask.
fn triangulate_case(mask: u8) -> Vec<[u8; 3]> {
    let inside = |c: u8| mask >> c & 1 == 1;
    let mut next: HashMap<u8, u8> = HashMap::new();
    for face in FACES {
        let crossings: Vec<(usize, bool)> = (0..4)
            .filter_map(|k| {
                let (a, b) = (face[k], face[(k + 1) % 4]);
                (inside(a) != inside(b)).then_some((k, inside(a)))
            })
            .collect();
        for (pos, &(k, exits)) in crossings.iter().enumerate() {
            if !exits {
                continue;
            }
            let n = crossings.len();
            let entry = (1..=n)
                .map(|back| crossings[(pos + n - back) % n])
                .find(|c| !c.1)
                .expect("face crossings come in pairs");
            let edge_of = |k: usize| edge_index(face[k], face[(k + 1) % 4]);
            next.insert(edge_of(entry.0), edge_of(k));
        }
    }
    let mut tris = Vec::new();
    let mut starts: Vec<u8> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut used = [false; 12];
    for start in starts {
        if used[start as usize] {
            continue;
        }
        let mut lp = vec![start];
        used[start as usize] = true;
        let mut cur = next[&start];
        while cur != start {
            used[cur as usize] = true;
            lp.push(cur);
            cur = next[&cur];
        }
        for w in 1..lp.len() - 1 {
            tris.push([lp[0], lp[w], lp[w + 1]]);
        }
    }
    tris
}

fn case_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|m| triangulate_case(m as u8)))
}

/// Extracts the `tsdf = 0` surface over cells whose 8 corners are all
/// observed; `tsdf < 0` counts as inside. Vertices are shared between
/// neighboring cells and ordered by first use in a z-major, x-fastest cell
/// sweep, so output is deterministic.
pub fn extract_mesh(volume: &TsdfVolume) -> Result<TriangleMesh, FusionError> {
    let [nx, ny, nz] = volume.dims;
    let table = case_table();
    let mut mesh = TriangleMesh::default();
    let mut vertex_ids: HashMap<(usize, u8), u32> = HashMap::new();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let corner_idx = |c: u8| {
                    volume.index(
                        i + (c & 1) as usize,
                        j + (c >> 1 & 1) as usize,
                        k + (c >> 2 & 1) as usize,
                    )
                };
                let idx: [usize; 8] = std::array::from_fn(|c| corner_idx(c as u8));
                if idx.iter().any(|&v| volume.weight[v] <= 0.0) {
                    continue;
                }
                let mask = (0..8).fold(0u8, |m, c| m | (u8::from(volume.tsdf[idx[c]] < 0.0) << c));
                let cases = &table[mask as usize];
                if cases.is_empty() {
                    continue;
                }
                let mut vertex_for = |edge: u8| -> u32 {
                    let (lo, axis) = EDGES[edge as usize];
                    let key = (idx[lo as usize], axis);
                    *vertex_ids.entry(key).or_insert_with(|| {
                        let hi = lo | (1 << axis);
                        let (a, b) = (volume.tsdf[idx[lo as usize]], volume.tsdf[idx[hi as usize]]);
                        let t = if a == b {
                            0.5
                        } else {
                            (a / (a - b)).clamp(0.0, 1.0)
                        };
                        let [ci, cj, ck] = volume.coords(idx[lo as usize]);
                        let mut p = volume.voxel_center(ci, cj, ck);
                        p[axis as usize] += t * volume.voxel_size;
                        mesh.vertices.push(p);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                for tri in cases {
                    let t = [vertex_for(tri[0]), vertex_for(tri[1]), vertex_for(tri[2])];
                    mesh.triangles.push(t);
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(FusionError::EmptyVolume);
    }
    Ok(mesh)
}

/// ASCII PLY with `float64`-precision text coordinates.
pub fn write_ply<W: Write>(mut w: W, mesh: &TriangleMesh) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if mesh.vertex_colors.is_some() {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (n, v) in mesh.vertices.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => writeln!(
                w,
                "{} {} {} {} {} {}",
                v.x, v.y, v.z, c[n][0], c[n][1], c[n][2]
            )?,
            None => writeln!(w, "{} {} {}", v.x, v.y, v.z)?,
        }
    }
    for t in &mesh.triangles {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::VolumeParams;

    fn grid(n: usize, lo: f64, hi: f64) -> TsdfVolume {
        TsdfVolume::new(&VolumeParams {
            origin: [lo; 3],
            voxel_size: (hi - lo) / n as f64,
            dims: [n; 3],
            truncation: None,
            max_weight: 64.0,
        })
        .unwrap()
    }

    #[test]
    fn table_covers_the_classic_case_counts() {
        let t = case_table();
        assert!(t[0].is_empty() && t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        assert_eq!(t[0b0000_0011].len(), 2);
        for (m, tris) in t.iter().enumerate().skip(1).take(254) {
            assert!(!tris.is_empty(), "mask {m}");
            // every crossing edge lies on the surface
            let mut seen = [false; 12];
            for tri in tris {
                assert!(tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2]);
                tri.iter().for_each(|&e| seen[e as usize] = true);
            }
            for (e, &(lo, axis)) in EDGES.iter().enumerate() {
                let hi = lo | (1 << axis);
                assert_eq!(seen[e], (m >> lo & 1) != (m >> hi & 1), "mask {m} edge {e}");
            }
        }
    }

    #[test]
    fn single_corner_normal_points_outward() {
        let tri = case_table()[1][0];
        let corner = |e: u8| {
            let (lo, axis) = EDGES[e as usize];
            let mut p = Vector3::new((lo & 1) as f64, (lo >> 1 & 1) as f64, (lo >> 2 & 1) as f64);
            p[axis as usize] += 0.5;
            p
        };
        let (a, b, c) = (corner(tri[0]), corner(tri[1]), corner(tri[2]));
        let n = (b - a).cross(&(c - a));
        assert!(n.dot(&Vector3::new(1.0, 1.0, 1.0)) > 0.0);
    }

    #[test]
    fn sphere_field_is_round_and_watertight() {
        let mut v = grid(32, -1.0, 1.0);
        v.fill_with(|p| p.norm() - 0.6);
        let mesh = extract_mesh(&v).unwrap();
        let err: f64 = mesh
            .vertices
            .iter()
            .map(|p| (p.norm() - 0.6).abs())
            .sum::<f64>()
            / mesh.vertices.len() as f64;
        assert!(err < v.voxel_size * 0.1, "mean radius error {err}");
        assert_eq!(mesh.boundary_edge_count(), 0);
        // outward winding: mean normal dot position is positive
        let outward = mesh.triangles.iter().all(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
            (b - a).cross(&(c - a)).dot(&(a + b + c)) >= 0.0
        });
        assert!(outward);
    }

    #[test]
    fn plane_vertices_on_plane_and_empty_field_errors() {
        let mut v = grid(16, 0.0, 1.0);
        v.fill_with(|p| p.z - 0.43);
        let mesh = extract_mesh(&v).unwrap();
        assert!(mesh
            .vertices
            .iter()
            .all(|p| (p.z - 0.43).abs() < v.voxel_size));
        v.fill_with(|_| 1.0);
        assert_eq!(extract_mesh(&v), Err(FusionError::EmptyVolume));
    }

    #[test]
    fn ply_layout() {
        let mut v = grid(4, 0.0, 1.0);
        v.fill_with(|p| p.norm() - 0.5);
        let mesh = extract_mesh(&v).unwrap();
        let mut buf = Vec::new();
        write_ply(&mut buf, &mesh).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert_eq!(
            text.lines().count(),
            9 + mesh.vertices.len() + mesh.triangles.len()
        );
    }
}
