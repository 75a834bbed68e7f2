//! Zero level-set extraction by marching cubes, cropping, and OBJ I/O.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::write_atomic;
use crate::error::{Error, Result};
use crate::renderer::{cross, sub, Vec3};
use tables::TRI_TABLE;

/// Cube corner offsets; corner `i` sets bit `i` of the case index.
const CORNERS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self { min: [-half; 3], max: [half; 3] }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(Error::Input(format!("box min {:?} not below max {:?}", self.min, self.max)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
}

impl GridSpec {
    pub fn cubic(n: usize, half: f64) -> Self {
        Self { resolution: [n; 3], bounds: Aabb::cube(half) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Input(format!("grid resolution {:?} below 2", self.resolution)));
        }
        self.bounds.validate()
    }

    pub fn spacing(&self) -> Vec3 {
        let b = &self.bounds;
        std::array::from_fn(|a| (b.max[a] - b.min[a]) / (self.resolution[a] - 1) as f64)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing();
        let b = &self.bounds;
        [b.min[0] + h[0] * i as f64, b.min[1] + h[1] * j as f64, b.min[2] + h[2] * k as f64]
    }

    pub fn num_nodes(&self) -> usize {
        self.resolution.iter().product()
    }
}

/// Scalar samples at grid nodes, `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.spec.resolution;
        i + nx * (j + ny * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn has_crossing(&self, iso: f64) -> bool {
        self.values.iter().any(|&v| v < iso) && self.values.iter().any(|&v| v >= iso)
    }
}

/// Evaluates `sdf` at every node, one z-slice per call.
pub fn sample_grid<F>(mut sdf: F, spec: GridSpec) -> Result<VoxelGrid>
where
    F: FnMut(&[Vec3]) -> Result<Vec<f64>>,
{
    spec.validate()?;
    let [nx, ny, nz] = spec.resolution;
    let mut values = Vec::with_capacity(spec.num_nodes());
    let mut slice = Vec::with_capacity(nx * ny);
    for k in 0..nz {
        slice.clear();
        for j in 0..ny {
            for i in 0..nx {
                slice.push(spec.node(i, j, k));
            }
        }
        let v = sdf(&slice)?;
        if v.len() != slice.len() {
            return Err(Error::Shape(format!("field returned {} values for {} points", v.len(), slice.len())));
        }
        values.extend(v);
    }
    Ok(VoxelGrid { spec, values })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let n = self.face_normal(f);
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.faces.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Input("face index out of range".into()));
        }
        Ok(())
    }

    /// ASCII OBJ with 1-based indices.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_obj().as_bytes())
    }

    /// Reads `v` and triangular `f` records; other records are ignored.
    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut mesh = TriangleMesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = || Error::data(path, format!("malformed record on line {}", ln + 1));
            match it.next() {
                Some("v") => {
                    let mut v = [0.0; 3];
                    for c in &mut v {
                        *c = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
                    }
                    mesh.vertices.push(v);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| t.split('/').next().and_then(|i| i.parse::<usize>().ok()).filter(|&i| i > 0).map(|i| i - 1))
                        .collect::<Option<_>>()
                        .ok_or_else(bad)?;
                    if idx.len() != 3 {
                        return Err(bad());
                    }
                    mesh.faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        mesh.validate().map_err(|e| Error::data(path, e.to_string()))?;
        Ok(mesh)
    }
}

/// Marching cubes at `iso`. Corners with value below `iso` are inside;
/// triangles wind counter-clockwise seen from outside, so face normals point
/// towards increasing field values. A grid without a crossing yields an
/// empty mesh.
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    if !grid.has_crossing(iso) {
        log::warn!("marching cubes: grid has no {iso} crossing, mesh is empty");
        return mesh;
    }
    let [nx, ny, nz] = grid.spec.resolution;
    // Vertices are shared through (lower node index, axis) edge keys.
    let mut edge_vertex: HashMap<(usize, u8), usize> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let [a, b, d] = corner(c);
                    grid.value(a, b, d)
                });
                let case = (0..8).fold(0usize, |acc, c| acc | (usize::from(vals[c] < iso) << c));
                let row = &TRI_TABLE[case];
                if row[0] < 0 {
                    continue;
                }
                let mut vid = |e: usize| -> usize {
                    let [c0, c1] = EDGES[e];
                    let (p0, p1) = (corner(c0), corner(c1));
                    let axis = (0..3).find(|&a| p0[a] != p1[a]).expect("edge spans one axis") as u8;
                    let (lo, hi, vlo, vhi) = if p0 < p1 { (p0, p1, vals[c0], vals[c1]) } else { (p1, p0, vals[c1], vals[c0]) };
                    let key = (grid.index(lo[0], lo[1], lo[2]), axis);
                    *edge_vertex.entry(key).or_insert_with(|| {
                        let t = ((iso - vlo) / (vhi - vlo)).clamp(0.0, 1.0);
                        let a = grid.spec.node(lo[0], lo[1], lo[2]);
                        let b = grid.spec.node(hi[0], hi[1], hi[2]);
                        mesh.vertices.push(std::array::from_fn(|q| a[q] + t * (b[q] - a[q])));
                        mesh.vertices.len() - 1
                    })
                };
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let f = [vid(tri[0] as usize), vid(tri[2] as usize), vid(tri[1] as usize)];
                    mesh.faces.push(f);
                }
            }
        }
    }
    cleanup(mesh)
}

/// Drops faces with repeated indices or zero area and unreferenced vertices.
fn cleanup(mesh: TriangleMesh) -> TriangleMesh {
    let keep: Vec<[usize; 3]> = (0..mesh.faces.len())
        .filter(|&f| {
            let [a, b, c] = mesh.faces[f];
            a != b && b != c && a != c && mesh.face_area(f) > 0.0
        })
        .map(|f| mesh.faces[f])
        .collect();
    reindex(&mesh.vertices, keep)
}

fn reindex(vertices: &[Vec3], faces: Vec<[usize; 3]>) -> TriangleMesh {
    let mut map = vec![usize::MAX; vertices.len()];
    let mut out = TriangleMesh::default();
    for f in faces {
        let nf = f.map(|i| {
            if map[i] == usize::MAX {
                map[i] = out.vertices.len();
                out.vertices.push(vertices[i]);
            }
            map[i]
        });
        out.faces.push(nf);
    }
    out
}

/// Keeps faces whose three vertices all lie inside `bounds`.
pub fn crop_mesh(mesh: &TriangleMesh, bounds: &Aabb) -> TriangleMesh {
    let inside: Vec<bool> = mesh.vertices.iter().map(|&v| bounds.contains(v)).collect();
    let faces = mesh.faces.iter().copied().filter(|f| f.iter().all(|&i| inside[i])).collect();
    reindex(&mesh.vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> impl FnMut(&[Vec3]) -> Result<Vec<f64>> {
        move |p: &[Vec3]| Ok(p.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - r).collect())
    }

    fn norm(v: Vec3) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    #[test]
    fn grid_sampling() {
        let g = sample_grid(|p| Ok(vec![1.0; p.len()]), GridSpec::cubic(5, 1.0)).unwrap();
        assert!(g.values.iter().all(|&v| v == 1.0));
        let g = sample_grid(sphere(0.5), GridSpec::cubic(5, 1.0)).unwrap();
        assert_eq!(g.value(2, 2, 2), -0.5);
        let direct = sphere(0.5)(&[g.spec.node(1, 3, 4)]).unwrap()[0];
        assert_eq!(g.value(1, 3, 4).to_bits(), direct.to_bits());
        assert!(sample_grid(sphere(0.5), GridSpec::cubic(1, 1.0)).is_err());
    }

    #[test]
    fn single_sign_grid_is_empty() {
        let g = sample_grid(|p| Ok(vec![1.0; p.len()]), GridSpec::cubic(4, 1.0)).unwrap();
        assert!(marching_cubes(&g, 0.0).is_empty());
    }

    #[test]
    fn sphere_extraction_accuracy_and_orientation() {
        let spec = GridSpec::cubic(64, 1.0);
        let g = sample_grid(sphere(0.5), spec).unwrap();
        let m = marching_cubes(&g, 0.0);
        assert!(!m.is_empty());
        m.validate().unwrap();
        let voxel = spec.spacing()[0];
        let half_diag = 0.5 * voxel * 3f64.sqrt();
        let max_res = m.vertices.iter().map(|&v| (norm(v) - 0.5).abs()).fold(0.0, f64::max);
        assert!(max_res < half_diag && max_res < 0.027, "{max_res}");
        assert!(max_res < voxel);
        let outward = (0..m.faces.len())
            .filter(|&f| {
                let n = m.face_normal(f);
                let c = m.vertices[m.faces[f][0]];
                n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0
            })
            .count();
        assert!(outward as f64 > 0.999 * m.faces.len() as f64, "{outward}/{}", m.faces.len());
    }

    #[test]
    fn finer_grids_do_not_increase_residual() {
        let res = |n: usize| {
            let m = marching_cubes(&sample_grid(sphere(0.43), GridSpec::cubic(n, 1.0)).unwrap(), 0.0);
            m.vertices.iter().map(|&v| (norm(v) - 0.43).abs()).fold(0.0, f64::max)
        };
        assert!(res(40) <= res(20));
        assert!(res(80) <= res(40));
    }

    #[test]
    fn vertices_lie_on_cell_edges() {
        let spec = GridSpec::cubic(17, 1.0);
        let m = marching_cubes(&sample_grid(sphere(0.6), spec).unwrap(), 0.0);
        let h = spec.spacing()[0];
        for v in &m.vertices {
            let on_grid = v.iter().filter(|&&c| {
                let q = (c + 1.0) / h;
                (q - q.round()).abs() < 1e-9
            });
            assert!(on_grid.count() >= 2);
        }
    }

    fn unit_cube() -> TriangleMesh {
        let vertices: Vec<Vec3> = (0..8).map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect();
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let faces = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        TriangleMesh { vertices, faces }
    }

    #[test]
    fn cropping() {
        let cube = unit_cube();
        let all = crop_mesh(&cube, &Aabb::cube(2.0));
        assert_eq!(all.faces.len(), cube.faces.len());
        assert!(crop_mesh(&cube, &Aabb { min: [5.0; 3], max: [6.0; 3] }).is_empty());
        // Lower half z ≤ 0.5: only the two bottom triangles have all corners at z = 0.
        let lower = Aabb { min: [-1.0, -1.0, -1.0], max: [2.0, 2.0, 0.5] };
        let expected = cube.faces.iter().filter(|f| f.iter().all(|&i| cube.vertices[i][2] <= 0.5)).count();
        assert_eq!(expected, 2);
        assert_eq!(crop_mesh(&cube, &lower).faces.len(), expected);
    }

    #[test]
    fn obj_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let cube = unit_cube();
        cube.save_obj(&p).unwrap();
        assert_eq!(TriangleMesh::load_obj(&p).unwrap(), cube);
    }
}
