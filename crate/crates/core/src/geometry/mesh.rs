//! Rigged template mesh, UV texel coverage and per-texel tangent frames.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::skinning::{Skeleton, SkinInfluences, MAX_INFLUENCES};
use crate::error::{Error, Result};
use crate::tensor::{ensure_dir, read_blob, read_json, write_blob, write_json, BlobEntry, Dtype};

pub const MESH_MANIFEST: &str = "mesh.json";

/// Canonical-pose template with UVs, skin weights and skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub skin: Vec<SkinInfluences>,
    pub skeleton: Skeleton,
}

#[derive(Serialize, Deserialize)]
struct MeshManifest {
    version: u32,
    vertices: usize,
    triangles: usize,
    skeleton: Skeleton,
    positions: BlobEntry,
    uv: BlobEntry,
    weights: BlobEntry,
    joints: BlobEntry,
    faces: BlobEntry,
}

impl TemplateMesh {
    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        if self.uv.len() != v || self.skin.len() != v {
            return Err(Error::Shape(format!("{v} vertices, {} uvs, {} skin entries", self.uv.len(), self.skin.len())));
        }
        if let Some(t) = self.triangles.iter().flatten().find(|&&i| i as usize >= v) {
            return Err(Error::Config(format!("triangle index {t} out of range ({v} vertices)")));
        }
        if let Some(uv) = self.uv.iter().find(|uv| uv.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(Error::Config(format!("uv {uv:?} outside the unit square")));
        }
        for s in &self.skin {
            s.validate(self.skeleton.len())?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        ensure_dir(dir)?;
        let (v, t) = (self.vertices.len(), self.triangles.len());
        let m = MeshManifest {
            version: 1,
            vertices: v,
            triangles: t,
            skeleton: self.skeleton.clone(),
            positions: BlobEntry::new("mesh_positions.f32", Dtype::F32, vec![v, 3]),
            uv: BlobEntry::new("mesh_uv.f32", Dtype::F32, vec![v, 2]),
            weights: BlobEntry::new("mesh_weights.f32", Dtype::F32, vec![v, MAX_INFLUENCES]),
            joints: BlobEntry::new("mesh_joints.i32", Dtype::I32, vec![v, MAX_INFLUENCES]),
            faces: BlobEntry::new("mesh_triangles.i32", Dtype::I32, vec![t, 3]),
        };
        let f32s = |it: &mut dyn Iterator<Item = f64>| it.map(|x| x as f32).collect::<Vec<f32>>();
        write_blob(dir, &m.positions, &f32s(&mut self.vertices.iter().flatten().copied()))?;
        write_blob(dir, &m.uv, &f32s(&mut self.uv.iter().flatten().copied()))?;
        write_blob(dir, &m.weights, &f32s(&mut self.skin.iter().flat_map(|s| s.weights)))?;
        let joints: Vec<i32> = self.skin.iter().flat_map(|s| s.joints.map(|j| j as i32)).collect();
        write_blob(dir, &m.joints, &joints)?;
        let faces: Vec<i32> = self.triangles.iter().flat_map(|t| t.map(|i| i as i32)).collect();
        write_blob(dir, &m.faces, &faces)?;
        write_json(&dir.join(MESH_MANIFEST), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MESH_MANIFEST);
        let m: MeshManifest = read_json(&path)?;
        let (v, t) = (m.vertices, m.triangles);
        if m.version != 1
            || m.positions.shape != [v, 3]
            || m.uv.shape != [v, 2]
            || m.weights.shape != [v, MAX_INFLUENCES]
            || m.joints.shape != [v, MAX_INFLUENCES]
            || m.faces.shape != [t, 3]
        {
            return Err(Error::manifest(&path, "inconsistent mesh manifest"));
        }
        let pos = read_blob::<f32>(dir, &m.positions)?;
        let uv = read_blob::<f32>(dir, &m.uv)?;
        let weights = read_blob::<f32>(dir, &m.weights)?;
        let joints = read_blob::<i32>(dir, &m.joints)?;
        let faces = read_blob::<i32>(dir, &m.faces)?;
        if joints.iter().chain(&faces).any(|i| *i < 0) {
            return Err(Error::manifest(&path, "negative index"));
        }
        let mesh = TemplateMesh {
            vertices: pos.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect(),
            triangles: faces.chunks_exact(3).map(|c| [c[0] as u32, c[1] as u32, c[2] as u32]).collect(),
            uv: uv.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect(),
            skin: (0..v)
                .map(|i| SkinInfluences {
                    joints: std::array::from_fn(|k| joints[i * MAX_INFLUENCES + k] as u32),
                    weights: std::array::from_fn(|k| weights[i * MAX_INFLUENCES + k] as f64),
                })
                .collect(),
            skeleton: m.skeleton,
        };
        mesh.validate().map_err(|e| Error::manifest(&path, e.to_string()))?;
        Ok(mesh)
    }
}

/// A texel centre located inside one UV triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelSample {
    pub triangle: u32,
    pub bary: [f64; 3],
}

/// Row-major coverage of a `height × width` texture by the mesh UV layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TexelMap {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Option<TexelSample>>,
    /// Texel centres claimed by more than one triangle; the first triangle keeps them.
    pub overlaps: usize,
}

impl TexelMap {
    pub fn covered(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }
}

/// UV coordinate of texel `(y, x)`'s centre; `u` runs along the width.
pub fn texel_center(y: usize, x: usize, height: usize, width: usize) -> [f64; 2] {
    [(x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64]
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Barycentric coordinates of `p` in the 2D triangle, or `None` for degenerate triangles.
pub fn barycentric_2d(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let sub = |u: [f64; 2], v: [f64; 2]| [u[0] - v[0], u[1] - v[1]];
    let area = cross2(sub(b, a), sub(c, a));
    if area.abs() <= 1e-300 {
        return None;
    }
    let l0 = cross2(sub(b, p), sub(c, p)) / area;
    let l1 = cross2(sub(c, p), sub(a, p)) / area;
    Some([l0, l1, 1.0 - l0 - l1])
}

pub fn build_texel_map(mesh: &TemplateMesh, height: usize, width: usize) -> TexelMap {
    let mut samples = vec![None; height * width];
    let mut overlaps = 0;
    const EPS: f64 = 1e-12;
    for (ti, tri) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| mesh.uv[i as usize]);
        let lo = |k: usize| a[k].min(b[k]).min(c[k]);
        let hi = |k: usize| a[k].max(b[k]).max(c[k]);
        // texel x covers centre (x + 0.5) / width
        let x0 = ((lo(0) * width as f64 - 0.5).floor().max(0.0)) as usize;
        let x1 = ((hi(0) * width as f64 - 0.5).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let y0 = ((lo(1) * height as f64 - 0.5).floor().max(0.0)) as usize;
        let y1 = ((hi(1) * height as f64 - 0.5).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = texel_center(y, x, height, width);
                let Some(l) = barycentric_2d(p, a, b, c) else { continue };
                if l.iter().any(|v| *v < -EPS) {
                    continue;
                }
                let slot = &mut samples[y * width + x];
                if slot.is_some() {
                    overlaps += 1;
                } else {
                    *slot = Some(TexelSample { triangle: ti as u32, bary: l });
                }
            }
        }
    }
    if overlaps > 0 {
        log::warn!("{overlaps} texel centres are covered by more than one UV triangle");
    }
    TexelMap { height, width, samples, overlaps }
}

/// Barycentric point of `vertices` for one sample.
pub fn interpolate(vertices: &[[f64; 3]], mesh: &TemplateMesh, s: &TexelSample) -> Vector3<f64> {
    let tri = mesh.triangles[s.triangle as usize];
    (0..3).fold(Vector3::zeros(), |acc, k| acc + Vector3::from(vertices[tri[k] as usize]) * s.bary[k])
}

/// Area-weighted vertex normals and UV tangents for a given vertex placement.
fn vertex_frames(vertices: &[[f64; 3]], mesh: &TemplateMesh) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut normals = vec![Vector3::zeros(); vertices.len()];
    let mut tangents = vec![Vector3::zeros(); vertices.len()];
    for tri in &mesh.triangles {
        let [i0, i1, i2] = tri.map(|i| i as usize);
        let p0 = Vector3::from(vertices[i0]);
        let (e1, e2) = (Vector3::from(vertices[i1]) - p0, Vector3::from(vertices[i2]) - p0);
        let (uv0, uv1, uv2) = (mesh.uv[i0], mesh.uv[i1], mesh.uv[i2]);
        let (du1, dv1) = (uv1[0] - uv0[0], uv1[1] - uv0[1]);
        let (du2, dv2) = (uv2[0] - uv0[0], uv2[1] - uv0[1]);
        let n = e1.cross(&e2);
        let det = du1 * dv2 - du2 * dv1;
        // scale the tangent by the triangle's area so large faces dominate
        let t = if det.abs() > 1e-300 { (e1 * dv2 - e2 * dv1) * (n.norm() / det) } else { Vector3::zeros() };
        for i in [i0, i1, i2] {
            normals[i] += n;
            tangents[i] += t;
        }
    }
    (normals, tangents)
}

/// Orthonormal `[T B N]` with `B = N × T`.
fn frame_from(n: Vector3<f64>, t: Vector3<f64>) -> Matrix3<f64> {
    let n = if n.norm() > 0.0 { n.normalize() } else { Vector3::z() };
    let mut t = t - n * t.dot(&n);
    if t.norm() <= 1e-12 {
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        t = helper - n * helper.dot(&n);
    }
    let t = t.normalize();
    let b = n.cross(&t);
    Matrix3::from_columns(&[t, b, n])
}

/// Tangent frames at every covered texel; `None` where the texel is uncovered.
pub fn texel_frames(vertices: &[[f64; 3]], mesh: &TemplateMesh, map: &TexelMap) -> Vec<Option<Matrix3<f64>>> {
    let (normals, tangents) = vertex_frames(vertices, mesh);
    map.samples
        .iter()
        .map(|s| {
            s.map(|s| {
                let tri = mesh.triangles[s.triangle as usize];
                let mix = |v: &[Vector3<f64>]| (0..3).fold(Vector3::zeros(), |a, k| a + v[tri[k] as usize] * s.bary[k]);
                frame_from(mix(&normals), mix(&tangents))
            })
        })
        .collect()
}

/// Per-texel rotation taking the canonical tangent frame to the posed one.
pub fn texel_rotations(
    canonical: &[Option<Matrix3<f64>>],
    posed: &[Option<Matrix3<f64>>],
) -> Vec<Option<Matrix3<f64>>> {
    canonical
        .iter()
        .zip(posed)
        .map(|(c, p)| match (c, p) {
            (Some(c), Some(p)) => Some(p * c.transpose()),
            _ => None,
        })
        .collect()
}
