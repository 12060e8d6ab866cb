//! World-space Gaussians from an attribute texture on a posed template.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;

use super::mesh::{interpolate, texel_frames, texel_rotations, TemplateMesh, TexelMap};
use crate::error::{Error, Result};
use crate::sh::{wigner_rotate_sh1, Sh1Coefficients, TexelRotation, SH_COEFFS};
use crate::tensor::{ChannelLayout, Texture, OFFSET_D, OPACITY_A, ROTATION_Q, SCALE_S, SH_ETA};

/// Floats per exported Gaussian: position, rotation `wxyz`, scale, opacity, SH.
pub const GAUSSIAN_COLUMNS: usize = 3 + 4 + 3 + 1 + SH_COEFFS;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    /// Posed-space SH coefficients.
    pub sh: [f64; SH_COEFFS],
}

impl Gaussian {
    pub fn to_row(&self) -> [f32; GAUSSIAN_COLUMNS] {
        let mut row = [0f32; GAUSSIAN_COLUMNS];
        let vals = self
            .position
            .iter()
            .chain(&self.rotation)
            .chain(&self.scale)
            .chain(std::iter::once(&self.opacity))
            .chain(&self.sh);
        for (r, v) in row.iter_mut().zip(vals) {
            *r = *v as f32;
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    /// Row-major texel index of each Gaussian.
    pub texels: Vec<usize>,
    /// Texels without UV coverage.
    pub skipped: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Channels {
    offset: std::ops::Range<usize>,
    rotation: std::ops::Range<usize>,
    scale: std::ops::Range<usize>,
    opacity: usize,
    sh: std::ops::Range<usize>,
}

impl Channels {
    fn resolve(layout: &ChannelLayout) -> Result<Self> {
        let c = Channels {
            offset: layout.range_of(OFFSET_D)?,
            rotation: layout.range_of(ROTATION_Q)?,
            scale: layout.range_of(SCALE_S)?,
            opacity: layout.range_of(OPACITY_A)?.start,
            sh: layout.range_of(SH_ETA)?,
        };
        if c.offset.len() != 3 || c.rotation.len() != 4 || c.scale.len() != 3 || c.sh.len() != SH_COEFFS {
            return Err(Error::Shape("splat channel groups have unexpected widths".into()));
        }
        Ok(c)
    }
}

/// Builds one Gaussian per covered texel, in row-major texel order.
///
/// Offsets and rotations are expressed in the texel's posed tangent frame; SH
/// coefficients are rotated from the canonical to the posed frame.
pub fn assemble_gaussians(
    texture: &Texture,
    layout: &ChannelLayout,
    posed: &[[f64; 3]],
    mesh: &TemplateMesh,
    map: &TexelMap,
) -> Result<GaussianCloud> {
    if texture.channels() != layout.channels() {
        return Err(Error::Shape(format!("texture has {} channels, layout {}", texture.channels(), layout.channels())));
    }
    if (texture.height(), texture.width()) != (map.height, map.width) {
        return Err(Error::Shape(format!(
            "texture is {}x{}, texel map {}x{}",
            texture.height(),
            texture.width(),
            map.height,
            map.width
        )));
    }
    if posed.len() != mesh.vertices.len() {
        return Err(Error::Shape(format!(
            "{} posed vertices for a {}-vertex template",
            posed.len(),
            mesh.vertices.len()
        )));
    }
    let ch = Channels::resolve(layout)?;
    let canon_frames = texel_frames(&mesh.vertices, mesh, map);
    let posed_frames = texel_frames(posed, mesh, map);
    let rotations = texel_rotations(&canon_frames, &posed_frames);
    let items: Vec<(usize, Gaussian)> = map
        .samples
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .map(|(i, s)| {
            let texel: Vec<f64> = texture.texel(i / map.width, i % map.width).iter().map(|&v| v as f64).collect();
            let frame = posed_frames[i].expect("covered texel has a frame");
            let r_tex = TexelRotation::new(rotations[i].expect("covered texel has a rotation"))?;
            let d = Vector3::from_column_slice(&texel[ch.offset.clone()]);
            let p = interpolate(posed, mesh, &s) + frame * d;
            let q = &texel[ch.rotation.clone()];
            let q = Quaternion::new(q[0], q[1], q[2], q[3]);
            let q_local = if q.norm() > 0.0 { UnitQuaternion::from_quaternion(q) } else { UnitQuaternion::identity() };
            let q_frame = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(frame));
            let q_world = (q_frame * q_local).into_inner();
            let sh = wigner_rotate_sh1(&Sh1Coefficients::from_slice(&texel[ch.sh.clone()])?, &r_tex);
            Ok((
                i,
                Gaussian {
                    position: [p.x, p.y, p.z],
                    rotation: [q_world.w, q_world.i, q_world.j, q_world.k],
                    scale: std::array::from_fn(|k| texel[ch.scale.start + k].exp()),
                    opacity: sigmoid(texel[ch.opacity]),
                    sh: sh.0,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let skipped = map.samples.len() - items.len();
    let (texels, gaussians) = items.into_iter().unzip();
    Ok(GaussianCloud { gaussians, texels, skipped })
}

/// Per-texel rotations from canonical to posed frame, for callers that evaluate colour.
pub fn texel_rotation_field(posed: &[[f64; 3]], mesh: &TemplateMesh, map: &TexelMap) -> Vec<Option<Matrix3<f64>>> {
    texel_rotations(&texel_frames(&mesh.vertices, mesh, map), &texel_frames(posed, mesh, map))
}

/// Writes the cloud as little-endian `f32`, [`GAUSSIAN_COLUMNS`] values per row.
pub fn write_gaussians(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.gaussians.len() * GAUSSIAN_COLUMNS * 4);
    for g in &cloud.gaussians {
        for v in g.to_row() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mesh::{build_texel_map, tests::square_mesh, texel_center, TexelSample};
    use crate::geometry::skinning::{Skeleton, SkinInfluences};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn student_texture(h: usize, w: usize, mut f: impl FnMut(usize) -> f32) -> Texture {
        let layout = ChannelLayout::student();
        let q = layout.range_of(ROTATION_Q).unwrap().start;
        Texture::from_fn(h, w, layout.channels(), |_, _, c| if c == q { 1.0 } else { f(c) })
    }

    /// Independent reference: barycentric weights from a 3x3 solve over all triangles.
    fn reference_point(mesh: &TemplateMesh, posed: &[[f64; 3]], uv: [f64; 2]) -> Option<Vector3<f64>> {
        for tri in &mesh.triangles {
            let [a, b, c] = tri.map(|i| mesh.uv[i as usize]);
            let m = DMatrix::from_row_slice(3, 3, &[a[0], b[0], c[0], a[1], b[1], c[1], 1.0, 1.0, 1.0]);
            let Some(inv) = m.try_inverse() else { continue };
            let l = inv * nalgebra::DVector::from_vec(vec![uv[0], uv[1], 1.0]);
            if l.iter().all(|v| *v >= -1e-12) {
                let mut p = Vector3::zeros();
                for k in 0..3 {
                    p += Vector3::from(posed[tri[k] as usize]) * l[k];
                }
                return Some(p);
            }
        }
        None
    }

    fn random_mesh(rng: &mut impl Rng) -> TemplateMesh {
        // a jittered 5x5 grid with UVs on the regular lattice
        let n = 5;
        let mut vertices = Vec::new();
        let mut uv = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let (u, v) = (i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64);
                uv.push([u, v]);
                vertices.push([u + rng.random_range(-0.1..0.1), v, rng.random_range(-0.3..0.3)]);
            }
        }
        let mut triangles = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = (j * n + i) as u32;
                triangles.push([a, a + 1, a + n as u32 + 1]);
                triangles.push([a, a + n as u32 + 1, a + n as u32]);
            }
        }
        TemplateMesh {
            skin: vec![SkinInfluences::single(0); vertices.len()],
            vertices,
            triangles,
            uv,
            skeleton: Skeleton::chain(1, Vector3::z(), 1.0).unwrap(),
        }
    }

    #[test]
    fn zero_offsets_lie_on_the_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mesh = random_mesh(&mut rng);
        let posed: Vec<[f64; 3]> = mesh.vertices.iter().map(|p| [p[0] * 2.0, p[1] + p[2], p[2] - 1.0]).collect();
        let map = build_texel_map(&mesh, 16, 16);
        let tex = student_texture(16, 16, |_| 0.0);
        let cloud = assemble_gaussians(&tex, &ChannelLayout::student(), &posed, &mesh, &map).unwrap();
        assert_eq!(cloud.gaussians.len(), 256);
        assert_eq!(cloud.skipped, 0);
        for (g, &t) in cloud.gaussians.iter().zip(&cloud.texels) {
            let want = reference_point(&mesh, &posed, texel_center(t / 16, t % 16, 16, 16)).unwrap();
            assert!((Vector3::from(g.position) - want).norm() <= 1e-6);
            assert_eq!(g.scale, [1.0; 3]);
            assert_eq!(g.opacity, 0.5);
        }
    }

    #[test]
    fn centroid_texel_maps_to_centroid() {
        let mesh = TemplateMesh {
            vertices: vec![[0.0, 0.0, 1.0], [3.0, 0.0, 1.0], [0.0, 3.0, 1.0]],
            triangles: vec![[0, 1, 2]],
            uv: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            skin: vec![SkinInfluences::single(0); 3],
            skeleton: Skeleton::chain(1, Vector3::z(), 1.0).unwrap(),
        };
        let s = TexelSample { triangle: 0, bary: [1.0 / 3.0; 3] };
        let p = interpolate(&mesh.vertices, &mesh, &s);
        assert!((p - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn offsets_follow_the_posed_frame() {
        let mesh = square_mesh();
        let map = build_texel_map(&mesh, 4, 4);
        let layout = ChannelLayout::student();
        let off = layout.range_of(OFFSET_D).unwrap().start;
        // offset of 0.25 along the normal
        let tex = student_texture(4, 4, |c| if c == off + 2 { 0.25 } else { 0.0 });
        // rotate the square 90 degrees about x: the normal becomes -y
        let posed: Vec<[f64; 3]> = mesh.vertices.iter().map(|p| [p[0], -p[2], p[1]]).collect();
        let cloud = assemble_gaussians(&tex, &layout, &posed, &mesh, &map).unwrap();
        for (g, &t) in cloud.gaussians.iter().zip(&cloud.texels) {
            let c = texel_center(t / 4, t % 4, 4, 4);
            let want = [c[0], -0.25, c[1]];
            assert!((0..3).all(|k| (g.position[k] - want[k]).abs() < 1e-12));
            let q = UnitQuaternion::from_quaternion(Quaternion::new(
                g.rotation[0],
                g.rotation[1],
                g.rotation[2],
                g.rotation[3],
            ));
            let expect = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
            assert!(q.angle_to(&expect) < 1e-9);
        }
    }

    #[test]
    fn uncovered_texels_are_counted() {
        let mut mesh = square_mesh();
        mesh.triangles.truncate(1);
        let map = build_texel_map(&mesh, 8, 8);
        let tex = student_texture(8, 8, |_| 0.1);
        let cloud = assemble_gaussians(&tex, &ChannelLayout::student(), &mesh.vertices, &mesh, &map).unwrap();
        assert_eq!(cloud.gaussians.len() + cloud.skipped, 64);
        assert_eq!(cloud.skipped, 28);
        assert!(cloud.texels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn export_has_fixed_row_width() {
        let mesh = square_mesh();
        let map = build_texel_map(&mesh, 4, 4);
        let tex = student_texture(4, 4, |_| 0.0);
        let cloud = assemble_gaussians(&tex, &ChannelLayout::student(), &mesh.vertices, &mesh, &map).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.f32");
        write_gaussians(&path, &cloud).unwrap();
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, 16 * GAUSSIAN_COLUMNS * 4);
        assert_eq!(GAUSSIAN_COLUMNS, 23);
    }
}
