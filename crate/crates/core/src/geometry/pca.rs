//! Linear subspace over flattened template vertex positions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complete_orthonormal, truncated_svd};
use crate::tensor::{ensure_dir, read_blob, read_json, write_blob, write_json, BlobEntry, Dtype};

pub const PCA_MANIFEST: &str = "pca.json";

/// Mean plus `K` orthonormal directions in `R^{3V}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaSubspace {
    pub mean: Vec<f64>,
    /// `K` rows of length `3V`.
    pub basis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub subspace: PcaSubspace,
    /// Projections of the training rows.
    pub coeffs: Vec<Vec<f64>>,
    pub residual_sq: f64,
    pub centered_energy: f64,
}

#[derive(Serialize, Deserialize)]
struct PcaManifest {
    version: u32,
    vertices: usize,
    components: usize,
    mean: BlobEntry,
    basis: BlobEntry,
}

/// Fits the mean and top-`k` principal directions of `frames` (each of length `3V`).
pub fn build_pca<R: AsRef<[f64]> + Sync>(frames: &[R], k: usize) -> Result<PcaFit> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 frames, got {n}")));
    }
    let dim = frames[0].as_ref().len();
    if frames.iter().any(|f| f.as_ref().len() != dim) {
        return Err(Error::Shape("PCA frames differ in length".into()));
    }
    if k > n.min(dim) {
        return Err(Error::Config(format!("{k} components exceed min(frames, dims) = {}", n.min(dim))));
    }
    let mut mean = vec![0.0; dim];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> =
        frames.iter().map(|f| f.as_ref().iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let centered_energy = centered.iter().flatten().map(|v| v * v).sum();
    let svd = truncated_svd(&centered, k);
    if svd.rank < k {
        log::warn!("PCA: only {} of {k} directions carry variance; completing the basis", svd.rank);
    }
    let mut basis = svd.basis;
    complete_orthonormal(&mut basis);
    let subspace = PcaSubspace { mean, basis };
    let coeffs: Vec<Vec<f64>> = centered.iter().map(|x| subspace.project_centered(x)).collect();
    let residual_sq = centered
        .iter()
        .zip(&coeffs)
        .map(|(x, z)| {
            let rec = subspace.combine(z);
            x.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    Ok(PcaFit { subspace, coeffs, residual_sq, centered_energy })
}

impl PcaSubspace {
    pub fn components(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    /// Stored reals: basis plus mean.
    pub fn param_count(&self) -> usize {
        self.dim() * (self.components() + 1)
    }

    fn project_centered(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|b| b.iter().zip(x).map(|(u, v)| u * v).sum()).collect()
    }

    fn combine(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (b, &zk) in self.basis.iter().zip(z) {
            for (o, v) in out.iter_mut().zip(b) {
                *o += zk * v;
            }
        }
        out
    }

    /// `mean + basis · z` as flat `3V` values.
    pub fn decode_flat(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.components() {
            return Err(Error::Shape(format!("expected {} PCA coefficients, got {}", self.components(), z.len())));
        }
        let mut out = self.combine(z);
        out.iter_mut().zip(&self.mean).for_each(|(o, m)| *o += m);
        Ok(out)
    }

    /// `basisᵀ · (x − mean)` for flat `3V` values.
    pub fn project_flat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("expected {} values, got {}", self.dim(), x.len())));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.project_centered(&c))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let mean = BlobEntry::new("pca_mean.f64", Dtype::F64, vec![self.dim()]);
        let basis = BlobEntry::new("pca_basis.f64", Dtype::F64, vec![self.components(), self.dim()]);
        write_blob(dir, &mean, &self.mean)?;
        write_blob(dir, &basis, &self.basis.concat())?;
        write_json(
            &dir.join(PCA_MANIFEST),
            &PcaManifest { version: 1, vertices: self.vertex_count(), components: self.components(), mean, basis },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PCA_MANIFEST);
        let m: PcaManifest = read_json(&path)?;
        let dim = 3 * m.vertices;
        if m.version != 1 || m.mean.shape != [dim] || m.basis.shape != [m.components, dim] {
            return Err(Error::manifest(&path, "inconsistent PCA manifest"));
        }
        let mean = read_blob::<f64>(dir, &m.mean)?;
        let flat = read_blob::<f64>(dir, &m.basis)?;
        let basis =
            if dim == 0 { vec![Vec::new(); m.components] } else { flat.chunks(dim).map(<[f64]>::to_vec).collect() };
        Ok(PcaSubspace { mean, basis })
    }
}

/// Decodes `z` to `V` vertex positions.
pub fn pca_decode(sub: &PcaSubspace, z: &[f64]) -> Result<Vec<[f64; 3]>> {
    Ok(unflatten(&sub.decode_flat(z)?))
}

/// Projects `V` vertex positions onto the subspace.
pub fn pca_project(sub: &PcaSubspace, vertices: &[[f64; 3]]) -> Result<Vec<f64>> {
    if vertices.len() != sub.vertex_count() {
        return Err(Error::Shape(format!("expected {} vertices, got {}", sub.vertex_count(), vertices.len())));
    }
    sub.project_flat(&flatten(vertices))
}

pub fn flatten(vertices: &[[f64; 3]]) -> Vec<f64> {
    vertices.iter().flatten().copied().collect()
}

pub fn unflatten(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}
