//! Reference representations fitted on full-resolution textures: a PCA subspace
//! and a single separable factorization without wavelet decomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::cost::{pca_only_cost, single_level_cost, CostReport, GroupCost, ModelConfig};
use crate::blendshape::{CoeffMatrix, FactorizedSubband};
use crate::error::{Error, Result};
use crate::fitting::{als_fit, factor_texture, mean_texture, solve_alpha, states_from_subbands, Ranks, ALL};
use crate::tensor::{Texture, TextureSequence};

/// Eigenvalues at or below this fraction of the largest are treated as null directions.
const NULL_TOL: f64 = 1e-12;

/// Representation-only cost config for one group covering every channel.
pub fn baseline_config(resolution: usize, channels: usize, ranks: Ranks, levels: usize) -> ModelConfig {
    let mut cfg = ModelConfig::paper();
    cfg.resolution = resolution;
    cfg.levels = levels;
    cfg.dynamic_levels = ranks.levels.len();
    cfg.groups = vec![GroupCost { name: ALL.into(), channels, ranks }];
    cfg.pca_components = 0;
    cfg.sh_eval = false;
    cfg
}

fn square_side(seq: &TextureSequence) -> Result<usize> {
    let (h, w, _) = seq.shape();
    if h != w {
        return Err(Error::Shape(format!("cost accounting needs square textures, got {h}x{w}")));
    }
    Ok(h)
}

/// PCA of mean-centred full-resolution frames.
#[derive(Debug, Clone)]
pub struct PcaBaseline {
    pub mean: Texture,
    /// Orthonormal components; null directions are zero textures.
    pub basis: Vec<Texture>,
    /// Projections of the training frames.
    pub coeffs: Vec<Vec<f64>>,
    /// Eigenvalues of the centred Gram matrix, descending.
    pub spectrum: Vec<f64>,
    pub residual_sq: f64,
    pub centered_energy: f64,
    pub cost: CostReport,
}

impl PcaBaseline {
    pub fn components(&self) -> usize {
        self.basis.len()
    }

    pub fn param_count(&self) -> u64 {
        ((self.basis.len() + 1) * self.mean.len()) as u64
    }

    /// Training residual of the first `k` components.
    pub fn residual_at(&self, k: usize) -> f64 {
        self.spectrum.iter().skip(k).map(|v| v.max(0.0)).sum()
    }

    pub fn project(&self, tex: &Texture) -> Result<Vec<f64>> {
        if !tex.same_shape(&self.mean) {
            return Err(Error::Shape(format!("texture {:?} vs PCA mean {:?}", tex.shape(), self.mean.shape())));
        }
        Ok(self
            .basis
            .iter()
            .map(|b| {
                tex.data()
                    .iter()
                    .zip(self.mean.data())
                    .zip(b.data())
                    .map(|((&x, &m), &bv)| (x as f64 - m as f64) * bv as f64)
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<Texture> {
        if coeffs.len() != self.basis.len() {
            return Err(Error::Shape(format!("{} coefficients for {} components", coeffs.len(), self.basis.len())));
        }
        let mut acc: Vec<f64> = self.mean.data().iter().map(|&v| v as f64).collect();
        for (c, b) in coeffs.iter().zip(&self.basis) {
            for (a, &bv) in acc.iter_mut().zip(b.data()) {
                *a += c * bv as f64;
            }
        }
        let (h, w, ch) = self.mean.shape();
        Texture::new(h, w, ch, acc.into_iter().map(|v| v as f32).collect())
    }

    /// Keeps the first `k` components.
    pub fn truncated(&self, k: usize) -> Result<PcaBaseline> {
        if k > self.basis.len() {
            return Err(Error::Config(format!("cannot keep {k} of {} components", self.basis.len())));
        }
        let (h, _, c) = self.mean.shape();
        Ok(PcaBaseline {
            mean: self.mean.clone(),
            basis: self.basis[..k].to_vec(),
            coeffs: self.coeffs.iter().map(|c| c[..k].to_vec()).collect(),
            spectrum: self.spectrum.clone(),
            residual_sq: self.residual_at(k),
            centered_energy: self.centered_energy,
            cost: pca_only_cost(&baseline_config(h, c, Ranks::new(0, Vec::new()), 0), k)?,
        })
    }
}

/// Fits `k` principal components through the frame Gram matrix.
pub fn baseline_pca(seq: &TextureSequence, k: usize) -> Result<PcaBaseline> {
    let f = seq.len();
    if f < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 frames, got {f}")));
    }
    if k > f {
        log::warn!("requested {k} PCA components from {f} frames");
        return Err(Error::Config(format!("{k} PCA components exceed {f} frames")));
    }
    let side = square_side(seq)?;
    let (h, w, c) = seq.shape();
    let mean = mean_texture(seq.frames().iter());
    let mu: Vec<f64> = mean.data().iter().map(|&v| v as f64).collect();
    let frames = seq.frames();

    let pairs: Vec<(usize, usize)> = (0..f).flat_map(|i| (i..f).map(move |j| (i, j))).collect();
    let dots: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            frames[i]
                .data()
                .iter()
                .zip(frames[j].data())
                .zip(&mu)
                .map(|((&a, &b), &m)| (a as f64 - m) * (b as f64 - m))
                .sum()
        })
        .collect();
    let mut gram = DMatrix::zeros(f, f);
    for (&(i, j), &d) in pairs.iter().zip(&dots) {
        gram[(i, j)] = d;
        gram[(j, i)] = d;
    }
    let centered_energy = gram.trace();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let top = spectrum[0];

    let mut basis = Vec::with_capacity(k);
    let mut coeffs = vec![vec![0.0; k]; f];
    for (slot, &col) in order.iter().take(k).enumerate() {
        let lambda = spectrum[slot];
        if lambda <= NULL_TOL * top || lambda <= 0.0 {
            basis.push(Texture::zeros(h, w, c));
            continue;
        }
        let s = lambda.sqrt();
        let v: Vec<f64> = (0..f).map(|i| eig.eigenvectors[(i, col)]).collect();
        let data: Vec<f32> = (0..h * w * c)
            .into_par_iter()
            .map(|t| {
                let mut acc = 0.0;
                for (fi, fr) in frames.iter().enumerate() {
                    acc += v[fi] * (fr.data()[t] as f64 - mu[t]);
                }
                (acc / s) as f32
            })
            .collect();
        basis.push(Texture::new(h, w, c, data)?);
        for (fi, row) in coeffs.iter_mut().enumerate() {
            row[slot] = s * v[fi];
        }
    }
    let residual_sq = spectrum.iter().skip(k).sum();
    Ok(PcaBaseline {
        mean,
        basis,
        coeffs,
        spectrum,
        residual_sq,
        centered_energy,
        cost: pca_only_cost(&baseline_config(side, c, Ranks::new(0, Vec::new()), 0), k)?,
    })
}

/// One separable factorization `mean + Σ α_r h_r w_rᵀ` per channel at full resolution.
#[derive(Debug, Clone)]
pub struct SingleLevelBaseline {
    pub subband: FactorizedSubband,
    /// Fitted coefficients of the training frames.
    pub alphas: Vec<CoeffMatrix>,
    pub residual_sq: f64,
    pub centered_energy: f64,
    /// ALS objective per channel.
    pub traces: Vec<Vec<f64>>,
    pub cost: CostReport,
}

impl SingleLevelBaseline {
    pub fn rank(&self) -> usize {
        self.subband.rank()
    }

    pub fn param_count(&self) -> u64 {
        (self.subband.mean.len() + self.subband.h.len() + self.subband.w.len()) as u64
    }

    pub fn eval(&self, alpha: &CoeffMatrix) -> Result<Texture> {
        let c = self.subband.mean.channels();
        if alpha.rank() != self.rank() || alpha.channels() != c {
            return Err(Error::Shape(format!(
                "coefficients {}x{} for rank {} over {c} channels",
                alpha.rank(),
                alpha.channels(),
                self.rank()
            )));
        }
        Ok(self.subband.eval(alpha))
    }

    /// Least-squares coefficients of a texture against the fixed factors.
    pub fn solve(&self, tex: &Texture) -> Result<CoeffMatrix> {
        let (h, w, c) = self.subband.mean.shape();
        if !tex.same_shape(&self.subband.mean) {
            return Err(Error::Shape(format!("texture {:?} vs factorization {:?}", tex.shape(), (h, w, c))));
        }
        let planes = crate::fitting::centered_planes(tex, &self.subband.mean);
        let states = states_from_subbands(std::slice::from_ref(&self.subband));
        let mut out = CoeffMatrix::zeros(self.rank(), c);
        for (ch, (plane, st)) in planes.into_iter().zip(&states).enumerate() {
            let a = solve_alpha(&[plane], st, h, w)?;
            for (k, v) in a.into_iter().enumerate() {
                out.set(k, ch, v);
            }
        }
        Ok(out)
    }
}

/// Coupled ALS at rank `rank` on mean-centred full-resolution frames.
pub fn baseline_single_level(
    seq: &TextureSequence,
    rank: usize,
    sweeps: usize,
    seed: u64,
) -> Result<SingleLevelBaseline> {
    if seq.is_empty() {
        return Err(Error::Config("single-level fit needs at least one frame".into()));
    }
    let side = square_side(seq)?;
    let (h, w, c) = seq.shape();
    if rank > h.min(w) {
        return Err(Error::Config(format!("rank {rank} exceeds min({h}, {w})")));
    }
    let mean = mean_texture(seq.frames().iter());
    let outs = (0..c)
        .into_par_iter()
        .map(|ch| {
            let data: Vec<Vec<f64>> = seq
                .frames()
                .iter()
                .map(|t| {
                    t.data()
                        .iter()
                        .skip(ch)
                        .step_by(c)
                        .zip(mean.data().iter().skip(ch).step_by(c))
                        .map(|(&x, &m)| x as f64 - m as f64)
                        .collect()
                })
                .collect();
            let ch_seed = seed ^ (ch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            als_fit(&[data], h, w, rank, sweeps, ch_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let states: Vec<_> = outs.iter().map(|o| &o.state).collect();
    let subband = FactorizedSubband {
        mean,
        h: factor_texture(&states, 0, h, rank, true)?,
        w: factor_texture(&states, 0, w, rank, false)?,
    };
    let alphas = (0..seq.len())
        .map(|f| {
            let mut m = CoeffMatrix::zeros(rank, c);
            for (ch, st) in states.iter().enumerate() {
                for k in 0..rank {
                    m.set(k, ch, st.alpha[f * rank + k]);
                }
            }
            m
        })
        .collect();
    Ok(SingleLevelBaseline {
        subband,
        alphas,
        residual_sq: outs.iter().map(|o| o.objective()).sum(),
        centered_energy: outs.iter().map(|o| o.energy).sum(),
        traces: outs.into_iter().map(|o| o.trace).collect(),
        cost: single_level_cost(&baseline_config(side, c, Ranks::new(0, Vec::new()), 0), &[rank])?,
    })
}
