//! Closed-form LL blendshape fitting by per-channel truncated SVD.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{centered_planes, SubbandDataset};
use crate::blendshape::{CoeffMatrix, LlBlendshapeBank};
use crate::error::{Error, Result};
use crate::linalg::{solve_gram_right, truncated_svd};
use crate::tensor::Texture;

#[derive(Debug, Clone)]
pub struct LlFit {
    pub bank: LlBlendshapeBank,
    /// One coefficient matrix per training frame.
    pub alphas: Vec<CoeffMatrix>,
    /// Squared Frobenius residual of the centred frames, summed over channels.
    pub residual_sq: f64,
    /// Energy of the centred frames.
    pub centered_energy: f64,
}

/// Mean plus top-`rank` principal images per channel of the LL band.
pub fn fit_ll(dataset: &SubbandDataset, rank: usize) -> Result<LlFit> {
    let frames = dataset.frames();
    let (h, w, c) = dataset.ll_mean.shape();
    if frames < rank {
        log::warn!("fitting {rank} LL bases to only {frames} frames");
    }
    let per_frame: Vec<Vec<Vec<f64>>> =
        dataset.pyramids.iter().map(|p| centered_planes(&p.ll, &dataset.ll_mean)).collect();
    let fits: Vec<_> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let rows: Vec<&[f64]> = per_frame.iter().map(|f| f[ch].as_slice()).collect();
            let energy: f64 = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum();
            (truncated_svd(&rows, rank), energy)
        })
        .collect();
    let degenerate = fits.iter().filter(|(f, _)| f.rank < rank).count();
    if degenerate > 0 {
        log::warn!(
            "{degenerate} of {c} LL channels have fewer than {rank} informative directions; padding with zero bases"
        );
    }
    let bases = (0..rank)
        .map(|r| {
            let planes: Vec<Vec<f64>> = fits.iter().map(|(f, _)| f.basis[r].clone()).collect();
            Texture::from_planes(h, w, &planes)
        })
        .collect::<Result<Vec<_>>>()?;
    let alphas = (0..frames)
        .map(|f| {
            let mut m = CoeffMatrix::zeros(rank, c);
            for (ch, (fit, _)) in fits.iter().enumerate() {
                for r in 0..rank {
                    m.set(r, ch, fit.coeffs[f][r]);
                }
            }
            m
        })
        .collect();
    Ok(LlFit {
        bank: LlBlendshapeBank { mean: dataset.ll_mean.clone(), bases },
        alphas,
        residual_sq: fits.iter().map(|(f, _)| f.residual_sq).sum(),
        centered_energy: fits.iter().map(|(_, e)| e).sum(),
    })
}

/// Least-squares LL coefficients of one texture against fixed bases.
pub fn solve_ll_coefficients(bank: &LlBlendshapeBank, ll: &Texture) -> Result<CoeffMatrix> {
    bank.mean.expect_shape(ll, "LL band")?;
    let c = ll.channels();
    let rank = bank.rank();
    let target = centered_planes(ll, &bank.mean);
    let bases: Vec<Vec<Vec<f64>>> = bank.bases.iter().map(|b| b.planes()).collect();
    let mut out = CoeffMatrix::zeros(rank, c);
    if rank == 0 {
        return Ok(out);
    }
    for ch in 0..c {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let g = DMatrix::from_fn(rank, rank, |i, j| dot(&bases[i][ch], &bases[j][ch]));
        let b: Vec<f64> = (0..rank).map(|r| dot(&bases[r][ch], &target[ch])).collect();
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let x =
            solve_gram_right(&g, &b, 1).map_err(|e| Error::Numerical(format!("LL coefficients, channel {ch}: {e}")))?;
        for r in 0..rank {
            out.set(r, ch, x[r]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blendshape::eval_ll;
    use crate::fitting::build_subband_dataset;
    use crate::tensor::{ChannelLayout, TextureSequence};
    use crate::wavelet::WaveletFilter;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset_from_ll(frames: Vec<Texture>) -> SubbandDataset {
        // one level of synthesis is enough: LL of a level-0 dataset is the texture itself
        let c = frames[0].channels();
        let seq = TextureSequence::new(frames, ChannelLayout::generic(c), 30.0).unwrap();
        build_subband_dataset(&seq, &WaveletFilter::bior22(), 0).unwrap()
    }

    fn eigen_tail(ds: &SubbandDataset, rank: usize) -> f64 {
        let c = ds.channels();
        let mut total = 0.0;
        for ch in 0..c {
            let rows: Vec<Vec<f64>> =
                ds.pyramids.iter().map(|p| centered_planes(&p.ll, &ds.ll_mean)[ch].clone()).collect();
            let d = rows[0].len();
            let cov = DMatrix::<f64>::from_fn(d, d, |i, j| rows.iter().map(|r| r[i] * r[j]).sum::<f64>());
            let mut vals: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            total += vals[rank.min(d)..].iter().map(|v| v.max(0.0)).sum::<f64>();
        }
        total
    }

    #[test]
    fn rank_two_subspace_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<Texture> =
            (0..3).map(|_| Texture::from_fn(4, 4, 2, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let frames: Vec<Texture> = (0..6)
            .map(|_| {
                let (p, q) = (rng.random_range(-1.0..1.0f32), rng.random_range(-1.0..1.0f32));
                Texture::from_fn(4, 4, 2, |y, x, c| b[0].at(y, x, c) + p * b[1].at(y, x, c) + q * b[2].at(y, x, c))
            })
            .collect();
        let ds = dataset_from_ll(frames);
        let fit = fit_ll(&ds, 2).unwrap();
        assert!(fit.residual_sq <= 1e-10 * fit.centered_energy);
        for (f, p) in ds.pyramids.iter().enumerate() {
            let out = eval_ll(&fit.bank, &fit.alphas[f]).unwrap();
            assert!(out.max_abs_diff(&p.ll) <= 1e-5 * p.ll.max_abs());
        }
    }

    #[test]
    fn residual_matches_eigen_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<Texture> =
            (0..8).map(|_| Texture::from_fn(4, 4, 3, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let ds = dataset_from_ll(frames);
        let fit = fit_ll(&ds, 7).unwrap();
        let oracle = eigen_tail(&ds, 7);
        // centred data of 8 frames has rank 7, so the tail is zero up to roundoff
        assert!((fit.residual_sq - oracle).abs() <= 1e-4 * oracle + 1e-10 * fit.centered_energy);
        let fit3 = fit_ll(&ds, 3).unwrap();
        let oracle3 = eigen_tail(&ds, 3);
        assert!((fit3.residual_sq - oracle3).abs() <= 1e-4 * oracle3);
    }

    #[test]
    fn rank_zero_leaves_all_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Texture> =
            (0..4).map(|_| Texture::from_fn(4, 4, 1, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let fit = fit_ll(&dataset_from_ll(frames), 0).unwrap();
        assert!(fit.bank.bases.is_empty());
        assert!((fit.residual_sq - fit.centered_energy).abs() <= 1e-12 * fit.centered_energy);
    }

    #[test]
    fn identical_frames_give_zero_bases() {
        let frames = vec![Texture::filled(4, 4, 2, 0.25); 3];
        let fit = fit_ll(&dataset_from_ll(frames), 2).unwrap();
        assert!(fit.bank.bases.iter().all(|b| b.max_abs() == 0.0));
        assert_eq!(fit.residual_sq, 0.0);
    }

    #[test]
    fn least_squares_coefficients_match_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Texture> =
            (0..6).map(|_| Texture::from_fn(4, 4, 2, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let ds = dataset_from_ll(frames);
        let fit = fit_ll(&ds, 3).unwrap();
        for f in 0..6 {
            let a = solve_ll_coefficients(&fit.bank, &ds.pyramids[f].ll).unwrap();
            for (x, y) in a.data().iter().zip(fit.alphas[f].data()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
