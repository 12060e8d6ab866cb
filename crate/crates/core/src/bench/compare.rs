//! Held-out comparison of the wavelet student against the full-resolution baselines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::baselines::{baseline_config, baseline_pca, baseline_single_level};
use super::cost::count_cost;
use crate::error::{Error, Result};
use crate::fitting::{build_subband_dataset, fit_student, solve_coefficients, Ranks};
use crate::tensor::{Texture, TextureSequence};
use crate::wavelet::{dwt_multilevel, WaveletFilter, WaveletPyramid};

pub const METHOD_OURS: &str = "ours";
pub const METHOD_SINGLE_LEVEL: &str = "single_level";
pub const METHOD_PCA: &str = "pca_only";

/// Mean absolute difference over every coefficient of two pyramids.
pub fn subband_l1(pred: &WaveletPyramid, truth: &WaveletPyramid) -> Result<f64> {
    if pred.levels() != truth.levels() {
        return Err(Error::Shape(format!("pyramids with {} and {} levels", pred.levels(), truth.levels())));
    }
    let mut bands: Vec<(&Texture, &Texture)> = vec![(&pred.ll, &truth.ll)];
    for (a, b) in pred.details.iter().zip(&truth.details) {
        bands.extend(a.bands().into_iter().zip(b.bands()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in bands {
        if !a.same_shape(b) {
            return Err(Error::Shape(format!("band {:?} vs {:?}", a.shape(), b.shape())));
        }
        sum += a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>();
        count += a.len();
    }
    Ok(sum / count.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub levels: usize,
    pub ranks: Ranks,
    pub sweeps: usize,
    pub seed: u64,
    /// Single-level rank; `None` picks the largest rank within the student's parameter count.
    pub single_rank: Option<usize>,
    /// PCA components; `None` picks the fewest whose training residual reaches the single-level one.
    pub pca_components: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { levels: 4, ranks: Ranks::toy(), sweeps: 20, seed: 0, single_rank: None, pca_components: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    /// Rank or component count.
    pub size: usize,
    /// Representation parameters.
    pub params: u64,
    /// Decoder FLOPs per frame, predictor included.
    pub flops: u64,
    /// Squared training residual in the method's own fitting domain.
    pub train_residual_sq: f64,
    pub train_l1: f64,
    pub heldout_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MethodScore>,
}

impl Comparison {
    pub fn get(&self, method: &str) -> Option<&MethodScore> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,size,params,flops,train_residual_sq,train_l1,heldout_l1\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9e},{:.9e},{:.9e}",
                r.method, r.size, r.params, r.flops, r.train_residual_sq, r.train_l1, r.heldout_l1
            );
        }
        s
    }
}

/// Largest single-level rank whose parameters stay within `budget`.
pub fn matched_single_rank(side: usize, channels: usize, budget: u64) -> usize {
    let (n, c) = (side as u64, channels as u64);
    let mean = n * n * c;
    if budget <= mean {
        return 1;
    }
    (((budget - mean) / (2 * n * c)) as usize).clamp(1, side)
}

fn mean_l1(truth: &[WaveletPyramid], mut predict: impl FnMut(usize) -> Result<WaveletPyramid>) -> Result<f64> {
    let mut total = 0.0;
    for (f, gt) in truth.iter().enumerate() {
        total += subband_l1(&predict(f)?, gt)?;
    }
    Ok(total / truth.len().max(1) as f64)
}

/// Fits all three methods on `train` and scores them on `heldout` in the subband domain.
pub fn compare_methods(train: &TextureSequence, heldout: &TextureSequence, cfg: &CompareConfig) -> Result<Comparison> {
    if heldout.is_empty() {
        return Err(Error::Config("no held-out frames".into()));
    }
    if train.shape() != heldout.shape() {
        return Err(Error::Shape(format!("train {:?} vs held-out {:?}", train.shape(), heldout.shape())));
    }
    let (side, w, c) = train.shape();
    if side != w {
        return Err(Error::Shape(format!("comparison needs square textures, got {side}x{w}")));
    }
    let filter = WaveletFilter::bior22();
    let dataset = build_subband_dataset(train, &filter, cfg.levels)?;
    let held: Vec<WaveletPyramid> =
        heldout.frames().iter().map(|t| dwt_multilevel(t, cfg.levels, &filter)).collect::<Result<_>>()?;
    let to_pyramid = |t: &Texture| dwt_multilevel(t, cfg.levels, &filter);

    let student = fit_student(&dataset, &cfg.ranks, cfg.sweeps, cfg.seed)?;
    let ours_params = student.model.param_count().total() as u64;
    let ours = MethodScore {
        method: METHOD_OURS.into(),
        size: cfg.ranks.ll,
        params: ours_params,
        flops: count_cost(&baseline_config(side, c, cfg.ranks.clone(), cfg.levels))?.total_flops(),
        train_residual_sq: student.residuals_sq.iter().sum::<f64>() + student.static_residual_sq,
        train_l1: mean_l1(&dataset.pyramids, |f| student.model.predict_pyramid(&student.coefficients[f]))?,
        heldout_l1: mean_l1(&held, |f| student.model.predict_pyramid(&solve_coefficients(&student.model, &held[f])?))?,
    };
    log::info!("ours: {} params, held-out L1 {:.4e}", ours.params, ours.heldout_l1);

    let rank = cfg.single_rank.unwrap_or_else(|| matched_single_rank(side, c, ours_params));
    let single = baseline_single_level(train, rank, cfg.sweeps, cfg.seed)?;
    let single_row = MethodScore {
        method: METHOD_SINGLE_LEVEL.into(),
        size: rank,
        params: single.param_count(),
        flops: single.cost.total_flops(),
        train_residual_sq: single.residual_sq,
        train_l1: mean_l1(&dataset.pyramids, |f| to_pyramid(&single.eval(&single.alphas[f])?))?,
        heldout_l1: mean_l1(&held, |f| to_pyramid(&single.eval(&single.solve(heldout.frame(f))?)?))?,
    };
    log::info!("single level: rank {rank}, held-out L1 {:.4e}", single_row.heldout_l1);

    let full = baseline_pca(train, train.len())?;
    let k = match cfg.pca_components {
        Some(k) => k,
        None => (1..=train.len()).find(|&k| full.residual_at(k) <= single.residual_sq).unwrap_or(train.len()),
    };
    let pca = full.truncated(k)?;
    let pca_row = MethodScore {
        method: METHOD_PCA.into(),
        size: k,
        params: pca.param_count(),
        flops: pca.cost.total_flops(),
        train_residual_sq: pca.residual_sq,
        train_l1: mean_l1(&dataset.pyramids, |f| to_pyramid(&pca.reconstruct(&pca.coeffs[f])?))?,
        heldout_l1: mean_l1(&held, |f| to_pyramid(&pca.reconstruct(&pca.project(heldout.frame(f))?)?))?,
    };
    log::info!("pca: {k} components, held-out L1 {:.4e}", pca_row.heldout_l1);

    Ok(Comparison { rows: vec![ours, single_row, pca_row] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ChannelLayout;
    use crate::wavelet::idwt_multilevel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_of_identical_pyramids_is_zero_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Texture::from_fn(16, 16, 2, |_, _, _| rng.random_range(-1.0..1.0));
        let p = dwt_multilevel(&t, 2, &WaveletFilter::bior22()).unwrap();
        assert_eq!(subband_l1(&p, &p).unwrap(), 0.0);
        let mut q = p.clone();
        q.ll.data_mut().iter_mut().for_each(|v| *v += 0.5);
        // LL is 4x4x2 = 32 of 512 coefficients
        assert!((subband_l1(&q, &p).unwrap() - 0.5 * 32.0 / 512.0).abs() < 1e-7);
        let shallow = dwt_multilevel(&t, 1, &WaveletFilter::bior22()).unwrap();
        assert!(subband_l1(&shallow, &p).is_err());
        assert!(idwt_multilevel(&p, &WaveletFilter::bior22()).unwrap().max_abs_diff(&t) < 1e-5);
    }

    #[test]
    fn matched_rank_respects_budget() {
        let r = matched_single_rank(64, 3, 64 * 64 * 3 + 2 * 64 * 3 * 5 + 7);
        assert_eq!(r, 5);
        assert_eq!(matched_single_rank(64, 3, 10), 1);
    }

    #[test]
    fn comparison_has_one_row_per_method() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Texture> =
            (0..10).map(|_| Texture::from_fn(32, 32, 2, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        let seq = TextureSequence::new(frames, ChannelLayout::generic(2), 30.0).unwrap();
        let train = seq.subset(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let held = seq.subset(&[8, 9]).unwrap();
        let cfg = CompareConfig { ranks: Ranks::new(4, vec![4, 4]), sweeps: 5, ..CompareConfig::default() };
        let cmp = compare_methods(&train, &held, &cfg).unwrap();
        assert_eq!(cmp.rows.len(), 3);
        assert!(cmp.rows.iter().all(|r| r.heldout_l1.is_finite() && r.train_l1 <= r.heldout_l1 * 10.0));
        let single = cmp.get(METHOD_SINGLE_LEVEL).unwrap();
        assert!(single.params <= cmp.get(METHOD_OURS).unwrap().params);
        assert_eq!(cmp.to_csv().lines().count(), 4);
    }
}
