//! Distillation of teacher texture sequences into student models.

mod als;
mod ll;
mod refine;
mod student;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ChannelLayout, Texture, TextureSequence};
use crate::wavelet::{dwt_multilevel, DetailTriple, WaveletFilter, WaveletPyramid};

pub(crate) use als::{als_fit, factor_texture, solve_alpha, states_from_subbands};
pub use als::{fit_factorized, solve_level_coefficients, FactorizedFit};
pub use ll::{fit_ll, solve_ll_coefficients, LlFit};
pub use refine::{
    loss_rec, loss_rec_gradient, refine_joint, FrameTarget, LossWeights, RefineOutcome, RefineProblem, SubbandGradient,
};
pub use student::{fit_student, solve_coefficients, StudentFit};

/// Basis counts for one model: LL rank, then one rank per dynamic level, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranks {
    pub ll: usize,
    pub levels: Vec<usize>,
}

impl Ranks {
    pub fn new(ll: usize, levels: Vec<usize>) -> Self {
        Ranks { ll, levels }
    }

    pub fn paper_geometry() -> Self {
        Ranks::new(192, vec![128, 96])
    }

    pub fn paper_appearance() -> Self {
        Ranks::new(128, vec![128, 96])
    }

    pub fn toy() -> Self {
        Ranks::new(8, vec![6, 4])
    }

    pub fn scaled(&self, k: usize) -> Self {
        Ranks::new(self.ll * k, self.levels.iter().map(|r| r * k).collect())
    }
}

impl std::fmt::Display for Ranks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.ll)?;
        for r in &self.levels {
            write!(f, "/{r}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Ranks {
    type Err = Error;

    /// Parses `"192/128/96"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(['/', ','])
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad rank `{p}` in `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        match parts.split_first() {
            Some((&ll, rest)) => Ok(Ranks::new(ll, rest.to_vec())),
            None => Err(Error::Config("empty rank list".into())),
        }
    }
}

/// Group-set names used to key ranks and models.
pub const GEOMETRY: &str = "geometry";
pub const APPEARANCE: &str = "appearance";
/// Single model over every channel of a layout without the standard groups.
pub const ALL: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub levels: usize,
    pub dynamic_levels: usize,
    pub ranks: BTreeMap<String, Ranks>,
    pub als_sweeps: usize,
    pub refine_steps: usize,
    pub learning_rate: f64,
    pub lambda_ll: f64,
    /// One weight per dynamic level, coarsest first.
    pub lambda_levels: Vec<f64>,
    pub seed: u64,
    pub window_k: usize,
    pub mlp_hidden: Vec<usize>,
    pub mlp_steps: usize,
    pub mlp_learning_rate: f64,
    /// One predictor for all group sets instead of one each.
    pub shared_mlp: bool,
    pub pca_components: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let mut ranks = BTreeMap::new();
        ranks.insert(GEOMETRY.to_string(), Ranks::toy());
        ranks.insert(APPEARANCE.to_string(), Ranks::toy());
        ranks.insert(ALL.to_string(), Ranks::toy());
        FitConfig {
            levels: 4,
            dynamic_levels: 2,
            ranks,
            als_sweeps: 20,
            refine_steps: 0,
            learning_rate: 1e-4,
            lambda_ll: 5.0,
            lambda_levels: vec![1.0, 1.0],
            seed: 0,
            window_k: 3,
            mlp_hidden: vec![256, 256],
            mlp_steps: 2000,
            mlp_learning_rate: 1e-3,
            shared_mlp: false,
            pca_components: 128,
        }
    }
}

impl FitConfig {
    pub fn paper() -> Self {
        let mut cfg = FitConfig::default();
        cfg.ranks.insert(GEOMETRY.into(), Ranks::paper_geometry());
        cfg.ranks.insert(APPEARANCE.into(), Ranks::paper_appearance());
        cfg.ranks.insert(ALL.into(), Ranks::paper_geometry());
        cfg
    }

    pub fn with_ranks(mut self, ranks: Ranks) -> Self {
        for v in self.ranks.values_mut() {
            *v = ranks.clone();
        }
        self
    }

    pub fn ranks_for(&self, group_set: &str) -> Result<&Ranks> {
        self.ranks.get(group_set).ok_or_else(|| Error::Config(format!("no ranks configured for `{group_set}`")))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { ll: self.lambda_ll, levels: self.lambda_levels.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic_levels > self.levels {
            return Err(Error::Config(format!("{} dynamic levels exceed {} levels", self.dynamic_levels, self.levels)));
        }
        for (name, r) in &self.ranks {
            if r.levels.len() != self.dynamic_levels {
                return Err(Error::Config(format!(
                    "`{name}` ranks {r} need one entry per dynamic level ({})",
                    self.dynamic_levels
                )));
            }
            if r.ll == 0 || r.levels.contains(&0) {
                return Err(Error::Config(format!("`{name}` ranks {r} must all be at least 1")));
            }
        }
        if self.lambda_levels.len() != self.dynamic_levels {
            return Err(Error::Config("one level weight per dynamic level is required".into()));
        }
        if !(self.lambda_ll > 0.0) || self.lambda_levels.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.mlp_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.window_k == 0 {
            return Err(Error::Config("window k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-frame wavelet pyramids of a sequence plus their frame averages.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandDataset {
    pub layout: ChannelLayout,
    pub filter: WaveletFilter,
    pub resolution: (usize, usize),
    pub pyramids: Vec<WaveletPyramid>,
    pub ll_mean: Texture,
    /// Mean detail triples indexed by level, finest first.
    pub detail_means: Vec<DetailTriple>,
}

impl SubbandDataset {
    pub fn frames(&self) -> usize {
        self.pyramids.len()
    }

    pub fn levels(&self) -> usize {
        self.detail_means.len()
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    /// Level indices of the `dynamic` coarsest levels, coarsest first.
    pub fn dynamic_level_indices(&self, dynamic: usize) -> Vec<usize> {
        let l = self.levels();
        (l - dynamic.min(l)..l).rev().collect()
    }

    /// Mean triples of the levels below the dynamic ones, coarsest first.
    pub fn static_means(&self, dynamic: usize) -> Vec<DetailTriple> {
        let l = self.levels();
        (0..l - dynamic.min(l)).rev().map(|i| self.detail_means[i].clone()).collect()
    }

    /// Restricts the dataset to a subset of frames and recomputes the means.
    pub fn subset(&self, frames: &[usize]) -> Result<SubbandDataset> {
        if frames.is_empty() {
            return Err(Error::Config("empty frame subset".into()));
        }
        let pyramids = frames
            .iter()
            .map(|&f| self.pyramids.get(f).cloned().ok_or_else(|| Error::Config(format!("frame {f} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pyramids(self.layout.clone(), self.filter.clone(), self.resolution, pyramids))
    }

    fn from_pyramids(
        layout: ChannelLayout,
        filter: WaveletFilter,
        resolution: (usize, usize),
        pyramids: Vec<WaveletPyramid>,
    ) -> SubbandDataset {
        let ll_mean = mean_texture(pyramids.iter().map(|p| &p.ll));
        let levels = pyramids[0].details.len();
        let detail_means = (0..levels)
            .map(|l| DetailTriple {
                lh: mean_texture(pyramids.iter().map(|p| &p.details[l].lh)),
                hl: mean_texture(pyramids.iter().map(|p| &p.details[l].hl)),
                hh: mean_texture(pyramids.iter().map(|p| &p.details[l].hh)),
            })
            .collect();
        SubbandDataset { layout, filter, resolution, pyramids, ll_mean, detail_means }
    }
}

/// Frame average accumulated in f64 in frame order.
pub(crate) fn mean_texture<'a>(textures: impl Iterator<Item = &'a Texture>) -> Texture {
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = (0, 0, 0);
    let mut n = 0usize;
    for t in textures {
        if n == 0 {
            shape = t.shape();
            acc = vec![0.0; t.len()];
        }
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v as f64;
        }
        n += 1;
    }
    let inv = n.max(1) as f64;
    Texture::new(shape.0, shape.1, shape.2, acc.into_iter().map(|v| (v / inv) as f32).collect())
        .expect("consistent shape")
}

pub fn build_subband_dataset(seq: &TextureSequence, filter: &WaveletFilter, levels: usize) -> Result<SubbandDataset> {
    use rayon::prelude::*;
    let (h, w, _) = seq.shape();
    let pyramids = seq.frames().par_iter().map(|t| dwt_multilevel(t, levels, filter)).collect::<Result<Vec<_>>>()?;
    Ok(SubbandDataset::from_pyramids(seq.layout().clone(), filter.clone(), (h, w), pyramids))
}

/// Per-channel planes of a texture minus its mean, in f64.
pub(crate) fn centered_planes(t: &Texture, mean: &Texture) -> Vec<Vec<f64>> {
    let c = t.channels();
    let mut out = vec![Vec::with_capacity(t.texels()); c];
    for (texel, m) in t.data().chunks_exact(c).zip(mean.data().chunks_exact(c)) {
        for ch in 0..c {
            out[ch].push(texel[ch] as f64 - m[ch] as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_sequence(seed: u64, frames: usize, size: usize, c: usize) -> TextureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames =
            (0..frames).map(|_| Texture::from_fn(size, size, c, |_, _, _| rng.random_range(-1.0..1.0))).collect();
        TextureSequence::new(frames, ChannelLayout::generic(c), 30.0).unwrap()
    }

    #[test]
    fn single_frame_means_are_the_frame() {
        let seq = random_sequence(1, 1, 32, 2);
        let ds = build_subband_dataset(&seq, &WaveletFilter::bior22(), 3).unwrap();
        assert_eq!(ds.ll_mean, ds.pyramids[0].ll);
        for l in 0..3 {
            assert_eq!(ds.detail_means[l], ds.pyramids[0].details[l]);
        }
    }

    #[test]
    fn constant_sequence_has_zero_detail_means() {
        let frames = (0..3).map(|i| Texture::filled(32, 32, 2, i as f32 + 0.5)).collect();
        let seq = TextureSequence::new(frames, ChannelLayout::generic(2), 30.0).unwrap();
        let ds = build_subband_dataset(&seq, &WaveletFilter::bior22(), 4).unwrap();
        for d in &ds.detail_means {
            assert!(d.energy() < 1e-20);
        }
    }

    #[test]
    fn finest_mean_matches_naive_loop() {
        let seq = random_sequence(2, 10, 16, 3);
        let ds = build_subband_dataset(&seq, &WaveletFilter::bior22(), 2).unwrap();
        let d0 = &ds.detail_means[0];
        for (band, pick) in [(&d0.lh, 0usize), (&d0.hl, 1), (&d0.hh, 2)] {
            for i in 0..band.len() {
                let mut s = 0.0f64;
                for p in &ds.pyramids {
                    s += p.details[0].bands()[pick].data()[i] as f64;
                }
                assert_eq!(band.data()[i], (s / 10.0) as f32);
            }
        }
    }

    #[test]
    fn divisibility_is_checked() {
        let seq = random_sequence(3, 1, 24, 1);
        assert!(build_subband_dataset(&seq, &WaveletFilter::bior22(), 4).is_err());
    }

    #[test]
    fn ranks_parse_and_display() {
        let r: Ranks = "192/128/96".parse().unwrap();
        assert_eq!(r, Ranks::paper_geometry());
        assert_eq!(r.to_string(), "192/128/96");
        assert!("a/b".parse::<Ranks>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let mut bad = FitConfig::default();
        bad.lambda_ll = 0.0;
        assert!(bad.validate().is_err());
        let bad = FitConfig::default().with_ranks(Ranks::new(0, vec![1, 1]));
        assert!(bad.validate().is_err());
    }
}
