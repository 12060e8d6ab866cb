//! The student representation: LL blendshapes, factorized detail blendshapes
//! and frozen fine-level detail means, evaluated through a partial inverse DWT.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    ensure_dir, read_blob, read_json, write_blob, write_json, BlobEntry, ChannelLayout, Dtype, Texture,
};
use crate::wavelet::{idwt_partial, precompute_static_offset, DetailTriple, WaveletFilter, WaveletPyramid};

pub const MODEL_MANIFEST: &str = "model.json";
const MODEL_VERSION: u32 = 1;
/// Tolerance for the stored static offset against a fresh synthesis.
pub const OFFSET_TOLERANCE: f32 = 1e-5;

/// Coefficients `alpha(r, c)` for one bank, stored rank-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    rank: usize,
    channels: usize,
    data: Vec<f64>,
}

impl CoeffMatrix {
    pub fn zeros(rank: usize, channels: usize) -> Self {
        CoeffMatrix { rank, channels, data: vec![0.0; rank * channels] }
    }

    pub fn new(rank: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rank * channels {
            return Err(Error::Shape(format!(
                "coefficients {rank}x{channels} need {} values, got {}",
                rank * channels,
                data.len()
            )));
        }
        Ok(CoeffMatrix { rank, channels, data })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-frame coefficients for a whole model: LL first, then each dynamic level, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub ll: CoeffMatrix,
    pub levels: Vec<CoeffMatrix>,
}

impl CoefficientSet {
    pub fn len(&self) -> usize {
        self.ll.data.len() + self.levels.iter().map(|m| m.data.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens in serving order: `alpha_ll`, then each level.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.ll.data.clone();
        for m in &self.levels {
            out.extend_from_slice(&m.data);
        }
        out
    }

    pub fn linear_combination(&self, a: f64, other: &CoefficientSet, b: f64) -> Result<CoefficientSet> {
        let x = self.to_flat();
        let y = other.to_flat();
        if x.len() != y.len() {
            return Err(Error::Shape("coefficient sets differ in size".into()));
        }
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let mut out = self.clone();
        out.assign_flat(&z)?;
        Ok(out)
    }

    pub(crate) fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "flat coefficient vector has {} values, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        for m in std::iter::once(&mut self.ll).chain(self.levels.iter_mut()) {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// `mean + Σ_r alpha(r, c) · bases[r]` on the coarsest low-pass band.
#[derive(Debug, Clone, PartialEq)]
pub struct LlBlendshapeBank {
    pub mean: Texture,
    pub bases: Vec<Texture>,
}

impl LlBlendshapeBank {
    pub fn rank(&self) -> usize {
        self.bases.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (r, b) in self.bases.iter().enumerate() {
            self.mean.expect_shape(b, &format!("LL basis {r}"))?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> (usize, usize) {
        (self.rank() * self.mean.len(), self.mean.len())
    }
}

pub fn eval_ll(bank: &LlBlendshapeBank, alpha: &CoeffMatrix) -> Result<Texture> {
    let (h, w, c) = bank.mean.shape();
    if alpha.rank != bank.rank() || alpha.channels != c {
        return Err(Error::Shape(format!(
            "LL coefficients {}x{} for a bank of rank {} over {c} channels",
            alpha.rank,
            alpha.channels,
            bank.rank()
        )));
    }
    let mut acc: Vec<f64> = bank.mean.data().iter().map(|&v| v as f64).collect();
    for (r, basis) in bank.bases.iter().enumerate() {
        let coeffs = &alpha.data[r * c..(r + 1) * c];
        for (texel, b) in acc.chunks_exact_mut(c).zip(basis.data().chunks_exact(c)) {
            for ((a, &bv), &k) in texel.iter_mut().zip(b).zip(coeffs) {
                *a += k * bv as f64;
            }
        }
    }
    Texture::new(h, w, c, acc.into_iter().map(|v| v as f32).collect())
}

/// One orientation subband of a factorized level.
///
/// `h` is stored as a `H × R × C` texture and `w` as `W × R × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedSubband {
    pub mean: Texture,
    pub h: Texture,
    pub w: Texture,
}

impl FactorizedSubband {
    pub fn rank(&self) -> usize {
        self.h.width()
    }

    fn validate(&self, rank: usize) -> Result<()> {
        let (hh, ww, c) = self.mean.shape();
        if self.h.shape() != (hh, rank, c) || self.w.shape() != (ww, rank, c) {
            return Err(Error::Shape(format!(
                "factorized bases {:?}/{:?} do not fit mean {:?} at rank {rank}",
                self.h.shape(),
                self.w.shape(),
                self.mean.shape()
            )));
        }
        Ok(())
    }

    /// `mean + Σ_r alpha(r, c) · h(:, r, c) ⊗ w(:, r, c)`.
    pub(crate) fn eval(&self, alpha: &CoeffMatrix) -> Texture {
        let (hh, ww, c) = self.mean.shape();
        let rank = self.rank();
        let mut acc: Vec<f64> = self.mean.data().iter().map(|&v| v as f64).collect();
        let hd = self.h.data();
        let wd = self.w.data();
        let mut scaled = vec![0.0f64; rank * c];
        for y in 0..hh {
            for r in 0..rank {
                for ch in 0..c {
                    scaled[r * c + ch] = alpha.data[r * c + ch] * hd[(y * rank + r) * c + ch] as f64;
                }
            }
            let row = &mut acc[y * ww * c..(y + 1) * ww * c];
            for x in 0..ww {
                let texel = &mut row[x * c..(x + 1) * c];
                for r in 0..rank {
                    let wv = &wd[(x * rank + r) * c..(x * rank + r + 1) * c];
                    let sv = &scaled[r * c..(r + 1) * c];
                    for ch in 0..c {
                        texel[ch] += sv[ch] * wv[ch] as f64;
                    }
                }
            }
        }
        Texture::new(hh, ww, c, acc.into_iter().map(|v| v as f32).collect()).expect("shape preserved")
    }
}

/// Factorized blendshapes for the three detail subbands of one level, driven by one shared
/// coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedBank {
    /// Detail level index, 0 being the finest.
    pub level: usize,
    pub rank: usize,
    /// LH, HL, HH in that order.
    pub subbands: [FactorizedSubband; 3],
}

impl FactorizedBank {
    pub fn validate(&self) -> Result<()> {
        let shape = self.subbands[0].mean.shape();
        for s in &self.subbands {
            if s.mean.shape() != shape {
                return Err(Error::Shape("factorized subband means differ in shape".into()));
            }
            s.validate(self.rank)?;
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.subbands[0].mean.shape()
    }

    pub fn means(&self) -> DetailTriple {
        DetailTriple {
            lh: self.subbands[0].mean.clone(),
            hl: self.subbands[1].mean.clone(),
            hh: self.subbands[2].mean.clone(),
        }
    }

    /// `(basis parameters, mean parameters)`.
    pub fn param_count(&self) -> (usize, usize) {
        let (h, w, c) = self.shape();
        (3 * (h + w) * self.rank * c, 3 * h * w * c)
    }
}

pub fn eval_factorized(bank: &FactorizedBank, alpha: &CoeffMatrix) -> Result<DetailTriple> {
    let c = bank.shape().2;
    if alpha.rank != bank.rank || alpha.channels != c {
        return Err(Error::Shape(format!(
            "level {} coefficients {}x{} for rank {} over {c} channels",
            bank.level, alpha.rank, alpha.channels, bank.rank
        )));
    }
    let [a, b, d] = &bank.subbands;
    Ok(DetailTriple { lh: a.eval(alpha), hl: b.eval(alpha), hh: d.eval(alpha) })
}

/// Subbands predicted by a model for one frame: LL and dynamic levels, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandPrediction {
    pub ll: Texture,
    pub levels: Vec<DetailTriple>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub layout: ChannelLayout,
    pub filter: WaveletFilter,
    pub resolution: (usize, usize),
    pub ll: LlBlendshapeBank,
    /// Dynamic levels, coarsest first.
    pub banks: Vec<FactorizedBank>,
    /// Frozen detail means below the dynamic levels, coarsest first.
    pub static_means: Vec<DetailTriple>,
    pub static_offset: Texture,
}

/// Parameter totals per model part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub ll_bases: usize,
    pub ll_mean: usize,
    pub factorized_bases: usize,
    pub factorized_means: usize,
    pub static_means: usize,
}

impl ParamCount {
    pub fn blendshape_bases(&self) -> usize {
        self.ll_bases + self.factorized_bases
    }

    pub fn total(&self) -> usize {
        self.ll_bases + self.ll_mean + self.factorized_bases + self.factorized_means + self.static_means
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            ll_bases: self.ll_bases + o.ll_bases,
            ll_mean: self.ll_mean + o.ll_mean,
            factorized_bases: self.factorized_bases + o.factorized_bases,
            factorized_means: self.factorized_means + o.factorized_means,
            static_means: self.static_means + o.static_means,
        }
    }
}

impl StudentModel {
    /// Assembles a model and synthesizes its static offset.
    pub fn new(
        layout: ChannelLayout,
        filter: WaveletFilter,
        resolution: (usize, usize),
        ll: LlBlendshapeBank,
        banks: Vec<FactorizedBank>,
        static_means: Vec<DetailTriple>,
    ) -> Result<Self> {
        let c = layout.channels();
        let static_offset = compute_offset(&static_means, resolution, c, &filter)?;
        let model = StudentModel { layout, filter, resolution, ll, banks, static_means, static_offset };
        model.validate()?;
        Ok(model)
    }

    pub fn levels(&self) -> usize {
        self.banks.len() + self.static_means.len()
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    pub fn ranks(&self) -> (usize, Vec<usize>) {
        (self.ll.rank(), self.banks.iter().map(|b| b.rank).collect())
    }

    /// Checks that every part is consistent with the level structure.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        let c = self.channels();
        let levels = self.levels();
        if h % (1 << levels) != 0 || w % (1 << levels) != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by 2^{levels}")));
        }
        self.ll.validate()?;
        if self.ll.mean.shape() != (h >> levels, w >> levels, c) {
            return Err(Error::Shape(format!(
                "LL mean {:?} does not match {h}x{w}x{c} at {levels} levels",
                self.ll.mean.shape()
            )));
        }
        for (i, bank) in self.banks.iter().enumerate() {
            bank.validate()?;
            let level = levels - 1 - i;
            if bank.level != level || bank.shape() != (h >> (level + 1), w >> (level + 1), c) {
                return Err(Error::Shape(format!(
                    "bank {i} is level {} with shape {:?}, expected level {level}",
                    bank.level,
                    bank.shape()
                )));
            }
        }
        for (i, m) in self.static_means.iter().enumerate() {
            let level = levels - 1 - self.banks.len() - i;
            if m.shape() != (h >> (level + 1), w >> (level + 1), c) {
                return Err(Error::Shape(format!("static mean for level {level} has shape {:?}", m.shape())));
            }
        }
        if self.static_offset.shape() != (h, w, c) {
            return Err(Error::Shape("static offset is not at full resolution".into()));
        }
        Ok(())
    }

    pub fn zero_coefficients(&self) -> CoefficientSet {
        let c = self.channels();
        CoefficientSet {
            ll: CoeffMatrix::zeros(self.ll.rank(), c),
            levels: self.banks.iter().map(|b| CoeffMatrix::zeros(b.rank, c)).collect(),
        }
    }

    pub fn coefficient_count(&self) -> usize {
        self.zero_coefficients().len()
    }

    /// Splits a flat `[alpha_ll, alpha_l, ...]` vector into a coefficient set.
    pub fn coefficients_from_flat(&self, flat: &[f64]) -> Result<CoefficientSet> {
        let mut set = self.zero_coefficients();
        set.assign_flat(flat)?;
        Ok(set)
    }

    pub fn predict_subbands(&self, coeffs: &CoefficientSet) -> Result<SubbandPrediction> {
        if coeffs.levels.len() != self.banks.len() {
            return Err(Error::Shape(format!(
                "{} level coefficient blocks for {} dynamic levels",
                coeffs.levels.len(),
                self.banks.len()
            )));
        }
        let ll = eval_ll(&self.ll, &coeffs.ll)?;
        let levels =
            self.banks.iter().zip(&coeffs.levels).map(|(b, a)| eval_factorized(b, a)).collect::<Result<Vec<_>>>()?;
        Ok(SubbandPrediction { ll, levels })
    }

    /// Full pyramid of one frame with the frozen levels set to their means.
    pub fn predict_pyramid(&self, coeffs: &CoefficientSet) -> Result<WaveletPyramid> {
        let pred = self.predict_subbands(coeffs)?;
        let mut details: Vec<DetailTriple> = self.static_means.iter().rev().cloned().collect();
        details.extend(pred.levels.into_iter().rev());
        Ok(WaveletPyramid { ll: pred.ll, details })
    }

    pub fn param_count(&self) -> ParamCount {
        let (ll_bases, ll_mean) = self.ll.param_count();
        let (mut fb, mut fm) = (0, 0);
        for b in &self.banks {
            let (x, y) = b.param_count();
            fb += x;
            fm += y;
        }
        ParamCount {
            ll_bases,
            ll_mean,
            factorized_bases: fb,
            factorized_means: fm,
            static_means: self.static_means.iter().map(|m| 3 * m.lh.len()).sum(),
        }
    }

    /// Recomputes the static offset from the stored means.
    pub fn refresh_static_offset(&mut self) -> Result<()> {
        self.static_offset = compute_offset(&self.static_means, self.resolution, self.channels(), &self.filter)?;
        Ok(())
    }
}

fn compute_offset(
    means: &[DetailTriple],
    resolution: (usize, usize),
    channels: usize,
    filter: &WaveletFilter,
) -> Result<Texture> {
    if means.is_empty() {
        return Ok(Texture::zeros(resolution.0, resolution.1, channels));
    }
    let refs: Vec<&DetailTriple> = means.iter().collect();
    precompute_static_offset(&refs, resolution, filter)
}

/// Full-resolution texture for one frame.
pub fn reconstruct(model: &StudentModel, coeffs: &CoefficientSet) -> Result<Texture> {
    let pred = model.predict_subbands(coeffs)?;
    let dynamic: Vec<&DetailTriple> = pred.levels.iter().collect();
    idwt_partial(&pred.ll, &dynamic, &model.static_offset, &model.filter)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    version: u32,
    resolution: [usize; 2],
    levels: usize,
    layout: ChannelLayout,
    ranks: BTreeMap<String, usize>,
    filter: WaveletFilter,
    blobs: BTreeMap<String, BlobEntry>,
}

fn tex_entry(name: &str, t: &Texture) -> BlobEntry {
    BlobEntry::new(format!("{name}.f32"), Dtype::F32, vec![t.height(), t.width(), t.channels()])
}

fn read_tex(dir: &Path, m: &ModelManifest, name: &str) -> Result<Texture> {
    let entry =
        m.blobs.get(name).ok_or_else(|| Error::manifest(dir.join(MODEL_MANIFEST), format!("missing blob `{name}`")))?;
    if entry.shape.len() != 3 {
        return Err(Error::manifest(dir.join(MODEL_MANIFEST), format!("blob `{name}` must be 3-dimensional")));
    }
    let data = read_blob::<f32>(dir, entry)?;
    let t = Texture::new(entry.shape[0], entry.shape[1], entry.shape[2], data)?;
    t.check_finite(None)?;
    Ok(t)
}

const BAND_NAMES: [&str; 3] = ["lh", "hl", "hh"];

impl StudentModel {
    /// Writes `dir/model.json` and one blob per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let mut textures: Vec<(String, &Texture)> = vec![("ll_mean".into(), &self.ll.mean)];
        for (r, b) in self.ll.bases.iter().enumerate() {
            textures.push((format!("ll_basis_{r:04}"), b));
        }
        for bank in &self.banks {
            for (s, band) in BAND_NAMES.iter().zip(&bank.subbands) {
                textures.push((format!("l{}_{s}_mean", bank.level), &band.mean));
                textures.push((format!("l{}_{s}_h", bank.level), &band.h));
                textures.push((format!("l{}_{s}_w", bank.level), &band.w));
            }
        }
        let offset_level = self.levels() - self.banks.len();
        for (i, m) in self.static_means.iter().enumerate() {
            let level = offset_level - 1 - i;
            for (s, band) in BAND_NAMES.iter().zip(m.bands()) {
                textures.push((format!("d{level}_{s}_mean"), band));
            }
        }
        textures.push(("static_offset".into(), &self.static_offset));

        let mut blobs = BTreeMap::new();
        for (name, t) in &textures {
            let entry = tex_entry(name, t);
            write_blob(dir, &entry, t.data())?;
            blobs.insert(name.clone(), entry);
        }
        let mut ranks = BTreeMap::new();
        ranks.insert("ll".to_string(), self.ll.rank());
        for bank in &self.banks {
            ranks.insert(format!("l{}", bank.level), bank.rank);
        }
        let manifest = ModelManifest {
            version: MODEL_VERSION,
            resolution: [self.resolution.0, self.resolution.1],
            levels: self.levels(),
            layout: self.layout.clone(),
            ranks,
            filter: self.filter.clone(),
            blobs,
        };
        write_json(&dir.join(MODEL_MANIFEST), &manifest)
    }

    /// Loads a model and checks the stored static offset against a fresh synthesis.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_MANIFEST);
        let m: ModelManifest = read_json(&path)?;
        if m.version != MODEL_VERSION {
            return Err(Error::manifest(&path, format!("unsupported version {}", m.version)));
        }
        m.filter.validate()?;
        let ll_rank = *m.ranks.get("ll").ok_or_else(|| Error::manifest(&path, "ranks.ll missing"))?;
        let ll = LlBlendshapeBank {
            mean: read_tex(dir, &m, "ll_mean")?,
            bases: (0..ll_rank).map(|r| read_tex(dir, &m, &format!("ll_basis_{r:04}"))).collect::<Result<_>>()?,
        };
        let mut dyn_levels: Vec<usize> =
            m.ranks.keys().filter_map(|k| k.strip_prefix('l').and_then(|s| s.parse().ok())).collect();
        dyn_levels.sort_unstable_by(|a, b| b.cmp(a));
        let mut banks = Vec::new();
        for &level in &dyn_levels {
            let mut subbands = Vec::with_capacity(3);
            for s in BAND_NAMES {
                subbands.push(FactorizedSubband {
                    mean: read_tex(dir, &m, &format!("l{level}_{s}_mean"))?,
                    h: read_tex(dir, &m, &format!("l{level}_{s}_h"))?,
                    w: read_tex(dir, &m, &format!("l{level}_{s}_w"))?,
                });
            }
            let subbands: [FactorizedSubband; 3] = subbands.try_into().expect("three subbands");
            banks.push(FactorizedBank { level, rank: m.ranks[&format!("l{level}")], subbands });
        }
        if m.levels < dyn_levels.len() {
            return Err(Error::manifest(&path, "more dynamic levels than levels"));
        }
        let mut static_means = Vec::new();
        for level in (0..m.levels - dyn_levels.len()).rev() {
            let [lh, hl, hh] = BAND_NAMES.map(|s| read_tex(dir, &m, &format!("d{level}_{s}_mean")));
            static_means.push(DetailTriple::from_bands([lh?, hl?, hh?])?);
        }
        let stored = read_tex(dir, &m, "static_offset")?;
        let model = StudentModel::new(m.layout, m.filter, (m.resolution[0], m.resolution[1]), ll, banks, static_means)
            .map_err(|e| Error::manifest(&path, e.to_string()))?;
        if !stored.same_shape(&model.static_offset) {
            return Err(Error::manifest(&path, "static offset has the wrong shape"));
        }
        let diff = stored.max_abs_diff(&model.static_offset);
        if diff > OFFSET_TOLERANCE {
            return Err(Error::manifest(&path, format!("stored static offset deviates from its means by {diff:.3e}")));
        }
        Ok(StudentModel { static_offset: stored, ..model })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::wavelet::{dwt_multilevel, idwt_multilevel, WaveletPyramid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tex(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Texture {
        Texture::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn rand_triple(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> DetailTriple {
        DetailTriple { lh: rand_tex(rng, h, w, c), hl: rand_tex(rng, h, w, c), hh: rand_tex(rng, h, w, c) }
    }

    fn rand_bank(rng: &mut ChaCha8Rng, level: usize, h: usize, w: usize, c: usize, rank: usize) -> FactorizedBank {
        let sb = |rng: &mut ChaCha8Rng| FactorizedSubband {
            mean: rand_tex(rng, h, w, c),
            h: rand_tex(rng, h, rank, c),
            w: rand_tex(rng, w, rank, c),
        };
        FactorizedBank { level, rank, subbands: [sb(rng), sb(rng), sb(rng)] }
    }

    /// Random model at `size`×`size` with four levels, two of them dynamic.
    pub(crate) fn random_model(seed: u64, size: usize, c: usize, ranks: (usize, usize, usize)) -> StudentModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ll = LlBlendshapeBank {
            mean: rand_tex(&mut rng, size / 16, size / 16, c),
            bases: (0..ranks.0).map(|_| rand_tex(&mut rng, size / 16, size / 16, c)).collect(),
        };
        let banks = vec![
            rand_bank(&mut rng, 3, size / 16, size / 16, c, ranks.1),
            rand_bank(&mut rng, 2, size / 8, size / 8, c, ranks.2),
        ];
        let means = vec![rand_triple(&mut rng, size / 4, size / 4, c), rand_triple(&mut rng, size / 2, size / 2, c)];
        StudentModel::new(ChannelLayout::generic(c), WaveletFilter::bior22(), (size, size), ll, banks, means).unwrap()
    }

    fn random_coeffs(model: &StudentModel, seed: u64) -> CoefficientSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = model.zero_coefficients();
        let flat: Vec<f64> = (0..set.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        set.assign_flat(&flat).unwrap();
        set
    }

    #[test]
    fn eval_ll_zero_alpha_is_mean() {
        let m = random_model(1, 64, 2, (3, 2, 2));
        let out = eval_ll(&m.ll, &CoeffMatrix::zeros(3, 2)).unwrap();
        assert_eq!(out, m.ll.mean);
    }

    #[test]
    fn eval_ll_unit_alpha_adds_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = LlBlendshapeBank { mean: rand_tex(&mut rng, 4, 4, 2), bases: vec![rand_tex(&mut rng, 4, 4, 2)] };
        let out = eval_ll(&bank, &CoeffMatrix::new(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        for i in 0..out.len() {
            assert_eq!(out.data()[i], bank.mean.data()[i] + bank.bases[0].data()[i]);
        }
    }

    #[test]
    fn eval_ll_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = LlBlendshapeBank {
            mean: rand_tex(&mut rng, 4, 4, 2),
            bases: (0..3).map(|_| rand_tex(&mut rng, 4, 4, 2)).collect(),
        };
        let alpha = CoeffMatrix::new(3, 2, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let out = eval_ll(&bank, &alpha).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    let mut v = bank.mean.at(y, x, c) as f64;
                    for r in 0..3 {
                        v += alpha.get(r, c) * bank.bases[r].at(y, x, c) as f64;
                    }
                    assert!((out.at(y, x, c) as f64 - v).abs() <= 1e-6 * v.abs().max(1.0));
                }
            }
        }
        assert!(eval_ll(&bank, &CoeffMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn eval_factorized_indicator_spike() {
        let (i, j) = (2, 4);
        let mut h = Texture::zeros(6, 1, 1);
        h.set(i, 0, 0, 1.0);
        let mut w = Texture::zeros(6, 1, 1);
        w.set(j, 0, 0, 1.0);
        let sb = FactorizedSubband { mean: Texture::filled(6, 6, 1, 0.5), h, w };
        let bank = FactorizedBank { level: 0, rank: 1, subbands: [sb.clone(), sb.clone(), sb] };
        let out = eval_factorized(&bank, &CoeffMatrix::new(1, 1, vec![1.0]).unwrap()).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expect = if (y, x) == (i, j) { 1.5 } else { 0.5 };
                assert_eq!(out.lh.at(y, x, 0), expect);
                assert_eq!(out.hh.at(y, x, 0), expect);
            }
        }
        let zero = eval_factorized(&bank, &CoeffMatrix::zeros(1, 1)).unwrap();
        assert_eq!(zero, bank.means());
    }

    #[test]
    fn eval_factorized_matches_outer_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = rand_bank(&mut rng, 0, 6, 6, 3, 2);
        let alpha = CoeffMatrix::new(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = eval_factorized(&bank, &alpha).unwrap();
        for (s, band) in out.bands().iter().enumerate() {
            let sb = &bank.subbands[s];
            for y in 0..6 {
                for x in 0..6 {
                    for c in 0..3 {
                        let mut v = sb.mean.at(y, x, c) as f64;
                        for r in 0..2 {
                            v += alpha.get(r, c) * sb.h.at(y, r, c) as f64 * sb.w.at(x, r, c) as f64;
                        }
                        assert!((band.at(y, x, c) as f64 - v).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    fn full_idwt_with_means(model: &StudentModel, coeffs: &CoefficientSet) -> Texture {
        let pred = model.predict_subbands(coeffs).unwrap();
        let mut details: Vec<DetailTriple> = pred.levels.clone();
        details.extend(model.static_means.iter().cloned());
        details.reverse();
        idwt_multilevel(&WaveletPyramid { ll: pred.ll, details }, &model.filter).unwrap()
    }

    #[test]
    fn reconstruct_equals_full_idwt_with_means() {
        let model = random_model(5, 64, 3, (3, 2, 2));
        let coeffs = random_coeffs(&model, 6);
        let fast = reconstruct(&model, &coeffs).unwrap();
        let full = full_idwt_with_means(&model, &coeffs);
        let scale = full.max_abs();
        assert!(fast.max_abs_diff(&full) <= 1e-5 * scale);
    }

    #[test]
    fn zero_coefficients_reconstruct_the_mean_model() {
        // a model built from a single texture's pyramid reproduces that texture
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tex = rand_tex(&mut rng, 32, 32, 2);
        let f = WaveletFilter::bior22();
        let pyr = dwt_multilevel(&tex, 4, &f).unwrap();
        let bank_of = |d: &DetailTriple, level: usize| FactorizedBank {
            level,
            rank: 0,
            subbands: d.bands().map(|b| FactorizedSubband {
                mean: b.clone(),
                h: Texture::zeros(b.height(), 0, 2),
                w: Texture::zeros(b.width(), 0, 2),
            }),
        };
        let model = StudentModel::new(
            ChannelLayout::generic(2),
            f,
            (32, 32),
            LlBlendshapeBank { mean: pyr.ll.clone(), bases: vec![] },
            vec![bank_of(&pyr.details[3], 3), bank_of(&pyr.details[2], 2)],
            vec![pyr.details[1].clone(), pyr.details[0].clone()],
        )
        .unwrap();
        let out = reconstruct(&model, &model.zero_coefficients()).unwrap();
        assert!(out.max_abs_diff(&tex) <= 1e-5 * tex.max_abs());
        let pc = model.param_count();
        let means = pyr.ll.len() + pyr.details.iter().map(|d| 3 * d.lh.len()).sum::<usize>();
        assert_eq!(pc.total(), means);
        assert_eq!(pc.blendshape_bases(), 0);
    }

    #[test]
    fn reconstruction_is_linear_in_coefficients() {
        let model = random_model(8, 32, 2, (2, 2, 1));
        let c1 = random_coeffs(&model, 9);
        let c2 = random_coeffs(&model, 10);
        let (a, b) = (0.7, -1.3);
        let base = reconstruct(&model, &model.zero_coefficients()).unwrap();
        let lhs = reconstruct(&model, &c1.linear_combination(a, &c2, b).unwrap()).unwrap().sub(&base).unwrap();
        let r1 = reconstruct(&model, &c1).unwrap().sub(&base).unwrap().scaled(a as f32);
        let mut rhs = reconstruct(&model, &c2).unwrap().sub(&base).unwrap().scaled(b as f32);
        rhs.add_assign(&r1).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-5 * rhs.max_abs().max(1.0));
    }

    #[test]
    fn doubling_ranks_doubles_basis_parameters() {
        let a = random_model(11, 64, 2, (2, 3, 1)).param_count();
        let b = random_model(11, 64, 2, (4, 6, 2)).param_count();
        assert_eq!(b.blendshape_bases(), 2 * a.blendshape_bases());
        assert_eq!(a.ll_mean + a.factorized_means + a.static_means, b.total() - b.blendshape_bases());
    }

    #[test]
    fn save_load_round_trip_and_offset_check() {
        let dir = tempfile::tempdir().unwrap();
        let model = random_model(12, 32, 2, (2, 1, 2));
        model.save(dir.path()).unwrap();
        let back = StudentModel::load(dir.path()).unwrap();
        assert_eq!(back, model);

        // corrupt the stored offset
        let entry = BlobEntry::new("static_offset.f32", Dtype::F32, vec![32, 32, 2]);
        let mut data = model.static_offset.data().to_vec();
        data[5] += 1e-3;
        write_blob(dir.path(), &entry, &data).unwrap();
        assert!(matches!(StudentModel::load(dir.path()), Err(Error::Manifest { .. })));
    }

    #[test]
    fn reconstruct_is_bit_stable() {
        let model = random_model(13, 32, 2, (2, 1, 1));
        let c = random_coeffs(&model, 14);
        assert_eq!(reconstruct(&model, &c).unwrap(), reconstruct(&model, &c).unwrap());
    }
}
