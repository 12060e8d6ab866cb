//! Separable 2D discrete wavelet transform over texture channels.
//!
//! Filters are odd-length, symmetric and centred. Signals are extended with
//! whole-sample symmetry (`x[-1] = x[1]`), low-pass outputs are taken at even
//! sample positions and high-pass outputs at odd ones. With a biorthogonal
//! pair such as bior2.2 (CDF 5/3) this reconstructs even-length signals exactly.
//!
//! Subband naming: the first letter is the filter applied along the width
//! (rows), the second the filter applied along the height (columns). `LH` is
//! therefore low-pass horizontally and high-pass vertically.
//!
//! Level 0 is the finest decomposition (half of the input resolution).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Texture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletFilter {
    pub analysis_lowpass: Vec<f64>,
    pub analysis_highpass: Vec<f64>,
    pub synthesis_lowpass: Vec<f64>,
    pub synthesis_highpass: Vec<f64>,
}

impl Default for WaveletFilter {
    fn default() -> Self {
        Self::bior22()
    }
}

impl WaveletFilter {
    /// Biorthogonal 2.2 (CDF 5/3) with orthonormal-style sqrt(2) scaling.
    pub fn bior22() -> Self {
        let s = std::f64::consts::SQRT_2;
        WaveletFilter {
            analysis_lowpass: [-0.125, 0.25, 0.75, 0.25, -0.125].map(|v| v * s).to_vec(),
            analysis_highpass: [-0.25, 0.5, -0.25].map(|v| v * s).to_vec(),
            synthesis_lowpass: [0.25, 0.5, 0.25].map(|v| v * s).to_vec(),
            synthesis_highpass: [-0.125, -0.25, 0.75, -0.25, -0.125].map(|v| v * s).to_vec(),
        }
    }

    /// Validates shape constraints and checks perfect reconstruction on probe signals.
    pub fn new(
        analysis_lowpass: Vec<f64>,
        analysis_highpass: Vec<f64>,
        synthesis_lowpass: Vec<f64>,
        synthesis_highpass: Vec<f64>,
    ) -> Result<Self> {
        let f = WaveletFilter { analysis_lowpass, analysis_highpass, synthesis_lowpass, synthesis_highpass };
        f.validate()?;
        Ok(f)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let f: WaveletFilter = crate::tensor::read_json(path)?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, taps) in [
            ("analysis_lowpass", &self.analysis_lowpass),
            ("analysis_highpass", &self.analysis_highpass),
            ("synthesis_lowpass", &self.synthesis_lowpass),
            ("synthesis_highpass", &self.synthesis_highpass),
        ] {
            if taps.len() % 2 == 0 {
                return Err(Error::Config(format!("{name} must have odd length")));
            }
            let n = taps.len();
            if (0..n).any(|i| (taps[i] - taps[n - 1 - i]).abs() > 1e-12) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            if taps.iter().any(|t| !t.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite taps")));
            }
        }
        let err = self.reconstruction_error();
        if err > 1e-9 {
            return Err(Error::Config(format!("filter bank does not reconstruct perfectly (max error {err:.3e})")));
        }
        Ok(())
    }

    /// Worst round-trip error over a few deterministic probe signals.
    pub fn reconstruction_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for n in [2usize, 4, 6, 10, 16, 34] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7919 + 13) % 101) as f64 / 50.0 - 1.0).collect();
            let mut low = vec![0.0; n / 2];
            let mut high = vec![0.0; n / 2];
            self.analyze_line(&x, &mut low, &mut high);
            let mut y = vec![0.0; n];
            self.synthesize_line(&low, Some(&high), &mut y);
            for (a, b) in x.iter().zip(&y) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Common tap count of the synthesis branches.
    pub fn synthesis_taps(&self) -> usize {
        self.synthesis_lowpass.len().max(self.synthesis_highpass.len())
    }

    /// Per-axis gain of the low-pass synthesis branch on a constant signal.
    pub fn synthesis_dc_gain(&self) -> f64 {
        self.synthesis_lowpass.iter().sum::<f64>() / 2.0
    }

    pub(crate) fn analyze_line(&self, x: &[f64], low: &mut [f64], high: &mut [f64]) {
        let n = x.len();
        let h0 = &self.analysis_lowpass;
        let h1 = &self.analysis_highpass;
        let c0 = (h0.len() / 2) as isize;
        let c1 = (h1.len() / 2) as isize;
        for k in 0..n / 2 {
            let centre = 2 * k as isize;
            let mut acc = 0.0;
            for (i, tap) in h0.iter().enumerate() {
                acc += tap * x[reflect(centre + i as isize - c0, n)];
            }
            low[k] = acc;
            let centre = centre + 1;
            let mut acc = 0.0;
            for (i, tap) in h1.iter().enumerate() {
                acc += tap * x[reflect(centre + i as isize - c1, n)];
            }
            high[k] = acc;
        }
    }

    /// Inverse of `analyze_line`. With `high = None` only the low-pass branch runs.
    pub(crate) fn synthesize_line(&self, low: &[f64], high: Option<&[f64]>, out: &mut [f64]) {
        let n = out.len();
        let g0 = &self.synthesis_lowpass;
        let g1 = &self.synthesis_highpass;
        let c0 = (g0.len() / 2) as isize;
        let c1 = (g1.len() / 2) as isize;
        for (m, o) in out.iter_mut().enumerate() {
            let m = m as isize;
            let mut acc = 0.0;
            // even extended positions carry low-pass samples
            let mut t = -c0 + (m - c0).rem_euclid(2);
            while t <= c0 {
                let j = reflect(m + t, n);
                acc += g0[(c0 + t) as usize] * low[j / 2];
                t += 2;
            }
            if let Some(high) = high {
                let mut t = -c1 + (m - c1 + 1).rem_euclid(2);
                while t <= c1 {
                    let j = reflect(m + t, n);
                    acc += g1[(c1 + t) as usize] * high[j / 2];
                    t += 2;
                }
            }
            *o = acc;
        }
    }
}

/// Whole-sample symmetric extension; preserves index parity.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Row-major single-channel plane in double precision.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(h: usize, w: usize) -> Self {
        Plane { h, w, data: vec![0.0; h * w] }
    }
}

struct PlaneBands {
    ll: Plane,
    lh: Plane,
    hl: Plane,
    hh: Plane,
}

fn dwt2_plane(p: &Plane, f: &WaveletFilter) -> PlaneBands {
    let (h, w) = (p.h, p.w);
    let (h2, w2) = (h / 2, w / 2);
    // along width
    let mut lw = Plane::zeros(h, w2);
    let mut hw = Plane::zeros(h, w2);
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        let (lo, hi) = (&mut lw.data[y * w2..(y + 1) * w2], &mut hw.data[y * w2..(y + 1) * w2]);
        f.analyze_line(row, lo, hi);
    }
    // along height
    let mut col = vec![0.0; h];
    let mut lo = vec![0.0; h2];
    let mut hi = vec![0.0; h2];
    let mut split = |src: &Plane| {
        let mut low = Plane::zeros(h2, w2);
        let mut high = Plane::zeros(h2, w2);
        for x in 0..w2 {
            for y in 0..h {
                col[y] = src.data[y * w2 + x];
            }
            f.analyze_line(&col, &mut lo, &mut hi);
            for y in 0..h2 {
                low.data[y * w2 + x] = lo[y];
                high.data[y * w2 + x] = hi[y];
            }
        }
        (low, high)
    };
    let (ll, lh) = split(&lw);
    let (hl, hh) = split(&hw);
    PlaneBands { ll, lh, hl, hh }
}

/// One synthesis stage. `details = None` runs only the low-pass branch.
fn idwt2_plane(ll: &Plane, details: Option<(&Plane, &Plane, &Plane)>, f: &WaveletFilter) -> Plane {
    let (h2, w2) = (ll.h, ll.w);
    let (h, w) = (2 * h2, 2 * w2);
    let mut lo = vec![0.0; h2];
    let mut hi = vec![0.0; h2];
    let mut col = vec![0.0; h];
    let mut merge = |low: &Plane, high: Option<&Plane>| {
        let mut out = Plane::zeros(h, w2);
        for x in 0..w2 {
            for y in 0..h2 {
                lo[y] = low.data[y * w2 + x];
            }
            let high_col = high.map(|hp| {
                for y in 0..h2 {
                    hi[y] = hp.data[y * w2 + x];
                }
                &hi[..]
            });
            f.synthesize_line(&lo, high_col, &mut col);
            for y in 0..h {
                out.data[y * w2 + x] = col[y];
            }
        }
        out
    };
    let (lw, hw) = match details {
        Some((lh, hl, hh)) => (merge(ll, Some(lh)), Some(merge(hl, Some(hh)))),
        None => (merge(ll, None), None),
    };
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        let lrow = &lw.data[y * w2..(y + 1) * w2];
        let hrow = hw.as_ref().map(|p| &p.data[y * w2..(y + 1) * w2]);
        f.synthesize_line(lrow, hrow, &mut out.data[y * w..(y + 1) * w]);
    }
    out
}

fn planes_of(t: &Texture) -> Vec<Plane> {
    t.planes().into_iter().map(|data| Plane { h: t.height(), w: t.width(), data }).collect()
}

fn texture_of(planes: &[Plane]) -> Texture {
    let (h, w) = (planes[0].h, planes[0].w);
    let data: Vec<Vec<f64>> = planes.iter().map(|p| p.data.clone()).collect();
    Texture::from_planes(h, w, &data).expect("planes share a shape")
}

/// The three orientation subbands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailTriple {
    pub lh: Texture,
    pub hl: Texture,
    pub hh: Texture,
}

impl DetailTriple {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        DetailTriple { lh: Texture::zeros(h, w, c), hl: Texture::zeros(h, w, c), hh: Texture::zeros(h, w, c) }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.lh.shape()
    }

    pub fn bands(&self) -> [&Texture; 3] {
        [&self.lh, &self.hl, &self.hh]
    }

    pub fn bands_mut(&mut self) -> [&mut Texture; 3] {
        [&mut self.lh, &mut self.hl, &mut self.hh]
    }

    pub fn from_bands(bands: [Texture; 3]) -> Result<Self> {
        let [lh, hl, hh] = bands;
        lh.expect_shape(&hl, "detail triple")?;
        lh.expect_shape(&hh, "detail triple")?;
        Ok(DetailTriple { lh, hl, hh })
    }

    fn validate(&self) -> Result<()> {
        self.lh.expect_shape(&self.hl, "detail triple")?;
        self.lh.expect_shape(&self.hh, "detail triple")
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.energy()).sum()
    }

    fn channel_planes(&self, c: usize) -> [Plane; 3] {
        let (h, w, _) = self.shape();
        self.bands().map(|b| Plane { h, w, data: b.plane(c) })
    }
}

/// Coarsest low-pass band plus detail triples, `details[0]` being the finest.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub ll: Texture,
    pub details: Vec<DetailTriple>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }
}

/// Single-level analysis: returns `(LL, LH, HL, HH)` at half resolution.
pub fn dwt2(tex: &Texture, filter: &WaveletFilter) -> Result<(Texture, Texture, Texture, Texture)> {
    if !tex.height().is_multiple_of(2) || !tex.width().is_multiple_of(2) || tex.height() == 0 || tex.width() == 0 {
        return Err(Error::Shape(format!("dwt2 needs even non-zero dimensions, got {}x{}", tex.height(), tex.width())));
    }
    let bands: Vec<PlaneBands> = planes_of(tex).iter().map(|p| dwt2_plane(p, filter)).collect();
    let pick = |sel: fn(&PlaneBands) -> &Plane| texture_of(&bands.iter().map(|b| sel(b).clone()).collect::<Vec<_>>());
    Ok((pick(|b| &b.ll), pick(|b| &b.lh), pick(|b| &b.hl), pick(|b| &b.hh)))
}

/// Single-level synthesis from four equally shaped subbands.
pub fn idwt2(ll: &Texture, lh: &Texture, hl: &Texture, hh: &Texture, filter: &WaveletFilter) -> Result<Texture> {
    ll.expect_shape(lh, "idwt2 LH")?;
    ll.expect_shape(hl, "idwt2 HL")?;
    ll.expect_shape(hh, "idwt2 HH")?;
    let details = DetailTriple { lh: lh.clone(), hl: hl.clone(), hh: hh.clone() };
    let out: Vec<Plane> = (0..ll.channels())
        .map(|c| {
            let low = Plane { h: ll.height(), w: ll.width(), data: ll.plane(c) };
            let [a, b, d] = details.channel_planes(c);
            idwt2_plane(&low, Some((&a, &b, &d)), filter)
        })
        .collect();
    Ok(texture_of(&out))
}

/// Recursive analysis of the low-pass band, `levels` times.
pub fn dwt_multilevel(tex: &Texture, levels: usize, filter: &WaveletFilter) -> Result<WaveletPyramid> {
    let div = 1usize << levels;
    if !tex.height().is_multiple_of(div) || !tex.width().is_multiple_of(div) || tex.height() == 0 || tex.width() == 0 {
        return Err(Error::Shape(format!("{}x{} is not divisible by 2^{levels}", tex.height(), tex.width())));
    }
    let mut cur = planes_of(tex);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let bands: Vec<PlaneBands> = cur.iter().map(|p| dwt2_plane(p, filter)).collect();
        details.push(DetailTriple {
            lh: texture_of(&bands.iter().map(|b| b.lh.clone()).collect::<Vec<_>>()),
            hl: texture_of(&bands.iter().map(|b| b.hl.clone()).collect::<Vec<_>>()),
            hh: texture_of(&bands.iter().map(|b| b.hh.clone()).collect::<Vec<_>>()),
        });
        cur = bands.into_iter().map(|b| b.ll).collect();
    }
    Ok(WaveletPyramid { ll: texture_of(&cur), details })
}

/// Full multilevel synthesis.
pub fn idwt_multilevel(pyr: &WaveletPyramid, filter: &WaveletFilter) -> Result<Texture> {
    let coarse_to_fine: Vec<&DetailTriple> = pyr.details.iter().rev().collect();
    synthesize(&pyr.ll, &coarse_to_fine, 0, filter)
}

/// Synthesizes `ll` through the given detail levels (coarsest first), then
/// through `low_only` further stages with zero details.
fn synthesize(
    ll: &Texture,
    coarse_to_fine: &[&DetailTriple],
    low_only: usize,
    filter: &WaveletFilter,
) -> Result<Texture> {
    let (mut h, mut w, c) = ll.shape();
    for d in coarse_to_fine {
        d.validate()?;
        if d.shape() != (h, w, c) {
            return Err(Error::Shape(format!("detail level {:?} does not match low-pass {:?}", d.shape(), (h, w, c))));
        }
        h *= 2;
        w *= 2;
    }
    let out: Vec<Plane> = (0..c)
        .map(|ch| {
            let mut cur = Plane { h: ll.height(), w: ll.width(), data: ll.plane(ch) };
            for d in coarse_to_fine {
                let [a, b, e] = d.channel_planes(ch);
                cur = idwt2_plane(&cur, Some((&a, &b, &e)), filter);
            }
            for _ in 0..low_only {
                cur = idwt2_plane(&cur, None, filter);
            }
            cur
        })
        .collect();
    Ok(texture_of(&out))
}

/// Per-frame synthesis with zero detail at the finest levels plus a precomputed offset.
///
/// `dynamic` holds the per-frame detail triples, coarsest first. The number of
/// trailing low-pass-only stages is implied by the resolution of `static_offset`.
pub fn idwt_partial(
    ll: &Texture,
    dynamic: &[&DetailTriple],
    static_offset: &Texture,
    filter: &WaveletFilter,
) -> Result<Texture> {
    let dyn_h = ll.height() << dynamic.len();
    let dyn_w = ll.width() << dynamic.len();
    let low_only = stages_between(dyn_h, dyn_w, static_offset.height(), static_offset.width()).ok_or_else(|| {
        Error::Shape(format!(
            "static offset {}x{} is not a power-of-two multiple of {dyn_h}x{dyn_w}",
            static_offset.height(),
            static_offset.width()
        ))
    })?;
    if static_offset.channels() != ll.channels() {
        return Err(Error::Shape("static offset channel count differs".into()));
    }
    let mut out = synthesize(ll, dynamic, low_only, filter)?;
    out.add_assign(static_offset)?;
    Ok(out)
}

fn stages_between(h: usize, w: usize, th: usize, tw: usize) -> Option<usize> {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while h < th {
        h *= 2;
        w *= 2;
        n += 1;
    }
    (h == th && w == tw).then_some(n)
}

/// Full-resolution contribution of frozen detail means, `means` coarsest first.
pub fn precompute_static_offset(
    means: &[&DetailTriple],
    output_shape: (usize, usize),
    filter: &WaveletFilter,
) -> Result<Texture> {
    let Some(first) = means.first() else {
        return Err(Error::Shape("no detail means to synthesize".into()));
    };
    let (h, w, c) = first.shape();
    let out = synthesize(&Texture::zeros(h, w, c), means, 0, filter)?;
    if (out.height(), out.width()) != output_shape {
        return Err(Error::Shape(format!(
            "detail means synthesize to {}x{}, expected {}x{}",
            out.height(),
            out.width(),
            output_shape.0,
            output_shape.1
        )));
    }
    Ok(out)
}
