//! Synthetic teacher: mixed-frequency attribute textures driven by a smooth pose track.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Skeleton, SkinInfluences, TemplateMesh};
use crate::predictor::PoseTrack;
use crate::tensor::{ChannelLayout, Texture, TextureSequence, OPACITY_A, ROTATION_Q, SCALE_S};

/// Textures are split into pyramids of this many levels, so sides must divide by 16.
pub const RESOLUTION_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Amplitudes {
    /// Smooth pose-driven fields.
    pub low: f64,
    /// Sparse axis-aligned ridges switched on by the pose.
    pub mid: f64,
    /// Frame-invariant texel noise.
    pub noise: f64,
}

impl Default for Amplitudes {
    fn default() -> Self {
        Amplitudes { low: 1.0, mid: 0.5, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub resolution: usize,
    /// 23 selects the splat attribute layout, any other count an anonymous one.
    pub channels: usize,
    pub frames: usize,
    pub seed: u64,
    pub amplitudes: Amplitudes,
    pub pose_dofs: usize,
    pub latent_dim: usize,
    pub low_components: usize,
    pub mid_components: usize,
    pub frame_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            resolution: 64,
            channels: ChannelLayout::student().channels(),
            frames: 16,
            seed: 0,
            amplitudes: Amplitudes::default(),
            pose_dofs: 30,
            latent_dim: 6,
            low_components: 24,
            mid_components: 16,
            frame_rate: 30.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(RESOLUTION_BLOCK) {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of {RESOLUTION_BLOCK}",
                self.resolution
            )));
        }
        if self.channels == 0 || self.frames == 0 || self.latent_dim == 0 {
            return Err(Error::Config("channels, frames and latent dimension must be positive".into()));
        }
        let a = &self.amplitudes;
        if [a.low, a.mid, a.noise].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("amplitudes must be finite and non-negative".into()));
        }
        let need = template_skeleton().pose_dofs();
        if self.pose_dofs < need {
            return Err(Error::Config(format!("at least {need} pose dofs are needed, got {}", self.pose_dofs)));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("frame rate must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ChannelLayout {
        let student = ChannelLayout::student();
        if self.channels == student.channels() {
            student
        } else {
            ChannelLayout::generic(self.channels)
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Two joints along +z: the root at the origin and a knee half-way up the cylinder.
fn template_skeleton() -> Skeleton {
    Skeleton::chain(2, Vector3::z(), 0.5).expect("static skeleton")
}

/// A capped-free cylinder of radius 0.2 and height 1, UVs covering the unit square.
fn cylinder(segments: usize, rings: usize) -> TemplateMesh {
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut skin = Vec::new();
    for r in 0..=rings {
        let v = r as f64 / rings as f64;
        for s in 0..=segments {
            let u = s as f64 / segments as f64;
            let phi = 2.0 * PI * u;
            vertices.push([0.2 * phi.cos(), 0.2 * phi.sin(), v].map(round_f32));
            uv.push([u, v].map(round_f32));
            let t = ((v - 0.3) / 0.4).clamp(0.0, 1.0);
            // quantize so the weights stay an exact partition of one in f32
            let w1 = round_f32(t * t * (3.0 - 2.0 * t));
            skin.push(SkinInfluences::from_pairs(&[(0, 1.0 - w1), (1, w1)]).expect("two influences"));
        }
    }
    let stride = (segments + 1) as u32;
    let mut triangles = Vec::new();
    for r in 0..rings as u32 {
        for s in 0..segments as u32 {
            let a = r * stride + s;
            triangles.push([a, a + 1, a + stride + 1]);
            triangles.push([a, a + stride + 1, a + stride]);
        }
    }
    TemplateMesh { vertices, triangles, uv, skin, skeleton: template_skeleton() }
}

/// A rotated anisotropic Gaussian blob, a diagonal wave or a sum of blobs.
fn low_field(rng: &mut impl Rng, j: usize, n: usize) -> Vec<f64> {
    let nf = n as f64;
    let mut out = vec![0.0; n * n];
    if j % 4 == 3 {
        let kx = [1.0, 2.0][rng.random_range(0..2)] * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let ky = [1.0, 2.0][rng.random_range(0..2)];
        let ph = rng.random_range(0.0..2.0 * PI);
        for y in 0..n {
            for x in 0..n {
                let (u, v) = ((x as f64 + 0.5) / nf, (y as f64 + 0.5) / nf);
                out[y * n + x] = (2.0 * PI * (kx * u + ky * v) + ph).cos();
            }
        }
        return out;
    }
    for _ in 0..3 {
        let (cy, cx) = (rng.random_range(0.15..0.85) * nf, rng.random_range(0.15..0.85) * nf);
        let (sa, sb) = (rng.random_range(nf / 8.0..nf / 5.0), rng.random_range(nf / 14.0..nf / 9.0));
        let th = rng.random_range(0.0..PI);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (c, s) = (th.cos(), th.sin());
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
                out[y * n + x] += sign * (-0.5 * (a * a / (sa * sa) + b * b / (sb * sb))).exp();
            }
        }
    }
    out
}

/// An axis-aligned ridge: a Mexican-hat profile across, a Gaussian window along.
fn ridge_field(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let nf = n as f64;
    let s = rng.random_range(nf / 64.0..nf / 42.0);
    let len = rng.random_range(nf / 10.0..nf / 5.0);
    let (c_across, c_along) = (rng.random_range(0.15..0.85) * nf, rng.random_range(0.2..0.8) * nf);
    let horizontal = rng.random_bool(0.5);
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (across, along) = if horizontal { (y, x) } else { (x, y) };
            let t = (across as f64 + 0.5 - c_across) / s;
            let a = (along as f64 + 0.5 - c_along) / len;
            out[y * n + x] = (1.0 - t * t) * (-0.5 * t * t).exp() * (-0.5 * a * a).exp();
        }
    }
    out
}

/// Constant per-channel offsets that keep splat attributes in sensible ranges.
fn channel_bias(layout: &ChannelLayout) -> Vec<f64> {
    let mut bias = vec![0.0; layout.channels()];
    if let Ok(r) = layout.range_of(ROTATION_Q) {
        bias[r.start] = 1.0;
    }
    if let Ok(r) = layout.range_of(SCALE_S) {
        bias[r].iter_mut().for_each(|b| *b = -4.0);
    }
    if let Ok(r) = layout.range_of(OPACITY_A) {
        bias[r].iter_mut().for_each(|b| *b = 2.0);
    }
    bias
}

/// Generates a deterministic dataset from `cfg`.
pub fn synth_teacher(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, c, p) = (cfg.resolution, cfg.channels, cfg.latent_dim);

    // latent trajectory: a few slow sinusoids per dimension
    let waves: Vec<Vec<(f64, f64, f64)>> = (0..p)
        .map(|_| {
            (0..3)
                .map(|_| (rng.random_range(0.3..1.0), rng.random_range(0.2..1.2), rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let latent: Vec<Vec<f64>> = (0..cfg.frames)
        .map(|f| {
            let t = f as f64 / cfg.frame_rate;
            waves
                .iter()
                .map(|ws| ws.iter().map(|(a, nu, ph)| a * (2.0 * PI * nu * t + ph).sin()).sum::<f64>() / 1.5)
                .collect()
        })
        .collect();

    let mix: Vec<Vec<f64>> = (0..cfg.pose_dofs).map(|_| (0..p).map(|_| 0.3 * normal(&mut rng)).collect()).collect();
    let drift = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0];
    let poses: Vec<Vec<f64>> = latent
        .iter()
        .enumerate()
        .map(|(f, z)| {
            let t = f as f64 / cfg.frame_rate;
            mix.iter()
                .enumerate()
                .map(|(d, row)| {
                    let v: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                    round_f32(if d < 3 { v + drift[d] * t } else { v })
                })
                .collect()
        })
        .collect();

    // per-component activations of the latent state
    let mut activation = |count: usize| -> Vec<(Vec<f64>, f64)> {
        (0..count)
            .map(|_| ((0..p).map(|_| 1.5 * normal(&mut rng)).collect(), rng.random_range(0.0..2.0 * PI)))
            .collect()
    };
    let low_act = activation(cfg.low_components);
    let mid_act = activation(cfg.mid_components);
    let geo_act = activation(6);
    let act = |w: &(Vec<f64>, f64), z: &[f64]| (w.0.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w.1).sin();

    let low_fields: Vec<Vec<f64>> = (0..cfg.low_components).map(|j| low_field(&mut rng, j, n)).collect();
    let ridges: Vec<Vec<f64>> = (0..cfg.mid_components).map(|_| ridge_field(&mut rng, n)).collect();
    let low_w: Vec<Vec<f64>> = (0..cfg.low_components).map(|_| (0..c).map(|_| normal(&mut rng)).collect()).collect();
    let mid_w: Vec<Vec<f64>> = (0..cfg.mid_components).map(|_| (0..c).map(|_| normal(&mut rng)).collect()).collect();
    let noise: Vec<f64> = (0..n * n * c).map(|_| normal(&mut rng)).collect();
    let layout = cfg.layout();
    let bias = channel_bias(&layout);

    let amps = cfg.amplitudes;
    let frames: Vec<Texture> = latent
        .par_iter()
        .map(|z| {
            let low: Vec<Vec<f64>> = low_act
                .iter()
                .zip(&low_w)
                .map(|(a, w)| {
                    let s = amps.low * act(a, z);
                    w.iter().map(|v| s * v).collect()
                })
                .collect();
            let mid: Vec<Vec<f64>> = mid_act
                .iter()
                .zip(&mid_w)
                .map(|(a, w)| {
                    // wrinkles fade in and out rather than flip sign
                    let s = amps.mid * 0.5 * (1.0 + act(a, z));
                    w.iter().map(|v| s * v).collect()
                })
                .collect();
            let mut data = vec![0f32; n * n * c];
            let mut acc = vec![0.0; c];
            for t in 0..n * n {
                acc.copy_from_slice(&bias);
                for (field, coef) in low_fields.iter().zip(&low) {
                    let v = field[t];
                    acc.iter_mut().zip(coef).for_each(|(a, k)| *a += k * v);
                }
                for (field, coef) in ridges.iter().zip(&mid) {
                    let v = field[t];
                    if v != 0.0 {
                        acc.iter_mut().zip(coef).for_each(|(a, k)| *a += k * v);
                    }
                }
                for ch in 0..c {
                    data[t * c + ch] = (acc[ch] + amps.noise * noise[t * c + ch]) as f32;
                }
            }
            Texture::new(n, n, c, data).expect("sized buffer")
        })
        .collect();
    let sequence = TextureSequence::new(frames, layout, cfg.frame_rate)?;

    let mesh = cylinder(32, 16);
    let modes: Vec<(usize, usize)> = (0..geo_act.len()).map(|j| (j % 3 + 1, j / 3 + 1)).collect();
    let canonical = latent
        .iter()
        .map(|z| {
            let coef: Vec<f64> = geo_act.iter().map(|a| 0.02 * act(a, z)).collect();
            mesh.vertices
                .iter()
                .zip(&mesh.uv)
                .flat_map(|(p, uv)| {
                    let phi = 2.0 * PI * uv[0];
                    let bulge: f64 = modes
                        .iter()
                        .zip(&coef)
                        .map(|(&(k, m), w)| w * (k as f64 * phi).cos() * (PI * m as f64 * p[2]).sin())
                        .sum();
                    [p[0] * (1.0 + 5.0 * bulge), p[1] * (1.0 + 5.0 * bulge), p[2]].map(round_f32)
                })
                .collect()
        })
        .collect();
    Dataset::new(sequence, PoseTrack::new(poses)?, Some(mesh), Some(canonical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::build_subband_dataset;
    use crate::geometry::build_texel_map;
    use crate::wavelet::WaveletFilter;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { resolution: 32, channels: 4, frames: 3, seed, ..SynthConfig::default() }
    }

    #[test]
    fn same_seed_same_data() {
        let (a, b) = (synth_teacher(&small(3)).unwrap(), synth_teacher(&small(3)).unwrap());
        assert_eq!(a, b);
        let c = synth_teacher(&small(4)).unwrap();
        assert_ne!(a.sequence, c.sequence);
    }

    #[test]
    fn low_frequency_content_stays_coarse() {
        let cfg = SynthConfig {
            resolution: 128,
            channels: 3,
            frames: 4,
            amplitudes: Amplitudes { low: 1.0, mid: 0.0, noise: 0.0 },
            ..SynthConfig::default()
        };
        let ds = synth_teacher(&cfg).unwrap();
        let sub = build_subband_dataset(&ds.sequence, &WaveletFilter::bior22(), 4).unwrap();
        for p in &sub.pyramids {
            let fine: f64 = p.details[..3].iter().map(|d| d.energy()).sum();
            let total = p.ll.energy() + p.details.iter().map(|d| d.energy()).sum::<f64>();
            assert!(fine <= 0.05 * total, "fine fraction {}", fine / total);
        }
    }

    #[test]
    fn static_noise_is_captured_by_means() {
        let cfg = SynthConfig {
            resolution: 64,
            channels: 2,
            frames: 5,
            amplitudes: Amplitudes { low: 0.0, mid: 0.0, noise: 1.0 },
            ..SynthConfig::default()
        };
        let ds = synth_teacher(&cfg).unwrap();
        let sub = build_subband_dataset(&ds.sequence, &WaveletFilter::bior22(), 4).unwrap();
        for level in 0..2 {
            let mean_energy = sub.detail_means[level].energy() * sub.frames() as f64;
            let total: f64 = sub.pyramids.iter().map(|p| p.details[level].energy()).sum();
            assert!(mean_energy >= 0.95 * total);
        }
    }

    #[test]
    fn template_is_valid_and_fully_covers_uv() {
        let ds = synth_teacher(&small(1)).unwrap();
        let mesh = ds.mesh.as_ref().unwrap();
        mesh.validate().unwrap();
        assert_eq!(build_texel_map(mesh, 32, 32).covered(), 32 * 32);
        assert_eq!(ds.canonical.as_ref().unwrap()[0].len(), 3 * mesh.vertices.len());
        assert_eq!(ds.poses.dofs, 30);
    }

    #[test]
    fn student_layout_and_round_trip() {
        let cfg = SynthConfig { resolution: 16, frames: 2, ..SynthConfig::default() };
        let ds = synth_teacher(&cfg).unwrap();
        assert_eq!(ds.sequence.layout(), &ChannelLayout::student());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.resolution = 100;
        assert!(synth_teacher(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.amplitudes.mid = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.pose_dofs = 4;
        assert!(cfg.validate().is_err());
    }
}
