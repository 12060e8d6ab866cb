//! Motion descriptors and the small fully connected coefficient predictors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blendshape::{CoefficientSet, StudentModel};
use crate::error::{Error, Result};
use crate::tensor::{ensure_dir, read_blob, read_json, write_blob, write_json, BlobEntry, Dtype};

/// Number of leading pose dofs holding the root translation.
pub const ROOT_TRANSLATION_DOFS: usize = 3;
pub const MLP_MANIFEST: &str = "mlp.json";
pub const POSE_MANIFEST: &str = "poses.json";

/// Poses per frame, each `[root translation 3, root axis-angle 3, 3 per further joint]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrack {
    pub dofs: usize,
    pub poses: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PoseManifest {
    version: u32,
    frames: usize,
    dofs: usize,
    blob: BlobEntry,
}

impl PoseTrack {
    pub fn new(poses: Vec<Vec<f64>>) -> Result<Self> {
        let dofs = poses.first().map_or(0, |p| p.len());
        if poses.iter().any(|p| p.len() != dofs) {
            return Err(Error::Shape("poses differ in dof count".into()));
        }
        if poses.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("pose track contains non-finite values".into()));
        }
        Ok(PoseTrack { dofs, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn subset(&self, frames: &[usize]) -> PoseTrack {
        PoseTrack { dofs: self.dofs, poses: frames.iter().map(|&f| self.poses[f].clone()).collect() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let blob = BlobEntry::new("poses.f32", Dtype::F32, vec![self.len(), self.dofs]);
        let flat: Vec<f32> = self.poses.iter().flatten().map(|&v| v as f32).collect();
        write_blob(dir, &blob, &flat)?;
        write_json(&dir.join(POSE_MANIFEST), &PoseManifest { version: 1, frames: self.len(), dofs: self.dofs, blob })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(POSE_MANIFEST);
        let m: PoseManifest = read_json(&path)?;
        if m.blob.shape != [m.frames, m.dofs] {
            return Err(Error::manifest(&path, "pose blob shape disagrees with header"));
        }
        let flat = read_blob::<f32>(dir, &m.blob)?;
        let poses = flat.chunks(m.dofs.max(1)).take(m.frames).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        PoseTrack::new(poses)
    }
}

/// A `k × D` window of poses ending at frame `f`, root translation relative to frame `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDescriptor {
    pub window: usize,
    pub dofs: usize,
    pub values: Vec<f64>,
}

impl MotionDescriptor {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dofs..(i + 1) * self.dofs]
    }
}

pub fn build_descriptor(track: &PoseTrack, f: usize, k: usize) -> Result<MotionDescriptor> {
    if track.is_empty() {
        return Err(Error::Config("empty pose track".into()));
    }
    if f >= track.len() {
        return Err(Error::Config(format!("frame {f} beyond a {}-frame track", track.len())));
    }
    let d = track.dofs;
    let root = ROOT_TRANSLATION_DOFS.min(d);
    let anchor = &track.poses[f][..root];
    let mut values = Vec::with_capacity(k * d);
    for i in 0..k {
        let src = (f + i + 1).saturating_sub(k);
        let pose = &track.poses[src];
        values.extend(pose.iter().enumerate().map(|(j, &v)| if j < root { v - anchor[j] } else { v }));
    }
    Ok(MotionDescriptor { window: k, dofs: d, values })
}

/// Descriptors for every frame of a track.
pub fn descriptors(track: &PoseTrack, k: usize) -> Result<Vec<Vec<f64>>> {
    (0..track.len()).map(|f| build_descriptor(track, f, k).map(|d| d.values)).collect()
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `outputs × inputs`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fully connected network with ELU hidden layers and affine input/output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMlp {
    pub layers: Vec<Layer>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: Vec<f64>,
    pub output_scale: Vec<f64>,
}

/// Intermediate values of a batched forward pass.
pub struct ForwardCache {
    /// Inputs to each layer (after activation of the previous one).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DMatrix<f64>>,
    pub outputs: DMatrix<f64>,
}

impl CoefficientMlp {
    fn with_layers(layers: Vec<Layer>) -> Self {
        let i = layers.first().map_or(0, |l| l.weights.ncols());
        let o = layers.last().map_or(0, |l| l.weights.nrows());
        CoefficientMlp {
            layers,
            input_shift: vec![0.0; i],
            input_scale: vec![1.0; i],
            output_shift: vec![0.0; o],
            output_scale: vec![1.0; o],
        }
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        Ok(Self::with_layers(
            sizes
                .windows(2)
                .map(|p| Layer { weights: DMatrix::zeros(p[1], p[0]), bias: DVector::zeros(p[1]) })
                .collect(),
        ))
    }

    /// He-style initialization; the output layer starts small.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = mlp.layers.len();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let fan_in = layer.weights.ncols().max(1) as f64;
            let std = if i + 1 == n { 0.1 / fan_in.sqrt() } else { (2.0 / fan_in).sqrt() };
            for v in layer.weights.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * std;
            }
        }
        Ok(mlp)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_width()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.ncols())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    /// Weights and biases only.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Two FLOPs per multiply-accumulate of the dense layers.
    pub fn flops(&self) -> u64 {
        self.layers.iter().map(|l| 2 * l.weights.len() as u64).sum()
    }

    /// Flat parameters: per layer, row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                out.extend(l.weights.row(r).iter());
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for an MLP with {}", p.len(), self.param_count())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (rows, cols) = l.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weights[(r, c)] = p[off];
                    off += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = p[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Standardizes inputs and outputs from data statistics.
    pub fn fit_normalization(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
        self.check_data(inputs, targets)?;
        let stats = |rows: &[Vec<f64>], width: usize| {
            let n = rows.len().max(1) as f64;
            let mut mean = vec![0.0; width];
            for r in rows {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v / n;
                }
            }
            let mut std = vec![0.0; width];
            for r in rows {
                for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m).powi(2) / n;
                }
            }
            let std: Vec<f64> = std.into_iter().map(|s| if s.sqrt() > 1e-8 { s.sqrt() } else { 1.0 }).collect();
            (mean, std)
        };
        let (im, is) = stats(inputs, self.input_width());
        let (om, os) = stats(targets, self.output_width());
        self.input_shift = im;
        self.input_scale = is.into_iter().map(|s| 1.0 / s).collect();
        self.output_shift = om;
        self.output_scale = os;
        Ok(())
    }

    fn check_data(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::Shape(format!("{} inputs for {} targets", inputs.len(), targets.len())));
        }
        if inputs.iter().any(|x| x.len() != self.input_width()) {
            return Err(Error::Shape(format!("inputs must have width {}", self.input_width())));
        }
        if targets.iter().any(|t| t.len() != self.output_width()) {
            return Err(Error::Shape(format!("targets must have width {}", self.output_width())));
        }
        Ok(())
    }

    fn batch(&self, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let w = self.input_width();
        if inputs.iter().any(|x| x.len() != w) {
            return Err(Error::Shape(format!("input width must be {w}")));
        }
        Ok(DMatrix::from_fn(inputs.len(), w, |i, j| (inputs[i][j] - self.input_shift[j]) * self.input_scale[j]))
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<ForwardCache> {
        let mut x = self.batch(inputs)?;
        let n = self.layers.len();
        let mut cache_in = Vec::with_capacity(n);
        let mut cache_pre = Vec::with_capacity(n);
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &x * l.weights.transpose();
            for mut row in z.row_iter_mut() {
                row += l.bias.transpose();
            }
            let next = if i + 1 < n { z.map(elu) } else { z.clone() };
            cache_in.push(x);
            cache_pre.push(z);
            x = next;
        }
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.output_scale[j] + self.output_shift[j]);
        }
        Ok(ForwardCache { inputs: cache_in, pre: cache_pre, outputs: x })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.forward_batch(std::slice::from_ref(&x.to_vec()))?;
        Ok(c.outputs.row(0).iter().copied().collect())
    }

    /// Flat parameter gradient given `d loss / d output` per sample.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> Vec<f64> {
        let n = self.layers.len();
        let mut dz = d_out.clone();
        for (j, mut col) in dz.column_iter_mut().enumerate() {
            col *= self.output_scale[j];
        }
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let dw = dz.transpose() * &cache.inputs[i];
            let db = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            grads.push((dw, db));
            if i > 0 {
                let dx = &dz * &l.weights;
                dz = dx.zip_map(&cache.pre[i - 1], |g, z| g * elu_grad(z));
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.param_count());
        for (dw, db) in grads {
            for r in 0..dw.nrows() {
                out.extend(dw.row(r).iter());
            }
            out.extend(db.iter());
        }
        out
    }

    /// Mean absolute error over all outputs and its parameter gradient.
    pub fn l1_loss_and_gradient(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        self.check_data(inputs, targets)?;
        let cache = self.forward_batch(inputs)?;
        let norm = (inputs.len() * self.output_width()).max(1) as f64;
        let mut loss = 0.0;
        let d = DMatrix::from_fn(inputs.len(), self.output_width(), |i, j| {
            let r = cache.outputs[(i, j)] - targets[i][j];
            loss += r.abs();
            sign(r) / norm
        });
        Ok((loss / norm, self.backward(&cache, &d)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let mut blobs = Vec::new();
        let mut put = |name: String, shape: Vec<usize>, values: Vec<f64>| -> Result<()> {
            let e = BlobEntry::new(format!("{name}.f64"), Dtype::F64, shape);
            write_blob(dir, &e, &values)?;
            blobs.push((name, e));
            Ok(())
        };
        for (i, l) in self.layers.iter().enumerate() {
            let (r, c) = l.weights.shape();
            let w: Vec<f64> = (0..r).flat_map(|a| (0..c).map(move |b| (a, b))).map(|ab| l.weights[ab]).collect();
            put(format!("layer{i}_weight"), vec![r, c], w)?;
            put(format!("layer{i}_bias"), vec![r], l.bias.iter().copied().collect())?;
        }
        put("input_shift".into(), vec![self.input_width()], self.input_shift.clone())?;
        put("input_scale".into(), vec![self.input_width()], self.input_scale.clone())?;
        put("output_shift".into(), vec![self.output_width()], self.output_shift.clone())?;
        put("output_scale".into(), vec![self.output_width()], self.output_scale.clone())?;
        write_json(
            &dir.join(MLP_MANIFEST),
            &MlpManifest {
                version: 1,
                sizes: self.sizes(),
                activation: "elu".into(),
                blobs: blobs.into_iter().collect(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MLP_MANIFEST);
        let m: MlpManifest = read_json(&path)?;
        if m.version != 1 || m.activation != "elu" {
            return Err(Error::manifest(&path, "unsupported MLP version or activation"));
        }
        let mut mlp = CoefficientMlp::zeros(&m.sizes).map_err(|e| Error::manifest(&path, e.to_string()))?;
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let e = m.blobs.get(name).ok_or_else(|| Error::manifest(&path, format!("missing blob `{name}`")))?;
            let v = read_blob::<f64>(dir, e)?;
            if v.len() != len {
                return Err(Error::manifest(&path, format!("blob `{name}` has {} values, expected {len}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::manifest(&path, format!("blob `{name}` holds non-finite values")));
            }
            Ok(v)
        };
        for (i, l) in mlp.layers.iter_mut().enumerate() {
            let (r, c) = l.weights.shape();
            l.weights = DMatrix::from_row_slice(r, c, &get(&format!("layer{i}_weight"), r * c)?);
            l.bias = DVector::from_vec(get(&format!("layer{i}_bias"), r)?);
        }
        let (iw, ow) = (mlp.input_width(), mlp.output_width());
        mlp.input_shift = get("input_shift", iw)?;
        mlp.input_scale = get("input_scale", iw)?;
        mlp.output_shift = get("output_shift", ow)?;
        mlp.output_scale = get("output_scale", ow)?;
        Ok(mlp)
    }
}

#[derive(Serialize, Deserialize)]
struct MlpManifest {
    version: u32,
    sizes: Vec<usize>,
    activation: String,
    blobs: std::collections::BTreeMap<String, BlobEntry>,
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adam with fixed step size.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Samples per step; 0 means the whole set.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, learning_rate: 1e-3, seed: 0, batch_size: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Full-set L1 loss before each step, then after the last.
    pub trace: Vec<f64>,
    pub best_step: usize,
}

impl TrainOutcome {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn best(&self) -> f64 {
        self.trace[self.best_step]
    }
}

/// L1 regression with Adam; keeps the parameters with the lowest full-set loss.
pub fn train(
    mlp: &mut CoefficientMlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    mlp.check_data(inputs, targets)?;
    let n = inputs.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut params = mlp.params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut cursor = n;
    for step in 0..=cfg.steps {
        let (loss, full_grad) = mlp.l1_loss_and_gradient(inputs, targets)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("MLP training loss became non-finite at step {step}")));
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, step, params.clone());
        }
        if step == cfg.steps {
            break;
        }
        let grad = if batch == n {
            full_grad
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let xs: Vec<Vec<f64>> = idx.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<Vec<f64>> = idx.iter().map(|&i| targets[i].clone()).collect();
            mlp.l1_loss_and_gradient(&xs, &ys)?.1
        };
        adam.step(&mut params, &grad);
        mlp.set_params(&params)?;
    }
    mlp.set_params(&best.2)?;
    Ok(TrainOutcome { trace, best_step: best.1 })
}

/// Splits an MLP output into coefficient sets for each model it serves, in order.
pub fn split_outputs(flat: &[f64], models: &[&StudentModel]) -> Result<Vec<CoefficientSet>> {
    let total: usize = models.iter().map(|m| m.coefficient_count()).sum();
    if flat.len() != total {
        return Err(Error::Shape(format!("predictor emits {} values, models need {total}", flat.len())));
    }
    let mut off = 0;
    models
        .iter()
        .map(|m| {
            let n = m.coefficient_count();
            let set = m.coefficients_from_flat(&flat[off..off + n]);
            off += n;
            set
        })
        .collect()
}

pub fn predict_coefficients(
    mlp: &CoefficientMlp,
    descriptor: &MotionDescriptor,
    model: &StudentModel,
) -> Result<CoefficientSet> {
    let out = mlp.forward(&descriptor.values)?;
    Ok(split_outputs(&out, &[model])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(seed: u64, n: usize, w: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn static_track_gives_identical_rows() {
        let track = PoseTrack::new(vec![vec![0.3, -0.2, 1.0, 0.1, 0.2]; 5]).unwrap();
        let d = build_descriptor(&track, 4, 3).unwrap();
        for i in 0..3 {
            assert_eq!(d.row(i), &[0.0, 0.0, 0.0, 0.1, 0.2]);
        }
    }

    #[test]
    fn start_of_track_is_clamped() {
        let track = PoseTrack::new((0..4).map(|i| vec![0.0, 0.0, 0.0, i as f64]).collect()).unwrap();
        let d = build_descriptor(&track, 0, 3).unwrap();
        assert_eq!(d.values, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let d = build_descriptor(&track, 1, 3).unwrap();
        assert_eq!(d.row(0)[3], 0.0);
        assert_eq!(d.row(1)[3], 0.0);
        assert_eq!(d.row(2)[3], 1.0);
    }

    #[test]
    fn translating_root_is_relative() {
        let v = 0.25;
        let track = PoseTrack::new((0..5).map(|i| vec![v * i as f64, 0.0, 0.0, 0.0]).collect()).unwrap();
        let d = build_descriptor(&track, 3, 2).unwrap();
        assert_eq!(d.row(0)[0], -v);
        assert_eq!(d.row(1)[0], 0.0);
        assert!(build_descriptor(&PoseTrack::new(vec![]).unwrap(), 0, 2).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = CoefficientMlp::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(mlp.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        assert!(mlp.forward(&[1.0]).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut mlp = CoefficientMlp::zeros(&[3, 3]).unwrap();
        mlp.layers[0].weights = DMatrix::identity(3, 3);
        assert_eq!(mlp.forward(&[0.5, -2.0, 7.0]).unwrap(), vec![0.5, -2.0, 7.0]);
    }

    #[test]
    fn forward_matches_per_neuron_loop() {
        let mlp = CoefficientMlp::new(&[5, 7, 3], 3).unwrap();
        let x = random_inputs(4, 1, 5).remove(0);
        let got = mlp.forward(&x).unwrap();
        let mut hidden = [0.0; 7];
        for j in 0..7 {
            let mut s = mlp.layers[0].bias[j];
            for i in 0..5 {
                s += mlp.layers[0].weights[(j, i)] * x[i];
            }
            hidden[j] = if s > 0.0 { s } else { s.exp() - 1.0 };
        }
        for k in 0..3 {
            let mut s = mlp.layers[1].bias[k];
            for j in 0..7 {
                s += mlp.layers[1].weights[(k, j)] * hidden[j];
            }
            assert!((got[k] - s).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn zero_residual_leaves_weights_unchanged() {
        let mut mlp = CoefficientMlp::new(&[4, 6, 2], 5).unwrap();
        let xs = random_inputs(6, 5, 4);
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| mlp.forward(x).unwrap()).collect();
        let before = mlp.clone();
        let out = train(&mut mlp, &xs, &ys, &TrainConfig { steps: 10, ..Default::default() }).unwrap();
        assert_eq!(out.initial(), 0.0);
        assert_eq!(mlp, before);
    }

    #[test]
    fn single_neuron_reaches_constant_target() {
        let mut mlp = CoefficientMlp::zeros(&[1, 1]).unwrap();
        let xs = vec![vec![0.0]; 4];
        let ys = vec![vec![0.75]; 4];
        let cfg = TrainConfig { steps: 5000, learning_rate: 1e-2, ..Default::default() };
        let out = train(&mut mlp, &xs, &ys, &cfg).unwrap();
        assert!((mlp.forward(&[0.0]).unwrap()[0] - 0.75).abs() < 1e-3);
        assert!(out.best() <= out.initial());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut mlp = CoefficientMlp::new(&[4, 6, 5, 3], 7).unwrap();
        let xs = random_inputs(8, 6, 4);
        let ys = random_inputs(9, 6, 3);
        mlp.fit_normalization(&xs, &ys).unwrap();
        let (_, grad) = mlp.l1_loss_and_gradient(&xs, &ys).unwrap();
        let p0 = mlp.params();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..8 {
            let i = rng.random_range(0..p0.len());
            let eps = 1e-6;
            let mut p = p0.clone();
            p[i] += eps;
            mlp.set_params(&p).unwrap();
            let lp = mlp.l1_loss_and_gradient(&xs, &ys).unwrap().0;
            p[i] -= 2.0 * eps;
            mlp.set_params(&p).unwrap();
            let lm = mlp.l1_loss_and_gradient(&xs, &ys).unwrap().0;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-3), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn training_is_deterministic_and_never_worse() {
        let xs = random_inputs(11, 10, 3);
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * x[1], x[2].sin()]).collect();
        let run = || {
            let mut mlp = CoefficientMlp::new(&[3, 16, 2], 12).unwrap();
            mlp.fit_normalization(&xs, &ys).unwrap();
            let cfg = TrainConfig { steps: 200, batch_size: 4, seed: 3, ..Default::default() };
            let out = train(&mut mlp, &xs, &ys, &cfg).unwrap();
            (mlp, out)
        };
        let (a, oa) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(oa.best() <= oa.initial());
        let final_loss = a.l1_loss_and_gradient(&xs, &ys).unwrap().0;
        assert_eq!(final_loss, oa.best());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut mlp = CoefficientMlp::new(&[3, 5, 2], 13).unwrap();
        mlp.fit_normalization(&random_inputs(1, 4, 3), &random_inputs(2, 4, 2)).unwrap();
        mlp.save(dir.path()).unwrap();
        assert_eq!(CoefficientMlp::load(dir.path()).unwrap(), mlp);
    }

    #[test]
    fn pose_track_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = PoseTrack::new(vec![vec![0.5, 0.25], vec![1.0, -2.0]]).unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(PoseTrack::load(dir.path()).unwrap(), t);
    }

    #[test]
    fn global_root_offset_leaves_descriptor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let poses: Vec<Vec<f64>> = (0..6).map(|_| (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let shifted: Vec<Vec<f64>> = poses
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q[0] += 3.0;
                q[1] -= 1.0;
                q[2] += 0.5;
                q
            })
            .collect();
        let a = PoseTrack::new(poses).unwrap();
        let b = PoseTrack::new(shifted).unwrap();
        for f in 0..6 {
            let da = build_descriptor(&a, f, 3).unwrap();
            let db = build_descriptor(&b, f, 3).unwrap();
            for (x, y) in da.values.iter().zip(&db.values) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
