//! Subband reconstruction loss and joint gradient refinement of banks and predictors.

use nalgebra::DMatrix;

use super::{FitConfig, SubbandDataset};
use crate::blendshape::{StudentModel, SubbandPrediction};
use crate::error::{Error, Result};
use crate::predictor::{sign, Adam, CoefficientMlp};
use crate::tensor::Texture;
use crate::wavelet::DetailTriple;

/// Weights of the LL term and of each dynamic level, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub ll: f64,
    pub levels: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ll: 5.0, levels: vec![1.0, 1.0] }
    }
}

/// Ground-truth subbands for one frame, matching a [`SubbandPrediction`].
#[derive(Debug, Clone, Copy)]
pub struct FrameTarget<'a> {
    pub ll: &'a Texture,
    pub levels: &'a [DetailTriple],
}

fn check_target(pred: &SubbandPrediction, gt: &FrameTarget<'_>, w: &LossWeights) -> Result<()> {
    pred.ll.expect_shape(gt.ll, "LL prediction")?;
    if pred.levels.len() != gt.levels.len() || w.levels.len() < pred.levels.len() {
        return Err(Error::Shape(format!(
            "{} predicted levels, {} targets, {} weights",
            pred.levels.len(),
            gt.levels.len(),
            w.levels.len()
        )));
    }
    for (p, g) in pred.levels.iter().zip(gt.levels) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("level {:?} vs target {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// `λ_LL · mean|LL − LL_gt| + Σ_l λ_l · mean|D_l − D_l_gt|`, each mean over its own elements.
pub fn loss_rec(pred: &SubbandPrediction, gt: &FrameTarget<'_>, w: &LossWeights) -> Result<f64> {
    check_target(pred, gt, w)?;
    let mut total = w.ll * mean_abs(pred.ll.data(), gt.ll.data());
    for ((p, g), lambda) in pred.levels.iter().zip(gt.levels).zip(&w.levels) {
        let n = 3 * p.lh.len();
        let s: f64 = p.bands().iter().zip(g.bands()).map(|(a, b)| mean_abs(a.data(), b.data()) * a.len() as f64).sum();
        total += lambda * s / n.max(1) as f64;
    }
    Ok(total)
}

/// Gradient of [`loss_rec`] with respect to every predicted value, laid out like the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandGradient {
    pub ll: Vec<f64>,
    pub levels: Vec<[Vec<f64>; 3]>,
}

pub fn loss_rec_gradient(
    pred: &SubbandPrediction,
    gt: &FrameTarget<'_>,
    w: &LossWeights,
) -> Result<(f64, SubbandGradient)> {
    check_target(pred, gt, w)?;
    let loss = loss_rec(pred, gt, w)?;
    let scale = w.ll / pred.ll.len().max(1) as f64;
    let ll = pred.ll.data().iter().zip(gt.ll.data()).map(|(a, b)| scale * sign(*a as f64 - *b as f64)).collect();
    let levels = pred
        .levels
        .iter()
        .zip(gt.levels)
        .zip(&w.levels)
        .map(|((p, g), lambda)| {
            let scale = lambda / (3 * p.lh.len()).max(1) as f64;
            let pb = p.bands();
            let gb = g.bands();
            [0, 1, 2].map(|s| {
                pb[s].data().iter().zip(gb[s].data()).map(|(a, b)| scale * sign(*a as f64 - *b as f64)).collect()
            })
        })
        .collect();
    Ok((loss, SubbandGradient { ll, levels }))
}

/// Offsets of one bank's tensors inside a model's flat parameter vector.
#[derive(Debug, Clone)]
struct BankLayout {
    h: usize,
    w: usize,
    rank: usize,
    /// `(mean, h, w)` start offsets per subband.
    parts: [(usize, usize, usize); 3],
}

#[derive(Debug, Clone)]
struct ModelLayout {
    c: usize,
    ll_len: usize,
    ll_rank: usize,
    banks: Vec<BankLayout>,
    len: usize,
}

impl ModelLayout {
    fn of(model: &StudentModel) -> Self {
        let c = model.channels();
        let ll_len = model.ll.mean.len();
        let ll_rank = model.ll.rank();
        let mut off = ll_len * (1 + ll_rank);
        let banks = model
            .banks
            .iter()
            .map(|b| {
                let (h, w, _) = b.shape();
                let r = b.rank;
                let parts = [0, 1, 2].map(|_| {
                    let mean = off;
                    let hh = mean + h * w * c;
                    let ww = hh + h * r * c;
                    off = ww + w * r * c;
                    (mean, hh, ww)
                });
                BankLayout { h, w, rank: r, parts }
            })
            .collect();
        ModelLayout { c, ll_len, ll_rank, banks, len: off }
    }

    fn coeff_len(&self) -> usize {
        self.c * (self.ll_rank + self.banks.iter().map(|b| b.rank).sum::<usize>())
    }
}

fn model_params(model: &StudentModel) -> Vec<f64> {
    let mut p: Vec<f64> = Vec::new();
    let ext = |p: &mut Vec<f64>, t: &Texture| p.extend(t.data().iter().map(|&v| v as f64));
    ext(&mut p, &model.ll.mean);
    for b in &model.ll.bases {
        ext(&mut p, b);
    }
    for bank in &model.banks {
        for s in &bank.subbands {
            ext(&mut p, &s.mean);
            ext(&mut p, &s.h);
            ext(&mut p, &s.w);
        }
    }
    p
}

fn write_model_params(model: &mut StudentModel, p: &[f64]) {
    let mut off = 0;
    let mut put = |t: &mut Texture| {
        let n = t.len();
        for (d, s) in t.data_mut().iter_mut().zip(&p[off..off + n]) {
            *d = *s as f32;
        }
        off += n;
    };
    put(&mut model.ll.mean);
    for b in &mut model.ll.bases {
        put(b);
    }
    for bank in &mut model.banks {
        for s in &mut bank.subbands {
            put(&mut s.mean);
            put(&mut s.h);
            put(&mut s.w);
        }
    }
}

/// Evaluates predictions for one frame from flat parameters, in f64.
fn forward(layout: &ModelLayout, p: &[f64], alpha: &[f64]) -> (Vec<f64>, Vec<[Vec<f64>; 3]>) {
    let c = layout.c;
    let n = layout.ll_len;
    let mut ll = p[..n].to_vec();
    for r in 0..layout.ll_rank {
        let basis = &p[n * (1 + r)..n * (2 + r)];
        let a = &alpha[r * c..(r + 1) * c];
        for (i, v) in ll.iter_mut().enumerate() {
            *v += a[i % c] * basis[i];
        }
    }
    let mut off = layout.ll_rank * c;
    let levels = layout
        .banks
        .iter()
        .map(|b| {
            let a = &alpha[off..off + b.rank * c];
            off += b.rank * c;
            b.parts.map(|(m, hh, ww)| {
                let mut out = p[m..m + b.h * b.w * c].to_vec();
                let hf = &p[hh..hh + b.h * b.rank * c];
                let wf = &p[ww..ww + b.w * b.rank * c];
                for y in 0..b.h {
                    for x in 0..b.w {
                        let o = &mut out[(y * b.w + x) * c..(y * b.w + x + 1) * c];
                        for r in 0..b.rank {
                            for ch in 0..c {
                                o[ch] += a[r * c + ch] * hf[(y * b.rank + r) * c + ch] * wf[(x * b.rank + r) * c + ch];
                            }
                        }
                    }
                }
                out
            })
        })
        .collect();
    (ll, levels)
}

/// Accumulates parameter and coefficient gradients for one frame.
fn backward(layout: &ModelLayout, p: &[f64], alpha: &[f64], g: &SubbandGradient, dp: &mut [f64], dalpha: &mut [f64]) {
    let c = layout.c;
    let n = layout.ll_len;
    for (d, gv) in dp[..n].iter_mut().zip(&g.ll) {
        *d += gv;
    }
    for r in 0..layout.ll_rank {
        let base = n * (1 + r);
        for i in 0..n {
            let ch = i % c;
            dp[base + i] += alpha[r * c + ch] * g.ll[i];
            dalpha[r * c + ch] += p[base + i] * g.ll[i];
        }
    }
    let mut off = layout.ll_rank * c;
    for (b, gl) in layout.banks.iter().zip(&g.levels) {
        let r = b.rank;
        for (s, &(m, hh, ww)) in b.parts.iter().enumerate() {
            let gs = &gl[s];
            for (d, gv) in dp[m..m + b.h * b.w * c].iter_mut().zip(gs) {
                *d += gv;
            }
            // gw(y, k, ch) = Σ_x G(y, x, ch) w(x, k, ch); gh(x, k, ch) = Σ_y G(y, x, ch) h(y, k, ch)
            let mut gw = vec![0.0; b.h * r * c];
            let mut gh = vec![0.0; b.w * r * c];
            for y in 0..b.h {
                for x in 0..b.w {
                    for k in 0..r {
                        for ch in 0..c {
                            let gv = gs[(y * b.w + x) * c + ch];
                            gw[(y * r + k) * c + ch] += gv * p[ww + (x * r + k) * c + ch];
                            gh[(x * r + k) * c + ch] += gv * p[hh + (y * r + k) * c + ch];
                        }
                    }
                }
            }
            for k in 0..r {
                for ch in 0..c {
                    let a = alpha[off + k * c + ch];
                    for y in 0..b.h {
                        let i = (y * r + k) * c + ch;
                        dp[hh + i] += a * gw[i];
                        dalpha[off + k * c + ch] += p[hh + i] * gw[i];
                    }
                    for x in 0..b.w {
                        let i = (x * r + k) * c + ch;
                        dp[ww + i] += a * gh[i];
                    }
                }
            }
        }
        off += r * c;
    }
}

fn prediction_from(ll: Vec<f64>, levels: Vec<[Vec<f64>; 3]>, model: &StudentModel) -> SubbandPrediction {
    let to_tex = |v: Vec<f64>, like: &Texture| {
        Texture::new(like.height(), like.width(), like.channels(), v.into_iter().map(|x| x as f32).collect())
            .expect("shape preserved")
    };
    SubbandPrediction {
        ll: to_tex(ll, &model.ll.mean),
        levels: levels
            .into_iter()
            .zip(&model.banks)
            .map(|([a, b, c], bank)| DetailTriple {
                lh: to_tex(a, &bank.subbands[0].mean),
                hl: to_tex(b, &bank.subbands[1].mean),
                hh: to_tex(c, &bank.subbands[2].mean),
            })
            .collect(),
    }
}

/// f64 L1 gradient of the loss evaluated directly on f64 predictions.
fn loss_and_grad_f64(
    ll: &[f64],
    levels: &[[Vec<f64>; 3]],
    gt: &FrameTarget<'_>,
    w: &LossWeights,
) -> (f64, SubbandGradient) {
    let n = ll.len().max(1) as f64;
    let mut loss = 0.0;
    let gll = ll
        .iter()
        .zip(gt.ll.data())
        .map(|(a, b)| {
            let r = a - *b as f64;
            loss += w.ll * r.abs() / n;
            w.ll * sign(r) / n
        })
        .collect();
    let glevels = levels
        .iter()
        .zip(gt.levels)
        .zip(&w.levels)
        .map(|((p, g), lambda)| {
            let n = (3 * p[0].len()).max(1) as f64;
            let gb = g.bands();
            [0, 1, 2].map(|s| {
                p[s].iter()
                    .zip(gb[s].data())
                    .map(|(a, b)| {
                        let r = a - *b as f64;
                        loss += lambda * r.abs() / n;
                        lambda * sign(r) / n
                    })
                    .collect()
            })
        })
        .collect();
    (loss, SubbandGradient { ll: gll, levels: glevels })
}

/// The refinement objective over a flat vector of all bank and predictor parameters.
///
/// Parameters are ordered model by model, then predictor by predictor. One predictor
/// may serve all models (outputs concatenated in model order) or each model may have its own.
pub struct RefineProblem<'a> {
    models: Vec<&'a StudentModel>,
    layouts: Vec<ModelLayout>,
    datasets: Vec<&'a SubbandDataset>,
    mlps: Vec<CoefficientMlp>,
    descriptors: &'a [Vec<f64>],
    weights: LossWeights,
    targets: Vec<Vec<Vec<DetailTriple>>>,
}

impl<'a> RefineProblem<'a> {
    pub fn new(
        models: &'a [StudentModel],
        datasets: &[&'a SubbandDataset],
        mlps: &[CoefficientMlp],
        descriptors: &'a [Vec<f64>],
        weights: LossWeights,
    ) -> Result<Self> {
        if models.len() != datasets.len() || models.is_empty() {
            return Err(Error::Config("one dataset per model is required".into()));
        }
        let layouts: Vec<ModelLayout> = models.iter().map(ModelLayout::of).collect();
        let shared = mlps.len() == 1 && models.len() > 1;
        if !shared && mlps.len() != models.len() {
            return Err(Error::Config(format!("{} predictors for {} models", mlps.len(), models.len())));
        }
        let frames = datasets[0].frames();
        for (i, (m, d)) in models.iter().zip(datasets).enumerate() {
            if d.frames() != frames || descriptors.len() != frames {
                return Err(Error::Shape("datasets and descriptors differ in frame count".into()));
            }
            if d.channels() != m.channels() || d.levels() != m.levels() {
                return Err(Error::Shape(format!("dataset {i} does not match its model")));
            }
            if weights.levels.len() < m.banks.len() {
                return Err(Error::Config("missing loss weights for dynamic levels".into()));
            }
        }
        if shared {
            let need: usize = layouts.iter().map(|l| l.coeff_len()).sum();
            if mlps[0].output_width() != need {
                return Err(Error::Shape(format!(
                    "shared predictor emits {}, models need {need}",
                    mlps[0].output_width()
                )));
            }
        } else {
            for (mlp, l) in mlps.iter().zip(&layouts) {
                if mlp.output_width() != l.coeff_len() {
                    return Err(Error::Shape(format!(
                        "predictor emits {}, model needs {}",
                        mlp.output_width(),
                        l.coeff_len()
                    )));
                }
            }
        }
        let targets = models
            .iter()
            .zip(datasets)
            .map(|(m, d)| {
                d.pyramids.iter().map(|p| m.banks.iter().map(|b| p.details[b.level].clone()).collect()).collect()
            })
            .collect();
        Ok(RefineProblem {
            models: models.iter().collect(),
            layouts,
            datasets: datasets.to_vec(),
            mlps: mlps.to_vec(),
            descriptors,
            weights,
            targets,
        })
    }

    fn model_len(&self) -> usize {
        self.layouts.iter().map(|l| l.len).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.models.iter().flat_map(|m| model_params(m)).collect();
        for mlp in &self.mlps {
            p.extend(mlp.params());
        }
        p
    }

    /// Mean over frames of the summed per-model loss, and its gradient.
    pub fn loss_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let frames = self.descriptors.len();
        let mut grad = vec![0.0; params.len()];
        let model_len = self.model_len();
        let mut mlps = self.mlps.clone();
        let mut off = model_len;
        for mlp in &mut mlps {
            let n = mlp.param_count();
            mlp.set_params(&params[off..off + n])?;
            off += n;
        }
        if off != params.len() {
            return Err(Error::Shape("parameter vector has the wrong length".into()));
        }
        let caches = mlps.iter().map(|m| m.forward_batch(self.descriptors)).collect::<Result<Vec<_>>>()?;
        let mut d_out: Vec<DMatrix<f64>> = mlps.iter().map(|m| DMatrix::zeros(frames, m.output_width())).collect();
        let shared = mlps.len() == 1 && self.models.len() > 1;
        let mut loss = 0.0;
        let mut p_off = 0;
        let mut col_off = 0;
        for (mi, layout) in self.layouts.iter().enumerate() {
            let p = &params[p_off..p_off + layout.len];
            let (k, cols) = if shared { (0, col_off) } else { (mi, 0) };
            let mut dp = vec![0.0; layout.len];
            for f in 0..frames {
                let alpha: Vec<f64> = (0..layout.coeff_len()).map(|j| caches[k].outputs[(f, cols + j)]).collect();
                let (ll, levels) = forward(layout, p, &alpha);
                let target = FrameTarget { ll: &self.datasets[mi].pyramids[f].ll, levels: &self.targets[mi][f] };
                let (l, mut g) = loss_and_grad_f64(&ll, &levels, &target, &self.weights);
                loss += l / frames as f64;
                g.ll.iter_mut().for_each(|v| *v /= frames as f64);
                g.levels.iter_mut().flatten().flatten().for_each(|v| *v /= frames as f64);
                let mut dalpha = vec![0.0; alpha.len()];
                backward(layout, p, &alpha, &g, &mut dp, &mut dalpha);
                for (j, v) in dalpha.into_iter().enumerate() {
                    d_out[k][(f, cols + j)] += v;
                }
            }
            grad[p_off..p_off + layout.len].copy_from_slice(&dp);
            p_off += layout.len;
            col_off += layout.coeff_len();
        }
        let mut off = model_len;
        for ((mlp, cache), d) in mlps.iter().zip(&caches).zip(&d_out) {
            let g = mlp.backward(cache, d);
            grad[off..off + g.len()].copy_from_slice(&g);
            off += g.len();
        }
        Ok((loss, grad))
    }

    /// Predictions of model `mi` for frame `f` under the given parameters, as textures.
    pub fn predict(&self, params: &[f64], mi: usize, f: usize) -> Result<SubbandPrediction> {
        let mut off = self.model_len();
        let mut mlps = self.mlps.clone();
        for mlp in &mut mlps {
            let n = mlp.param_count();
            mlp.set_params(&params[off..off + n])?;
            off += n;
        }
        let shared = mlps.len() == 1 && self.models.len() > 1;
        let cols: usize = if shared { self.layouts[..mi].iter().map(|l| l.coeff_len()).sum() } else { 0 };
        let out = mlps[if shared { 0 } else { mi }].forward(&self.descriptors[f])?;
        let layout = &self.layouts[mi];
        let alpha = &out[cols..cols + layout.coeff_len()];
        let p_off: usize = self.layouts[..mi].iter().map(|l| l.len).sum();
        let (ll, levels) = forward(layout, &params[p_off..p_off + layout.len], alpha);
        Ok(prediction_from(ll, levels, self.models[mi]))
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Loss before each step, then after the last.
    pub trace: Vec<f64>,
    pub best_step: usize,
    pub initial: f64,
    /// Loss of the stored (single-precision) result.
    pub final_loss: f64,
}

/// Adam on `L_rec` over bank means, bases and predictor weights; frozen detail means stay fixed.
///
/// Keeps the best parameters seen, so the final loss never exceeds the initial one.
pub fn refine_joint(
    models: &mut [StudentModel],
    datasets: &[&SubbandDataset],
    mlps: &mut [CoefficientMlp],
    descriptors: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<RefineOutcome> {
    let weights = cfg.weights();
    let (initial, trace, best_step, best) = {
        let problem = RefineProblem::new(models, datasets, mlps, descriptors, weights.clone())?;
        let mut params = problem.params();
        let mut adam = Adam::new(params.len(), cfg.learning_rate);
        let mut trace = Vec::with_capacity(cfg.refine_steps + 1);
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for step in 0..=cfg.refine_steps {
            let (loss, grad) = problem.loss_and_gradient(&params)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("refinement loss became non-finite at step {step}")));
            }
            let initial = trace.first().copied().unwrap_or(loss);
            if loss > 10.0 * initial {
                return Err(Error::Divergence { step, loss, initial });
            }
            trace.push(loss);
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, step, params.clone()));
            }
            if step == cfg.refine_steps {
                break;
            }
            adam.step(&mut params, &grad);
        }
        let (_, best_step, best_params) = best.expect("at least one evaluation");
        (trace[0], trace, best_step, best_params)
    };
    if best_step == 0 {
        return Ok(RefineOutcome { final_loss: initial, initial, trace, best_step });
    }
    let saved_models = models.to_vec();
    let saved_mlps = mlps.to_vec();
    let mut off = 0;
    for m in models.iter_mut() {
        let n = ModelLayout::of(m).len;
        write_model_params(m, &best[off..off + n]);
        off += n;
    }
    for mlp in mlps.iter_mut() {
        let n = mlp.param_count();
        mlp.set_params(&best[off..off + n])?;
        off += n;
    }
    let check = RefineProblem::new(models, datasets, mlps, descriptors, weights)?;
    let final_loss = check.loss_and_gradient(&check.params())?.0;
    if final_loss > initial {
        models.clone_from_slice(&saved_models);
        mlps.clone_from_slice(&saved_mlps);
        return Ok(RefineOutcome { final_loss: initial, initial, trace, best_step: 0 });
    }
    Ok(RefineOutcome { trace, best_step, initial, final_loss })
}
