//! End-to-end fit, evaluation and benchmark runs over a dataset directory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{
    baseline_config, compare_methods, count_cost, pca_only_cost, single_level_cost, CompareConfig, Comparison,
    CostReport, GroupCost, ModelConfig,
};
use crate::blendshape::{CoefficientSet, StudentModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fitting::{
    build_subband_dataset, fit_student, loss_rec, refine_joint, FitConfig, FrameTarget, Ranks, SubbandDataset, ALL,
    APPEARANCE, GEOMETRY,
};
use crate::geometry::{assemble_gaussians, build_pca, build_texel_map, dq_skin, write_gaussians, PcaSubspace};
use crate::predictor::{descriptors, split_outputs, train, CoefficientMlp, TrainConfig};
use crate::tensor::{
    ensure_dir, merge_channels, read_json, write_json, ChannelLayout, Texture, TextureSequence, APPEARANCE_GROUPS,
    GEOMETRY_GROUPS,
};
use crate::wavelet::{dwt_multilevel, WaveletFilter, WaveletPyramid};

pub const BUNDLE_MANIFEST: &str = "bundle.json";
pub const FIT_REPORT: &str = "fit_report.json";
pub const FIT_TRACES: &str = "fit_traces.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const COST_CSV: &str = "cost.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const PRESET_COSTS_CSV: &str = "preset_costs.csv";
const BUNDLE_VERSION: u32 = 1;

/// Named channel-group sets modelled separately: geometry and appearance when the
/// layout carries them, otherwise one model over every channel.
pub fn group_sets(layout: &ChannelLayout) -> Vec<(String, Vec<String>)> {
    if layout.contains_all(&GEOMETRY_GROUPS) && layout.contains_all(&APPEARANCE_GROUPS) {
        vec![
            (GEOMETRY.into(), GEOMETRY_GROUPS.iter().map(|s| s.to_string()).collect()),
            (APPEARANCE.into(), APPEARANCE_GROUPS.iter().map(|s| s.to_string()).collect()),
        ]
    } else {
        vec![(ALL.into(), layout.group_names().iter().map(|s| s.to_string()).collect())]
    }
}

fn select(seq: &TextureSequence, groups: &[String]) -> Result<TextureSequence> {
    let names: Vec<&str> = groups.iter().map(String::as_str).collect();
    seq.select_groups(&names)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    config: FitConfig,
    layout: ChannelLayout,
    sets: Vec<(String, Vec<String>)>,
    mlps: usize,
    pca: bool,
}

/// A fitted avatar: one student model per group set, coefficient predictors and
/// the optional template subspace with its predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config: FitConfig,
    /// Layout of the dataset the bundle was fitted on.
    pub layout: ChannelLayout,
    pub sets: Vec<(String, Vec<String>)>,
    pub models: Vec<StudentModel>,
    /// One predictor per model, or a single shared one.
    pub mlps: Vec<CoefficientMlp>,
    pub template: Option<(PcaSubspace, CoefficientMlp)>,
}

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        for ((name, _), m) in self.sets.iter().zip(&self.models) {
            m.save(&dir.join(format!("model_{name}")))?;
        }
        for (i, mlp) in self.mlps.iter().enumerate() {
            mlp.save(&dir.join(format!("mlp_{i}")))?;
        }
        if let Some((pca, mlp)) = &self.template {
            pca.save(&dir.join("pca"))?;
            mlp.save(&dir.join("mlp_temp"))?;
        }
        write_json(
            &dir.join(BUNDLE_MANIFEST),
            &BundleManifest {
                version: BUNDLE_VERSION,
                config: self.config.clone(),
                layout: self.layout.clone(),
                sets: self.sets.clone(),
                mlps: self.mlps.len(),
                pca: self.template.is_some(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Bundle> {
        let path = dir.join(BUNDLE_MANIFEST);
        if !path.is_file() {
            return Err(Error::Config(format!("{} is not a model bundle", dir.display())));
        }
        let m: BundleManifest = read_json(&path)?;
        if m.version != BUNDLE_VERSION {
            return Err(Error::manifest(&path, format!("unsupported bundle version {}", m.version)));
        }
        let models = m
            .sets
            .iter()
            .map(|(name, _)| StudentModel::load(&dir.join(format!("model_{name}"))))
            .collect::<Result<Vec<_>>>()?;
        let mlps =
            (0..m.mlps).map(|i| CoefficientMlp::load(&dir.join(format!("mlp_{i}")))).collect::<Result<Vec<_>>>()?;
        let template = if m.pca {
            Some((PcaSubspace::load(&dir.join("pca"))?, CoefficientMlp::load(&dir.join("mlp_temp"))?))
        } else {
            None
        };
        let bundle = Bundle { config: m.config, layout: m.layout, sets: m.sets, models, mlps, template };
        bundle.validate().map_err(|e| Error::manifest(&path, e.to_string()))?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets.len() != self.models.len() || self.models.is_empty() {
            return Err(Error::Shape(format!("{} group sets for {} models", self.sets.len(), self.models.len())));
        }
        let need: Vec<usize> = self.models.iter().map(|m| m.coefficient_count()).collect();
        match self.mlps.len() {
            1 if self.models.len() > 1 => {
                if self.mlps[0].output_width() != need.iter().sum::<usize>() {
                    return Err(Error::Shape("shared predictor width does not match the models".into()));
                }
            }
            n if n == self.models.len() => {
                if self.mlps.iter().zip(&need).any(|(p, &n)| p.output_width() != n) {
                    return Err(Error::Shape("predictor width does not match its model".into()));
                }
            }
            n => return Err(Error::Shape(format!("{n} predictors for {} models", self.models.len()))),
        }
        Ok(())
    }

    /// Layout covered by the models, in dataset order.
    pub fn model_layout(&self) -> Result<ChannelLayout> {
        let names: Vec<&str> = self.sets.iter().flat_map(|(_, g)| g.iter().map(String::as_str)).collect();
        self.layout.select(&names)
    }

    /// Predicted coefficients of every model for one motion descriptor.
    pub fn predict(&self, descriptor: &[f64]) -> Result<Vec<CoefficientSet>> {
        let models: Vec<&StudentModel> = self.models.iter().collect();
        if self.mlps.len() == 1 {
            return split_outputs(&self.mlps[0].forward(descriptor)?, &models);
        }
        self.mlps
            .iter()
            .zip(&models)
            .map(|(mlp, m)| Ok(split_outputs(&mlp.forward(descriptor)?, &[*m])?.remove(0)))
            .collect()
    }

    /// Full-resolution texture in [`Bundle::model_layout`] order.
    pub fn reconstruct(&self, coeffs: &[CoefficientSet]) -> Result<Texture> {
        let parts = self
            .models
            .iter()
            .zip(coeffs)
            .map(|(m, c)| Ok((crate::blendshape::reconstruct(m, c)?, m.layout.clone())))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(&Texture, &ChannelLayout)> = parts.iter().map(|(t, l)| (t, l)).collect();
        merge_channels(&self.model_layout()?, &refs)
    }

    /// Canonical template vertices predicted for one descriptor.
    pub fn predict_vertices(&self, descriptor: &[f64]) -> Result<Option<Vec<[f64; 3]>>> {
        let Some((pca, mlp)) = &self.template else {
            return Ok(None);
        };
        let flat = pca.decode_flat(&mlp.forward(descriptor)?)?;
        Ok(Some(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }

    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.param_count().total()).sum()
    }

    pub fn predictor_param_count(&self) -> usize {
        self.mlps.iter().map(|m| m.param_count()).sum::<usize>()
            + self.template.as_ref().map_or(0, |(_, m)| m.param_count())
    }

    /// Cost model matching this bundle's shapes.
    pub fn cost_config(&self) -> Result<ModelConfig> {
        let (h, w) = self.models[0].resolution;
        if h != w {
            return Err(Error::Shape(format!("cost accounting needs square textures, got {h}x{w}")));
        }
        let mut cfg = baseline_config(h, 0, Ranks::new(0, Vec::new()), self.config.levels);
        cfg.dynamic_levels = self.config.dynamic_levels;
        cfg.groups = self
            .sets
            .iter()
            .zip(&self.models)
            .map(|((name, _), m)| {
                let (ll, levels) = m.ranks();
                GroupCost { name: name.clone(), channels: m.channels(), ranks: Ranks::new(ll, levels) }
            })
            .collect();
        cfg.descriptor_width = self.mlps[0].input_width();
        cfg.mlp_hidden = self.config.mlp_hidden.clone();
        cfg.shared_mlp = self.mlps.len() == 1 && self.models.len() > 1;
        cfg.pca_components = self.template.as_ref().map_or(0, |(p, _)| p.components());
        cfg.sh_eval = self.layout.contains_all(&APPEARANCE_GROUPS);
        Ok(cfg)
    }
}

/// Per-frame reconstruction errors. L2 values are root mean squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameErrors {
    pub texture_l1: f64,
    pub texture_l2: f64,
    pub subband_l1: f64,
    pub subband_l2: f64,
}

#[derive(Default)]
struct ErrorSums {
    abs: f64,
    sq: f64,
    count: usize,
}

impl ErrorSums {
    fn add(&mut self, a: &Texture, b: &Texture) -> Result<()> {
        a.expect_shape(b, "reconstruction")?;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let d = x as f64 - y as f64;
            self.abs += d.abs();
            self.sq += d * d;
        }
        self.count += a.len();
        Ok(())
    }

    fn l1(&self) -> f64 {
        self.abs / self.count.max(1) as f64
    }

    fn l2(&self) -> f64 {
        (self.sq / self.count.max(1) as f64).sqrt()
    }
}

/// Errors of one frame's coefficients against per-model teacher textures and pyramids.
fn frame_errors(
    bundle: &Bundle,
    coeffs: &[CoefficientSet],
    textures: &[&Texture],
    pyramids: &[&WaveletPyramid],
) -> Result<FrameErrors> {
    let mut tex = ErrorSums::default();
    let mut sub = ErrorSums::default();
    for (((m, c), t), p) in bundle.models.iter().zip(coeffs).zip(textures).zip(pyramids) {
        tex.add(&crate::blendshape::reconstruct(m, c)?, t)?;
        let pred = m.predict_pyramid(c)?;
        sub.add(&pred.ll, &p.ll)?;
        for (a, b) in pred.details.iter().zip(&p.details) {
            for (x, y) in a.bands().into_iter().zip(b.bands()) {
                sub.add(x, y)?;
            }
        }
    }
    Ok(FrameErrors { texture_l1: tex.l1(), texture_l2: tex.l2(), subband_l1: sub.l1(), subband_l2: sub.l2() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResidual {
    pub set: String,
    pub stage: String,
    pub residual_sq: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub frames: usize,
    /// Closed-form fit residuals per group set: LL, each dynamic level, then static levels.
    pub residuals: Vec<StageResidual>,
    /// Mean `L_rec` with fitted, predicted and refined coefficients.
    pub loss_fitted: f64,
    pub loss_predicted: f64,
    pub loss_refined: f64,
    /// Mean per-frame subband L1 of the final bundle on the training frames.
    pub subband_l1: f64,
    pub texture_l1: f64,
    pub pca_components: usize,
    pub pca_residual_sq: Option<f64>,
    pub params: usize,
    pub predictor_params: usize,
    pub flops: u64,
    pub mlp_traces: Vec<Vec<f64>>,
    pub refine_trace: Vec<f64>,
}

impl FitReport {
    /// `trace,step,value` rows of every loss trace.
    pub fn traces_csv(&self) -> String {
        let mut s = String::from("trace,step,value\n");
        for (i, t) in self.mlp_traces.iter().enumerate() {
            for (step, v) in t.iter().enumerate() {
                let _ = writeln!(s, "mlp_{i},{step},{v:.9e}");
            }
        }
        for (step, v) in self.refine_trace.iter().enumerate() {
            let _ = writeln!(s, "refine,{step},{v:.9e}");
        }
        s
    }
}

pub struct FitOutput {
    pub bundle: Bundle,
    pub report: FitReport,
}

fn mean_loss(
    models: &[StudentModel],
    datasets: &[SubbandDataset],
    coeffs: &[Vec<CoefficientSet>],
    cfg: &FitConfig,
) -> Result<f64> {
    let weights = cfg.weights();
    let frames = datasets[0].frames();
    let mut total = 0.0;
    for f in 0..frames {
        for ((m, d), c) in models.iter().zip(datasets).zip(coeffs) {
            let pred = m.predict_subbands(&c[f])?;
            let levels: Vec<_> = m.banks.iter().map(|b| d.pyramids[f].details[b.level].clone()).collect();
            let target = FrameTarget { ll: &d.pyramids[f].ll, levels: &levels };
            total += loss_rec(&pred, &target, &weights)?;
        }
    }
    Ok(total / frames.max(1) as f64)
}

fn predicted_coefficients(bundle: &Bundle, inputs: &[Vec<f64>]) -> Result<Vec<Vec<CoefficientSet>>> {
    let mut per_model = vec![Vec::with_capacity(inputs.len()); bundle.models.len()];
    for x in inputs {
        for (slot, c) in per_model.iter_mut().zip(bundle.predict(x)?) {
            slot.push(c);
        }
    }
    Ok(per_model)
}

/// Closed-form initialization, predictor training and optional joint refinement.
pub fn fit_dataset(dataset: &Dataset, cfg: &FitConfig) -> Result<FitOutput> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Config(format!("fitting needs at least 2 frames, got {}", dataset.len())));
    }
    let layout = dataset.sequence.layout().clone();
    let sets = group_sets(&layout);
    let filter = WaveletFilter::bior22();

    let mut datasets = Vec::with_capacity(sets.len());
    let mut models = Vec::with_capacity(sets.len());
    let mut fitted = Vec::with_capacity(sets.len());
    let mut residuals = Vec::new();
    for (name, groups) in &sets {
        let seq = select(&dataset.sequence, groups)?;
        let ds = build_subband_dataset(&seq, &filter, cfg.levels)?;
        let ranks = cfg.ranks_for(name)?;
        let fit = fit_student(&ds, ranks, cfg.als_sweeps, cfg.seed)?;
        let mut stage = |stage: String, residual_sq: f64, energy: f64| {
            residuals.push(StageResidual { set: name.clone(), stage, residual_sq, energy })
        };
        stage("ll".into(), fit.residuals_sq[0], fit.energies[0]);
        for (b, (r, e)) in fit.model.banks.iter().zip(fit.residuals_sq[1..].iter().zip(&fit.energies[1..])) {
            stage(format!("level_{}", b.level), *r, *e);
        }
        stage("static".into(), fit.static_residual_sq, fit.static_residual_sq);
        log::info!("{name}: {} model parameters", fit.model.param_count().total());
        datasets.push(ds);
        models.push(fit.model);
        fitted.push(fit.coefficients);
    }
    let loss_fitted = mean_loss(&models, &datasets, &fitted, cfg)?;

    let inputs = descriptors(&dataset.poses, cfg.window_k)?;
    let train_cfg = |salt: u64| TrainConfig {
        steps: cfg.mlp_steps,
        learning_rate: cfg.mlp_learning_rate,
        seed: cfg.seed ^ salt,
        batch_size: 0,
    };
    let sizes = |out: usize| {
        let mut s = vec![inputs[0].len()];
        s.extend(&cfg.mlp_hidden);
        s.push(out);
        s
    };
    let target_sets: Vec<Vec<Vec<f64>>> = if cfg.shared_mlp {
        vec![(0..dataset.len()).map(|f| fitted.iter().flat_map(|c| c[f].to_flat()).collect()).collect()]
    } else {
        fitted.iter().map(|c| c.iter().map(CoefficientSet::to_flat).collect()).collect()
    };
    let mut mlps = Vec::with_capacity(target_sets.len());
    let mut mlp_traces = Vec::new();
    for (i, targets) in target_sets.iter().enumerate() {
        let mut mlp = CoefficientMlp::new(&sizes(targets[0].len()), cfg.seed ^ (i as u64 + 1))?;
        mlp.fit_normalization(&inputs, targets)?;
        let out = train(&mut mlp, &inputs, targets, &train_cfg(i as u64 + 1))?;
        log::info!("predictor {i}: L1 {:.4e} -> {:.4e}", out.initial(), out.best());
        mlp_traces.push(out.trace);
        mlps.push(mlp);
    }

    let mut pca_residual_sq = None;
    let template = match (&dataset.canonical, &dataset.mesh) {
        (Some(canonical), Some(_)) if cfg.pca_components > 0 => {
            let k = cfg.pca_components.min(dataset.len());
            if k < cfg.pca_components {
                log::warn!("using {k} template components, the dataset has only {} frames", dataset.len());
            }
            let pca = build_pca(canonical, k)?;
            pca_residual_sq = Some(pca.residual_sq);
            let mut mlp = CoefficientMlp::new(&sizes(k), cfg.seed ^ 0x7E4D)?;
            mlp.fit_normalization(&inputs, &pca.coeffs)?;
            let out = train(&mut mlp, &inputs, &pca.coeffs, &train_cfg(0x7E4D))?;
            mlp_traces.push(out.trace);
            Some((pca.subspace, mlp))
        }
        _ => None,
    };

    let mut bundle = Bundle { config: cfg.clone(), layout, sets, models, mlps, template };
    let predicted = predicted_coefficients(&bundle, &inputs)?;
    let loss_predicted = mean_loss(&bundle.models, &datasets, &predicted, cfg)?;

    let mut refine_trace = Vec::new();
    let mut loss_refined = loss_predicted;
    if cfg.refine_steps > 0 {
        let refs: Vec<&SubbandDataset> = datasets.iter().collect();
        let out = refine_joint(&mut bundle.models, &refs, &mut bundle.mlps, &inputs, cfg)?;
        for m in &mut bundle.models {
            m.refresh_static_offset()?;
        }
        loss_refined = mean_loss(&bundle.models, &datasets, &predicted_coefficients(&bundle, &inputs)?, cfg)?;
        log::info!("refinement: {:.4e} -> {:.4e}", out.initial, out.final_loss);
        refine_trace = out.trace;
    }

    let teacher: Vec<TextureSequence> =
        bundle.sets.iter().map(|(_, g)| select(&dataset.sequence, g)).collect::<Result<_>>()?;
    let final_coeffs = predicted_coefficients(&bundle, &inputs)?;
    let mut sub = 0.0;
    let mut tex = 0.0;
    for f in 0..dataset.len() {
        let coeffs: Vec<CoefficientSet> = final_coeffs.iter().map(|c| c[f].clone()).collect();
        let textures: Vec<&Texture> = teacher.iter().map(|s| s.frame(f)).collect();
        let pyramids: Vec<&WaveletPyramid> = datasets.iter().map(|d| &d.pyramids[f]).collect();
        let e = frame_errors(&bundle, &coeffs, &textures, &pyramids)?;
        sub += e.subband_l1;
        tex += e.texture_l1;
    }
    let n = dataset.len() as f64;
    let flops = match bundle.cost_config() {
        Ok(c) => count_cost(&c)?.total_flops(),
        Err(_) => 0,
    };
    let report = FitReport {
        frames: dataset.len(),
        residuals,
        loss_fitted,
        loss_predicted,
        loss_refined,
        subband_l1: sub / n,
        texture_l1: tex / n,
        pca_components: bundle.template.as_ref().map_or(0, |(p, _)| p.components()),
        pca_residual_sq,
        params: bundle.param_count(),
        predictor_params: bundle.predictor_param_count(),
        flops,
        mlp_traces,
        refine_trace,
    };
    Ok(FitOutput { bundle, report })
}

/// Fits and writes the bundle, report and traces to `out`.
pub fn run_fit(dataset: &Dataset, cfg: &FitConfig, out: &Path) -> Result<FitReport> {
    let FitOutput { bundle, report } = fit_dataset(dataset, cfg)?;
    bundle.save(out)?;
    write_json(&out.join(FIT_REPORT), &report)?;
    write_text(&out.join(FIT_TRACES), &report.traces_csv())?;
    if let Ok(c) = bundle.cost_config() {
        write_text(&out.join(COST_CSV), &count_cost(&c)?.to_csv())?;
    }
    Ok(report)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub frames: Vec<FrameErrors>,
    pub gaussian_files: Vec<String>,
}

impl EvalOutput {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,texture_l1,texture_l2,subband_l1,subband_l2\n");
        for (f, e) in self.frames.iter().enumerate() {
            let _ =
                writeln!(s, "{f},{:.9e},{:.9e},{:.9e},{:.9e}", e.texture_l1, e.texture_l2, e.subband_l1, e.subband_l2);
        }
        s
    }

    pub fn mean(&self) -> FrameErrors {
        let n = self.frames.len().max(1) as f64;
        let sum = |g: fn(&FrameErrors) -> f64| self.frames.iter().map(g).sum::<f64>() / n;
        FrameErrors {
            texture_l1: sum(|e| e.texture_l1),
            texture_l2: sum(|e| e.texture_l2),
            subband_l1: sum(|e| e.subband_l1),
            subband_l2: sum(|e| e.subband_l2),
        }
    }
}

/// Runtime-path evaluation: predicted coefficients for every frame of `dataset`.
///
/// With `gaussians_dir`, also writes world-space Gaussians per frame.
pub fn evaluate(bundle: &Bundle, dataset: &Dataset, gaussians_dir: Option<&Path>) -> Result<EvalOutput> {
    bundle.validate()?;
    if dataset.sequence.layout() != &bundle.layout {
        return Err(Error::Shape("dataset channel layout differs from the model's".into()));
    }
    let (h, w, _) = dataset.sequence.shape();
    if (h, w) != bundle.models[0].resolution {
        return Err(Error::Shape(format!("dataset is {h}x{w}, model {:?}", bundle.models[0].resolution)));
    }
    let window = bundle.mlps[0].input_width() / dataset.poses.dofs.max(1);
    if window * dataset.poses.dofs != bundle.mlps[0].input_width() {
        return Err(Error::Shape("pose dofs do not match the predictor input".into()));
    }
    let inputs = descriptors(&dataset.poses, window)?;
    let teacher: Vec<TextureSequence> =
        bundle.sets.iter().map(|(_, g)| select(&dataset.sequence, g)).collect::<Result<_>>()?;
    let export = match gaussians_dir {
        Some(dir) => {
            let mesh = dataset
                .mesh
                .as_ref()
                .ok_or_else(|| Error::Config("Gaussian export needs a template mesh in the dataset".into()))?;
            ensure_dir(dir)?;
            Some((dir, mesh, build_texel_map(mesh, h, w)))
        }
        None => None,
    };
    let mut frames = Vec::with_capacity(dataset.len());
    let mut gaussian_files = Vec::new();
    for (f, x) in inputs.iter().enumerate() {
        let coeffs = bundle.predict(x)?;
        let pyramids: Vec<WaveletPyramid> = teacher
            .iter()
            .zip(&bundle.models)
            .map(|(s, m)| dwt_multilevel(s.frame(f), m.levels(), &m.filter))
            .collect::<Result<_>>()?;
        let textures: Vec<&Texture> = teacher.iter().map(|s| s.frame(f)).collect();
        let prefs: Vec<&WaveletPyramid> = pyramids.iter().collect();
        frames.push(frame_errors(bundle, &coeffs, &textures, &prefs)?);
        if let Some((dir, mesh, map)) = &export {
            let canonical = match bundle.predict_vertices(x)? {
                Some(v) => v,
                None => mesh.vertices.clone(),
            };
            let transforms = mesh.skeleton.skinning_transforms(&dataset.poses.poses[f])?;
            let posed = dq_skin(&canonical, &mesh.skin, &transforms)?;
            let texture = bundle.reconstruct(&coeffs)?;
            let cloud = assemble_gaussians(&texture, &bundle.model_layout()?, &posed, mesh, map)?;
            let name = format!("gaussians_{f:05}.bin");
            write_gaussians(&dir.join(&name), &cloud)?;
            gaussian_files.push(name);
        }
    }
    Ok(EvalOutput { frames, gaussian_files })
}

pub fn run_eval(bundle_dir: &Path, dataset: &Dataset, out: &Path, export_gaussians: bool) -> Result<EvalOutput> {
    let bundle = Bundle::load(bundle_dir)?;
    ensure_dir(out)?;
    let gdir = out.join("gaussians");
    let result = evaluate(&bundle, dataset, export_gaussians.then_some(gdir.as_path()))?;
    write_text(&out.join(EVAL_CSV), &result.to_csv())?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub preset: ModelConfig,
    /// Single-level ranks per preset group.
    pub single_level_ranks: Vec<usize>,
    pub compare: CompareConfig,
    /// Every `holdout_stride`-th frame is held out.
    pub holdout_stride: usize,
}

impl BenchConfig {
    pub fn paper() -> Self {
        BenchConfig {
            preset: ModelConfig::paper(),
            single_level_ranks: vec![384, 256],
            compare: CompareConfig::default(),
            holdout_stride: 4,
        }
    }

    pub fn toy() -> Self {
        let mut cfg = Self::paper();
        cfg.preset = ModelConfig::toy();
        cfg.single_level_ranks = vec![12, 8];
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub cost: CostReport,
    /// `(method, params, flops)` at the preset scale.
    pub preset_costs: Vec<(String, u64, u64)>,
    pub comparison: Comparison,
}

impl BenchOutput {
    pub fn preset_csv(&self) -> String {
        let mut s = String::from("method,params,flops\n");
        for (m, p, f) in &self.preset_costs {
            let _ = writeln!(s, "{m},{p},{f}");
        }
        s
    }
}

/// Cost accounting at the preset scale plus a held-out comparison on `dataset`.
pub fn bench(dataset: &TextureSequence, cfg: &BenchConfig) -> Result<BenchOutput> {
    let cost = count_cost(&cfg.preset)?;
    let pca = pca_only_cost(&cfg.preset, 128)?;
    let single = single_level_cost(&cfg.preset, &cfg.single_level_ranks)?;
    let preset_costs = vec![
        ("ours".to_string(), cost.total_params(), cost.total_flops()),
        ("single_level".to_string(), single.total_params(), single.total_flops()),
        ("pca_only".to_string(), pca.total_params(), pca.total_flops()),
    ];
    if cfg.holdout_stride < 2 {
        return Err(Error::Config("hold-out stride must be at least 2".into()));
    }
    let held: Vec<usize> = (0..dataset.len()).filter(|f| f % cfg.holdout_stride == cfg.holdout_stride - 1).collect();
    let train: Vec<usize> = (0..dataset.len()).filter(|f| f % cfg.holdout_stride != cfg.holdout_stride - 1).collect();
    if held.is_empty() || train.len() < 2 {
        return Err(Error::Config(format!(
            "{} frames are too few for a hold-out stride of {}",
            dataset.len(),
            cfg.holdout_stride
        )));
    }
    let comparison = compare_methods(&dataset.subset(&train)?, &dataset.subset(&held)?, &cfg.compare)?;
    Ok(BenchOutput { cost, preset_costs, comparison })
}

pub fn run_bench(dataset: &Dataset, cfg: &BenchConfig, out: &Path) -> Result<BenchOutput> {
    let result = bench(&dataset.sequence, cfg)?;
    ensure_dir(out)?;
    write_text(&out.join(COST_CSV), &result.cost.to_csv())?;
    write_text(&out.join(PRESET_COSTS_CSV), &result.preset_csv())?;
    write_text(&out.join(BENCH_CSV), &result.comparison.to_csv())?;
    Ok(result)
}
