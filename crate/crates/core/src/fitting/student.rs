//! Closed-form initialization of a whole student model.

use super::{fit_factorized, fit_ll, solve_level_coefficients, solve_ll_coefficients, Ranks, SubbandDataset};
use crate::blendshape::{CoefficientSet, StudentModel};
use crate::error::{Error, Result};
use crate::wavelet::WaveletPyramid;

#[derive(Debug, Clone)]
pub struct StudentFit {
    pub model: StudentModel,
    /// Fitted coefficients per training frame.
    pub coefficients: Vec<CoefficientSet>,
    /// Squared residual of the LL fit, then of each dynamic level, coarsest first.
    pub residuals_sq: Vec<f64>,
    /// Centred energies matching `residuals_sq`.
    pub energies: Vec<f64>,
    /// Energy of the static levels around their means, which the model cannot express.
    pub static_residual_sq: f64,
    /// ALS objective traces per dynamic level and channel.
    pub traces: Vec<Vec<Vec<f64>>>,
}

/// Fits LL blendshapes and factorized banks for the `ranks.levels.len()` coarsest levels.
pub fn fit_student(dataset: &SubbandDataset, ranks: &Ranks, sweeps: usize, seed: u64) -> Result<StudentFit> {
    let dynamic = ranks.levels.len();
    if dynamic > dataset.levels() {
        return Err(Error::Config(format!(
            "{dynamic} dynamic levels requested from a {}-level dataset",
            dataset.levels()
        )));
    }
    let ll = fit_ll(dataset, ranks.ll)?;
    let mut residuals_sq = vec![ll.residual_sq];
    let mut energies = vec![ll.centered_energy];
    let mut banks = Vec::with_capacity(dynamic);
    let mut level_alphas = Vec::with_capacity(dynamic);
    let mut traces = Vec::with_capacity(dynamic);
    for (&level, &rank) in dataset.dynamic_level_indices(dynamic).iter().zip(&ranks.levels) {
        let fit = fit_factorized(dataset, level, rank, sweeps, seed)?;
        residuals_sq.push(fit.residual_sq);
        energies.push(fit.centered_energy);
        banks.push(fit.bank);
        level_alphas.push(fit.alphas);
        traces.push(fit.traces);
    }
    let static_residual_sq = (0..dataset.levels() - dynamic)
        .map(|l| {
            let mean = &dataset.detail_means[l];
            dataset
                .pyramids
                .iter()
                .map(|p| {
                    p.details[l]
                        .bands()
                        .iter()
                        .zip(mean.bands())
                        .map(|(b, m)| b.sub(m).map(|d| d.energy()))
                        .sum::<Result<f64>>()
                })
                .sum::<Result<f64>>()
        })
        .sum::<Result<f64>>()?;
    let model = StudentModel::new(
        dataset.layout.clone(),
        dataset.filter.clone(),
        dataset.resolution,
        ll.bank,
        banks,
        dataset.static_means(dynamic),
    )?;
    let coefficients = (0..dataset.frames())
        .map(|f| CoefficientSet {
            ll: ll.alphas[f].clone(),
            levels: level_alphas.iter().map(|a| a[f].clone()).collect(),
        })
        .collect();
    Ok(StudentFit { model, coefficients, residuals_sq, energies, static_residual_sq, traces })
}

/// Least-squares coefficients of one pyramid against the model's fixed bases.
pub fn solve_coefficients(model: &StudentModel, pyramid: &WaveletPyramid) -> Result<CoefficientSet> {
    let levels = pyramid.details.len();
    if levels != model.levels() {
        return Err(Error::Shape(format!("pyramid has {levels} levels, model {}", model.levels())));
    }
    let ll = solve_ll_coefficients(&model.ll, &pyramid.ll)?;
    let levels = model
        .banks
        .iter()
        .map(|b| solve_level_coefficients(b, &pyramid.details[b.level]))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefficientSet { ll, levels })
}
