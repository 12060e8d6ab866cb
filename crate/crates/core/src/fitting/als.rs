//! Alternating least squares for factorized blendshapes with one coefficient
//! vector shared across several subbands.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{centered_planes, SubbandDataset};
use crate::blendshape::{CoeffMatrix, FactorizedBank, FactorizedSubband};
use crate::error::{Error, Result};
use crate::linalg::{solve_gram_right, truncated_svd};
use crate::tensor::Texture;
use crate::wavelet::DetailTriple;

/// Relative slack allowed when checking that a block update did not increase the objective.
const MONOTONE_SLACK: f64 = 1e-9;
/// Sweeps stop once a full sweep improves the objective by less than this fraction of the energy.
const CONVERGED: f64 = 1e-13;

/// Factors of one channel: `alpha` is `frames × rank`, `hs[s]` is `H × rank`, `ws[s]` is `W × rank`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AlsState {
    pub rank: usize,
    pub alpha: Vec<f64>,
    pub hs: Vec<Vec<f64>>,
    pub ws: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct AlsOutput {
    pub state: AlsState,
    /// Objective after initialization and after every block update.
    pub trace: Vec<f64>,
    pub energy: f64,
}

impl AlsOutput {
    pub fn objective(&self) -> f64 {
        *self.trace.last().unwrap_or(&self.energy)
    }
}

/// `Y · M` for `Y` of `h × w` and `M` of `w × r`.
fn times(y: &[f64], h: usize, w: usize, m: &[f64], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * r];
    for i in 0..h {
        let row = &y[i * w..(i + 1) * w];
        let o = &mut out[i * r..(i + 1) * r];
        for (x, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (a, b) in o.iter_mut().zip(&m[x * r..(x + 1) * r]) {
                *a += v * b;
            }
        }
    }
    out
}

/// `Yᵀ · M` for `Y` of `h × w` and `M` of `h × r`.
fn times_t(y: &[f64], h: usize, w: usize, m: &[f64], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * r];
    for i in 0..h {
        let row = &y[i * w..(i + 1) * w];
        let mi = &m[i * r..(i + 1) * r];
        for (x, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (a, b) in out[x * r..(x + 1) * r].iter_mut().zip(mi) {
                *a += v * b;
            }
        }
    }
    out
}

/// `Mᵀ M` for `M` of `n × r`.
fn col_gram(m: &[f64], n: usize, r: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(r, r);
    for i in 0..n {
        let row = &m[i * r..(i + 1) * r];
        for a in 0..r {
            for b in a..r {
                g[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `Σ_s (H_sᵀH_s) ∘ (W_sᵀW_s)`: the normal matrix for the shared coefficients.
fn alpha_gram(state: &AlsState, h: usize, w: usize) -> DMatrix<f64> {
    let r = state.rank;
    let mut g = DMatrix::zeros(r, r);
    for (hs, ws) in state.hs.iter().zip(&state.ws) {
        g += col_gram(hs, h, r).component_mul(&col_gram(ws, w, r));
    }
    g
}

/// `b_f(r) = Σ_s Σ_i F_s[i, r] · P_fs[i, r]` where `P` is a precomputed product.
fn alpha_rhs(factors: &[Vec<f64>], products: &[Vec<Vec<f64>>], frames: usize, r: usize) -> Vec<f64> {
    let mut b = vec![0.0; frames * r];
    for (fac, prods) in factors.iter().zip(products) {
        for (f, p) in prods.iter().enumerate() {
            let bf = &mut b[f * r..(f + 1) * r];
            for (frow, prow) in fac.chunks_exact(r).zip(p.chunks_exact(r)) {
                for k in 0..r {
                    bf[k] += frow[k] * prow[k];
                }
            }
        }
    }
    b
}

fn objective(energy: f64, alpha: &[f64], b: &[f64], g: &DMatrix<f64>, r: usize) -> f64 {
    let mut total = energy;
    for (a, bf) in alpha.chunks_exact(r).zip(b.chunks_exact(r)) {
        let mut quad = 0.0;
        for i in 0..r {
            let mut gi = 0.0;
            for j in 0..r {
                gi += g[(i, j)] * a[j];
            }
            quad += a[i] * gi;
        }
        let lin: f64 = a.iter().zip(bf).map(|(x, y)| x * y).sum();
        total += quad - 2.0 * lin;
    }
    total.max(0.0)
}

/// Solves one factor block: `F · ((other_ᵀ other) ∘ A) = Σ_f alpha_f ∘ P_f`.
fn update_factor(
    other: &[f64],
    other_len: usize,
    alpha_gram: &DMatrix<f64>,
    alpha: &[f64],
    products: &[Vec<f64>],
    len: usize,
    r: usize,
) -> Result<Vec<f64>> {
    let g = col_gram(other, other_len, r).component_mul(alpha_gram);
    let mut m = vec![0.0; len * r];
    for (a, p) in alpha.chunks_exact(r).zip(products) {
        for (mrow, prow) in m.chunks_exact_mut(r).zip(p.chunks_exact(r)) {
            for k in 0..r {
                mrow[k] += a[k] * prow[k];
            }
        }
    }
    solve_gram_right(&g, &m, len)
}

/// Best rank-1 split `u σ vᵀ` of an `h × w` image by power iteration.
fn rank_one(img: &[f64], h: usize, w: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let best_col = (0..w).max_by(|&a, &b| {
        let na: f64 = (0..h).map(|i| img[i * w + a].powi(2)).sum();
        let nb: f64 = (0..h).map(|i| img[i * w + b].powi(2)).sum();
        na.partial_cmp(&nb).unwrap_or(std::cmp::Ordering::Equal)
    })?;
    let mut v = vec![0.0; w];
    v[best_col] = 1.0;
    let mut u = vec![0.0; h];
    for _ in 0..60 {
        u = times(img, h, w, &v, 1);
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 {
            return None;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        v = times_t(img, h, w, &u, 1);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= nv);
    }
    let sigma: f64 = times(img, h, w, &v, 1).iter().zip(&u).map(|(a, b)| a * b).sum();
    let s = sigma.abs().sqrt();
    let sign = sigma.signum();
    Some((u.iter().map(|x| x * s * sign).collect(), v.iter().map(|x| x * s).collect()))
}

fn initial_state(data: &[Vec<Vec<f64>>], h: usize, w: usize, rank: usize, rng: &mut ChaCha8Rng) -> AlsState {
    let subbands = data.len();
    let frames = data[0].len();
    let hw = h * w;
    let svd = if subbands == 1 {
        truncated_svd(&data[0], rank)
    } else {
        let rows: Vec<Vec<f64>> =
            (0..frames).map(|f| data.iter().flat_map(|s| s[f].iter().copied()).collect()).collect();
        truncated_svd(&rows, rank)
    };
    let mut hs = vec![vec![0.0; h * rank]; subbands];
    let mut ws = vec![vec![0.0; w * rank]; subbands];
    for r in 0..rank {
        for s in 0..subbands {
            let img = &svd.basis[r][s * hw..(s + 1) * hw];
            let (u, v) = match rank_one(img, h, w) {
                Some(uv) => uv,
                None => {
                    let scale = 1.0 / ((h + w) as f64).sqrt();
                    let mut g = || {
                        let z: f64 = StandardNormal.sample(rng);
                        z * scale
                    };
                    ((0..h).map(|_| g()).collect(), (0..w).map(|_| g()).collect())
                }
            };
            for i in 0..h {
                hs[s][i * rank + r] = u[i];
            }
            for j in 0..w {
                ws[s][j * rank + r] = v[j];
            }
        }
    }
    AlsState { rank, alpha: vec![0.0; frames * rank], hs, ws }
}

/// Rescales each `h ⊗ w` pair to equal norms; the model is unchanged.
fn balance(state: &mut AlsState, h: usize, w: usize) {
    let r = state.rank;
    for (hs, ws) in state.hs.iter_mut().zip(state.ws.iter_mut()) {
        for k in 0..r {
            let nh = (0..h).map(|i| hs[i * r + k].powi(2)).sum::<f64>().sqrt();
            let nw = (0..w).map(|j| ws[j * r + k].powi(2)).sum::<f64>().sqrt();
            if nh == 0.0 || nw == 0.0 {
                continue;
            }
            let t = (nw / nh).sqrt();
            for i in 0..h {
                hs[i * r + k] *= t;
            }
            for j in 0..w {
                ws[j * r + k] /= t;
            }
        }
    }
}

fn check_monotone(trace: &[f64], energy: f64) -> Result<()> {
    if let [.., prev, cur] = trace {
        if *cur > prev + 1e-6 * energy.max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical(format!("ALS objective rose from {prev:.6e} to {cur:.6e}")));
        }
        if *cur > prev + MONOTONE_SLACK * energy {
            log::debug!("ALS objective rose by {:.3e}", cur - prev);
        }
    }
    Ok(())
}

/// Coupled ALS over `data[s][f]`, each an `h × w` row-major centred matrix.
pub(crate) fn als_fit(
    data: &[Vec<Vec<f64>>],
    h: usize,
    w: usize,
    rank: usize,
    sweeps: usize,
    seed: u64,
) -> Result<AlsOutput> {
    let frames = data.first().map_or(0, |s| s.len());
    let energy: f64 = data.iter().flatten().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum();
    if rank == 0 || frames == 0 {
        return Ok(AlsOutput {
            state: AlsState {
                rank: 0,
                alpha: Vec::new(),
                hs: vec![Vec::new(); data.len()],
                ws: vec![Vec::new(); data.len()],
            },
            trace: vec![energy],
            energy,
        });
    }
    let r = rank;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = initial_state(data, h, w, rank, &mut rng);
    let mut trace = Vec::with_capacity(4 * sweeps + 1);

    let products_t = |st: &AlsState| -> Vec<Vec<Vec<f64>>> {
        data.iter().zip(&st.ws).map(|(sb, ws)| sb.iter().map(|y| times(y, h, w, ws, r)).collect()).collect()
    };
    let products_u = |st: &AlsState| -> Vec<Vec<Vec<f64>>> {
        data.iter().zip(&st.hs).map(|(sb, hs)| sb.iter().map(|y| times_t(y, h, w, hs, r)).collect()).collect()
    };

    let mut t = products_t(&st);
    let mut g = alpha_gram(&st, h, w);
    let mut b = alpha_rhs(&st.hs, &t, frames, r);
    st.alpha = solve_gram_right(&g, &b, frames)?;
    trace.push(objective(energy, &st.alpha, &b, &g, r));

    for sweep in 0..sweeps {
        let start = *trace.last().unwrap();
        // h blocks
        let agram = col_gram(&st.alpha, frames, r);
        for s in 0..data.len() {
            st.hs[s] = update_factor(&st.ws[s], w, &agram, &st.alpha, &t[s], h, r)?;
        }
        g = alpha_gram(&st, h, w);
        b = alpha_rhs(&st.hs, &t, frames, r);
        trace.push(objective(energy, &st.alpha, &b, &g, r));
        check_monotone(&trace, energy)?;
        st.alpha = solve_gram_right(&g, &b, frames)?;
        trace.push(objective(energy, &st.alpha, &b, &g, r));
        check_monotone(&trace, energy)?;

        // w blocks
        let u = products_u(&st);
        let agram = col_gram(&st.alpha, frames, r);
        for s in 0..data.len() {
            st.ws[s] = update_factor(&st.hs[s], h, &agram, &st.alpha, &u[s], w, r)?;
        }
        g = alpha_gram(&st, h, w);
        b = alpha_rhs(&st.ws, &u, frames, r);
        trace.push(objective(energy, &st.alpha, &b, &g, r));
        check_monotone(&trace, energy)?;
        st.alpha = solve_gram_right(&g, &b, frames)?;
        trace.push(objective(energy, &st.alpha, &b, &g, r));
        check_monotone(&trace, energy)?;

        balance(&mut st, h, w);
        let end = *trace.last().unwrap();
        if start - end <= CONVERGED * energy {
            log::debug!("ALS converged after {} sweeps", sweep + 1);
            break;
        }
        t = products_t(&st);
    }
    Ok(AlsOutput { state: st, trace, energy })
}

/// Least-squares shared coefficients for one frame given fixed factors.
pub(crate) fn solve_alpha(frame: &[Vec<f64>], st: &AlsState, h: usize, w: usize) -> Result<Vec<f64>> {
    let r = st.rank;
    if r == 0 {
        return Ok(Vec::new());
    }
    let g = alpha_gram(st, h, w);
    let t: Vec<Vec<Vec<f64>>> = frame.iter().zip(&st.ws).map(|(y, ws)| vec![times(y, h, w, ws, r)]).collect();
    let b = alpha_rhs(&st.hs, &t, 1, r);
    if g.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; r]);
    }
    solve_gram_right(&g, &b, 1)
}

#[derive(Debug, Clone)]
pub struct FactorizedFit {
    pub bank: FactorizedBank,
    pub alphas: Vec<CoeffMatrix>,
    /// Objective trace per channel.
    pub traces: Vec<Vec<f64>>,
    pub residual_sq: f64,
    pub centered_energy: f64,
}

/// Fits mean-centred factorized blendshapes for detail level `level` (0 = finest).
pub fn fit_factorized(
    dataset: &SubbandDataset,
    level: usize,
    rank: usize,
    sweeps: usize,
    seed: u64,
) -> Result<FactorizedFit> {
    let means = dataset
        .detail_means
        .get(level)
        .ok_or_else(|| Error::Config(format!("level {level} not in a {}-level dataset", dataset.levels())))?;
    let (h, w, c) = means.shape();
    if rank > 3 * h.min(w) {
        return Err(Error::Config(format!("rank {rank} exceeds 3·min({h}, {w}) at level {level}")));
    }
    // centred[s][f][ch]
    let centred: Vec<Vec<Vec<Vec<f64>>>> = (0..3)
        .map(|s| {
            dataset.pyramids.iter().map(|p| centered_planes(p.details[level].bands()[s], means.bands()[s])).collect()
        })
        .collect();
    let outs = (0..c)
        .into_par_iter()
        .map(|ch| {
            let data: Vec<Vec<Vec<f64>>> =
                centred.iter().map(|sb| sb.iter().map(|f| f[ch].clone()).collect()).collect();
            let ch_seed = seed ^ ((level as u64) << 40) ^ (ch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            als_fit(&data, h, w, rank, sweeps, ch_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let states: Vec<&AlsState> = outs.iter().map(|o| &o.state).collect();
    let bank = bank_from_states(level, rank, means, &states)?;
    let alphas = (0..dataset.frames())
        .map(|f| {
            let mut m = CoeffMatrix::zeros(rank, c);
            for (ch, st) in states.iter().enumerate() {
                for k in 0..rank {
                    m.set(k, ch, st.alpha[f * rank + k]);
                }
            }
            m
        })
        .collect();
    Ok(FactorizedFit {
        bank,
        alphas,
        residual_sq: outs.iter().map(|o| o.objective()).sum(),
        centered_energy: outs.iter().map(|o| o.energy).sum(),
        traces: outs.into_iter().map(|o| o.trace).collect(),
    })
}

pub(crate) fn factor_texture(states: &[&AlsState], s: usize, len: usize, rank: usize, pick_h: bool) -> Result<Texture> {
    let c = states.len();
    let mut data = vec![0.0f32; len * rank * c];
    for (ch, st) in states.iter().enumerate() {
        let f = if pick_h { &st.hs[s] } else { &st.ws[s] };
        for i in 0..len {
            for k in 0..rank {
                data[(i * rank + k) * c + ch] = f[i * rank + k] as f32;
            }
        }
    }
    Texture::new(len, rank, c, data)
}

fn bank_from_states(level: usize, rank: usize, means: &DetailTriple, states: &[&AlsState]) -> Result<FactorizedBank> {
    let (h, w, _) = means.shape();
    let mut subbands = Vec::with_capacity(3);
    for (s, mean) in means.bands().into_iter().enumerate() {
        subbands.push(FactorizedSubband {
            mean: mean.clone(),
            h: factor_texture(states, s, h, rank, true)?,
            w: factor_texture(states, s, w, rank, false)?,
        });
    }
    Ok(FactorizedBank { level, rank, subbands: subbands.try_into().expect("three subbands") })
}

/// Per-channel factors of a stored bank, in f64.
pub(crate) fn states_from_bank(bank: &FactorizedBank) -> Vec<AlsState> {
    states_from_subbands(&bank.subbands)
}

/// Per-channel factors of subbands sharing one coefficient vector, in f64.
pub(crate) fn states_from_subbands(subbands: &[FactorizedSubband]) -> Vec<AlsState> {
    let (h, w, c) = subbands[0].mean.shape();
    let r = subbands[0].rank();
    (0..c)
        .map(|ch| {
            let pick = |t: &Texture, len: usize| -> Vec<f64> {
                let mut v = vec![0.0; len * r];
                for i in 0..len {
                    for k in 0..r {
                        v[i * r + k] = t.at(i, k, ch) as f64;
                    }
                }
                v
            };
            AlsState {
                rank: r,
                alpha: Vec::new(),
                hs: subbands.iter().map(|s| pick(&s.h, h)).collect(),
                ws: subbands.iter().map(|s| pick(&s.w, w)).collect(),
            }
        })
        .collect()
}

/// Least-squares level coefficients of one detail triple against a fixed bank.
pub fn solve_level_coefficients(bank: &FactorizedBank, detail: &DetailTriple) -> Result<CoeffMatrix> {
    let (h, w, c) = bank.shape();
    if detail.shape() != (h, w, c) {
        return Err(Error::Shape(format!("detail {:?} does not match bank {:?}", detail.shape(), bank.shape())));
    }
    let centred: Vec<Vec<Vec<f64>>> =
        (0..3).map(|s| centered_planes(detail.bands()[s], &bank.subbands[s].mean)).collect();
    let mut out = CoeffMatrix::zeros(bank.rank, c);
    for (ch, st) in states_from_bank(bank).iter().enumerate() {
        let frame: Vec<Vec<f64>> = centred.iter().map(|s| s[ch].clone()).collect();
        let a = solve_alpha(&frame, st, h, w)?;
        for k in 0..bank.rank {
            out.set(k, ch, a[k]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blendshape::eval_factorized;
    use rand::Rng;

    fn planted(seed: u64, frames: usize, h: usize, w: usize, rank: usize, subbands: usize) -> Vec<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.random_range(-1.0..1.0f64);
        let hs: Vec<Vec<f64>> = (0..subbands).map(|_| (0..h * rank).map(|_| g()).collect()).collect();
        let ws: Vec<Vec<f64>> = (0..subbands).map(|_| (0..w * rank).map(|_| g()).collect()).collect();
        let alpha: Vec<f64> = (0..frames * rank).map(|_| g()).collect();
        (0..subbands)
            .map(|s| {
                (0..frames)
                    .map(|f| {
                        let mut m = vec![0.0; h * w];
                        for i in 0..h {
                            for j in 0..w {
                                for k in 0..rank {
                                    m[i * w + j] += alpha[f * rank + k] * hs[s][i * rank + k] * ws[s][j * rank + k];
                                }
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect()
    }

    fn direct_objective(data: &[Vec<Vec<f64>>], st: &AlsState, h: usize, w: usize) -> f64 {
        let r = st.rank;
        let mut total = 0.0;
        for (s, sb) in data.iter().enumerate() {
            for (f, y) in sb.iter().enumerate() {
                for i in 0..h {
                    for j in 0..w {
                        let mut m = 0.0;
                        for k in 0..r {
                            m += st.alpha[f * r + k] * st.hs[s][i * r + k] * st.ws[s][j * r + k];
                        }
                        total += (y[i * w + j] - m).powi(2);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn planted_rank_two_is_recovered() {
        let data = planted(1, 12, 6, 6, 2, 3);
        let out = als_fit(&data, 6, 6, 2, 20, 0).unwrap();
        assert!(out.objective() <= 1e-6, "objective {}", out.objective());
        for pair in out.trace.windows(2) {
            assert!(pair[1] <= pair[0] + MONOTONE_SLACK * out.energy);
        }
    }

    #[test]
    fn gram_objective_matches_direct_residual() {
        let mut data = planted(2, 8, 5, 7, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in data.iter_mut().flatten() {
            for v in m.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let out = als_fit(&data, 5, 7, 2, 5, 0).unwrap();
        let direct = direct_objective(&data, &out.state, 5, 7);
        assert!((out.objective() - direct).abs() <= 1e-9 * out.energy);
        for pair in out.trace.windows(2) {
            assert!(pair[1] <= pair[0] + MONOTONE_SLACK * out.energy);
        }
    }

    #[test]
    fn rank_zero_keeps_centered_energy() {
        let data = planted(4, 3, 4, 4, 1, 3);
        let out = als_fit(&data, 4, 4, 0, 5, 0).unwrap();
        assert_eq!(out.objective(), out.energy);
    }

    #[test]
    fn shared_alpha_is_bounded_by_per_subband_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<Vec<f64>>> =
            (0..3).map(|_| vec![(0..36).map(|_| rng.random_range(-1.0..1.0)).collect()]).collect();
        let out = als_fit(&data, 6, 6, 1, 20, 0).unwrap();
        // per-subband best rank-1 error from singular values
        let mut lower = 0.0;
        for sb in &data {
            let m = DMatrix::from_row_slice(6, 6, &sb[0]);
            let sv = m.singular_values();
            let mut s: Vec<f64> = sv.iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            lower += s[1..].iter().map(|x| x * x).sum::<f64>();
        }
        assert!(out.objective() >= lower - 1e-9);
        log::info!("shared-alpha gap {:.4e}", out.objective() - lower);
    }

    #[test]
    fn excessive_rank_is_rejected() {
        let seq = crate::fitting::tests::random_sequence(6, 3, 16, 1);
        let ds = crate::fitting::build_subband_dataset(&seq, &crate::wavelet::WaveletFilter::bior22(), 2).unwrap();
        assert!(fit_factorized(&ds, 1, 13, 2, 0).is_err());
        assert!(fit_factorized(&ds, 1, 2, 2, 0).is_ok());
    }

    #[test]
    fn bank_reproduces_fit_and_solves_back() {
        let seq = crate::fitting::tests::random_sequence(7, 6, 16, 2);
        let ds = crate::fitting::build_subband_dataset(&seq, &crate::wavelet::WaveletFilter::bior22(), 2).unwrap();
        let fit = fit_factorized(&ds, 1, 3, 10, 1).unwrap();
        let mut direct = 0.0f64;
        for (f, p) in ds.pyramids.iter().enumerate() {
            let pred = eval_factorized(&fit.bank, &fit.alphas[f]).unwrap();
            for (a, b) in pred.bands().iter().zip(p.details[1].bands()) {
                direct += a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
            }
            let solved = solve_level_coefficients(&fit.bank, &p.details[1]).unwrap();
            for (x, y) in solved.data().iter().zip(fit.alphas[f].data()) {
                assert!((x - y).abs() <= 1e-3 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
        assert!((direct - fit.residual_sq).abs() <= 1e-4 * fit.centered_energy);
    }
}
