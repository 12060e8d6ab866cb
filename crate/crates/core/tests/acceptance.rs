//! Acceptance criteria 1-11. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::panic::catch_unwind;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatwave::bench::{
    baseline_pca, compare_methods, count_cost, static_synthesis_flops, synth_teacher, CompareConfig, ModelConfig,
    SynthConfig, METHOD_OURS, METHOD_PCA, METHOD_SINGLE_LEVEL,
};
use splatwave::fitting::{
    build_subband_dataset, fit_factorized, fit_ll, fit_student, LossWeights, Ranks, RefineProblem, SubbandDataset,
};
use splatwave::geometry::{dq_skin, SkinInfluences};
use splatwave::predictor::CoefficientMlp;
use splatwave::sh::{sh_eval, wigner_rotate_sh1, Sh1Coefficients, TexelRotation, SH_COEFFS};
use splatwave::tensor::{ChannelLayout, Texture, TextureSequence};
use splatwave::wavelet::{
    dwt_multilevel, idwt_multilevel, idwt_partial, precompute_static_offset, DetailTriple, WaveletFilter,
    WaveletPyramid,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tex(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Texture {
    Texture::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

fn max_abs(t: &Texture) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64))
}

fn c1_wavelet_round_trip() -> Outcome {
    let start = Instant::now();
    let filter = WaveletFilter::bior22();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let h = 2 * rng.random_range(4..=128);
        let w = 2 * rng.random_range(4..=128);
        let c = rng.random_range(1..=26);
        let x = rand_tex(&mut rng, h, w, c);
        let mut levels = 1;
        while levels < 4 && (h >> levels) % 2 == 0 && (w >> levels) % 2 == 0 {
            levels += 1;
        }
        let pyr = dwt_multilevel(&x, levels, &filter).map_err(|e| e.to_string())?;
        let back = idwt_multilevel(&pyr, &filter).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&x) as f64 / max_abs(&x));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-5 && secs < 10.0, format!("max rel err {worst:.2e} (<= 1e-5), {secs:.2} s (< 10 s)"))
}

fn c2_static_offset_identity() -> Outcome {
    let filter = WaveletFilter::bior22();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let side = 16 * rng.random_range(1..=8);
        let c = rng.random_range(1..=6);
        let details: Vec<DetailTriple> = (0..4)
            .map(|l| {
                let s = side >> (l + 1);
                DetailTriple::from_bands([
                    rand_tex(&mut rng, s, s, c),
                    rand_tex(&mut rng, s, s, c),
                    rand_tex(&mut rng, s, s, c),
                ])
                .unwrap()
            })
            .collect();
        let pyr = WaveletPyramid { ll: rand_tex(&mut rng, side >> 4, side >> 4, c), details };
        let full = idwt_multilevel(&pyr, &filter).map_err(|e| e.to_string())?;
        let offset = precompute_static_offset(&[&pyr.details[1], &pyr.details[0]], (side, side), &filter)
            .map_err(|e| e.to_string())?;
        let partial =
            idwt_partial(&pyr.ll, &[&pyr.details[3], &pyr.details[2]], &offset, &filter).map_err(|e| e.to_string())?;
        worst = worst.max(partial.max_abs_diff(&full) as f64 / max_abs(&full));
    }
    ensure(worst <= 1e-5, format!("max rel err {worst:.2e} over 50 pyramids (<= 1e-5)"))
}

fn c3_quarter_cost() -> Outcome {
    let (partial, full) = static_synthesis_flops(&ModelConfig::paper());
    let ratio = partial as f64 / full as f64;
    ensure((ratio - 0.25).abs() <= 0.02, format!("static/full synthesis FLOPs {ratio:.4} (0.25 +- 0.02)"))
}

fn c4_budget() -> Outcome {
    let r = count_cost(&ModelConfig::paper()).map_err(|e| e.to_string())?;
    let (p, f) = (r.total_params() as f64, r.total_flops() as f64);
    let ok = (p - 26.67e6).abs() <= 0.15 * 26.67e6 && (0.52e9 / 2.0..1.0e9).contains(&f) && f <= 0.52e9 * 2.0;
    ensure(ok, format!("params {:.2}M (26.67M +- 15%), {:.3} GFLOPs (< 1.0, within 2x of 0.52)", p / 1e6, f / 1e9))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn c5_sh_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut dc_exact = true;
    for _ in 0..1000 {
        let eta = Sh1Coefficients(
            (0..SH_COEFFS).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>().try_into().unwrap(),
        );
        let axis = random_unit(&mut rng);
        let r = TexelRotation::from_axis_angle(&axis, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let d = random_unit(&mut rng);
        let lhs = sh_eval(&wigner_rotate_sh1(&eta, &r), &d);
        let rhs = sh_eval(&eta, &(r.matrix().transpose() * d));
        for (a, b) in lhs.iter().zip(&rhs) {
            worst = worst.max((a - b).abs());
        }
        let rotated = wigner_rotate_sh1(&eta, &r);
        dc_exact &= (0..3).all(|color| rotated.dc(color) == eta.dc(color));
    }
    ensure(
        worst <= 1e-6 && dc_exact,
        format!("max |diff| {worst:.2e} over 1000 triples (<= 1e-6), degree 0 exact: {dc_exact}"),
    )
}

/// Squared singular-value tail of the centred rows beyond `k`, by SVD.
fn svd_tail(rows: &[Vec<f64>], k: usize) -> f64 {
    let n = rows.len();
    let dim = rows[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let m = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.iter().skip(k).map(|s| s * s).sum()
}

fn structured_sequence(rng: &mut ChaCha8Rng, frames: usize, side: usize, c: usize) -> TextureSequence {
    let modes: Vec<Texture> = (0..6).map(|_| rand_tex(rng, side, side, c)).collect();
    let out: Vec<Texture> = (0..frames)
        .map(|_| {
            let w: Vec<f32> = (0..modes.len()).map(|i| rng.random_range(-1.0..1.0) / (1.0 + i as f32)).collect();
            let noise = rand_tex(rng, side, side, c);
            Texture::from_fn(side, side, c, |y, x, ch| {
                let s: f32 = modes.iter().zip(&w).map(|(m, a)| a * m.at(y, x, ch)).sum();
                s + 0.05 * noise.at(y, x, ch)
            })
        })
        .collect();
    TextureSequence::new(out, ChannelLayout::generic(c), 30.0).unwrap()
}

fn c6_eckart_young() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let filter = WaveletFilter::bior22();
    let (mut worst_ll, mut worst_pca) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let seq = structured_sequence(&mut rng, 20, 16, 3);
        let k = rng.random_range(1..=10);

        let ds = build_subband_dataset(&seq, &filter, 1).map_err(|e| e.to_string())?;
        let fit = fit_ll(&ds, k).map_err(|e| e.to_string())?;
        let oracle: f64 = (0..3)
            .map(|ch| {
                let rows: Vec<Vec<f64>> = ds.pyramids.iter().map(|p| p.ll.plane(ch)).collect();
                svd_tail(&rows, k)
            })
            .sum();
        worst_ll = worst_ll.max((fit.residual_sq - oracle).abs() / oracle);

        let pca = baseline_pca(&seq, k).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = seq.frames().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
        let oracle = svd_tail(&rows, k);
        worst_pca = worst_pca.max((pca.residual_sq - oracle).abs() / oracle);
    }
    ensure(
        worst_ll <= 1e-4 && worst_pca <= 1e-4,
        format!("max rel diff vs SVD tail: fit_ll {worst_ll:.2e}, baseline_pca {worst_pca:.2e} (<= 1e-4)"),
    )
}

/// Two-level dataset whose coarsest details are exactly rank 2 per channel.
fn planted_dataset(seed: u64, frames: usize) -> SubbandDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (side, c, rank) = (32usize, 2usize, 2usize);
    let s = side / 4;
    let mut factors = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    // [subband][channel][rank] -> (h, w)
    let hw: Vec<Vec<Vec<(Vec<f64>, Vec<f64>)>>> =
        (0..3).map(|_| (0..c).map(|_| (0..rank).map(|_| (factors(s), factors(s))).collect()).collect()).collect();
    let alphas: Vec<Vec<Vec<f64>>> = (0..frames).map(|_| (0..c).map(|_| factors(rank)).collect()).collect();
    let pyramids: Vec<WaveletPyramid> = alphas
        .iter()
        .map(|a| {
            let band = |sb: usize| {
                Texture::from_fn(s, s, c, |y, x, ch| {
                    (0..rank).map(|r| a[ch][r] * hw[sb][ch][r].0[y] * hw[sb][ch][r].1[x]).sum::<f64>() as f32
                })
            };
            WaveletPyramid {
                ll: Texture::zeros(s, s, c),
                details: vec![
                    DetailTriple::zeros(2 * s, 2 * s, c),
                    DetailTriple::from_bands([band(0), band(1), band(2)]).unwrap(),
                ],
            }
        })
        .collect();
    let mean = |get: &dyn Fn(&WaveletPyramid) -> &Texture| {
        let first = get(&pyramids[0]);
        Texture::from_fn(first.height(), first.width(), c, |y, x, ch| {
            pyramids.iter().map(|p| get(p).at(y, x, ch) as f64).sum::<f64>() as f32 / frames as f32
        })
    };
    let detail_means = (0..2)
        .map(|l| {
            DetailTriple::from_bands([
                mean(&|p| &p.details[l].lh),
                mean(&|p| &p.details[l].hl),
                mean(&|p| &p.details[l].hh),
            ])
            .unwrap()
        })
        .collect();
    SubbandDataset {
        layout: ChannelLayout::generic(c),
        filter: WaveletFilter::bior22(),
        resolution: (side, side),
        ll_mean: Texture::zeros(s, s, c),
        detail_means,
        pyramids,
    }
}

fn c7_als_soundness() -> Outcome {
    let ds = planted_dataset(7, 12);
    let fit = fit_factorized(&ds, 1, 2, 20, 3).map_err(|e| e.to_string())?;
    let mut monotone = true;
    for trace in &fit.traces {
        let slack = 1e-12 * trace[0].max(1.0);
        monotone &= trace.windows(2).all(|p| p[1] <= p[0] + slack);
    }
    let updates = fit.traces.iter().map(|t| t.len() - 1).max().unwrap_or(0);
    ensure(
        monotone && fit.residual_sq <= 1e-6,
        format!(
            "objective non-increasing after each of {updates} block updates: {monotone}, planted rank-2 objective {:.2e} (<= 1e-6)",
            fit.residual_sq
        ),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn c8_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames: Vec<Texture> = (0..4).map(|_| rand_tex(&mut rng, 32, 32, 2)).collect();
    let seq = TextureSequence::new(frames, ChannelLayout::generic(2), 30.0).unwrap();
    let ds = build_subband_dataset(&seq, &WaveletFilter::bior22(), 4).map_err(|e| e.to_string())?;
    let model = fit_student(&ds, &Ranks::new(2, vec![2, 1]), 3, 8).map_err(|e| e.to_string())?.model;
    let desc: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mlp = CoefficientMlp::new(&[3, 6, model.coefficient_count()], 8).map_err(|e| e.to_string())?;
    let models = vec![model];
    let problem = RefineProblem::new(&models, &[&ds], std::slice::from_ref(&mlp), &desc, LossWeights::default())
        .map_err(|e| e.to_string())?;
    let p0 = problem.params();
    let (_, grad) = problem.loss_and_gradient(&p0).map_err(|e| e.to_string())?;
    let bank_len = p0.len() - mlp.param_count();
    let mut worst_rec = 0.0f64;
    for trial in 0..12 {
        let i = if trial % 2 == 0 { rng.random_range(0..bank_len) } else { rng.random_range(bank_len..p0.len()) };
        let eps = 1e-6 * p0[i].abs().max(1.0);
        let mut p = p0.clone();
        p[i] += eps;
        let lp = problem.loss_and_gradient(&p).map_err(|e| e.to_string())?.0;
        p[i] = p0[i] - eps;
        let lm = problem.loss_and_gradient(&p).map_err(|e| e.to_string())?.0;
        worst_rec = worst_rec.max(rel_err((lp - lm) / (2.0 * eps), grad[i]));
    }

    let targets: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut net = CoefficientMlp::new(&[3, 7, 5], 9).map_err(|e| e.to_string())?;
    let q0 = net.params();
    let (_, g) = net.l1_loss_and_gradient(&desc, &targets).map_err(|e| e.to_string())?;
    let mut worst_mlp = 0.0f64;
    for _ in 0..12 {
        let i = rng.random_range(0..q0.len());
        let eps = 1e-6;
        let mut q = q0.clone();
        q[i] += eps;
        net.set_params(&q).map_err(|e| e.to_string())?;
        let lp = net.l1_loss_and_gradient(&desc, &targets).map_err(|e| e.to_string())?.0;
        q[i] = q0[i] - eps;
        net.set_params(&q).map_err(|e| e.to_string())?;
        let lm = net.l1_loss_and_gradient(&desc, &targets).map_err(|e| e.to_string())?.0;
        worst_mlp = worst_mlp.max(rel_err((lp - lm) / (2.0 * eps), g[i]));
    }
    ensure(
        worst_rec <= 1e-4 && worst_mlp <= 1e-4,
        format!(
            "max rel err vs central differences: L_rec {worst_rec:.2e}, MLP {worst_mlp:.2e} (12 params each, <= 1e-4)"
        ),
    )
}

fn c9_representation_ordering() -> Outcome {
    let data =
        synth_teacher(&SynthConfig { resolution: 256, channels: 8, frames: 64, seed: 9, ..SynthConfig::default() })
            .map_err(|e| e.to_string())?;
    let held: Vec<usize> = (0..64).filter(|f| f % 4 == 3).collect();
    let train: Vec<usize> = (0..64).filter(|f| f % 4 != 3).collect();
    let seq = &data.sequence;
    let cfg = CompareConfig { ranks: Ranks::new(32, vec![24, 16]), ..CompareConfig::default() };
    let cmp =
        compare_methods(&seq.subset(&train).unwrap(), &seq.subset(&held).unwrap(), &cfg).map_err(|e| e.to_string())?;
    let (ours, single, pca) =
        (cmp.get(METHOD_OURS).unwrap(), cmp.get(METHOD_SINGLE_LEVEL).unwrap(), cmp.get(METHOD_PCA).unwrap());
    let ratio = single.params as f64 / pca.params as f64;
    ensure(
        ours.heldout_l1 < single.heldout_l1 && single.params <= ours.params && ratio < 0.10,
        format!(
            "held-out L1 ours {:.3e} < single-level {:.3e} (params {} <= {}); single/PCA params {:.2}% (< 10%, PCA K={})",
            ours.heldout_l1,
            single.heldout_l1,
            single.params,
            ours.params,
            100.0 * ratio,
            pca.size
        ),
    )
}

fn splatwave(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_splatwave")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn c10_determinism() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    splatwave(&["gen-synth", "--out", &p("ds"), "--seed", "10"])?;
    for run in ["a", "b"] {
        splatwave(&["fit", "--dataset", &p("ds"), "--out", &p(&format!("model_{run}")), "--seed", "10"])?;
        splatwave(&[
            "eval",
            "--dataset",
            &p("ds"),
            "--model",
            &p(&format!("model_{run}")),
            "--out",
            &p(&format!("eval_{run}")),
        ])?;
    }
    splatwave(&["bench", "--dataset", &p("ds"), "--out", &p("bench"), "--seed", "10"])?;
    let elapsed = start.elapsed();
    let mut identical = true;
    let mut compared = 0;
    for (dir, file) in [("model", "fit_traces.csv"), ("model", "cost.csv"), ("eval", "eval.csv")] {
        let a = read(&tmp.path().join(format!("{dir}_a")).join(file))?;
        let b = read(&tmp.path().join(format!("{dir}_b")).join(file))?;
        identical &= a == b;
        compared += 1;
    }
    let bench_rows = String::from_utf8(read(&tmp.path().join("bench/bench.csv"))?).unwrap().lines().count();
    ensure(
        identical && bench_rows == 4 && elapsed < Duration::from_secs(300),
        format!(
            "{compared} CSV outputs byte-identical across runs: {identical}; toy pipeline {:.1} s (< 300 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn c11_skinning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let axis = random_unit(&mut rng);
    let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), 2.1);
    let t = Vector3::new(0.3, -1.2, 0.7);
    let iso = Isometry3::from_parts(Translation3::from(t), rot);
    let transforms = vec![iso; 4];
    let vertices: Vec<[f64; 3]> = (0..500)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let influences: Vec<SkinInfluences> = (0..500)
        .map(|_| {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            SkinInfluences::from_pairs(&[(0, w[0] / s), (1, w[1] / s), (2, w[2] / s), (3, w[3] / s)]).unwrap()
        })
        .collect();
    let posed = dq_skin(&vertices, &influences, &transforms).map_err(|e| e.to_string())?;
    let worst = vertices
        .iter()
        .zip(&posed)
        .map(|(v, p)| {
            let want = rot * Vector3::from(*v) + t;
            (Vector3::from(*p) - want).amax()
        })
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, format!("max |diff| {worst:.2e} over 500 vertices (<= 1e-6)"))
}

fn guarded(f: fn() -> Outcome) -> Outcome {
    catch_unwind(f).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("wavelet round trip", c1_wavelet_round_trip),
        ("static-offset identity", c2_static_offset_identity),
        ("quarter-cost synthesis", c3_quarter_cost),
        ("budget reproduction", c4_budget),
        ("SH equivalence", c5_sh_equivalence),
        ("Eckart-Young oracle", c6_eckart_young),
        ("ALS soundness", c7_als_soundness),
        ("gradient correctness", c8_gradients),
        ("representation ordering", c9_representation_ordering),
        ("determinism", c10_determinism),
        ("skinning exactness", c11_skinning),
    ];
    // the wall-clock bound of criterion 1 is measured on an otherwise idle process
    let mut results = vec![guarded(criteria[0].1)];
    results.extend(std::thread::scope(|s| {
        let handles: Vec<_> = criteria[1..].iter().map(|(_, f)| s.spawn(move || guarded(*f))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
    }));
    let mut failed = 0;
    for (i, ((name, _), r)) in criteria.iter().zip(&results).enumerate() {
        match r {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
