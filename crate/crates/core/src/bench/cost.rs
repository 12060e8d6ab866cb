//! Closed-form FLOP and parameter accounting of the runtime decoder.
//!
//! One multiply-accumulate counts as two FLOPs. Blendshape means initialize the
//! accumulators and add no FLOPs of their own.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{Ranks, APPEARANCE, GEOMETRY};

pub const STAGE_MLP: &str = "mlp";
pub const STAGE_LL: &str = "ll_eval";
pub const STAGE_FACTORIZED: &str = "factorized_eval";
pub const STAGE_IDWT: &str = "idwt_partial";
pub const STAGE_SH: &str = "sh_eval";
pub const STAGES: [&str; 5] = [STAGE_MLP, STAGE_LL, STAGE_FACTORIZED, STAGE_IDWT, STAGE_SH];

/// Per-texel colour evaluation: back-rotate the view direction (9 MACs), three
/// basis products and four MACs per colour.
pub const SH_FLOPS_PER_TEXEL: u64 = 2 * 9 + 3 + 2 * 4 * 3;

/// Taps charged per synthesis branch; both branches use the same count.
pub const DEFAULT_SYNTHESIS_TAPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCost {
    pub name: String,
    pub channels: usize,
    pub ranks: Ranks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub levels: usize,
    pub dynamic_levels: usize,
    pub groups: Vec<GroupCost>,
    /// Flattened motion descriptor width `k · D`.
    pub descriptor_width: usize,
    pub mlp_hidden: Vec<usize>,
    pub shared_mlp: bool,
    /// Outputs of the template-coefficient predictor; zero disables it.
    pub pca_components: usize,
    pub synthesis_taps: usize,
    /// Whether colour evaluation is charged.
    pub sh_eval: bool,
}

impl ModelConfig {
    /// 768² textures, 11 geometry and 12 appearance channels, 3 × 30 descriptor.
    pub fn paper() -> Self {
        ModelConfig {
            resolution: 768,
            levels: 4,
            dynamic_levels: 2,
            groups: vec![
                GroupCost { name: GEOMETRY.into(), channels: 11, ranks: Ranks::paper_geometry() },
                GroupCost { name: APPEARANCE.into(), channels: 12, ranks: Ranks::paper_appearance() },
            ],
            descriptor_width: 90,
            mlp_hidden: vec![256, 256],
            shared_mlp: false,
            pca_components: 128,
            synthesis_taps: DEFAULT_SYNTHESIS_TAPS,
            sh_eval: true,
        }
    }

    pub fn toy() -> Self {
        let mut cfg = ModelConfig::paper();
        cfg.resolution = 64;
        for g in &mut cfg.groups {
            g.ranks = Ranks::toy();
        }
        cfg.pca_components = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let block = 1usize << self.levels;
        if self.resolution == 0 || !self.resolution.is_multiple_of(block) {
            return Err(Error::Config(format!("resolution {} is not a positive multiple of {block}", self.resolution)));
        }
        if self.dynamic_levels > self.levels {
            return Err(Error::Config("more dynamic levels than levels".into()));
        }
        for g in &self.groups {
            if g.ranks.levels.len() != self.dynamic_levels {
                return Err(Error::Config(format!(
                    "group `{}` has {} level ranks, expected {}",
                    g.name,
                    g.ranks.levels.len(),
                    self.dynamic_levels
                )));
            }
        }
        if self.synthesis_taps == 0 {
            return Err(Error::Config("synthesis filters need at least one tap".into()));
        }
        Ok(())
    }

    fn channels(&self) -> usize {
        self.groups.iter().map(|g| g.channels).sum()
    }

    /// Side length of the detail bands at `level` (0 is finest).
    fn detail_side(&self, level: usize) -> usize {
        self.resolution >> (level + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub flops: u64,
    pub params: u64,
}

impl std::ops::AddAssign for StageCost {
    fn add_assign(&mut self, o: StageCost) {
        self.flops += o.flops;
        self.params += o.params;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// In [`STAGES`] order.
    pub stages: Vec<(String, StageCost)>,
}

impl CostReport {
    fn empty() -> Self {
        CostReport { stages: STAGES.iter().map(|s| (s.to_string(), StageCost { flops: 0, params: 0 })).collect() }
    }

    fn add(&mut self, stage: &str, cost: StageCost) {
        let slot = self.stages.iter_mut().find(|(n, _)| n == stage).expect("known stage");
        slot.1 += cost;
    }

    pub fn stage(&self, name: &str) -> StageCost {
        self.stages.iter().find(|(n, _)| n == name).map_or(StageCost { flops: 0, params: 0 }, |(_, c)| *c)
    }

    pub fn total_flops(&self) -> u64 {
        self.stages.iter().map(|(_, c)| c.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.stages.iter().map(|(_, c)| c.params).sum()
    }

    /// `stage,flops,params` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,flops,params\n");
        for (n, c) in &self.stages {
            let _ = writeln!(s, "{n},{},{}", c.flops, c.params);
        }
        let _ = writeln!(s, "total,{},{}", self.total_flops(), self.total_params());
        s
    }
}

/// Parameters and FLOPs of a fully connected network with the given layer widths.
pub fn mlp_cost(sizes: &[usize]) -> StageCost {
    let mut c = StageCost { flops: 0, params: 0 };
    for w in sizes.windows(2) {
        let (i, o) = (w[0] as u64, w[1] as u64);
        c.flops += 2 * i * o;
        c.params += i * o + o;
    }
    c
}

/// FLOPs of one synthesis branch taking an `h × w × c` band to `2h × 2w`.
///
/// Every input sample feeds `taps` outputs in the vertical pass, and every
/// sample of the `2h × w` intermediate feeds `taps` outputs horizontally.
pub fn synthesis_branch_flops(h: usize, w: usize, c: usize, taps: usize) -> u64 {
    2 * taps as u64 * 3 * (h * w * c) as u64
}

/// Synthesis FLOPs of the frozen levels with one branch versus all four.
pub fn static_synthesis_flops(cfg: &ModelConfig) -> (u64, u64) {
    let c = cfg.channels();
    let mut partial = 0;
    let mut full = 0;
    for level in 0..cfg.levels - cfg.dynamic_levels {
        let s = cfg.detail_side(level);
        let b = synthesis_branch_flops(s, s, c, cfg.synthesis_taps);
        partial += b;
        full += 4 * b;
    }
    (partial, full)
}

fn predictor_outputs(g: &GroupCost) -> usize {
    (g.ranks.ll + g.ranks.levels.iter().sum::<usize>()) * g.channels
}

pub fn count_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut report = CostReport::empty();
    let net = |out: usize| {
        let mut sizes = vec![cfg.descriptor_width];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push(out);
        mlp_cost(&sizes)
    };
    if cfg.shared_mlp {
        report.add(STAGE_MLP, net(cfg.groups.iter().map(predictor_outputs).sum()));
    } else {
        for g in &cfg.groups {
            report.add(STAGE_MLP, net(predictor_outputs(g)));
        }
    }
    if cfg.pca_components > 0 {
        report.add(STAGE_MLP, net(cfg.pca_components));
    }

    let ll = (cfg.resolution >> cfg.levels) as u64;
    let dynamic: Vec<usize> = (cfg.levels - cfg.dynamic_levels..cfg.levels).rev().collect();
    for g in &cfg.groups {
        let c = g.channels as u64;
        let r = g.ranks.ll as u64;
        report.add(STAGE_LL, StageCost { flops: 2 * ll * ll * r * c, params: ll * ll * c * (r + 1) });
        for (&level, &rank) in dynamic.iter().zip(&g.ranks.levels) {
            let s = cfg.detail_side(level) as u64;
            let r = rank as u64;
            report.add(
                STAGE_FACTORIZED,
                StageCost { flops: 3 * (2 * s * s * r * c + s * r * c), params: 3 * (2 * s * r * c + s * s * c) },
            );
        }
        for level in 0..cfg.levels - cfg.dynamic_levels {
            let s = cfg.detail_side(level) as u64;
            report.add(STAGE_IDWT, StageCost { flops: 0, params: 3 * s * s * c });
        }
    }

    let c = cfg.channels();
    let mut idwt = 0;
    for level in 0..cfg.levels {
        let s = cfg.detail_side(level);
        let branches = if level < cfg.levels - cfg.dynamic_levels { 1 } else { 4 };
        idwt += branches * synthesis_branch_flops(s, s, c, cfg.synthesis_taps);
    }
    if cfg.dynamic_levels < cfg.levels {
        // adding the precomputed static offset
        idwt += (cfg.resolution * cfg.resolution * c) as u64;
    }
    report.add(STAGE_IDWT, StageCost { flops: idwt, params: 0 });

    if cfg.sh_eval {
        report.add(
            STAGE_SH,
            StageCost { flops: SH_FLOPS_PER_TEXEL * (cfg.resolution * cfg.resolution) as u64, params: 0 },
        );
    }
    Ok(report)
}

/// PCA over full-resolution textures with `k` components per group.
pub fn pca_only_cost(cfg: &ModelConfig, k: usize) -> Result<CostReport> {
    cfg.validate()?;
    let mut report = CostReport::empty();
    let texels = (cfg.resolution * cfg.resolution) as u64;
    let c = cfg.channels() as u64;
    let mut sizes = vec![cfg.descriptor_width];
    sizes.extend(&cfg.mlp_hidden);
    sizes.push(k);
    report.add(STAGE_MLP, mlp_cost(&sizes));
    if cfg.pca_components > 0 {
        *sizes.last_mut().expect("output layer") = cfg.pca_components;
        report.add(STAGE_MLP, mlp_cost(&sizes));
    }
    report.add(STAGE_LL, StageCost { flops: 2 * texels * c * k as u64, params: texels * c * (k as u64 + 1) });
    if cfg.sh_eval {
        report.add(STAGE_SH, StageCost { flops: SH_FLOPS_PER_TEXEL * texels, params: 0 });
    }
    Ok(report)
}

/// Rank-`r` separable factorization at full resolution, one rank per group.
pub fn single_level_cost(cfg: &ModelConfig, ranks: &[usize]) -> Result<CostReport> {
    cfg.validate()?;
    if ranks.len() != cfg.groups.len() {
        return Err(Error::Config(format!("{} single-level ranks for {} groups", ranks.len(), cfg.groups.len())));
    }
    let mut report = CostReport::empty();
    let n = cfg.resolution as u64;
    for (g, &r) in cfg.groups.iter().zip(ranks) {
        let (c, r) = (g.channels as u64, r as u64);
        let mut sizes = vec![cfg.descriptor_width];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push((r * c) as usize);
        report.add(STAGE_MLP, mlp_cost(&sizes));
        report.add(
            STAGE_FACTORIZED,
            StageCost { flops: 2 * n * n * r * c + n * r * c, params: 2 * n * r * c + n * n * c },
        );
    }
    if cfg.pca_components > 0 {
        let mut sizes = vec![cfg.descriptor_width];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push(cfg.pca_components);
        report.add(STAGE_MLP, mlp_cost(&sizes));
    }
    if cfg.sh_eval {
        report.add(STAGE_SH, StageCost { flops: SH_FLOPS_PER_TEXEL * n * n, params: 0 });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_totals_sum() {
        let r = count_cost(&ModelConfig::paper()).unwrap();
        let f: u64 = STAGES.iter().map(|s| r.stage(s).flops).sum();
        let p: u64 = STAGES.iter().map(|s| r.stage(s).params).sum();
        assert_eq!((f, p), (r.total_flops(), r.total_params()));
        assert!(r.to_csv().starts_with("stage,flops,params\nmlp,"));
    }

    #[test]
    fn paper_budget_hand_count() {
        let r = count_cost(&ModelConfig::paper()).unwrap();
        // per channel: LL 48²·(R+1), banks 3·2·s·R, means at 48, 96, 192, 384
        let means = 3 * (48 * 48 + 96 * 96 + 192 * 192 + 384 * 384);
        let geo = 11 * (48 * 48 * 193 + 3 * 2 * 48 * 128 + 3 * 2 * 96 * 96 + means);
        let app = 12 * (48 * 48 * 129 + 3 * 2 * 48 * 128 + 3 * 2 * 96 * 96 + means);
        let mlp = |o: u64| 90 * 256 + 256 + 256 * 256 + 256 + 256 * o + o;
        let want = geo + app + mlp(416 * 11) + mlp(352 * 12) + mlp(128);
        assert_eq!(r.total_params(), want);
    }

    #[test]
    fn zero_ranks_leave_only_rank_free_stages() {
        let mut cfg = ModelConfig::paper();
        for g in &mut cfg.groups {
            g.ranks = Ranks::new(0, vec![0, 0]);
        }
        let r = count_cost(&cfg).unwrap();
        assert_eq!(r.stage(STAGE_LL).flops, 0);
        assert_eq!(r.stage(STAGE_FACTORIZED).flops, 0);
        assert_eq!(r.total_flops(), r.stage(STAGE_IDWT).flops + r.stage(STAGE_MLP).flops + r.stage(STAGE_SH).flops);
    }

    #[test]
    fn single_branch_costs_a_quarter() {
        let (partial, full) = static_synthesis_flops(&ModelConfig::paper());
        assert_eq!(4 * partial, full);
    }

    #[test]
    fn mlp_cost_matches_definition() {
        let c = mlp_cost(&[3, 4, 2]);
        assert_eq!(c.flops, 2 * (12 + 8));
        assert_eq!(c.params, 12 + 4 + 8 + 2);
    }

    #[test]
    fn baselines_cost_more_than_ours() {
        let cfg = ModelConfig::paper();
        let ours = count_cost(&cfg).unwrap().total_flops();
        assert!(pca_only_cost(&cfg, 128).unwrap().total_flops() > ours);
        assert!(single_level_cost(&cfg, &[384, 256]).unwrap().total_flops() > ours);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::paper();
        cfg.resolution = 100;
        assert!(count_cost(&cfg).is_err());
        let mut cfg = ModelConfig::paper();
        cfg.groups[0].ranks.levels.pop();
        assert!(count_cost(&cfg).is_err());
    }
}
