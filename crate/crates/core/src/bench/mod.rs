//! Cost accounting, synthetic teachers and baseline comparisons.

mod baselines;
mod compare;
mod cost;
mod synth;

pub use baselines::{baseline_config, baseline_pca, baseline_single_level, PcaBaseline, SingleLevelBaseline};
pub use compare::{
    compare_methods, matched_single_rank, subband_l1, CompareConfig, Comparison, MethodScore, METHOD_OURS, METHOD_PCA,
    METHOD_SINGLE_LEVEL,
};
pub use cost::*;
pub use synth::{synth_teacher, Amplitudes, SynthConfig, RESOLUTION_BLOCK};
