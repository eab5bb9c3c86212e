//! Finite joints, divergences, and the sufficiency functionals computed on them.

mod divergence;
mod joint;
mod risk;
mod sufficiency;

pub use divergence::{divergence, renyi_or_kl, DivergenceKind};
pub use joint::{DiscreteJoint, ScoreTable, Statistic};
pub use risk::{
    induced_conditional, inner_offset, minimize_risk_through, optimal_score, population_risk_f,
    score_sufficiency, NewtonOptions, RestrictedMinimum, ScoreSufficiency,
};
pub use sufficiency::{
    c2_constant, expected_tv_to_coarse, mutual_information_f, pushforward, suff_cbs,
    suff_cbs_signed, suff_ils, suff_vfs, sufficiency_report, SufficiencyReport, VfsMode,
};
