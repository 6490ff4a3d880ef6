//! Attack side: the membership classifier, the MI gain, proxy ascent, and the
//! post-hoc loss- and gradient-feature attackers.

pub mod attack;
pub mod features;
pub mod posthoc;

pub use attack::{
    attack_forward, gain_from_probs, mi_gain, mi_gain_with_grads, proxy_ascent_step, softmax_first, AttackModel,
    LossFeature, MiGainGrads, MiGainRecord, ATTACK_HIDDEN, DEFAULT_PROB_CLAMP,
};
pub use features::{
    gain_through_target, probe_row_weights, timestep_grid, FeatureProbe, GainThroughTarget, GradientProbe,
    GRADIENT_PROBE_STEPS,
};
pub use posthoc::{gather, grad_feature_attack, train_attacker, train_posthoc_attacker, AttackerReport, AttackerTraining};

/// Which per-sample features an evaluation attacker reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Loss,
    Gradient,
}
