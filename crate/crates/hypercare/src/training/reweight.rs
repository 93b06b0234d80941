use serde::{Deserialize, Serialize};

/// Point on the 2-simplex weighting the basic-only and extra groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub basic: f64,
    pub extra: f64,
}

impl GroupWeights {
    pub fn balanced() -> Self {
        GroupWeights {
            basic: 0.5,
            extra: 0.5,
        }
    }

    pub fn new(basic: f64, extra: f64) -> Self {
        let w = GroupWeights { basic, extra };
        debug_assert!(w.on_simplex());
        w
    }

    pub fn on_simplex(&self) -> bool {
        self.basic >= 0.0 && self.extra >= 0.0 && (self.basic + self.extra - 1.0).abs() <= 1e-12
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Gradient-alignment similarities driving the multiplicative update:
/// `a_i = <s_i, s_b + s_e> / tau` after scaling both gradients by the
/// larger of the two L2 norms. The shared scale bounds the exponents
/// without erasing the relative-magnitude signal between the groups; a
/// zero gradient contributes nothing. Returns `None` when both gradients
/// vanish.
pub fn group_similarities(s_basic: &[f64], s_extra: &[f64], tau: f64) -> Option<(f64, f64)> {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(s_basic.len(), s_extra.len(), "gradient lengths differ");
    let bb = dot(s_basic, s_basic);
    let ee = dot(s_extra, s_extra);
    let scale = bb.max(ee);
    if scale == 0.0 {
        return None;
    }
    let be = dot(s_basic, s_extra);
    Some(((bb + be) / scale / tau, (be + ee) / scale / tau))
}

/// Closed-form minimizer of the linearized loss-reduction objective with a
/// KL tether to the previous weights:
/// `w_i = prev_i * exp(a_i) / sum_k prev_k * exp(a_k)`,
/// evaluated in log space with max-subtraction. Zero prior mass stays zero.
pub fn reweight_from_similarities(
    prev: GroupWeights,
    sim_basic: f64,
    sim_extra: f64,
) -> GroupWeights {
    let log_b = prev.basic.ln() + sim_basic; // ln(0) = -inf preserves zero mass
    let log_e = prev.extra.ln() + sim_extra;
    let m = log_b.max(log_e);
    let eb = (log_b - m).exp();
    let ee = (log_e - m).exp();
    let basic = eb / (eb + ee);
    GroupWeights {
        basic,
        extra: 1.0 - basic,
    }
}

/// One multiplicative-weights step from the two group gradients. Degenerate
/// all-zero gradients leave the weights unchanged.
pub fn reweight(prev: GroupWeights, s_basic: &[f64], s_extra: &[f64], tau: f64) -> GroupWeights {
    debug_assert!(prev.on_simplex());
    match group_similarities(s_basic, s_extra, tau) {
        Some((a_b, a_e)) => reweight_from_similarities(prev, a_b, a_e),
        None => prev,
    }
}

/// First-order estimate of the total loss change after one step of size
/// `alpha` along the weighted gradient direction:
/// `-alpha * sum_i sum_j w_i <s_i, s_j>` over raw (unnormalized) gradients.
pub fn predicted_reduction(
    weights: GroupWeights,
    s_basic: &[f64],
    s_extra: &[f64],
    alpha: f64,
) -> f64 {
    let bb = dot(s_basic, s_basic);
    let be = dot(s_basic, s_extra);
    let ee = dot(s_extra, s_extra);
    -alpha * (weights.basic * (bb + be) + weights.extra * (be + ee))
}
