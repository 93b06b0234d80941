use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cohort, CohortError, Group, MedicalCode, Split, Tier, Visit};

/// Which feature view a score or evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Basic,
    Full,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Basic => "basic",
            Scenario::Full => "full",
        })
    }
}

/// Generative model: per label column, `y ~ Bernoulli(label_prior)`; code
/// `j` (tied to column `j % num_labels`) is included with probability
/// `base_rate - sep/2` when its column's label is 0 and `base_rate + sep/2`
/// when it is 1, where `sep` is the basic or extra separation by tier.
/// Extra codes are only sampled for the `extra_fraction` of visits tagged
/// group=extra. A visit that samples no basic codes receives one uniformly
/// chosen basic code, so every visit has a non-empty basic view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_visits: usize,
    pub n_basic: usize,
    pub n_extra: usize,
    pub label_prior: f64,
    pub basic_separation: f64,
    pub extra_separation: f64,
    pub base_rate: f64,
    pub extra_fraction: f64,
    /// Fractions for pretrain_train, finetune_train, validation, test.
    pub split_fractions: [f64; 4],
    pub num_labels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_visits: 2000,
            n_basic: 40,
            n_extra: 60,
            label_prior: 0.4,
            basic_separation: 0.1,
            extra_separation: 0.3,
            base_rate: 0.3,
            extra_fraction: 0.15,
            split_fractions: [0.6, 0.1, 0.1, 0.2],
            num_labels: 1,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn n_extra_visits(&self) -> usize {
        (self.n_visits as f64 * self.extra_fraction).round() as usize
    }

    fn rates(&self, tier: Tier) -> (f64, f64) {
        let sep = match tier {
            Tier::Basic => self.basic_separation,
            Tier::Extra => self.extra_separation,
        };
        (self.base_rate - sep / 2.0, self.base_rate + sep / 2.0)
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let fail = |msg: String| Err(CohortError::InfeasibleConfig(msg));
        if self.n_visits == 0 || self.n_basic == 0 {
            return fail("need at least one visit and one basic code".into());
        }
        if self.num_labels == 0 {
            return fail("num_labels must be >= 1".into());
        }
        if !(0.0 < self.label_prior && self.label_prior < 1.0) {
            return fail(format!("label_prior {} outside (0,1)", self.label_prior));
        }
        for (name, sep) in [
            ("basic_separation", self.basic_separation),
            ("extra_separation", self.extra_separation),
        ] {
            if !(0.0..1.0).contains(&sep) {
                return fail(format!("{name} {sep} outside [0,1)"));
            }
            let lo = self.base_rate - sep / 2.0;
            let hi = self.base_rate + sep / 2.0;
            if !(0.0 < lo && hi < 1.0) {
                return fail(format!(
                    "base_rate {} with {name} {sep} leaves (0,1): [{lo}, {hi}]",
                    self.base_rate
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.extra_fraction) {
            return fail(format!("extra_fraction {} outside [0,1]", self.extra_fraction));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return fail(format!(
                "split_fractions {:?} must be nonnegative and sum to 1",
                self.split_fractions
            ));
        }
        let n_extra_visits = self.n_extra_visits();
        if self.n_extra > 0 && n_extra_visits == 0 {
            return fail("extra codes exist but extra_fraction rounds to zero visits".into());
        }
        let targets = split_targets(self.n_visits, &self.split_fractions);
        let eligible: usize = targets[1] + targets[2] + targets[3];
        if n_extra_visits > eligible {
            return fail(format!(
                "{n_extra_visits} extra-group visits cannot fit in the \
                 {eligible} non-pretraining slots"
            ));
        }
        Ok(())
    }
}

/// Integer split sizes summing to `n`, each within one visit of `n * f`.
fn split_targets(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let mut targets = [0usize; 4];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(4);
    let mut assigned = 0;
    for (i, &f) in fractions.iter().enumerate() {
        let exact = n as f64 * f;
        targets[i] = exact.floor() as usize;
        assigned += targets[i];
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.into_iter().take(n - assigned) {
        targets[i] += 1;
    }
    targets
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `weights`, capped element-wise by `caps`.
fn apportion(total: usize, weights: &[usize], caps: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    let mut out = vec![0usize; weights.len()];
    if wsum == 0 || total == 0 {
        return out;
    }
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        let exact = total as f64 * w as f64 / wsum as f64;
        out[i] = (exact.floor() as usize).min(caps[i]);
        assigned += out[i];
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = total - assigned;
    while left > 0 {
        let mut progressed = false;
        for &(i, _) in &remainders {
            if left == 0 {
                break;
            }
            if out[i] < caps[i] {
                out[i] += 1;
                left -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "apportion caps too tight");
    }
    out
}

/// Deterministic function of the config (including its seed).
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Cohort, CohortError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_visits;
    let t = config.num_labels;

    let mut codes = Vec::with_capacity(config.n_basic + config.n_extra);
    for i in 0..config.n_basic {
        codes.push(MedicalCode {
            id: i,
            name: format!("b{i}"),
            tier: Tier::Basic,
        });
    }
    for i in 0..config.n_extra {
        codes.push(MedicalCode {
            id: config.n_basic + i,
            name: format!("e{i}"),
            tier: Tier::Extra,
        });
    }

    // Which visits carry extra features.
    let n_extra_visits = config.n_extra_visits();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_extra = vec![false; n];
    for &i in order.iter().take(n_extra_visits) {
        is_extra[i] = true;
    }

    let (b0, b1) = config.rates(Tier::Basic);
    let (e0, e1) = config.rates(Tier::Extra);
    let mut visits = Vec::with_capacity(n);
    for visit_id in 0..n {
        let labels: Vec<u8> = (0..t)
            .map(|_| u8::from(rng.gen_bool(config.label_prior)))
            .collect();
        let mut visit_codes = Vec::new();
        for j in 0..config.n_basic {
            let p = if labels[j % t] == 1 { b1 } else { b0 };
            if rng.gen_bool(p) {
                visit_codes.push(j);
            }
        }
        let no_basic = visit_codes.is_empty();
        if is_extra[visit_id] {
            for k in 0..config.n_extra {
                let j = config.n_basic + k;
                let p = if labels[j % t] == 1 { e1 } else { e0 };
                if rng.gen_bool(p) {
                    visit_codes.push(j);
                }
            }
        }
        // Every visit keeps at least one basic code so its basic view
        // (pretraining graph, basic scenario) stays non-empty.
        if no_basic {
            visit_codes.push(rng.gen_range(0..config.n_basic));
            visit_codes.sort_unstable();
        }
        visits.push(Visit {
            visit_id: visit_id as u64,
            codes: visit_codes,
            labels,
            group: if is_extra[visit_id] {
                Group::Extra
            } else {
                Group::BasicOnly
            },
            split: Split::PretrainTrain, // assigned below
        });
    }

    // Split assignment: seeded shuffles honoring the fractions, with every
    // extra-group visit kept out of pretraining.
    let targets = split_targets(n, &config.split_fractions);
    let eligible_caps = [targets[1], targets[2], targets[3]];
    let extra_quota = apportion(n_extra_visits, &eligible_caps, &eligible_caps);

    let mut extra_ids: Vec<usize> = (0..n).filter(|&i| is_extra[i]).collect();
    let mut basic_ids: Vec<usize> = (0..n).filter(|&i| !is_extra[i]).collect();
    extra_ids.shuffle(&mut rng);
    basic_ids.shuffle(&mut rng);

    let splits = [
        Split::PretrainTrain,
        Split::FinetuneTrain,
        Split::Validation,
        Split::Test,
    ];
    let mut extra_cursor = 0;
    let mut basic_cursor = 0;
    for (s, &split) in splits.iter().enumerate() {
        let from_extra = if s == 0 { 0 } else { extra_quota[s - 1] };
        for _ in 0..from_extra {
            visits[extra_ids[extra_cursor]].split = split;
            extra_cursor += 1;
        }
        for _ in 0..targets[s] - from_extra {
            visits[basic_ids[basic_cursor]].split = split;
            basic_cursor += 1;
        }
    }
    debug_assert_eq!(extra_cursor, n_extra_visits);
    debug_assert_eq!(basic_cursor, n - n_extra_visits);

    let cohort = Cohort {
        codes,
        visits,
        num_labels: t,
    };
    cohort.validate().expect("generator output satisfies invariants");
    Ok(cohort)
}

/// Exact naive-Bayes posterior `P(y_t = 1 | observed code indicators)`
/// under the generator's likelihood, computed in log space. One row per
/// visit, one column per label.
///
/// Basic codes are evidence for every visit. Extra codes are evidence only
/// in the full scenario and only for group=extra visits: a basic-only
/// visit's extras are structurally absent and carry no information.
pub fn bayes_optimal_scores(
    cohort: &Cohort,
    config: &SyntheticConfig,
    scenario: Scenario,
) -> Result<Vec<Vec<f64>>, CohortError> {
    if cohort.num_basic() != config.n_basic
        || cohort.num_extra() != config.n_extra
        || cohort.num_labels != config.num_labels
    {
        return Err(CohortError::ConfigMismatch(format!(
            "cohort has {} basic / {} extra codes and T={}, config says {} / {} and T={}",
            cohort.num_basic(),
            cohort.num_extra(),
            cohort.num_labels,
            config.n_basic,
            config.n_extra,
            config.num_labels
        )));
    }
    let t = config.num_labels;
    let prior_logit = (config.label_prior / (1.0 - config.label_prior)).ln();
    let (b0, b1) = config.rates(Tier::Basic);
    let (e0, e1) = config.rates(Tier::Extra);
    // Per-tier log-likelihood ratios for present and absent codes.
    let present = |p0: f64, p1: f64| (p1 / p0).ln();
    let absent = |p0: f64, p1: f64| ((1.0 - p1) / (1.0 - p0)).ln();

    let mut scores = Vec::with_capacity(cohort.visits.len());
    for visit in &cohort.visits {
        let mut logits = vec![prior_logit; t];
        let mut has = vec![false; cohort.num_codes()];
        for &c in &visit.codes {
            has[c] = true;
        }
        for j in 0..config.n_basic {
            let col = j % t;
            logits[col] += if has[j] {
                present(b0, b1)
            } else {
                absent(b0, b1)
            };
        }
        if scenario == Scenario::Full && visit.group == Group::Extra {
            for k in 0..config.n_extra {
                let j = config.n_basic + k;
                let col = j % t;
                logits[col] += if has[j] {
                    present(e0, e1)
                } else {
                    absent(e0, e1)
                };
            }
        }
        scores.push(logits.iter().map(|&l| sigmoid(l)).collect());
    }
    Ok(scores)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
