//! Off-policy evaluation: per-decision importance weights, the consistent
//! weighted per-decision importance sampling (CWPDIS) value estimator, Kish
//! effective sample size, ESS pruning, and the per-policy metric suite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::apply_mask;
use crate::data_model::NUM_ACTIONS;
use crate::policy::{forward_trace, masked_softmax, softmax, PolicyCollection};
use crate::scalar::Scalar;
use crate::training::{symkl_clamped, FlatData, PROB_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub gamma: f64,
    pub ess_threshold: f64,
    /// A policy "allows" an unseen action when it puts more than this much
    /// probability on an action outside the safety mask.
    pub unseen_prob_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gamma: 0.99,
            ess_threshold: 50.0,
            unseen_prob_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpeResult<F> {
    /// CWPDIS value estimate.
    pub value: F,
    /// Effective sample size of the final-step weights.
    pub ess: F,
    /// Sum of importance weights over alive trajectories, per timestep.
    pub per_t_weight_sums: Vec<F>,
    /// ESS at or above the pruning threshold.
    pub kept: bool,
    /// (state, action) pairs where the policy put non-negligible probability
    /// on an action outside the safety mask.
    pub unseen_action_count: usize,
    /// Mean cross-entropy against the actions the behavior policy took.
    pub ce_vs_behavior: F,
    /// Mean symmetric KL against the masked behavior action distribution.
    pub symkl_vs_behavior: F,
    /// Behavior probabilities of a taken action that had to be clamped.
    pub clamped_behavior_probs: usize,
}

/// Running product of target-over-behavior probability ratios along one
/// trajectory. Inputs are per-timestep probabilities of the taken action.
/// Zero behavior probabilities clamp to 1e-8; the count of clamps is
/// returned for diagnostics.
pub fn importance_weights<F: Scalar>(policy_taken: &[F], behavior_taken: &[F]) -> (Vec<F>, usize) {
    debug_assert_eq!(policy_taken.len(), behavior_taken.len());
    let floor = F::of(PROB_CLAMP);
    let mut clamped = 0usize;
    let mut rho = F::one();
    let mut out = Vec::with_capacity(policy_taken.len());
    for (p, b) in policy_taken.iter().zip(behavior_taken) {
        let b = if *b > floor {
            *b
        } else {
            clamped += 1;
            floor
        };
        rho = rho * (*p / b);
        out.push(rho);
    }
    (out, clamped)
}

/// Kish effective sample size of the final-step weights:
/// `(sum w)^2 / sum w^2`. All-zero weights give 0.
pub fn ess<F: Scalar>(final_weights: &[F]) -> F {
    let sum: F = final_weights.iter().cloned().sum();
    let sum_sq: F = final_weights.iter().map(|w| *w * *w).sum();
    if sum_sq <= F::zero() {
        return F::zero();
    }
    sum * sum / sum_sq
}

/// CWPDIS over variable-length trajectories: per-timestep self-normalized
/// weighted rewards, discounted by `gamma^t` (t is 1-based), summing only
/// over trajectories still alive at t. Timesteps whose weight sum is zero
/// contribute nothing.
///
/// `rewards[n][i]` and `weights[n][i]` are trajectory n's reward and running
/// importance weight at its i-th step.
pub fn cwpdis_value<F: Scalar>(rewards: &[Vec<F>], weights: &[Vec<F>], gamma: f64) -> (F, Vec<F>) {
    let t_max = rewards.iter().map(|r| r.len()).max().unwrap_or(0);
    let g = F::of(gamma);
    let mut value = F::zero();
    let mut per_t_sums = Vec::with_capacity(t_max);
    let mut discount = F::one();
    for t in 0..t_max {
        discount *= g; // gamma^(t+1), 1-based exponent
        let mut num = F::zero();
        let mut den = F::zero();
        for (r, w) in rewards.iter().zip(weights) {
            if t < r.len() {
                num += r[t] * w[t];
                den += w[t];
            }
        }
        per_t_sums.push(den);
        if den > F::zero() {
            value += discount * num / den;
        }
    }
    (value, per_t_sums)
}

/// Mean discounted return actually observed in the dataset: an unbiased
/// estimate of the behavior policy's value.
pub fn empirical_behavior_value<F: Scalar>(data: &FlatData<F>, gamma: f64) -> F {
    if data.traj_ranges.is_empty() {
        return F::zero();
    }
    let g = F::of(gamma);
    let mut total = F::zero();
    for &(a, b) in &data.traj_ranges {
        let mut discount = F::one();
        for i in a..b {
            discount *= g;
            total += discount * data.rewards[i];
        }
    }
    total / F::of(data.traj_ranges.len() as f64)
}

/// Evaluate one policy given its emitted action distribution at every
/// transition (already masked if the policy runs masked).
pub fn evaluate_probs<F: Scalar>(
    policy_probs: &[Vec<F>],
    data: &FlatData<F>,
    config: &EvalConfig,
) -> OpeResult<F> {
    assert_eq!(policy_probs.len(), data.n);
    let mut rewards: Vec<Vec<F>> = Vec::with_capacity(data.traj_ranges.len());
    let mut weights: Vec<Vec<F>> = Vec::with_capacity(data.traj_ranges.len());
    let mut clamped = 0usize;
    for &(a, b) in &data.traj_ranges {
        let pol_taken: Vec<F> = (a..b).map(|i| policy_probs[i][data.actions[i]]).collect();
        let beh_taken: Vec<F> = (a..b).map(|i| data.beh_row(i)[data.actions[i]]).collect();
        let (rho, c) = importance_weights(&pol_taken, &beh_taken);
        clamped += c;
        weights.push(rho);
        rewards.push(data.rewards[a..b].to_vec());
    }
    let (value, per_t_weight_sums) = cwpdis_value(&rewards, &weights, config.gamma);
    let finals: Vec<F> = weights.iter().map(|w| *w.last().unwrap()).collect();
    let ess_value = ess(&finals);

    let floor = F::of(PROB_CLAMP);
    let mut ce = F::zero();
    let mut symkl = F::zero();
    let mut unseen = 0usize;
    let thr = F::of(config.unseen_prob_threshold);
    for i in 0..data.n {
        let probs = &policy_probs[i];
        let mask = &data.masks[i];
        let pa = probs[data.actions[i]];
        ce += -(if pa > floor { pa } else { floor }).ln();
        let masked_beh = apply_mask(data.beh_row(i), mask);
        let masked_pol = apply_mask(probs, mask);
        symkl += symkl_clamped(&masked_pol, &masked_beh, mask);
        for a in 0..NUM_ACTIONS {
            if !mask.contains(a) && probs[a] > thr {
                unseen += 1;
            }
        }
    }
    let inv_n = F::one() / F::of(data.n as f64);

    OpeResult {
        value,
        ess: ess_value,
        per_t_weight_sums,
        kept: ess_value.to64() >= config.ess_threshold,
        unseen_action_count: unseen,
        ce_vs_behavior: ce * inv_n,
        symkl_vs_behavior: symkl * inv_n,
        clamped_behavior_probs: clamped,
    }
}

/// Full evaluation of a trained collection on a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectionEval<F> {
    pub results: Vec<OpeResult<F>>,
    /// Mean pairwise symmetric KL between kept agents, `None` on the
    /// diagonal and for non-kept agents.
    pub pairwise_symkl: Vec<Vec<Option<f64>>>,
}

impl<F: Scalar> CollectionEval<F> {
    /// Mean pairwise symKL of one kept agent against the other kept agents.
    pub fn mean_pairwise(&self, i: usize) -> Option<f64> {
        let row = &self.pairwise_symkl[i];
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Per-transition action distributions for every policy of a collection.
/// `masked` selects the distribution the policy actually emits when deployed
/// with the safety constraint.
pub fn collection_probs<F: Scalar>(
    collection: &PolicyCollection<F>,
    data: &FlatData<F>,
    masked: bool,
) -> Vec<Vec<Vec<F>>> {
    collection
        .policies
        .iter()
        .map(|params| {
            (0..data.n)
                .into_par_iter()
                .map(|i| {
                    let trace = forward_trace(params, data.state(i));
                    if masked {
                        masked_softmax(&trace.logits, &data.masks[i])
                    } else {
                        softmax(&trace.logits)
                    }
                })
                .collect()
        })
        .collect()
}

/// CWPDIS value, ESS, pruning flag, behavior-similarity metrics, pairwise
/// diversity between kept agents, and the unseen-action count per policy.
pub fn evaluate_collection<F: Scalar>(
    collection: &PolicyCollection<F>,
    data: &FlatData<F>,
    config: &EvalConfig,
    use_safety: bool,
) -> CollectionEval<F> {
    let all_probs = collection_probs(collection, data, use_safety);
    let results: Vec<OpeResult<F>> = all_probs
        .iter()
        .map(|probs| evaluate_probs(probs, data, config))
        .collect();

    let k = collection.k();
    let mut pairwise = vec![vec![None; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            if !(results[i].kept && results[j].kept) {
                continue;
            }
            let mut sum = 0.0f64;
            for s in 0..data.n {
                let mask = &data.masks[s];
                let pi = apply_mask(&all_probs[i][s], mask);
                let pj = apply_mask(&all_probs[j][s], mask);
                sum += symkl_clamped(&pi, &pj, mask).to64();
            }
            let mean = sum / data.n as f64;
            pairwise[i][j] = Some(mean);
            pairwise[j][i] = Some(mean);
        }
    }

    CollectionEval {
        results,
        pairwise_symkl: pairwise,
    }
}

/// Evaluation report mirroring the metric-table layout, one row per policy.
pub fn report_csv<F: Scalar>(eval: &CollectionEval<F>) -> String {
    let mut out = String::from(
        "policy,CWPDIS Value,CE w/ Beh. Actions,SymKL w/ Beh. Action Probabilities,ESS,SymKL btw pairs,# Unseen Actions,Kept\n",
    );
    for (i, r) in eval.results.iter().enumerate() {
        let pair = eval
            .mean_pairwise(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i,
            r.value,
            r.ce_vs_behavior,
            r.symkl_vs_behavior,
            r.ess,
            pair,
            r.unseen_action_count,
            r.kept
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{BehaviorAnnotations, SafetyMask};
    use crate::data_model::{
        Dataset, FeatureKind, FeatureSpec, Split, StateVector, Trajectory, Transition,
    };

    fn flat(trajs: Vec<Vec<(usize, f64)>>, beh: Vec<Vec<f64>>) -> FlatData<f64> {
        let schema = vec![FeatureSpec {
            name: "x".into(),
            unit: String::new(),
            kind: FeatureKind::Continuous,
        }];
        let mut trajectories = Vec::new();
        for (i, steps) in trajs.iter().enumerate() {
            trajectories.push(Trajectory {
                stay_id: format!("s{i}"),
                transitions: steps
                    .iter()
                    .enumerate()
                    .map(|(t, &(action, reward))| Transition {
                        t: t as u32 + 1,
                        state: StateVector::new(vec![i as f64 + t as f64 * 0.1]),
                        action,
                        reward,
                    })
                    .collect(),
            });
        }
        let ds = Dataset::new(trajectories, schema, Split::Test);
        let n = ds.transition_count();
        let masks = vec![SafetyMask::all_allowed(); n];
        FlatData::new(&ds, &BehaviorAnnotations { probs: beh, masks }, true)
    }

    fn uniform_rows(n: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / NUM_ACTIONS as f64; NUM_ACTIONS]; n]
    }

    #[test]
    fn weights_identity_when_policy_equals_behavior() {
        let (rho, clamped) = importance_weights(&[0.3, 0.5, 0.2], &[0.3, 0.5, 0.2]);
        assert_eq!(rho, vec![1.0, 1.0, 1.0]);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn weights_zero_policy_prob_kills_tail() {
        let (rho, _) = importance_weights(&[0.5, 0.0, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(rho[0], 1.0);
        assert_eq!(rho[1], 0.0);
        assert_eq!(rho[2], 0.0);
    }

    #[test]
    fn weights_single_step_ratio() {
        let (rho, _) = importance_weights(&[0.6f64], &[0.3]);
        assert!((rho[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weights_clamp_zero_behavior() {
        let (rho, clamped) = importance_weights(&[0.5], &[0.0]);
        assert_eq!(clamped, 1);
        assert!(rho[0] > 1.0e6);
    }

    #[test]
    fn ess_exact_cases() {
        let equal = vec![1.0f64; 100];
        assert_eq!(ess(&equal), 100.0);
        let scaled = vec![0.37f64; 100];
        assert!((ess(&scaled) - 100.0).abs() < 1e-9);
        let w = [2.0f64, 1.0, 1.0];
        assert!((ess(&w) - 16.0 / 6.0).abs() < 1e-12);
        let mut single = vec![0.0f64; 50];
        single[7] = 1.0;
        assert_eq!(ess(&single), 1.0);
        assert_eq!(ess(&vec![0.0f64; 3]), 0.0);
    }

    #[test]
    fn cwpdis_weights_cancel_on_equal_lengths() {
        // all rewards 1, T=3, gamma=0.5: 0.5 + 0.25 + 0.125
        let rewards = vec![vec![1.0f64; 3]; 4];
        let weights = vec![vec![1.0f64; 3]; 4];
        let (v, per_t) = cwpdis_value(&rewards, &weights, 0.5);
        assert!((v - 0.875).abs() < 1e-15);
        assert_eq!(per_t, vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn cwpdis_single_trajectory_self_normalizes() {
        let rewards = vec![vec![0.2f64, 0.9, 0.4]];
        let weights = vec![vec![3.0f64, 0.5, 7.0]];
        let gamma = 0.9;
        let (v, _) = cwpdis_value(&rewards, &weights, gamma);
        let expected = 0.9 * 0.2 + 0.81 * 0.9 + 0.729 * 0.4;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn cwpdis_alive_at_t_convention() {
        // second trajectory ends at t=1; its weight must not appear at t=2
        let rewards = vec![vec![1.0f64, 1.0], vec![0.0]];
        let weights = vec![vec![1.0f64, 1.0], vec![1.0]];
        let (v, per_t) = cwpdis_value(&rewards, &weights, 1.0);
        assert_eq!(per_t, vec![2.0, 1.0]);
        assert!((v - (0.5 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cwpdis_scales_linearly_in_rewards() {
        let rewards = vec![vec![0.3, 0.6], vec![0.1, 0.9, 0.5]];
        let weights = vec![vec![1.3, 0.4], vec![0.9, 2.0, 1.1]];
        let (v1, _) = cwpdis_value(&rewards, &weights, 0.95);
        let scaled: Vec<Vec<f64>> = rewards
            .iter()
            .map(|r| r.iter().map(|x| x * 3.5).collect())
            .collect();
        let (v2, _) = cwpdis_value(&scaled, &weights, 0.95);
        assert!((v2 - 3.5 * v1).abs() < 1e-12);
    }

    #[test]
    fn empirical_value_closed_forms() {
        // all rewards 1, T=72, gamma=0.99: geometric sum 0.99(1-0.99^72)/0.01
        let trajs: Vec<Vec<(usize, f64)>> = vec![(0..72).map(|_| (0usize, 1.0)).collect(); 3];
        let n = 72 * 3;
        let data = flat(trajs, uniform_rows(n));
        let v = empirical_behavior_value(&data, 0.99);
        let expected = 0.99 * (1.0 - 0.99f64.powi(72)) / 0.01;
        assert!((v - expected).abs() < 1e-9);
        assert!((expected - 50.9859).abs() < 0.001);

        // single transition
        let data = flat(vec![vec![(0, 1.0)]], uniform_rows(1));
        assert!((empirical_behavior_value(&data, 0.99) - 0.99).abs() < 1e-15);

        // all-zero rewards
        let data = flat(vec![vec![(0, 0.0), (1, 0.0)]], uniform_rows(2));
        assert_eq!(empirical_behavior_value(&data, 0.99), 0.0);
    }

    #[test]
    fn policy_equals_behavior_recovers_empirical_value() {
        let trajs: Vec<Vec<(usize, f64)>> = (0..5)
            .map(|i| (0..4).map(|t| ((i + t) % NUM_ACTIONS, 0.1 * (t as f64 + 1.0))).collect())
            .collect();
        let n = 20;
        let mut beh = Vec::new();
        for i in 0..n {
            let mut row = vec![0.01; NUM_ACTIONS];
            row[i % NUM_ACTIONS] += 1.0 - 0.01 * NUM_ACTIONS as f64;
            beh.push(row);
        }
        let data = flat(trajs, beh.clone());
        let result = evaluate_probs(&beh, &data, &EvalConfig::default());
        let empirical = empirical_behavior_value(&data, 0.99);
        assert!((result.value - empirical).abs() < 1e-9);
        assert!((result.ess - 5.0).abs() < 1e-9);
        assert!(result.unseen_action_count == 0);
        assert!(result.symkl_vs_behavior.abs() < 1e-12);
    }

    #[test]
    fn kept_flag_threshold() {
        let cfg = EvalConfig::default();
        let trajs: Vec<Vec<(usize, f64)>> = (0..60).map(|_| vec![(0usize, 1.0)]).collect();
        let beh = uniform_rows(60);
        let data = flat(trajs, beh.clone());
        // identical weights across 60 trajectories: ESS = 60 >= 50
        let r = evaluate_probs(&beh, &data, &cfg);
        assert!(r.kept);
        // concentrate the policy on one trajectory's action only: here all
        // trajectories share action 0, so instead skew weights via behavior
        let mut skewed = beh.clone();
        skewed[0][0] = 1.0; // policy mass 1.0 on the taken action only for traj 0
        for row in skewed.iter_mut().skip(1) {
            for v in row.iter_mut() {
                *v = 1e-9;
            }
            row[0] = 1e-7;
        }
        let r = evaluate_probs(&skewed, &data, &cfg);
        assert!(r.ess < 50.0);
        assert!(!r.kept);
    }

    #[test]
    fn unseen_action_counting() {
        let trajs = vec![vec![(0usize, 1.0)], vec![(1usize, 0.5)]];
        let beh = uniform_rows(2);
        let mut data = flat(trajs, beh);
        data.masks = vec![
            SafetyMask::from_actions(&[0, 1], 0.03),
            SafetyMask::from_actions(&[0, 1, 2], 0.03),
        ];
        // policy leaks 0.05 onto masked action 5 at the first state only
        let mut probs = vec![vec![0.0; NUM_ACTIONS]; 2];
        probs[0][0] = 0.9;
        probs[0][5] = 0.05;
        probs[0][1] = 0.05;
        probs[1][0] = 0.5;
        probs[1][1] = 0.5;
        let r = evaluate_probs(&probs, &data, &EvalConfig::default());
        assert_eq!(r.unseen_action_count, 1);
    }

    #[test]
    fn report_csv_shape() {
        let trajs: Vec<Vec<(usize, f64)>> = (0..3).map(|_| vec![(0usize, 1.0)]).collect();
        let beh = uniform_rows(3);
        let data = flat(trajs, beh);
        let collection = PolicyCollection::<f64>::init(5, 1, 2);
        let eval = evaluate_collection(&collection, &data, &EvalConfig::default(), true);
        let csv = report_csv(&eval);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("policy,CWPDIS Value,"));
        assert!(lines[0].contains("# Unseen Actions"));
    }
}
