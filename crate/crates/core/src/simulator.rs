//! Synthetic hypotension-like MDP with known dynamics and a latent
//! mixture-of-styles behavior policy. Provides datasets with ground truth
//! and a Monte-Carlo value oracle for verifying the estimators.
//!
//! State layout: feature 0 is the MAP-like coordinate (mmHg), feature 1 a
//! urine-output-like coordinate (mL/hour), feature 2 a lactate-like
//! coordinate, the rest slow-moving context coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{
    action_components, compute_reward, Dataset, FeatureKind, FeatureSpec, RewardConfig, Schema,
    Split, StateVector, Trajectory, Transition, NUM_ACTIONS,
};
use crate::scalar::Scalar;

pub const NUM_STYLES: usize = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// State dimension, at least 4.
    pub state_dim: usize,
    pub horizon: usize,
    /// MAP drifts toward this baseline when untreated.
    pub map_base: f64,
    pub map_pull: f64,
    pub noise_scale: f64,
    /// Transient MAP boost per action.
    pub action_map_effects: Vec<f64>,
    /// Scale on the per-style base preferences (bigger = more distinct styles).
    pub style_sep: f64,
    /// How strongly the context coordinates tilt the style mixture weights.
    pub style_weight_scale: f64,
    /// Collapse the behavior mixture onto one style (0..3).
    pub single_style: Option<usize>,
    pub reward: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        // fluid raises MAP transiently, vasopressors dose-dependently with
        // saturation at the top bins
        let fluid_effect = [0.0, 3.0, 5.0, 6.0];
        let vaso_effect = [0.0, 4.0, 7.0, 9.0, 10.0];
        let mut action_map_effects = vec![0.0; NUM_ACTIONS];
        for (a, e) in action_map_effects.iter_mut().enumerate() {
            let (v, f) = action_components(a).unwrap();
            *e = fluid_effect[f] + vaso_effect[v];
        }
        SimConfig {
            state_dim: 10,
            horizon: 24,
            map_base: 55.0,
            map_pull: 0.25,
            noise_scale: 3.0,
            action_map_effects,
            style_sep: 1.5,
            // strong context dependence: most states have one clearly
            // dominant style, so the logged behavior is locally
            // near-unimodal while staying multimodal across the population
            style_weight_scale: 3.0,
            single_style: None,
            reward: RewardConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.state_dim < 4 {
            return Err(SimError::InvalidConfig("state_dim must be at least 4".into()));
        }
        if self.horizon == 0 {
            return Err(SimError::InvalidConfig("horizon must be positive".into()));
        }
        if self.action_map_effects.len() != NUM_ACTIONS {
            return Err(SimError::InvalidConfig(format!(
                "need {NUM_ACTIONS} action effects, got {}",
                self.action_map_effects.len()
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(SimError::InvalidConfig("noise_scale must be nonnegative".into()));
        }
        if let Some(s) = self.single_style {
            if s >= NUM_STYLES {
                return Err(SimError::InvalidConfig(format!(
                    "single_style {s} out of range 0..{NUM_STYLES}"
                )));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut schema = vec![
            FeatureSpec {
                name: "map".into(),
                unit: "mmHg".into(),
                kind: FeatureKind::Continuous,
            },
            FeatureSpec {
                name: "urine".into(),
                unit: "mL/hour".into(),
                kind: FeatureKind::Continuous,
            },
            FeatureSpec {
                name: "lactate".into(),
                unit: "mmol/L".into(),
                kind: FeatureKind::Continuous,
            },
        ];
        for i in 3..self.state_dim {
            schema.push(FeatureSpec {
                name: format!("x{i}"),
                unit: String::new(),
                kind: FeatureKind::Continuous,
            });
        }
        schema
    }
}

/// Closed-form policies over the simulator's state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GroundTruthPolicy {
    /// The behavior mixture itself.
    Mixture,
    /// One pure style (0 = fluid-heavy, 1 = vaso-heavy, 2 = mixed).
    Style(usize),
    /// `alpha * mixture + (1 - alpha) * style`: a near-behavior target
    /// useful for high-ESS off-policy checks.
    Blend { alpha: f64, style: usize },
}

fn severity(map: f64) -> f64 {
    ((65.0 - map) / 20.0).clamp(0.0, 1.0)
}

/// Per-style action preferences: a constant base plus a severity-scaled
/// escalation toward stronger doses.
fn style_logits(config: &SimConfig, style: usize, sev: f64) -> [f64; NUM_ACTIONS] {
    let mut logits = [0.0; NUM_ACTIONS];
    for (a, logit) in logits.iter_mut().enumerate() {
        let (v, f) = action_components(a).unwrap();
        let (vb, fb) = (v as f64, f as f64);
        let base = match style {
            // fluid-heavy: escalating boluses, avoids vasopressors
            0 => 1.2 * fb - 1.5 * vb,
            // vaso-heavy: escalating vasopressors, avoids boluses
            1 => 1.1 * vb - 1.5 * fb,
            // mixed: moderate doses of both
            _ => -0.8 * ((fb - 1.5).abs() + (vb - 1.5).abs()),
        };
        let urgency = match style {
            0 => 0.8 * fb,
            1 => 0.7 * vb,
            _ => 0.4 * (fb + vb),
        };
        *logit = config.style_sep * base + sev * urgency;
    }
    logits
}

fn softmax20(logits: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_ACTIONS];
    let mut total = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Exact action distribution of one style at a state.
pub fn style_probs(config: &SimConfig, style: usize, state: &[f64]) -> [f64; NUM_ACTIONS] {
    softmax20(&style_logits(config, style, severity(state[0])))
}

/// Mixture weights over the three styles, tilted by the context coordinates.
pub fn style_weights(config: &SimConfig, state: &[f64]) -> [f64; NUM_STYLES] {
    if let Some(s) = config.single_style {
        let mut w = [0.0; NUM_STYLES];
        w[s] = 1.0;
        return w;
    }
    let c1 = state.get(3).copied().unwrap_or(0.0);
    let c2 = state.get(4).copied().unwrap_or(0.0);
    let s = config.style_weight_scale;
    let logits = [s * c1, s * c2, -0.5 * s * (c1 + c2)];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = [0.0; NUM_STYLES];
    let mut total = 0.0;
    for (o, z) in w.iter_mut().zip(&logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in &mut w {
        *o /= total;
    }
    w
}

/// Exact behavior mixture probabilities at a state.
pub fn true_behavior_probs(config: &SimConfig, state: &[f64]) -> [f64; NUM_ACTIONS] {
    let weights = style_weights(config, state);
    let mut out = [0.0; NUM_ACTIONS];
    for (k, w) in weights.iter().enumerate() {
        let probs = style_probs(config, k, state);
        for (o, p) in out.iter_mut().zip(&probs) {
            *o += w * p;
        }
    }
    out
}

impl GroundTruthPolicy {
    pub fn action_probs(&self, config: &SimConfig, state: &[f64]) -> [f64; NUM_ACTIONS] {
        match *self {
            GroundTruthPolicy::Mixture => true_behavior_probs(config, state),
            GroundTruthPolicy::Style(k) => style_probs(config, k, state),
            GroundTruthPolicy::Blend { alpha, style } => {
                let mix = true_behavior_probs(config, state);
                let st = style_probs(config, style, state);
                let mut out = [0.0; NUM_ACTIONS];
                for a in 0..NUM_ACTIONS {
                    out[a] = alpha * mix[a] + (1.0 - alpha) * st[a];
                }
                out
            }
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64; NUM_ACTIONS]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    NUM_ACTIONS - 1
}

fn initial_state(config: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut state = Vec::with_capacity(config.state_dim);
    state.push((58.0 + 8.0 * standard_normal(rng)).clamp(30.0, 90.0));
    state.push((40.0 + 25.0 * standard_normal(rng)).clamp(0.0, 200.0));
    state.push((2.5 + 1.2 * standard_normal(rng)).clamp(0.1, 10.0));
    for _ in 3..config.state_dim {
        state.push(standard_normal(rng));
    }
    state
}

fn step_state(config: &SimConfig, state: &[f64], action: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ns = config.noise_scale;
    let map = state[0];
    let mut next = Vec::with_capacity(state.len());
    let new_map = map
        + config.map_pull * (config.map_base - map)
        + config.action_map_effects[action]
        + ns * standard_normal(rng);
    next.push(new_map.clamp(25.0, 110.0));
    next.push((state[1] + 0.6 * (map - 60.0) + 1.5 * ns * standard_normal(rng)).clamp(0.0, 300.0));
    next.push((state[2] + 0.02 * (60.0 - map) + 0.05 * ns * standard_normal(rng)).clamp(0.1, 12.0));
    for x in &state[3..] {
        next.push(x + 0.02 * ns * standard_normal(rng));
    }
    next
}

fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Draw trajectories from the dynamics under a policy. Deterministic for a
/// fixed seed; each trajectory has its own derived RNG stream.
pub fn simulate_dataset_with_policy<F: Scalar>(
    config: &SimConfig,
    policy: &GroundTruthPolicy,
    n_trajectories: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset<F>, SimError> {
    config.validate()?;
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for idx in 0..n_trajectories {
        let mut rng = rollout_rng(seed, idx as u64);
        let mut state = initial_state(config, &mut rng);
        let mut transitions = Vec::with_capacity(config.horizon);
        for t in 1..=config.horizon {
            let probs = policy.action_probs(config, &state);
            let action = sample_categorical(&mut rng, &probs);
            let reward = compute_reward::<f64>(state[0], Some(state[1]), &config.reward);
            transitions.push(Transition {
                t: t as u32,
                state: StateVector::new(state.iter().map(|x| F::of(*x)).collect()),
                action,
                reward: F::of(reward),
            });
            state = step_state(config, &state, action, &mut rng);
        }
        trajectories.push(Trajectory {
            stay_id: format!("sim-{idx}"),
            transitions,
        });
    }
    Ok(Dataset::new(trajectories, config.schema(), split))
}

/// Behavior-mixture dataset, the standard testbed input.
pub fn simulate_dataset<F: Scalar>(
    config: &SimConfig,
    n_trajectories: usize,
    seed: u64,
) -> Result<Dataset<F>, SimError> {
    simulate_dataset_with_policy(config, &GroundTruthPolicy::Mixture, n_trajectories, seed, Split::Train)
}

/// Monte-Carlo estimate of a policy's value under the true dynamics:
/// mean and standard error of the discounted return over `n_rollouts`
/// on-policy rollouts.
pub fn mc_value(
    config: &SimConfig,
    policy: &GroundTruthPolicy,
    n_rollouts: usize,
    gamma: f64,
    seed: u64,
) -> Result<(f64, f64), SimError> {
    config.validate()?;
    if n_rollouts == 0 {
        return Err(SimError::InvalidConfig("n_rollouts must be >= 1".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for idx in 0..n_rollouts {
        let mut rng = rollout_rng(seed, idx as u64);
        let mut state = initial_state(config, &mut rng);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..config.horizon {
            discount *= gamma;
            let probs = policy.action_probs(config, &state);
            let action = sample_categorical(&mut rng, &probs);
            ret += discount * compute_reward::<f64>(state[0], Some(state[1]), &config.reward);
            state = step_state(config, &state, action, &mut rng);
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = n_rollouts as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let stderr = if n_rollouts > 1 {
        (var / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}
