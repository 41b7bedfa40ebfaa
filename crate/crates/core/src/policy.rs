//! Parameterized stochastic policies: a fixed three-matrix feedforward
//! network with a softmax head over the 20 actions, plus safety-masked
//! renormalization.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::SafetyMask;
use crate::data_model::{StateVector, NUM_ACTIONS};
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 128;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type PolicyResult<T> = Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Weights for one policy network: D -> hidden -> hidden -> 20.
/// Matrices are row-major, `w[row * in_dim + col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<F> {
    pub input_dim: usize,
    pub hidden: usize,
    pub n_actions: usize,
    pub activation: Activation,
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    pub w2: Vec<F>,
    pub b2: Vec<F>,
    pub w3: Vec<F>,
    pub b3: Vec<F>,
}

impl<F: Scalar> PolicyParams<F> {
    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    /// Visit every parameter mutably, in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut F)) {
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.w3.iter_mut())
            .chain(self.b3.iter_mut())
        {
            f(v);
        }
    }

    pub fn params_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3);
        out.extend_from_slice(&self.b3);
        out
    }

    pub fn squared_norm(&self) -> F {
        let mut total = F::zero();
        let mut add = |v: &F| total += *v * *v;
        for x in self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .chain(&self.w3)
            .chain(&self.b3)
        {
            add(x);
        }
        total
    }
}

/// Glorot-uniform weight init with zero biases, deterministic in the seed.
pub fn init_params<F: Scalar>(seed: u64, input_dim: usize) -> PolicyParams<F> {
    init_params_sized(seed, input_dim, DEFAULT_HIDDEN)
}

pub fn init_params_sized<F: Scalar>(seed: u64, input_dim: usize, hidden: usize) -> PolicyParams<F> {
    assert!(input_dim >= 1 && hidden >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |fan_in: usize, fan_out: usize| -> Vec<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..fan_in * fan_out)
            .map(|_| F::of(rng.random_range(-bound..bound)))
            .collect()
    };
    PolicyParams {
        input_dim,
        hidden,
        n_actions: NUM_ACTIONS,
        activation: Activation::Relu,
        w1: layer(input_dim, hidden),
        b1: vec![F::zero(); hidden],
        w2: layer(hidden, hidden),
        b2: vec![F::zero(); hidden],
        w3: layer(hidden, NUM_ACTIONS),
        b3: vec![F::zero(); NUM_ACTIONS],
    }
}

/// Numerically stable softmax (max-logit subtraction), any length.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .cloned()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<F> = logits.iter().map(|z| (*z - max).exp()).collect();
    let total: F = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax restricted to the allowed actions: zero mass outside the mask,
/// renormalized over it. Identical to `apply_mask(softmax(z))` but computed
/// on the restricted support directly.
pub fn masked_softmax<F: Scalar>(logits: &[F], mask: &SafetyMask) -> Vec<F> {
    let mut max = F::neg_infinity();
    for (a, z) in logits.iter().enumerate() {
        if mask.contains(a) && *z > max {
            max = *z;
        }
    }
    let mut total = F::zero();
    let mut out = vec![F::zero(); logits.len()];
    for (a, z) in logits.iter().enumerate() {
        if mask.contains(a) {
            let e = (*z - max).exp();
            out[a] = e;
            total += e;
        }
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

/// Hidden activations and logits for one state; the training loop needs the
/// intermediates for backprop.
pub struct ForwardTrace<F> {
    pub h1: Vec<F>,
    pub h2: Vec<F>,
    pub logits: Vec<F>,
}

pub fn forward_trace<F: Scalar>(params: &PolicyParams<F>, features: &[F]) -> ForwardTrace<F> {
    debug_assert_eq!(features.len(), params.input_dim);
    let d = params.input_dim;
    let h = params.hidden;
    let mut h1 = params.b1.clone();
    for i in 0..h {
        let row = &params.w1[i * d..(i + 1) * d];
        let mut acc = h1[i];
        for j in 0..d {
            acc += row[j] * features[j];
        }
        h1[i] = relu(acc);
    }
    let mut h2 = params.b2.clone();
    for i in 0..h {
        let row = &params.w2[i * h..(i + 1) * h];
        let mut acc = h2[i];
        for j in 0..h {
            acc += row[j] * h1[j];
        }
        h2[i] = relu(acc);
    }
    let mut logits = params.b3.clone();
    for i in 0..params.n_actions {
        let row = &params.w3[i * h..(i + 1) * h];
        let mut acc = logits[i];
        for j in 0..h {
            acc += row[j] * h2[j];
        }
        logits[i] = acc;
    }
    ForwardTrace { h1, h2, logits }
}

/// Action distribution for a state.
pub fn forward<F: Scalar>(params: &PolicyParams<F>, state: &StateVector<F>) -> PolicyResult<Vec<F>> {
    if state.features.len() != params.input_dim {
        return Err(PolicyError::InvalidInput(format!(
            "state dim {} does not match policy input dim {}",
            state.features.len(),
            params.input_dim
        )));
    }
    if state.features.iter().any(|x| !x.is_finite()) {
        return Err(PolicyError::InvalidInput("non-finite state entry".into()));
    }
    let trace = forward_trace(params, &state.features);
    Ok(softmax(&trace.logits))
}

/// Safety-masked action distribution: `apply_mask(forward(..), mask)`.
pub fn masked_forward<F: Scalar>(
    params: &PolicyParams<F>,
    state: &StateVector<F>,
    mask: &SafetyMask,
) -> PolicyResult<Vec<F>> {
    if state.features.len() != params.input_dim {
        return Err(PolicyError::InvalidInput(format!(
            "state dim {} does not match policy input dim {}",
            state.features.len(),
            params.input_dim
        )));
    }
    if state.features.iter().any(|x| !x.is_finite()) {
        return Err(PolicyError::InvalidInput("non-finite state entry".into()));
    }
    let trace = forward_trace(params, &state.features);
    Ok(masked_softmax(&trace.logits, mask))
}

/// An ordered collection of K policies sharing one input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCollection<F> {
    pub policies: Vec<PolicyParams<F>>,
}

impl<F: Scalar> PolicyCollection<F> {
    pub fn new(policies: Vec<PolicyParams<F>>) -> PolicyResult<Self> {
        if policies.is_empty() {
            return Err(PolicyError::InvalidInput("empty policy collection".into()));
        }
        let d = policies[0].input_dim;
        if policies.iter().any(|p| p.input_dim != d) {
            return Err(PolicyError::InvalidInput(
                "policies must share one input dimension".into(),
            ));
        }
        Ok(PolicyCollection { policies })
    }

    /// K policies with distinct seed-derived initializations.
    pub fn init(seed: u64, input_dim: usize, k: usize) -> Self {
        let policies = (0..k)
            .map(|i| init_params(seed.wrapping_add(i as u64).wrapping_mul(0x9e3779b97f4a7c15), input_dim))
            .collect();
        PolicyCollection { policies }
    }

    pub fn k(&self) -> usize {
        self.policies.len()
    }
}

/// Checkpoint: collection plus the facts evaluation needs about how it was
/// trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionCheckpoint<F> {
    pub version: u32,
    pub seed: u64,
    pub use_safety: bool,
    pub epsilon: f64,
    pub epochs_done: usize,
    pub collection: PolicyCollection<F>,
}

pub fn save_checkpoint<F: Scalar>(ckpt: &CollectionCheckpoint<F>, path: &Path) -> PolicyResult<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(BufWriter::new(file), ckpt)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> PolicyResult<CollectionCheckpoint<F>> {
    let file = std::fs::File::open(path)?;
    let ckpt: CollectionCheckpoint<F> = serde_json::from_reader(BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(PolicyError::InvalidInput(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::apply_mask;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a: PolicyParams<f64> = init_params(42, 6);
        let b: PolicyParams<f64> = init_params(42, 6);
        assert_eq!(a, b);
        let c: PolicyParams<f64> = init_params(43, 6);
        assert_ne!(a, c);
        assert!(a.b1.iter().all(|x| *x == 0.0));
        assert!(a.b2.iter().all(|x| *x == 0.0));
        assert!(a.b3.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_params_give_uniform() {
        let mut p: PolicyParams<f64> = init_params(1, 4);
        p.for_each_param_mut(|v| *v = 0.0);
        let probs = forward(&p, &StateVector::new(vec![1.0, -2.0, 0.5, 3.0])).unwrap();
        for pr in &probs {
            assert!((pr - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_arithmetic() {
        let probs = softmax(&[2.0f64.ln(), 0.0]);
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn forward_sums_to_one_and_shift_invariant() {
        let p: PolicyParams<f64> = init_params(7, 5);
        let state = StateVector::new(vec![0.3, -1.2, 0.9, 2.2, -0.4]);
        let probs = forward(&p, &state).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        let mut shifted = p.clone();
        for b in &mut shifted.b3 {
            *b += 13.5;
        }
        let probs2 = forward(&shifted, &state).unwrap();
        for (a, b) in probs.iter().zip(&probs2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p: PolicyParams<f64> = init_params(7, 3);
        assert!(forward(&p, &StateVector::new(vec![0.0, 1.0])).is_err());
        assert!(forward(&p, &StateVector::new(vec![0.0, f64::NAN, 1.0])).is_err());
    }

    #[test]
    fn masked_forward_matches_apply_mask_route() {
        let p: PolicyParams<f64> = init_params(11, 4);
        let state = StateVector::new(vec![1.0, 0.0, -1.0, 0.5]);
        let mask = SafetyMask::from_actions(&[1, 4, 9, 13], 0.03);
        let direct = masked_forward(&p, &state, &mask).unwrap();
        let via_apply = apply_mask(&forward(&p, &state).unwrap(), &mask);
        for (a, b) in direct.iter().zip(&via_apply) {
            assert!((a - b).abs() < 1e-12);
        }
        for a in 0..NUM_ACTIONS {
            if !mask.contains(a) {
                assert_eq!(direct[a], 0.0);
            }
        }
    }

    #[test]
    fn uniform_policy_masked_to_fourteen_actions() {
        let mut p: PolicyParams<f64> = init_params(1, 4);
        p.for_each_param_mut(|v| *v = 0.0);
        let mask = SafetyMask::from_actions(&(0..14).collect::<Vec<_>>(), 0.03);
        let probs = masked_forward(&p, &StateVector::new(vec![1.0, 2.0, 3.0, 4.0]), &mask).unwrap();
        for a in 0..14 {
            assert!((probs[a] - 1.0 / 14.0).abs() < 1e-12);
        }
        for a in 14..NUM_ACTIONS {
            assert_eq!(probs[a], 0.0);
        }
    }

    #[test]
    fn singleton_mask_is_deterministic_choice() {
        let p: PolicyParams<f64> = init_params(3, 2);
        let mask = SafetyMask::from_actions(&[17], 0.05);
        let probs = masked_forward(&p, &StateVector::new(vec![0.1, 0.2]), &mask).unwrap();
        assert_eq!(probs[17], 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ckpt = CollectionCheckpoint {
            version: CHECKPOINT_VERSION,
            seed: 99,
            use_safety: true,
            epsilon: 0.03,
            epochs_done: 5,
            collection: PolicyCollection::<f64>::init(99, 6, 2),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(ckpt, loaded);
    }
}
