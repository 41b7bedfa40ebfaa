//! Joint optimization of the policy collection: quality to the estimated
//! behavior policy, pairwise symmetric-KL diversity between collection
//! members, safety via per-state masked softmax, L2 regularization, and Adam
//! on hand-derived reverse-mode gradients.
//!
//! The optimized objective is `quality - lambda * diversity + l2`, minimized:
//! diversity is rewarded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{apply_mask, BehaviorAnnotations, SafetyMask};
use crate::data_model::{Dataset, NUM_ACTIONS};
use crate::policy::{forward_trace, masked_softmax, PolicyCollection, PolicyParams};
use crate::scalar::Scalar;

/// Probabilities are clamped at this floor inside every log term.
pub const PROB_CLAMP: f64 = 1e-8;

/// States per parallel work unit. Fixed so that multi-threaded gradient
/// reductions visit chunks in a fixed order and stay bit-reproducible for
/// any thread count.
const CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient encountered ({0}); aborting epoch")]
    NonFiniteGradient(String),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityKind {
    Ce,
    SymKl,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Diversity weight.
    pub lambda: f64,
    /// Safety threshold on behavior probability.
    pub epsilon: f64,
    pub quality_kind: QualityKind,
    pub use_safety: bool,
    pub use_diversity: bool,
    pub learning_rate: f64,
    /// Trajectories per optimization step.
    pub batch_size: usize,
    pub l2_coeff: f64,
    /// Number of jointly trained policies.
    pub k_policies: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.4,
            epsilon: 0.03,
            quality_kind: QualityKind::SymKl,
            use_safety: true,
            use_diversity: true,
            learning_rate: 0.001,
            batch_size: 100,
            l2_coeff: 1e-6,
            k_policies: 4,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if self.lambda < 0.0 {
            return Err(TrainError::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(TrainError::InvalidConfig("epsilon must be in (0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.k_policies == 0 {
            return Err(TrainError::InvalidConfig("need at least one policy".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F> {
    pub quality: F,
    pub diversity: F,
    pub l2: F,
    pub total: F,
}

/// Dataset flattened into training-ready arrays, one entry per transition,
/// in dataset order.
#[derive(Debug, Clone)]
pub struct FlatData<F> {
    pub dim: usize,
    pub n: usize,
    /// `n x dim`, row-major.
    pub states: Vec<F>,
    pub actions: Vec<usize>,
    pub rewards: Vec<F>,
    /// Behavior action distributions, `n x NUM_ACTIONS`.
    pub beh_probs: Vec<F>,
    pub masks: Vec<SafetyMask>,
    /// Transition index ranges per trajectory.
    pub traj_ranges: Vec<(usize, usize)>,
}

impl<F: Scalar> FlatData<F> {
    /// Like [`FlatData::new`] but with features standardized to zero mean
    /// and unit scale, which keeps the freshly initialized networks near
    /// uniform. Training and evaluation must use the same transform; the
    /// natural source is the behavior model's `means`/`scales`.
    pub fn standardized(
        dataset: &Dataset<F>,
        annotations: &BehaviorAnnotations<F>,
        use_safety: bool,
        means: &[F],
        scales: &[F],
    ) -> Self {
        let mut data = Self::new(dataset, annotations, use_safety);
        assert_eq!(means.len(), data.dim);
        assert_eq!(scales.len(), data.dim);
        for row in data.states.chunks_mut(data.dim.max(1)) {
            for ((x, m), s) in row.iter_mut().zip(means).zip(scales) {
                *x = (*x - *m) / *s;
            }
        }
        data
    }

    /// With `use_safety` off the stored masks allow every action.
    pub fn new(dataset: &Dataset<F>, annotations: &BehaviorAnnotations<F>, use_safety: bool) -> Self {
        let n = dataset.transition_count();
        let dim = dataset.state_dim();
        assert_eq!(annotations.probs.len(), n, "annotations must cover the dataset");
        let mut states = Vec::with_capacity(n * dim);
        let mut actions = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut traj_ranges = Vec::with_capacity(dataset.trajectories.len());
        let mut offset = 0usize;
        for traj in &dataset.trajectories {
            let start = offset;
            for tr in &traj.transitions {
                states.extend_from_slice(&tr.state.features);
                actions.push(tr.action);
                rewards.push(tr.reward);
                offset += 1;
            }
            traj_ranges.push((start, offset));
        }
        let mut beh_probs = Vec::with_capacity(n * NUM_ACTIONS);
        for row in &annotations.probs {
            beh_probs.extend_from_slice(row);
        }
        let masks = if use_safety {
            annotations.masks.clone()
        } else {
            vec![SafetyMask::all_allowed(); n]
        };
        FlatData {
            dim,
            n,
            states,
            actions,
            rewards,
            beh_probs,
            masks,
            traj_ranges,
        }
    }

    pub fn state(&self, i: usize) -> &[F] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn beh_row(&self, i: usize) -> &[F] {
        &self.beh_probs[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS]
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

// ---------------------------------------------------------------------------
// Loss terms (forward only)
// ---------------------------------------------------------------------------

fn clamp<F: Scalar>(p: F) -> F {
    let floor = F::of(PROB_CLAMP);
    if p > floor {
        p
    } else {
        floor
    }
}

/// Symmetric KL over the allowed set with probability clamping:
/// `0.5 KL(p||q) + 0.5 KL(q||p)`.
pub fn symkl_clamped<F: Scalar>(p: &[F], q: &[F], mask: &SafetyMask) -> F {
    let half = F::of(0.5);
    let mut acc = F::zero();
    for a in mask.actions() {
        let (pa, qa) = (p[a], q[a]);
        let (pc, qc) = (clamp(pa), clamp(qa));
        let log_ratio = pc.ln() - qc.ln();
        acc += half * (pa * log_ratio - qa * log_ratio);
    }
    acc
}

/// d symKL(p, q) / dp with q held fixed, on the allowed set.
fn symkl_grad_p<F: Scalar>(p: &[F], q: &[F], mask: &SafetyMask, out: &mut [F], scale: F) {
    let half = F::of(0.5);
    let floor = F::of(PROB_CLAMP);
    for a in mask.actions() {
        let (pa, qa) = (p[a], q[a]);
        let (pc, qc) = (clamp(pa), clamp(qa));
        let mut g = half * (pc.ln() - qc.ln());
        if pa > floor {
            g += half;
            g -= half * qa / pc;
        }
        out[a] += scale * g;
    }
}

/// Cross-entropy quality: mean over policies and transitions of
/// `-ln(masked policy probability of the taken action)`.
pub fn quality_loss_ce<F: Scalar>(collection: &PolicyCollection<F>, data: &FlatData<F>, idxs: &[usize]) -> F {
    let eval = eval_batch(
        collection,
        data,
        idxs,
        &TrainConfig {
            quality_kind: QualityKind::Ce,
            use_diversity: false,
            ..TrainConfig::default()
        },
        false,
    )
    .expect("forward pass");
    eval.quality
}

/// Symmetric-KL quality between the masked behavior distribution and each
/// masked policy, averaged over policies and transitions.
pub fn quality_loss_symkl<F: Scalar>(
    collection: &PolicyCollection<F>,
    data: &FlatData<F>,
    idxs: &[usize],
) -> F {
    let eval = eval_batch(
        collection,
        data,
        idxs,
        &TrainConfig {
            quality_kind: QualityKind::SymKl,
            use_diversity: false,
            ..TrainConfig::default()
        },
        false,
    )
    .expect("forward pass");
    eval.quality
}

/// Mean over batch states of the symmetric KL between two policies' masked
/// action distributions.
pub fn pairwise_symkl<F: Scalar>(
    pi: &PolicyParams<F>,
    pj: &PolicyParams<F>,
    data: &FlatData<F>,
    idxs: &[usize],
) -> F {
    let sum: F = idxs
        .iter()
        .map(|&s| {
            let mask = &data.masks[s];
            let ti = forward_trace(pi, data.state(s));
            let tj = forward_trace(pj, data.state(s));
            let dpi = masked_softmax(&ti.logits, mask);
            let dpj = masked_softmax(&tj.logits, mask);
            symkl_clamped(&dpi, &dpj, mask)
        })
        .sum();
    sum / F::of(idxs.len() as f64)
}

/// Average pairwise symmetric KL across the collection; 0 for K = 1.
pub fn diversity_loss<F: Scalar>(collection: &PolicyCollection<F>, data: &FlatData<F>, idxs: &[usize]) -> F {
    let k = collection.k();
    if k < 2 {
        return F::zero();
    }
    let mut sum = F::zero();
    for i in 0..k {
        for j in (i + 1)..k {
            sum += pairwise_symkl(&collection.policies[i], &collection.policies[j], data, idxs);
        }
    }
    sum * F::of(2.0 / (k * (k - 1)) as f64)
}

/// Full objective breakdown: `total = quality - lambda * diversity + l2`.
pub fn total_objective<F: Scalar>(
    collection: &PolicyCollection<F>,
    data: &FlatData<F>,
    idxs: &[usize],
    config: &TrainConfig,
) -> LossBreakdown<F> {
    let eval = eval_batch(collection, data, idxs, config, false).expect("forward pass");
    breakdown(collection, &eval, config)
}

fn breakdown<F: Scalar>(
    collection: &PolicyCollection<F>,
    eval: &BatchEval<F>,
    config: &TrainConfig,
) -> LossBreakdown<F> {
    let l2: F = collection
        .policies
        .iter()
        .map(|p| p.squared_norm())
        .fold(F::zero(), |a, b| a + b)
        * F::of(config.l2_coeff);
    let lambda = if config.use_diversity {
        F::of(config.lambda)
    } else {
        F::zero()
    };
    LossBreakdown {
        quality: eval.quality,
        diversity: eval.diversity,
        l2,
        total: eval.quality - lambda * eval.diversity + l2,
    }
}

// ---------------------------------------------------------------------------
// Gradient kernel
// ---------------------------------------------------------------------------

struct BatchEval<F> {
    quality: F,
    diversity: F,
    masked_action_hits: usize,
    /// Flat gradient per policy, laid out like `PolicyParams::params_flat`.
    grads: Option<Vec<Vec<F>>>,
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

fn offsets<F: Scalar>(p: &PolicyParams<F>) -> Offsets {
    let b1 = p.w1.len();
    let w2 = b1 + p.b1.len();
    let b2 = w2 + p.w2.len();
    let w3 = b2 + p.b2.len();
    let b3 = w3 + p.w3.len();
    Offsets {
        b1,
        w2,
        b2,
        w3,
        b3,
        total: b3 + p.b3.len(),
    }
}

/// Accumulate one state's gradient into `grad` given the logit gradient.
fn backprop_state<F: Scalar>(
    params: &PolicyParams<F>,
    features: &[F],
    h1: &[F],
    h2: &[F],
    dz: &[F],
    grad: &mut [F],
) {
    let d = params.input_dim;
    let h = params.hidden;
    let off = offsets(params);

    // output layer
    let mut dh2 = vec![F::zero(); h];
    for i in 0..params.n_actions {
        let dzi = dz[i];
        if dzi == F::zero() {
            continue;
        }
        let wrow = &params.w3[i * h..(i + 1) * h];
        let grow = &mut grad[off.w3 + i * h..off.w3 + (i + 1) * h];
        for j in 0..h {
            grow[j] += dzi * h2[j];
            dh2[j] += dzi * wrow[j];
        }
        grad[off.b3 + i] += dzi;
    }

    // second hidden layer (relu)
    let mut dh1 = vec![F::zero(); h];
    for i in 0..h {
        if h2[i] <= F::zero() {
            continue;
        }
        let di = dh2[i];
        if di == F::zero() {
            continue;
        }
        let wrow = &params.w2[i * h..(i + 1) * h];
        let grow = &mut grad[off.w2 + i * h..off.w2 + (i + 1) * h];
        for j in 0..h {
            grow[j] += di * h1[j];
            dh1[j] += di * wrow[j];
        }
        grad[off.b2 + i] += di;
    }

    // first hidden layer (relu)
    for i in 0..h {
        if h1[i] <= F::zero() {
            continue;
        }
        let di = dh1[i];
        if di == F::zero() {
            continue;
        }
        let grow = &mut grad[i * d..(i + 1) * d];
        for j in 0..d {
            grow[j] += di * features[j];
        }
        grad[off.b1 + i] += di;
    }
}

fn eval_batch<F: Scalar>(
    collection: &PolicyCollection<F>,
    data: &FlatData<F>,
    idxs: &[usize],
    config: &TrainConfig,
    with_grads: bool,
) -> TrainResult<BatchEval<F>> {
    let k = collection.k();
    let n = idxs.len();
    if n == 0 {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let n_params = offsets(&collection.policies[0]).total;
    let q_scale = F::one() / F::of((k * n) as f64);
    let use_div = config.use_diversity && k >= 2;
    let d_scale = if use_div {
        F::of(2.0 / (k * (k - 1) * n) as f64)
    } else {
        F::zero()
    };
    let lambda = F::of(config.lambda);
    let floor = F::of(PROB_CLAMP);

    struct ChunkOut<F> {
        q_sum: F,
        d_sum: F,
        hits: usize,
        grads: Option<Vec<Vec<F>>>,
    }

    let chunk_outs: Vec<ChunkOut<F>> = idxs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut q_sum = F::zero();
            let mut d_sum = F::zero();
            let mut hits = 0usize;
            let mut grads = if with_grads {
                Some(vec![vec![F::zero(); n_params]; k])
            } else {
                None
            };
            let mut probs: Vec<Vec<F>> = vec![Vec::new(); k];
            let mut traces = Vec::with_capacity(k);
            let mut gvecs: Vec<Vec<F>> = vec![vec![F::zero(); NUM_ACTIONS]; k];

            for &s in chunk {
                let features = data.state(s);
                let mask = &data.masks[s];
                traces.clear();
                for (i, params) in collection.policies.iter().enumerate() {
                    let trace = forward_trace(params, features);
                    probs[i] = masked_softmax(&trace.logits, mask);
                    traces.push(trace);
                }
                for g in &mut gvecs {
                    for v in g.iter_mut() {
                        *v = F::zero();
                    }
                }

                // quality term
                match config.quality_kind {
                    QualityKind::Ce => {
                        let a = data.actions[s];
                        for i in 0..k {
                            let pa = probs[i][a];
                            let pc = clamp(pa);
                            q_sum += -pc.ln();
                            if pa <= floor {
                                hits += 1;
                            } else if with_grads {
                                gvecs[i][a] += -(q_scale / pc);
                            }
                        }
                    }
                    QualityKind::SymKl => {
                        let q_beh = apply_mask(data.beh_row(s), mask);
                        for i in 0..k {
                            q_sum += symkl_clamped(&probs[i], &q_beh, mask);
                            if with_grads {
                                symkl_grad_p(&probs[i], &q_beh, mask, &mut gvecs[i], q_scale);
                            }
                        }
                    }
                    QualityKind::None => {}
                }

                // diversity term (rewarded: enters the objective as -lambda * D)
                if use_div {
                    for i in 0..k {
                        for j in (i + 1)..k {
                            d_sum += symkl_clamped(&probs[i], &probs[j], mask);
                            if with_grads {
                                let scale = -(lambda * d_scale);
                                // split mutable borrows of gvecs[i] and gvecs[j]
                                let (lo, hi) = gvecs.split_at_mut(j);
                                symkl_grad_p(&probs[i], &probs[j], mask, &mut lo[i], scale);
                                symkl_grad_p(&probs[j], &probs[i], mask, &mut hi[0], scale);
                            }
                        }
                    }
                }

                if let Some(grads) = grads.as_mut() {
                    for i in 0..k {
                        let p = &probs[i];
                        let g = &gvecs[i];
                        // restricted softmax Jacobian: dz = p * (g - <g, p>)
                        let mut inner = F::zero();
                        for a in mask.actions() {
                            inner += g[a] * p[a];
                        }
                        let mut dz = vec![F::zero(); NUM_ACTIONS];
                        let mut any = false;
                        for a in mask.actions() {
                            let v = p[a] * (g[a] - inner);
                            if v != F::zero() {
                                any = true;
                            }
                            dz[a] = v;
                        }
                        if any {
                            backprop_state(
                                &collection.policies[i],
                                features,
                                &traces[i].h1,
                                &traces[i].h2,
                                &dz,
                                &mut grads[i],
                            );
                        }
                    }
                }
            }
            ChunkOut {
                q_sum,
                d_sum,
                hits,
                grads,
            }
        })
        .collect();

    // ordered reduction keeps results independent of thread count
    let mut q_sum = F::zero();
    let mut d_sum = F::zero();
    let mut hits = 0usize;
    let mut grads = if with_grads {
        Some(vec![vec![F::zero(); n_params]; k])
    } else {
        None
    };
    for out in chunk_outs {
        q_sum += out.q_sum;
        d_sum += out.d_sum;
        hits += out.hits;
        if let (Some(total), Some(part)) = (grads.as_mut(), out.grads) {
            for (tp, pp) in total.iter_mut().zip(part) {
                for (t, p) in tp.iter_mut().zip(pp) {
                    *t += p;
                }
            }
        }
    }

    if let Some(grads) = grads.as_mut() {
        // L2 term gradient
        let two_l2 = F::of(2.0 * config.l2_coeff);
        for (g, params) in grads.iter_mut().zip(&collection.policies) {
            for (gv, pv) in g.iter_mut().zip(params.params_flat()) {
                *gv += two_l2 * pv;
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(format!("policy {i}")));
            }
        }
    }

    let quality = q_sum * q_scale;
    let diversity = if use_div {
        d_sum * F::of(2.0 / (k * (k - 1) * n) as f64)
    } else {
        F::zero()
    };
    Ok(BatchEval {
        quality,
        diversity,
        masked_action_hits: hits,
        grads,
    })
}

/// Gradients of the full objective, flat per policy, for testing against
/// finite differences.
pub fn objective_gradients<F: Scalar>(
    collection: &PolicyCollection<F>,
    data: &FlatData<F>,
    idxs: &[usize],
    config: &TrainConfig,
) -> TrainResult<(LossBreakdown<F>, Vec<Vec<F>>)> {
    let eval = eval_batch(collection, data, idxs, config, true)?;
    let bd = breakdown(collection, &eval, config);
    Ok((bd, eval.grads.expect("gradients requested")))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(collection: &PolicyCollection<F>) -> Self {
        let sizes: Vec<usize> = collection.policies.iter().map(|p| p.param_count()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&s| vec![F::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![F::zero(); s]).collect(),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update of every policy on the batch gradient. Returns the loss
/// breakdown at the pre-update parameters.
pub fn grad_step<F: Scalar>(
    collection: &mut PolicyCollection<F>,
    data: &FlatData<F>,
    idxs: &[usize],
    config: &TrainConfig,
    adam: &mut AdamState<F>,
) -> TrainResult<(LossBreakdown<F>, usize)> {
    let eval = eval_batch(collection, data, idxs, config, true)?;
    let bd = breakdown(collection, &eval, config);
    let grads = eval.grads.expect("gradients requested");

    adam.step += 1;
    let t = adam.step as i32;
    let b1 = F::of(BETA1);
    let b2 = F::of(BETA2);
    let lr = F::of(config.learning_rate);
    let eps = F::of(ADAM_EPS);
    let bias1 = F::one() - F::of(BETA1).powi(t);
    let bias2 = F::one() - F::of(BETA2).powi(t);

    for (k, params) in collection.policies.iter_mut().enumerate() {
        let g = &grads[k];
        let m = &mut adam.m[k];
        let v = &mut adam.v[k];
        let mut idx = 0usize;
        params.for_each_param_mut(|p| {
            let gi = g[idx];
            m[idx] = b1 * m[idx] + (F::one() - b1) * gi;
            v[idx] = b2 * v[idx] + (F::one() - b2) * gi * gi;
            let m_hat = m[idx] / bias1;
            let v_hat = v[idx] / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            idx += 1;
        });
    }
    Ok((bd, eval.masked_action_hits))
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub quality: f64,
    pub diversity: f64,
    pub l2: f64,
    pub total: f64,
    /// Per-policy validation ESS, empty when no validation hook is supplied.
    pub val_ess: Vec<f64>,
    /// Per-policy validation value estimate.
    pub val_value: Vec<f64>,
}

pub struct TrainOutput<F> {
    pub collection: PolicyCollection<F>,
    pub adam: AdamState<F>,
    pub history: Vec<EpochRecord>,
}

/// Per-epoch validation hook: returns (ESS, value) per policy.
pub type ValidationHook<'a, F> = dyn Fn(&PolicyCollection<F>) -> Vec<(f64, f64)> + 'a;

/// Train a fresh collection (or resume one) over shuffled trajectory batches.
/// Batches are whole trajectories; every transition of a batch's trajectories
/// forms the step's state batch.
pub fn train<F: Scalar>(
    data: &FlatData<F>,
    config: &TrainConfig,
    resume: Option<(PolicyCollection<F>, AdamState<F>, usize)>,
    validation: Option<&ValidationHook<'_, F>>,
) -> TrainResult<TrainOutput<F>> {
    config.validate()?;
    if data.n == 0 {
        return Err(TrainError::InvalidConfig("empty training data".into()));
    }
    let (mut collection, mut adam, start_epoch) = match resume {
        Some((c, a, e)) => (c, a, e),
        None => {
            let c = PolicyCollection::init(config.seed, data.dim, config.k_policies);
            let a = AdamState::new(&c);
            (c, a, 0)
        }
    };

    let mut history = Vec::with_capacity(config.epochs.saturating_sub(start_epoch));
    for epoch in start_epoch..config.epochs {
        // epoch-indexed shuffle stream so resumed runs continue identically
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut order: Vec<usize> = (0..data.traj_ranges.len()).collect();
        order.shuffle(&mut rng);

        let mut q_acc = 0.0f64;
        let mut d_acc = 0.0f64;
        let mut l2_acc = 0.0f64;
        let mut total_acc = 0.0f64;
        let mut steps = 0usize;
        let mut hits = 0usize;

        for batch_trajs in order.chunks(config.batch_size) {
            let mut idxs = Vec::new();
            for &ti in batch_trajs {
                let (a, b) = data.traj_ranges[ti];
                idxs.extend(a..b);
            }
            let (bd, h) = grad_step(&mut collection, data, &idxs, config, &mut adam)?;
            q_acc += bd.quality.to64();
            d_acc += bd.diversity.to64();
            l2_acc += bd.l2.to64();
            total_acc += bd.total.to64();
            steps += 1;
            hits += h;
        }

        if hits > 0 {
            eprintln!("epoch {epoch}: {hits} transitions had a masked taken action (clamped)");
        }

        let (val_ess, val_value) = match validation {
            Some(hook) => {
                let metrics = hook(&collection);
                (
                    metrics.iter().map(|m| m.0).collect(),
                    metrics.iter().map(|m| m.1).collect(),
                )
            }
            None => (Vec::new(), Vec::new()),
        };
        let s = steps.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            quality: q_acc / s,
            diversity: d_acc / s,
            l2: l2_acc / s,
            total: total_acc / s,
            val_ess,
            val_value,
        });
    }

    Ok(TrainOutput {
        collection,
        adam,
        history,
    })
}

/// History CSV: epoch, loss terms, then per-policy validation columns.
pub fn history_to_csv(history: &[EpochRecord], k: usize) -> String {
    let mut out = String::from("epoch,quality,diversity,l2,total");
    for i in 0..k {
        out.push_str(&format!(",val_ess_{i}"));
    }
    for i in 0..k {
        out.push_str(&format!(",val_cwpdis_{i}"));
    }
    out.push('\n');
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{},{}",
            rec.epoch, rec.quality, rec.diversity, rec.l2, rec.total
        ));
        for i in 0..k {
            match rec.val_ess.get(i) {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        for i in 0..k {
            match rec.val_value.get(i) {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::BehaviorAnnotations;
    use crate::data_model::{
        Dataset, FeatureKind, FeatureSpec, Split, StateVector, Trajectory, Transition,
    };
    use crate::policy::init_params_sized;
    use rand::Rng;

    const TOY_DIM: usize = 6;

    /// Small dataset with hand-set behavior probabilities and masks.
    fn toy_data(n_states: usize, mask_size: usize, seed: u64) -> FlatData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema: Vec<FeatureSpec> = (0..TOY_DIM)
            .map(|i| FeatureSpec {
                name: format!("x{i}"),
                unit: String::new(),
                kind: FeatureKind::Continuous,
            })
            .collect();
        let mut trajectories = Vec::new();
        let mut probs = Vec::new();
        let mut masks = Vec::new();
        for s in 0..n_states {
            let features: Vec<f64> = (0..TOY_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let allowed: Vec<usize> = (0..mask_size).map(|a| (a * 3 + s) % NUM_ACTIONS).collect();
            let mask = SafetyMask::from_actions(&allowed, 0.03);
            let action = allowed[s % allowed.len()];
            let mut beh: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = beh.iter().sum();
            for b in &mut beh {
                *b /= total;
            }
            trajectories.push(Trajectory {
                stay_id: format!("s{s}"),
                transitions: vec![Transition {
                    t: 1,
                    state: StateVector::new(features),
                    action,
                    reward: 0.5,
                }],
            });
            probs.push(beh);
            masks.push(mask);
        }
        let ds = Dataset::new(trajectories, schema, Split::Train);
        FlatData::new(&ds, &BehaviorAnnotations { probs, masks }, true)
    }

    fn toy_collection(k: usize, seed: u64) -> PolicyCollection<f64> {
        let policies = (0..k)
            .map(|i| init_params_sized(seed + i as u64, TOY_DIM, 8))
            .collect();
        PolicyCollection { policies }
    }

    fn fd_check(config: &TrainConfig, seed: u64) {
        let data = toy_data(5, 6, seed);
        let idxs = data.all_indices();
        let collection = toy_collection(2, seed + 100);
        let (_, analytic) = objective_gradients(&collection, &data, &idxs, config).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for k in 0..collection.k() {
            let n_params = collection.policies[k].param_count();
            // check a deterministic subset to keep runtime low
            let stride = (n_params / 60).max(1);
            for pi in (0..n_params).step_by(stride) {
                let mut plus = collection.clone();
                let mut minus = collection.clone();
                let mut idx = 0;
                plus.policies[k].for_each_param_mut(|v| {
                    if idx == pi {
                        *v += h;
                    }
                    idx += 1;
                });
                idx = 0;
                minus.policies[k].for_each_param_mut(|v| {
                    if idx == pi {
                        *v -= h;
                    }
                    idx += 1;
                });
                let lp = total_objective(&plus, &data, &idxs, config).total;
                let lm = total_objective(&minus, &data, &idxs, config).total;
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[k][pi];
                let denom = an.abs().max(fd.abs());
                if denom > 1e-7 {
                    max_rel = max_rel.max((an - fd).abs() / denom);
                }
            }
        }
        assert!(max_rel <= 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn gradients_match_finite_differences_ce() {
        fd_check(
            &TrainConfig {
                quality_kind: QualityKind::Ce,
                lambda: 0.4,
                use_diversity: true,
                ..TrainConfig::default()
            },
            1,
        );
    }

    #[test]
    fn gradients_match_finite_differences_symkl() {
        fd_check(
            &TrainConfig {
                quality_kind: QualityKind::SymKl,
                lambda: 0.4,
                use_diversity: true,
                ..TrainConfig::default()
            },
            2,
        );
    }

    #[test]
    fn gradients_match_finite_differences_diversity_only() {
        fd_check(
            &TrainConfig {
                quality_kind: QualityKind::None,
                lambda: 1.0,
                use_diversity: true,
                ..TrainConfig::default()
            },
            3,
        );
    }

    #[test]
    fn ce_loss_closed_forms() {
        // uniform policy over 20, full mask: -ln(1/20) per transition
        let data = toy_data(4, NUM_ACTIONS, 7);
        let mut collection = toy_collection(1, 7);
        collection.policies[0].for_each_param_mut(|v| *v = 0.0);
        let full_masks: Vec<SafetyMask> = vec![SafetyMask::all_allowed(); data.n];
        let mut data = data;
        data.masks = full_masks;
        let ce = quality_loss_ce(&collection, &data, &data.all_indices());
        assert!((ce - (20.0f64).ln()).abs() < 1e-9, "got {ce}");
    }

    #[test]
    fn symkl_derived_value_and_symmetry() {
        // two-action distributions (0.75, 0.25) vs (0.25, 0.75):
        // KL each way is 0.5*ln(3), so the symmetric KL is 0.5*ln(3) = 0.5493.
        let mask = SafetyMask::from_actions(&[0, 1], 0.03);
        let mut p = vec![0.0; NUM_ACTIONS];
        let mut q = vec![0.0; NUM_ACTIONS];
        p[0] = 0.75;
        p[1] = 0.25;
        q[0] = 0.25;
        q[1] = 0.75;
        let v = symkl_clamped(&p, &q, &mask);
        assert!((v - 0.5 * 3.0f64.ln()).abs() < 1e-12);
        assert!((v - 0.549306).abs() < 1e-6);
        assert_eq!(v, symkl_clamped(&q, &p, &mask));
    }

    #[test]
    fn symkl_disjoint_one_hot_hits_clamp_scale() {
        // near-one-hot distributions on different actions: each KL term is
        // roughly ln(1/clamp), so the symmetric KL is about 18.4
        let mask = SafetyMask::from_actions(&[0, 1], 0.03);
        let mut p = vec![0.0; NUM_ACTIONS];
        let mut q = vec![0.0; NUM_ACTIONS];
        p[0] = 1.0;
        q[1] = 1.0;
        let v = symkl_clamped(&p, &q, &mask);
        let expected = (1.0 / PROB_CLAMP).ln();
        assert!((v - expected).abs() / expected < 0.01, "got {v}, expected ~{expected}");
    }

    #[test]
    fn diversity_zero_for_identical_policies() {
        let data = toy_data(6, 5, 11);
        let p = init_params_sized(5, TOY_DIM, 8);
        let collection = PolicyCollection {
            policies: vec![p.clone(), p.clone(), p],
        };
        let d = diversity_loss(&collection, &data, &data.all_indices());
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn diversity_k2_equals_single_pair_and_k1_is_zero() {
        let data = toy_data(6, 5, 12);
        let idxs = data.all_indices();
        let collection = toy_collection(2, 21);
        let pair = pairwise_symkl(&collection.policies[0], &collection.policies[1], &data, &idxs);
        let div = diversity_loss(&collection, &data, &idxs);
        assert!((pair - div).abs() < 1e-12);
        // pairwise value is symmetric
        let rev = pairwise_symkl(&collection.policies[1], &collection.policies[0], &data, &idxs);
        assert!((pair - rev).abs() < 1e-12);

        let single = toy_collection(1, 21);
        assert_eq!(diversity_loss(&single, &data, &idxs), 0.0);
    }

    #[test]
    fn total_objective_composition() {
        let data = toy_data(5, 6, 13);
        let idxs = data.all_indices();
        let collection = toy_collection(2, 31);

        // lambda = 0: total = quality + l2
        let cfg = TrainConfig {
            lambda: 0.0,
            quality_kind: QualityKind::Ce,
            ..TrainConfig::default()
        };
        let bd = total_objective(&collection, &data, &idxs, &cfg);
        assert!((bd.total - (bd.quality + bd.l2)).abs() < 1e-12);

        // quality none: total = -lambda * diversity + l2
        let cfg = TrainConfig {
            lambda: 0.7,
            quality_kind: QualityKind::None,
            ..TrainConfig::default()
        };
        let bd = total_objective(&collection, &data, &idxs, &cfg);
        assert!((bd.total - (-0.7 * bd.diversity + bd.l2)).abs() < 1e-12);
        assert_eq!(bd.quality, 0.0);

        // l2 of all-zero params is zero
        let mut zeroed = collection.clone();
        for p in &mut zeroed.policies {
            p.for_each_param_mut(|v| *v = 0.0);
        }
        let bd = total_objective(&zeroed, &data, &idxs, &cfg);
        assert_eq!(bd.l2, 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(30, 6, 17);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 10,
            k_policies: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let out1 = train(&data, &cfg, None, None).unwrap();
        let out2 = train(&data, &cfg, None, None).unwrap();
        assert_eq!(out1.collection, out2.collection);
        for (a, b) in out1.history.iter().zip(&out2.history) {
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = toy_data(30, 6, 19);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 10,
            k_policies: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let full = train(&data, &cfg, None, None).unwrap();

        let cfg_half = TrainConfig { epochs: 2, ..cfg.clone() };
        let half = train(&data, &cfg_half, None, None).unwrap();
        let resumed = train(&data, &cfg, Some((half.collection, half.adam, 2)), None).unwrap();
        assert_eq!(full.collection, resumed.collection);
    }

    #[test]
    fn ce_descends_toward_behavior() {
        let data = toy_data(40, 6, 23);
        let cfg = TrainConfig {
            lambda: 0.0,
            quality_kind: QualityKind::Ce,
            use_diversity: false,
            epochs: 10,
            batch_size: 20,
            k_policies: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, None, None).unwrap();
        let first = out.history.first().unwrap().quality;
        let last = out.history.last().unwrap().quality;
        assert!(last <= first, "CE did not descend: {first} -> {last}");
    }

    #[test]
    fn high_lambda_run_is_more_diverse_than_zero_lambda() {
        let data = toy_data(40, 8, 29);
        let base = TrainConfig {
            quality_kind: QualityKind::None,
            epochs: 8,
            batch_size: 20,
            k_policies: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        let diverse = train(
            &data,
            &TrainConfig { lambda: 1.0, ..base.clone() },
            None,
            None,
        )
        .unwrap();
        let anchored = train(
            &data,
            &TrainConfig {
                lambda: 0.0,
                quality_kind: QualityKind::Ce,
                use_diversity: false,
                ..base
            },
            None,
            None,
        )
        .unwrap();
        let idxs = data.all_indices();
        let d_high = diversity_loss(&diverse.collection, &data, &idxs);
        let d_zero = diversity_loss(&anchored.collection, &data, &idxs);
        assert!(
            d_high > d_zero,
            "expected diversity {d_high} > {d_zero} for the high-lambda run"
        );
    }

    #[test]
    fn masked_actions_get_no_probability_during_training() {
        let data = toy_data(20, 4, 37);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            k_policies: 2,
            seed: 13,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, None, None).unwrap();
        for (s, mask) in data.masks.iter().enumerate() {
            for params in &out.collection.policies {
                let trace = forward_trace(params, data.state(s));
                let probs = masked_softmax(&trace.logits, mask);
                for a in 0..NUM_ACTIONS {
                    if !mask.contains(a) {
                        assert!(probs[a] <= 1e-12);
                    }
                }
            }
        }
    }
}
