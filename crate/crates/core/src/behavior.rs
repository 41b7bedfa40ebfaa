//! Clinician behavior estimation: weighted k-nearest-neighbor action counting
//! over standardized state features, and the per-state safety masks derived
//! from the neighbor counts.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Dataset, StateVector, NUM_ACTIONS};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type BehaviorResult<T> = Result<T, BehaviorError>;

/// Which reference transition, if any, to drop from a neighbor query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclude {
    None,
    /// Drop the reference at this index (used when querying the training
    /// split the model was fit on).
    Index(usize),
    /// Drop the first reference whose features are bitwise equal to the
    /// query state.
    ExactMatch,
}

/// Fitted kNN behavior policy: standardized reference states from the
/// training split, the action taken at each, and the distance weighting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorModel<F> {
    pub k: usize,
    pub dim: usize,
    /// Per-feature standardization.
    pub means: Vec<F>,
    pub scales: Vec<F>,
    /// Nonnegative per-feature distance weights.
    pub weights: Vec<F>,
    /// Standardized reference states, row-major `n_refs x dim`.
    refs: Vec<F>,
    actions: Vec<u8>,
}

/// Allowed-action set for one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyMask {
    /// Bit `a` set means action `a` is allowed.
    pub bits: u32,
    pub epsilon: f64,
}

impl SafetyMask {
    pub fn all_allowed() -> Self {
        SafetyMask {
            bits: (1u32 << NUM_ACTIONS) - 1,
            epsilon: 0.0,
        }
    }

    pub fn from_actions(actions: &[usize], epsilon: f64) -> Self {
        let mut bits = 0u32;
        for &a in actions {
            bits |= 1 << a;
        }
        SafetyMask { bits, epsilon }
    }

    pub fn contains(&self, action: usize) -> bool {
        self.bits >> action & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_ACTIONS).filter(|&a| self.contains(a))
    }
}

/// Neighbor candidate ordered by (distance, insertion index), so equidistant
/// neighbors resolve deterministically to the earlier reference.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Neighbor {
    dist: f64,
    idx: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .partial_cmp(&other.dist)
            .unwrap_or(Ordering::Equal)
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Fit the behavior model on a dataset. Features are standardized to zero
/// mean and unit scale before the per-feature weights apply.
pub fn fit_behavior<F: Scalar>(
    dataset: &Dataset<F>,
    k: usize,
    distance_weights: Option<&[f64]>,
) -> BehaviorResult<BehaviorModel<F>> {
    let n: usize = dataset.transition_count();
    let dim = dataset.state_dim();
    if n == 0 {
        return Err(BehaviorError::InvalidConfig("empty dataset".into()));
    }
    if k == 0 || k > n {
        return Err(BehaviorError::InvalidConfig(format!(
            "k = {k} must be in 1..={n} (reference set size)"
        )));
    }
    let weights: Vec<F> = match distance_weights {
        Some(w) => {
            if w.len() != dim {
                return Err(BehaviorError::InvalidConfig(format!(
                    "{} distance weights for {dim} features",
                    w.len()
                )));
            }
            if w.iter().any(|x| *x < 0.0) || !w.iter().any(|x| *x > 0.0) {
                return Err(BehaviorError::InvalidConfig(
                    "distance weights must be nonnegative with at least one positive".into(),
                ));
            }
            w.iter().map(|x| F::of(*x)).collect()
        }
        None => vec![F::one(); dim],
    };

    let mut means = vec![F::zero(); dim];
    for tr in dataset.transitions() {
        for (m, x) in means.iter_mut().zip(&tr.state.features) {
            *m += *x;
        }
    }
    let inv_n = F::one() / F::of(n as f64);
    for m in &mut means {
        *m *= inv_n;
    }
    let mut vars = vec![F::zero(); dim];
    for tr in dataset.transitions() {
        for ((v, m), x) in vars.iter_mut().zip(&means).zip(&tr.state.features) {
            let d = *x - *m;
            *v += d * d;
        }
    }
    let scales: Vec<F> = vars
        .iter()
        .map(|v| {
            let s = (*v * inv_n).sqrt();
            if s > F::of(1e-12) {
                s
            } else {
                F::one()
            }
        })
        .collect();

    let mut refs = Vec::with_capacity(n * dim);
    let mut actions = Vec::with_capacity(n);
    for tr in dataset.transitions() {
        for ((x, m), s) in tr.state.features.iter().zip(&means).zip(&scales) {
            refs.push((*x - *m) / *s);
        }
        actions.push(tr.action as u8);
    }

    Ok(BehaviorModel {
        k,
        dim,
        means,
        scales,
        weights,
        refs,
        actions,
    })
}

impl<F: Scalar> BehaviorModel<F> {
    pub fn n_refs(&self) -> usize {
        self.actions.len()
    }

    fn standardize(&self, state: &StateVector<F>) -> Vec<F> {
        state
            .features
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((x, m), s)| (*x - *m) / *s)
            .collect()
    }

    /// Action counts among the k nearest references. Returns the counts and
    /// the number of neighbors actually used.
    pub fn neighbor_counts(
        &self,
        state: &StateVector<F>,
        exclude: Exclude,
    ) -> ([u32; NUM_ACTIONS], usize) {
        let query = self.standardize(state);
        self.neighbor_counts_standardized(&query, exclude)
    }

    fn neighbor_counts_standardized(
        &self,
        query: &[F],
        exclude: Exclude,
    ) -> ([u32; NUM_ACTIONS], usize) {
        let skip = match exclude {
            Exclude::None => usize::MAX,
            Exclude::Index(i) => i,
            Exclude::ExactMatch => {
                let mut found = usize::MAX;
                for i in 0..self.n_refs() {
                    if self.refs[i * self.dim..(i + 1) * self.dim] == *query {
                        found = i;
                        break;
                    }
                }
                found
            }
        };
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(self.k + 1);
        for i in 0..self.n_refs() {
            if i == skip {
                continue;
            }
            let row = &self.refs[i * self.dim..(i + 1) * self.dim];
            let mut d2 = F::zero();
            for j in 0..self.dim {
                let diff = row[j] - query[j];
                d2 += self.weights[j] * diff * diff;
            }
            let cand = Neighbor {
                dist: d2.to64(),
                idx: i,
            };
            if heap.len() < self.k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }
        let mut counts = [0u32; NUM_ACTIONS];
        let used = heap.len();
        for nb in heap {
            counts[self.actions[nb.idx] as usize] += 1;
        }
        (counts, used)
    }

    /// Empirical action distribution among the k nearest neighbors.
    pub fn behavior_probs(&self, state: &StateVector<F>, exclude_self: bool) -> Vec<F> {
        let exclude = if exclude_self {
            Exclude::ExactMatch
        } else {
            Exclude::None
        };
        let (counts, used) = self.neighbor_counts(state, exclude);
        counts_to_probs(&counts, used)
    }

    /// Allowed actions: neighbor count at least `round(epsilon * k)` (floored
    /// at one neighbor). Falls back to the single most frequent action when
    /// nothing clears the threshold.
    pub fn safety_mask(&self, state: &StateVector<F>, epsilon: f64) -> SafetyMask {
        let (counts, _) = self.neighbor_counts(state, Exclude::None);
        mask_from_counts(&counts, self.k, epsilon)
    }

    /// Behavior distribution and safety mask for every transition of a
    /// dataset, in dataset order. One kNN scan per transition, run in
    /// parallel; results are deterministic because each query is independent.
    ///
    /// With `exclude_self` set, transition `i` of the dataset is assumed to be
    /// reference `i` of the model (i.e. the dataset is the training split the
    /// model was fit on) and is dropped from its own neighbor list.
    pub fn annotate_dataset(
        &self,
        dataset: &Dataset<F>,
        epsilon: f64,
        exclude_self: bool,
    ) -> BehaviorAnnotations<F> {
        let states: Vec<&StateVector<F>> = dataset.transitions().map(|tr| &tr.state).collect();
        let per_state: Vec<(Vec<F>, SafetyMask)> = states
            .par_iter()
            .enumerate()
            .map(|(i, state)| {
                let query = self.standardize(state);
                let exclude = if exclude_self {
                    Exclude::Index(i)
                } else {
                    Exclude::None
                };
                let (counts, used) = self.neighbor_counts_standardized(&query, exclude);
                let probs = counts_to_probs(&counts, used);
                // The mask always comes from the full neighbor list, so that a
                // taken action stays allowed for the state that took it.
                let mask = if exclude_self {
                    let (full, _) = self.neighbor_counts_standardized(&query, Exclude::None);
                    mask_from_counts(&full, self.k, epsilon)
                } else {
                    mask_from_counts(&counts, self.k, epsilon)
                };
                (probs, mask)
            })
            .collect();
        let (probs, masks) = per_state.into_iter().unzip();
        BehaviorAnnotations { probs, masks }
    }
}

/// Per-transition behavior distributions and safety masks, aligned with
/// dataset transition order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorAnnotations<F> {
    pub probs: Vec<Vec<F>>,
    pub masks: Vec<SafetyMask>,
}

fn counts_to_probs<F: Scalar>(counts: &[u32; NUM_ACTIONS], used: usize) -> Vec<F> {
    let denom = F::of(used.max(1) as f64);
    counts.iter().map(|c| F::of(*c as f64) / denom).collect()
}

fn mask_from_counts(counts: &[u32; NUM_ACTIONS], k: usize, epsilon: f64) -> SafetyMask {
    let threshold = ((epsilon * k as f64).round() as u32).max(1);
    let mut bits = 0u32;
    for (a, &c) in counts.iter().enumerate() {
        if c >= threshold {
            bits |= 1 << a;
        }
    }
    if bits == 0 {
        // far from the data: fall back to the most frequent action,
        // ties to the lowest id
        let argmax = counts
            .iter()
            .enumerate()
            .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
            .map(|(a, _)| a)
            .unwrap_or(0);
        bits = 1 << argmax;
    }
    SafetyMask { bits, epsilon }
}

/// Zero probability outside the mask, renormalized inside it. If the in-mask
/// input mass is below 1e-12 the result is uniform over the mask.
pub fn apply_mask<F: Scalar>(probs: &[F], mask: &SafetyMask) -> Vec<F> {
    debug_assert!(!mask.is_empty());
    let mut total = F::zero();
    for (a, p) in probs.iter().enumerate() {
        if mask.contains(a) {
            total += *p;
        }
    }
    if total < F::of(1e-12) {
        let u = F::one() / F::of(mask.len() as f64);
        return (0..probs.len())
            .map(|a| if mask.contains(a) { u } else { F::zero() })
            .collect();
    }
    probs
        .iter()
        .enumerate()
        .map(|(a, p)| if mask.contains(a) { *p / total } else { F::zero() })
        .collect()
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

pub fn save_model<F: Scalar>(model: &BehaviorModel<F>, path: &Path) -> BehaviorResult<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(BufWriter::new(file), model)?;
    Ok(())
}

pub fn load_model<F: Scalar>(path: &Path) -> BehaviorResult<BehaviorModel<F>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Serialize, Deserialize)]
struct MaskLine {
    index: usize,
    mask: u32,
    epsilon: f64,
}

/// Mask cache: JSON Lines, transition index -> 20-bit allowed-action mask.
pub fn save_mask_cache(masks: &[SafetyMask], path: &Path) -> BehaviorResult<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (index, m) in masks.iter().enumerate() {
        serde_json::to_writer(
            &mut w,
            &MaskLine {
                index,
                mask: m.bits,
                epsilon: m.epsilon,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mask_cache(path: &Path) -> BehaviorResult<Vec<SafetyMask>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: MaskLine = serde_json::from_str(&line)?;
        if parsed.index != out.len() {
            return Err(BehaviorError::InvalidConfig(format!(
                "mask cache index {} out of order (expected {})",
                parsed.index,
                out.len()
            )));
        }
        out.push(SafetyMask {
            bits: parsed.mask,
            epsilon: parsed.epsilon,
        });
    }
    Ok(out)
}
