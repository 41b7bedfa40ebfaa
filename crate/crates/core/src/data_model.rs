//! Trajectories, the 20-action treatment grid, the MAP-driven reward, and
//! ingestion of raw hourly records into training-ready datasets.
//!
//! The action space is the cross product of 4 fluid-bolus dose bins and
//! 5 vasopressor dose bins; `action id = vaso_bin * 4 + fluid_bin`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Size of the discrete action space.
pub const NUM_ACTIONS: usize = 20;
pub const NUM_FLUID_BINS: usize = 4;
pub const NUM_VASO_BINS: usize = 5;
/// Only the first 72 hours of a stay are modeled.
pub const MAX_HOURS: u32 = 72;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate stay_id: {0}")]
    DuplicateStay(String),
    #[error("unknown drug: {0}")]
    UnknownDrug(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type DataResult<T> = Result<T, DataError>;

// ---------------------------------------------------------------------------
// Action grid
// ---------------------------------------------------------------------------

/// Discretization of the two intervention axes.
///
/// Fluid bins are half-open mL-per-hour ranges; boluses under the first
/// upper edge count as "no fluid". The first vasopressor bin is exactly
/// zero. Doses above the top edge clamp into the top bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    /// Upper edges of the 4 fluid bins (mL within an hour).
    pub fluid_uppers: [f64; NUM_FLUID_BINS],
    /// Upper edges of the 5 vasopressor bins (mcg/kg within an hour).
    /// The first entry is 0: that bin holds exactly-zero doses.
    pub vaso_uppers: [f64; NUM_VASO_BINS],
}

impl Default for ActionGrid {
    fn default() -> Self {
        ActionGrid {
            fluid_uppers: [200.0, 500.0, 1000.0, 2000.0],
            vaso_uppers: [0.0, 5.0, 15.0, 40.0, 150.0],
        }
    }
}

impl ActionGrid {
    pub fn fluid_bin(&self, fluid_ml: f64) -> DataResult<usize> {
        if !(fluid_ml >= 0.0) {
            return Err(DataError::InvalidInput(format!(
                "fluid volume must be nonnegative, got {fluid_ml}"
            )));
        }
        for (i, upper) in self.fluid_uppers.iter().enumerate() {
            if fluid_ml < *upper {
                return Ok(i);
            }
        }
        Ok(NUM_FLUID_BINS - 1)
    }

    pub fn vaso_bin(&self, vaso_rate: f64) -> DataResult<usize> {
        if !(vaso_rate >= 0.0) {
            return Err(DataError::InvalidInput(format!(
                "vasopressor rate must be nonnegative, got {vaso_rate}"
            )));
        }
        if vaso_rate == 0.0 {
            return Ok(0);
        }
        for (i, upper) in self.vaso_uppers.iter().enumerate().skip(1) {
            if vaso_rate < *upper {
                return Ok(i);
            }
        }
        Ok(NUM_VASO_BINS - 1)
    }

    pub fn action_id(&self, vaso_bin: usize, fluid_bin: usize) -> usize {
        vaso_bin * NUM_FLUID_BINS + fluid_bin
    }
}

/// Map an observed (fluid, vasopressor) dose pair to an action id in 0..20.
pub fn discretize_action(fluid_ml: f64, vaso_rate: f64, grid: &ActionGrid) -> DataResult<usize> {
    let f = grid.fluid_bin(fluid_ml)?;
    let v = grid.vaso_bin(vaso_rate)?;
    Ok(grid.action_id(v, f))
}

/// Inverse of the action index formula: id -> (vaso bin, fluid bin).
pub fn action_components(action_id: usize) -> DataResult<(usize, usize)> {
    if action_id >= NUM_ACTIONS {
        return Err(DataError::InvalidInput(format!(
            "action id {action_id} out of range 0..{NUM_ACTIONS}"
        )));
    }
    Ok((action_id / NUM_FLUID_BINS, action_id % NUM_FLUID_BINS))
}

// ---------------------------------------------------------------------------
// Core trajectory types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub kind: FeatureKind,
}

pub type Schema = Vec<FeatureSpec>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector<F> {
    pub features: Vec<F>,
}

impl<F: Scalar> StateVector<F> {
    pub fn new(features: Vec<F>) -> Self {
        StateVector { features }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self, schema: &Schema) -> DataResult<()> {
        if self.features.len() != schema.len() {
            return Err(DataError::Schema(format!(
                "state has {} features, schema declares {}",
                self.features.len(),
                schema.len()
            )));
        }
        for (x, spec) in self.features.iter().zip(schema) {
            if !x.is_finite() {
                return Err(DataError::InvalidInput(format!(
                    "non-finite value in feature {}",
                    spec.name
                )));
            }
            if spec.kind == FeatureKind::Indicator && *x != F::zero() && *x != F::one() {
                return Err(DataError::InvalidInput(format!(
                    "indicator feature {} must be 0 or 1, got {}",
                    spec.name, x
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<F> {
    /// Hour index, 1-based.
    pub t: u32,
    pub state: StateVector<F>,
    pub action: usize,
    pub reward: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<F> {
    pub stay_id: String,
    pub transitions: Vec<Transition<F>>,
}

impl<F: Scalar> Trajectory<F> {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn validate(&self, schema: &Schema) -> DataResult<()> {
        if self.transitions.is_empty() {
            return Err(DataError::InvalidInput(format!(
                "trajectory {} has no transitions",
                self.stay_id
            )));
        }
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.t != i as u32 + 1 {
                return Err(DataError::InvalidInput(format!(
                    "trajectory {}: hour index {} at position {}, expected {}",
                    self.stay_id,
                    tr.t,
                    i,
                    i + 1
                )));
            }
            if tr.t > MAX_HOURS {
                return Err(DataError::InvalidInput(format!(
                    "trajectory {}: hour index {} exceeds {MAX_HOURS}",
                    self.stay_id, tr.t
                )));
            }
            if tr.action >= NUM_ACTIONS {
                return Err(DataError::InvalidInput(format!(
                    "trajectory {}: action id {} out of range",
                    self.stay_id, tr.action
                )));
            }
            if tr.reward < F::zero() || tr.reward > F::one() {
                return Err(DataError::InvalidInput(format!(
                    "trajectory {}: reward {} outside [0,1]",
                    self.stay_id, tr.reward
                )));
            }
            tr.state.validate(schema)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<F> {
    pub trajectories: Vec<Trajectory<F>>,
    pub schema: Schema,
    pub split: Split,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(trajectories: Vec<Trajectory<F>>, schema: Schema, split: Split) -> Self {
        Dataset {
            trajectories,
            schema,
            split,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.schema.len()
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Iterate all transitions in dataset order.
    pub fn transitions(&self) -> impl Iterator<Item = &Transition<F>> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn validate(&self) -> DataResult<()> {
        let mut seen = std::collections::HashSet::new();
        for traj in &self.trajectories {
            if !seen.insert(traj.stay_id.as_str()) {
                return Err(DataError::DuplicateStay(traj.stay_id.clone()));
            }
            traj.validate(&self.schema)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

/// Piecewise-linear MAP reward with a urine-output exemption.
///
/// Knot values between the inflection points are artifact defaults; the
/// endpoints (28 mmHg -> 0, 65 mmHg -> 1) are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// (MAP mmHg, reward) pairs, strictly increasing in MAP.
    pub knots: Vec<(f64, f64)>,
    pub map_floor: f64,
    pub map_ceiling: f64,
    /// Urine output (mL/hour) at or above which moderately low MAP is excused.
    pub urine_exemption_threshold: f64,
    pub urine_exempt_map_floor: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            knots: vec![(28.0, 0.0), (55.0, 0.6), (60.0, 0.85), (65.0, 1.0)],
            map_floor: 28.0,
            map_ceiling: 65.0,
            urine_exemption_threshold: 30.0,
            urine_exempt_map_floor: 55.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> DataResult<()> {
        if self.knots.len() < 2 {
            return Err(DataError::InvalidInput("need at least 2 reward knots".into()));
        }
        for w in self.knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DataError::InvalidInput(
                    "reward knots must be strictly increasing in MAP".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(DataError::InvalidInput(
                    "reward knot values must be nondecreasing".into(),
                ));
            }
        }
        let first = self.knots.first().unwrap();
        let last = self.knots.last().unwrap();
        if first.0 != self.map_floor || first.1 != 0.0 || last.0 != self.map_ceiling || last.1 != 1.0
        {
            return Err(DataError::InvalidInput(
                "reward knots must run from (floor, 0) to (ceiling, 1)".into(),
            ));
        }
        for &(_, r) in &self.knots {
            if !(0.0..=1.0).contains(&r) {
                return Err(DataError::InvalidInput("knot rewards must lie in [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Reward for an hourly state: 1 above the MAP ceiling, 0 at or below the
/// floor, linear between knots, with sufficient urine output excusing MAP
/// values at or above the exempt floor.
pub fn compute_reward<F: Scalar>(
    map_mmhg: F,
    urine_ml_per_hour: Option<F>,
    config: &RewardConfig,
) -> F {
    let map = map_mmhg.to64();
    if map >= config.map_ceiling {
        return F::one();
    }
    if let Some(urine) = urine_ml_per_hour {
        if urine.to64() >= config.urine_exemption_threshold && map >= config.urine_exempt_map_floor
        {
            return F::one();
        }
    }
    if map <= config.map_floor {
        return F::zero();
    }
    for w in config.knots.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if map <= x1 {
            let frac = (map - x0) / (x1 - x0);
            return F::of(y0 + frac * (y1 - y0));
        }
    }
    F::one()
}

// ---------------------------------------------------------------------------
// Vasopressor dose conversion
// ---------------------------------------------------------------------------

/// Norepinephrine-equivalence factors per drug.
///
/// The defaults follow commonly used equivalence tables; norepinephrine is
/// pinned to 1 by definition. The table is plain config and can be replaced
/// wholesale from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionTable {
    pub factors: BTreeMap<String, f64>,
}

impl Default for ConversionTable {
    fn default() -> Self {
        let mut factors = BTreeMap::new();
        factors.insert("norepinephrine".to_string(), 1.0);
        factors.insert("epinephrine".to_string(), 1.0);
        factors.insert("phenylephrine".to_string(), 0.1);
        factors.insert("dopamine".to_string(), 0.01);
        factors.insert("vasopressin".to_string(), 2.5);
        ConversionTable { factors }
    }
}

/// Convert a drug infusion to a weight-normalized norepinephrine-equivalent
/// rate (mcg/kg per hour): `rate * factor / weight`.
pub fn norepi_equivalent(
    drug: &str,
    rate: f64,
    weight_kg: f64,
    table: &ConversionTable,
) -> DataResult<f64> {
    if rate < 0.0 {
        return Err(DataError::InvalidInput(format!("negative rate {rate}")));
    }
    if weight_kg <= 0.0 {
        return Err(DataError::InvalidInput(format!(
            "weight must be positive, got {weight_kg}"
        )));
    }
    let key = drug.to_ascii_lowercase();
    let factor = table
        .factors
        .get(&key)
        .ok_or_else(|| DataError::UnknownDrug(drug.to_string()))?;
    Ok(rate * factor / weight_kg)
}

// ---------------------------------------------------------------------------
// Raw hourly records and preprocessing
// ---------------------------------------------------------------------------

/// One hour of raw observations for one stay, before imputation.
///
/// `measurements` holds every value recorded for a variable within the hour,
/// in chronological order; an absent key or empty list means unobserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub stay_id: String,
    pub hour: u32,
    pub measurements: BTreeMap<String, Vec<f64>>,
    /// Total bolus volume this hour, mL.
    pub fluid_ml: f64,
    /// Norepinephrine-equivalent dose this hour, mcg/kg.
    pub vaso_rate: f64,
}

/// How one schema feature is derived from the raw variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureBinding {
    /// Carried-forward (then median-imputed) value of a variable.
    Value { variable: String },
    /// Indicator: 1 if the variable was observed within the last `hours`
    /// hourly windows (including the current one).
    MeasuredWithin { variable: String, hours: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// One binding per schema feature, same order.
    pub bindings: Vec<FeatureBinding>,
    /// Population medians used for never-observed variables.
    pub medians: BTreeMap<String, f64>,
    /// Variables aggregated by within-hour minimum instead of most-recent.
    pub min_aggregate_variables: Vec<String>,
    /// Variable driving the reward.
    pub map_variable: String,
    /// Variable checked for the urine exemption, if present in the data.
    pub urine_variable: String,
}

impl PreprocessConfig {
    pub fn with_bindings(bindings: Vec<FeatureBinding>, medians: BTreeMap<String, f64>) -> Self {
        PreprocessConfig {
            bindings,
            medians,
            min_aggregate_variables: vec!["map".into(), "sbp".into(), "dbp".into()],
            map_variable: "map".into(),
            urine_variable: "urine".into(),
        }
    }
}

/// Population median of every variable across a set of hourly records.
pub fn population_medians(records: &[HourlyRecord]) -> BTreeMap<String, f64> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rec in records {
        for (var, vals) in &rec.measurements {
            values.entry(var).or_default().extend_from_slice(vals);
        }
    }
    values
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(var, mut v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            (var.to_string(), med)
        })
        .collect()
}

/// Turn one stay's sorted hourly records into a trajectory: within-hour
/// aggregation (most-recent value, minimum for blood pressures), carry-forward
/// of observed values, median imputation for never-observed variables,
/// indicator features, grid actions, and MAP rewards.
pub fn preprocess<F: Scalar>(
    records: &[HourlyRecord],
    schema: &Schema,
    config: &PreprocessConfig,
    grid: &ActionGrid,
    reward_config: &RewardConfig,
) -> DataResult<Trajectory<F>> {
    if records.is_empty() {
        return Err(DataError::InvalidInput("empty record list".into()));
    }
    if config.bindings.len() != schema.len() {
        return Err(DataError::Schema(format!(
            "{} bindings for {} schema features",
            config.bindings.len(),
            schema.len()
        )));
    }
    let stay_id = records[0].stay_id.clone();
    for (i, rec) in records.iter().enumerate() {
        if rec.stay_id != stay_id {
            return Err(DataError::InvalidInput(format!(
                "mixed stay ids {} and {}",
                stay_id, rec.stay_id
            )));
        }
        if rec.hour != i as u32 + 1 {
            return Err(DataError::InvalidInput(format!(
                "records must cover hours 1..=T; got hour {} at position {}",
                rec.hour, i
            )));
        }
    }

    // carried-forward value and the hour it was last observed
    let mut last_value: BTreeMap<&str, f64> = BTreeMap::new();
    let mut last_hour: BTreeMap<&str, u32> = BTreeMap::new();

    let mut transitions = Vec::with_capacity(records.len());
    for rec in records {
        for (var, vals) in &rec.measurements {
            if vals.is_empty() {
                continue;
            }
            let agg = if config
                .min_aggregate_variables
                .iter()
                .any(|m| m.eq_ignore_ascii_case(var))
            {
                vals.iter().cloned().fold(f64::INFINITY, f64::min)
            } else {
                *vals.last().unwrap()
            };
            last_value.insert(var, agg);
            last_hour.insert(var, rec.hour);
        }

        let resolve = |variable: &str| -> DataResult<f64> {
            if let Some(v) = last_value.get(variable) {
                return Ok(*v);
            }
            config.medians.get(variable).copied().ok_or_else(|| {
                DataError::Schema(format!(
                    "variable {variable} never observed and has no population median"
                ))
            })
        };

        let mut features = Vec::with_capacity(schema.len());
        for (spec, binding) in schema.iter().zip(&config.bindings) {
            let value = match binding {
                FeatureBinding::Value { variable } => resolve(variable)?,
                FeatureBinding::MeasuredWithin { variable, hours } => {
                    match last_hour.get(variable.as_str()) {
                        Some(&h) if rec.hour - h < *hours => 1.0,
                        _ => 0.0,
                    }
                }
            };
            if !value.is_finite() {
                return Err(DataError::InvalidInput(format!(
                    "non-finite value for feature {}",
                    spec.name
                )));
            }
            features.push(F::of(value));
        }

        let map = resolve(&config.map_variable)?;
        let urine = last_value.get(config.urine_variable.as_str()).copied();
        let reward = compute_reward::<F>(F::of(map), urine.map(F::of), reward_config);
        let action = discretize_action(rec.fluid_ml, rec.vaso_rate, grid)?;

        transitions.push(Transition {
            t: rec.hour,
            state: StateVector::new(features),
            action,
            reward,
        });
    }

    Ok(Trajectory {
        stay_id,
        transitions,
    })
}

// ---------------------------------------------------------------------------
// JSON-Lines dataset files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    schema: Schema,
    #[serde(default = "default_split")]
    split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Serialize, Deserialize)]
struct TransitionLine<F> {
    stay_id: String,
    t: u32,
    state: Vec<F>,
    action: usize,
    reward: F,
}

pub fn save_dataset<F: Scalar>(dataset: &Dataset<F>, path: &Path) -> DataResult<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = HeaderLine {
        schema: dataset.schema.clone(),
        split: dataset.split,
    };
    serde_json::to_writer(&mut w, &header)
        .map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })?;
    w.write_all(b"\n")?;
    for traj in &dataset.trajectories {
        for tr in &traj.transitions {
            let line = TransitionLine {
                stay_id: traj.stay_id.clone(),
                t: tr.t,
                state: tr.state.features.clone(),
                action: tr.action,
                reward: tr.reward,
            };
            serde_json::to_writer(&mut w, &line)
                .map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset<F: Scalar>(path: &Path) -> DataResult<Dataset<F>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header: HeaderLine = match lines.next() {
        None => {
            // An entirely empty file is an empty dataset with an empty schema.
            return Ok(Dataset::new(Vec::new(), Vec::new(), Split::Train));
        }
        Some(line) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: 1,
                msg: format!("bad header: {e}"),
            })?
        }
    };

    let mut trajectories: Vec<Trajectory<F>> = Vec::new();
    let mut finished: std::collections::HashSet<String> = std::collections::HashSet::new();

    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TransitionLine<F> =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        if parsed.action >= NUM_ACTIONS {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("action id {} out of range 0..{NUM_ACTIONS}", parsed.action),
            });
        }
        if parsed.state.len() != header.schema.len() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!(
                    "state has {} features, schema declares {}",
                    parsed.state.len(),
                    header.schema.len()
                ),
            });
        }
        let transition = Transition {
            t: parsed.t,
            state: StateVector::new(parsed.state),
            action: parsed.action,
            reward: parsed.reward,
        };
        match trajectories.last_mut() {
            Some(traj) if traj.stay_id == parsed.stay_id => traj.transitions.push(transition),
            _ => {
                if !finished.insert(parsed.stay_id.clone()) {
                    return Err(DataError::DuplicateStay(parsed.stay_id));
                }
                trajectories.push(Trajectory {
                    stay_id: parsed.stay_id,
                    transitions: vec![transition],
                });
            }
        }
    }

    let dataset = Dataset::new(trajectories, header.schema, header.split);
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_grid_default_bins() {
        let grid = ActionGrid::default();
        // no fluid, no vasopressor
        assert_eq!(discretize_action(0.0, 0.0, &grid).unwrap(), 0);
        // fluid bin [200,500), vaso bin 0
        assert_eq!(discretize_action(300.0, 0.0, &grid).unwrap(), 1);
        // low-dose vasopressor (0,5), no fluid
        assert_eq!(discretize_action(0.0, 3.0, &grid).unwrap(), 4);
        // sub-200mL boluses are "no fluid"
        assert_eq!(discretize_action(150.0, 0.0, &grid).unwrap(), 0);
        // clamping into the top bins
        assert_eq!(discretize_action(5000.0, 500.0, &grid).unwrap(), 19);
    }

    #[test]
    fn action_grid_rejects_negative() {
        let grid = ActionGrid::default();
        assert!(discretize_action(-1.0, 0.0, &grid).is_err());
        assert!(discretize_action(0.0, -0.5, &grid).is_err());
    }

    #[test]
    fn action_components_round_trip() {
        assert_eq!(action_components(0).unwrap(), (0, 0));
        assert_eq!(action_components(7).unwrap(), (1, 3));
        assert_eq!(action_components(19).unwrap(), (4, 3));
        assert!(action_components(20).is_err());
        let grid = ActionGrid::default();
        for id in 0..NUM_ACTIONS {
            let (v, f) = action_components(id).unwrap();
            assert_eq!(grid.action_id(v, f), id);
        }
    }

    #[test]
    fn reward_endpoints_and_exemption() {
        let cfg = RewardConfig::default();
        cfg.validate().unwrap();
        assert_eq!(compute_reward::<f64>(70.0, None, &cfg), 1.0);
        assert_eq!(compute_reward::<f64>(65.0, None, &cfg), 1.0);
        assert_eq!(compute_reward::<f64>(28.0, None, &cfg), 0.0);
        assert_eq!(compute_reward::<f64>(20.0, None, &cfg), 0.0);
        // urine exemption for moderately low MAP
        assert_eq!(compute_reward::<f64>(57.0, Some(40.0), &cfg), 1.0);
        // no exemption below the exempt floor or with low urine output
        assert!(compute_reward::<f64>(50.0, Some(40.0), &cfg) < 1.0);
        assert!(compute_reward::<f64>(57.0, Some(10.0), &cfg) < 1.0);
    }

    #[test]
    fn reward_interpolates_between_knots() {
        let cfg = RewardConfig::default();
        // 50 sits on the (28,0)-(55,0.6) segment: 0.6 * (50-28)/(55-28)
        let expected = 0.6 * (50.0 - 28.0) / (55.0 - 28.0);
        let got = compute_reward::<f64>(50.0, None, &cfg);
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
        // 57.5 halfway between 55 and 60: (0.6 + 0.85) / 2
        let got = compute_reward::<f64>(57.5, None, &cfg);
        assert!((got - 0.725).abs() < 1e-12);
    }

    #[test]
    fn norepi_equivalents() {
        let table = ConversionTable::default();
        assert_eq!(norepi_equivalent("norepinephrine", 8.0, 80.0, &table).unwrap(), 0.1);
        assert_eq!(norepi_equivalent("dopamine", 0.0, 70.0, &table).unwrap(), 0.0);
        let phenyl = norepi_equivalent("phenylephrine", 100.0, 50.0, &table).unwrap();
        assert!((phenyl - 0.1 * 100.0 / 50.0).abs() < 1e-12);
        assert!(matches!(
            norepi_equivalent("midodrine", 1.0, 70.0, &table),
            Err(DataError::UnknownDrug(_))
        ));
    }

    fn toy_schema() -> Schema {
        vec![
            FeatureSpec {
                name: "map".into(),
                unit: "mmHg".into(),
                kind: FeatureKind::Continuous,
            },
            FeatureSpec {
                name: "lactate".into(),
                unit: "mmol/L".into(),
                kind: FeatureKind::Continuous,
            },
            FeatureSpec {
                name: "lactate_recent".into(),
                unit: "".into(),
                kind: FeatureKind::Indicator,
            },
        ]
    }

    fn toy_bindings() -> Vec<FeatureBinding> {
        vec![
            FeatureBinding::Value { variable: "map".into() },
            FeatureBinding::Value { variable: "lactate".into() },
            FeatureBinding::MeasuredWithin { variable: "lactate".into(), hours: 2 },
        ]
    }

    fn record(hour: u32, map: Vec<f64>, lactate: Vec<f64>) -> HourlyRecord {
        let mut m = BTreeMap::new();
        m.insert("map".to_string(), map);
        m.insert("lactate".to_string(), lactate);
        HourlyRecord {
            stay_id: "s1".into(),
            hour,
            measurements: m,
            fluid_ml: 0.0,
            vaso_rate: 0.0,
        }
    }

    #[test]
    fn preprocess_imputation_rules() {
        let schema = toy_schema();
        let mut medians = BTreeMap::new();
        medians.insert("map".to_string(), 70.0);
        medians.insert("lactate".to_string(), 2.1);
        let cfg = PreprocessConfig::with_bindings(toy_bindings(), medians);
        let records = vec![
            record(1, vec![72.0, 64.0], vec![]),
            record(2, vec![], vec![1.5]),
            record(3, vec![], vec![]),
            record(4, vec![], vec![]),
        ];
        let traj: Trajectory<f64> = preprocess(
            &records,
            &schema,
            &cfg,
            &ActionGrid::default(),
            &RewardConfig::default(),
        )
        .unwrap();
        traj.validate(&schema).unwrap();
        // hour 1: within-hour minimum for MAP, median for never-seen lactate
        assert_eq!(traj.transitions[0].state.features, vec![64.0, 2.1, 0.0]);
        // hour 2: MAP carried forward, lactate now observed
        assert_eq!(traj.transitions[1].state.features, vec![64.0, 1.5, 1.0]);
        // hour 3: lactate carried forward, still inside the 2-hour window
        assert_eq!(traj.transitions[2].state.features, vec![64.0, 1.5, 1.0]);
        // hour 4: indicator expires
        assert_eq!(traj.transitions[3].state.features, vec![64.0, 1.5, 0.0]);
        // reward from hour-1 MAP of 64: on the (60,0.85)-(65,1.0) segment
        let expected = 0.85 + 0.15 * (64.0 - 60.0) / 5.0;
        assert!((traj.transitions[0].reward - expected).abs() < 1e-12);
    }

    #[test]
    fn preprocess_rejects_empty_and_mismatched() {
        let schema = toy_schema();
        let cfg = PreprocessConfig::with_bindings(toy_bindings(), BTreeMap::new());
        let err = preprocess::<f64>(
            &[],
            &schema,
            &cfg,
            &ActionGrid::default(),
            &RewardConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::InvalidInput(_)));

        let bad_cfg = PreprocessConfig::with_bindings(vec![], BTreeMap::new());
        let err = preprocess::<f64>(
            &[record(1, vec![70.0], vec![])],
            &schema,
            &bad_cfg,
            &ActionGrid::default(),
            &RewardConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Schema(_)));
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let schema = toy_schema();
        let mut trajectories = Vec::new();
        for i in 0..10 {
            let transitions = (1..=3)
                .map(|t| Transition {
                    t,
                    state: StateVector::new(vec![
                        64.0 + i as f64 * 0.123456789,
                        2.0_f64.powi(-(i as i32)),
                        1.0,
                    ]),
                    action: (i * 2) % NUM_ACTIONS,
                    reward: 1.0 / (i as f64 + 3.0),
                })
                .collect();
            trajectories.push(Trajectory {
                stay_id: format!("stay-{i}"),
                transitions,
            });
        }
        let ds = Dataset::new(trajectories, schema, Split::Test);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let loaded: Dataset<f64> = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn load_rejects_bad_action_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"schema\":[{\"name\":\"x\",\"unit\":\"\",\"kind\":\"continuous\"}]}\n",
                "{\"stay_id\":\"a\",\"t\":1,\"state\":[0.5],\"action\":20,\"reward\":0.5}\n"
            ),
        )
        .unwrap();
        match load_dataset::<f64>(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds: Dataset<f64> = load_dataset(&path).unwrap();
        assert!(ds.trajectories.is_empty());
    }
}
