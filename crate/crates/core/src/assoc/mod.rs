//! Dirichlet-process data association.
//!
//! Each measurement may be explained by a landmark already seen in the current submap,
//! a landmark from an earlier submap, a new landmark, or a false positive. The case
//! likelihoods become negative-log costs for a linear assignment, whose optimum and
//! ranked alternatives seed the hypothesis branches.

pub mod branches;
pub mod hungarian;

use std::collections::{BTreeMap, BTreeSet};

pub use branches::generate_branches;
pub use hungarian::{is_forbidden, solve_assignment, CostMatrix, LinearAssignment, FORBIDDEN_THRESHOLD};

use crate::error::{Error, Result};
use crate::types::{
    gaussian_log_density, is_spd, mahalanobis_sq, ClassLabel, Landmark, LandmarkId, Mat3,
    SemanticMeasurement,
};

/// Log-domain stand-in for `log 0`.
pub const LOG_ZERO: f64 = -1e18;

/// How the existing-landmark case weights the assignment count `N^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpWeightMode {
    /// `exp(N^k)` as printed for the existing-landmark likelihood.
    Exp,
    /// `N^k`, the usual Chinese-restaurant weight.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssocParams {
    pub meas_cov: Mat3,
    pub trans_cov_by_class: BTreeMap<ClassLabel, Mat3>,
    /// Transitional covariance for non-Dirac classes missing from `trans_cov_by_class`.
    pub default_trans_cov: Mat3,
    pub dirichlet_alpha: f64,
    pub fp_rate: f64,
    pub map_volume: f64,
    pub lambda_new: f64,
    pub lambda_fp: f64,
    pub prior_volume: f64,
    /// Explicit `p_s`; classes absent here get `1 / n_classes`.
    pub class_prior: BTreeMap<ClassLabel, f64>,
    pub n_classes: usize,
    pub dirac_classes: BTreeSet<ClassLabel>,
    pub dp_weight_mode: DpWeightMode,
    /// Proportionality constant of the false-positive likelihood.
    pub fp_scale: f64,
    /// Squared Mahalanobis gate for landmark candidates. `f64::INFINITY` disables gating.
    pub gate_mahalanobis_sq: f64,
}

impl Default for AssocParams {
    fn default() -> Self {
        Self {
            meas_cov: Mat3::identity() * 0.04,
            trans_cov_by_class: BTreeMap::new(),
            default_trans_cov: Mat3::identity() * 0.25,
            dirichlet_alpha: 1.0,
            fp_rate: 0.05,
            map_volume: 8000.0,
            lambda_new: 0.05,
            lambda_fp: 0.01,
            prior_volume: 20.0,
            class_prior: BTreeMap::new(),
            n_classes: 8,
            dirac_classes: BTreeSet::new(),
            dp_weight_mode: DpWeightMode::Exp,
            fp_scale: 1.0,
            gate_mahalanobis_sq: 16.27,
        }
    }
}

impl AssocParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("fp_rate", self.fp_rate),
            ("map_volume", self.map_volume),
            ("lambda_new", self.lambda_new),
            ("lambda_fp", self.lambda_fp),
            ("prior_volume", self.prior_volume),
            ("fp_scale", self.fp_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gate_mahalanobis_sq > 0.0) {
            return Err(Error::InvalidParameter("gate_mahalanobis_sq must be positive".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidParameter("n_classes must be positive".into()));
        }
        if !is_spd(&self.meas_cov) {
            return Err(Error::NotSpd("meas_cov"));
        }
        if !is_spd(&self.default_trans_cov) {
            return Err(Error::NotSpd("default_trans_cov"));
        }
        if self.trans_cov_by_class.values().any(|c| !is_spd(c)) {
            return Err(Error::NotSpd("trans_cov_by_class"));
        }
        if self.class_prior.values().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::InvalidParameter("class_prior values must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn class_prior_of(&self, c: ClassLabel) -> f64 {
        self.class_prior
            .get(&c)
            .copied()
            .unwrap_or(1.0 / self.n_classes as f64)
    }

    pub fn trans_cov(&self, c: ClassLabel) -> &Mat3 {
        self.trans_cov_by_class.get(&c).unwrap_or(&self.default_trans_cov)
    }

    /// Covariance of the previous-submap case: `Σ^z` for Dirac classes, `Σ^z + Σ^α` otherwise.
    pub fn previous_cov(&self, c: ClassLabel) -> Mat3 {
        if self.dirac_classes.contains(&c) {
            self.meas_cov
        } else {
            self.meas_cov + self.trans_cov(c)
        }
    }
}

/// Landmark map and false-positive tally of one hypothesis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapState {
    pub landmarks: BTreeMap<LandmarkId, Landmark>,
    /// Number of false positives so far (`N^0`).
    pub fp_total: u32,
    pub current_submap: u32,
}

impl MapState {
    pub fn new(current_submap: u32) -> Self {
        Self { current_submap, ..Default::default() }
    }

    pub fn is_current(&self, lm: &Landmark) -> bool {
        lm.submap_id == self.current_submap
    }

    /// The association case a landmark falls under in this state.
    pub fn target_for(&self, id: LandmarkId) -> Option<AssignmentTarget> {
        self.landmarks.get(&id).map(|lm| {
            if self.is_current(lm) {
                AssignmentTarget::Existing(id)
            } else {
                AssignmentTarget::Previous(id)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AssignmentTarget {
    Existing(LandmarkId),
    Previous(LandmarkId),
    New,
    FalsePositive,
}

impl AssignmentTarget {
    pub fn landmark(&self) -> Option<LandmarkId> {
        match self {
            AssignmentTarget::Existing(id) | AssignmentTarget::Previous(id) => Some(*id),
            _ => None,
        }
    }
}

/// Per-measurement association for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub targets: Vec<AssignmentTarget>,
    pub n_new: u32,
    pub n_fp: u32,
    pub n_meas: u32,
    /// False positives including this step.
    pub fp_total: u32,
    /// Total assignment cost in nats (0 when built by hand).
    pub cost: f64,
}

impl Assignment {
    pub fn from_targets(targets: Vec<AssignmentTarget>, fp_before: u32) -> Self {
        let n_new = targets.iter().filter(|t| **t == AssignmentTarget::New).count() as u32;
        let n_fp = targets
            .iter()
            .filter(|t| **t == AssignmentTarget::FalsePositive)
            .count() as u32;
        Self {
            n_meas: targets.len() as u32,
            targets,
            n_new,
            n_fp,
            fp_total: fp_before + n_fp,
            cost: 0.0,
        }
    }

    pub fn empty(fp_before: u32) -> Self {
        Self::from_targets(vec![], fp_before)
    }

    /// Each landmark explains at most one measurement.
    pub fn is_consistent(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.targets
            .iter()
            .filter_map(AssignmentTarget::landmark)
            .all(|id| seen.insert(id))
            && self.n_new + self.n_fp <= self.n_meas
    }
}

fn landmark_of<'a>(state: &'a MapState, id: LandmarkId) -> Result<&'a Landmark> {
    state
        .landmarks
        .get(&id)
        .ok_or_else(|| Error::ContractViolation(format!("unknown landmark {id:?}")))
}

/// Log of the position density for an existing or previous landmark (no class terms).
fn log_position_density(
    m: &SemanticMeasurement,
    lm: &Landmark,
    previous: bool,
    params: &AssocParams,
) -> Result<f64> {
    let d = m.position - lm.mean;
    if previous {
        gaussian_log_density(&d, &params.previous_cov(lm.class))
    } else {
        gaussian_log_density(&d, &params.meas_cov)
    }
}

/// Same-class landmarks inside the gate; these form the product in the false-positive case.
pub fn candidate_landmarks<'a>(
    m: &'a SemanticMeasurement,
    state: &'a MapState,
    params: &'a AssocParams,
) -> impl Iterator<Item = &'a Landmark> + 'a {
    state.landmarks.values().filter(move |lm| {
        if lm.class != m.class {
            return false;
        }
        if params.gate_mahalanobis_sq.is_infinite() {
            return true;
        }
        // Predictive covariance: the landmark's own uncertainty widens the gate.
        let cov = lm.cov
            + if state.is_current(lm) {
                params.meas_cov
            } else {
                params.previous_cov(lm.class)
            };
        mahalanobis_sq(&(m.position - lm.mean), &cov)
            .map(|d2| d2 <= params.gate_mahalanobis_sq)
            .unwrap_or(false)
    })
}

/// Log of the association likelihood of `m` with `target`. Class mismatch yields
/// [`LOG_ZERO`].
pub fn log_association_likelihood(
    m: &SemanticMeasurement,
    target: AssignmentTarget,
    state: &MapState,
    params: &AssocParams,
) -> Result<f64> {
    match target {
        AssignmentTarget::Existing(id) => {
            let lm = landmark_of(state, id)?;
            if lm.class != m.class {
                return Ok(LOG_ZERO);
            }
            let weight = match params.dp_weight_mode {
                DpWeightMode::Exp => lm.assign_count as f64,
                DpWeightMode::Linear => (lm.assign_count.max(1) as f64).ln(),
            };
            Ok(weight + log_position_density(m, lm, false, params)?)
        }
        AssignmentTarget::Previous(id) => {
            let lm = landmark_of(state, id)?;
            if lm.class != m.class {
                return Ok(LOG_ZERO);
            }
            log_position_density(m, lm, true, params)
        }
        AssignmentTarget::New => Ok((params.dirichlet_alpha / params.map_volume).ln()),
        AssignmentTarget::FalsePositive => {
            let base = if state.fp_total > 0 {
                params.fp_rate * state.fp_total as f64
            } else {
                params.fp_rate * params.dirichlet_alpha
            };
            let mut log_prod = 0.0;
            for lm in candidate_landmarks(m, state, params) {
                log_prod += log_position_density(m, lm, !state.is_current(lm), params)?;
            }
            Ok(params.fp_scale.ln() + base.ln() - log_prod)
        }
    }
}

/// Association likelihood as a density (may overflow to `inf` for large counts in
/// [`DpWeightMode::Exp`]; prefer the log form for arithmetic).
pub fn association_likelihood(
    m: &SemanticMeasurement,
    target: AssignmentTarget,
    state: &MapState,
    params: &AssocParams,
) -> Result<f64> {
    let l = log_association_likelihood(m, target, state, params)?;
    Ok(if l <= LOG_ZERO { 0.0 } else { l.exp() })
}

/// Log-likelihood of all measurements of a step under `assignment`, assuming conditional
/// independence. Landmark targets contribute `log p_s(c) + log δ(c, γ) + log f(p − π)`;
/// new and false-positive targets contribute their case likelihood.
pub fn measurement_set_likelihood(
    assignment: &Assignment,
    measurements: &[SemanticMeasurement],
    state: &MapState,
    params: &AssocParams,
) -> Result<f64> {
    if assignment.targets.len() != measurements.len() {
        return Err(Error::LengthMismatch(assignment.targets.len(), measurements.len()));
    }
    let mut total = 0.0;
    for (m, &t) in measurements.iter().zip(&assignment.targets) {
        let term = match t {
            AssignmentTarget::Existing(id) | AssignmentTarget::Previous(id) => {
                let lm = landmark_of(state, id)?;
                if lm.class != m.class {
                    return Ok(LOG_ZERO);
                }
                let previous = matches!(t, AssignmentTarget::Previous(_));
                params.class_prior_of(m.class).ln() + log_position_density(m, lm, previous, params)?
            }
            AssignmentTarget::New | AssignmentTarget::FalsePositive => {
                log_association_likelihood(m, t, state, params)?
            }
        };
        total += term;
    }
    Ok(total.max(LOG_ZERO))
}

pub fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Log Poisson PMF with mean `mean`.
pub fn ln_poisson(n: u32, mean: f64) -> f64 {
    -mean + n as f64 * mean.ln() - ln_factorial(n)
}

/// Log assignment prior `(N^n! N^f! / N^m!) p_n(N^n) p_f(N^f)` with Poisson count priors.
pub fn assignment_prior(assignment: &Assignment, params: &AssocParams) -> f64 {
    let a = assignment;
    ln_factorial(a.n_new) + ln_factorial(a.n_fp) - ln_factorial(a.n_meas)
        + ln_poisson(a.n_new, params.lambda_new * params.prior_volume)
        + ln_poisson(a.n_fp, params.lambda_fp * params.prior_volume)
}

/// Cost matrix for one hypothesis and one step, with the meaning of every column.
#[derive(Debug, Clone)]
pub struct AssociationProblem {
    pub costs: CostMatrix,
    pub columns: Vec<AssignmentTarget>,
    /// `N^0` of the state the matrix was built from.
    pub fp_before: u32,
}

impl AssociationProblem {
    /// Converts a row-to-column solution to an [`Assignment`].
    pub fn assignment_from(&self, sol: &LinearAssignment) -> Assignment {
        let targets = sol.row_to_col.iter().map(|&c| self.columns[c]).collect();
        let mut a = Assignment::from_targets(targets, self.fp_before);
        a.cost = sol.cost;
        a
    }
}

/// Builds the negative-log-likelihood cost matrix: one column per gated landmark (class
/// mismatch or gate failure → `+∞`), then one new-landmark and one false-positive column
/// per measurement.
pub fn build_cost_matrix(
    measurements: &[SemanticMeasurement],
    state: &MapState,
    params: &AssocParams,
) -> Result<AssociationProblem> {
    let n = measurements.len();
    let mut lm_ids: BTreeSet<LandmarkId> = BTreeSet::new();
    for m in measurements {
        lm_ids.extend(candidate_landmarks(m, state, params).map(|lm| lm.id));
    }
    let mut columns: Vec<AssignmentTarget> = lm_ids
        .iter()
        .map(|&id| state.target_for(id).expect("candidate exists"))
        .collect();
    let n_lm = columns.len();
    columns.extend(std::iter::repeat_n(AssignmentTarget::New, n));
    columns.extend(std::iter::repeat_n(AssignmentTarget::FalsePositive, n));

    let mut costs = CostMatrix::new(n, columns.len(), f64::INFINITY);
    for (i, m) in measurements.iter().enumerate() {
        let gated: BTreeSet<LandmarkId> =
            candidate_landmarks(m, state, params).map(|lm| lm.id).collect();
        for (j, &t) in columns[..n_lm].iter().enumerate() {
            let id = t.landmark().expect("landmark column");
            if !gated.contains(&id) {
                continue;
            }
            let l = log_association_likelihood(m, t, state, params)?;
            if l > LOG_ZERO {
                costs.set(i, j, -l);
            }
        }
        costs.set(i, n_lm + i, -log_association_likelihood(m, AssignmentTarget::New, state, params)?);
        costs.set(
            i,
            n_lm + n + i,
            -log_association_likelihood(m, AssignmentTarget::FalsePositive, state, params)?,
        );
    }
    Ok(AssociationProblem { costs, columns, fp_before: state.fp_total })
}

/// Optimal assignment followed by ranked alternatives, converted to [`Assignment`]s.
pub fn branch_assignments(
    problem: &AssociationProblem,
    max_branches: usize,
    plausibility_gap: f64,
) -> Result<Vec<Assignment>> {
    if problem.costs.rows() == 0 {
        return Ok(vec![Assignment::empty(problem.fp_before)]);
    }
    let best = solve_assignment(&problem.costs)?;
    Ok(generate_branches(&problem.costs, &best, max_branches, plausibility_gap)
        .iter()
        .map(|s| problem.assignment_from(s))
        .collect())
}
