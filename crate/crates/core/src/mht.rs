//! Hypothesis tree over data-association histories.
//!
//! Leaves are scored recursively: a child's log-weight is its parent's plus the step's
//! measurement log-likelihood and assignment log-prior. Resampling is systematic, gated by
//! the effective sample size, and its sample count follows the KLD bound.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assoc::{
    assignment_prior, branch_assignments, build_cost_matrix, measurement_set_likelihood, AssocParams,
    Assignment, AssignmentTarget, MapState,
};
use crate::error::{Error, Result};
use crate::filter::{ukf_update, UkfParams};
use crate::types::{Landmark, LandmarkId, SemanticMeasurement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone)]
pub struct HypothesisNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub step: u64,
    pub assignment: Assignment,
    /// Unnormalized log posterior of the association history ending here.
    pub log_weight: f64,
    pub state: Arc<MapState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleParams {
    pub ess_fraction: f64,
    pub kld_epsilon: f64,
    pub kld_delta: f64,
    pub max_hypotheses: usize,
    pub rng_seed: u64,
    /// Cube the bracket of the KLD bound as in the original KLD-sampling derivation.
    pub kld_cube_bracket: bool,
}

impl Default for ResampleParams {
    fn default() -> Self {
        Self {
            ess_fraction: 0.5,
            kld_epsilon: 0.05,
            kld_delta: 0.01,
            max_hypotheses: 20,
            rng_seed: 0,
            kld_cube_bracket: false,
        }
    }
}

impl ResampleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            return Err(Error::InvalidParameter("ess_fraction must lie in (0, 1]".into()));
        }
        if !(self.kld_epsilon > 0.0) {
            return Err(Error::InvalidParameter("kld_epsilon must be positive".into()));
        }
        if !(self.kld_delta > 0.0 && self.kld_delta < 1.0) {
            return Err(Error::InvalidParameter("kld_delta must lie in (0, 1)".into()));
        }
        if self.max_hypotheses == 0 {
            return Err(Error::InvalidParameter("max_hypotheses must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to grow the tree by one time step.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub assoc: &'a AssocParams,
    pub ukf: &'a UkfParams,
    pub max_branches: usize,
    pub plausibility_gap: f64,
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative error < 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// KLD sample-count bound for `k` occupied bins:
/// `n = (k−1)/(2ε) · (1 − 2/(9(k−1)) + sqrt(2/(9(k−1))) · z_{1−δ})`, floored.
pub fn kld_bound(k: usize, epsilon: f64, delta: f64) -> Result<usize> {
    kld_bound_with(k, epsilon, delta, false)
}

pub fn kld_bound_with(k: usize, epsilon: f64, delta: f64, cube_bracket: bool) -> Result<usize> {
    if k < 2 {
        return Err(Error::Domain(format!("kld bound needs k >= 2, got {k}")));
    }
    let km1 = (k - 1) as f64;
    let z = normal_quantile(1.0 - delta);
    let a = 2.0 / (9.0 * km1);
    let bracket = 1.0 - a + a.sqrt() * z;
    let bracket = if cube_bracket { bracket.powi(3) } else { bracket };
    let n = km1 / (2.0 * epsilon) * bracket;
    Ok(n.max(0.0).floor() as usize)
}

/// `1 / Σ wᵢ²` for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let s: f64 = weights.iter().sum();
    if weights.is_empty() || (s - 1.0).abs() > 1e-6 {
        return Err(Error::ContractViolation(format!("weights must be normalized, sum = {s}")));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// Multiplicity of each index under systematic resampling with `n` probes at
/// `(u0 + i) / n`, `u0 ∈ [0, 1)`.
pub fn systematic_counts(weights: &[f64], n: usize, u0: f64) -> Vec<usize> {
    let mut counts = vec![0usize; weights.len()];
    if weights.is_empty() || n == 0 {
        return counts;
    }
    let total: f64 = weights.iter().sum();
    let mut cum = weights[0] / total;
    let mut j = 0usize;
    for i in 0..n {
        let probe = (u0 + i as f64) / n as f64;
        while probe >= cum && j + 1 < weights.len() {
            j += 1;
            cum += weights[j] / total;
        }
        counts[j] += 1;
    }
    counts
}

/// Softmax of log-weights.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / log_w.len() as f64; log_w.len()];
    }
    let e: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Applies one step's assignment to a parent map state.
pub fn apply_assignment(
    parent: &MapState,
    assignment: &Assignment,
    measurements: &[SemanticMeasurement],
    assoc: &AssocParams,
    ukf: &UkfParams,
) -> Result<MapState> {
    if assignment.targets.len() != measurements.len() {
        return Err(Error::LengthMismatch(assignment.targets.len(), measurements.len()));
    }
    let mut state = parent.clone();
    for (i, (m, &t)) in measurements.iter().zip(&assignment.targets).enumerate() {
        match t {
            AssignmentTarget::New => {
                let id = LandmarkId::from_creation(m.scene_id, i);
                state.landmarks.insert(
                    id,
                    Landmark {
                        id,
                        class: m.class,
                        mean: m.position,
                        cov: assoc.meas_cov,
                        assign_count: 1,
                        submap_id: state.current_submap,
                        last_seen: m.time,
                        first_scene: m.scene_id,
                        last_scene: m.scene_id,
                    },
                );
            }
            AssignmentTarget::Existing(id) | AssignmentTarget::Previous(id) => {
                let current = state.current_submap;
                let lm = state
                    .landmarks
                    .get_mut(&id)
                    .ok_or_else(|| Error::ContractViolation(format!("unknown landmark {id:?}")))?;
                let mut prior = lm.clone();
                if matches!(t, AssignmentTarget::Previous(_)) {
                    if !assoc.dirac_classes.contains(&lm.class) {
                        prior.cov += assoc.trans_cov(lm.class);
                    }
                    prior.submap_id = current;
                    prior.first_scene = m.scene_id;
                }
                let mut updated = ukf_update(&prior, m, &assoc.meas_cov, ukf)?;
                updated.assign_count += 1;
                updated.last_seen = m.time;
                updated.last_scene = m.scene_id;
                *lm = updated;
            }
            AssignmentTarget::FalsePositive => state.fp_total += 1,
        }
    }
    Ok(state)
}

/// Log-weight increment of one step: measurement log-likelihood plus assignment log-prior.
pub fn step_log_increment(
    assignment: &Assignment,
    measurements: &[SemanticMeasurement],
    parent: &MapState,
    assoc: &AssocParams,
) -> Result<f64> {
    Ok(measurement_set_likelihood(assignment, measurements, parent, assoc)? + assignment_prior(assignment, assoc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOutcome {
    pub triggered: bool,
    pub ess: f64,
    pub probes: usize,
    /// Surviving leaves with their multiplicities.
    pub survivors: Vec<(NodeId, usize)>,
}

#[derive(Debug, Clone)]
pub struct HypothesisTree {
    nodes: BTreeMap<NodeId, HypothesisNode>,
    children: BTreeMap<NodeId, usize>,
    leaves: Vec<NodeId>,
    next_id: u64,
    step: u64,
    rng: ChaCha8Rng,
}

impl HypothesisTree {
    pub fn new(root_state: MapState, rng_seed: u64) -> Self {
        let root = HypothesisNode {
            id: NodeId(0),
            parent: None,
            step: 0,
            assignment: Assignment::empty(root_state.fp_total),
            log_weight: 0.0,
            state: Arc::new(root_state),
        };
        let mut nodes = BTreeMap::new();
        nodes.insert(root.id, root);
        Self {
            nodes,
            children: BTreeMap::new(),
            leaves: vec![NodeId(0)],
            next_id: 1,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&HypothesisNode> {
        self.nodes.get(&id)
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn leaf_nodes(&self) -> impl Iterator<Item = &HypothesisNode> {
        self.leaves.iter().map(|id| &self.nodes[id])
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let lw: Vec<f64> = self.leaf_nodes().map(|n| n.log_weight).collect();
        normalize_log_weights(&lw)
    }

    /// Highest-weight leaf; ties go to the lowest node id.
    pub fn best_leaf(&self) -> &HypothesisNode {
        self.leaf_nodes()
            .fold(None::<&HypothesisNode>, |best, n| match best {
                Some(b) if b.log_weight > n.log_weight || (b.log_weight == n.log_weight && b.id < n.id) => Some(b),
                _ => Some(n),
            })
            .expect("tree always has a leaf")
    }

    /// Association history of a node, root first (the root's empty assignment excluded).
    pub fn path(&self, id: NodeId) -> Vec<&Assignment> {
        let mut out = vec![];
        let mut cur = self.nodes.get(&id);
        while let Some(n) = cur {
            if n.parent.is_some() {
                out.push(&n.assignment);
            }
            cur = n.parent.and_then(|p| self.nodes.get(&p));
        }
        out.reverse();
        out
    }

    fn add_child(&mut self, parent: NodeId, assignment: Assignment, log_weight: f64, state: Arc<MapState>) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        let step = self.nodes[&parent].step + 1;
        self.nodes.insert(id, HypothesisNode { id, parent: Some(parent), step, assignment, log_weight, state });
        *self.children.entry(parent).or_insert(0) += 1;
        id
    }

    /// Creates one child of `leaf` per branch. Returns the new leaf ids; `leaf` stops
    /// being a leaf.
    pub fn extend(
        &mut self,
        leaf: NodeId,
        branches: &[Assignment],
        measurements: &[SemanticMeasurement],
        ctx: &StepContext<'_>,
    ) -> Result<Vec<NodeId>> {
        if branches.is_empty() {
            return Err(Error::ContractViolation("extend needs at least one branch".into()));
        }
        let pos = self
            .leaves
            .iter()
            .position(|&l| l == leaf)
            .ok_or_else(|| Error::ContractViolation(format!("{leaf:?} is not a leaf")))?;
        let parent = &self.nodes[&leaf];
        let parent_state = Arc::clone(&parent.state);
        let parent_w = parent.log_weight;
        let mut scored = Vec::with_capacity(branches.len());
        for a in branches {
            let inc = step_log_increment(a, measurements, &parent_state, ctx.assoc)?;
            let state = if a.targets.is_empty() {
                Arc::clone(&parent_state)
            } else {
                Arc::new(apply_assignment(&parent_state, a, measurements, ctx.assoc, ctx.ukf)?)
            };
            scored.push((a.clone(), parent_w + inc, state));
        }
        self.leaves.remove(pos);
        let mut ids = Vec::with_capacity(scored.len());
        for (a, w, s) in scored {
            ids.push(self.add_child(leaf, a, w, s));
        }
        self.leaves.extend(&ids);
        self.leaves.sort();
        Ok(ids)
    }

    /// Grows every leaf with its ranked association branches for one step.
    pub fn advance(&mut self, measurements: &[SemanticMeasurement], ctx: &StepContext<'_>) -> Result<()> {
        let leaves = self.leaves.clone();
        for leaf in leaves {
            let state = Arc::clone(&self.nodes[&leaf].state);
            let problem = build_cost_matrix(measurements, &state, ctx.assoc)?;
            let branches = branch_assignments(&problem, ctx.max_branches, ctx.plausibility_gap)?;
            self.extend(leaf, &branches, measurements, ctx)?;
        }
        self.step += 1;
        Ok(())
    }

    /// Extends every leaf with exactly one externally chosen assignment.
    pub fn advance_with<F>(&mut self, measurements: &[SemanticMeasurement], ctx: &StepContext<'_>, mut choose: F) -> Result<()>
    where
        F: FnMut(&MapState) -> Result<Assignment>,
    {
        let leaves = self.leaves.clone();
        for leaf in leaves {
            let state = Arc::clone(&self.nodes[&leaf].state);
            let a = choose(&state)?;
            self.extend(leaf, &[a], measurements, ctx)?;
        }
        self.step += 1;
        Ok(())
    }

    /// Keeps only `keep` (leaf, new log-weight) pairs and removes every node that no
    /// longer has a surviving descendant.
    fn retain_leaves(&mut self, keep: &[(NodeId, f64)]) {
        let keep_map: BTreeMap<NodeId, f64> = keep.iter().copied().collect();
        let dropped: Vec<NodeId> = self.leaves.iter().copied().filter(|l| !keep_map.contains_key(l)).collect();
        for leaf in dropped {
            let mut cur = Some(leaf);
            while let Some(id) = cur {
                if self.children.get(&id).copied().unwrap_or(0) > 0 || self.nodes[&id].parent.is_none() {
                    break;
                }
                let parent = self.nodes.remove(&id).and_then(|n| n.parent);
                self.children.remove(&id);
                if let Some(p) = parent {
                    let c = self.children.get_mut(&p).expect("parent has children");
                    *c -= 1;
                }
                cur = parent;
            }
        }
        for (&id, &w) in &keep_map {
            if let Some(n) = self.nodes.get_mut(&id) {
                n.log_weight = w;
            }
        }
        self.leaves = keep_map.keys().copied().collect();
    }

    /// ESS-gated systematic resampling with a KLD-bounded sample count.
    ///
    /// Resampling runs when `ESS < ess_fraction · N`, or whenever the leaf count exceeds
    /// `max_hypotheses`. Survivors are collapsed to one leaf each with weight equal to
    /// their resampled share.
    pub fn resample(&mut self, params: &ResampleParams) -> Result<ResampleOutcome> {
        let w = self.normalized_weights();
        let n_leaves = w.len();
        let ess = effective_sample_size(&w)?;
        if n_leaves <= 1 || (ess >= params.ess_fraction * n_leaves as f64 && n_leaves <= params.max_hypotheses) {
            return Ok(ResampleOutcome {
                triggered: false,
                ess,
                probes: 0,
                survivors: self.leaves.iter().map(|&l| (l, 1)).collect(),
            });
        }
        let u0: f64 = self.rng.random();
        let (counts, probes) = kld_systematic(&w, u0, params);
        let keep: Vec<(NodeId, f64)> = self
            .leaves
            .iter()
            .zip(&counts)
            .filter(|(_, &c)| c > 0)
            .map(|(&id, &c)| (id, (c as f64 / probes as f64).ln()))
            .collect();
        let survivors = self.leaves.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(&id, &c)| (id, c)).collect();
        self.retain_leaves(&keep);
        Ok(ResampleOutcome { triggered: true, ess, probes, survivors })
    }

    /// Likelihood thresholding used by the plain multiple-hypothesis baseline: while the
    /// tree holds more than `max_hypotheses` leaves, keep the best third.
    pub fn threshold_best_third(&mut self, max_hypotheses: usize) {
        if self.leaves.len() <= max_hypotheses {
            return;
        }
        let mut ranked: Vec<(NodeId, f64)> = self.leaf_nodes().map(|n| (n.id, n.log_weight)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut keep = ranked.len();
        while keep > max_hypotheses {
            keep = keep.div_ceil(3);
        }
        ranked.truncate(keep.max(1));
        self.retain_leaves(&ranked);
    }
}

/// Systematic selection whose probe count grows with the KLD bound of the number of
/// distinct survivors, capped at `max_hypotheses`. Returns multiplicities and the final
/// probe count.
pub fn kld_systematic(weights: &[f64], u0: f64, params: &ResampleParams) -> (Vec<usize>, usize) {
    let bound = |k: usize| -> usize {
        kld_bound_with(k, params.kld_epsilon, params.kld_delta, params.kld_cube_bracket)
            .unwrap_or(params.max_hypotheses)
            .clamp(1, params.max_hypotheses)
    };
    let mut n = bound(2);
    loop {
        let counts = systematic_counts(weights, n, u0);
        let k = counts.iter().filter(|&&c| c > 0).count();
        let target = bound(k);
        if target <= n {
            return (counts, n);
        }
        n = target;
    }
}
