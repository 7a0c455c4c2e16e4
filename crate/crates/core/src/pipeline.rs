//! Full mapping pipeline over a measurement and odometry log.
//!
//! Per scene the body-frame measurements are moved to the world frame with the current
//! pose estimate and associated by the selected estimator. Every `submap_length` scenes
//! the hypotheses are fused, landmark factors are added to the pose graph, the submap is
//! gated and searched for loops, and the graph is re-optimized. Keyframes every
//! `keyframe_interval` scenes carry the pose variables; other scenes hang off the
//! previous keyframe through odometry.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix6, Vector6};

use crate::assoc::hungarian::{solve_assignment, CostMatrix};
use crate::assoc::{AssignmentTarget, Assignment, AssocParams, MapState};
use crate::config::{LandmarkFactorMode, Mode, RunConfig};
use crate::error::{Error, Result};
use crate::filter::fuse_hypotheses;
use crate::graph::{
    information_from_cov, optimize, pose_information, BetweenKind, Factor, GraphState, LmParams, Robust,
};
use crate::io::MetricsRow;
use crate::mht::{HypothesisTree, StepContext};
use crate::placerec::{normalized_histogram, LoopClosure, LoopDetector, SceneDescriptor};
use crate::submap::{gate, gate_label, submap_entropy, tfidf_score, Corpus, GateDecision, SubmapSummary};
use crate::types::{ClassHistogram, Landmark, LandmarkId, Pose, SemanticMeasurement};

/// Logs consumed by [`run_pipeline`].
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    /// Body-frame measurements, scene ids indexing the odometry rows.
    pub measurements: Vec<SemanticMeasurement>,
    /// `(time, increment from the previous scene)`; the first increment is ignored.
    pub odometry: Vec<(f64, Pose)>,
    /// Optional ground truth aligned with the odometry rows. Its first pose anchors the
    /// estimate; otherwise the start is the identity.
    pub ground_truth: Option<Vec<(f64, Pose)>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Vec<(f64, Pose)>,
    pub map: Vec<Landmark>,
    pub metrics: Vec<MetricsRow>,
    pub closures: Vec<LoopClosure>,
    pub gate_samples: Vec<(SubmapSummary, GateDecision)>,
    pub summaries: Vec<SubmapSummary>,
    /// Final trajectory error, when ground truth is available.
    pub rmse: Option<f64>,
    /// Dead-reckoning error, when ground truth is available.
    pub odometry_rmse: Option<f64>,
    /// Leaf count after pruning, averaged over scenes.
    pub mean_hypotheses: f64,
}

/// Radius (m) within which two ground-truth positions count as a revisit when labelling
/// gate training samples.
const REVISIT_RADIUS: f64 = 3.0;

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    assoc: AssocParams,
    ukf: crate::filter::UkfParams,
    lm: LmParams,
    n_scenes: usize,
    /// Body-frame measurements per scene.
    body: Vec<Vec<SemanticMeasurement>>,
    /// Dead-reckoning poses.
    dead: Vec<Pose>,
    gt: Option<Vec<Pose>>,
    graph: GraphState,
    /// Estimated keyframe poses, by scene index.
    keyframes: BTreeMap<u64, Pose>,
    map: BTreeMap<LandmarkId, Landmark>,
    tree: HypothesisTree,
    submap: u32,
    submap_start: usize,
    /// Estimate of each processed scene at processing time.
    online: Vec<Pose>,
    detector: LoopDetector,
    corpus: Corpus,
    closures: Vec<LoopClosure>,
    gate_samples: Vec<(SubmapSummary, GateDecision)>,
    summaries: Vec<SubmapSummary>,
    metrics: Vec<MetricsRow>,
    sq_err: f64,
    hyp_sum: f64,
}

fn tree_seed(run_seed: u64, submap: u32) -> u64 {
    run_seed ^ (submap as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a RunConfig, inputs: &RunInputs) -> Result<Self> {
        let n_scenes = inputs.odometry.len();
        if n_scenes == 0 {
            return Err(Error::Empty("odometry log"));
        }
        let gt: Option<Vec<Pose>> = match &inputs.ground_truth {
            Some(g) => {
                if g.len() != n_scenes {
                    return Err(Error::LengthMismatch(g.len(), n_scenes));
                }
                for (k, ((ta, _), (tb, _))) in g.iter().zip(&inputs.odometry).enumerate() {
                    if (ta - tb).abs() > 1e-6 {
                        return Err(Error::ContractViolation(format!("ground truth time {ta} != odometry time {tb} at row {k}")));
                    }
                }
                Some(g.iter().map(|p| p.1).collect())
            }
            None => None,
        };
        let start = gt.as_ref().map_or_else(Pose::identity, |g| g[0]);
        let dead = integrate_odometry(start, &inputs.odometry);
        let mean_detections = inputs.measurements.len() as f64 / n_scenes as f64;
        let assoc = cfg.assoc_params(mean_detections);
        assoc.validate()?;

        let mut graph = GraphState::new();
        graph.poses.insert(0, start);
        graph.add_factor(Factor::Prior {
            pose: 0,
            measured: start,
            information: pose_information(cfg.prior_sigma_t, cfg.prior_sigma_r),
            robust: Robust::None,
        })?;
        let mut keyframes = BTreeMap::new();
        keyframes.insert(0, start);

        Ok(Self {
            cfg,
            assoc,
            ukf: cfg.ukf_params(),
            lm: cfg.lm_params(),
            n_scenes,
            body: vec![vec![]; n_scenes],
            dead,
            gt,
            graph,
            keyframes,
            map: BTreeMap::new(),
            tree: HypothesisTree::new(MapState::new(0), tree_seed(cfg.run_seed, 0)),
            submap: 0,
            submap_start: 0,
            online: Vec::with_capacity(n_scenes),
            detector: LoopDetector::new(cfg.n_classes, cfg.placerec_params()),
            corpus: Corpus::new(cfg.tfidf_doc_unit),
            closures: vec![],
            gate_samples: vec![],
            summaries: vec![],
            metrics: vec![],
            sq_err: 0.0,
            hyp_sum: 0.0,
        })
    }

    fn is_keyframe(&self, k: usize) -> bool {
        k % self.cfg.keyframe_interval == 0 || k + 1 == self.n_scenes
    }

    /// Keyframe at or before scene `k`.
    fn keyframe_of(&self, k: usize) -> (u64, Pose) {
        let (&id, &p) = self.keyframes.range(..=k as u64).next_back().expect("keyframe 0 exists");
        (id, p)
    }

    /// Odometry from the keyframe at or before `k` to scene `k`.
    fn offset_from_keyframe(&self, k: usize) -> (u64, Pose) {
        let (id, _) = self.keyframe_of(k);
        (id, self.dead[id as usize].between(&self.dead[k]))
    }

    fn pose_estimate(&self, k: usize) -> Pose {
        let (id, kf) = self.keyframe_of(k);
        kf.compose(&self.dead[id as usize].between(&self.dead[k]))
    }

    fn add_keyframe(&mut self, k: usize) -> Result<()> {
        let (prev, prev_pose) = self.keyframe_of(k);
        let prev = prev as usize;
        let measured = self.dead[prev].between(&self.dead[k]);
        let steps = (k - prev) as f64;
        let pose = prev_pose.compose(&measured);
        self.keyframes.insert(k as u64, pose);
        self.graph.poses.insert(k as u64, pose);
        self.graph.add_factor(Factor::Between {
            kind: BetweenKind::Odometry,
            from: prev as u64,
            to: k as u64,
            measured,
            information: odometry_information(self.cfg, steps),
            robust: Robust::None,
        })
    }

    fn step(&mut self, k: usize) -> Result<()> {
        if k > 0 && self.is_keyframe(k) {
            self.add_keyframe(k)?;
        }
        let body = &self.body[k];
        let pose = self.pose_estimate(k);
        let world: Vec<SemanticMeasurement> =
            body.iter().map(|m| SemanticMeasurement { position: pose.transform_point(&m.position), ..*m }).collect();
        let ctx = StepContext {
            assoc: &self.assoc,
            ukf: &self.ukf,
            max_branches: self.cfg.max_branches,
            plausibility_gap: self.cfg.plausibility_gap,
        };
        match self.cfg.mode {
            Mode::Dpmhm => {
                self.tree.advance(&world, &ctx)?;
                self.tree.resample(&self.cfg.resample_params())?;
            }
            Mode::MhmThreshold => {
                self.tree.advance(&world, &ctx)?;
                self.tree.threshold_best_third(self.cfg.max_hypotheses);
            }
            Mode::SingleUkf => {
                let gate = self.cfg.nn_gate;
                self.tree.advance_with(&world, &ctx, |s| nearest_neighbour(&world, s, gate))?;
            }
        }
        let n_hyp = self.tree.leaf_count();
        self.online.push(pose);

        if k + 1 - self.submap_start == self.cfg.submap_length || k + 1 == self.n_scenes {
            self.finalize_submap(k)?;
            // The last scene of a submap reports its corrected estimate.
            self.online[k] = self.pose_estimate(k);
        }

        let n_landmarks = self.tree.best_leaf().state.landmarks.len();
        let rmse = match &self.gt {
            Some(g) => {
                self.sq_err += (self.online[k].translation - g[k].translation).norm_squared();
                (self.sq_err / (k + 1) as f64).sqrt()
            }
            None => f64::NAN,
        };
        self.hyp_sum += n_hyp as f64;
        self.metrics.push(MetricsRow {
            frame: k as u64,
            rmse,
            n_hypotheses: n_hyp,
            n_landmarks,
            n_loop_closures: self.closures.len(),
        });
        Ok(())
    }

    fn had_true_revisit(&self, first: usize, last: usize) -> bool {
        let Some(g) = &self.gt else { return false };
        let window = self.cfg.exclusion_window as usize;
        (first..=last).any(|q| {
            (0..first).any(|c| q >= c + window && (g[q].translation - g[c].translation).norm() < REVISIT_RADIUS)
        })
    }

    fn finalize_submap(&mut self, k: usize) -> Result<()> {
        let s = self.submap;
        let first = self.submap_start;
        let weights = self.tree.normalized_weights();
        let fused = fuse_hypotheses(
            self.tree.leaf_nodes().zip(&weights).map(|(n, &w)| (w, &n.state.landmarks)),
            |l| l.submap_id == s,
        )?;
        let fused: BTreeMap<LandmarkId, _> = fused
            .into_iter()
            .filter(|(_, f)| f.existence >= self.cfg.fusion_min_existence && f.assign_count >= self.cfg.fusion_min_observations)
            .collect();

        // Scene descriptors along the most likely association history.
        let best = self.tree.best_leaf();
        let fp_total = best.state.fp_total;
        let mut scenes = Vec::new();
        let mut scene_hists = Vec::new();
        for (j, a) in self.tree.path(best.id).iter().enumerate() {
            let scene = first + j;
            let mut seen = BTreeSet::new();
            let mut lms = Vec::new();
            for (i, t) in a.targets.iter().enumerate() {
                let id = match t {
                    AssignmentTarget::Existing(id) | AssignmentTarget::Previous(id) => *id,
                    AssignmentTarget::New => LandmarkId::from_creation(scene as u64, i),
                    AssignmentTarget::FalsePositive => continue,
                };
                if let Some(f) = fused.get(&id) {
                    if seen.insert(id) {
                        lms.push((f.class, f.mean));
                    }
                }
            }
            let mut h = ClassHistogram::default();
            lms.iter().for_each(|l| h.add(l.0));
            scene_hists.push(h);
            scenes.push(SceneDescriptor::new(scene as u64, s, lms, self.online[scene], self.cfg.n_classes));
        }

        let trace_before = if self.graph.factors.len() > 1 {
            optimize(&self.graph, &LmParams { max_iters: 0, ..self.lm })?.last_pose_cov_trace
        } else {
            f64::INFINITY
        };

        let path_targets: Vec<Vec<AssignmentTarget>> =
            self.tree.path(best.id).iter().map(|a| a.targets.clone()).collect();
        if self.cfg.landmark_factor == LandmarkFactorMode::Observations {
            let info = information_from_cov(&self.assoc.meas_cov)?;
            for (j, targets) in path_targets.iter().enumerate() {
                let scene = first + j;
                if !self.keyframes.contains_key(&(scene as u64)) {
                    continue;
                }
                for (i, t) in targets.iter().enumerate() {
                    let id = match t {
                        AssignmentTarget::Existing(id) | AssignmentTarget::Previous(id) => *id,
                        AssignmentTarget::New => LandmarkId::from_creation(scene as u64, i),
                        AssignmentTarget::FalsePositive => continue,
                    };
                    let Some(f) = fused.get(&id) else { continue };
                    self.graph.landmarks.entry(id.0).or_insert(f.mean);
                    self.graph.add_factor(Factor::Landmark {
                        pose: scene as u64,
                        landmark: id.0,
                        measured: self.body[scene][i].position,
                        information: info,
                        robust: Robust::Cauchy(self.cfg.cauchy_c),
                    })?;
                }
            }
        }

        // Landmark factors from the keyframe nearest the middle of each landmark's track.
        let kfs: Vec<u64> = self.keyframes.range(first as u64..=k as u64).map(|(&id, _)| id).collect();
        let kfs = if kfs.is_empty() { vec![self.keyframe_of(k).0] } else { kfs };
        for f in fused.values() {
            if self.cfg.landmark_factor == LandmarkFactorMode::Fused {
                let mid = (f.first_scene + f.last_scene) / 2;
                let kf = *kfs.iter().min_by_key(|&&id| id.abs_diff(mid)).expect("non-empty");
                let kp = self.keyframes[&kf];
                let r = kp.rotation.to_rotation_matrix();
                let info_world = information_from_cov(&f.cov)?;
                let information = r.matrix().transpose() * info_world * r.matrix();
                let information = 0.5 * (information + information.transpose());
                self.graph.landmarks.entry(f.id.0).or_insert(f.mean);
                self.graph.add_factor(Factor::Landmark {
                    pose: kf,
                    landmark: f.id.0,
                    measured: kp.inverse_transform_point(&f.mean),
                    information,
                    robust: Robust::Cauchy(self.cfg.cauchy_c),
                })?;
            }
            self.map.insert(
                f.id,
                Landmark {
                    id: f.id,
                    class: f.class,
                    mean: f.mean,
                    cov: f.cov,
                    assign_count: f.assign_count,
                    submap_id: s,
                    last_seen: f.last_scene as f64,
                    first_scene: f.first_scene,
                    last_scene: f.last_scene,
                },
            );
        }

        // Summary, gate and loop search.
        let mut hist = ClassHistogram::default();
        fused.values().for_each(|f| hist.add(f.class));
        self.corpus.insert(&hist, &scene_hists);
        let fused_list: Vec<_> = fused.values().cloned().collect();
        let tfidf = tfidf_score(&hist, &self.corpus);
        let summary = SubmapSummary {
            submap_id: s,
            histogram: hist,
            entropy: submap_entropy(&fused_list)?,
            tfidf,
            landmark_count: fused.len(),
            scene_ids: (first..=k).map(|x| x as u64).collect(),
            anchor_pose: self.online[first],
        };
        let norm_hist = normalized_histogram(fused.values().map(|f| f.class), self.cfg.n_classes);
        if gate(&summary, &self.cfg.gate()) == GateDecision::Check {
            for c in self.detector.detect(s, &norm_hist, &scenes)? {
                let (kq, oq) = self.offset_from_keyframe(c.query_scene as usize);
                let (kc, oc) = self.offset_from_keyframe(c.candidate_scene as usize);
                if kq != kc {
                    self.graph.add_factor(Factor::Between {
                        kind: BetweenKind::Loop,
                        from: kq,
                        to: kc,
                        measured: oq.compose(&c.relative_pose).compose(&oc.inverse()),
                        information: pose_information(self.cfg.loop_sigma_t, self.cfg.loop_sigma_r),
                        robust: Robust::Cauchy(self.cfg.cauchy_c),
                    })?;
                }
                self.closures.push(c);
            }
        }
        self.detector.insert(s, &norm_hist, &scenes)?;

        let result = optimize(&self.graph, &self.lm)?;
        self.graph = result.state;
        for (id, p) in &self.graph.poses {
            self.keyframes.insert(*id, *p);
        }
        for (id, lm) in self.map.iter_mut() {
            if let Some(p) = self.graph.landmarks.get(&id.0) {
                lm.mean = *p;
            }
        }
        let label = gate_label(trace_before, result.last_pose_cov_trace, self.had_true_revisit(first, k));
        self.gate_samples.push((summary.clone(), label));
        self.summaries.push(summary);

        self.submap += 1;
        self.submap_start = k + 1;
        let root = MapState { landmarks: self.map.clone(), fp_total, current_submap: self.submap };
        self.tree = HypothesisTree::new(root, tree_seed(self.cfg.run_seed, self.submap));
        Ok(())
    }
}

/// Diagonal information of `steps` chained odometry increments, translation then rotation.
pub fn odometry_information(cfg: &RunConfig, steps: f64) -> Matrix6<f64> {
    let sig = [cfg.odom_sigma_t, cfg.odom_sigma_t, cfg.odom_sigma_z, cfg.odom_sigma_rp, cfg.odom_sigma_rp, cfg.odom_sigma_r];
    Matrix6::from_diagonal(&Vector6::from_iterator(sig.iter().map(|s| 1.0 / (s * s * steps))))
}

/// Single-hypothesis association: Hungarian on Euclidean distance to same-class
/// landmarks within `gate` metres, with a new-landmark option costing `gate`.
pub fn nearest_neighbour(measurements: &[SemanticMeasurement], state: &MapState, gate: f64) -> Result<Assignment> {
    let n = measurements.len();
    let candidates: Vec<&Landmark> = state
        .landmarks
        .values()
        .filter(|l| measurements.iter().any(|m| m.class == l.class && (m.position - l.mean).norm() <= gate))
        .collect();
    let mut costs = CostMatrix::new(n, candidates.len() + n, f64::INFINITY);
    for (i, m) in measurements.iter().enumerate() {
        for (j, l) in candidates.iter().enumerate() {
            let d = (m.position - l.mean).norm();
            if m.class == l.class && d <= gate {
                costs.set(i, j, d);
            }
        }
        costs.set(i, candidates.len() + i, gate);
    }
    let sol = solve_assignment(&costs)?;
    let targets = sol
        .row_to_col
        .iter()
        .map(|&c| {
            if c < candidates.len() {
                state.target_for(candidates[c].id).expect("candidate exists")
            } else {
                AssignmentTarget::New
            }
        })
        .collect();
    Ok(Assignment::from_targets(targets, state.fp_total))
}

/// Chains odometry increments from `start`; the first row's increment is ignored.
pub fn integrate_odometry(start: Pose, odometry: &[(f64, Pose)]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(odometry.len());
    let mut cur = start;
    for (k, (_, inc)) in odometry.iter().enumerate() {
        if k > 0 {
            cur = cur.compose(inc);
        }
        out.push(cur);
    }
    out
}

/// Runs the estimator over the logs.
pub fn run_pipeline(cfg: &RunConfig, inputs: &RunInputs) -> Result<RunOutput> {
    cfg.validate()?;
    let mut p = Pipeline::new(cfg, inputs)?;
    for m in &inputs.measurements {
        let k = m.scene_id as usize;
        if k >= p.n_scenes {
            return Err(Error::ContractViolation(format!("measurement scene {k} has no odometry row")));
        }
        if !(m.position.iter().all(|v| v.is_finite()) && m.time.is_finite()) {
            return Err(Error::ContractViolation(format!("non-finite measurement in scene {k}")));
        }
        if m.class.index() >= cfg.n_classes {
            return Err(Error::ContractViolation(format!("class {} outside n_classes", m.class.0)));
        }
        p.body[k].push(*m);
    }
    for k in 0..p.n_scenes {
        p.step(k)?;
    }

    let trajectory: Vec<(f64, Pose)> =
        (0..p.n_scenes).map(|k| (inputs.odometry[k].0, p.pose_estimate(k))).collect();
    let (rmse, odometry_rmse) = match &p.gt {
        Some(g) => {
            let est: Vec<Pose> = trajectory.iter().map(|t| t.1).collect();
            (Some(crate::graph::rmse(&est, g)?), Some(crate::graph::rmse(&p.dead, g)?))
        }
        None => (None, None),
    };
    let mean_hypotheses = p.hyp_sum / p.n_scenes as f64;
    Ok(RunOutput {
        trajectory,
        map: p.map.into_values().collect(),
        metrics: p.metrics,
        closures: p.closures,
        gate_samples: p.gate_samples,
        summaries: p.summaries,
        rmse,
        odometry_rmse,
        mean_hypotheses,
    })
}

/// Inputs built from a simulated log.
impl From<&crate::sim::SimLog> for RunInputs {
    fn from(log: &crate::sim::SimLog) -> Self {
        Self {
            measurements: log.measurements.clone(),
            odometry: log.odometry.clone(),
            ground_truth: Some(log.ground_truth.clone()),
        }
    }
}
