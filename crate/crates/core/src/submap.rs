//! Submap summaries and the gate that decides which submaps are searched for loops.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::filter::{moment_match, FusedLandmark, GaussianComponent};
use crate::types::{is_spd, ClassHistogram, ClassLabel, Mat3, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct SubmapSummary {
    pub submap_id: u32,
    pub histogram: ClassHistogram,
    /// Differential entropy (nats) of the single Gaussian approximating the submap.
    pub entropy: f64,
    pub tfidf: f64,
    pub landmark_count: usize,
    pub scene_ids: Vec<u64>,
    pub anchor_pose: Pose,
}

impl SubmapSummary {
    pub fn features(&self) -> [f64; 3] {
        [self.entropy, self.tfidf, self.landmark_count as f64]
    }
}

/// `½ ln((2πe)³ det Σ)`.
pub fn gaussian_entropy(cov: &Mat3) -> Result<f64> {
    if !is_spd(cov) {
        return Err(Error::NotSpd("entropy covariance"));
    }
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    Ok(0.5 * (3.0 * two_pi_e.ln() + cov.determinant().ln()))
}

/// Entropy of the moment-matched Gaussian over every component of every landmark, each
/// landmark carrying equal mass. Empty submaps score 0.
pub fn submap_entropy(landmarks: &[FusedLandmark]) -> Result<f64> {
    if landmarks.is_empty() {
        return Ok(0.0);
    }
    let share = 1.0 / landmarks.len() as f64;
    let comps: Vec<GaussianComponent> = landmarks
        .iter()
        .flat_map(|l| {
            l.components.iter().map(move |c| GaussianComponent { weight: c.weight * share, mean: c.mean, cov: c.cov })
        })
        .collect();
    let (_, cov) = moment_match(&comps);
    gaussian_entropy(&cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TfidfDocUnit {
    /// Documents are submaps.
    #[default]
    Submap,
    /// Documents are individual scenes.
    Scene,
}

/// Document frequencies for the tf-idf score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub n: u64,
    pub n_c: BTreeMap<ClassLabel, u64>,
    pub doc_unit: TfidfDocUnit,
}

impl Corpus {
    pub fn new(doc_unit: TfidfDocUnit) -> Self {
        Self { doc_unit, ..Default::default() }
    }

    fn add_document(&mut self, h: &ClassHistogram) {
        self.n += 1;
        for c in h.classes() {
            *self.n_c.entry(c).or_insert(0) += 1;
        }
    }

    /// Adds one submap. `scenes` holds its per-scene histograms and is only read under
    /// [`TfidfDocUnit::Scene`].
    pub fn insert(&mut self, submap: &ClassHistogram, scenes: &[ClassHistogram]) {
        match self.doc_unit {
            TfidfDocUnit::Submap => self.add_document(submap),
            TfidfDocUnit::Scene => scenes.iter().for_each(|s| self.add_document(s)),
        }
    }
}

/// `Σ_c (n_c^i / n^i) · ln(N / n_c)` over classes in the submap.
pub fn tfidf_score(submap_hist: &ClassHistogram, corpus: &Corpus) -> f64 {
    if submap_hist.total == 0 || corpus.n == 0 {
        return 0.0;
    }
    let total = submap_hist.total as f64;
    submap_hist
        .counts
        .iter()
        .filter_map(|(c, &k)| {
            let df = *corpus.n_c.get(c)?;
            (df > 0 && k > 0).then(|| k as f64 / total * (corpus.n as f64 / df as f64).ln())
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GateDecision {
    Skip,
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateFeature {
    Entropy,
    Tfidf,
    LandmarkCount,
}

impl GateFeature {
    const ALL: [GateFeature; 3] = [GateFeature::Entropy, GateFeature::Tfidf, GateFeature::LandmarkCount];

    fn index(self) -> usize {
        self as usize
    }
}

/// Binary decision tree; samples with `feature <= threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub enum GateTree {
    Leaf(GateDecision),
    Split { feature: GateFeature, threshold: f64, left: Box<GateTree>, right: Box<GateTree> },
}

impl GateTree {
    pub fn predict(&self, features: &[f64; 3]) -> GateDecision {
        match self {
            GateTree::Leaf(d) => *d,
            GateTree::Split { feature, threshold, left, right } => {
                if features[feature.index()] <= *threshold {
                    left.predict(features)
                } else {
                    right.predict(features)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            GateTree::Leaf(_) => 0,
            GateTree::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

/// Gate used before any tree is trained, or a trained tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Rule { min_landmarks: usize, min_tfidf: f64 },
    Tree(GateTree),
}

impl Default for Gate {
    fn default() -> Self {
        Gate::Rule { min_landmarks: 8, min_tfidf: 0.2 }
    }
}

pub fn gate(summary: &SubmapSummary, g: &Gate) -> GateDecision {
    match g {
        Gate::Rule { min_landmarks, min_tfidf } => {
            if summary.landmark_count >= *min_landmarks && summary.tfidf >= *min_tfidf {
                GateDecision::Check
            } else {
                GateDecision::Skip
            }
        }
        Gate::Tree(t) => t.predict(&summary.features()),
    }
}

pub const GATE_MAX_DEPTH: usize = 3;
pub const GATE_MIN_LEAF: usize = 2;

fn gini(check: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = check as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

fn majority(samples: &[([f64; 3], GateDecision)]) -> GateDecision {
    let check = samples.iter().filter(|s| s.1 == GateDecision::Check).count();
    if 2 * check > samples.len() {
        GateDecision::Check
    } else {
        GateDecision::Skip
    }
}

fn grow(samples: &[([f64; 3], GateDecision)], depth: usize) -> GateTree {
    let n = samples.len();
    let check = samples.iter().filter(|s| s.1 == GateDecision::Check).count();
    if depth >= GATE_MAX_DEPTH || check == 0 || check == n || n < 2 * GATE_MIN_LEAF {
        return GateTree::Leaf(majority(samples));
    }
    let parent = gini(check, n);
    let mut best: Option<(f64, GateFeature, f64)> = None;
    for f in GateFeature::ALL {
        let mut sorted: Vec<&([f64; 3], GateDecision)> = samples.iter().collect();
        sorted.sort_by(|a, b| a.0[f.index()].total_cmp(&b.0[f.index()]));
        let mut left_check = 0usize;
        for i in 0..n - 1 {
            if sorted[i].1 == GateDecision::Check {
                left_check += 1;
            }
            let (v, next) = (sorted[i].0[f.index()], sorted[i + 1].0[f.index()]);
            let n_left = i + 1;
            if v == next || n_left < GATE_MIN_LEAF || n - n_left < GATE_MIN_LEAF {
                continue;
            }
            let imp = (n_left as f64 * gini(left_check, n_left)
                + (n - n_left) as f64 * gini(check - left_check, n - n_left))
                / n as f64;
            if best.is_none_or(|(b, _, _)| imp < b - 1e-15) {
                best = Some((imp, f, 0.5 * (v + next)));
            }
        }
    }
    match best {
        Some((imp, feature, threshold)) if imp < parent - 1e-15 => {
            let (l, r): (Vec<_>, Vec<_>) = samples.iter().partition(|s| s.0[feature.index()] <= threshold);
            GateTree::Split {
                feature,
                threshold,
                left: Box::new(grow(&l, depth + 1)),
                right: Box::new(grow(&r, depth + 1)),
            }
        }
        _ => GateTree::Leaf(majority(samples)),
    }
}

/// CART with Gini impurity, depth at most 3 and at least 2 samples per leaf.
pub fn train_gate(samples: &[(SubmapSummary, GateDecision)]) -> Result<GateTree> {
    let data: Vec<([f64; 3], GateDecision)> = samples.iter().map(|(s, d)| (s.features(), *d)).collect();
    train_gate_features(&data)
}

pub fn train_gate_features(samples: &[([f64; 3], GateDecision)]) -> Result<GateTree> {
    if samples.len() < 10 {
        return Err(Error::InvalidParameter(format!("gate training needs >= 10 samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| s.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidParameter("gate features must be finite".into()));
    }
    Ok(grow(samples, 0))
}

/// Training label for a finished submap: worth checking if incorporating it shrank the
/// pose-covariance trace, or if it held a true loop closure.
pub fn gate_label(trace_before: f64, trace_after: f64, had_true_loop: bool) -> GateDecision {
    if trace_after < trace_before || had_true_loop {
        GateDecision::Check
    } else {
        GateDecision::Skip
    }
}
