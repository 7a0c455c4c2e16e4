//! Semantic loop-closure detection.
//!
//! Finished submaps are indexed by their class histograms. A new submap retrieves
//! similar submaps (Jensen-Shannon divergence), then similar scenes inside them (L2),
//! verifies each scene pair topologically and semantically, filters the outcome with a
//! discrete Bayes filter per submap pair, and confirms geometrically with RANSAC.

pub mod bayes;
pub mod kdtree;
pub mod ransac;
pub mod scene;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bayes::{bayes_update, BayesBelief};
pub use kdtree::KdIndex;
pub use ransac::{ransac_verify, rigid_align, RansacParams, RansacResult};
pub use scene::{
    jsd, l2_distance, ncc_score, normalized_histogram, scene_laplacian, scene_match, verify_pair, SceneDescriptor,
    SceneMatchParams, SceneTermMode, Verification,
};

use crate::error::{Error, Result};
use crate::types::{Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceRecParams {
    /// Maximum JSD (nats) between submap histograms.
    pub tau_jsd: f64,
    /// Maximum L2 distance between scene histograms.
    pub r_l2: f64,
    /// Scenes within this many scene ids of the query are never candidates.
    pub exclusion_window: u64,
    /// Landmarks closer than this (m) are linked in the scene graph.
    pub edge_radius: f64,
    pub scene_match: SceneMatchParams,
    pub tau_verify: f64,
    pub tau_bayes: f64,
    /// Initial belief and filter probabilities for a new submap pair.
    pub bayes: BayesBelief,
    pub ransac: RansacParams,
    pub max_closures_per_pair: usize,
    pub rng_seed: u64,
}

impl Default for PlaceRecParams {
    fn default() -> Self {
        Self {
            tau_jsd: 0.15,
            r_l2: 0.35,
            exclusion_window: 60,
            edge_radius: 4.0,
            scene_match: SceneMatchParams::default(),
            tau_verify: 4.0,
            tau_bayes: 0.8,
            bayes: BayesBelief::default(),
            ransac: RansacParams::default(),
            max_closures_per_pair: 2,
            rng_seed: 0,
        }
    }
}

impl PlaceRecParams {
    pub fn validate(&self) -> Result<()> {
        self.bayes.validate()?;
        if !(self.tau_jsd >= 0.0 && self.r_l2 >= 0.0 && self.edge_radius > 0.0) {
            return Err(Error::InvalidParameter("retrieval radii must be non-negative".into()));
        }
        if !(self.scene_match.dist_norm > 0.0) {
            return Err(Error::InvalidParameter("scene distance normalization must be positive".into()));
        }
        if self.ransac.min_inliers < 3 {
            return Err(Error::InvalidParameter("ransac_min_inliers must be >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosure {
    pub query_scene: u64,
    pub candidate_scene: u64,
    pub query_submap: u32,
    pub candidate_submap: u32,
    /// Candidate scene body frame expressed in the query scene body frame.
    pub relative_pose: Pose,
    /// Inlier landmark pairs as (query index, candidate index).
    pub inliers: Vec<(usize, usize)>,
    pub s_ncc: f64,
    pub s_scene: f64,
}

/// Two-level retrieval index over finalized submaps and their scenes.
#[derive(Debug, Clone)]
pub struct PlaceIndex {
    n_classes: usize,
    submap_tree: KdIndex,
    submap_hists: BTreeMap<u32, Vec<f64>>,
    scene_tree: KdIndex,
    scenes: BTreeMap<u64, SceneDescriptor>,
}

impl PlaceIndex {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            submap_tree: KdIndex::new(n_classes),
            submap_hists: BTreeMap::new(),
            scene_tree: KdIndex::new(n_classes),
            scenes: BTreeMap::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn scene(&self, id: u64) -> Option<&SceneDescriptor> {
        self.scenes.get(&id)
    }

    pub fn submap_count(&self) -> usize {
        self.submap_hists.len()
    }

    fn padded(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n_classes).map(|i| h.get(i).copied().unwrap_or(0.0)).collect()
    }

    /// Inserts a finalized submap. Scenes with no landmarks are kept out of the scene index.
    pub fn insert_submap(&mut self, submap_id: u32, histogram: &[f64], scenes: &[SceneDescriptor]) -> Result<()> {
        let h = self.padded(histogram);
        if h.iter().sum::<f64>() > 0.0 {
            self.submap_tree.insert(h.clone(), submap_id as u64)?;
        }
        self.submap_hists.insert(submap_id, h);
        for s in scenes {
            if !s.landmarks.is_empty() {
                self.scene_tree.insert(self.padded(&s.histogram), s.scene_id)?;
            }
            self.scenes.insert(s.scene_id, s.clone());
        }
        Ok(())
    }

    /// Submaps within `tau_jsd` of the query histogram.
    pub fn similar_submaps(&self, query_hist: &[f64], tau_jsd: f64) -> Result<BTreeSet<u32>> {
        let q = self.padded(query_hist);
        if q.iter().sum::<f64>() <= 0.0 {
            return Ok(BTreeSet::new());
        }
        // JSD ≥ ‖p − q‖₁² / 8 ≥ ‖p − q‖₂² / 8, so this radius never drops a true match.
        let radius = (8.0 * tau_jsd).sqrt();
        let mut out = BTreeSet::new();
        for id in self.submap_tree.range(&q, radius)? {
            let id = id as u32;
            if jsd(&q, &self.submap_hists[&id])? <= tau_jsd {
                out.insert(id);
            }
        }
        Ok(out)
    }

    /// Candidate scene ids for one query scene.
    pub fn query_candidates(&self, query_hist: &[f64], query: &SceneDescriptor, p: &PlaceRecParams) -> Result<Vec<u64>> {
        if query.landmarks.is_empty() {
            return Ok(vec![]);
        }
        let submaps = self.similar_submaps(query_hist, p.tau_jsd)?;
        if submaps.is_empty() {
            return Ok(vec![]);
        }
        let mut out: Vec<u64> = self
            .scene_tree
            .range(&self.padded(&query.histogram), p.r_l2)?
            .into_iter()
            .filter(|id| {
                let s = &self.scenes[id];
                submaps.contains(&s.submap_id) && s.scene_id.abs_diff(query.scene_id) > p.exclusion_window
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }
}

/// Retrieval, verification, Bayes filtering and geometric confirmation.
#[derive(Debug, Clone)]
pub struct LoopDetector {
    pub params: PlaceRecParams,
    pub index: PlaceIndex,
    beliefs: BTreeMap<(u32, u32), BayesBelief>,
    closures_per_pair: BTreeMap<(u32, u32), usize>,
    rng: ChaCha8Rng,
}

impl LoopDetector {
    pub fn new(n_classes: usize, params: PlaceRecParams) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        Self {
            index: PlaceIndex::new(n_classes),
            params,
            beliefs: BTreeMap::new(),
            closures_per_pair: BTreeMap::new(),
            rng,
        }
    }

    pub fn belief(&self, query_submap: u32, candidate_submap: u32) -> Option<&BayesBelief> {
        self.beliefs.get(&(query_submap, candidate_submap))
    }

    /// Searches the index for loops against every scene of a finished submap. The submap
    /// itself is not inserted; call [`LoopDetector::insert`] afterwards.
    pub fn detect(&mut self, submap_id: u32, submap_hist: &[f64], scenes: &[SceneDescriptor]) -> Result<Vec<LoopClosure>> {
        let mut closures = vec![];
        for q in scenes {
            let cands = self.index.query_candidates(submap_hist, q, &self.params)?;
            // Best verification per candidate submap.
            let mut best: BTreeMap<u32, (u64, Verification)> = BTreeMap::new();
            for cid in cands {
                let c = self.index.scene(cid).expect("indexed scene");
                let v = verify_pair(q, c, self.params.edge_radius, &self.params.scene_match, self.params.tau_verify);
                let score = v.s_ncc + v.s_scene;
                let better = best.get(&c.submap_id).is_none_or(|(_, b)| score > b.s_ncc + b.s_scene);
                if better {
                    best.insert(c.submap_id, (cid, v));
                }
            }
            for (csub, (cid, v)) in best {
                let key = (submap_id, csub);
                let prior = self.params.bayes;
                let belief = bayes_update(self.beliefs.get(&key).unwrap_or(&prior), v.passed);
                self.beliefs.insert(key, belief);
                let done = self.closures_per_pair.get(&key).copied().unwrap_or(0);
                if !v.passed || belief.p_lc <= self.params.tau_bayes || done >= self.params.max_closures_per_pair {
                    continue;
                }
                let c = self.index.scene(cid).expect("indexed scene");
                let pairs: Vec<(usize, usize)> =
                    v.pairs.iter().copied().filter(|&(i, j)| q.landmarks[i].0 == c.landmarks[j].0).collect();
                let pts: Vec<(Vec3, Vec3)> = pairs.iter().map(|&(i, j)| (q.landmarks[i].1, c.landmarks[j].1)).collect();
                if let Some(r) = ransac_verify(&pts, &self.params.ransac, &mut self.rng) {
                    closures.push(LoopClosure {
                        query_scene: q.scene_id,
                        candidate_scene: cid,
                        query_submap: submap_id,
                        candidate_submap: csub,
                        relative_pose: q.pose.inverse().compose(&r.pose).compose(&c.pose),
                        inliers: r.inliers.iter().map(|&k| pairs[k]).collect(),
                        s_ncc: v.s_ncc,
                        s_scene: v.s_scene,
                    });
                    *self.closures_per_pair.entry(key).or_insert(0) += 1;
                }
            }
        }
        Ok(closures)
    }

    pub fn insert(&mut self, submap_id: u32, submap_hist: &[f64], scenes: &[SceneDescriptor]) -> Result<()> {
        self.index.insert_submap(submap_id, submap_hist, scenes)
    }
}
