//! Scene descriptors and the semantic similarity scores used to verify candidates.

use nalgebra::DMatrix;

use crate::assoc::hungarian::{solve_assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::types::{ClassLabel, Pose, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescriptor {
    pub scene_id: u64,
    pub submap_id: u32,
    /// Normalized class histogram, one entry per registered class.
    pub histogram: Vec<f64>,
    /// Landmarks seen in the scene, in the descriptor frame (the estimated world frame
    /// at capture time).
    pub landmarks: Vec<(ClassLabel, Vec3)>,
    /// Scene pose in the descriptor frame.
    pub pose: Pose,
}

impl SceneDescriptor {
    /// Builds the descriptor and its normalized histogram over `n_classes` bins.
    pub fn new(scene_id: u64, submap_id: u32, landmarks: Vec<(ClassLabel, Vec3)>, pose: Pose, n_classes: usize) -> Self {
        let histogram = normalized_histogram(landmarks.iter().map(|l| l.0), n_classes);
        Self { scene_id, submap_id, histogram, landmarks, pose }
    }
}

/// Class frequencies over `n_classes` bins; out-of-range labels are ignored, and an
/// empty input gives the zero vector.
pub fn normalized_histogram(classes: impl IntoIterator<Item = ClassLabel>, n_classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_classes];
    let mut total = 0.0;
    for c in classes {
        if c.index() < n_classes {
            h[c.index()] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        h.iter_mut().for_each(|x| *x /= total);
    }
    h
}

fn check_normalized(h: &[f64]) -> Result<()> {
    let s: f64 = h.iter().sum();
    if (s - 1.0).abs() > 1e-6 || h.iter().any(|&x| x < 0.0) {
        return Err(Error::ContractViolation(format!("histogram not normalized (sum {s})")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats; shorter inputs are zero-padded.
pub fn jsd(h1: &[f64], h2: &[f64]) -> Result<f64> {
    check_normalized(h1)?;
    check_normalized(h2)?;
    let n = h1.len().max(h2.len());
    let get = |h: &[f64], i: usize| h.get(i).copied().unwrap_or(0.0);
    let mut d = 0.0;
    for i in 0..n {
        let (p, q) = (get(h1, i), get(h2, i));
        let m = 0.5 * (p + q);
        if p > 0.0 {
            d += 0.5 * p * (p / m).ln();
        }
        if q > 0.0 {
            d += 0.5 * q * (q / m).ln();
        }
    }
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let d = a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Graph Laplacian `D − A` over the scene's landmarks, ordered by class then distance to
/// the centroid, with unit edges between landmarks closer than `edge_radius`.
pub fn scene_laplacian(s: &SceneDescriptor, edge_radius: f64) -> Result<DMatrix<f64>> {
    if s.landmarks.is_empty() {
        return Err(Error::Empty("scene"));
    }
    let n = s.landmarks.len();
    let centroid = s.landmarks.iter().fold(Vec3::zeros(), |acc, l| acc + l.1) / n as f64;
    let mut order: Vec<&(ClassLabel, Vec3)> = s.landmarks.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then((a.1 - centroid).norm().total_cmp(&(b.1 - centroid).norm())));
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if (order[i].1 - order[j].1).norm() <= edge_radius {
                l[(i, j)] = -1.0;
                l[(j, i)] = -1.0;
                l[(i, i)] += 1.0;
                l[(j, j)] += 1.0;
            }
        }
    }
    Ok(l)
}

/// Normalized cross-correlation of two matrices after zero-padding to a common size.
pub fn ncc_score(l1: &DMatrix<f64>, l2: &DMatrix<f64>) -> f64 {
    let r = l1.nrows().max(l2.nrows());
    let c = l1.ncols().max(l2.ncols());
    let flat = |m: &DMatrix<f64>| -> Vec<f64> {
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                v.push(if i < m.nrows() && j < m.ncols() { m[(i, j)] } else { 0.0 });
            }
        }
        v
    };
    let (a, b) = (flat(l1), flat(l2));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa <= 1e-300 || bb <= 1e-300 {
        return if aa <= 1e-300 && bb <= 1e-300 && a == b { 1.0 } else { 0.0 };
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SceneTermMode {
    /// `1 − s_match · s_class` per matched pair.
    #[default]
    AsPrinted,
    /// `1 − (1 − s_match)(1 − s_class)` per matched pair.
    DistanceWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneMatchParams {
    /// Cross-class penalty `p`.
    pub penalty: f64,
    /// Distance (m) that maps to the maximal normalized cost 2.
    pub dist_norm: f64,
    pub mode: SceneTermMode,
}

impl Default for SceneMatchParams {
    fn default() -> Self {
        Self { penalty: 0.5, dist_norm: 5.0, mode: SceneTermMode::AsPrinted }
    }
}

/// Scene similarity over a minimum-distance landmark matching. Returns the score and
/// the matched `(index in a, index in b)` pairs.
pub fn scene_match(a: &SceneDescriptor, b: &SceneDescriptor, p: &SceneMatchParams) -> Result<(f64, Vec<(usize, usize)>)> {
    if a.landmarks.is_empty() || b.landmarks.is_empty() {
        return Err(Error::Empty("scene"));
    }
    let mut c = CostMatrix::new(a.landmarks.len(), b.landmarks.len(), 0.0);
    for (i, la) in a.landmarks.iter().enumerate() {
        for (j, lb) in b.landmarks.iter().enumerate() {
            c.set(i, j, ((la.1 - lb.1).norm() / p.dist_norm).min(2.0));
        }
    }
    let sol = solve_assignment(&c)?;
    let mut score = 0.0;
    let mut pairs = vec![];
    for (i, j) in sol.pairs() {
        if j == usize::MAX {
            continue;
        }
        let h = c.get(i, j);
        let s_match = 1.0 - h / 2.0;
        let s_class = if a.landmarks[i].0 == b.landmarks[j].0 { 0.0 } else { p.penalty };
        score += match p.mode {
            SceneTermMode::AsPrinted => 1.0 - s_match * s_class,
            SceneTermMode::DistanceWeighted => 1.0 - (1.0 - s_match) * (1.0 - s_class),
        };
        pairs.push((i, j));
    }
    Ok((score, pairs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub passed: bool,
    pub s_ncc: f64,
    pub s_scene: f64,
    pub pairs: Vec<(usize, usize)>,
}

/// Passes iff `S_NCC + S_scene > tau_verify`. Empty scenes never pass.
pub fn verify_pair(
    a: &SceneDescriptor,
    b: &SceneDescriptor,
    edge_radius: f64,
    match_params: &SceneMatchParams,
    tau_verify: f64,
) -> Verification {
    if a.landmarks.is_empty() || b.landmarks.is_empty() {
        return Verification { passed: false, s_ncc: 0.0, s_scene: 0.0, pairs: vec![] };
    }
    let s_ncc = match (scene_laplacian(a, edge_radius), scene_laplacian(b, edge_radius)) {
        (Ok(la), Ok(lb)) => ncc_score(&la, &lb),
        _ => 0.0,
    };
    let (s_scene, pairs) = scene_match(a, b, match_params).unwrap_or((0.0, vec![]));
    Verification { passed: s_ncc + s_scene > tau_verify, s_ncc, s_scene, pairs }
}
