//! Rigid alignment of point correspondences with RANSAC.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::seq::index::sample;
use rand::Rng;

use crate::types::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 200, inlier_tol: 0.5, min_inliers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// Maps second points onto first points: `a ≈ pose · b`.
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

/// Least-squares rigid transform with `a ≈ R b + t` (Kabsch via SVD).
pub fn rigid_align(pairs: &[(Vec3, Vec3)]) -> Option<Pose> {
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let ca = pairs.iter().fold(Vec3::zeros(), |s, p| s + p.0) / n;
    let cb = pairs.iter().fold(Vec3::zeros(), |s, p| s + p.1) / n;
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += (b - cb) * (a - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    // Rank < 2 means the correspondences are collinear and the rotation is not determined.
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return None;
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = ca - rot * cb;
    Some(Pose::new(t, rot))
}

fn inliers_of(pairs: &[(Vec3, Vec3)], pose: &Pose, tol: f64) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| (a - pose.transform_point(b)).norm() <= tol)
        .map(|(i, _)| i)
        .collect()
}

/// Samples 3 correspondences per iteration, keeps the hypothesis with most inliers,
/// refits on them, and rejects if fewer than `min_inliers` remain.
pub fn ransac_verify<R: Rng>(pairs: &[(Vec3, Vec3)], params: &RansacParams, rng: &mut R) -> Option<RansacResult> {
    if pairs.len() < 3 {
        return None;
    }
    let mut best: Option<(Pose, Vec<usize>)> = None;
    for _ in 0..params.iterations {
        let idx = sample(rng, pairs.len(), 3);
        let subset: Vec<(Vec3, Vec3)> = idx.iter().map(|i| pairs[i]).collect();
        let Some(pose) = rigid_align(&subset) else { continue };
        let inl = inliers_of(pairs, &pose, params.inlier_tol);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((pose, inl));
        }
    }
    let (mut pose, mut inliers) = best?;
    // Refit on the consensus set until it stops changing.
    for _ in 0..5 {
        if inliers.len() < 3 {
            break;
        }
        let subset: Vec<(Vec3, Vec3)> = inliers.iter().map(|&i| pairs[i]).collect();
        let Some(refit) = rigid_align(&subset) else { break };
        let next = inliers_of(pairs, &refit, params.inlier_tol);
        if next.len() < inliers.len() {
            break;
        }
        let done = next == inliers;
        pose = refit;
        inliers = next;
        if done {
            break;
        }
    }
    (inliers.len() >= params.min_inliers).then_some(RansacResult { pose, inliers })
}
