//! Landmark position filtering and fusion of weighted hypotheses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{spd_project, ClassLabel, Landmark, LandmarkId, Mat3, SemanticMeasurement, Vec3, SPD_EPS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self { alpha: 1e-1, beta: 2.0, kappa: 0.0 }
    }
}

impl UkfParams {
    const N: f64 = 3.0;

    fn lambda(&self) -> f64 {
        self.alpha * self.alpha * (Self::N + self.kappa) - Self::N
    }

    /// Mean weights, covariance weights. Mean weights sum to one.
    pub fn weights(&self) -> ([f64; 7], [f64; 7]) {
        let lambda = self.lambda();
        let denom = Self::N + lambda;
        let wi = 1.0 / (2.0 * denom);
        let mut wm = [wi; 7];
        let mut wc = [wi; 7];
        wm[0] = lambda / denom;
        wc[0] = wm[0] + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc)
    }
}

fn sigma_points(mean: &Vec3, cov: &Mat3, params: &UkfParams) -> Result<[Vec3; 7]> {
    let scale = UkfParams::N + params.lambda();
    if scale <= 0.0 {
        return Err(Error::InvalidParameter("ukf spread parameters give n + λ <= 0".into()));
    }
    let chol = (cov * scale).cholesky().ok_or(Error::Conditioning)?;
    let l = chol.l();
    let mut pts = [*mean; 7];
    for i in 0..3 {
        let col: Vec3 = l.column(i).into();
        pts[1 + i] = mean + col;
        pts[4 + i] = mean - col;
    }
    Ok(pts)
}

fn ukf_update_once(lm: &Landmark, z: &Vec3, meas_cov: &Mat3, params: &UkfParams) -> Result<Landmark> {
    let pts = sigma_points(&lm.mean, &lm.cov, params)?;
    let (wm, wc) = params.weights();
    // Identity measurement model: predicted measurements are the sigma points themselves.
    let z_hat: Vec3 = pts.iter().zip(wm).map(|(p, w)| p * w).sum();
    let x_hat: Vec3 = z_hat;
    let mut s = *meas_cov;
    let mut pxz = Mat3::zeros();
    for (p, w) in pts.iter().zip(wc) {
        let dz = p - z_hat;
        let dx = p - x_hat;
        s += dz * dz.transpose() * w;
        pxz += dx * dz.transpose() * w;
    }
    let s_inv = s.try_inverse().ok_or(Error::Conditioning)?;
    let k = pxz * s_inv;
    let mean = x_hat + k * (z - z_hat);
    let cov = lm.cov - k * s * k.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    let mut out = lm.clone();
    out.mean = mean;
    out.cov = cov;
    Ok(out)
}

/// Unscented measurement update with `h(x) = x` and additive noise `meas_cov`.
/// On a sigma-point Cholesky failure the prior covariance is inflated by `1e-9·I`
/// and the update retried once. The assignment count is left to the caller.
pub fn ukf_update(
    lm: &Landmark,
    m: &SemanticMeasurement,
    meas_cov: &Mat3,
    params: &UkfParams,
) -> Result<Landmark> {
    match ukf_update_once(lm, &m.position, meas_cov, params) {
        Err(Error::Conditioning) => {
            let mut inflated = lm.clone();
            inflated.cov += Mat3::identity() * 1e-9;
            ukf_update_once(&inflated, &m.position, meas_cov, params)
        }
        other => other,
    }
    .map(|mut out| {
        if !crate::types::is_spd(&out.cov) {
            out.cov = spd_project(&out.cov, SPD_EPS * 10.0);
        }
        out
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec3,
    pub cov: Mat3,
}

/// Mixture of one landmark's estimates across hypotheses, with its moment-matched summary.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLandmark {
    pub id: LandmarkId,
    pub class: ClassLabel,
    /// Component weights renormalized over the hypotheses containing the landmark.
    pub components: Vec<GaussianComponent>,
    pub mean: Vec3,
    pub cov: Mat3,
    /// Total normalized weight of the hypotheses that contain the landmark.
    pub existence: f64,
    pub assign_count: u32,
    pub first_scene: u64,
    pub last_scene: u64,
}

/// Moment matching: `μ = Σ wᵢμᵢ`, `Σ = Σ wᵢ(Σᵢ + μᵢμᵢᵀ) − μμᵀ`, projected to SPD.
pub fn moment_match(components: &[GaussianComponent]) -> (Vec3, Mat3) {
    let wsum: f64 = components.iter().map(|c| c.weight).sum();
    let mean: Vec3 = components.iter().map(|c| c.mean * (c.weight / wsum)).sum();
    // Centered form of the same expression; avoids cancellation far from the origin.
    let mut cov = Mat3::zeros();
    for c in components {
        let d = c.mean - mean;
        cov += (c.cov + d * d.transpose()) * (c.weight / wsum);
    }
    (mean, spd_project(&cov, SPD_EPS))
}

/// Fuses per-hypothesis landmark estimates. `leaves` pairs a normalized weight with the
/// landmarks of that hypothesis; landmarks are matched across hypotheses by id. Only
/// landmarks accepted by `include` take part.
pub fn fuse_hypotheses<'a, I, F>(leaves: I, include: F) -> Result<BTreeMap<LandmarkId, FusedLandmark>>
where
    I: IntoIterator<Item = (f64, &'a BTreeMap<LandmarkId, Landmark>)>,
    F: Fn(&Landmark) -> bool,
{
    let mut acc: BTreeMap<LandmarkId, (Vec<GaussianComponent>, Landmark)> = BTreeMap::new();
    let mut total_w = 0.0;
    for (w, lms) in leaves {
        if !(w >= 0.0) {
            return Err(Error::ContractViolation("negative hypothesis weight".into()));
        }
        total_w += w;
        for lm in lms.values().filter(|l| include(l)) {
            let entry = acc.entry(lm.id).or_insert_with(|| (Vec::new(), lm.clone()));
            entry.0.push(GaussianComponent { weight: w, mean: lm.mean, cov: lm.cov });
            let rep = &mut entry.1;
            rep.assign_count = rep.assign_count.max(lm.assign_count);
            rep.first_scene = rep.first_scene.min(lm.first_scene);
            rep.last_scene = rep.last_scene.max(lm.last_scene);
        }
    }
    if (total_w - 1.0).abs() > 1e-6 {
        return Err(Error::ContractViolation(format!("leaf weights sum to {total_w}")));
    }
    let mut out = BTreeMap::new();
    for (id, (mut comps, rep)) in acc {
        let existence: f64 = comps.iter().map(|c| c.weight).sum();
        if existence <= 0.0 {
            continue;
        }
        comps.retain(|c| c.weight > 0.0);
        comps.iter_mut().for_each(|c| c.weight /= existence);
        let (mean, cov) = moment_match(&comps);
        out.insert(
            id,
            FusedLandmark {
                id,
                class: rep.class,
                components: comps,
                mean,
                cov,
                existence,
                assign_count: rep.assign_count,
                first_scene: rep.first_scene,
                last_scene: rep.last_scene,
            },
        );
    }
    Ok(out)
}
