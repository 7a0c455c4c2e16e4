//! Shared domain types: class labels, measurements, landmarks, histograms and poses.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Eigenvalue floor used when checking or restoring positive-definiteness.
pub const SPD_EPS: f64 = 1e-12;

/// Dense semantic class identifier. Equality is by id only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassLabel(pub u32);

impl ClassLabel {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Assigns dense ids to class names in order of first registration.
#[derive(Debug, Clone, Default)]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut reg = Self::new();
        for n in names {
            reg.register(n);
        }
        reg
    }

    pub fn register(&mut self, name: impl Into<String>) -> ClassLabel {
        let name = name.into();
        if let Some(pos) = self.names.iter().position(|n| *n == name) {
            return ClassLabel(pos as u32);
        }
        self.names.push(name);
        ClassLabel((self.names.len() - 1) as u32)
    }

    pub fn name(&self, label: ClassLabel) -> Option<&str> {
        self.names.get(label.index()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One detected object: world-frame (or body-frame, before projection) position plus class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticMeasurement {
    pub scene_id: u64,
    pub time: f64,
    pub position: Vec3,
    pub class: ClassLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LandmarkId(pub u64);

impl LandmarkId {
    /// Creation id for a landmark instantiated from measurement `index` of scene `scene_id`.
    /// Sibling hypotheses that create a landmark from the same measurement share the id.
    pub fn from_creation(scene_id: u64, index: usize) -> Self {
        LandmarkId((scene_id << 16) | (index as u64 & 0xffff))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: LandmarkId,
    pub class: ClassLabel,
    pub mean: Vec3,
    pub cov: Mat3,
    pub assign_count: u32,
    pub submap_id: u32,
    pub last_seen: f64,
    /// Scene at which the landmark was first observed in its current submap.
    pub first_scene: u64,
    pub last_scene: u64,
}

impl Landmark {
    pub fn is_spd(&self) -> bool {
        is_spd(&self.cov)
    }
}

/// Anything carrying a class label can be histogrammed.
pub trait HasClass {
    fn class(&self) -> ClassLabel;
}

impl HasClass for SemanticMeasurement {
    fn class(&self) -> ClassLabel {
        self.class
    }
}

impl HasClass for Landmark {
    fn class(&self) -> ClassLabel {
        self.class
    }
}

impl HasClass for ClassLabel {
    fn class(&self) -> ClassLabel {
        *self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassHistogram {
    pub counts: BTreeMap<ClassLabel, u64>,
    pub total: u64,
}

impl ClassHistogram {
    pub fn add(&mut self, class: ClassLabel) {
        *self.counts.entry(class).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn count(&self, class: ClassLabel) -> u64 {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Normalized histogram over classes `0..dim`. Classes outside the range are dropped
    /// before normalizing. An empty histogram maps to the zero vector.
    pub fn normalized(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        let mut sum = 0u64;
        for (c, &n) in &self.counts {
            if c.index() < dim {
                v[c.index()] = n as f64;
                sum += n;
            }
        }
        if sum > 0 {
            let s = sum as f64;
            v.iter_mut().for_each(|x| *x /= s);
        }
        v
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        self.counts.iter().filter(|(_, &n)| n > 0).map(|(c, _)| *c)
    }
}

pub fn histogram_of<'a, T, I>(items: I) -> ClassHistogram
where
    T: HasClass + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut h = ClassHistogram::default();
    for it in items {
        h.add(it.class());
    }
    h
}

/// Rigid transform with unit-quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vec3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vec3, rotation: UnitQuaternion<f64>) -> Self {
        Self { translation, rotation }
    }

    /// Planar pose helper: position (x, y, z) and heading about +z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(
            Vec3::new(x, y, z),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        )
    }

    /// Builds a pose from raw (w, x, y, z) quaternion components, renormalizing.
    pub fn from_parts(translation: Vec3, qw: f64, qx: f64, qy: f64, qz: f64) -> Result<Self> {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let n = q.norm();
        if !n.is_finite() || n < 1e-6 {
            return Err(Error::InvalidParameter("degenerate quaternion".into()));
        }
        Ok(Self::new(translation, UnitQuaternion::from_quaternion(q)))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation * other.translation,
            rotation: renormalize(self.rotation * other.rotation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            translation: -(inv * self.translation),
            rotation: inv,
        }
    }

    /// `self⁻¹ · other`: pose of `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation.euler_angles().2
    }

    /// (w, x, y, z) components.
    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// Keeps quaternion norms at 1 within floating-point precision after chains of products.
pub fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

pub fn is_symmetric(m: &Mat3, tol: f64) -> bool {
    (m - m.transpose()).abs().max() <= tol * (1.0 + m.abs().max())
}

/// Symmetric with every eigenvalue above [`SPD_EPS`].
pub fn is_spd(m: &Mat3) -> bool {
    if !m.iter().all(|x| x.is_finite()) || !is_symmetric(m, 1e-9) {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().all(|&e| e > SPD_EPS)
}

/// Symmetric part with eigenvalues floored at `floor`.
pub fn spd_project(m: &Mat3, floor: f64) -> Mat3 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|e| if e.is_finite() { e.max(floor) } else { floor });
    let out = eig.eigenvectors * Mat3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

/// Log-density of a zero-mean 3-D Gaussian with covariance `cov` at `d`.
pub fn gaussian_log_density(d: &Vec3, cov: &Mat3) -> Result<f64> {
    let chol = cov.cholesky().ok_or(Error::NotSpd("gaussian covariance"))?;
    let l = chol.l();
    let det_sqrt = l[(0, 0)] * l[(1, 1)] * l[(2, 2)];
    if det_sqrt <= 0.0 || !det_sqrt.is_finite() {
        return Err(Error::NotSpd("gaussian covariance"));
    }
    let y = l
        .solve_lower_triangular(d)
        .ok_or(Error::NotSpd("gaussian covariance"))?;
    let maha = y.norm_squared();
    Ok(-0.5 * maha - 1.5 * (2.0 * std::f64::consts::PI).ln() - det_sqrt.ln())
}

/// Squared Mahalanobis distance `dᵀ cov⁻¹ d`.
pub fn mahalanobis_sq(d: &Vec3, cov: &Mat3) -> Result<f64> {
    let chol = cov.cholesky().ok_or(Error::NotSpd("mahalanobis covariance"))?;
    let y = chol
        .l()
        .solve_lower_triangular(d)
        .ok_or(Error::NotSpd("mahalanobis covariance"))?;
    Ok(y.norm_squared())
}
