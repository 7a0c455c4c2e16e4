//! Pose graph over SE(3) keyframes and 3-D landmarks.
//!
//! Poses are updated with `t ← t + δt`, `R ← R · Exp(δθ)`. Residuals are ordered
//! translation first, then rotation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector6};

use crate::error::{Error, Result};
use crate::types::{is_spd, Mat3, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Robust {
    None,
    Cauchy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetweenKind {
    Odometry,
    Loop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Prior { pose: u64, measured: Pose, information: Matrix6<f64>, robust: Robust },
    Between { kind: BetweenKind, from: u64, to: u64, measured: Pose, information: Matrix6<f64>, robust: Robust },
    /// Landmark position expressed in the pose's body frame.
    Landmark { pose: u64, landmark: u64, measured: Vec3, information: Mat3, robust: Robust },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    Pose(u64),
    Landmark(u64),
}

impl Var {
    pub fn dim(self) -> usize {
        match self {
            Var::Pose(_) => 6,
            Var::Landmark(_) => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(Var, DMatrix<f64>)>,
}

fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector of a unit quaternion.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    q.scaled_axis()
}

pub fn so3_exp(v: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Mat3::identity() + 0.5 * k + k * k / 12.0;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + coef * k * k
}

/// Relative pose residual `[t_rel − t_z; Log(R_zᵀ R_rel)]` with `T_rel = T_i⁻¹ T_j`.
fn between_residual(ti: &Pose, tj: &Pose, z: &Pose) -> Vector6<f64> {
    let rel = ti.between(tj);
    let rt = rel.translation - z.translation;
    let rr = so3_log(&(z.rotation.inverse() * rel.rotation));
    Vector6::new(rt.x, rt.y, rt.z, rr.x, rr.y, rr.z)
}

fn prior_residual(t: &Pose, z: &Pose) -> Vector6<f64> {
    let rt = t.translation - z.translation;
    let rr = so3_log(&(z.rotation.inverse() * t.rotation));
    Vector6::new(rt.x, rt.y, rt.z, rr.x, rr.y, rr.z)
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Mat3) {
    m.view_mut((r, c), (3, 3)).copy_from(b);
}

impl Factor {
    pub fn robust(&self) -> Robust {
        match self {
            Factor::Prior { robust, .. } | Factor::Between { robust, .. } | Factor::Landmark { robust, .. } => *robust,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match self {
            Factor::Prior { pose, .. } => vec![Var::Pose(*pose)],
            Factor::Between { from, to, .. } => vec![Var::Pose(*from), Var::Pose(*to)],
            Factor::Landmark { pose, landmark, .. } => vec![Var::Pose(*pose), Var::Landmark(*landmark)],
        }
    }

    pub fn information(&self) -> DMatrix<f64> {
        match self {
            Factor::Prior { information, .. } | Factor::Between { information, .. } => {
                DMatrix::from_iterator(6, 6, information.iter().copied())
            }
            Factor::Landmark { information, .. } => DMatrix::from_iterator(3, 3, information.iter().copied()),
        }
    }

    pub fn residual(&self, g: &GraphState) -> Result<DVector<f64>> {
        Ok(match self {
            Factor::Prior { pose, measured, .. } => DVector::from_column_slice(prior_residual(g.pose(*pose)?, measured).as_slice()),
            Factor::Between { from, to, measured, .. } => {
                DVector::from_column_slice(between_residual(g.pose(*from)?, g.pose(*to)?, measured).as_slice())
            }
            Factor::Landmark { pose, landmark, measured, .. } => {
                let p = g.pose(*pose)?;
                let h = p.inverse_transform_point(g.landmark(*landmark)?);
                DVector::from_column_slice((h - measured).as_slice())
            }
        })
    }

    /// Residual and analytic Jacobians with respect to each variable's local increment.
    pub fn linearize(&self, g: &GraphState) -> Result<Linearization> {
        let residual = self.residual(g)?;
        let jacobians = match self {
            Factor::Prior { pose, .. } => {
                let rr = Vec3::new(residual[3], residual[4], residual[5]);
                let mut j = DMatrix::zeros(6, 6);
                put(&mut j, 0, 0, &Mat3::identity());
                put(&mut j, 3, 3, &so3_right_jacobian_inv(&rr));
                vec![(Var::Pose(*pose), j)]
            }
            Factor::Between { from, to, .. } => {
                let (ti, tj) = (g.pose(*from)?, g.pose(*to)?);
                let rel = ti.between(tj);
                let ri_t = ti.rotation.to_rotation_matrix().matrix().transpose();
                let rrel = rel.rotation.to_rotation_matrix().matrix().clone_owned();
                let rr = Vec3::new(residual[3], residual[4], residual[5]);
                let jinv = so3_right_jacobian_inv(&rr);
                let mut ji = DMatrix::zeros(6, 6);
                put(&mut ji, 0, 0, &(-ri_t));
                put(&mut ji, 0, 3, &skew(&rel.translation));
                put(&mut ji, 3, 3, &(-jinv * rrel.transpose()));
                let mut jj = DMatrix::zeros(6, 6);
                put(&mut jj, 0, 0, &ri_t);
                put(&mut jj, 3, 3, &jinv);
                vec![(Var::Pose(*from), ji), (Var::Pose(*to), jj)]
            }
            Factor::Landmark { pose, landmark, .. } => {
                let p = g.pose(*pose)?;
                let h = p.inverse_transform_point(g.landmark(*landmark)?);
                let r_t = p.rotation.to_rotation_matrix().matrix().transpose();
                let mut jp = DMatrix::zeros(3, 6);
                put(&mut jp, 0, 0, &(-r_t));
                put(&mut jp, 0, 3, &skew(&h));
                let mut jl = DMatrix::zeros(3, 3);
                put(&mut jl, 0, 0, &r_t);
                vec![(Var::Pose(*pose), jp), (Var::Landmark(*landmark), jl)]
            }
        };
        Ok(Linearization { residual, jacobians })
    }

    /// Whitened residual norm `sqrt(rᵀ Ω r)`.
    pub fn whitened_norm(&self, g: &GraphState) -> Result<f64> {
        let r = self.residual(g)?;
        Ok((r.transpose() * self.information() * &r)[(0, 0)].max(0.0).sqrt())
    }

    /// Robust cost of this factor.
    pub fn cost(&self, g: &GraphState) -> Result<f64> {
        let s = self.whitened_norm(g)?;
        Ok(match self.robust() {
            Robust::None => 0.5 * s * s,
            Robust::Cauchy(c) => 0.5 * c * c * (1.0 + (s / c).powi(2)).ln(),
        })
    }
}

/// IRLS weight of the Cauchy m-estimator, `1 / (1 + (r/c)²)`.
pub fn cauchy_weight(residual_norm: f64, c: f64) -> f64 {
    1.0 / (1.0 + (residual_norm / c).powi(2))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphState {
    pub poses: BTreeMap<u64, Pose>,
    pub landmarks: BTreeMap<u64, Vec3>,
    pub factors: Vec<Factor>,
}

impl GraphState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pose(&self, id: u64) -> Result<&Pose> {
        self.poses.get(&id).ok_or_else(|| Error::Structure(format!("missing pose {id}")))
    }

    pub fn landmark(&self, id: u64) -> Result<&Vec3> {
        self.landmarks.get(&id).ok_or_else(|| Error::Structure(format!("missing landmark {id}")))
    }

    pub fn add_factor(&mut self, f: Factor) -> Result<()> {
        let info = f.information();
        let ok = match &f {
            Factor::Landmark { information, .. } => is_spd(information),
            _ => info.clone().cholesky().is_some() && (&info - info.transpose()).amax() <= 1e-9 * info.amax().max(1.0),
        };
        if !ok {
            return Err(Error::NotSpd("factor information"));
        }
        if let Robust::Cauchy(c) = f.robust() {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter("cauchy scale must be positive".into()));
            }
        }
        self.factors.push(f);
        Ok(())
    }

    /// Applies a local increment to one variable.
    pub fn retract(&mut self, v: Var, delta: &[f64]) -> Result<()> {
        match v {
            Var::Pose(id) => {
                let p = self.poses.get_mut(&id).ok_or_else(|| Error::Structure(format!("missing pose {id}")))?;
                p.translation += Vec3::new(delta[0], delta[1], delta[2]);
                let q = p.rotation * so3_exp(&Vec3::new(delta[3], delta[4], delta[5]));
                p.rotation = UnitQuaternion::new_normalize(q.into_inner());
            }
            Var::Landmark(id) => {
                let l = self.landmarks.get_mut(&id).ok_or_else(|| Error::Structure(format!("missing landmark {id}")))?;
                *l += Vec3::new(delta[0], delta[1], delta[2]);
            }
        }
        Ok(())
    }

    pub fn total_cost(&self) -> Result<f64> {
        self.factors.iter().map(|f| f.cost(self)).sum()
    }

    /// Checks variable references, a single prior, and connectivity from it.
    pub fn check_structure(&self) -> Result<()> {
        let priors: Vec<u64> = self
            .factors
            .iter()
            .filter_map(|f| if let Factor::Prior { pose, .. } = f { Some(*pose) } else { None })
            .collect();
        if priors.len() != 1 {
            return Err(Error::Structure(format!("expected exactly one prior factor, found {}", priors.len())));
        }
        let mut adj: BTreeMap<Var, Vec<Var>> = BTreeMap::new();
        for f in &self.factors {
            let vars = f.vars();
            for v in &vars {
                let exists = match v {
                    Var::Pose(id) => self.poses.contains_key(id),
                    Var::Landmark(id) => self.landmarks.contains_key(id),
                };
                if !exists {
                    return Err(Error::Structure(format!("factor references missing {v:?}")));
                }
            }
            for a in &vars {
                for b in &vars {
                    if a != b {
                        adj.entry(*a).or_default().push(*b);
                    }
                }
            }
        }
        let mut seen = BTreeSet::from([Var::Pose(priors[0])]);
        let mut queue = VecDeque::from([Var::Pose(priors[0])]);
        while let Some(v) = queue.pop_front() {
            for n in adj.get(&v).into_iter().flatten() {
                if seen.insert(*n) {
                    queue.push_back(*n);
                }
            }
        }
        let all = self.poses.keys().map(|&k| Var::Pose(k)).chain(self.landmarks.keys().map(|&k| Var::Landmark(k)));
        for v in all {
            if !seen.contains(&v) {
                return Err(Error::Structure(format!("{v:?} is not connected to the prior")));
            }
        }
        Ok(())
    }

    fn layout(&self) -> (BTreeMap<Var, usize>, usize) {
        let mut idx = BTreeMap::new();
        let mut n = 0;
        for &k in self.poses.keys() {
            idx.insert(Var::Pose(k), n);
            n += 6;
        }
        for &k in self.landmarks.keys() {
            idx.insert(Var::Landmark(k), n);
            n += 3;
        }
        (idx, n)
    }

    /// IRLS-weighted normal equations `H δ = −g`.
    fn normal_equations(&self, idx: &BTreeMap<Var, usize>, n: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in &self.factors {
            let lin = f.linearize(self)?;
            let info = f.information();
            let w = match f.robust() {
                Robust::None => 1.0,
                Robust::Cauchy(c) => {
                    let s = (lin.residual.transpose() * &info * &lin.residual)[(0, 0)].max(0.0).sqrt();
                    cauchy_weight(s, c)
                }
            };
            let wi = info * w;
            let wr = &wi * &lin.residual;
            for (va, ja) in &lin.jacobians {
                let oa = idx[va];
                let jta_w = ja.transpose() * &wi;
                let mut gv = g.rows_mut(oa, va.dim());
                gv += ja.transpose() * &wr;
                for (vb, jb) in &lin.jacobians {
                    let ob = idx[vb];
                    let mut hv = h.view_mut((oa, ob), (va.dim(), vb.dim()));
                    hv += &jta_w * jb;
                }
            }
        }
        Ok((h, g))
    }

    fn apply(&mut self, idx: &BTreeMap<Var, usize>, delta: &DVector<f64>) -> Result<()> {
        for (&v, &o) in idx {
            let d: Vec<f64> = delta.rows(o, v.dim()).iter().copied().collect();
            self.retract(v, &d)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmParams {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self { max_iters: 50, grad_tol: 1e-8, initial_damping: 1e-4, damping_up: 10.0, damping_down: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub state: GraphState,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Robust cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Trace of the Gauss-Newton marginal covariance of the highest-id pose.
    pub last_pose_cov_trace: f64,
}

/// Levenberg-Marquardt with Cauchy IRLS reweighting at each linearization.
pub fn optimize(g: &GraphState, params: &LmParams) -> Result<OptimizeResult> {
    g.check_structure()?;
    let (idx, n) = g.layout();
    let np = 6 * g.poses.len();
    let mut state = g.clone();
    let mut cost = state.total_cost()?;
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = params.initial_damping;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        let (h, grad) = state.normal_equations(&idx, n)?;
        if grad.amax() < params.grad_tol {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
            }
            let Some(delta) = solve_schur(&damped, &grad, np) else {
                lambda *= params.damping_up;
                continue;
            };
            let mut trial = state.clone();
            trial.apply(&idx, &delta)?;
            let trial_cost = trial.total_cost()?;
            if trial_cost.is_finite() && trial_cost <= cost {
                let converged = cost - trial_cost <= 1e-15 * cost.max(1e-300);
                state = trial;
                cost = trial_cost;
                history.push(cost);
                lambda = (lambda / params.damping_down).max(1e-12);
                accepted = !converged;
                break;
            }
            lambda *= params.damping_up;
        }
        if !accepted {
            break;
        }
    }
    let last_pose_cov_trace = last_pose_covariance_trace(&state, &idx, n)?;
    Ok(OptimizeResult { state, initial_cost, final_cost: cost, iterations, cost_history: history, last_pose_cov_trace })
}

fn last_pose_covariance_trace(state: &GraphState, idx: &BTreeMap<Var, usize>, n: usize) -> Result<f64> {
    let Some((&last, _)) = state.poses.iter().next_back() else { return Ok(0.0) };
    let (mut h, _) = state.normal_equations(idx, n)?;
    for i in 0..n {
        h[(i, i)] += 1e-12;
    }
    // The pose block of the inverse equals the inverse of the landmark-eliminated system.
    let np = 6 * state.poses.len();
    let reduced = Reduced::new(&h, np).ok_or(Error::Conditioning)?;
    let chol = reduced.s.clone().cholesky().ok_or(Error::Conditioning)?;
    let o = idx[&Var::Pose(last)];
    let mut tr = 0.0;
    for k in 0..6 {
        let mut e = DVector::zeros(np);
        e[o + k] = 1.0;
        tr += chol.solve(&e)[o + k];
    }
    Ok(tr)
}

/// Normal equations with the landmarks eliminated. Landmarks follow the poses in the
/// layout and each one only couples to poses, so its diagonal block is 3×3.
struct Reduced {
    s: DMatrix<f64>,
    /// Per landmark: offset, inverse diagonal block, offsets of the coupled poses.
    blocks: Vec<(usize, Mat3, Vec<usize>)>,
}

impl Reduced {
    fn new(h: &DMatrix<f64>, np: usize) -> Option<Self> {
        let n = h.nrows();
        let mut s = h.view((0, 0), (np, np)).clone_owned();
        let mut blocks = Vec::with_capacity((n - np) / 3);
        for o in (np..n).step_by(3) {
            let hll: Mat3 = h.fixed_view::<3, 3>(o, o).clone_owned();
            let inv = hll.cholesky()?.inverse();
            let poses: Vec<usize> = (0..np)
                .step_by(6)
                .filter(|&p| h.view((p, o), (6, 3)).iter().any(|&x| x != 0.0))
                .collect();
            let hpl: Vec<SMatrix<f64, 6, 3>> = poses.iter().map(|&p| h.fixed_view::<6, 3>(p, o).clone_owned()).collect();
            for (a, &pa) in poses.iter().enumerate() {
                let t = hpl[a] * inv;
                for (b, &pb) in poses.iter().enumerate() {
                    let mut v = s.fixed_view_mut::<6, 6>(pa, pb);
                    v -= t * hpl[b].transpose();
                }
            }
            blocks.push((o, inv, poses));
        }
        Some(Self { s, blocks })
    }
}

/// Solves `H δ = −g` by eliminating landmarks first; `None` if `H` is not positive definite.
fn solve_schur(h: &DMatrix<f64>, g: &DVector<f64>, np: usize) -> Option<DVector<f64>> {
    let reduced = Reduced::new(h, np)?;
    let mut rhs = -g.rows(0, np).clone_owned();
    for (o, inv, poses) in &reduced.blocks {
        let t = inv * g.fixed_rows::<3>(*o);
        for &p in poses {
            let mut r = rhs.fixed_rows_mut::<6>(p);
            r += h.fixed_view::<6, 3>(p, *o) * t;
        }
    }
    let dp = reduced.s.cholesky()?.solve(&rhs);
    let mut delta = DVector::zeros(h.nrows());
    delta.rows_mut(0, np).copy_from(&dp);
    for (o, inv, poses) in &reduced.blocks {
        let mut b = -g.fixed_rows::<3>(*o).clone_owned();
        for &p in poses {
            b -= h.fixed_view::<3, 6>(*o, p) * dp.fixed_rows::<6>(p);
        }
        delta.fixed_rows_mut::<3>(*o).copy_from(&(inv * b));
    }
    Some(delta)
}

/// Root-mean-square translational error between time-aligned trajectories.
pub fn rmse(trajectory: &[Pose], ground_truth: &[Pose]) -> Result<f64> {
    if trajectory.len() != ground_truth.len() {
        return Err(Error::LengthMismatch(trajectory.len(), ground_truth.len()));
    }
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let s: f64 = trajectory.iter().zip(ground_truth).map(|(a, b)| (a.translation - b.translation).norm_squared()).sum();
    Ok((s / trajectory.len() as f64).sqrt())
}

/// Diagonal 6×6 information from translation and rotation standard deviations.
pub fn pose_information(sigma_t: f64, sigma_r: f64) -> Matrix6<f64> {
    let it = 1.0 / (sigma_t * sigma_t);
    let ir = 1.0 / (sigma_r * sigma_r);
    Matrix6::from_diagonal(&Vector6::new(it, it, it, ir, ir, ir))
}

/// Symmetric inverse of an SPD 3×3 covariance.
pub fn information_from_cov(cov: &Mat3) -> Result<Mat3> {
    let inv = cov.try_inverse().ok_or(Error::NotSpd("landmark covariance"))?;
    let sym: SMatrix<f64, 3, 3> = 0.5 * (inv + inv.transpose());
    if !is_spd(&sym) {
        return Err(Error::NotSpd("landmark information"));
    }
    Ok(sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Pose::new(
            Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            so3_exp(&(axis * 2.5)),
        )
    }

    fn prior(pose: u64, p: Pose) -> Factor {
        Factor::Prior { pose, measured: p, information: pose_information(1e-3, 1e-3), robust: Robust::None }
    }

    fn odo(from: u64, to: u64, m: Pose) -> Factor {
        Factor::Between {
            kind: BetweenKind::Odometry,
            from,
            to,
            measured: m,
            information: pose_information(0.1, 0.01),
            robust: Robust::None,
        }
    }

    #[test]
    fn cauchy_examples() {
        assert_eq!(cauchy_weight(0.0, 2.0), 1.0);
        assert_eq!(cauchy_weight(2.0, 2.0), 0.5);
        assert!((cauchy_weight(6.0, 2.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rmse_examples() {
        let a = vec![Pose::identity(); 3];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<Pose> = a.iter().map(|p| Pose::new(p.translation + Vec3::x(), p.rotation)).collect();
        assert!((rmse(&b, &a).unwrap() - 1.0).abs() < 1e-15);
        let c = vec![Pose::from_xyz_yaw(1.0, 0.0, 0.0, 0.0), Pose::from_xyz_yaw(0.0, 2.0, 0.0, 0.0)];
        assert!((rmse(&c, &a[..2]).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&c, &a).is_err());
    }

    fn numeric_jacobian(f: &Factor, g: &GraphState, v: Var) -> DMatrix<f64> {
        let h = 1e-6;
        let r0 = f.residual(g).unwrap();
        let mut j = DMatrix::zeros(r0.len(), v.dim());
        for k in 0..v.dim() {
            let mut d = vec![0.0; v.dim()];
            d[k] = h;
            let mut gp = g.clone();
            gp.retract(v, &d).unwrap();
            d[k] = -h;
            let mut gm = g.clone();
            gm.retract(v, &d).unwrap();
            let col = (f.residual(&gp).unwrap() - f.residual(&gm).unwrap()) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut g = GraphState::new();
            g.poses.insert(0, rand_pose(&mut rng));
            g.poses.insert(1, rand_pose(&mut rng));
            g.landmarks.insert(0, Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0));
            let noise = rand_pose(&mut rng);
            let small = Pose::new(noise.translation * 0.1, so3_exp(&(so3_log(&noise.rotation) * 0.3)));
            let factors = vec![
                prior(0, g.poses[&0].compose(&small)),
                odo(0, 1, g.poses[&0].between(&g.poses[&1]).compose(&small)),
                Factor::Landmark {
                    pose: 1,
                    landmark: 0,
                    measured: Vec3::new(0.3, -0.2, 0.1),
                    information: Mat3::identity(),
                    robust: Robust::Cauchy(1.0),
                },
            ];
            for f in &factors {
                let lin = f.linearize(&g).unwrap();
                for (v, ja) in &lin.jacobians {
                    let jn = numeric_jacobian(f, &g, *v);
                    let err = (ja - &jn).norm() / jn.norm().max(1.0);
                    assert!(err < 1e-5, "{f:?} {v:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn consistent_chain_does_not_move() {
        let mut g = GraphState::new();
        let poses = [Pose::identity(), Pose::from_xyz_yaw(1.0, 0.0, 0.0, 0.3), Pose::from_xyz_yaw(2.0, 0.5, 0.0, 0.6)];
        for (i, p) in poses.iter().enumerate() {
            g.poses.insert(i as u64, *p);
        }
        g.add_factor(prior(0, poses[0])).unwrap();
        g.add_factor(odo(0, 1, poses[0].between(&poses[1]))).unwrap();
        g.add_factor(odo(1, 2, poses[1].between(&poses[2]))).unwrap();
        let r = optimize(&g, &LmParams::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.final_cost < 1e-20);
        assert_eq!(r.state.poses, g.poses);
    }

    fn square(n_side: usize) -> Vec<Pose> {
        let mut out = vec![Pose::identity()];
        for k in 0..4 * n_side {
            let last = *out.last().unwrap();
            let yaw = if (k + 1) % n_side == 0 { std::f64::consts::FRAC_PI_2 } else { 0.0 };
            out.push(last.compose(&Pose::from_xyz_yaw(1.0, 0.0, 0.0, yaw)));
        }
        out
    }

    fn drifted_square(loop_factor: Option<Factor>, extra: Vec<Factor>) -> (GraphState, Vec<Pose>) {
        let truth = square(5);
        let mut g = GraphState::new();
        g.add_factor(prior(0, truth[0])).unwrap();
        let mut est = truth[0];
        g.poses.insert(0, est);
        for i in 1..truth.len() {
            let rel = truth[i - 1].between(&truth[i]);
            // A constant heading bias accumulates into ~0.5 m endpoint drift.
            let noisy = rel.compose(&Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.005));
            est = est.compose(&noisy);
            g.poses.insert(i as u64, est);
            g.add_factor(odo(i as u64 - 1, i as u64, noisy)).unwrap();
        }
        if let Some(f) = loop_factor {
            g.add_factor(f).unwrap();
        }
        for f in extra {
            g.add_factor(f).unwrap();
        }
        (g, truth)
    }

    #[test]
    fn loop_factor_removes_drift() {
        let truth = square(5);
        let last = truth.len() as u64 - 1;
        let lf = Factor::Between {
            kind: BetweenKind::Loop,
            from: 0,
            to: last,
            measured: truth[0].between(&truth[last as usize]),
            information: pose_information(1e-3, 1e-4),
            robust: Robust::None,
        };
        let (g, _) = drifted_square(Some(lf), vec![]);
        let before = (g.poses[&last].translation - truth[last as usize].translation).norm();
        assert!(before > 0.3, "drift {before}");
        let r = optimize(&g, &LmParams::default()).unwrap();
        let after = (r.state.poses[&last].translation - truth[last as usize].translation).norm();
        assert!(after < 0.1 * before, "{before} → {after}");
        for w in r.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for p in r.state.poses.values() {
            assert!((p.rotation.into_inner().norm() - 1.0).abs() < 1e-9);
        }
        assert!(r.last_pose_cov_trace > 0.0);
    }

    #[test]
    fn cauchy_resists_outlier_loop() {
        let truth = square(5);
        let n = truth.len();
        let good = |from: usize, to: usize| Factor::Between {
            kind: BetweenKind::Loop,
            from: from as u64,
            to: to as u64,
            measured: truth[from].between(&truth[to]),
            information: pose_information(0.05, 0.01),
            robust: Robust::Cauchy(1.0),
        };
        let inliers: Vec<Factor> = (0..n - 2).step_by(1).take(20).map(|i| good(i, i + 2)).collect();
        let (clean, _) = drifted_square(Some(good(0, n - 1)), inliers.clone());
        let bad = Factor::Between {
            kind: BetweenKind::Loop,
            from: 3,
            to: 15,
            measured: Pose::from_xyz_yaw(8.0, -6.0, 0.0, 2.0),
            information: pose_information(0.05, 0.01),
            robust: Robust::Cauchy(1.0),
        };
        let mut with_bad = inliers;
        with_bad.push(bad);
        let (dirty, _) = drifted_square(Some(good(0, n - 1)), with_bad);
        let rc = optimize(&clean, &LmParams::default()).unwrap();
        let rd = optimize(&dirty, &LmParams::default()).unwrap();
        let traj = |s: &GraphState| s.poses.values().copied().collect::<Vec<_>>();
        let e_clean = rmse(&traj(&rc.state), &truth).unwrap();
        let e_dirty = rmse(&traj(&rd.state), &truth).unwrap();
        assert!(e_dirty <= 2.0 * e_clean.max(1e-3), "{e_clean} vs {e_dirty}");
    }

    #[test]
    fn gauge_follows_the_prior() {
        let truth = square(3);
        let lf = Factor::Between {
            kind: BetweenKind::Loop,
            from: 0,
            to: truth.len() as u64 - 1,
            measured: truth[0].between(truth.last().unwrap()),
            information: pose_information(0.01, 0.001),
            robust: Robust::Cauchy(1.0),
        };
        let (g, _) = drifted_square(Some(lf), vec![]);
        let a = optimize(&g, &LmParams::default()).unwrap();
        let w = Pose::new(Vec3::new(3.0, -1.0, 2.0), UnitQuaternion::from_euler_angles(0.3, 0.2, -1.0));
        let mut moved = g.clone();
        for p in moved.poses.values_mut() {
            *p = w.compose(p);
        }
        for f in moved.factors.iter_mut() {
            if let Factor::Prior { measured, .. } = f {
                *measured = w.compose(measured);
            }
        }
        let b = optimize(&moved, &LmParams::default()).unwrap();
        let ta: Vec<Pose> = a.state.poses.values().map(|p| w.compose(p)).collect();
        let tb: Vec<Pose> = b.state.poses.values().copied().collect();
        assert!(rmse(&ta, &tb).unwrap() < 1e-9);
    }

    #[test]
    fn structural_errors() {
        let mut g = GraphState::new();
        g.poses.insert(0, Pose::identity());
        g.poses.insert(1, Pose::identity());
        assert!(matches!(optimize(&g, &LmParams::default()), Err(Error::Structure(_))));
        g.add_factor(prior(0, Pose::identity())).unwrap();
        assert!(matches!(optimize(&g, &LmParams::default()), Err(Error::Structure(_))));
        g.add_factor(odo(0, 1, Pose::identity())).unwrap();
        assert!(optimize(&g, &LmParams::default()).is_ok());
        g.add_factor(odo(1, 7, Pose::identity())).unwrap();
        assert!(matches!(optimize(&g, &LmParams::default()), Err(Error::Structure(_))));
        let mut h = GraphState::new();
        let bad = Factor::Prior { pose: 0, measured: Pose::identity(), information: Matrix6::zeros(), robust: Robust::None };
        assert!(h.add_factor(bad).is_err());
    }

    #[test]
    fn schur_solve_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (n_poses, n_lms) = (rng.random_range(1..6), rng.random_range(0..6));
            let np = 6 * n_poses;
            let n = np + 3 * n_lms;
            let mut h = DMatrix::<f64>::identity(n, n);
            // Adds JᵀJ of a random Jacobian over the given (offset, dim) blocks.
            let add = |h: &mut DMatrix<f64>, offs: &[(usize, usize)], rng: &mut ChaCha8Rng| {
                let dim: usize = offs.iter().map(|o| o.1).sum();
                let j = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                let jtj = j.transpose() * &j;
                let mut ra = 0;
                for &(oa, da) in offs {
                    let mut ca = 0;
                    for &(ob, db) in offs {
                        let mut v = h.view_mut((oa, ob), (da, db));
                        v += jtj.view((ra, ca), (da, db));
                        ca += db;
                    }
                    ra += da;
                }
            };
            for p in 1..n_poses {
                add(&mut h, &[(6 * (p - 1), 6), (6 * p, 6)], &mut rng);
            }
            for l in 0..n_lms {
                for _ in 0..rng.random_range(1..4) {
                    let p = rng.random_range(0..n_poses);
                    add(&mut h, &[(6 * p, 6), (np + 3 * l, 3)], &mut rng);
                }
            }
            let g = DVector::<f64>::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let dense = -h.clone().cholesky().unwrap().solve(&g);
            let schur = solve_schur(&h, &g, np).unwrap();
            assert!((dense - schur).amax() < 1e-9);
        }
    }
}
