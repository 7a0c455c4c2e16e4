//! Deterministic synthetic worlds, a semantic detector model and noisy odometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::types::{ClassLabel, Mat3, Pose, SemanticMeasurement, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryShape {
    #[default]
    SquareLoop,
    FigureEight,
    Line,
}

impl TrajectoryShape {
    pub fn is_loop(self) -> bool {
        !matches!(self, TrajectoryShape::Line)
    }
}

impl std::str::FromStr for TrajectoryShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square_loop" => Ok(Self::SquareLoop),
            "figure_eight" => Ok(Self::FigureEight),
            "line" => Ok(Self::Line),
            other => Err(Error::Config(format!("unknown trajectory shape '{other}'"))),
        }
    }
}

impl std::fmt::Display for TrajectoryShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SquareLoop => "square_loop",
            Self::FigureEight => "figure_eight",
            Self::Line => "line",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    /// Side of the square arena (m), centered on the trajectory.
    pub arena_size: f64,
    pub landmarks_per_class: Vec<usize>,
    pub shape: TrajectoryShape,
    pub steps: usize,
    pub step_length: f64,
    /// Landmarks are placed this far (m) to the side of the path.
    pub lateral_min: f64,
    pub lateral_max: f64,
    pub height_max: f64,
    /// Minimum distance (m) between any two landmarks.
    pub min_separation: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            arena_size: 60.0,
            landmarks_per_class: vec![8, 8, 8, 8, 7, 7, 7, 7],
            shape: TrajectoryShape::SquareLoop,
            steps: 80,
            step_length: 1.0,
            lateral_min: 1.5,
            lateral_max: 8.0,
            height_max: 3.0,
            min_separation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSpec {
    pub range: f64,
    pub fov_deg: f64,
    pub p_fn: f64,
    /// Mean number of false positives per scene.
    pub lambda_fp: f64,
    /// Row-stochastic confusion matrix; empty means perfect classification.
    pub confusion: Vec<Vec<f64>>,
    pub noise_cov: Mat3,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self { range: 10.0, fov_deg: 360.0, p_fn: 0.1, lambda_fp: 0.2, confusion: vec![], noise_cov: Mat3::identity() * 0.04 }
    }
}

impl DetectorSpec {
    pub fn noiseless() -> Self {
        Self { p_fn: 0.0, lambda_fp: 0.0, noise_cov: Mat3::zeros(), ..Self::default() }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.range > 0.0) || !(0.0..=360.0).contains(&self.fov_deg) {
            return Err(Error::InvalidParameter("detector range/fov out of range".into()));
        }
        if !(0.0..1.0).contains(&self.p_fn) || !(self.lambda_fp >= 0.0) {
            return Err(Error::InvalidParameter("p_fn must lie in [0,1) and lambda_fp >= 0".into()));
        }
        if !self.confusion.is_empty() {
            if self.confusion.len() != n_classes || self.confusion.iter().any(|r| r.len() != n_classes) {
                return Err(Error::InvalidParameter("confusion matrix must be n_classes x n_classes".into()));
            }
            for r in &self.confusion {
                if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&x| x < 0.0) {
                    return Err(Error::InvalidParameter("confusion rows must be stochastic".into()));
                }
            }
        }
        let e = self.noise_cov.symmetric_eigenvalues();
        if e.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidParameter("detector noise covariance must be PSD".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometrySpec {
    /// Per-step translation noise (m), applied in the plane.
    pub sigma_t: f64,
    /// Per-step yaw noise (rad).
    pub sigma_r: f64,
    /// Constant yaw bias added every step (rad).
    pub bias_yaw: f64,
}

impl Default for OdometrySpec {
    fn default() -> Self {
        Self { sigma_t: 0.02, sigma_r: 0.0, bias_yaw: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimLandmark {
    pub id: u32,
    pub class: ClassLabel,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub landmarks: Vec<SimLandmark>,
    /// Ground-truth poses, one per scene (`steps + 1`).
    pub trajectory: Vec<Pose>,
    pub n_classes: usize,
    pub shape: TrajectoryShape,
}

fn pose_at(shape: TrajectoryShape, s: f64, perimeter: f64) -> Pose {
    match shape {
        TrajectoryShape::Line => Pose::from_xyz_yaw(s, 0.0, 0.0, 0.0),
        TrajectoryShape::SquareLoop => {
            let side = perimeter / 4.0;
            let seg = ((s / side).floor() as usize).min(3);
            let u = s - seg as f64 * side;
            let (x, y, yaw) = match seg {
                0 => (u, 0.0, 0.0),
                1 => (side, u, std::f64::consts::FRAC_PI_2),
                2 => (side - u, side, std::f64::consts::PI),
                _ => (0.0, side - u, -std::f64::consts::FRAC_PI_2),
            };
            Pose::from_xyz_yaw(x, y, 0.0, yaw)
        }
        TrajectoryShape::FigureEight => {
            let r = perimeter / (4.0 * std::f64::consts::PI);
            let half = perimeter / 2.0;
            if s <= half {
                let th = s / r;
                Pose::from_xyz_yaw(r * th.sin(), r - r * th.cos(), 0.0, th)
            } else {
                let th = (s - half) / r;
                Pose::from_xyz_yaw(r * th.sin(), -r + r * th.cos(), 0.0, -th)
            }
        }
    }
}

/// Builds landmarks and the ground-truth trajectory. Deterministic in `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    let total: usize = spec.landmarks_per_class.iter().sum();
    if total == 0 || spec.steps == 0 {
        return Err(Error::InvalidParameter("world needs landmarks and steps".into()));
    }
    if !(spec.step_length > 0.0 && spec.lateral_max >= spec.lateral_min && spec.lateral_min >= 0.0) {
        return Err(Error::InvalidParameter("invalid step length or lateral band".into()));
    }
    let perimeter = spec.steps as f64 * spec.step_length;
    let trajectory: Vec<Pose> = (0..=spec.steps).map(|k| pose_at(spec.shape, k as f64 * spec.step_length, perimeter)).collect();
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for p in &trajectory {
        lo = lo.inf(&p.translation);
        hi = hi.sup(&p.translation);
    }
    let center = (lo + hi) / 2.0;
    let half = spec.arena_size / 2.0;
    if (hi.x - lo.x) / 2.0 > half || (hi.y - lo.y) / 2.0 > half {
        return Err(Error::InvalidParameter("trajectory does not fit in the arena".into()));
    }
    // Dense path samples for the clearance test.
    let n_path = (perimeter / 0.25).ceil() as usize + 1;
    let path: Vec<Vec3> = (0..=n_path).map(|i| pose_at(spec.shape, perimeter * i as f64 / n_path as f64, perimeter).translation).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<(f64, Vec3)> = Vec::with_capacity(total);
    let mut tries = 0usize;
    while placed.len() < total {
        tries += 1;
        if tries > 200_000 {
            return Err(Error::InvalidParameter("could not place landmarks; loosen separation or widen arena".into()));
        }
        let s = rng.random_range(0.0..perimeter);
        let base = pose_at(spec.shape, s, perimeter);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let d = rng.random_range(spec.lateral_min..=spec.lateral_max) * side;
        let yaw = base.yaw();
        let h = rng.random_range(0.0..=spec.height_max);
        let p = base.translation + Vec3::new(-yaw.sin() * d, yaw.cos() * d, h);
        if (p.x - center.x).abs() > half || (p.y - center.y).abs() > half {
            continue;
        }
        let clear = path.iter().all(|q| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() >= spec.lateral_min - 1e-9);
        let separated = placed.iter().all(|(_, o)| (o - p).norm() >= spec.min_separation);
        if clear && separated {
            placed.push((s, p));
        }
    }
    // Classes come in spatial blocks along the path.
    let mut order: Vec<(f64, usize)> =
        placed.iter().enumerate().map(|(i, (s, _))| (s + rng.random_range(-2.0..2.0) * spec.step_length, i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut labels = vec![ClassLabel(0); total];
    let mut k = 0;
    for (c, &n) in spec.landmarks_per_class.iter().enumerate() {
        for _ in 0..n {
            labels[order[k].1] = ClassLabel(c as u32);
            k += 1;
        }
    }
    let landmarks = placed
        .iter()
        .enumerate()
        .map(|(i, (_, p))| SimLandmark { id: i as u32, class: labels[i], position: *p })
        .collect();
    Ok(World { landmarks, trajectory, n_classes: spec.landmarks_per_class.len(), shape: spec.shape })
}

/// Detections of one scene plus the noisy odometry increment that led to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    /// World-frame measurements.
    pub measurements: Vec<SemanticMeasurement>,
    /// Generating landmark per measurement; `None` for false positives.
    pub truth: Vec<Option<u32>>,
    pub odometry: Pose,
}

fn sample_gaussian<R: Rng>(cov: &Mat3, rng: &mut R) -> Vec3 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let z = Vec3::new(std.sample(rng), std.sample(rng), std.sample(rng));
    if cov.amax() == 0.0 {
        return Vec3::zeros();
    }
    match cov.cholesky() {
        Some(c) => c.l() * z,
        None => {
            let e = cov.symmetric_eigen();
            e.eigenvectors * Mat3::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt())) * z
        }
    }
}

fn in_view(pose: &Pose, p: &Vec3, det: &DetectorSpec) -> bool {
    let b = pose.inverse_transform_point(p);
    let planar = (b.x * b.x + b.y * b.y).sqrt();
    if planar > det.range {
        return false;
    }
    if det.fov_deg >= 360.0 {
        return true;
    }
    let bearing = b.y.atan2(b.x).to_degrees().abs();
    bearing <= det.fov_deg / 2.0
}

/// Simulates scene `k` of the world: detections at the true pose and the odometry
/// increment from scene `k − 1` (identity for the first scene).
pub fn simulate_step<R: Rng>(
    world: &World,
    k: usize,
    time: f64,
    det: &DetectorSpec,
    odo: &OdometrySpec,
    rng: &mut R,
) -> Result<SimStep> {
    let pose = world.trajectory.get(k).ok_or_else(|| Error::InvalidParameter(format!("scene {k} beyond trajectory")))?;
    let mut items: Vec<(SemanticMeasurement, Option<u32>)> = vec![];
    for lm in &world.landmarks {
        if !in_view(pose, &lm.position, det) {
            continue;
        }
        if det.p_fn > 0.0 && rng.random_bool(det.p_fn) {
            continue;
        }
        let class = if det.confusion.is_empty() {
            lm.class
        } else {
            let row = &det.confusion[lm.class.index()];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut c = row.len() - 1;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    c = j;
                    break;
                }
            }
            ClassLabel(c as u32)
        };
        let position = lm.position + sample_gaussian(&det.noise_cov, rng);
        items.push((SemanticMeasurement { scene_id: k as u64, time, position, class }, Some(lm.id)));
    }
    if det.lambda_fp > 0.0 {
        let n_fp = Poisson::new(det.lambda_fp).map_err(|e| Error::InvalidParameter(e.to_string()))?.sample(rng) as usize;
        let half_fov = det.fov_deg.min(360.0).to_radians() / 2.0;
        for _ in 0..n_fp {
            let r = det.range * rng.random::<f64>().sqrt();
            let a = rng.random_range(-half_fov..=half_fov);
            let z = rng.random_range(0.0..=3.0);
            let position = pose.transform_point(&Vec3::new(r * a.cos(), r * a.sin(), z));
            let class = ClassLabel(rng.random_range(0..world.n_classes.max(1)) as u32);
            items.push((SemanticMeasurement { scene_id: k as u64, time, position, class }, None));
        }
    }
    // Detection order carries no information about identity.
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    let odometry = if k == 0 {
        Pose::identity()
    } else {
        let rel = world.trajectory[k - 1].between(pose);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let dt = Vec3::new(odo.sigma_t * n.sample(rng), odo.sigma_t * n.sample(rng), 0.0);
        let dyaw = odo.sigma_r * n.sample(rng) + odo.bias_yaw;
        rel.compose(&Pose::from_xyz_yaw(dt.x, dt.y, 0.0, dyaw))
    };
    let (measurements, truth) = items.into_iter().unzip();
    Ok(SimStep { measurements, truth, odometry })
}

/// Rounds to 9 significant digits, the precision of the text logs.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

pub fn quantize_vec(v: &Vec3) -> Vec3 {
    v.map(quantize)
}

/// Quantized pose as it reads back from a log.
pub fn quantize_pose(p: &Pose) -> Pose {
    let q = p.quat_wxyz().map(quantize);
    Pose::from_parts(quantize_vec(&p.translation), q[0], q[1], q[2], q[3]).expect("unit quaternion")
}

pub const SCENE_DT: f64 = 0.1;

/// A complete simulated run, in the form written to and read from logs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    /// Sensor-frame measurements.
    pub measurements: Vec<SemanticMeasurement>,
    pub truth: Vec<Option<u32>>,
    /// Per-scene `(time, increment from previous scene)`; the first is the identity.
    pub odometry: Vec<(f64, Pose)>,
    pub ground_truth: Vec<(f64, Pose)>,
}

impl SimLog {
    pub fn scene_count(&self) -> usize {
        self.odometry.len()
    }
}

/// Runs the detector and odometry over the whole trajectory with a run seed.
pub fn simulate(world: &World, det: &DetectorSpec, odo: &OdometrySpec, run_seed: u64) -> Result<SimLog> {
    det.validate(world.n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let mut log = SimLog { measurements: vec![], truth: vec![], odometry: vec![], ground_truth: vec![] };
    for (k, pose) in world.trajectory.iter().enumerate() {
        let t = quantize(k as f64 * SCENE_DT);
        let step = simulate_step(world, k, t, det, odo, &mut rng)?;
        for (m, truth) in step.measurements.iter().zip(&step.truth) {
            let body = pose.inverse_transform_point(&m.position);
            log.measurements.push(SemanticMeasurement { position: quantize_vec(&body), ..*m });
            log.truth.push(*truth);
        }
        log.odometry.push((t, quantize_pose(&step.odometry)));
        log.ground_truth.push((t, quantize_pose(pose)));
    }
    Ok(log)
}

/// Poses obtained by chaining the odometry increments from the first ground-truth pose.
pub fn dead_reckoning(log: &SimLog) -> Vec<Pose> {
    let mut out = Vec::with_capacity(log.odometry.len());
    let mut cur = log.ground_truth.first().map(|g| g.1).unwrap_or_else(Pose::identity);
    for (k, (_, inc)) in log.odometry.iter().enumerate() {
        if k > 0 {
            cur = cur.compose(inc);
        }
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worlds_are_deterministic() {
        let spec = WorldSpec { seed: 42, ..Default::default() };
        assert_eq!(generate_world(&spec).unwrap(), generate_world(&spec).unwrap());
        let other = generate_world(&WorldSpec { seed: 43, ..Default::default() }).unwrap();
        assert_ne!(generate_world(&spec).unwrap().landmarks, other.landmarks);
    }

    #[test]
    fn square_loop_closes() {
        let w = generate_world(&WorldSpec { steps: 40, step_length: 1.0, ..Default::default() }).unwrap();
        assert_eq!(w.trajectory.len(), 41);
        let d = (w.trajectory[40].translation - w.trajectory[0].translation).norm();
        assert!(d < 1.0);
        let f8 = generate_world(&WorldSpec { shape: TrajectoryShape::FigureEight, ..Default::default() }).unwrap();
        assert!((f8.trajectory.last().unwrap().translation - f8.trajectory[0].translation).norm() < 1.0);
    }

    #[test]
    fn per_class_counts_and_arena() {
        let spec = WorldSpec { landmarks_per_class: vec![3, 0, 5, 2], ..Default::default() };
        let w = generate_world(&spec).unwrap();
        for (c, &n) in spec.landmarks_per_class.iter().enumerate() {
            assert_eq!(w.landmarks.iter().filter(|l| l.class == ClassLabel(c as u32)).count(), n);
        }
        for l in &w.landmarks {
            assert!(l.position.x.abs() < 60.0 && l.position.y.abs() < 60.0);
        }
        assert!(generate_world(&WorldSpec { landmarks_per_class: vec![0, 0], ..Default::default() }).is_err());
        assert!(generate_world(&WorldSpec { steps: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn noiseless_detector_is_exact() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let det = DetectorSpec::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [0usize, 10, 33] {
            let s = simulate_step(&w, k, 0.0, &det, &OdometrySpec::default(), &mut rng).unwrap();
            let visible: Vec<&SimLandmark> = w.landmarks.iter().filter(|l| in_view(&w.trajectory[k], &l.position, &det)).collect();
            assert_eq!(s.measurements.len(), visible.len());
            for (m, t) in s.measurements.iter().zip(&s.truth) {
                let lm = &w.landmarks[t.unwrap() as usize];
                assert_eq!(m.position, lm.position);
                assert_eq!(m.class, lm.class);
            }
        }
    }

    #[test]
    fn zero_fov_sees_nothing() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let det = DetectorSpec { fov_deg: 0.0, lambda_fp: 0.0, ..DetectorSpec::noiseless() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..w.trajectory.len() {
            let s = simulate_step(&w, k, 0.0, &det, &OdometrySpec::default(), &mut rng).unwrap();
            assert!(s.truth.iter().all(|t| t.is_none()));
        }
    }

    #[test]
    fn false_positive_rate() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let det = DetectorSpec { fov_deg: 0.0, lambda_fp: 2.0, ..DetectorSpec::noiseless() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut total = 0usize;
        for i in 0..n {
            let s = simulate_step(&w, i % w.trajectory.len(), 0.0, &det, &OdometrySpec::default(), &mut rng).unwrap();
            total += s.truth.iter().filter(|t| t.is_none()).count();
        }
        let mean = total as f64 / n as f64;
        let se = (2.0 / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn quantization_is_stable() {
        for &x in &[1.0 / 3.0, -123456.789012345, 1e-7 * std::f64::consts::PI, 0.0] {
            let q = quantize(x);
            assert_eq!(quantize(q), q);
            assert_eq!(q.to_string().parse::<f64>().unwrap(), q);
        }
        let p = quantize_pose(&Pose::from_xyz_yaw(1.0 / 3.0, 2.0, 0.0, 0.7));
        assert_eq!(quantize_pose(&p).translation, p.translation);
    }

    #[test]
    fn simulation_is_deterministic_and_odometry_chains() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let a = simulate(&w, &DetectorSpec::default(), &OdometrySpec::default(), 9).unwrap();
        let b = simulate(&w, &DetectorSpec::default(), &OdometrySpec::default(), 9).unwrap();
        assert_eq!(a, b);
        let exact = simulate(&w, &DetectorSpec::noiseless(), &OdometrySpec { sigma_t: 0.0, ..Default::default() }, 1).unwrap();
        let dr = dead_reckoning(&exact);
        for (p, g) in dr.iter().zip(&w.trajectory) {
            assert!((p.translation - g.translation).norm() < 1e-6);
        }
    }
}
