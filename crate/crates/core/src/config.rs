//! Flat `key = value` run configuration.
//!
//! Every tunable of the estimator, the loop detector, the back end and the simulator
//! lives here. Unknown or repeated keys are errors; `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use crate::assoc::{AssocParams, DpWeightMode};
use crate::error::{Error, Result};
use crate::filter::UkfParams;
use crate::graph::LmParams;
use crate::mht::ResampleParams;
use crate::placerec::{BayesBelief, PlaceRecParams, RansacParams, SceneMatchParams, SceneTermMode};
use crate::sim::{DetectorSpec, OdometrySpec, TrajectoryShape, WorldSpec};
use crate::submap::{Gate, TfidfDocUnit};
use crate::types::{ClassLabel, Mat3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Resampled multiple-hypothesis mapping.
    #[default]
    Dpmhm,
    /// Multiple hypotheses pruned to the best third by likelihood.
    MhmThreshold,
    /// One hypothesis, nearest-neighbour assignment.
    SingleUkf,
}

/// Conversion between config text and values.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn to_value(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::Config(format!("cannot parse '{s}'")))
            }
            fn to_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(f64, u64, u32, usize, bool);

impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn to_value(&self) -> String {
        self.map_or_else(|| "auto".to_string(), |v| v.to_string())
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(vec![]);
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn to_value(&self) -> String {
        self.iter().map(|v| v.to_value()).collect::<Vec<_>>().join(",")
    }
}

/// How fused submap landmarks enter the pose graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LandmarkFactorMode {
    /// One factor per landmark from the keyframe nearest the middle of its track,
    /// measuring the fused mean with the fused covariance.
    Fused,
    /// One factor per keyframe observation of each fused landmark along the most likely
    /// association history, measuring the raw detection.
    #[default]
    Observations,
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $v:expr),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)*
                    other => Err(Error::Config(format!("unknown value '{other}'"))),
                }
            }
            fn to_value(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}
enum_value!(Mode { "dpmhm" => Mode::Dpmhm, "mhm_threshold" => Mode::MhmThreshold, "single_ukf" => Mode::SingleUkf });
enum_value!(DpWeightMode { "exp" => DpWeightMode::Exp, "linear" => DpWeightMode::Linear });
enum_value!(SceneTermMode { "as_printed" => SceneTermMode::AsPrinted, "distance_weighted" => SceneTermMode::DistanceWeighted });
enum_value!(LandmarkFactorMode { "fused" => LandmarkFactorMode::Fused, "observations" => LandmarkFactorMode::Observations });
enum_value!(TfidfDocUnit { "submap" => TfidfDocUnit::Submap, "scene" => TfidfDocUnit::Scene });
enum_value!(TrajectoryShape {
    "square_loop" => TrajectoryShape::SquareLoop,
    "figure_eight" => TrajectoryShape::FigureEight,
    "line" => TrajectoryShape::Line,
});

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::parse_value(s)
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key '{other}'"))),
                }
                Ok(())
            }

            /// All keys with their text values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), ConfigValue::to_value(&self.$key))),*]
            }
        }
    };
}

run_config! {
    /// Estimator: dpmhm, mhm_threshold or single_ukf.
    mode: Mode = Mode::Dpmhm,
    world_seed: u64 = 0,
    run_seed: u64 = 0,

    /// Isotropic measurement variance (m²).
    meas_var: f64 = 0.04,
    /// Isotropic transitional variance for landmarks re-observed from earlier submaps (m²).
    trans_var: f64 = 0.25,
    dirichlet_alpha: f64 = 1.0,
    /// False-positive rate ρ; `auto` fits det_lambda_fp / mean detections per scene.
    fp_rate: Option<f64> = None,
    /// Map volume |M| (m³).
    map_volume: f64 = 8000.0,
    lambda_new: f64 = 0.05,
    lambda_fp: f64 = 0.01,
    prior_volume: f64 = 20.0,
    n_classes: usize = 8,
    /// Comma-separated class ids treated as static (no transitional covariance).
    dirac_classes: Vec<u32> = vec![],
    dp_weight: DpWeightMode = DpWeightMode::Exp,
    /// Scale of the false-positive likelihood; `auto` uses 1 / map_volume.
    fp_scale: Option<f64> = None,
    gate_mahalanobis_sq: f64 = 16.27,
    /// Gate (m) of the nearest-neighbour assignment used by single_ukf.
    nn_gate: f64 = 1.5,

    ukf_alpha: f64 = 0.1,
    ukf_beta: f64 = 2.0,
    ukf_kappa: f64 = 0.0,

    max_branches: usize = 5,
    plausibility_gap: f64 = 6.0,
    ess_fraction: f64 = 0.5,
    kld_epsilon: f64 = 0.05,
    kld_delta: f64 = 0.01,
    max_hypotheses: usize = 20,
    kld_cube_bracket: bool = false,

    /// Scenes per submap.
    submap_length: usize = 30,
    tfidf_doc_unit: TfidfDocUnit = TfidfDocUnit::Submap,
    gate_min_landmarks: usize = 8,
    /// Class-level tf-idf barely separates revisits from new places, so it is off by default.
    gate_min_tfidf: f64 = 0.0,
    fusion_min_existence: f64 = 0.5,
    fusion_min_observations: u32 = 2,

    tau_jsd: f64 = 0.5,
    r_l2: f64 = 0.35,
    /// Scenes closer than this in index are never loop candidates.
    exclusion_window: u64 = 40,
    edge_radius: f64 = 4.0,
    scene_penalty: f64 = 0.5,
    scene_dist_norm: f64 = 5.0,
    scene_term_mode: SceneTermMode = SceneTermMode::AsPrinted,
    tau_verify: f64 = 4.0,
    tau_bayes: f64 = 0.8,
    bayes_prior: f64 = 0.1,
    bayes_stay_lc: f64 = 0.9,
    bayes_stay_nlc: f64 = 0.9,
    bayes_p_pos_lc: f64 = 0.8,
    bayes_p_pos_nlc: f64 = 0.1,
    ransac_iterations: usize = 200,
    ransac_inlier_tol: f64 = 0.5,
    ransac_min_inliers: usize = 4,
    max_closures_per_pair: usize = 2,

    keyframe_interval: usize = 1,
    prior_sigma_t: f64 = 0.001,
    prior_sigma_r: f64 = 0.001,
    /// Per-step odometry standard deviations assumed by the back end.
    odom_sigma_t: f64 = 0.02,
    odom_sigma_r: f64 = 0.0005,
    /// Per-step vertical and roll/pitch standard deviations; small for ground vehicles.
    odom_sigma_z: f64 = 0.001,
    odom_sigma_rp: f64 = 0.0002,
    loop_sigma_t: f64 = 0.1,
    loop_sigma_r: f64 = 0.02,
    cauchy_c: f64 = 6.0,
    landmark_factor: LandmarkFactorMode = LandmarkFactorMode::Observations,
    lm_max_iters: usize = 50,
    lm_grad_tol: f64 = 1e-8,

    shape: TrajectoryShape = TrajectoryShape::SquareLoop,
    steps: usize = 80,
    step_length: f64 = 1.0,
    arena_size: f64 = 60.0,
    landmarks_per_class: Vec<usize> = vec![8, 8, 8, 8, 7, 7, 7, 7],
    lateral_min: f64 = 1.5,
    lateral_max: f64 = 8.0,
    height_max: f64 = 3.0,
    min_separation: f64 = 1.0,
    det_range: f64 = 10.0,
    det_fov_deg: f64 = 360.0,
    det_p_fn: f64 = 0.1,
    det_lambda_fp: f64 = 0.2,
    det_noise_var: f64 = 0.04,
    /// Probability of reporting the true class; errors spread uniformly over the others.
    det_class_accuracy: f64 = 1.0,
    odo_sigma_t: f64 = 0.02,
    odo_sigma_r: f64 = 0.0,
    odo_bias_yaw: f64 = 0.0,
}

impl RunConfig {
    /// Parses config text; unknown or repeated keys and malformed lines are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got '{line}'") })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Parse { line: i + 1, msg: format!("repeated key '{k}'") });
            }
            cfg.set(k, v).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("meas_var", self.meas_var),
            ("trans_var", self.trans_var),
            ("nn_gate", self.nn_gate),
            ("step_length", self.step_length),
            ("arena_size", self.arena_size),
            ("det_range", self.det_range),
            ("prior_sigma_t", self.prior_sigma_t),
            ("prior_sigma_r", self.prior_sigma_r),
            ("odom_sigma_t", self.odom_sigma_t),
            ("odom_sigma_r", self.odom_sigma_r),
            ("odom_sigma_z", self.odom_sigma_z),
            ("odom_sigma_rp", self.odom_sigma_rp),
            ("loop_sigma_t", self.loop_sigma_t),
            ("loop_sigma_r", self.loop_sigma_r),
            ("cauchy_c", self.cauchy_c),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [("det_noise_var", self.det_noise_var), ("odo_sigma_t", self.odo_sigma_t), ("odo_sigma_r", self.odo_sigma_r)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if self.submap_length == 0 || self.keyframe_interval == 0 || self.max_branches == 0 {
            return Err(Error::Config("submap_length, keyframe_interval and max_branches must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.det_class_accuracy) || !(0.0..=1.0).contains(&self.fusion_min_existence) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.landmarks_per_class.len() > self.n_classes {
            return Err(Error::Config("landmarks_per_class has more classes than n_classes".into()));
        }
        if self.fp_rate.is_some_and(|v| !(v > 0.0)) || self.fp_scale.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("fp_rate and fp_scale must be positive or auto".into()));
        }
        self.assoc_params(1.0).validate()?;
        self.resample_params().validate()?;
        self.placerec_params().validate()?;
        if self.det_class_accuracy < 1.0 && self.n_classes < 2 {
            return Err(Error::Config("class confusion needs at least two classes".into()));
        }
        Ok(())
    }

    /// Association parameters; `mean_detections` feeds the automatic false-positive rate.
    pub fn assoc_params(&self, mean_detections: f64) -> AssocParams {
        let fp_rate = self.fp_rate.unwrap_or_else(|| {
            if mean_detections > 0.0 && self.det_lambda_fp > 0.0 {
                (self.det_lambda_fp / mean_detections).min(1.0)
            } else {
                1e-3
            }
        });
        AssocParams {
            meas_cov: Mat3::identity() * self.meas_var,
            trans_cov_by_class: BTreeMap::new(),
            default_trans_cov: Mat3::identity() * self.trans_var,
            dirichlet_alpha: self.dirichlet_alpha,
            fp_rate,
            map_volume: self.map_volume,
            lambda_new: self.lambda_new,
            lambda_fp: self.lambda_fp,
            prior_volume: self.prior_volume,
            class_prior: BTreeMap::new(),
            n_classes: self.n_classes,
            dirac_classes: self.dirac_classes.iter().map(|&c| ClassLabel(c)).collect(),
            dp_weight_mode: self.dp_weight,
            fp_scale: self.fp_scale.unwrap_or(1.0 / self.map_volume),
            gate_mahalanobis_sq: self.gate_mahalanobis_sq,
        }
    }

    pub fn ukf_params(&self) -> UkfParams {
        UkfParams { alpha: self.ukf_alpha, beta: self.ukf_beta, kappa: self.ukf_kappa }
    }

    pub fn resample_params(&self) -> ResampleParams {
        ResampleParams {
            ess_fraction: self.ess_fraction,
            kld_epsilon: self.kld_epsilon,
            kld_delta: self.kld_delta,
            max_hypotheses: self.max_hypotheses,
            rng_seed: self.run_seed,
            kld_cube_bracket: self.kld_cube_bracket,
        }
    }

    pub fn placerec_params(&self) -> PlaceRecParams {
        PlaceRecParams {
            tau_jsd: self.tau_jsd,
            r_l2: self.r_l2,
            exclusion_window: self.exclusion_window,
            edge_radius: self.edge_radius,
            scene_match: SceneMatchParams { penalty: self.scene_penalty, dist_norm: self.scene_dist_norm, mode: self.scene_term_mode },
            tau_verify: self.tau_verify,
            tau_bayes: self.tau_bayes,
            bayes: BayesBelief {
                p_lc: self.bayes_prior,
                stay_lc: self.bayes_stay_lc,
                stay_nlc: self.bayes_stay_nlc,
                p_pos_lc: self.bayes_p_pos_lc,
                p_pos_nlc: self.bayes_p_pos_nlc,
            },
            ransac: RansacParams {
                iterations: self.ransac_iterations,
                inlier_tol: self.ransac_inlier_tol,
                min_inliers: self.ransac_min_inliers,
            },
            max_closures_per_pair: self.max_closures_per_pair,
            rng_seed: self.run_seed,
        }
    }

    pub fn gate(&self) -> Gate {
        Gate::Rule { min_landmarks: self.gate_min_landmarks, min_tfidf: self.gate_min_tfidf }
    }

    pub fn lm_params(&self) -> LmParams {
        LmParams { max_iters: self.lm_max_iters, grad_tol: self.lm_grad_tol, ..LmParams::default() }
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.world_seed,
            arena_size: self.arena_size,
            landmarks_per_class: self.landmarks_per_class.clone(),
            shape: self.shape,
            steps: self.steps,
            step_length: self.step_length,
            lateral_min: self.lateral_min,
            lateral_max: self.lateral_max,
            height_max: self.height_max,
            min_separation: self.min_separation,
        }
    }

    pub fn detector_spec(&self) -> DetectorSpec {
        let n = self.n_classes;
        let confusion = if self.det_class_accuracy >= 1.0 {
            vec![]
        } else {
            let off = (1.0 - self.det_class_accuracy) / (n - 1) as f64;
            (0..n).map(|i| (0..n).map(|j| if i == j { self.det_class_accuracy } else { off }).collect()).collect()
        };
        DetectorSpec {
            range: self.det_range,
            fov_deg: self.det_fov_deg,
            p_fn: self.det_p_fn,
            lambda_fp: self.det_lambda_fp,
            confusion,
            noise_cov: Mat3::identity() * self.det_noise_var,
        }
    }

    pub fn odometry_spec(&self) -> OdometrySpec {
        OdometrySpec { sigma_t: self.odo_sigma_t, sigma_r: self.odo_sigma_r, bias_yaw: self.odo_bias_yaw }
    }
}
