//! Linear-interpolant flow construction and conditioning.
//!
//! Points move on straight lines between a standard-normal prior draw `x0`
//! and a data draw `x1`: `x_t = (1 - t) x0 + t x1`, so the instantaneous
//! velocity is the constant `v = x1 - x0` and the average velocity from any
//! interior point to the endpoint is `(x1 - x_t) / (1 - t)`.
//!
//! Training times are drawn by pushing a log-normal through an arctan warp,
//! `t = 1 - (2/pi) atan(sigma)`, which concentrates mass near the data end
//! while keeping full support on (0, 1).
//!
//! A network trained here answers two different questions — "what is the
//! instantaneous velocity?" and "what is the average velocity to the end?" —
//! and must be told which one is being asked. [`encode_condition`] maps
//! (scheme, task, t) to the raw condition components fed to the network,
//! together with their derivatives along the trajectory (needed to seed the
//! dual-number sweep).

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Where a drawn time may land; draws outside are rejected and retried so
/// downstream code never divides by 1 - t = 0 or conditions exactly at an
/// endpoint.
pub const T_MIN: f64 = 1e-5;
pub const T_MAX: f64 = 1.0 - 1e-5;

/// One training draw: endpoints, time, interpolated point, and velocity.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: [f64; 2],
    pub x1: [f64; 2],
    pub t: f64,
    pub x_t: [f64; 2],
    /// Instantaneous velocity x1 - x0 (constant along the line).
    pub v: [f64; 2],
    /// Class label for conditional datasets; `None` means unconditional.
    pub label: Option<usize>,
}

/// Parameters of the arctan-warped log-normal time distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSchedule {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        TimeSchedule { p_mean: -0.8, p_std: 1.6 }
    }
}

impl TimeSchedule {
    pub fn new(p_mean: f64, p_std: f64) -> Self {
        assert!(p_std > 0.0, "time schedule needs positive spread, got {p_std}");
        TimeSchedule { p_mean, p_std }
    }

    /// Median of the (untruncated) distribution in closed form: the warp is
    /// monotone, so it maps the log-normal median exp(p_mean) directly.
    pub fn analytic_median(&self) -> f64 {
        1.0 - std::f64::consts::FRAC_2_PI * self.p_mean.exp().atan()
    }
}

/// Draw one training time. Rejection keeps t strictly inside
/// (T_MIN, T_MAX); the rejected mass is ~1e-10 so it never distorts the
/// distribution measurably.
pub fn sample_time(schedule: &TimeSchedule, rng: &mut ChaCha8Rng) -> f64 {
    assert!(schedule.p_std > 0.0, "time schedule needs positive spread");
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let sigma = (schedule.p_mean + schedule.p_std * z).exp();
        let t = 1.0 - std::f64::consts::FRAC_2_PI * sigma.atan();
        if t > T_MIN && t < T_MAX {
            return t;
        }
    }
}

/// Place a point on the line between `x0` and `x1` at time `t in [0, 1]`.
pub fn interpolate(x0: [f64; 2], x1: [f64; 2], t: f64, label: Option<usize>) -> FlowSample {
    assert!((0.0..=1.0).contains(&t), "interpolation time {t} outside [0, 1]");
    let x_t = [(1.0 - t) * x0[0] + t * x1[0], (1.0 - t) * x0[1] + t * x1[1]];
    let v = [x1[0] - x0[0], x1[1] - x0[1]];
    FlowSample { x0, x1, t, x_t, v, label }
}

/// Average velocity from an interior point to the data endpoint.
pub fn average_velocity(x1: [f64; 2], x_t: [f64; 2], t: f64) -> [f64; 2] {
    assert!(t < 1.0, "average velocity undefined at t = 1");
    [(x1[0] - x_t[0]) / (1.0 - t), (x1[1] - x_t[1]) / (1.0 - t)]
}

/// How task identity is wired into the time conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditioningScheme {
    /// Shortcut task keeps t in [0, 1]; the velocity task is folded into the
    /// mirrored interval as 2 - t, so one scalar input spans [0, 2].
    ExpandedInterval,
    /// Two time inputs: (t, 1) asks for the shortcut to the end, (t, t) asks
    /// for the instantaneous velocity at t.
    AuxiliaryTime,
}

impl ConditioningScheme {
    /// Number of raw condition components the network receives.
    pub fn arity(&self) -> usize {
        match self {
            ConditioningScheme::ExpandedInterval => 1,
            ConditioningScheme::AuxiliaryTime => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditioningScheme::ExpandedInterval => "expanded_interval",
            ConditioningScheme::AuxiliaryTime => "auxiliary_time",
        }
    }
}

/// Which prediction the network is being asked for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionTask {
    /// Instantaneous velocity (flow-matching anchor).
    Fm,
    /// Average velocity to the endpoint (consistency shortcut).
    Cm,
}

/// Raw condition components for one sample, plus their derivative with
/// respect to t along the trajectory — the seed for the forward-mode sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSignal {
    pub task: ConditionTask,
    pub raw_t: f64,
    pub encoded: Vec<f64>,
    pub time_tangent: Vec<f64>,
}

/// Encode (scheme, task, t) into network condition components. `t` must lie
/// in [0, 1]; the two tasks map to distinct encodings for every t < 1.
pub fn encode_condition(scheme: ConditioningScheme, task: ConditionTask, t: f64) -> ConditioningSignal {
    assert!((0.0..=1.0).contains(&t), "condition time {t} outside [0, 1]");
    let (encoded, time_tangent) = match (scheme, task) {
        (ConditioningScheme::ExpandedInterval, ConditionTask::Cm) => (vec![t], vec![1.0]),
        (ConditioningScheme::ExpandedInterval, ConditionTask::Fm) => (vec![2.0 - t], vec![-1.0]),
        (ConditioningScheme::AuxiliaryTime, ConditionTask::Cm) => (vec![t, 1.0], vec![1.0, 0.0]),
        (ConditioningScheme::AuxiliaryTime, ConditionTask::Fm) => (vec![t, t], vec![1.0, 1.0]),
    };
    ConditioningSignal { task, raw_t: t, encoded, time_tangent }
}
