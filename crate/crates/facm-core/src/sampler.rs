//! Few-step sampling with re-noising, and multi-step ODE reference
//! integration.
//!
//! Few-step generation starts at pure prior noise (time 0), and at each
//! scheduled time jumps to a data estimate with one model call:
//! x̂₁ = x + (1 - t) F(x, t). Between steps the point is re-noised back
//! onto the interpolation path at the next time with fresh noise:
//! x = t' x̂₁ + (1 - t') z. One model call per step — guidance is baked
//! into the trained field, never applied at sampling time.
//!
//! Noise is keyed by (sample index, step index), so a sample's path never
//! depends on how many other samples are drawn alongside it.
//!
//! The ODE reference integrates dx/dt = F(x, t) under the velocity-anchor
//! conditioning on a uniform grid (Euler or Heun), applying classifier-free
//! guidance per step; it serves as ground truth for the trained teacher.

use rand::RngExt;
use rand_distr::StandardNormal;

use crate::flow::{encode_condition, ConditionTask};
use crate::network::Network;
use crate::objectives::{cfg_velocity, GuidanceSpec};
use crate::rng;
use crate::tensor::Tensor;

/// Uniformly spaced jump times t_i = (i - 1)/N, i = 1..N: starts at 0,
/// strictly increasing, all below 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSchedule {
    times: Vec<f64>,
}

impl SampleSchedule {
    pub fn uniform(n: usize) -> SampleSchedule {
        assert!(n >= 1, "schedule needs at least one step");
        SampleSchedule { times: (0..n).map(|i| i as f64 / n as f64).collect() }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

fn keyed_noise(n: usize, dim: usize, seed: u64, step: u64) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut r = rng::substream(seed, "sample.noise", i as u64, step);
        for _ in 0..dim {
            data.push(r.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::new(vec![n, dim], data)
}

/// Few-step generation for an arbitrary velocity field `field(x, t)`.
/// Returns the final data estimate, shape (n_samples, dim).
pub fn few_step_sample_with<F>(
    field: F,
    schedule: &SampleSchedule,
    n_samples: usize,
    dim: usize,
    seed: u64,
) -> Tensor
where
    F: Fn(&Tensor, f64) -> Tensor,
{
    assert!(n_samples >= 1, "need at least one sample");
    let times = schedule.times();
    let mut x = keyed_noise(n_samples, dim, seed, 0);
    let mut x_hat = x.clone();
    for (j, &t) in times.iter().enumerate() {
        let f = field(&x, t);
        assert_eq!(f.shape(), x.shape(), "field output shape mismatch");
        x_hat = x.add(&f.scale(1.0 - t));
        if j + 1 < times.len() {
            let t_next = times[j + 1];
            let z = keyed_noise(n_samples, dim, seed, (j + 1) as u64);
            x = x_hat.scale(t_next).add(&z.scale(1.0 - t_next));
        }
    }
    x_hat
}

/// Few-step generation from a trained network with per-sample labels.
pub fn few_step_sample_labeled(
    net: &Network,
    schedule: &SampleSchedule,
    labels: &[Option<usize>],
    seed: u64,
) -> Tensor {
    let n = labels.len();
    let dim = net.config.input_dim;
    let scheme = net.config.scheme;
    few_step_sample_with(
        |x, t| {
            let cond: Vec<_> =
                (0..n).map(|_| encode_condition(scheme, ConditionTask::Cm, t)).collect();
            net.forward(x, &cond, labels)
        },
        schedule,
        n,
        dim,
        seed,
    )
}

/// Few-step generation with one shared label (or none) for all samples.
pub fn few_step_sample(
    net: &Network,
    n_steps: usize,
    n_samples: usize,
    label: Option<usize>,
    seed: u64,
) -> Tensor {
    let schedule = SampleSchedule::uniform(n_steps);
    few_step_sample_labeled(net, &schedule, &vec![label; n_samples], seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeMethod {
    Euler,
    Heun,
}

impl OdeMethod {
    pub fn parse(s: &str) -> Option<OdeMethod> {
        match s {
            "euler" => Some(OdeMethod::Euler),
            "heun" => Some(OdeMethod::Heun),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Heun => "heun",
        }
    }
}

/// Fixed-grid integration of dx/dt = field(x, t) from t = 0 to 1.
pub fn integrate_field<F>(field: &F, x0: &Tensor, n_steps: usize, method: OdeMethod) -> Tensor
where
    F: Fn(&Tensor, f64) -> Tensor,
{
    assert!(n_steps >= 1, "need at least one integration step");
    let h = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for i in 0..n_steps {
        let t = i as f64 * h;
        match method {
            OdeMethod::Euler => {
                let k1 = field(&x, t);
                x = x.add(&k1.scale(h));
            }
            OdeMethod::Heun => {
                let k1 = field(&x, t);
                let pred = x.add(&k1.scale(h));
                let k2 = field(&pred, t + h);
                x = x.add(&k1.add(&k2).scale(h / 2.0));
            }
        }
    }
    x
}

/// The teacher's guided velocity field under the anchor conditioning.
pub fn guided_field<'a>(
    teacher: &'a Network,
    guidance: &'a GuidanceSpec,
    labels: &'a [Option<usize>],
) -> impl Fn(&Tensor, f64) -> Tensor + 'a {
    move |x: &Tensor, t: f64| {
        let n = x.dims2().0;
        assert_eq!(n, labels.len());
        let cond: Vec<_> = (0..n)
            .map(|_| encode_condition(teacher.config.scheme, ConditionTask::Fm, t))
            .collect();
        if teacher.config.num_classes == 0 {
            teacher.forward(x, &cond, labels)
        } else {
            let none = vec![None; n];
            let v_c = teacher.forward(x, &cond, labels);
            let v_u = teacher.forward(x, &cond, &none);
            cfg_velocity(&v_u, &v_c, &v_u, guidance, &vec![t; n])
        }
    }
}

/// Multi-step ODE solve of the guided teacher field from given noise.
pub fn ode_solve_from(
    teacher: &Network,
    guidance: &GuidanceSpec,
    x0: &Tensor,
    labels: &[Option<usize>],
    n_steps: usize,
    method: OdeMethod,
) -> Tensor {
    let field = guided_field(teacher, guidance, labels);
    integrate_field(&field, x0, n_steps, method)
}

/// Multi-step ODE reference sampler: draws prior noise from a labeled
/// stream and integrates the guided teacher field.
pub fn ode_solve_reference(
    teacher: &Network,
    guidance: &GuidanceSpec,
    n_steps: usize,
    method: OdeMethod,
    n_samples: usize,
    label: Option<usize>,
    seed: u64,
) -> Tensor {
    let dim = net_dim(teacher);
    let mut r = rng::stream(seed, "ode.prior");
    let data = (0..n_samples * dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let x0 = Tensor::new(vec![n_samples, dim], data);
    ode_solve_from(teacher, guidance, &x0, &vec![label; n_samples], n_steps, method)
}

fn net_dim(net: &Network) -> usize {
    net.config.input_dim
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_schedule_matches_the_formula() {
        assert_eq!(SampleSchedule::uniform(1).times(), &[0.0]);
        assert_eq!(SampleSchedule::uniform(2).times(), &[0.0, 0.5]);
        assert_eq!(SampleSchedule::uniform(4).times(), &[0.0, 0.25, 0.5, 0.75]);
        let s = SampleSchedule::uniform(7);
        let times = s.times();
        assert_eq!(times[0], 0.0);
        for w in times.windows(2) {
            assert!(w[0] < w[1], "strictly increasing");
        }
        assert!(times.iter().all(|&t| t < 1.0));
    }

    #[test]
    fn one_step_with_a_constant_field_lands_on_the_known_endpoint() {
        // field constant c: the pair (prior, prior + c) lies on a linear
        // flow with velocity c, so a single jump recovers the endpoint.
        let c = [0.5, -2.0];
        let field = |x: &Tensor, _t: f64| {
            Tensor::new(x.shape().to_vec(), c.iter().cycle().take(x.numel()).copied().collect())
        };
        let out = few_step_sample_with(field, &SampleSchedule::uniform(1), 3, 2, 42);
        let prior = keyed_noise(3, 2, 42, 0);
        for i in 0..3 {
            assert_eq!(out.at(i, 0), prior.at(i, 0) + c[0]);
            assert_eq!(out.at(i, 1), prior.at(i, 1) + c[1]);
        }
    }

    #[test]
    fn two_step_renoising_follows_the_interpolation_identity() {
        let c = [1.0, 0.25];
        let field = |x: &Tensor, _t: f64| {
            Tensor::new(x.shape().to_vec(), c.iter().cycle().take(x.numel()).copied().collect())
        };
        let out = few_step_sample_with(field, &SampleSchedule::uniform(2), 2, 2, 7);
        let prior = keyed_noise(2, 2, 7, 0);
        let z = keyed_noise(2, 2, 7, 1);
        for i in 0..2 {
            for k in 0..2 {
                let x_hat = prior.at(i, k) + c[k]; // jump from t=0
                let renoised = 0.5 * x_hat + 0.5 * z.at(i, k);
                let expected = renoised + 0.5 * c[k]; // jump from t=0.5
                assert_eq!(out.at(i, k), expected);
            }
        }
    }

    #[test]
    fn samples_do_not_depend_on_batch_size() {
        let field = |x: &Tensor, t: f64| x.map(|v| (v * 0.3).sin() + t);
        let small = few_step_sample_with(&field, &SampleSchedule::uniform(4), 3, 2, 11);
        let large = few_step_sample_with(&field, &SampleSchedule::uniform(4), 8, 2, 11);
        for i in 0..3 {
            assert_eq!(small.row(i), large.row(i), "per-sample keyed noise");
        }
    }

    #[test]
    fn euler_and_heun_are_exact_for_constant_fields() {
        let c = [0.75, -1.5];
        let field = |x: &Tensor, _t: f64| {
            Tensor::new(x.shape().to_vec(), c.iter().cycle().take(x.numel()).copied().collect())
        };
        let x0 = Tensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]);
        for n_steps in [1, 2, 4, 8] {
            for method in [OdeMethod::Euler, OdeMethod::Heun] {
                let out = integrate_field(&field, &x0, n_steps, method);
                for i in 0..2 {
                    for k in 0..2 {
                        assert_eq!(
                            out.at(i, k),
                            x0.at(i, k) + c[k],
                            "{method:?} with {n_steps} dyadic steps"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn heun_converges_at_second_order_on_an_exponential_field() {
        // dx/dt = x from x0 = 1: exact endpoint e
        let field = |x: &Tensor, _t: f64| x.clone();
        let x0 = Tensor::new(vec![1, 1], vec![1.0]);
        let err = |n: usize| {
            (integrate_field(&field, &x0, n, OdeMethod::Heun).item() - std::f64::consts::E).abs()
        };
        let e50 = err(50);
        let e100 = err(100);
        let ratio = e50 / e100;
        assert!(
            (3.3..4.7).contains(&ratio),
            "halving the step should quarter the error, got ratio {ratio}"
        );
        // euler is only first order on the same problem
        let euler_err = |n: usize| {
            (integrate_field(&field, &x0, n, OdeMethod::Euler).item() - std::f64::consts::E).abs()
        };
        let r1 = euler_err(50) / euler_err(100);
        assert!((1.6..2.4).contains(&r1), "euler ratio {r1}");
    }

    #[test]
    fn method_names_round_trip() {
        for m in [OdeMethod::Euler, OdeMethod::Heun] {
            assert_eq!(OdeMethod::parse(m.name()), Some(m));
        }
        assert_eq!(OdeMethod::parse("rk4"), None);
    }
}
