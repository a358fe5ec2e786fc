//! Hermetic verification suite.
//!
//! Every check here builds its own fixtures from a seed — no checkpoints,
//! no files, no network access — and measures a numerical invariant
//! against an independently computed reference: central finite differences
//! for the autodiff engine, closed-form algebra for the average-velocity
//! identity and the target-equivalence theorem, an analytic median for the
//! time schedule, and exact few-step formulas for the sampler. The CLI
//! `verify` verb prints one line per check and fails if any line fails.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::flow::{encode_condition, ConditionTask, ConditioningScheme, ConditioningSignal, TimeSchedule};
use crate::network::{signal_dual_columns, signal_value_columns, Network, NetworkConfig};
use crate::objectives::{meanflow_baseline_target, scm_baseline_target, ScmWeight};
use crate::rng;
use crate::sampler::{few_step_sample_with, SampleSchedule};
use crate::tensor::{Tape, Tensor};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), pass, detail }
    }

    /// One printable row: `PASS name  detail`.
    pub fn line(&self) -> String {
        format!("{} {:<34} {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

pub fn render_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&r.line());
        s.push('\n');
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed == 0 {
        s.push_str(&format!("all {} checks passed\n", results.len()));
    } else {
        s.push_str(&format!("{failed} of {} checks FAILED\n", results.len()));
    }
    s
}

// --- autodiff oracles ------------------------------------------------------

/// Worst relative errors across the random-network sweep.
#[derive(Clone, Copy, Debug)]
pub struct AutodiffReport {
    /// Reverse-mode parameter gradients vs central finite differences.
    pub max_grad_rel: f64,
    /// Forward-mode directional derivative vs central finite differences.
    pub max_jvp_rel: f64,
    /// Forward vs reverse value of the same directional derivative.
    pub max_consistency_rel: f64,
}

fn rel_gap(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_case(
    seed: u64,
    k: u64,
) -> (Network, Tensor, Tensor, Vec<f64>, Vec<ConditioningSignal>, Vec<Option<usize>>) {
    let scheme = if k % 2 == 0 {
        ConditioningScheme::ExpandedInterval
    } else {
        ConditioningScheme::AuxiliaryTime
    };
    let num_classes = if k % 3 == 0 { 4 } else { 0 };
    let cfg = NetworkConfig {
        input_dim: 2,
        hidden_width: 4 + 2 * (k % 3) as usize,
        depth: 2 + (k % 2) as usize,
        time_embed_dim: 4,
        num_classes,
        scheme,
        seed: seed.wrapping_add(k.wrapping_mul(7919)),
    };
    let net = Network::init(cfg);
    let mut r = rng::substream(seed, "verify.autodiff", k, 0);
    let n = 3;
    let x = Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
    let v = Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
    let t: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
    let cond: Vec<ConditioningSignal> =
        t.iter().map(|&ti| encode_condition(scheme, ConditionTask::Cm, ti)).collect();
    let labels: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if num_classes == 0 || i == 0 {
                None
            } else {
                Some(r.random_range(0..num_classes))
            }
        })
        .collect();
    (net, x, v, t, cond, labels)
}

fn scalar_probe(net: &Network, x: &Tensor, cond: &[ConditioningSignal], labels: &[Option<usize>]) -> f64 {
    net.forward(x, cond, labels).row_sumsq().mean()
}

/// Sweep `n_nets` random networks (both schemes, with and without class
/// conditioning) and compare every parameter gradient and every
/// directional-derivative component against central finite differences at
/// step `h = 1e-5`, plus a forward-vs-reverse agreement check on the same
/// directional derivative.
pub fn autodiff_oracles(seed: u64, n_nets: usize) -> AutodiffReport {
    let h = 1e-5;
    let mut report =
        AutodiffReport { max_grad_rel: 0.0, max_jvp_rel: 0.0, max_consistency_rel: 0.0 };
    for k in 0..n_nets as u64 {
        let (net, x, v, t, cond, labels) = random_case(seed, k);
        let arity = net.config.scheme.arity();

        // reverse-mode parameter gradients vs finite differences
        let mut tape = Tape::new();
        let pids = net.register(&mut tape);
        let x_id = tape.input(x.clone());
        let col_ids: Vec<_> = signal_value_columns(&cond, arity)
            .into_iter()
            .map(|c| tape.input(c))
            .collect();
        let out = net.forward_taped(&mut tape, &pids, x_id, &col_ids, &labels);
        let rss = tape.row_sumsq(out);
        let loss = tape.mean(rss);
        let grads = tape.backward(loss);
        let analytic: Vec<Tensor> = pids.iter().map(|&id| grads.wrt_dense(id)).collect();

        let base = net.param_tensors();
        let mut work = net.clone();
        for (pi, p) in base.iter().enumerate() {
            let shape = p.shape().to_vec();
            for j in 0..p.numel() {
                let mut probe = |delta: f64| {
                    let mut tensors = base.clone();
                    let mut d = tensors[pi].data().to_vec();
                    d[j] += delta;
                    tensors[pi] = Tensor::new(shape.clone(), d);
                    work.set_param_tensors(tensors);
                    scalar_probe(&work, &x, &cond, &labels)
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let an = analytic[pi].data()[j];
                report.max_grad_rel = report.max_grad_rel.max(rel_gap(fd, an, 1e-3));
            }
        }

        // forward-mode directional derivative vs finite differences
        let dual = net.forward_jvp(&x, &v, &cond, &labels);
        let shifted = |delta: f64| -> Tensor {
            let xs = x.add(&v.scale(delta));
            let cs: Vec<ConditioningSignal> = t
                .iter()
                .map(|&ti| encode_condition(net.config.scheme, ConditionTask::Cm, ti + delta))
                .collect();
            net.forward(&xs, &cs, &labels)
        };
        let fd = shifted(h).sub(&shifted(-h)).scale(1.0 / (2.0 * h));
        for (f, a) in fd.data().iter().zip(dual.tangent.data().iter()) {
            report.max_jvp_rel = report.max_jvp_rel.max(rel_gap(*f, *a, 1e-3));
        }

        // forward/reverse consistency: w^T J u both ways
        let mut r = rng::substream(seed, "verify.autodiff", k, 1);
        let w = Tensor::new(
            vec![x.dims2().0, 2],
            (0..x.numel()).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
        );
        let forward_value = w.dot(&dual.tangent);

        let mut tape = Tape::new();
        let pids: Vec<_> = net.params().iter().map(|(_, p)| tape.input(p.clone())).collect();
        let x_id = tape.param(x.clone());
        let col_duals = signal_dual_columns(&cond, arity);
        let col_ids: Vec<_> = col_duals.iter().map(|(c, _)| tape.param(c.clone())).collect();
        let out = net.forward_taped(&mut tape, &pids, x_id, &col_ids, &labels);
        let w_id = tape.input(w.clone());
        let prod = tape.mul(out, w_id);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        let mut reverse_value = grads.wrt_dense(x_id).dot(&v);
        for (&cid, (_, tan)) in col_ids.iter().zip(col_duals.iter()) {
            reverse_value += grads.wrt_dense(cid).dot(tan);
        }
        report.max_consistency_rel = report
            .max_consistency_rel
            .max(rel_gap(forward_value, reverse_value, 1e-6));
    }
    report
}

// --- average-velocity identity --------------------------------------------

/// For the analytic average-velocity field g(x, t) = (x1 - x) / (1 - t),
/// the identity g = v + (1 - t) dg/dt holds along any motion dx/dt = v.
/// Measures the worst absolute violation with dg/dt taken by central
/// differences along the trajectory at `n` random (x0, x1, t ≤ 0.99).
pub fn average_velocity_identity_max_err(seed: u64, n: usize) -> f64 {
    let mut r = rng::stream(seed, "verify.avgvel");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let draw = |r: &mut ChaCha8Rng| -> [f64; 2] {
            [r.sample::<f64, _>(StandardNormal), r.sample::<f64, _>(StandardNormal)]
        };
        let x0 = draw(&mut r);
        let x1 = draw(&mut r);
        let t = r.random_range(0.0..0.99);
        let v = [x1[0] - x0[0], x1[1] - x0[1]];
        let x_t = [(1.0 - t) * x0[0] + t * x1[0], (1.0 - t) * x0[1] + t * x1[1]];
        let g = |s: f64, k: usize| (x1[k] - (x_t[k] + s * v[k])) / (1.0 - (t + s));
        for k in 0..2 {
            let vbar = (x1[k] - x_t[k]) / (1.0 - t);
            let dg = (g(h, k) - g(-h, k)) / (2.0 * h);
            worst = worst.max((vbar - (v[k] + (1.0 - t) * dg)).abs());
        }
    }
    worst
}

// --- target equivalence ----------------------------------------------------

/// Max-norm gap between the average-velocity consistency target at r = 1
/// and the tangent-space consistency target with weight w = 1/(1 - t)
/// evaluated through its generic (unsimplified) formula, over a 9-point t
/// grid and `n_nets` random dual-time networks with shared forward sweeps.
pub fn equivalence_max(seed: u64, n_nets: usize) -> f64 {
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut worst = 0.0f64;
    for k in 0..n_nets as u64 {
        let num_classes = if k % 2 == 0 { 0 } else { 4 };
        let cfg = NetworkConfig {
            input_dim: 2,
            hidden_width: 8,
            depth: 2,
            time_embed_dim: 6,
            num_classes,
            scheme: ConditioningScheme::AuxiliaryTime,
            seed: seed.wrapping_add(k.wrapping_mul(104_729)),
        };
        let net = Network::init(cfg);
        let mut r = rng::substream(seed, "verify.equiv", k, 0);
        let n = 8;
        let x =
            Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
        let v =
            Tensor::new(vec![n, 2], (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
        let labels: Vec<Option<usize>> = (0..n)
            .map(|i| {
                if num_classes == 0 || i % 3 == 0 {
                    None
                } else {
                    Some(r.random_range(0..num_classes))
                }
            })
            .collect();
        for &t in &grid {
            let cond: Vec<ConditioningSignal> = (0..n)
                .map(|_| encode_condition(ConditioningScheme::AuxiliaryTime, ConditionTask::Cm, t))
                .collect();
            let dual = net.forward_jvp(&x, &v, &cond, &labels);
            let ts = vec![t; n];
            let t_mf = meanflow_baseline_target(&v, &ts, 1.0, &dual.tangent);
            let t_scm = scm_baseline_target(
                &dual.primal,
                &v,
                &ts,
                &dual.tangent,
                ScmWeight::Constant(1.0 / (1.0 - t)),
            );
            for (a, b) in t_mf.data().iter().zip(t_scm.data().iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

// --- boundary continuity ----------------------------------------------------

/// (1 - t) times the mean trajectory-derivative norm of the shortcut head
/// at time `t`, over a batch of random interpolant points. For a fixed
/// smooth network this mass vanishes linearly as t -> 1.
pub fn boundary_mass(net: &Network, t: f64, seed: u64, n: usize) -> f64 {
    let mut r = rng::stream(seed, "verify.boundary");
    let mut xt = Vec::with_capacity(2 * n);
    let mut vv = Vec::with_capacity(2 * n);
    for _ in 0..n {
        for _ in 0..2 {
            let a: f64 = r.sample(StandardNormal);
            let b: f64 = r.sample(StandardNormal);
            xt.push((1.0 - t) * a + t * b);
            vv.push(b - a);
        }
    }
    let x = Tensor::new(vec![n, 2], xt);
    let v = Tensor::new(vec![n, 2], vv);
    let cond: Vec<ConditioningSignal> =
        (0..n).map(|_| encode_condition(net.config.scheme, ConditionTask::Cm, t)).collect();
    let labels: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if net.config.num_classes == 0 {
                None
            } else {
                Some(i % net.config.num_classes)
            }
        })
        .collect();
    let dual = net.forward_jvp(&x, &v, &cond, &labels);
    (1.0 - t) * dual.tangent.row_norm().mean()
}

/// Boundary-continuity measurement: masses at t = 0.99 and t = 0.999 and
/// their ratio, which must be close to the proportional value 0.1.
pub fn boundary_ratio(net: &Network, seed: u64) -> (f64, f64, f64) {
    let near = boundary_mass(net, 0.99, seed, 256);
    let nearer = boundary_mass(net, 0.999, seed, 256);
    (near, nearer, nearer / near)
}

// --- the suite ---------------------------------------------------------------

/// Run every hermetic check and collect one row per check.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();

    let ad = autodiff_oracles(seed, 50);
    out.push(CheckResult::new(
        "autodiff_gradient_oracle",
        ad.max_grad_rel <= 1e-6,
        format!("max rel gap vs finite differences {:.3e} (tol 1e-6, 50 nets)", ad.max_grad_rel),
    ));
    out.push(CheckResult::new(
        "autodiff_jvp_oracle",
        ad.max_jvp_rel <= 1e-6,
        format!("max rel gap vs finite differences {:.3e} (tol 1e-6, 50 nets)", ad.max_jvp_rel),
    ));
    out.push(CheckResult::new(
        "autodiff_forward_reverse_agreement",
        ad.max_consistency_rel <= 1e-10,
        format!("max rel gap between modes {:.3e} (tol 1e-10)", ad.max_consistency_rel),
    ));

    let ave = average_velocity_identity_max_err(seed, 100);
    out.push(CheckResult::new(
        "average_velocity_identity",
        ave <= 1e-9,
        format!("max abs violation {:.3e} over 100 points (tol 1e-9)", ave),
    ));

    let eq = equivalence_max(seed, 20);
    out.push(CheckResult::new(
        "target_equivalence",
        eq <= 1e-12,
        format!("max |T_avg(r=1) - T_tan(w=1/(1-t))| = {:.3e} (tol 1e-12, 20 nets)", eq),
    ));

    let mut boundary_worst = 0.0f64;
    let mut boundary_ok = true;
    for (k, scheme) in
        [ConditioningScheme::ExpandedInterval, ConditioningScheme::AuxiliaryTime, ConditioningScheme::ExpandedInterval]
            .into_iter()
            .enumerate()
    {
        let cfg = NetworkConfig {
            input_dim: 2,
            hidden_width: 16,
            depth: 3,
            time_embed_dim: 8,
            num_classes: if k == 2 { 8 } else { 0 },
            scheme,
            seed: seed.wrapping_add(31 * (k as u64 + 1)),
        };
        let net = Network::init(cfg);
        let (near, _, ratio) = boundary_ratio(&net, seed.wrapping_add(k as u64));
        boundary_ok &= near.is_finite() && near > 0.0 && ratio <= 0.11;
        boundary_worst = boundary_worst.max(ratio);
    }
    out.push(CheckResult::new(
        "boundary_continuity",
        boundary_ok,
        format!("worst mass ratio at t=0.999 vs 0.99 is {boundary_worst:.4} (tol 0.11)"),
    ));

    let schedule = TimeSchedule::new(-0.8, 1.6);
    let mut r = rng::stream(seed, "verify.schedule");
    let mut draws: Vec<f64> =
        (0..1_000_000).map(|_| crate::flow::sample_time(&schedule, &mut r)).collect();
    draws.sort_unstable_by(f64::total_cmp);
    let median = 0.5 * (draws[draws.len() / 2 - 1] + draws[draws.len() / 2]);
    let med_err = (median - schedule.analytic_median()).abs();
    out.push(CheckResult::new(
        "time_schedule_median",
        med_err <= 0.002,
        format!(
            "empirical {:.6} vs analytic {:.6}, gap {:.2e} (tol 2e-3, 1e6 draws)",
            median,
            schedule.analytic_median(),
            med_err
        ),
    ));

    let (schedule_ok, sampler_err) = sampler_contract(seed);
    out.push(CheckResult::new(
        "sampler_contract",
        schedule_ok && sampler_err == 0.0,
        format!("schedules exact: {schedule_ok}; max formula deviation {sampler_err:.1e}"),
    ));

    out
}

/// Exact sampler checks: the uniform schedules for one and two steps, the
/// one-step output formula, and the two-step renoise-then-jump formula,
/// all with a constant-velocity field (an oracle that is exact on a linear
/// flow). Returns (schedules exact, max abs deviation from the formulas).
pub fn sampler_contract(seed: u64) -> (bool, f64) {
    let schedule_ok = SampleSchedule::uniform(1).times() == [0.0]
        && SampleSchedule::uniform(2).times() == [0.0, 0.5]
        && SampleSchedule::uniform(4).times() == [0.0, 0.25, 0.5, 0.75];

    let n = 6;
    let vel = [0.83, -1.21];
    let field = |x: &Tensor, _t: f64| -> Tensor {
        let (m, _) = x.dims2();
        Tensor::new(vec![m, 2], (0..m).flat_map(|_| vel).collect())
    };
    // reconstruct the keyed prior and renoise draw the sampler must use
    let noise_at = |step: u64| -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let mut r = rng::substream(seed, "sample.noise", i as u64, step);
            data.push(r.sample::<f64, _>(StandardNormal));
            data.push(r.sample::<f64, _>(StandardNormal));
        }
        Tensor::new(vec![n, 2], data)
    };
    let x0 = noise_at(0);
    let mut worst = 0.0f64;

    // one step from t=0: output = x0 + 1.0 * v, exactly
    let got1 = few_step_sample_with(field, &SampleSchedule::uniform(1), n, 2, seed);
    for i in 0..n {
        for k in 0..2 {
            let expect = x0.at(i, k) + vel[k];
            worst = worst.max((got1.at(i, k) - expect).abs());
        }
    }

    // two steps: renoise the first estimate into t=0.5, then jump again
    let got2 = few_step_sample_with(field, &SampleSchedule::uniform(2), n, 2, seed);
    let z = noise_at(1);
    for i in 0..n {
        for k in 0..2 {
            let first = x0.at(i, k) + vel[k];
            let renoised = 0.5 * first + 0.5 * z.at(i, k);
            let expect = renoised + 0.5 * vel[k];
            worst = worst.max((got2.at(i, k) - expect).abs());
        }
    }
    (schedule_ok, worst)
}
