//! Training objectives: the anchored flow loss, the relaxed shortcut loss,
//! classifier-free guidance of the anchor velocity, and the two baseline
//! shortcut targets used for cross-checking.
//!
//! Layout of one optimization step:
//!
//! 1. Build the anchor velocity `v` per sample in value space (teacher with
//!    guidance for distillation; the linear data velocity plus frozen online
//!    guidance from scratch). Everything derived from `v` is a constant of
//!    the step — freezing falls out of computing it outside the tape.
//! 2. Record two forward branches on one tape with shared weights: the
//!    anchor branch (plain), and the shortcut branch (dual numbers, seeded
//!    with the trajectory direction) whose tangent is the time derivative
//!    dF/dt along the flow.
//! 3. Assemble the shortcut target from the frozen primal, `v`, and dF/dt;
//!    clamp the residual; weight by beta(t) and the adaptive inverse-error
//!    factor, both frozen.
//! 4. One backward pass yields gradients of the summed loss.
//!
//! `facm_targets` + `facm_loss_frozen` expose the same objective as a pure
//! function of the parameters with all targets pinned, which is what a
//! finite-difference oracle must differentiate; at the point the targets
//! were built, its gradient equals the taped gradient exactly.

use crate::flow::{encode_condition, ConditionTask, ConditioningSignal, FlowSample};
use crate::network::{signal_dual_columns, signal_value_columns, Network};
use crate::tensor::{Tape, Tensor};

/// Classifier-free guidance knobs. `w` is the guidance strength; rows with
/// `t < t_low` keep the unguided base velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub w: f64,
    pub t_low: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec { w: 1.75, t_low: 0.125 }
    }
}

/// Scalar time weights used for the residual relaxation and the loss weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightKind {
    /// Constant 1.
    One,
    /// 1 - t^p (1 at t = 0, 0 at t = 1).
    OneMinusTPow(f64),
    /// cos(t pi / 2) (1 at t = 0, 0 at t = 1).
    CosHalfPi,
}

pub fn time_weight(kind: WeightKind, t: f64) -> f64 {
    assert!((0.0..=1.0).contains(&t), "time weight queried outside [0, 1]: {t}");
    match kind {
        WeightKind::One => 1.0,
        WeightKind::OneMinusTPow(p) => {
            assert!(p > 0.0, "power weight needs p > 0");
            1.0 - t.powf(p)
        }
        WeightKind::CosHalfPi => (t * std::f64::consts::FRAC_PI_2).cos(),
    }
}

/// Whole-tensor cosine distance 1 - <a, b>/(|a| |b|) over all elements;
/// 0 when either argument is numerically zero-length.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na <= crate::tensor::COS_DEGENERATE_NORM || nb <= crate::tensor::COS_DEGENERATE_NORM {
        return 0.0;
    }
    1.0 - a.dot(b) / (na * nb)
}

/// Loss-shape parameters, independent of model and data.
#[derive(Clone, Copy, Debug)]
pub struct FacmSpec {
    pub guidance: GuidanceSpec,
    /// Residual relaxation weight alpha(t).
    pub alpha: WeightKind,
    /// Shortcut loss weight beta(t).
    pub beta: WeightKind,
    /// Element-wise residual clamp bounds; `None` disables clamping.
    pub clamp: Option<(f64, f64)>,
    /// Constant inside the adaptive weight 1/sqrt(e + c).
    pub norm_c: f64,
    /// Multiplier on the anchor loss.
    pub fm_weight: f64,
}

impl Default for FacmSpec {
    fn default() -> Self {
        FacmSpec {
            guidance: GuidanceSpec::default(),
            alpha: WeightKind::OneMinusTPow(0.5),
            beta: WeightKind::CosHalfPi,
            clamp: Some((-1.0, 1.0)),
            norm_c: 1e-3,
            fm_weight: 1.0,
        }
    }
}

impl FacmSpec {
    /// Residual relaxation weight at time `t`.
    pub fn alpha_weight(&self, t: f64) -> f64 {
        time_weight(self.alpha, t)
    }

    /// Shortcut loss weight at time `t`.
    pub fn beta_weight(&self, t: f64) -> f64 {
        time_weight(self.beta, t)
    }
}

/// Where the anchor velocity comes from.
pub enum VelocitySource<'a> {
    /// Distillation: query this (frozen) model for conditional and
    /// unconditional velocities and combine them with guidance.
    Teacher(&'a Network),
    /// From scratch: the linear data velocity x1 - x0 is the base; when the
    /// model is class-conditional and `w != 0`, the online model's frozen
    /// conditional/unconditional outputs steer it.
    Data,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossDiag {
    pub mean_residual_norm: f64,
    /// Fraction of residual elements that hit the clamp bounds.
    pub clamp_fraction: f64,
    pub mean_dfdt_norm: f64,
    pub non_finite: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub fm: f64,
    pub cm: f64,
    pub total: f64,
    pub diag: LossDiag,
}

/// Gradients in canonical parameter order.
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
    pub grad_norm: f64,
    pub non_finite: bool,
}

/// Per-row guided velocity: rows with `t < t_low` keep the base; otherwise
/// base + w (cond - uncond).
pub fn cfg_velocity(
    v_base: &Tensor,
    v_cond: &Tensor,
    v_uncond: &Tensor,
    spec: &GuidanceSpec,
    t: &[f64],
) -> Tensor {
    let (m, d) = v_base.dims2();
    assert_eq!(v_cond.shape(), v_base.shape());
    assert_eq!(v_uncond.shape(), v_base.shape());
    assert_eq!(t.len(), m);
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        let b = v_base.row(i);
        if t[i] < spec.t_low {
            data.extend_from_slice(b);
        } else {
            let c = v_cond.row(i);
            let u = v_uncond.row(i);
            for k in 0..d {
                data.push(b[k] + spec.w * (c[k] - u[k]));
            }
        }
    }
    Tensor::new(vec![m, d], data)
}

/// Anchor loss for one batch: mean over rows of squared distance plus
/// cosine distance between prediction and velocity target.
pub fn fm_loss(pred: &Tensor, v: &Tensor) -> f64 {
    assert_eq!(pred.shape(), v.shape());
    let l2 = pred.sub(v).row_sumsq();
    let cos = crate::tensor::row_cosine_distance(pred, v);
    l2.add(&cos).mean()
}

/// Adaptive squared-error value e / sqrt(e + c) with e the squared distance
/// over all elements. The denominator is held constant under
/// differentiation; this helper only reports the value.
pub fn norm_l2(pred: &Tensor, target: &Tensor, c: f64) -> f64 {
    assert!(c > 0.0, "norm_l2 needs c > 0");
    let e: f64 = pred.sub(target).data().iter().map(|d| d * d).sum();
    e / (e + c).sqrt()
}

pub struct CmTarget {
    pub v_tar: Tensor,
    /// Clamped residual g.
    pub residual: Tensor,
    pub clamp_fraction: f64,
}

/// Relaxed shortcut target. The raw residual is
/// g = F_sg - (v + (1 - t) dF/dt), optionally clamped element-wise; the
/// target is v_tar = F_sg - alpha(t) g. All inputs are value-space
/// constants of the step.
pub fn cm_target(
    f_sg: &Tensor,
    v: &Tensor,
    t: &[f64],
    dfdt: &Tensor,
    alpha: &[f64],
    clamp: Option<(f64, f64)>,
) -> CmTarget {
    let (m, _) = f_sg.dims2();
    assert_eq!(v.shape(), f_sg.shape());
    assert_eq!(dfdt.shape(), f_sg.shape());
    assert_eq!(t.len(), m);
    assert_eq!(alpha.len(), m);
    let one_minus_t = Tensor::new(vec![m, 1], t.iter().map(|&ti| 1.0 - ti).collect());
    let raw = f_sg.sub(&v.add(&dfdt.mul_col(&one_minus_t)));
    let (residual, clamp_fraction) = match clamp {
        Some((lo, hi)) => {
            let clamped = raw.clamp_el(lo, hi);
            let outside = raw.data().iter().filter(|&&g| g < lo || g > hi).count();
            (clamped, outside as f64 / raw.numel() as f64)
        }
        None => (raw, 0.0),
    };
    let alpha_col = Tensor::new(vec![m, 1], alpha.to_vec());
    let v_tar = f_sg.sub(&residual.mul_col(&alpha_col));
    CmTarget { v_tar, residual, clamp_fraction }
}

/// Tangent-weighting choices for the first baseline target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScmWeight {
    /// w(t) = 1/(1 - t); the target simplifies algebraically to
    /// v + (1 - t) dF/dt, which is how it is computed (no pole).
    InverseOneMinusT,
    Constant(f64),
}

/// Tangent-space consistency target
/// T = F_sg - w(t) (1 - t) (F_sg - v) + w(t) (1 - t)^2 dF/dt.
pub fn scm_baseline_target(
    f_sg: &Tensor,
    v: &Tensor,
    t: &[f64],
    dfdt: &Tensor,
    weight: ScmWeight,
) -> Tensor {
    let (m, _) = f_sg.dims2();
    assert_eq!(v.shape(), f_sg.shape());
    assert_eq!(dfdt.shape(), f_sg.shape());
    assert_eq!(t.len(), m);
    match weight {
        ScmWeight::InverseOneMinusT => {
            let one_minus_t = Tensor::new(vec![m, 1], t.iter().map(|&ti| 1.0 - ti).collect());
            v.add(&dfdt.mul_col(&one_minus_t))
        }
        ScmWeight::Constant(w) => {
            let s1 = Tensor::new(vec![m, 1], t.iter().map(|&ti| w * (1.0 - ti)).collect());
            let s2 = Tensor::new(vec![m, 1], t.iter().map(|&ti| w * (1.0 - ti) * (1.0 - ti)).collect());
            f_sg.sub(&f_sg.sub(v).mul_col(&s1)).add(&dfdt.mul_col(&s2))
        }
    }
}

/// Average-velocity consistency target T = v + (r - t) dF/dt, where dF/dt
/// is taken along the trajectory with the second time input held at r.
pub fn meanflow_baseline_target(v: &Tensor, t: &[f64], r: f64, dfdt: &Tensor) -> Tensor {
    let (m, _) = v.dims2();
    assert_eq!(dfdt.shape(), v.shape());
    assert_eq!(t.len(), m);
    let gap = Tensor::new(vec![m, 1], t.iter().map(|&ti| r - ti).collect());
    v.add(&dfdt.mul_col(&gap))
}

// --- batch plumbing -------------------------------------------------------

pub(crate) struct BatchTensors {
    pub x_t: Tensor,
    pub v_lin: Tensor,
    pub t: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

pub(crate) fn batch_tensors(batch: &[FlowSample]) -> BatchTensors {
    let m = batch.len();
    assert!(m > 0, "empty batch");
    let mut xt = Vec::with_capacity(2 * m);
    let mut vl = Vec::with_capacity(2 * m);
    let mut t = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for s in batch {
        xt.extend_from_slice(&s.x_t);
        vl.extend_from_slice(&s.v);
        t.push(s.t);
        labels.push(s.label);
    }
    BatchTensors {
        x_t: Tensor::new(vec![m, 2], xt),
        v_lin: Tensor::new(vec![m, 2], vl),
        t,
        labels,
    }
}

fn encode_batch(net: &Network, task: ConditionTask, t: &[f64]) -> Vec<ConditioningSignal> {
    t.iter().map(|&ti| encode_condition(net.config.scheme, task, ti)).collect()
}

/// The per-sample anchor velocity, in value space (already frozen).
pub fn velocity_target(
    net: &Network,
    source: &VelocitySource,
    batch: &[FlowSample],
    guidance: &GuidanceSpec,
) -> Tensor {
    let bt = batch_tensors(batch);
    velocity_target_bt(net, source, &bt, guidance)
}

fn velocity_target_bt(
    net: &Network,
    source: &VelocitySource,
    bt: &BatchTensors,
    guidance: &GuidanceSpec,
) -> Tensor {
    let none_labels = vec![None; bt.t.len()];
    match source {
        VelocitySource::Teacher(teacher) => {
            let cond = encode_batch(teacher, ConditionTask::Fm, &bt.t);
            if teacher.config.num_classes == 0 {
                teacher.forward(&bt.x_t, &cond, &none_labels)
            } else {
                let v_c = teacher.forward(&bt.x_t, &cond, &bt.labels);
                let v_u = teacher.forward(&bt.x_t, &cond, &none_labels);
                cfg_velocity(&v_u, &v_c, &v_u, guidance, &bt.t)
            }
        }
        VelocitySource::Data => {
            if net.config.num_classes == 0 || guidance.w == 0.0 {
                return bt.v_lin.clone();
            }
            let cond = encode_batch(net, ConditionTask::Fm, &bt.t);
            let v_c = net.forward(&bt.x_t, &cond, &bt.labels);
            let v_u = net.forward(&bt.x_t, &cond, &none_labels);
            cfg_velocity(&bt.v_lin, &v_c, &v_u, guidance, &bt.t)
        }
    }
}

// --- the full objective ---------------------------------------------------

/// Everything the objective treats as a constant of the step.
pub struct FacmTargets {
    /// Anchor velocity (guided where applicable).
    pub v: Tensor,
    /// Relaxed shortcut target.
    pub v_tar: Tensor,
    /// Frozen per-sample shortcut weight beta(t)/sqrt(e + c).
    pub wb: Vec<f64>,
    pub diag: LossDiag,
}

/// Build the step's frozen targets with plain (untaped) evaluation.
pub fn facm_targets(
    net: &Network,
    source: &VelocitySource,
    batch: &[FlowSample],
    spec: &FacmSpec,
) -> FacmTargets {
    let bt = batch_tensors(batch);
    let v = velocity_target_bt(net, source, &bt, &spec.guidance);
    let cond_cm = encode_batch(net, ConditionTask::Cm, &bt.t);
    let dual = net.forward_jvp(&bt.x_t, &v, &cond_cm, &bt.labels);
    let alpha: Vec<f64> = bt.t.iter().map(|&t| time_weight(spec.alpha, t)).collect();
    let ct = cm_target(&dual.primal, &v, &bt.t, &dual.tangent, &alpha, spec.clamp);
    let e = dual.primal.sub(&ct.v_tar).row_sumsq();
    let wb: Vec<f64> = bt
        .t
        .iter()
        .zip(e.data())
        .map(|(&t, &ei)| time_weight(spec.beta, t) / (ei + spec.norm_c).sqrt())
        .collect();
    let diag = diag_from(&ct, &dual.tangent);
    FacmTargets { v, v_tar: ct.v_tar, wb, diag }
}

fn diag_from(ct: &CmTarget, dfdt: &Tensor) -> LossDiag {
    LossDiag {
        mean_residual_norm: ct.residual.row_norm().mean(),
        clamp_fraction: ct.clamp_fraction,
        mean_dfdt_norm: dfdt.row_norm().mean(),
        non_finite: false,
    }
}

/// The objective as a pure function of the parameters with `targets`
/// pinned: fm_weight * anchor loss against `targets.v` plus the mean of
/// wb_i * ||F_i - v_tar_i||^2. This is what a finite-difference oracle
/// differentiates.
pub fn facm_loss_frozen(
    net: &Network,
    batch: &[FlowSample],
    targets: &FacmTargets,
    spec: &FacmSpec,
) -> LossBreakdown {
    let bt = batch_tensors(batch);
    let m = bt.t.len();
    let f_fm = net.forward(&bt.x_t, &encode_batch(net, ConditionTask::Fm, &bt.t), &bt.labels);
    let fm = spec.fm_weight * fm_loss(&f_fm, &targets.v);
    let f_cm = net.forward(&bt.x_t, &encode_batch(net, ConditionTask::Cm, &bt.t), &bt.labels);
    let e = f_cm.sub(&targets.v_tar).row_sumsq();
    let cm = e
        .data()
        .iter()
        .zip(&targets.wb)
        .map(|(&ei, &wi)| ei * wi)
        .sum::<f64>()
        / m as f64;
    let total = fm + cm;
    let mut diag = targets.diag;
    diag.non_finite = !total.is_finite();
    LossBreakdown { fm, cm, total, diag }
}

/// Loss value at the current parameters (targets rebuilt in place).
pub fn facm_loss_value(
    net: &Network,
    source: &VelocitySource,
    batch: &[FlowSample],
    spec: &FacmSpec,
) -> LossBreakdown {
    let targets = facm_targets(net, source, batch, spec);
    facm_loss_frozen(net, batch, &targets, spec)
}

/// One full training evaluation: records both branches on a tape, builds
/// the frozen targets inline from the recorded values, and returns loss
/// components plus parameter gradients.
pub fn facm_loss(
    net: &Network,
    source: &VelocitySource,
    batch: &[FlowSample],
    spec: &FacmSpec,
) -> (LossBreakdown, ParamGrads) {
    let bt = batch_tensors(batch);
    let m = bt.t.len();
    let v = velocity_target_bt(net, source, &bt, &spec.guidance);

    let mut tape = Tape::new();
    let pids = net.register(&mut tape);

    // anchor branch: plain inputs
    let cond_fm = encode_batch(net, ConditionTask::Fm, &bt.t);
    let arity = net.config.scheme.arity();
    let fm_cols: Vec<_> = signal_value_columns(&cond_fm, arity)
        .into_iter()
        .map(|c| tape.input(c))
        .collect();
    let x_fm = tape.input(bt.x_t.clone());
    let f_fm = net.forward_taped(&mut tape, &pids, x_fm, &fm_cols, &bt.labels);

    // shortcut branch: dual inputs moving along the trajectory
    let cond_cm = encode_batch(net, ConditionTask::Cm, &bt.t);
    let cm_cols: Vec<_> = signal_dual_columns(&cond_cm, arity)
        .into_iter()
        .map(|(val, tan)| tape.input_dual(val, tan))
        .collect();
    let x_cm = tape.input_dual(bt.x_t.clone(), v.clone());
    let f_cm = net.forward_taped(&mut tape, &pids, x_cm, &cm_cols, &bt.labels);

    let f_cm_val = tape.value(f_cm).clone();
    let dfdt = tape
        .tangent(f_cm)
        .expect("shortcut branch carries a time tangent")
        .clone();

    // frozen targets from recorded values
    let alpha: Vec<f64> = bt.t.iter().map(|&t| time_weight(spec.alpha, t)).collect();
    let ct = cm_target(&f_cm_val, &v, &bt.t, &dfdt, &alpha, spec.clamp);
    let vtar_id = tape.input(ct.v_tar.clone());
    let diff = tape.sub(f_cm, vtar_id);
    let e = tape.row_sumsq(diff);
    let e_val = tape.value(e).clone();
    let wb: Vec<f64> = bt
        .t
        .iter()
        .zip(e_val.data())
        .map(|(&t, &ei)| time_weight(spec.beta, t) / (ei + spec.norm_c).sqrt())
        .collect();
    let wb_id = tape.input(Tensor::new(vec![m, 1], wb));
    let e_weighted = tape.mul(e, wb_id);
    let cm_id = tape.mean(e_weighted);

    let v_id = tape.input(v.clone());
    let fm_diff = tape.sub(f_fm, v_id);
    let fm_l2 = tape.row_sumsq(fm_diff);
    let fm_cos = tape.row_cosine(f_fm, v_id);
    let fm_per = tape.add(fm_l2, fm_cos);
    let fm_mean = tape.mean(fm_per);
    let fm_id = tape.scale(fm_mean, spec.fm_weight);

    let total_id = tape.add(fm_id, cm_id);

    let fm = tape.value(fm_id).item();
    let cm = tape.value(cm_id).item();
    let total = tape.value(total_id).item();
    let mut diag = diag_from(&ct, &dfdt);
    diag.non_finite = !total.is_finite();

    let grads = tape.backward(total_id);
    let dense: Vec<Tensor> = pids.iter().map(|&p| grads.wrt_dense(p)).collect();
    let mut sq = 0.0;
    for g in &dense {
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let non_finite = diag.non_finite || grads.has_non_finite() || !grad_norm.is_finite();
    diag.non_finite = non_finite;
    (
        LossBreakdown { fm, cm, total, diag },
        ParamGrads { grads: dense, grad_norm, non_finite },
    )
}

/// Anchor-only objective for teacher pretraining, with a per-sample mix of
/// conditioning tasks so the model learns both encodings of the same field.
/// The target is the linear data velocity.
pub fn fm_only_loss(
    net: &Network,
    batch: &[FlowSample],
    tasks: &[ConditionTask],
) -> (LossBreakdown, ParamGrads) {
    let bt = batch_tensors(batch);
    assert_eq!(tasks.len(), bt.t.len());
    let cond: Vec<ConditioningSignal> = bt
        .t
        .iter()
        .zip(tasks)
        .map(|(&t, &task)| encode_condition(net.config.scheme, task, t))
        .collect();

    let mut tape = Tape::new();
    let pids = net.register(&mut tape);
    let arity = net.config.scheme.arity();
    let cols: Vec<_> = signal_value_columns(&cond, arity)
        .into_iter()
        .map(|c| tape.input(c))
        .collect();
    let x = tape.input(bt.x_t.clone());
    let f = net.forward_taped(&mut tape, &pids, x, &cols, &bt.labels);

    let v_id = tape.input(bt.v_lin.clone());
    let d = tape.sub(f, v_id);
    let l2 = tape.row_sumsq(d);
    let cos = tape.row_cosine(f, v_id);
    let per = tape.add(l2, cos);
    let total_id = tape.mean(per);

    let total = tape.value(total_id).item();
    let grads = tape.backward(total_id);
    let dense: Vec<Tensor> = pids.iter().map(|&p| grads.wrt_dense(p)).collect();
    let mut sq = 0.0;
    for g in &dense {
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    let non_finite = !total.is_finite() || grads.has_non_finite() || !grad_norm.is_finite();
    let diag = LossDiag { non_finite, ..LossDiag::default() };
    (
        LossBreakdown { fm: total, cm: 0.0, total, diag },
        ParamGrads { grads: dense, grad_norm, non_finite },
    )
}

/// Anchor-only loss value via plain forwards (validation).
pub fn fm_only_loss_value(net: &Network, batch: &[FlowSample], tasks: &[ConditionTask]) -> f64 {
    let bt = batch_tensors(batch);
    assert_eq!(tasks.len(), bt.t.len());
    let cond: Vec<ConditioningSignal> = bt
        .t
        .iter()
        .zip(tasks)
        .map(|(&t, &task)| encode_condition(net.config.scheme, task, t))
        .collect();
    let f = net.forward(&bt.x_t, &cond, &bt.labels);
    fm_loss(&f, &bt.v_lin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{interpolate, ConditioningScheme};
    use crate::network::NetworkConfig;
    use crate::rng;
    use rand::RngExt;
    use rand_distr::StandardNormal;

    fn t2(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect())
    }

    #[test]
    fn time_weights_hit_their_endpoints() {
        for kind in [WeightKind::OneMinusTPow(0.5), WeightKind::CosHalfPi] {
            assert!((time_weight(kind, 0.0) - 1.0).abs() < 1e-15);
            assert!(time_weight(kind, 1.0).abs() < 1e-15);
        }
        assert_eq!(time_weight(WeightKind::One, 0.3), 1.0);
        assert!((time_weight(WeightKind::OneMinusTPow(0.5), 0.25) - 0.5).abs() < 1e-15);
        assert!(
            (time_weight(WeightKind::CosHalfPi, 0.5) - std::f64::consts::FRAC_PI_4.cos()).abs()
                < 1e-15
        );
    }

    #[test]
    fn guidance_combines_rows_and_respects_the_low_time_cutoff() {
        let base = t2(&[[1.0, 0.0], [1.0, 0.0]]);
        let cond = t2(&[[2.0, 2.0], [2.0, 2.0]]);
        let unc = t2(&[[1.0, 1.0], [1.0, 1.0]]);
        let spec = GuidanceSpec { w: 2.0, t_low: 0.125 };
        let out = cfg_velocity(&base, &cond, &unc, &spec, &[0.05, 0.5]);
        assert_eq!(out.row(0), &[1.0, 0.0], "below cutoff keeps the base");
        assert_eq!(out.row(1), &[3.0, 2.0]);
        let noop = cfg_velocity(&base, &cond, &unc, &GuidanceSpec { w: 0.0, t_low: 0.0 }, &[0.5, 0.5]);
        assert_eq!(noop, base);
    }

    #[test]
    fn shortcut_target_matches_hand_computation() {
        let f = t2(&[[1.0, 0.0], [5.0, 0.0]]);
        let v = t2(&[[0.2, 0.0], [0.0, 0.0]]);
        let dfdt = t2(&[[0.4, 0.0], [0.0, 0.0]]);
        let ct = cm_target(&f, &v, &[0.5, 0.5], &dfdt, &[0.6, 0.6], Some((-1.0, 1.0)));
        // row 0: g = 1 - (0.2 + 0.5*0.4) = 0.6, inside the clamp
        assert!((ct.residual.at(0, 0) - 0.6).abs() < 1e-15);
        assert!((ct.v_tar.at(0, 0) - (1.0 - 0.6 * 0.6)).abs() < 1e-15);
        // row 1: g = 5 clamps to 1
        assert_eq!(ct.residual.at(1, 0), 1.0);
        assert!((ct.v_tar.at(1, 0) - (5.0 - 0.6)).abs() < 1e-15);
        assert!((ct.clamp_fraction - 0.25).abs() < 1e-15, "one of four elements clamped");
        let unclamped = cm_target(&f, &v, &[0.5, 0.5], &dfdt, &[0.6, 0.6], None);
        assert_eq!(unclamped.clamp_fraction, 0.0);
        assert!((unclamped.v_tar.at(1, 0) - (5.0 - 0.6 * 5.0)).abs() < 1e-15);
    }

    #[test]
    fn whole_tensor_cosine_distance_conventions() {
        let a = t2(&[[1.0, 0.0]]);
        let b = t2(&[[0.0, 1.0]]);
        assert!((cosine_distance(&a, &b) - 1.0).abs() < 1e-15, "orthogonal");
        assert!(cosine_distance(&a, &a.scale(3.0)).abs() < 1e-15, "parallel");
        assert!((cosine_distance(&a, &a.scale(-1.0)) - 2.0).abs() < 1e-15, "antiparallel");
        assert_eq!(cosine_distance(&a, &t2(&[[0.0, 0.0]])), 0.0, "degenerate");
    }

    #[test]
    fn adaptive_error_value() {
        let a = t2(&[[2.0, 0.0]]);
        let b = t2(&[[0.0, 0.0]]);
        let e = 4.0;
        assert!((norm_l2(&a, &b, 1e-3) - e / (e + 1e-3_f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn baseline_targets_agree_where_algebra_says_they_must() {
        let f = t2(&[[0.3, -0.2], [1.0, 0.5]]);
        let v = t2(&[[0.1, 0.4], [-0.3, 0.2]]);
        let dfdt = t2(&[[0.7, -0.1], [0.2, 0.9]]);
        let t = [0.3, 0.8];
        // the pole-free branch equals the generic branch with w = 1/(1-t)
        let simp = scm_baseline_target(&f, &v, &t, &dfdt, ScmWeight::InverseOneMinusT);
        for (i, &ti) in t.iter().enumerate() {
            let gen = scm_baseline_target(
                &t2(&[[f.at(i, 0), f.at(i, 1)]]),
                &t2(&[[v.at(i, 0), v.at(i, 1)]]),
                &[ti],
                &t2(&[[dfdt.at(i, 0), dfdt.at(i, 1)]]),
                ScmWeight::Constant(1.0 / (1.0 - ti)),
            );
            for k in 0..2 {
                assert!((gen.at(0, k) - simp.at(i, k)).abs() < 1e-12);
            }
        }
        // the average-velocity target at r = 1 is the same expression
        let mf = meanflow_baseline_target(&v, &t, 1.0, &dfdt);
        assert_eq!(mf, simp);
    }

    fn random_batch(n: usize, classes: usize, seed: u64) -> Vec<FlowSample> {
        let mut r = rng::stream(seed, "test.batch");
        (0..n)
            .map(|i| {
                let x0 = [r.sample(StandardNormal), r.sample(StandardNormal)];
                let x1 = [
                    2.0 * r.sample::<f64, _>(StandardNormal),
                    2.0 * r.sample::<f64, _>(StandardNormal),
                ];
                let t = 0.05 + 0.9 * r.random_range(0.0..1.0);
                let label = if classes == 0 {
                    None
                } else if i % 3 == 0 {
                    None
                } else {
                    Some(i % classes)
                };
                interpolate(x0, x1, t, label)
            })
            .collect()
    }

    fn tiny_net(scheme: ConditioningScheme, classes: usize, seed: u64) -> Network {
        Network::init(NetworkConfig {
            input_dim: 2,
            hidden_width: 8,
            depth: 2,
            time_embed_dim: 4,
            num_classes: classes,
            scheme,
            seed,
        })
    }

    /// Central-difference gradient of the frozen objective, compared
    /// coordinate by coordinate against the taped gradient.
    fn check_grads_against_fd(net: &Network, source: &VelocitySource, batch: &[FlowSample], spec: &FacmSpec) {
        let targets = facm_targets(net, source, batch, spec);
        let (bd, pg) = facm_loss(net, source, batch, spec);
        let frozen = facm_loss_frozen(net, batch, &targets, spec);
        assert!((bd.total - frozen.total).abs() <= 1e-12 * frozen.total.abs().max(1.0));

        let h = 1e-6;
        for (pi, (name, base)) in net.params().iter().enumerate() {
            let n = base.numel();
            // probe every coordinate of small tensors, a stride otherwise
            let stride = (n / 16).max(1);
            for k in (0..n).step_by(stride) {
                let mut plus = net.clone();
                let mut minus = net.clone();
                for (j, (_, t)) in plus.params_mut().enumerate() {
                    if j == pi {
                        let mut d = t.data().to_vec();
                        d[k] += h;
                        *t = Tensor::new(t.shape().to_vec(), d);
                    }
                }
                for (j, (_, t)) in minus.params_mut().enumerate() {
                    if j == pi {
                        let mut d = t.data().to_vec();
                        d[k] -= h;
                        *t = Tensor::new(t.shape().to_vec(), d);
                    }
                }
                let lp = facm_loss_frozen(&plus, batch, &targets, spec).total;
                let lm = facm_loss_frozen(&minus, batch, &targets, spec).total;
                let fd = (lp - lm) / (2.0 * h);
                let an = pg.grads[pi].data()[k];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{name}[{k}]: finite difference {fd} vs taped {an}"
                );
            }
        }
    }

    #[test]
    fn taped_gradients_match_finite_differences_from_scratch() {
        let net = tiny_net(ConditioningScheme::ExpandedInterval, 2, 40);
        let batch = random_batch(4, 2, 41);
        let spec = FacmSpec::default();
        check_grads_against_fd(&net, &VelocitySource::Data, &batch, &spec);
    }

    #[test]
    fn taped_gradients_match_finite_differences_distill() {
        let teacher = tiny_net(ConditioningScheme::AuxiliaryTime, 2, 50);
        let net = tiny_net(ConditioningScheme::AuxiliaryTime, 2, 51);
        let batch = random_batch(4, 2, 52);
        let spec = FacmSpec { clamp: None, fm_weight: 0.7, ..FacmSpec::default() };
        check_grads_against_fd(&net, &VelocitySource::Teacher(&teacher), &batch, &spec);
    }

    #[test]
    fn anchor_only_gradients_match_finite_differences() {
        let net = tiny_net(ConditioningScheme::ExpandedInterval, 0, 60);
        let batch = random_batch(3, 0, 61);
        let tasks = [ConditionTask::Fm, ConditionTask::Cm, ConditionTask::Fm];
        let (bd, pg) = fm_only_loss(&net, &batch, &tasks);
        assert!((bd.total - fm_only_loss_value(&net, &batch, &tasks)).abs() < 1e-12);
        let h = 1e-6;
        for (pi, (name, base)) in net.params().iter().enumerate() {
            let n = base.numel();
            let stride = (n / 8).max(1);
            for k in (0..n).step_by(stride) {
                let perturb = |sign: f64| {
                    let mut m = net.clone();
                    for (j, (_, t)) in m.params_mut().enumerate() {
                        if j == pi {
                            let mut d = t.data().to_vec();
                            d[k] += sign * h;
                            *t = Tensor::new(t.shape().to_vec(), d);
                        }
                    }
                    fm_only_loss_value(&m, &batch, &tasks)
                };
                let fd = (perturb(1.0) - perturb(-1.0)) / (2.0 * h);
                let an = pg.grads[pi].data()[k];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / denom < 1e-4, "{name}[{k}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn loss_reports_non_finite_parameters() {
        let mut net = tiny_net(ConditioningScheme::ExpandedInterval, 0, 70);
        for (name, t) in net.params_mut() {
            if name == "out.w" {
                let mut d = t.data().to_vec();
                d[0] = f64::NAN;
                *t = Tensor::new(t.shape().to_vec(), d);
            }
        }
        let batch = random_batch(3, 0, 71);
        let (bd, pg) = facm_loss(&net, &VelocitySource::Data, &batch, &FacmSpec::default());
        assert!(bd.diag.non_finite);
        assert!(pg.non_finite);
    }

    #[test]
    fn guided_velocity_defaults_to_linear_when_unconditional() {
        let net = tiny_net(ConditioningScheme::ExpandedInterval, 0, 80);
        let batch = random_batch(5, 0, 81);
        let bt = batch_tensors(&batch);
        let v = velocity_target(&net, &VelocitySource::Data, &batch, &GuidanceSpec::default());
        assert_eq!(v, bt.v_lin);
    }
}
