//! Training loops: anchor-only teacher pretraining, distillation against a
//! frozen guided teacher, and from-scratch training against the data
//! velocity.
//!
//! All three share one loop: draw a fresh batch from labeled random
//! streams, evaluate the objective with gradients, skip the update when
//! anything is non-finite (a long enough streak aborts), clip, step AdamW,
//! update the EMA shadow. Every step appends a trace row; the final
//! checkpoint carries parameters, EMA, optimizer state, and the resolved
//! configuration.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, OptSnapshot};
use crate::config::{Paradigm, TrainConfig};
use crate::data::sample_point;
use crate::error::{Error, Result};
use crate::flow::{interpolate, sample_time, ConditionTask, FlowSample, TimeSchedule};
use crate::network::Network;
use crate::objectives::{facm_loss, fm_only_loss, VelocitySource};
use crate::optim::{adamw_step, clip_global_norm, ema_decay, ema_update, AdamW, EmaState, OptState};
use crate::rng;
use crate::tensor::Tensor;

/// Consecutive non-finite steps tolerated before a run gives up.
pub const NON_FINITE_ABORT_STREAK: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub fm: f64,
    pub cm: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clamp_fraction: f64,
}

/// CSV with header `step,fm_loss,cm_loss,total,grad_norm,clamp_fraction`.
/// Floats print as shortest round-trip strings, so equal runs produce
/// byte-identical files.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,fm_loss,cm_loss,total,grad_norm,clamp_fraction\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.fm, r.cm, r.total, r.grad_norm, r.clamp_fraction
        ));
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Steps whose update was skipped because loss or gradients were
    /// non-finite.
    pub non_finite_steps: usize,
    /// True when a non-finite streak stopped the run before `steps`.
    pub aborted_early: bool,
}

struct Streams {
    data: ChaCha8Rng,
    noise: ChaCha8Rng,
    time: ChaCha8Rng,
    mix: ChaCha8Rng,
    drop: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Streams {
        Streams {
            data: rng::stream(seed, "train.data"),
            noise: rng::stream(seed, "train.noise"),
            time: rng::stream(seed, "train.time"),
            mix: rng::stream(seed, "train.mix"),
            drop: rng::stream(seed, "train.drop"),
        }
    }
}

fn draw_batch(cfg: &TrainConfig, schedule: &TimeSchedule, s: &mut Streams) -> Vec<FlowSample> {
    (0..cfg.batch_size)
        .map(|_| {
            let (x1, mut label) = sample_point(cfg.dataset, &mut s.data);
            if label.is_some()
                && cfg.label_dropout > 0.0
                && s.drop.random_range(0.0..1.0) < cfg.label_dropout
            {
                label = None;
            }
            let x0 = [s.noise.sample(StandardNormal), s.noise.sample(StandardNormal)];
            let t = sample_time(schedule, &mut s.time);
            interpolate(x0, x1, t, label)
        })
        .collect()
}

/// A held-out batch drawn from streams disjoint from the training ones.
pub fn validation_batch(cfg: &TrainConfig, n: usize, seed: u64) -> Vec<FlowSample> {
    let schedule = cfg.time_schedule();
    let mut data = rng::stream(seed, "valid.data");
    let mut noise = rng::stream(seed, "valid.noise");
    let mut time = rng::stream(seed, "valid.time");
    (0..n)
        .map(|_| {
            let (x1, label) = sample_point(cfg.dataset, &mut data);
            let x0 = [noise.sample(StandardNormal), noise.sample(StandardNormal)];
            let t = sample_time(&schedule, &mut time);
            interpolate(x0, x1, t, label)
        })
        .collect()
}

fn run(cfg: &TrainConfig, mut net: Network, teacher: Option<&Network>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pretrain = cfg.paradigm == Paradigm::Pretrain;
    let spec = cfg.facm_spec();
    let schedule = cfg.time_schedule();
    let opt = AdamW {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut state = OptState::new(net.params().iter().map(|(_, t)| t.shape().to_vec()));
    let mut ema = EmaState::new(ema_decay(cfg.ema_rel_length, cfg.steps), net.param_tensors());
    let mut streams = Streams::new(cfg.seed);

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut non_finite_steps = 0usize;
    let mut streak = 0usize;
    let mut aborted_early = false;

    for step in 0..cfg.steps {
        let batch = draw_batch(cfg, &schedule, &mut streams);
        let (bd, mut pg) = if pretrain {
            let tasks: Vec<ConditionTask> = (0..batch.len())
                .map(|_| {
                    if streams.mix.random_range(0.0..1.0) < cfg.mixed_condition_ratio {
                        ConditionTask::Fm
                    } else {
                        ConditionTask::Cm
                    }
                })
                .collect();
            fm_only_loss(&net, &batch, &tasks)
        } else {
            let source = match teacher {
                Some(t) => VelocitySource::Teacher(t),
                None => VelocitySource::Data,
            };
            facm_loss(&net, &source, &batch, &spec)
        };

        trace.push(TraceRow {
            step,
            fm: bd.fm,
            cm: bd.cm,
            total: bd.total,
            grad_norm: pg.grad_norm,
            clamp_fraction: bd.diag.clamp_fraction,
        });

        if pg.non_finite || !bd.total.is_finite() {
            non_finite_steps += 1;
            streak += 1;
            if streak >= NON_FINITE_ABORT_STREAK {
                if pretrain {
                    return Err(Error::NonFiniteAbort { step, streak });
                }
                aborted_early = true;
                break;
            }
            continue;
        }
        streak = 0;

        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut pg.grads, cfg.grad_clip);
        }
        let mut params: Vec<&mut Tensor> = net.params_mut().map(|(_, t)| t).collect();
        adamw_step(&opt, &mut state, &mut params, &pg.grads);
        ema_update(&mut ema, &net.param_tensors());
    }

    let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
    let ema_named = (cfg.ema_rel_length > 0.0).then(|| {
        names.iter().cloned().zip(ema.shadow.iter().cloned()).collect::<Vec<_>>()
    });
    let opt_snapshot = OptSnapshot {
        m: names.iter().cloned().zip(state.m.iter().cloned()).collect(),
        v: names.iter().cloned().zip(state.v.iter().cloned()).collect(),
        steps: state.steps,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            step: trace.len() as u64,
            params: net.params().to_vec(),
            ema: ema_named,
            opt: Some(opt_snapshot),
        },
        trace,
        non_finite_steps,
        aborted_early,
    })
}

/// Anchor-only teacher training. Each sample's conditioning encodes the
/// anchor task with probability `mixed_condition_ratio` and the shortcut
/// task otherwise, so one model learns both encodings of the same field.
/// A sustained non-finite streak is an error here — a broken teacher must
/// not be distilled from.
pub fn pretrain_teacher(cfg: &TrainConfig) -> Result<TrainOutcome> {
    assert_eq!(cfg.paradigm, Paradigm::Pretrain, "paradigm/entry-point mismatch");
    run(cfg, Network::init(cfg.network_config()), None)
}

/// Distillation: the student starts from the teacher's evaluation weights
/// and trains the full objective against the frozen, guidance-combined
/// teacher velocity.
pub fn distill(teacher: &Checkpoint, cfg: &TrainConfig) -> Result<TrainOutcome> {
    assert_eq!(cfg.paradigm, Paradigm::Distill, "paradigm/entry-point mismatch");
    let tc = &teacher.config;
    let mismatches: Vec<String> = [
        ("dataset", tc.dataset.name().to_string(), cfg.dataset.name().to_string()),
        ("scheme", format!("{:?}", tc.scheme), format!("{:?}", cfg.scheme)),
        ("hidden_width", tc.hidden_width.to_string(), cfg.hidden_width.to_string()),
        ("depth", tc.depth.to_string(), cfg.depth.to_string()),
        ("time_embed_dim", tc.time_embed_dim.to_string(), cfg.time_embed_dim.to_string()),
    ]
    .into_iter()
    .filter(|(_, a, b)| a != b)
    .map(|(k, a, b)| format!("{k}: teacher {a}, run {b}"))
    .collect();
    if !mismatches.is_empty() {
        return Err(Error::CheckpointIncompatible(mismatches.join("; ")));
    }
    let teacher_net = teacher.eval_network()?;
    let student = Network::from_named_params(cfg.network_config(), teacher_net.params().to_vec())?;
    run(cfg, student, Some(&teacher_net))
}

/// From-scratch training of the full objective against the linear data
/// velocity (optionally steered by the online model's frozen guidance).
pub fn train_scratch(cfg: &TrainConfig) -> Result<TrainOutcome> {
    assert_eq!(cfg.paradigm, Paradigm::Scratch, "paradigm/entry-point mismatch");
    run(cfg, Network::init(cfg.network_config()), None)
}
