//! Conditioned MLP velocity model.
//!
//! Architecture: the 2D input is projected to the hidden width; sinusoidal
//! features of each raw condition component are projected and *added* to the
//! first pre-activation (as is the class embedding row, when the dataset is
//! conditional); a stack of silu layers follows, then a linear head back to
//! 2D.
//!
//! The first condition component always feeds the main time embedder. Under
//! the two-component scheme the second component feeds a separate embedder
//! whose projection starts at exactly zero, so at initialization the output
//! is bit-for-bit independent of the second time input and the model grows
//! into using it only as gradients arrive.
//!
//! The forward pass is written once, generically over an execution context:
//! plain tensors (inference), or tape values (training and dual-number
//! sweeps). Both contexts call the same kernels in the same order, which
//! makes the taped primal bit-identical to the plain forward.
//!
//! Sinusoidal features must separate every condition value in [0, 2]: all
//! frequencies are at most pi/2 (period at least 4), descending
//! geometrically.

use std::sync::Arc;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::{ConditionTask, ConditioningScheme, ConditioningSignal};
use crate::rng;
use crate::tensor::{time_embed, DualTensor, Tape, Tensor, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Point dimensionality; the output (a velocity) has the same width.
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of silu layers (the conditioning-injection layer counts).
    pub depth: usize,
    /// Sinusoidal feature count per condition component; must be even.
    pub time_embed_dim: usize,
    /// 0 means unconditional; otherwise an embedding table with one extra
    /// null row (index `num_classes`) is allocated.
    pub num_classes: usize,
    pub scheme: ConditioningScheme,
    /// Seed for deterministic initialization.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 2,
            hidden_width: 256,
            depth: 4,
            time_embed_dim: 128,
            num_classes: 8,
            scheme: ConditioningScheme::ExpandedInterval,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    fn validate(&self) {
        assert!(self.input_dim >= 1, "input dim must be positive");
        assert!(self.hidden_width >= 1, "hidden width must be positive");
        assert!(self.depth >= 1, "depth must be at least 1");
        assert!(
            self.time_embed_dim >= 2 && self.time_embed_dim % 2 == 0,
            "time embed dim must be even and at least 2, got {}",
            self.time_embed_dim
        );
    }

    /// Canonical parameter names and shapes for this architecture.
    pub fn expected_params(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.hidden_width;
        let d = self.time_embed_dim;
        let mut out = vec![
            ("input.w".to_string(), vec![self.input_dim, w]),
            ("input.b".to_string(), vec![w]),
            ("time.w".to_string(), vec![d, w]),
            ("time.b".to_string(), vec![w]),
        ];
        if self.scheme == ConditioningScheme::AuxiliaryTime {
            out.push(("aux.w".to_string(), vec![d, w]));
            out.push(("aux.b".to_string(), vec![w]));
        }
        if self.num_classes > 0 {
            out.push(("class.table".to_string(), vec![self.num_classes + 1, w]));
        }
        for l in 0..self.depth - 1 {
            out.push((format!("hidden.{l}.w"), vec![w, w]));
            out.push((format!("hidden.{l}.b"), vec![w]));
        }
        out.push(("out.w".to_string(), vec![w, self.input_dim]));
        out.push(("out.b".to_string(), vec![self.input_dim]));
        out
    }

    /// Descending geometric frequency ladder; the largest frequency is pi/2
    /// (period 4), so the features are injective over condition values in
    /// [0, 2].
    fn frequencies(&self) -> Vec<f64> {
        let nf = self.time_embed_dim / 2;
        let top = std::f64::consts::FRAC_PI_2;
        if nf == 1 {
            return vec![top];
        }
        let ratio = (1.0 / 50.0f64).powf(1.0 / (nf - 1) as f64);
        (0..nf).map(|i| top * ratio.powi(i as i32)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    freqs: Arc<Vec<f64>>,
    /// Parameters in canonical order; the forward pass consumes them with a
    /// cursor in exactly this order.
    params: Vec<(String, Tensor)>,
}

impl Network {
    /// Fan-in-scaled normal initialization from `config.seed`. Biases start
    /// at zero, as does the auxiliary time projection (see module docs).
    pub fn init(config: NetworkConfig) -> Self {
        config.validate();
        let mut r = rng::stream(config.seed, "init");
        let w = config.hidden_width;
        let params = config
            .expected_params()
            .into_iter()
            .map(|(name, shape)| {
                let t = match name.as_str() {
                    n if n.ends_with(".b") => Tensor::zeros(shape),
                    "aux.w" => Tensor::zeros(shape),
                    "class.table" => normal_init(&shape, 1.0 / (w as f64).sqrt(), &mut r),
                    _ => {
                        let fan_in = shape[0];
                        normal_init(&shape, 1.0 / (fan_in as f64).sqrt(), &mut r)
                    }
                };
                (name, t)
            })
            .collect();
        Network { freqs: Arc::new(config.frequencies()), config, params }
    }

    /// Rebuild from named tensors (checkpoint loading). Order-insensitive;
    /// every expected parameter must be present with the right shape, and no
    /// extras are allowed.
    pub fn from_named_params(config: NetworkConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate();
        let expected = config.expected_params();
        if named.len() != expected.len() {
            return Err(Error::CheckpointIncompatible(format!(
                "expected {} parameters, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let pos = named.iter().position(|(n, _)| *n == name).ok_or_else(|| {
                Error::CheckpointIncompatible(format!("missing parameter {name:?}"))
            })?;
            let (n, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointIncompatible(format!(
                    "parameter {n:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            params.push((n, t));
        }
        Ok(Network { freqs: Arc::new(config.frequencies()), config, params })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Replace all parameter values, keeping names; tensors must arrive in
    /// canonical order with matching shapes.
    pub fn set_param_tensors(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.params.len(), "parameter count mismatch");
        for ((name, slot), t) in self.params.iter_mut().zip(tensors) {
            assert_eq!(slot.shape(), t.shape(), "shape mismatch for {name}");
            *slot = t;
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    fn resolve_labels(&self, n: usize, labels: &[Option<usize>]) -> Arc<Vec<usize>> {
        if self.config.num_classes == 0 {
            assert!(
                labels.iter().all(|l| l.is_none()),
                "class label passed to an unconditional network"
            );
            return Arc::new(Vec::new());
        }
        assert_eq!(labels.len(), n, "one label per row required");
        let c = self.config.num_classes;
        Arc::new(
            labels
                .iter()
                .map(|l| match l {
                    Some(k) => {
                        assert!(*k < c, "label {k} out of range for {c} classes");
                        *k
                    }
                    None => c, // null row
                })
                .collect(),
        )
    }

    fn check_cond(&self, n: usize, cond: &[ConditioningSignal]) {
        assert_eq!(cond.len(), n, "one conditioning signal per row required");
        let arity = self.config.scheme.arity();
        for s in cond {
            assert_eq!(
                s.encoded.len(),
                arity,
                "conditioning arity {} does not match scheme {}",
                s.encoded.len(),
                self.config.scheme.name()
            );
            assert_eq!(s.time_tangent.len(), arity);
        }
    }

    /// Plain inference forward; deterministic, no recording.
    pub fn forward(&self, x: &Tensor, cond: &[ConditioningSignal], labels: &[Option<usize>]) -> Tensor {
        let (n, d) = x.dims2();
        assert_eq!(d, self.config.input_dim, "point dimensionality mismatch");
        self.check_cond(n, cond);
        let idx = self.resolve_labels(n, labels);
        let cols = signal_value_columns(cond, self.config.scheme.arity());
        let params: Vec<Tensor> = self.param_tensors();
        let mut ctx = PlainFwd;
        self.forward_impl(&mut ctx, &params, &x.clone(), &cols, &idx)
    }

    /// Forward plus directional derivative along the trajectory in a single
    /// dual-number sweep: the point moves along `x_tangent` while the raw
    /// condition components move along their encoded time tangents.
    ///
    /// Only shortcut-task conditioning is accepted: the velocity-anchor task
    /// is never differentiated with respect to time.
    pub fn forward_jvp(
        &self,
        x: &Tensor,
        x_tangent: &Tensor,
        cond: &[ConditioningSignal],
        labels: &[Option<usize>],
    ) -> DualTensor {
        let (n, d) = x.dims2();
        assert_eq!(d, self.config.input_dim, "point dimensionality mismatch");
        assert_eq!(x.shape(), x_tangent.shape(), "tangent shape mismatch");
        self.check_cond(n, cond);
        for s in cond {
            assert!(
                s.task == ConditionTask::Cm,
                "time derivative requested for the velocity-anchor task; only the shortcut task moves with t"
            );
        }
        let idx = self.resolve_labels(n, labels);
        let mut tape = Tape::new();
        let params: Vec<ValueId> =
            self.params.iter().map(|(_, t)| tape.input(t.clone())).collect();
        let x_id = tape.input_dual(x.clone(), x_tangent.clone());
        let cols: Vec<ValueId> = signal_dual_columns(cond, self.config.scheme.arity())
            .into_iter()
            .map(|(v, t)| tape.input_dual(v, t))
            .collect();
        let mut ctx = TapeFwd { tape: &mut tape };
        let out = self.forward_impl(&mut ctx, &params, &x_id, &cols, &idx);
        tape.dual(out)
    }

    /// Register all parameters on a tape as differentiable leaves, in
    /// canonical order. One registration serves any number of forward passes
    /// on that tape (the branches share weights and their gradients sum).
    pub(crate) fn register(&self, tape: &mut Tape) -> Vec<ValueId> {
        self.params.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Taped forward over pre-built inputs; `cond_cols` are (n, 1) columns,
    /// one per condition component, dual-seeded by the caller when a time
    /// derivative is wanted.
    pub(crate) fn forward_taped(
        &self,
        tape: &mut Tape,
        params: &[ValueId],
        x: ValueId,
        cond_cols: &[ValueId],
        labels: &[Option<usize>],
    ) -> ValueId {
        let n = tape.value(x).dims2().0;
        let idx = self.resolve_labels(n, labels);
        let mut ctx = TapeFwd { tape };
        self.forward_impl(&mut ctx, params, &x, cond_cols, &idx)
    }

    fn forward_impl<F: Fwd>(
        &self,
        f: &mut F,
        params: &[F::V],
        x: &F::V,
        cond: &[F::V],
        labels_idx: &Arc<Vec<usize>>,
    ) -> F::V {
        assert_eq!(cond.len(), self.config.scheme.arity(), "condition column count");
        let mut cur = params.iter();
        let mut next = || cur.next().expect("parameter cursor exhausted");

        let (w_in, b_in) = (next(), next());
        let mut h = f.matmul(x, w_in);
        h = f.add_row(&h, b_in);

        let (w_t, b_t) = (next(), next());
        let e = f.time_embed(&cond[0], &self.freqs);
        let e = f.matmul(&e, w_t);
        let e = f.add_row(&e, b_t);
        h = f.add(&h, &e);

        if self.config.scheme == ConditioningScheme::AuxiliaryTime {
            let (w_a, b_a) = (next(), next());
            let e2 = f.time_embed(&cond[1], &self.freqs);
            let e2 = f.matmul(&e2, w_a);
            let e2 = f.add_row(&e2, b_a);
            h = f.add(&h, &e2);
        }
        if self.config.num_classes > 0 {
            let table = next();
            let ce = f.gather(table, labels_idx);
            h = f.add(&h, &ce);
        }
        h = f.silu(&h);

        for _ in 0..self.config.depth - 1 {
            let (w_l, b_l) = (next(), next());
            h = f.matmul(&h, w_l);
            h = f.add_row(&h, b_l);
            h = f.silu(&h);
        }

        let (w_o, b_o) = (next(), next());
        let out = f.matmul(&h, w_o);
        let out = f.add_row(&out, b_o);
        assert!(cur.next().is_none(), "parameter cursor not exhausted");
        out
    }
}

fn normal_init(shape: &[usize], std: f64, r: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// (n, 1) value column per condition component.
pub(crate) fn signal_value_columns(cond: &[ConditioningSignal], arity: usize) -> Vec<Tensor> {
    let n = cond.len();
    (0..arity)
        .map(|c| Tensor::new(vec![n, 1], cond.iter().map(|s| s.encoded[c]).collect()))
        .collect()
}

/// (value, tangent) column pairs per condition component.
pub(crate) fn signal_dual_columns(cond: &[ConditioningSignal], arity: usize) -> Vec<(Tensor, Tensor)> {
    let n = cond.len();
    (0..arity)
        .map(|c| {
            (
                Tensor::new(vec![n, 1], cond.iter().map(|s| s.encoded[c]).collect()),
                Tensor::new(vec![n, 1], cond.iter().map(|s| s.time_tangent[c]).collect()),
            )
        })
        .collect()
}

/// Execution context for the shared forward pass.
trait Fwd {
    type V: Clone;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    fn silu(&mut self, a: &Self::V) -> Self::V;
    fn time_embed(&mut self, col: &Self::V, freqs: &Arc<Vec<f64>>) -> Self::V;
    fn gather(&mut self, table: &Self::V, idx: &Arc<Vec<usize>>) -> Self::V;
}

struct PlainFwd;

impl Fwd for PlainFwd {
    type V = Tensor;
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.matmul(b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        a.add(b)
    }
    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Tensor {
        a.add_row(row)
    }
    fn silu(&mut self, a: &Tensor) -> Tensor {
        a.silu()
    }
    fn time_embed(&mut self, col: &Tensor, freqs: &Arc<Vec<f64>>) -> Tensor {
        time_embed(col, freqs)
    }
    fn gather(&mut self, table: &Tensor, idx: &Arc<Vec<usize>>) -> Tensor {
        table.gather_rows(idx)
    }
}

struct TapeFwd<'a> {
    tape: &'a mut Tape,
}

impl Fwd for TapeFwd<'_> {
    type V = ValueId;
    fn matmul(&mut self, a: &ValueId, b: &ValueId) -> ValueId {
        self.tape.matmul(*a, *b)
    }
    fn add(&mut self, a: &ValueId, b: &ValueId) -> ValueId {
        self.tape.add(*a, *b)
    }
    fn add_row(&mut self, a: &ValueId, row: &ValueId) -> ValueId {
        self.tape.add_row(*a, *row)
    }
    fn silu(&mut self, a: &ValueId) -> ValueId {
        self.tape.silu(*a)
    }
    fn time_embed(&mut self, col: &ValueId, freqs: &Arc<Vec<f64>>) -> ValueId {
        self.tape.time_embed(*col, freqs.clone())
    }
    fn gather(&mut self, table: &ValueId, idx: &Arc<Vec<usize>>) -> ValueId {
        self.tape.gather(*table, idx.clone())
    }
}
