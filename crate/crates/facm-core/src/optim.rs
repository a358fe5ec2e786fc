//! Optimization: AdamW with decoupled weight decay and bias correction,
//! an exponential moving average of the parameters, and a global
//! gradient-norm clip.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: u64,
}

impl OptState {
    pub fn new(shapes: impl Iterator<Item = Vec<usize>>) -> OptState {
        let m: Vec<Tensor> = shapes.map(Tensor::zeros).collect();
        let v = m.clone();
        OptState { m, v, steps: 0 }
    }

    pub fn from_parts(m: Vec<Tensor>, v: Vec<Tensor>, steps: u64) -> OptState {
        assert_eq!(m.len(), v.len());
        OptState { m, v, steps }
    }
}

/// One AdamW step in place. Decay is decoupled (applied to the parameters
/// before the moment update, scaled by lr), moments are bias-corrected.
pub fn adamw_step(opt: &AdamW, state: &mut OptState, params: &mut [&mut Tensor], grads: &[Tensor]) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state size mismatch");
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay_factor = 1.0 - opt.lr * opt.weight_decay;
    for i in 0..params.len() {
        let g = &grads[i];
        assert_eq!(params[i].shape(), g.shape(), "gradient shape mismatch at parameter {i}");
        let shape = params[i].shape().to_vec();
        let pd = params[i].data();
        let md = state.m[i].data();
        let vd = state.v[i].data();
        let gd = g.data();
        let mut new_p = Vec::with_capacity(pd.len());
        let mut new_m = Vec::with_capacity(pd.len());
        let mut new_v = Vec::with_capacity(pd.len());
        for k in 0..pd.len() {
            let p = pd[k] * decay_factor;
            let m = opt.beta1 * md[k] + (1.0 - opt.beta1) * gd[k];
            let v = opt.beta2 * vd[k] + (1.0 - opt.beta2) * gd[k] * gd[k];
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            new_m.push(m);
            new_v.push(v);
            new_p.push(p - opt.lr * m_hat / (v_hat.sqrt() + opt.eps));
        }
        *params[i] = Tensor::new(shape.clone(), new_p);
        state.m[i] = Tensor::new(shape.clone(), new_m);
        state.v[i] = Tensor::new(shape, new_v);
    }
}

/// Exponential moving average of parameters, initialized to a copy of them.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, init: Vec<Tensor>) -> EmaState {
        assert!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1), got {decay}");
        EmaState { decay, shadow: init }
    }
}

/// shadow <- d * shadow + (1 - d) * online.
pub fn ema_update(state: &mut EmaState, params: &[Tensor]) {
    assert_eq!(state.shadow.len(), params.len());
    let d = state.decay;
    for (s, p) in state.shadow.iter_mut().zip(params) {
        *s = s.scale(d).add(&p.scale(1.0 - d));
    }
}

/// Per-step decay whose half-life is `rel_length / 2` of the planned run:
/// d = exp(ln(1/2) / (rel_length * total_steps / 2)). `rel_length = 0`
/// disables averaging (decay 0 tracks the online parameters exactly).
pub fn ema_decay(rel_length: f64, total_steps: usize) -> f64 {
    assert!(rel_length >= 0.0);
    assert!(total_steps >= 1);
    if rel_length == 0.0 {
        return 0.0;
    }
    let half_life = rel_length * total_steps as f64 / 2.0;
    (0.5f64.ln() / half_life).exp()
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn first_step_matches_the_hand_computed_value() {
        let opt = AdamW { lr: 0.1, ..AdamW::default() };
        let mut state = OptState::new(std::iter::once(vec![]));
        let mut p = scalar(1.0);
        let g = scalar(1.0);
        adamw_step(&opt, &mut state, &mut [&mut p], &[g]);
        // bias correction makes m_hat = v_hat = 1 on the first step
        let expected = 1.0 - 0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        assert!((p.item() - expected).abs() < 1e-15, "{} vs {expected}", p.item());
        assert_eq!(state.steps, 1);
    }

    #[test]
    fn decay_without_gradient_shrinks_parameters_geometrically() {
        let opt = AdamW { lr: 0.1, weight_decay: 0.5, ..AdamW::default() };
        let mut state = OptState::new(std::iter::once(vec![]));
        let mut p = scalar(2.0);
        adamw_step(&opt, &mut state, &mut [&mut p], &[scalar(0.0)]);
        assert!((p.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (p - 3)^2 from p = 0
        let opt = AdamW { lr: 0.05, ..AdamW::default() };
        let mut state = OptState::new(std::iter::once(vec![]));
        let mut p = scalar(0.0);
        for _ in 0..2000 {
            let g = scalar(2.0 * (p.item() - 3.0));
            adamw_step(&opt, &mut state, &mut [&mut p], &[g]);
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "ended at {}", p.item());
    }

    #[test]
    fn ema_converges_to_constant_parameters() {
        let target = vec![scalar(2.0), Tensor::full(vec![2], -1.0)];
        let mut ema = EmaState::new(0.9, vec![scalar(0.0), Tensor::zeros(vec![2])]);
        for _ in 0..400 {
            ema_update(&mut ema, &target);
        }
        assert!((ema.shadow[0].item() - 2.0).abs() < 1e-14);
        assert!((ema.shadow[1].data()[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn ema_decay_has_the_planned_half_life() {
        let total = 1000;
        let d = ema_decay(0.2, total);
        let half_life = 0.2 * total as f64 / 2.0;
        assert!((d.powf(half_life) - 0.5).abs() < 1e-12);
        assert_eq!(ema_decay(0.0, total), 0.0);
        // decay 0 tracks the online parameters exactly
        let mut ema = EmaState::new(0.0, vec![scalar(5.0)]);
        ema_update(&mut ema, &[scalar(7.0)]);
        assert_eq!(ema.shadow[0].item(), 7.0);
    }

    #[test]
    fn global_clip_caps_the_joint_norm() {
        let mut grads = vec![Tensor::full(vec![2], 3.0), Tensor::full(vec![2], 4.0)];
        // joint norm = sqrt(9+9+16+16) = sqrt(50)
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 50f64.sqrt()).abs() < 1e-12);
        let mut sq = 0.0;
        for g in &grads {
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
        // disabled clip leaves gradients alone
        let mut g2 = vec![Tensor::full(vec![2], 3.0)];
        let pre2 = clip_global_norm(&mut g2, 0.0);
        assert!((pre2 - 18f64.sqrt()).abs() < 1e-12);
        assert_eq!(g2[0], Tensor::full(vec![2], 3.0));
    }
}
