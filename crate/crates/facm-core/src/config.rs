//! Run configuration: a flat `key = value` text format with strict parsing.
//!
//! Unknown keys are rejected (typo safety), values are validated, and
//! `to_text` emits every key in a fixed order so that a resolved snapshot
//! reparses to an identical configuration. `#` starts a comment; blank
//! lines are ignored; an empty file yields the paradigm's defaults.

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::flow::{ConditioningScheme, TimeSchedule};
use crate::network::NetworkConfig;
use crate::objectives::{FacmSpec, GuidanceSpec, WeightKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    /// Anchor-only teacher training with mixed conditioning encodings.
    Pretrain,
    /// Anchored-plus-shortcut training against a frozen guided teacher.
    Distill,
    /// Anchored-plus-shortcut training against the data velocity.
    Scratch,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Pretrain => "pretrain",
            Paradigm::Distill => "distill",
            Paradigm::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Option<Paradigm> {
        match s {
            "pretrain" => Some(Paradigm::Pretrain),
            "distill" => Some(Paradigm::Distill),
            "scratch" => Some(Paradigm::Scratch),
            _ => None,
        }
    }
}

/// Names for the scalar time-weight families, paired with a `*_p` exponent
/// key that only the power family reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightName {
    One,
    OneMinusTPow,
    CosHalfPi,
}

impl WeightName {
    fn name(self) -> &'static str {
        match self {
            WeightName::One => "one",
            WeightName::OneMinusTPow => "one_minus_t_pow",
            WeightName::CosHalfPi => "cos_half_pi",
        }
    }

    fn parse(s: &str) -> Option<WeightName> {
        match s {
            "one" => Some(WeightName::One),
            "one_minus_t_pow" => Some(WeightName::OneMinusTPow),
            "cos_half_pi" => Some(WeightName::CosHalfPi),
            _ => None,
        }
    }

    fn resolve(self, p: f64) -> WeightKind {
        match self {
            WeightName::One => WeightKind::One,
            WeightName::OneMinusTPow => WeightKind::OneMinusTPow(p),
            WeightName::CosHalfPi => WeightKind::CosHalfPi,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub dataset: DatasetKind,
    pub scheme: ConditioningScheme,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Relative EMA half-life scale; 0 disables EMA.
    pub ema_rel_length: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub guidance_w: f64,
    pub guidance_t_low: f64,
    pub alpha_kind: WeightName,
    pub alpha_p: f64,
    pub beta_kind: WeightName,
    pub beta_p: f64,
    pub clamp_enabled: bool,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub norm_c: f64,
    pub fm_weight: f64,
    /// Teacher pretraining: probability a sample uses the anchor-task
    /// encoding rather than the shortcut-task one.
    pub mixed_condition_ratio: f64,
    /// Probability a class label is replaced by the null class during
    /// training, so the unconditional branch gets trained for guidance.
    pub label_dropout: f64,
    pub hidden_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Teacher checkpoint path (distillation only).
    pub teacher: Option<String>,
}

impl TrainConfig {
    pub fn default_for(paradigm: Paradigm) -> TrainConfig {
        TrainConfig {
            paradigm,
            dataset: DatasetKind::EightGaussians,
            scheme: ConditioningScheme::ExpandedInterval,
            seed: 0,
            steps: match paradigm {
                Paradigm::Pretrain => 20_000,
                Paradigm::Distill | Paradigm::Scratch => 10_000,
            },
            batch_size: 256,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ema_rel_length: 0.2,
            p_mean: -0.8,
            p_std: 1.6,
            guidance_w: 1.75,
            guidance_t_low: 0.125,
            alpha_kind: WeightName::OneMinusTPow,
            alpha_p: 0.5,
            beta_kind: WeightName::CosHalfPi,
            beta_p: 0.5,
            clamp_enabled: true,
            clamp_lo: -1.0,
            clamp_hi: 1.0,
            norm_c: 1e-3,
            fm_weight: 1.0,
            mixed_condition_ratio: 0.5,
            label_dropout: 0.1,
            hidden_width: 256,
            depth: 4,
            time_embed_dim: 128,
            teacher: None,
        }
    }

    /// Parse config text on top of `paradigm`'s defaults, then apply
    /// `overrides` (from `--set key=value`, reported as line 0). A
    /// `paradigm` key in the text must agree with the requested paradigm.
    pub fn parse(paradigm: Paradigm, text: &str, overrides: &[(String, String)]) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default_for(paradigm);
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    line: lineno + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::ConfigParse {
                    line: lineno + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key.to_string());
            cfg.apply(key, value, lineno + 1)?;
        }
        for (key, value) in overrides {
            cfg.apply(key.trim(), value.trim(), 0)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse standalone text that must carry its own `paradigm` key
    /// (checkpoint-embedded snapshots always do).
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let paradigm = text
            .lines()
            .filter_map(|raw| {
                let line = raw.split('#').next().unwrap_or("").trim();
                let (k, v) = line.split_once('=')?;
                (k.trim() == "paradigm").then(|| v.trim().to_string())
            })
            .next()
            .ok_or_else(|| Error::ConfigParse {
                line: 0,
                msg: "missing required key `paradigm`".to_string(),
            })?;
        let paradigm = Paradigm::parse(&paradigm).ok_or_else(|| Error::InvalidConfigValue {
            key: "paradigm".to_string(),
            msg: format!("unknown paradigm {paradigm:?}"),
        })?;
        TrainConfig::parse(paradigm, text, &[])
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn bad(key: &str, msg: impl Into<String>) -> Error {
            Error::InvalidConfigValue { key: key.to_string(), msg: msg.into() }
        }
        fn f(key: &str, v: &str) -> Result<f64> {
            v.parse::<f64>().map_err(|e| bad(key, format!("not a number ({e}): {v:?}")))
        }
        fn u(key: &str, v: &str) -> Result<u64> {
            v.parse::<u64>().map_err(|e| bad(key, format!("not an integer ({e}): {v:?}")))
        }
        fn b(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(key, format!("expected true or false: {v:?}"))),
            }
        }
        match key {
            "paradigm" => {
                let p = Paradigm::parse(value)
                    .ok_or_else(|| bad(key, format!("unknown paradigm {value:?}")))?;
                if p != self.paradigm {
                    return Err(bad(
                        key,
                        format!(
                            "config says {:?} but the command runs {:?}",
                            p.name(),
                            self.paradigm.name()
                        ),
                    ));
                }
            }
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "scheme" => {
                self.scheme = match value {
                    "expanded_interval" => ConditioningScheme::ExpandedInterval,
                    "auxiliary_time" => ConditioningScheme::AuxiliaryTime,
                    _ => return Err(bad(key, format!("unknown scheme {value:?}"))),
                }
            }
            "seed" => self.seed = u(key, value)?,
            "steps" => self.steps = u(key, value)? as usize,
            "batch_size" => self.batch_size = u(key, value)? as usize,
            "lr" => self.lr = f(key, value)?,
            "beta1" => self.beta1 = f(key, value)?,
            "beta2" => self.beta2 = f(key, value)?,
            "weight_decay" => self.weight_decay = f(key, value)?,
            "grad_clip" => self.grad_clip = f(key, value)?,
            "ema_rel_length" => self.ema_rel_length = f(key, value)?,
            "p_mean" => self.p_mean = f(key, value)?,
            "p_std" => self.p_std = f(key, value)?,
            "guidance_w" => self.guidance_w = f(key, value)?,
            "guidance_t_low" => self.guidance_t_low = f(key, value)?,
            "alpha_kind" => {
                self.alpha_kind = WeightName::parse(value)
                    .ok_or_else(|| bad(key, format!("unknown weight kind {value:?}")))?
            }
            "alpha_p" => self.alpha_p = f(key, value)?,
            "beta_kind" => {
                self.beta_kind = WeightName::parse(value)
                    .ok_or_else(|| bad(key, format!("unknown weight kind {value:?}")))?
            }
            "beta_p" => self.beta_p = f(key, value)?,
            "clamp_enabled" => self.clamp_enabled = b(key, value)?,
            "clamp_lo" => self.clamp_lo = f(key, value)?,
            "clamp_hi" => self.clamp_hi = f(key, value)?,
            "norm_c" => self.norm_c = f(key, value)?,
            "fm_weight" => self.fm_weight = f(key, value)?,
            "mixed_condition_ratio" => self.mixed_condition_ratio = f(key, value)?,
            "label_dropout" => self.label_dropout = f(key, value)?,
            "hidden_width" => self.hidden_width = u(key, value)? as usize,
            "depth" => self.depth = u(key, value)? as usize,
            "time_embed_dim" => self.time_embed_dim = u(key, value)? as usize,
            "teacher" => {
                if value.is_empty() {
                    return Err(bad(key, "teacher path must not be empty"));
                }
                self.teacher = Some(value.to_string());
            }
            _ => {
                return Err(Error::UnknownConfigKey { key: key.to_string(), line });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, msg: impl Into<String>) -> Error {
            Error::InvalidConfigValue { key: key.to_string(), msg: msg.into() }
        }
        if self.steps == 0 {
            return Err(bad("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be positive and finite, got {}", self.lr)));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(bad("weight_decay", "must be nonnegative"));
        }
        if self.grad_clip < 0.0 {
            return Err(bad("grad_clip", "must be nonnegative (0 disables)"));
        }
        if self.ema_rel_length < 0.0 {
            return Err(bad("ema_rel_length", "must be nonnegative (0 disables)"));
        }
        if !(self.p_std > 0.0) {
            return Err(bad("p_std", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.guidance_t_low) {
            return Err(bad("guidance_t_low", "must lie in [0, 1]"));
        }
        if self.clamp_enabled && self.clamp_lo > self.clamp_hi {
            return Err(bad("clamp_lo", "clamp_lo must not exceed clamp_hi"));
        }
        if !(self.norm_c > 0.0) {
            return Err(bad("norm_c", "must be positive"));
        }
        if self.fm_weight < 0.0 {
            return Err(bad("fm_weight", "must be nonnegative"));
        }
        if self.alpha_kind == WeightName::OneMinusTPow && !(self.alpha_p > 0.0) {
            return Err(bad("alpha_p", "must be positive"));
        }
        if self.beta_kind == WeightName::OneMinusTPow && !(self.beta_p > 0.0) {
            return Err(bad("beta_p", "must be positive"));
        }
        for (key, v) in [
            ("mixed_condition_ratio", self.mixed_condition_ratio),
            ("label_dropout", self.label_dropout),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.hidden_width == 0 {
            return Err(bad("hidden_width", "must be at least 1"));
        }
        if self.depth == 0 {
            return Err(bad("depth", "must be at least 1"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(bad("time_embed_dim", "must be even and at least 2"));
        }
        Ok(())
    }

    /// Canonical serialization; `parse(to_text(c))` round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("paradigm", self.paradigm.name().to_string());
        kv("dataset", self.dataset.name().to_string());
        kv("scheme", scheme_name(self.scheme).to_string());
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("ema_rel_length", self.ema_rel_length.to_string());
        kv("p_mean", self.p_mean.to_string());
        kv("p_std", self.p_std.to_string());
        kv("guidance_w", self.guidance_w.to_string());
        kv("guidance_t_low", self.guidance_t_low.to_string());
        kv("alpha_kind", self.alpha_kind.name().to_string());
        kv("alpha_p", self.alpha_p.to_string());
        kv("beta_kind", self.beta_kind.name().to_string());
        kv("beta_p", self.beta_p.to_string());
        kv("clamp_enabled", self.clamp_enabled.to_string());
        kv("clamp_lo", self.clamp_lo.to_string());
        kv("clamp_hi", self.clamp_hi.to_string());
        kv("norm_c", self.norm_c.to_string());
        kv("fm_weight", self.fm_weight.to_string());
        kv("mixed_condition_ratio", self.mixed_condition_ratio.to_string());
        kv("label_dropout", self.label_dropout.to_string());
        kv("hidden_width", self.hidden_width.to_string());
        kv("depth", self.depth.to_string());
        kv("time_embed_dim", self.time_embed_dim.to_string());
        if let Some(t) = &self.teacher {
            kv("teacher", t.clone());
        }
        s
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dim: 2,
            hidden_width: self.hidden_width,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
            num_classes: self.dataset.num_classes(),
            scheme: self.scheme,
            seed: self.seed,
        }
    }

    pub fn time_schedule(&self) -> TimeSchedule {
        TimeSchedule::new(self.p_mean, self.p_std)
    }

    pub fn guidance(&self) -> GuidanceSpec {
        GuidanceSpec { w: self.guidance_w, t_low: self.guidance_t_low }
    }

    pub fn facm_spec(&self) -> FacmSpec {
        FacmSpec {
            guidance: self.guidance(),
            alpha: self.alpha_kind.resolve(self.alpha_p),
            beta: self.beta_kind.resolve(self.beta_p),
            clamp: self.clamp_enabled.then_some((self.clamp_lo, self.clamp_hi)),
            norm_c: self.norm_c,
            fm_weight: self.fm_weight,
        }
    }
}

fn scheme_name(s: ConditioningScheme) -> &'static str {
    match s {
        ConditioningScheme::ExpandedInterval => "expanded_interval",
        ConditioningScheme::AuxiliaryTime => "auxiliary_time",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_full_defaults() {
        let cfg = TrainConfig::parse(Paradigm::Pretrain, "", &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default_for(Paradigm::Pretrain));
        assert_eq!(cfg.steps, 20_000);
        assert_eq!(TrainConfig::parse(Paradigm::Distill, "", &[]).unwrap().steps, 10_000);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = TrainConfig::default_for(Paradigm::Distill);
        cfg.lr = 3.7e-4;
        cfg.seed = 99;
        cfg.scheme = ConditioningScheme::AuxiliaryTime;
        cfg.teacher = Some("runs/teacher.ckpt".to_string());
        cfg.alpha_p = 0.625;
        cfg.clamp_enabled = false;
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let text = "\n# a comment\nlr = 0.001  # trailing comment\n\nsteps = 50\n";
        let cfg = TrainConfig::parse(
            Paradigm::Scratch,
            text,
            &[("steps".to_string(), "75".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.steps, 75, "override wins over file");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = TrainConfig::parse(Paradigm::Pretrain, "lrr = 0.1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey { .. }), "{err}");
        let err = TrainConfig::parse(Paradigm::Pretrain, "lr = fast\n", &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfigValue { .. }), "{err}");
        let err = TrainConfig::parse(Paradigm::Pretrain, "lr\n", &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 1, .. }), "{err}");
        let err = TrainConfig::parse(Paradigm::Pretrain, "lr = 0.1\nlr = 0.2\n", &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
    }

    #[test]
    fn paradigm_conflicts_are_caught() {
        let err = TrainConfig::parse(Paradigm::Pretrain, "paradigm = distill\n", &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfigValue { .. }), "{err}");
        assert!(TrainConfig::parse(Paradigm::Distill, "paradigm = distill\n", &[]).is_ok());
        let err = TrainConfig::from_text("lr = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { .. }), "{err}");
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        for bad in [
            "lr = 0",
            "beta1 = 1",
            "p_std = 0",
            "guidance_t_low = 1.5",
            "norm_c = 0",
            "time_embed_dim = 5",
            "steps = 0",
            "clamp_lo = 2",
            "teacher =",
        ] {
            let r = TrainConfig::parse(Paradigm::Distill, bad, &[]);
            assert!(r.is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn derived_views_match_fields() {
        let mut cfg = TrainConfig::default_for(Paradigm::Scratch);
        cfg.dataset = DatasetKind::TwoMoons;
        let nc = cfg.network_config();
        assert_eq!(nc.num_classes, 0);
        assert_eq!(nc.hidden_width, cfg.hidden_width);
        let spec = cfg.facm_spec();
        assert_eq!(spec.guidance.w, cfg.guidance_w);
        assert_eq!(spec.alpha, WeightKind::OneMinusTPow(0.5));
        assert_eq!(spec.beta, WeightKind::CosHalfPi);
        assert_eq!(spec.clamp, Some((-1.0, 1.0)));
        cfg.clamp_enabled = false;
        assert_eq!(cfg.facm_spec().clamp, None);
    }
}
