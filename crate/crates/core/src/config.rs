//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. A leading `preset = name`
//! line (toy, tiny or paper) loads that preset's values before the rest of
//! the file is applied. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{GenerateConfig, SamplingMode};
use crate::encoders::{ArchConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::losses::{LossConfig, Supervision};
use crate::optim::{
    AdamHyper, GaLoreHyper, OptimizerKind, ProjectionType, Schedule, ScheduleShape, SelectOptions,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub data: GenerateConfig,
    pub arch: ArchConfig,
    pub pretrain: PretrainConfig,

    pub lr: f64,
    pub batch_size: usize,
    pub warmup: u64,
    pub total_steps: u64,
    pub schedule: ScheduleShape,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub galore_rank: usize,
    pub galore_scale: f64,
    pub galore_projection_type: ProjectionType,
    pub galore_refresh_period: u64,

    pub theta: f64,
    pub sig_scale: f64,
    pub sig_bias: f64,
    pub freeze_text: bool,
    pub freeze_cls: bool,
    pub supervision: Supervision,
    pub sampling: SamplingMode,

    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub probe: ProbeConfig,

    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
    pub gradcheck_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    /// Desk-scale defaults for the synthetic corpus.
    pub fn toy() -> Self {
        TrainConfig {
            seed: 4096,
            data_dir: PathBuf::from("data/toy"),
            out_dir: PathBuf::from("runs/toy"),
            data: GenerateConfig::default(),
            arch: ArchConfig::default(),
            pretrain: PretrainConfig::default(),
            lr: 1e-4,
            batch_size: 64,
            warmup: 20,
            total_steps: 150,
            schedule: ScheduleShape::WarmupCosine,
            optimizer: OptimizerKind::GaLoreAdamW,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            galore_rank: 4,
            galore_scale: 0.25,
            galore_projection_type: ProjectionType::Std,
            galore_refresh_period: 200,
            theta: crate::grounding::DEFAULT_THETA,
            sig_scale: 10.0,
            sig_bias: 0.0,
            freeze_text: true,
            freeze_cls: true,
            supervision: Supervision::Seq,
            sampling: SamplingMode::Balanced,
            eval_every: 100,
            checkpoint_every: 50,
            probe: ProbeConfig::default(),
            gradcheck_h: 1e-5,
            gradcheck_tol: 1e-4,
            gradcheck_batch: 2,
        }
    }

    /// Smallest configuration, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("data/tiny"),
            out_dir: PathBuf::from("runs/tiny"),
            data: GenerateConfig {
                n_images: 40,
                image_size: 16,
                min_objects: 1,
                max_objects: 2,
                large_radius: (4.0, 6.0),
                small_radius: (2.0, 3.0),
                ..GenerateConfig::default()
            },
            arch: ArchConfig::tiny(),
            pretrain: PretrainConfig {
                epochs: 1,
                batch_size: 8,
                warmup_steps: 1,
                ..PretrainConfig::default()
            },
            batch_size: 4,
            warmup: 2,
            total_steps: 10,
            galore_rank: 2,
            galore_refresh_period: 5,
            eval_every: 5,
            checkpoint_every: 5,
            probe: ProbeConfig { lr: 0.1, epochs: 50 },
            ..TrainConfig::toy()
        }
    }

    /// The published hyperparameters on top of the toy corpus and model.
    pub fn paper() -> Self {
        TrainConfig {
            out_dir: PathBuf::from("runs/paper"),
            lr: 4e-6,
            batch_size: 512,
            warmup: 25000,
            total_steps: 50000,
            optimizer: OptimizerKind::GaLoreAdamW,
            galore_rank: 128,
            galore_scale: 0.25,
            galore_projection_type: ProjectionType::Std,
            seed: 4096,
            freeze_text: false,
            ..TrainConfig::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(TrainConfig::toy()),
            "tiny" => Ok(TrainConfig::tiny()),
            "paper" => Ok(TrainConfig::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (toy|tiny|paper)"))),
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn galore(&self) -> GaLoreHyper {
        GaLoreHyper {
            rank: self.galore_rank,
            scale: self.galore_scale,
            refresh_period: self.galore_refresh_period,
            projection: self.galore_projection_type,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            warmup_steps: self.warmup,
            total_steps: self.total_steps,
            shape: self.schedule,
        }
    }

    pub fn select(&self) -> SelectOptions {
        SelectOptions {
            optimizer: self.optimizer,
            freeze_text: self.freeze_text,
            freeze_cls: self.freeze_cls,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            sig_scale: self.sig_scale,
            sig_bias: self.sig_bias,
            supervision: self.supervision,
        }
    }

    /// Generator settings with the image size taken from the architecture.
    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            image_size: self.arch.image_size,
            ..self.data.clone()
        }
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.out_dir.join("pretrain.ckpt")
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn b(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        let v = value;
        match key {
            "seed" => self.seed = p(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),

            "num_classes" => self.data.num_classes = p(key, v)?,
            "n_images" => self.data.n_images = p(key, v)?,
            "min_objects" => self.data.min_objects = p(key, v)?,
            "max_objects" => self.data.max_objects = p(key, v)?,
            "zipf" => self.data.zipf = p(key, v)?,
            "large_radius_min" => self.data.large_radius.0 = p(key, v)?,
            "large_radius_max" => self.data.large_radius.1 = p(key, v)?,
            "small_radius_min" => self.data.small_radius.0 = p(key, v)?,
            "small_radius_max" => self.data.small_radius.1 = p(key, v)?,
            "color_jitter" => self.data.color_jitter = p(key, v)?,

            "image_size" => {
                self.arch.image_size = p(key, v)?;
                self.data.image_size = self.arch.image_size;
            }
            "patch_size" => self.arch.patch_size = p(key, v)?,
            "channels" => self.arch.channels = p(key, v)?,
            "width" => self.arch.width = p(key, v)?,
            "embed_dim" => self.arch.embed_dim = p(key, v)?,
            "depth" => self.arch.depth = p(key, v)?,
            "heads" => self.arch.heads = p(key, v)?,
            "mlp_ratio" => self.arch.mlp_ratio = p(key, v)?,
            "text_width" => self.arch.text_width = p(key, v)?,
            "text_depth" => self.arch.text_depth = p(key, v)?,
            "text_heads" => self.arch.text_heads = p(key, v)?,
            "ln_eps" => self.arch.ln_eps = p(key, v)?,

            "pretrain_epochs" => self.pretrain.epochs = p(key, v)?,
            "pretrain_batch_size" => self.pretrain.batch_size = p(key, v)?,
            "pretrain_lr" => self.pretrain.lr = p(key, v)?,
            "pretrain_warmup" => self.pretrain.warmup_steps = p(key, v)?,
            "pretrain_weight_decay" => self.pretrain.weight_decay = p(key, v)?,

            "lr" => self.lr = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "warmup" => self.warmup = p(key, v)?,
            "total_steps" => self.total_steps = p(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "optimizer" => self.optimizer = v.parse()?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "beta1" => self.beta1 = p(key, v)?,
            "beta2" => self.beta2 = p(key, v)?,
            "adam_eps" => self.adam_eps = p(key, v)?,
            "galore_rank" => self.galore_rank = p(key, v)?,
            "galore_scale" => self.galore_scale = p(key, v)?,
            "galore_projection_type" => self.galore_projection_type = v.parse()?,
            "galore_refresh_period" => self.galore_refresh_period = p(key, v)?,

            "theta" => self.theta = p(key, v)?,
            "sig_scale" => self.sig_scale = p(key, v)?,
            "sig_bias" => self.sig_bias = p(key, v)?,
            "freeze_text" => self.freeze_text = b(key, v)?,
            "freeze_cls" => self.freeze_cls = b(key, v)?,
            "supervision" => self.supervision = v.parse()?,
            "sampling" => self.sampling = v.parse()?,

            "eval_every" => self.eval_every = p(key, v)?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "probe_lr" => self.probe.lr = p(key, v)?,
            "probe_epochs" => self.probe.epochs = p(key, v)?,

            "gradcheck_h" => self.gradcheck_h = p(key, v)?,
            "gradcheck_tol" => self.gradcheck_tol = p(key, v)?,
            "gradcheck_batch" => self.gradcheck_batch = p(key, v)?,
            "preset" => return Err(Error::Config("`preset` must be the first setting".into())),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = |v: &dyn ToString| v.to_string();
        vec![
            ("seed", s(&self.seed)),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("num_classes", s(&self.data.num_classes)),
            ("n_images", s(&self.data.n_images)),
            ("min_objects", s(&self.data.min_objects)),
            ("max_objects", s(&self.data.max_objects)),
            ("zipf", s(&self.data.zipf)),
            ("large_radius_min", s(&self.data.large_radius.0)),
            ("large_radius_max", s(&self.data.large_radius.1)),
            ("small_radius_min", s(&self.data.small_radius.0)),
            ("small_radius_max", s(&self.data.small_radius.1)),
            ("color_jitter", s(&self.data.color_jitter)),
            ("image_size", s(&self.arch.image_size)),
            ("patch_size", s(&self.arch.patch_size)),
            ("channels", s(&self.arch.channels)),
            ("width", s(&self.arch.width)),
            ("embed_dim", s(&self.arch.embed_dim)),
            ("depth", s(&self.arch.depth)),
            ("heads", s(&self.arch.heads)),
            ("mlp_ratio", s(&self.arch.mlp_ratio)),
            ("text_width", s(&self.arch.text_width)),
            ("text_depth", s(&self.arch.text_depth)),
            ("text_heads", s(&self.arch.text_heads)),
            ("ln_eps", s(&self.arch.ln_eps)),
            ("pretrain_epochs", s(&self.pretrain.epochs)),
            ("pretrain_batch_size", s(&self.pretrain.batch_size)),
            ("pretrain_lr", s(&self.pretrain.lr)),
            ("pretrain_warmup", s(&self.pretrain.warmup_steps)),
            ("pretrain_weight_decay", s(&self.pretrain.weight_decay)),
            ("lr", s(&self.lr)),
            ("batch_size", s(&self.batch_size)),
            ("warmup", s(&self.warmup)),
            ("total_steps", s(&self.total_steps)),
            ("schedule", s(&self.schedule)),
            ("optimizer", s(&self.optimizer)),
            ("weight_decay", s(&self.weight_decay)),
            ("beta1", s(&self.beta1)),
            ("beta2", s(&self.beta2)),
            ("adam_eps", s(&self.adam_eps)),
            ("galore_rank", s(&self.galore_rank)),
            ("galore_scale", s(&self.galore_scale)),
            ("galore_projection_type", s(&self.galore_projection_type)),
            ("galore_refresh_period", s(&self.galore_refresh_period)),
            ("theta", s(&self.theta)),
            ("sig_scale", s(&self.sig_scale)),
            ("sig_bias", s(&self.sig_bias)),
            ("freeze_text", s(&self.freeze_text)),
            ("freeze_cls", s(&self.freeze_cls)),
            ("supervision", s(&self.supervision)),
            ("sampling", s(&self.sampling)),
            ("eval_every", s(&self.eval_every)),
            ("checkpoint_every", s(&self.checkpoint_every)),
            ("probe_lr", s(&self.probe.lr)),
            ("probe_epochs", s(&self.probe.epochs)),
            ("gradcheck_h", s(&self.gradcheck_h)),
            ("gradcheck_tol", s(&self.gradcheck_tol)),
            ("gradcheck_batch", s(&self.gradcheck_batch)),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses config text. Does not validate; call [`TrainConfig::validate`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::toy();
        let mut first = true;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" && first {
                cfg = TrainConfig::preset(v)?;
            } else {
                cfg.set(k, v).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", ln + 1)),
                    other => other,
                })?;
            }
            first = false;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = TrainConfig::parse(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.arch.validate()?;
        self.generate_config().validate()?;
        let positive = [
            ("lr", self.lr),
            ("galore_scale", self.galore_scale),
            ("sig_scale", self.sig_scale),
            ("pretrain_lr", self.pretrain.lr),
            ("probe_lr", self.probe.lr),
            ("adam_eps", self.adam_eps),
            ("gradcheck_h", self.gradcheck_h),
            ("gradcheck_tol", self.gradcheck_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be positive, got {v}"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("`{k}` must be in [0, 1), got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.pretrain.weight_decay >= 0.0) {
            return bad("weight decay must be ≥ 0".into());
        }
        if !self.sig_bias.is_finite() {
            return bad("`sig_bias` must be finite".into());
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad(format!("`theta` must be in (0, 1], got {}", self.theta));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("galore_rank", self.galore_rank),
            ("pretrain_epochs", self.pretrain.epochs),
            ("pretrain_batch_size", self.pretrain.batch_size),
            ("gradcheck_batch", self.gradcheck_batch),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(format!("`{k}` must be positive"));
            }
        }
        if self.total_steps == 0 || self.galore_refresh_period == 0 {
            return bad("`total_steps` and `galore_refresh_period` must be positive".into());
        }
        if self.supervision == Supervision::Cls && self.freeze_cls {
            log::warn!("cls supervision with a frozen CLS token");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_a_fixed_point() {
        for cfg in [TrainConfig::toy(), TrainConfig::tiny(), TrainConfig::paper()] {
            let text = cfg.serialize();
            let back = TrainConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.serialize(), text);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::parse("learning_rate = 0.1").is_err());
        assert!(TrainConfig::parse("lr 0.1").is_err());
        assert!(TrainConfig::parse("optimizer = sgd").is_err());
    }

    #[test]
    fn preset_then_overrides() {
        let cfg = TrainConfig::parse("# tiny run\npreset = tiny\nseed = 7 # comment\n").unwrap();
        assert_eq!(cfg.arch, ArchConfig::tiny());
        assert_eq!(cfg.seed, 7);
        assert!(TrainConfig::parse("seed = 1\npreset = tiny").is_err());
    }

    #[test]
    fn paper_values() {
        let p = TrainConfig::paper();
        assert_eq!((p.lr, p.batch_size, p.warmup, p.galore_rank, p.galore_scale, p.seed), (4e-6, 512, 25000, 128, 0.25, 4096));
        assert_eq!(p.optimizer, OptimizerKind::GaLoreAdamW);
        p.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::toy();
        c.validate().unwrap();
        c.apply_overrides(&["theta=0"]).unwrap();
        assert!(c.validate().is_err());
        assert!(c.apply_overrides(&["nope"]).is_err());
    }
}
