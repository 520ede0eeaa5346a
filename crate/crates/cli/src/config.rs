//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use tinykd::corpus::vocab;
use tinykd::decode::SampleConfig;
use tinykd::divergence::{DistillConfig, LossVariant, TemperatureSchedule};
use tinykd::model::ModelSpec;
use tinykd::quant::{Int8Mode, QuantPlan};
use tinykd::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn spec(&self) -> tinykd::Result<ModelSpec> {
        ModelSpec::new(vocab::SIZE, self.d_model, self.n_layers, self.n_heads, self.max_len, vocab::COND_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ce_weight: f64,
    pub cond_dropout: f64,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_items: usize,
    pub corpus_length: usize,
    pub corpus_fractions: [f64; 3],
    pub teacher: ModelDims,
    pub student: ModelDims,
    pub teacher_train: Schedule,
    pub train: Schedule,
    pub variant: LossVariant,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda: f64,
    pub lambda_fix: f64,
    /// `None` means half the run.
    pub tau_step: Option<u64>,
    pub distill_t_begin: f64,
    pub distill_t_final: f64,
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub cfg_scale: f64,
    pub sample_t_begin: f64,
    pub sample_t_final: f64,
    pub n_sequences: usize,
    pub plan: String,
    pub int8_mode: String,
    pub corpus_path: Option<PathBuf>,
    pub teacher_path: Option<PathBuf>,
    pub student_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus_items: 200,
            corpus_length: 64,
            corpus_fractions: [0.8, 0.1, 0.1],
            teacher: ModelDims { d_model: 128, n_layers: 4, n_heads: 4, max_len: 128 },
            student: ModelDims { d_model: 64, n_layers: 2, n_heads: 4, max_len: 128 },
            teacher_train: Schedule {
                epochs: 10,
                batch_size: 16,
                learning_rate: 0.05,
                ce_weight: 0.0,
                cond_dropout: 0.1,
                clip_norm: 1.0,
            },
            train: Schedule {
                epochs: 10,
                batch_size: 16,
                learning_rate: 0.02,
                ce_weight: 0.0,
                cond_dropout: 0.1,
                clip_norm: 1.0,
            },
            variant: LossVariant::StageMixedSkewed,
            gamma1: 0.5,
            gamma2: 0.5,
            lambda: 0.1,
            lambda_fix: 0.5,
            tau_step: None,
            distill_t_begin: 2.0,
            distill_t_final: 1.0,
            max_new_tokens: 64,
            top_k: 50,
            cfg_scale: 3.0,
            sample_t_begin: 1.0,
            sample_t_final: 0.7,
            n_sequences: 64,
            plan: "paper".into(),
            int8_mode: "affine".into(),
            corpus_path: None,
            teacher_path: None,
            student_path: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().ok().with_context(|| format!("`{key}`: `{value}` is not {what}"))
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse(key, value, "a non-negative integer")?;
    if v == 0 {
        bail!("`{key}`: must be at least 1");
    }
    Ok(v)
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value, "a number")?;
    if !v.is_finite() {
        bail!("`{key}`: must be finite");
    }
    Ok(v)
}

fn unit(key: &str, value: &str) -> Result<f64> {
    let v = real(key, value)?;
    if !(0.0..=1.0).contains(&v) {
        bail!("`{key}`: {v} outside [0,1]");
    }
    Ok(v)
}

fn strictly_positive(key: &str, value: &str) -> Result<f64> {
    let v = real(key, value)?;
    if v <= 0.0 {
        bail!("`{key}`: {v} must be > 0");
    }
    Ok(v)
}

fn non_negative(key: &str, value: &str) -> Result<f64> {
    let v = real(key, value)?;
    if v < 0.0 {
        bail!("`{key}`: {v} must be >= 0");
    }
    Ok(v)
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses a config document on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v, "a non-negative integer")?,
            "corpus.items" => self.corpus_items = positive(key, v)?,
            "corpus.length" => self.corpus_length = positive(key, v)?,
            "corpus.train" => self.corpus_fractions[0] = strictly_positive(key, v)?,
            "corpus.validation" => self.corpus_fractions[1] = strictly_positive(key, v)?,
            "corpus.test" => self.corpus_fractions[2] = strictly_positive(key, v)?,
            "teacher.d_model" => self.teacher.d_model = positive(key, v)?,
            "teacher.n_layers" => self.teacher.n_layers = positive(key, v)?,
            "teacher.n_heads" => self.teacher.n_heads = positive(key, v)?,
            "teacher.max_len" => self.teacher.max_len = positive(key, v)?,
            "student.d_model" => self.student.d_model = positive(key, v)?,
            "student.n_layers" => self.student.n_layers = positive(key, v)?,
            "student.n_heads" => self.student.n_heads = positive(key, v)?,
            "student.max_len" => self.student.max_len = positive(key, v)?,
            "teacher_train.epochs" => self.teacher_train.epochs = positive(key, v)?,
            "teacher_train.batch_size" => self.teacher_train.batch_size = positive(key, v)?,
            "teacher_train.learning_rate" => self.teacher_train.learning_rate = non_negative(key, v)?,
            "teacher_train.cond_dropout" => self.teacher_train.cond_dropout = unit(key, v)?,
            "teacher_train.clip_norm" => self.teacher_train.clip_norm = strictly_positive(key, v)?,
            "train.epochs" => self.train.epochs = positive(key, v)?,
            "train.batch_size" => self.train.batch_size = positive(key, v)?,
            "train.learning_rate" => self.train.learning_rate = non_negative(key, v)?,
            "train.ce_weight" => self.train.ce_weight = unit(key, v)?,
            "train.cond_dropout" => self.train.cond_dropout = unit(key, v)?,
            "train.clip_norm" => self.train.clip_norm = strictly_positive(key, v)?,
            "distill.variant" => {
                self.variant = v.parse().map_err(|e: tinykd::Error| anyhow::anyhow!("`{key}`: {e}"))?
            }
            "distill.gamma1" => self.gamma1 = unit(key, v)?,
            "distill.gamma2" => self.gamma2 = unit(key, v)?,
            "distill.lambda" => {
                let l = real(key, v)?;
                if !(l > 0.0 && l <= 1.0) {
                    bail!("`{key}`: {l} outside (0,1]");
                }
                self.lambda = l;
            }
            "distill.lambda_fix" => self.lambda_fix = unit(key, v)?,
            "distill.tau_step" => {
                self.tau_step = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v, "`auto` or a non-negative integer")?)
                }
            }
            "distill.t_begin" => self.distill_t_begin = strictly_positive(key, v)?,
            "distill.t_final" => self.distill_t_final = strictly_positive(key, v)?,
            "sample.max_new_tokens" => self.max_new_tokens = positive(key, v)?,
            "sample.top_k" => self.top_k = positive(key, v)?,
            "sample.cfg_scale" => self.cfg_scale = non_negative(key, v)?,
            "sample.t_begin" => self.sample_t_begin = strictly_positive(key, v)?,
            "sample.t_final" => self.sample_t_final = strictly_positive(key, v)?,
            "sample.n_sequences" => {
                self.n_sequences = positive(key, v)?;
                if self.n_sequences < 2 {
                    bail!("`{key}`: at least 2 sequences are needed for covariance statistics");
                }
            }
            "quant.plan" => {
                QuantPlan::by_name(v, Int8Mode::AffinePerTensor).map_err(|e| anyhow::anyhow!("`{key}`: {e}"))?;
                self.plan = v.into();
            }
            "quant.int8_mode" => {
                v.parse::<Int8Mode>().map_err(|e| anyhow::anyhow!("`{key}`: {e}"))?;
                self.int8_mode = v.into();
            }
            "paths.corpus" => self.corpus_path = path(v),
            "paths.teacher" => self.teacher_path = path(v),
            "paths.student" => self.student_path = path(v),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Cross-key checks, delegated to the library types.
    pub fn validate(&self) -> Result<()> {
        self.teacher.spec().map_err(|e| anyhow::anyhow!("`teacher.*`: {e}"))?;
        self.student.spec().map_err(|e| anyhow::anyhow!("`student.*`: {e}"))?;
        let sum: f64 = self.corpus_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            bail!("`corpus.train`/`corpus.validation`/`corpus.test`: fractions sum to {sum}, not 1");
        }
        if self.distill_t_begin < self.distill_t_final {
            bail!("`distill.t_begin`: {} must be >= distill.t_final {}", self.distill_t_begin, self.distill_t_final);
        }
        if self.sample_t_begin < self.sample_t_final {
            bail!("`sample.t_begin`: {} must be >= sample.t_final {}", self.sample_t_begin, self.sample_t_final);
        }
        for (name, dims) in [("teacher", &self.teacher), ("student", &self.student)] {
            if self.corpus_length > dims.max_len {
                bail!("`corpus.length`: {} exceeds {name}.max_len {}", self.corpus_length, dims.max_len);
            }
            if self.max_new_tokens > dims.max_len {
                bail!("`sample.max_new_tokens`: {} exceeds {name}.max_len {}", self.max_new_tokens, dims.max_len);
            }
        }
        if self.top_k > vocab::SIZE {
            bail!("`sample.top_k`: {} exceeds vocabulary size {}", self.top_k, vocab::SIZE);
        }
        self.distill_config()?;
        self.sample_config()?;
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let dims = |d: &ModelDims| [d.d_model.to_string(), d.n_layers.to_string(), d.n_heads.to_string(), d.max_len.to_string()];
        let [td, tl, th, tm] = dims(&self.teacher);
        let [sd, sl, sh, sm] = dims(&self.student);
        vec![
            ("seed", self.seed.to_string()),
            ("corpus.items", self.corpus_items.to_string()),
            ("corpus.length", self.corpus_length.to_string()),
            ("corpus.train", self.corpus_fractions[0].to_string()),
            ("corpus.validation", self.corpus_fractions[1].to_string()),
            ("corpus.test", self.corpus_fractions[2].to_string()),
            ("teacher.d_model", td),
            ("teacher.n_layers", tl),
            ("teacher.n_heads", th),
            ("teacher.max_len", tm),
            ("student.d_model", sd),
            ("student.n_layers", sl),
            ("student.n_heads", sh),
            ("student.max_len", sm),
            ("teacher_train.epochs", self.teacher_train.epochs.to_string()),
            ("teacher_train.batch_size", self.teacher_train.batch_size.to_string()),
            ("teacher_train.learning_rate", self.teacher_train.learning_rate.to_string()),
            ("teacher_train.cond_dropout", self.teacher_train.cond_dropout.to_string()),
            ("teacher_train.clip_norm", self.teacher_train.clip_norm.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.ce_weight", self.train.ce_weight.to_string()),
            ("train.cond_dropout", self.train.cond_dropout.to_string()),
            ("train.clip_norm", self.train.clip_norm.to_string()),
            ("distill.variant", self.variant.name().to_string()),
            ("distill.gamma1", self.gamma1.to_string()),
            ("distill.gamma2", self.gamma2.to_string()),
            ("distill.lambda", self.lambda.to_string()),
            ("distill.lambda_fix", self.lambda_fix.to_string()),
            ("distill.tau_step", self.tau_step.map_or("auto".into(), |t| t.to_string())),
            ("distill.t_begin", self.distill_t_begin.to_string()),
            ("distill.t_final", self.distill_t_final.to_string()),
            ("sample.max_new_tokens", self.max_new_tokens.to_string()),
            ("sample.top_k", self.top_k.to_string()),
            ("sample.cfg_scale", self.cfg_scale.to_string()),
            ("sample.t_begin", self.sample_t_begin.to_string()),
            ("sample.t_final", self.sample_t_final.to_string()),
            ("sample.n_sequences", self.n_sequences.to_string()),
            ("quant.plan", self.plan.clone()),
            ("quant.int8_mode", self.int8_mode.clone()),
            ("paths.corpus", show_path(&self.corpus_path)),
            ("paths.teacher", show_path(&self.teacher_path)),
            ("paths.student", show_path(&self.student_path)),
        ]
    }

    /// The resolved document; parses back to an identical config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
        }
        out
    }

    /// First eight hex digits of the SHA-256 of the resolved document.
    pub fn hash8(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let mut b = DistillConfig::builder(1)
            .variant(self.variant)
            .gamma1(self.gamma1)
            .gamma2(self.gamma2)
            .lambda(self.lambda)
            .lambda_fix(self.lambda_fix)
            .temperatures(self.distill_t_begin, self.distill_t_final);
        if let Some(t) = self.tau_step {
            b = b.tau_step(t);
        }
        b.build().map_err(|e| anyhow::anyhow!("`distill.*`: {e}"))
    }

    fn train_config(&self, s: &Schedule, distill: DistillConfig) -> TrainConfig {
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            seed: self.seed,
            distill,
            ce_weight: s.ce_weight,
            cond_dropout: s.cond_dropout,
            clip_norm: s.clip_norm,
        }
    }

    pub fn teacher_train_config(&self) -> Result<TrainConfig> {
        Ok(self.train_config(&self.teacher_train, self.distill_config()?))
    }

    pub fn student_train_config(&self) -> Result<TrainConfig> {
        Ok(self.train_config(&self.train, self.distill_config()?))
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        let temp = TemperatureSchedule::new(self.sample_t_begin, self.sample_t_final, self.max_new_tokens as u64)
            .map_err(|e| anyhow::anyhow!("`sample.t_begin`/`sample.t_final`: {e}"))?;
        Ok(SampleConfig {
            max_new_tokens: self.max_new_tokens,
            top_k: self.top_k,
            cfg_scale: self.cfg_scale,
            temp,
            rng_seed: self.seed,
        })
    }

    pub fn quant_plan(&self) -> Result<QuantPlan> {
        let mode: Int8Mode = self.int8_mode.parse().map_err(|e| anyhow::anyhow!("`quant.int8_mode`: {e}"))?;
        QuantPlan::by_name(&self.plan, mode).map_err(|e| anyhow::anyhow!("`quant.plan`: {e}"))
    }
}
