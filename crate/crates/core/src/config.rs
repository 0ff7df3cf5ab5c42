//! Plain-text run configuration: one `key = value` per line, `#` starts a comment.
//!
//! Required keys are `dataset`, `spc` and `loss`. Everything else falls back to
//! the desk-scale defaults of [`DistillConfig::desk`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate_toy_with, load_images, LabeledImageSet, Split, ToyOptions};
use crate::decoder::DecoderConfig;
use crate::distill::classifier::{ClassifierConfig, TrainConfig};
use crate::distill::{DistillConfig, LossKind};
use crate::entropy_model::EntropyNetConfig;
use crate::error::{Error, Result};

/// Where the original images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Toy {
        classes: usize,
        height: usize,
        width: usize,
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
    },
    /// Folders of per-class PNG subdirectories.
    Dir { train: PathBuf, test: Option<PathBuf> },
}

const REQUIRED: [&str; 3] = ["dataset", "spc", "loss"];

const KNOWN: &[&str] = &[
    "dataset",
    "classes",
    "height",
    "width",
    "train_per_class",
    "test_per_class",
    "noise",
    "train_dir",
    "test_dir",
    "spc",
    "scales",
    "context",
    "entropy_width",
    "entropy_depth",
    "decoder",
    "slice_size",
    "loss",
    "beta",
    "lambda_hi",
    "lambda_lo",
    "init_steps",
    "joint_steps",
    "init_lr",
    "joint_lr",
    "mse_budget",
    "real_per_class",
    "inner_steps",
    "inner_lr",
    "expert_steps",
    "expert_lr",
    "tm_student_steps",
    "tm_expert_steps",
    "classifier_blocks",
    "classifier_channels",
    "train_steps",
    "train_batch",
    "train_lr",
    "eval_trials",
    "seed",
    "out",
];

/// A parsed configuration file. Values stay raw until the dataset shape is known.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    entries: HashMap<String, (usize, String)>,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub eval_trials: usize,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, found `{body}`") })?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN.contains(&key) {
                return Err(Error::Config { line, msg: format!("unknown key `{key}`") });
            }
            if value.is_empty() {
                return Err(Error::Config { line, msg: format!("empty value for `{key}`") });
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (line, value.to_string())) {
                return Err(Error::Config { line, msg: format!("`{key}` already set on line {first}") });
            }
        }
        for key in REQUIRED {
            if !entries.contains_key(key) {
                return Err(Error::MissingKey(key.into()));
            }
        }
        let mut cfg = Self {
            entries,
            dataset: DatasetSpec::Toy { classes: 0, height: 0, width: 0, train_per_class: 0, test_per_class: 0, noise: 0.0 },
            seed: 0,
            out: None,
            eval_trials: 5,
            train: TrainConfig::default(),
        };
        cfg.dataset = match cfg.raw("dataset").unwrap() {
            (_, "toy") => DatasetSpec::Toy {
                classes: cfg.required("classes")?,
                height: cfg.get("height")?.unwrap_or(16),
                width: cfg.get("width")?.unwrap_or(16),
                train_per_class: cfg.get("train_per_class")?.unwrap_or(200),
                test_per_class: cfg.get("test_per_class")?.unwrap_or(100),
                noise: cfg.get("noise")?.unwrap_or(ToyOptions::default().noise),
            },
            (_, "dir") => DatasetSpec::Dir {
                train: cfg.required::<String>("train_dir")?.into(),
                test: cfg.get::<String>("test_dir")?.map(PathBuf::from),
            },
            (line, other) => return Err(Error::Config { line, msg: format!("dataset must be `toy` or `dir`, got `{other}`") }),
        };
        cfg.seed = cfg.get("seed")?.unwrap_or(0);
        cfg.out = cfg.get::<String>("out")?.map(PathBuf::from);
        cfg.eval_trials = cfg.get("eval_trials")?.unwrap_or(5);
        let d = TrainConfig::default();
        cfg.train = TrainConfig {
            steps: cfg.get("train_steps")?.unwrap_or(d.steps),
            batch_size: cfg.get("train_batch")?.unwrap_or(d.batch_size),
            lr: cfg.get("train_lr")?.unwrap_or(d.lr),
        };
        // catch bad values before any expensive work
        let spc: usize = cfg.required("spc")?;
        if spc == 0 {
            return Err(cfg.bad("spc", "must be at least 1"));
        }
        cfg.get::<LossKind>("loss")?;
        if let Some(name) = cfg.get::<String>("decoder")? {
            DecoderConfig::preset(&name, 1).map_err(|e| cfg.bad("decoder", &e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn bad(&self, key: &str, msg: &str) -> Error {
        let line = self.raw(key).map_or(0, |(l, _)| l);
        Error::Config { line, msg: format!("`{key}`: {msg}") }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config { line, msg: format!("cannot parse `{v}` for `{key}`") }),
        }
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::MissingKey(key.into()))
    }

    /// Training split, and the test split when one is configured.
    pub fn load_data(&self) -> Result<(LabeledImageSet, Option<LabeledImageSet>)> {
        match &self.dataset {
            DatasetSpec::Toy { classes, height, width, train_per_class, test_per_class, noise } => {
                let opts = ToyOptions { noise: *noise, ..ToyOptions::default() };
                let train = generate_toy_with(*classes, *train_per_class, *height, *width, self.seed, opts)?;
                let test = generate_toy_with(
                    *classes,
                    *test_per_class,
                    *height,
                    *width,
                    self.seed,
                    ToyOptions { split: Split::Test, ..opts },
                )?;
                Ok((train, Some(test)))
            }
            DatasetSpec::Dir { train, test } => {
                let tr = load_images(train)?;
                let te = match test {
                    Some(p) => {
                        let mut t = load_images(p)?;
                        t.split = Split::Test;
                        if (t.height, t.width, t.num_classes) != (tr.height, tr.width, tr.num_classes) {
                            return Err(self.bad("test_dir", "image size or class count differs from train_dir"));
                        }
                        Some(t)
                    }
                    None => None,
                };
                Ok((tr, te))
            }
        }
    }

    /// Distillation settings for a dataset of the given shape, defaults overridden by the file.
    pub fn distill_config(&self, num_classes: usize, height: usize, width: usize) -> Result<DistillConfig> {
        let spc = self.required("spc")?;
        let mut c = DistillConfig::desk(num_classes, spc, height, width)?;
        c.seed = self.seed;
        if let Some(l) = self.get("scales")? {
            c.scales = l;
        }
        let e = c.entropy;
        c.entropy = EntropyNetConfig::new(
            self.get("context")?.unwrap_or(e.context),
            self.get("entropy_width")?.unwrap_or(e.width),
            self.get("entropy_depth")?.unwrap_or(e.depth),
        )
        .map_err(|err| self.bad("entropy_depth", &err.to_string()))?;
        let name = self.get::<String>("decoder")?.unwrap_or_else(|| "v4-40".into());
        c.decoder = DecoderConfig::preset(&name, c.scales).map_err(|err| self.bad("decoder", &err.to_string()))?;
        c.slice_size = self.get("slice_size")?.unwrap_or(spc);
        let cl = c.classifier;
        c.classifier = ClassifierConfig::new(
            self.get("classifier_blocks")?.unwrap_or(cl.blocks),
            self.get("classifier_channels")?.unwrap_or(cl.channels),
            num_classes,
            height,
            width,
        )
        .map_err(|err| self.bad("classifier_blocks", &err.to_string()))?;
        c.loss = self.required("loss")?;
        macro_rules! override_fields {
            ($($f:ident),*) => {$(
                if let Some(v) = self.get(stringify!($f))? {
                    c.$f = v;
                }
            )*};
        }
        override_fields!(
            beta,
            lambda_hi,
            lambda_lo,
            init_steps,
            joint_steps,
            init_lr,
            joint_lr,
            mse_budget,
            real_per_class,
            inner_steps,
            inner_lr,
            expert_steps,
            expert_lr,
            tm_student_steps,
            tm_expert_steps
        );
        c.validate()?;
        Ok(c)
    }
}
