//! Experiment configuration: a TOML file merged over per-dataset defaults.
//!
//! Tables merge key by key, arrays (such as `di.sizes`) replace the default
//! wholesale. Unknown keys and out-of-range values are all collected before
//! anything runs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zskd_core::augment::OUTPUTS_PER_IMPRESSION;
use zskd_core::data::ResizeMode;
use zskd_core::distill::{DistillConfig, KdLoss};
use zskd_core::impressions::{ClassImpressionConfig, SynthesisConfig};
use zskd_core::prior::DEFAULT_BETAS;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resize {
    #[default]
    Pad,
    Bilinear,
}

impl From<Resize> for ResizeMode {
    fn from(r: Resize) -> Self {
        match r {
            Resize::Pad => ResizeMode::Pad,
            Resize::Bilinear => ResizeMode::Bilinear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorChoice {
    ClassSimilarity,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Zero-shot distillation on Data Impressions.
    Di,
    /// Zero-shot distillation on Class Impressions.
    Ci,
    /// Classical distillation on the same number of real training images.
    RealData,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Di => "DI",
            Method::Ci => "CI",
            Method::RealData => "real-data",
        }
    }
}

/// Seeded stand-in images instead of IDX files, for smoke runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub train: usize,
    pub test: usize,
}

/// Plain cross-entropy training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBlock {
    pub kind: PriorChoice,
    pub betas: Vec<f64>,
}

/// Crafting and distillation settings for one transfer-set size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiSize {
    /// Share of the training-set size, e.g. `0.01` for 600 MNIST impressions.
    pub fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub student_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiBlock {
    pub tau: f64,
    pub iterations: usize,
    pub sizes: Vec<DiSize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiSize {
    pub fraction: f64,
    pub lr: f64,
    pub student_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiBlock {
    pub max_iterations: usize,
    pub confidence: [f64; 2],
    pub sizes: Vec<CiSize>,
}

/// Zero-shot student training; the learning rate comes from the size tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZskdBlock {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub kd_loss: KdLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneBlock {
    /// Size of the DI set whose student is fine-tuned.
    pub fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBlock {
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    /// Directory holding the four IDX files.
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    pub resize: Resize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub teacher: TrainBlock,
    pub student_ce: TrainBlock,
    pub student_kd: KdBlock,
    pub prior: PriorBlock,
    pub di: DiBlock,
    pub ci: CiBlock,
    pub zskd: ZskdBlock,
    pub finetune: FinetuneBlock,
    pub sweep: SweepBlock,
}

/// Every problem found in a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} config problem(s):", self.0.len())?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

fn train_block(epochs: usize, lr: f64) -> TrainBlock {
    TrainBlock {
        epochs,
        batch_size: 512,
        lr,
        eval_every: 1,
    }
}

fn di(fraction: f64, lr: f64, batch_size: usize, student_lr: f64) -> DiSize {
    DiSize {
        fraction,
        lr,
        batch_size,
        student_lr,
    }
}

fn ci(fraction: f64, lr: f64, student_lr: f64) -> CiSize {
    CiSize { fraction, lr, student_lr }
}

impl ExperimentConfig {
    /// Published hyperparameters for `dataset`.
    pub fn defaults(dataset: DatasetId) -> Self {
        let (di_sizes, ci_sizes, finetune_fraction) = match dataset {
            DatasetId::Mnist => (
                vec![
                    di(0.01, 0.1, 10, 0.01),
                    di(0.05, 0.1, 10, 0.01),
                    di(0.10, 1.0, 100, 0.01),
                    di(0.20, 2.0, 100, 0.01),
                    di(0.40, 3.0, 100, 0.01),
                ],
                vec![
                    ci(0.01, 2.0, 0.01),
                    ci(0.05, 0.01, 0.01),
                    ci(0.10, 0.1, 0.01),
                    ci(0.20, 0.01, 0.01),
                    ci(0.40, 0.1, 0.001),
                ],
                0.40,
            ),
            DatasetId::FashionMnist => (
                vec![
                    di(0.01, 3.0, 10, 0.01),
                    di(0.05, 3.0, 10, 0.001),
                    di(0.10, 1.0, 100, 0.0001),
                    di(0.20, 1.0, 100, 0.01),
                    di(0.40, 1.0, 10, 0.01),
                    di(0.80, 3.0, 100, 0.01),
                ],
                vec![
                    ci(0.01, 0.01, 0.001),
                    ci(0.05, 0.1, 0.001),
                    ci(0.10, 2.0, 0.001),
                    ci(0.20, 1.0, 0.001),
                    ci(0.40, 0.01, 0.01),
                    ci(0.80, 0.5, 0.001),
                ],
                0.80,
            ),
        };
        let fractions = di_sizes.iter().map(|s| s.fraction).collect();
        ExperimentConfig {
            dataset,
            data_dir: PathBuf::from(format!("data/{}", dataset.as_str())),
            synthetic: None,
            resize: Resize::Pad,
            out_dir: PathBuf::from(format!("runs/{}", dataset.as_str())),
            seed: 0,
            teacher: train_block(200, 0.001),
            student_ce: train_block(200, 0.001),
            student_kd: KdBlock {
                epochs: 200,
                batch_size: 512,
                lr: 0.01,
                tau: 20.0,
                lambda: 0.3,
                eval_every: 1,
            },
            prior: PriorBlock {
                kind: PriorChoice::ClassSimilarity,
                betas: DEFAULT_BETAS.to_vec(),
            },
            di: DiBlock {
                tau: 20.0,
                iterations: 1500,
                sizes: di_sizes,
            },
            ci: CiBlock {
                max_iterations: 5000,
                confidence: [0.55, 0.70],
                sizes: ci_sizes,
            },
            zskd: ZskdBlock {
                tau: 20.0,
                batch_size: 512,
                epochs: 2000,
                eval_every: 50,
                kd_loss: KdLoss::CrossEntropy,
            },
            finetune: FinetuneBlock {
                fraction: finetune_fraction,
                lr: 0.001,
                batch_size: 512,
                epochs: 20,
                eval_every: 1,
            },
            sweep: SweepBlock {
                fractions,
                methods: vec![Method::Di, Method::Ci, Method::RealData],
            },
        }
    }

    /// Parses `text` over the defaults of its `dataset` (MNIST when absent).
    pub fn from_toml(text: &str) -> Result<Self, ConfigErrors> {
        let user: toml::Table = toml::from_str(text).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
        let dataset = match user.get("dataset") {
            None => DatasetId::Mnist,
            Some(v) => DatasetId::deserialize(v.clone())
                .map_err(|e| ConfigErrors(vec![format!("dataset: {e}")]))?,
        };
        let mut merged = toml::Table::try_from(Self::defaults(dataset)).expect("defaults serialise");
        merge(&mut merged, user);
        let mut unknown = Vec::new();
        let parsed: Result<Self, _> =
            serde_ignored::deserialize(toml::Value::Table(merged), |path| unknown.push(path.to_string()));
        let mut problems: Vec<String> = unknown.iter().map(|p| format!("unknown key `{p}`")).collect();
        match parsed {
            Ok(cfg) => {
                problems.extend(cfg.violations());
                if problems.is_empty() {
                    Ok(cfg)
                } else {
                    Err(ConfigErrors(problems))
                }
            }
            Err(e) => {
                problems.push(e.to_string());
                Err(ConfigErrors(problems))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(ConfigErrors(vec![format!(
            "cannot read {}: {e}",
            path.display()
        )])))?;
        Self::from_toml(&text).map_err(CliError::Config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Training-set size: 60000 for both datasets unless synthetic.
    pub fn train_size(&self) -> usize {
        self.synthetic.map_or(60_000, |s| s.train)
    }

    /// Transfer-set size for a fraction of the training set.
    pub fn count_for(&self, fraction: f64) -> usize {
        (fraction * self.train_size() as f64).round() as usize
    }

    pub fn di_size(&self, fraction: f64) -> Option<&DiSize> {
        self.di.sizes.iter().find(|s| same_fraction(s.fraction, fraction))
    }

    pub fn ci_size(&self, fraction: f64) -> Option<&CiSize> {
        self.ci.sizes.iter().find(|s| same_fraction(s.fraction, fraction))
    }

    pub fn synthesis(&self, size: &DiSize) -> SynthesisConfig {
        SynthesisConfig {
            tau: self.di.tau,
            lr: size.lr,
            iterations: self.di.iterations,
            batch_size: size.batch_size,
        }
    }

    pub fn class_impression(&self, size: &CiSize) -> ClassImpressionConfig {
        ClassImpressionConfig {
            lr: size.lr,
            max_iterations: self.ci.max_iterations,
            confidence: (self.ci.confidence[0], self.ci.confidence[1]),
        }
    }

    pub fn teacher_distill(&self) -> DistillConfig {
        plain(&self.teacher)
    }

    pub fn student_ce_distill(&self) -> DistillConfig {
        plain(&self.student_ce)
    }

    pub fn student_kd_distill(&self) -> DistillConfig {
        let b = &self.student_kd;
        DistillConfig {
            tau: b.tau,
            lambda: b.lambda,
            lr: b.lr,
            batch_size: b.batch_size,
            epochs: b.epochs,
            eval_every: b.eval_every,
            ..DistillConfig::default()
        }
    }

    pub fn zskd_distill(&self, student_lr: f64) -> DistillConfig {
        let b = &self.zskd;
        DistillConfig {
            tau: b.tau,
            lambda: 0.0,
            lr: student_lr,
            batch_size: b.batch_size,
            epochs: b.epochs,
            kd_loss: b.kd_loss,
            eval_every: b.eval_every,
            ..DistillConfig::default()
        }
    }

    pub fn finetune_distill(&self) -> DistillConfig {
        let b = &self.finetune;
        DistillConfig {
            tau: self.zskd.tau,
            lambda: 0.0,
            lr: b.lr,
            batch_size: b.batch_size,
            epochs: b.epochs,
            kd_loss: self.zskd.kd_loss,
            eval_every: b.eval_every,
            ..DistillConfig::default()
        }
    }

    /// Every violated constraint, prefixed with its key.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut add = |key: &str, problems: Vec<String>| v.extend(problems.into_iter().map(|p| format!("{key}: {p}")));
        add("teacher", self.teacher_distill().violations());
        add("student_ce", self.student_ce_distill().violations());
        add("student_kd", self.student_kd_distill().violations());
        add("zskd", self.zskd_distill(1.0).violations());
        // tau and kd_loss come from [zskd] and are reported there.
        let finetune = DistillConfig {
            tau: 1.0,
            ..self.finetune_distill()
        };
        add("finetune", finetune.violations());
        if let Some(s) = self.synthetic {
            if s.train < 10 || s.test < 10 {
                v.push(format!("synthetic: need at least 10 train and test images, got {s:?}"));
            }
        }
        if self.prior.betas.is_empty() || self.prior.betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            v.push(format!("prior.betas must be non-empty and positive, got {:?}", self.prior.betas));
        }
        if self.di.iterations == 0 {
            v.push("di.iterations must be >= 1".into());
        }
        if !(self.di.tau > 0.0 && self.di.tau.is_finite()) {
            v.push(format!("di.tau must be > 0, got {}", self.di.tau));
        }
        let k = zskd_core::data::NUM_CLASSES;
        for (i, s) in self.di.sizes.iter().enumerate() {
            let key = format!("di.sizes[{i}]");
            v.extend(fraction_problem(&key, s.fraction));
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                v.push(format!("{key}.lr must be > 0, got {}", s.lr));
            }
            if !(s.student_lr > 0.0 && s.student_lr.is_finite()) {
                v.push(format!("{key}.student_lr must be > 0, got {}", s.student_lr));
            }
            if s.batch_size == 0 {
                v.push(format!("{key}.batch_size must be >= 1"));
            }
            let n = self.count_for(s.fraction);
            if n < k * self.prior.betas.len().max(1) {
                v.push(format!("{key}: {n} impressions cannot cover {k} classes x {} betas", self.prior.betas.len()));
            }
        }
        let [lo, hi] = self.ci.confidence;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            v.push(format!("ci.confidence must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"));
        }
        if self.ci.max_iterations == 0 {
            v.push("ci.max_iterations must be >= 1".into());
        }
        for (i, s) in self.ci.sizes.iter().enumerate() {
            let key = format!("ci.sizes[{i}]");
            v.extend(fraction_problem(&key, s.fraction));
            if !(s.lr > 0.0 && s.lr.is_finite()) || !(s.student_lr > 0.0 && s.student_lr.is_finite()) {
                v.push(format!("{key}: lr and student_lr must be > 0"));
            }
            if self.count_for(s.fraction) < k {
                v.push(format!("{key}: fewer impressions than classes"));
            }
        }
        if self.di_size(self.finetune.fraction).is_none() {
            v.push(format!("finetune.fraction {} has no di.sizes entry", self.finetune.fraction));
        }
        let augmented = self.count_for(self.finetune.fraction) * OUTPUTS_PER_IMPRESSION;
        if augmented == 0 {
            v.push("finetune: augmented set would be empty".into());
        }
        for &f in &self.sweep.fractions {
            for &m in &self.sweep.methods {
                let missing = match m {
                    Method::Di => self.di_size(f).is_none(),
                    Method::Ci => self.ci_size(f).is_none(),
                    Method::RealData => fraction_problem("sweep", f).is_some(),
                };
                if missing {
                    v.push(format!("sweep: no {} settings for fraction {f}", m.as_str()));
                }
            }
        }
        v
    }
}

fn plain(b: &TrainBlock) -> DistillConfig {
    DistillConfig {
        lambda: 0.0,
        lr: b.lr,
        batch_size: b.batch_size,
        epochs: b.epochs,
        eval_every: b.eval_every,
        ..DistillConfig::default()
    }
}

fn fraction_problem(key: &str, f: f64) -> Option<String> {
    (!(f > 0.0 && f <= 1.0)).then(|| format!("{key}.fraction must lie in (0, 1], got {f}"))
}

pub fn same_fraction(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// `0.01` becomes `1pct`, `0.005` becomes `0.5pct`.
pub fn fraction_label(f: f64) -> String {
    let pct = (f * 1e6).round() / 1e4;
    format!("{pct}pct")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
