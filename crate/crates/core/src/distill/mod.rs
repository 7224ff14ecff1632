//! Training loops: cross-entropy training of teacher and student, classical
//! distillation on labelled data, zero-shot distillation on a transfer set,
//! the augmented fine-tune, and evaluation.
//!
//! The distillation term is the cross-entropy between the teacher's and the
//! student's softmax at temperature `tau` (squared error behind
//! [`KdLoss::SquaredError`]), averaged over the batch, with no `tau^2`
//! factor. Soft labels always come from a fresh teacher forward pass.
//! Accuracy is always measured at `tau = 1`.

mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentedView;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::impressions::TransferSet;
use crate::models::Network;
use crate::tensor::{adam_step, AdamState, Graph, Reduction, Tensor, Var};

pub use report::{EpochRecord, TrainReport};

/// Temperature used for every accuracy measurement.
pub const EVAL_TAU: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdLoss {
    #[default]
    CrossEntropy,
    SquaredError,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: AdamState::DEFAULT_BETA1,
            beta2: AdamState::DEFAULT_BETA2,
            epsilon: AdamState::DEFAULT_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Softmax temperature for the distillation term.
    pub tau: f64,
    /// Weight of the hard-label cross-entropy in classical distillation.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub kd_loss: KdLoss,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate on the test set every this many epochs (and after the last).
    /// 0 evaluates only after the last epoch.
    #[serde(default)]
    pub eval_every: usize,
    /// Accept a transfer set crafted from a different teacher.
    #[serde(default)]
    pub allow_foreign_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 20.0,
            lambda: 0.3,
            lr: 0.001,
            batch_size: 512,
            epochs: 200,
            kd_loss: KdLoss::CrossEntropy,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 1,
            allow_foreign_teacher: false,
        }
    }
}

impl DistillConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            v.push(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            v.push("epochs must be >= 1".into());
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon.is_nan() || a.epsilon <= 0.0 {
            v.push(format!("adam settings out of range: {a:?}"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().as_slice() {
            [] => Ok(()),
            v => Err(Error::Parameter(v.join("; "))),
        }
    }
}

/// Images addressable by index, as a training source.
pub trait ImageSource {
    fn len(&self) -> usize;

    /// `[B, H, W, C]` for the given indices.
    fn gather(&self, indices: &[usize]) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.gather_rows(indices)
    }
}

impl ImageSource for TransferSet {
    fn len(&self) -> usize {
        TransferSet::len(self)
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        TransferSet::gather(self, indices)
    }
}

impl ImageSource for AugmentedView<'_> {
    fn len(&self) -> usize {
        AugmentedView::len(self)
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let images = indices.iter().map(|&i| self.image(i)).collect::<Result<Vec<_>>>()?;
        Tensor::stack(&images.iter().collect::<Vec<_>>())
    }
}

/// Several sources indexed back to back.
pub struct Concat<'a> {
    parts: Vec<&'a dyn ImageSource>,
}

impl<'a> Concat<'a> {
    pub fn new(parts: Vec<&'a dyn ImageSource>) -> Self {
        Self { parts }
    }
}

impl ImageSource for Concat<'_> {
    fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum()
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut rest = i;
            let part = self
                .parts
                .iter()
                .find(|p| {
                    if rest < p.len() {
                        true
                    } else {
                        rest -= p.len();
                        false
                    }
                })
                .ok_or_else(|| Error::Dimension(format!("index {i} out of range for {}", self.len())))?;
            rows.push(part.gather(&[rest])?);
        }
        let rows: Vec<Tensor> = rows
            .into_iter()
            .map(|t| {
                let shape = t.shape()[1..].to_vec();
                t.reshape(shape)
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&rows.iter().collect::<Vec<_>>())
    }
}

/// What a training step minimises.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Mean cross-entropy against one-hot labels at `tau = 1`.
    Hard,
    /// `L_KD(tau) + lambda * CE(tau = 1, labels)` on labelled data.
    Classical { teacher: &'a Network },
    /// `L_KD(tau)` only, with no labels.
    ZeroShot { teacher: &'a Network },
}

impl Objective<'_> {
    fn teacher(&self) -> Option<&Network> {
        match self {
            Objective::Hard => None,
            Objective::Classical { teacher } | Objective::ZeroShot { teacher } => Some(teacher),
        }
    }
}

fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Dimension(format!("label {l} out of range for {k} classes")));
        }
        data[i * k + l] = 1.0;
    }
    Tensor::new([labels.len(), k], data)
}

/// Records the distillation term for `student_logits` against the teacher's
/// tempered softmax `soft`.
pub fn kd_term(g: &mut Graph, student_logits: Var, soft: &Tensor, tau: f64, kind: KdLoss) -> Result<Var> {
    let p = g.softmax_t(student_logits, tau)?;
    match kind {
        KdLoss::CrossEntropy => g.cross_entropy(soft, p, Reduction::Mean),
        KdLoss::SquaredError => g.squared_error(soft, p, Reduction::Mean),
    }
}

/// Records the loss of one batch on `g`. `labels` is required by
/// [`Objective::Hard`] and [`Objective::Classical`].
pub fn record_batch_loss(
    g: &mut Graph,
    student: &Network,
    params: &[Var],
    images: &Tensor,
    labels: Option<&[usize]>,
    objective: Objective<'_>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let k = student.num_classes();
    let x = g.constant(images.clone());
    let logits = student.logits_on(g, params, x)?;
    let need_labels = || {
        labels.ok_or_else(|| Error::Parameter("this objective needs labels".into()))
    };
    let soft = |teacher: &Network| -> Result<Tensor> {
        if teacher.num_classes() != k {
            return Err(Error::Dimension(format!(
                "teacher has {} classes, student {k}",
                teacher.num_classes()
            )));
        }
        Ok(teacher.forward(images, cfg.tau)?.1)
    };
    match objective {
        Objective::Hard => {
            let y = one_hot(need_labels()?, k)?;
            let p = g.softmax_t(logits, 1.0)?;
            g.cross_entropy(&y, p, Reduction::Mean)
        }
        Objective::Classical { teacher } => {
            let y = one_hot(need_labels()?, k)?;
            let kd = kd_term(g, logits, &soft(teacher)?, cfg.tau, cfg.kd_loss)?;
            let p1 = g.softmax_t(logits, 1.0)?;
            let ce = g.cross_entropy(&y, p1, Reduction::Mean)?;
            let weighted = g.scale(ce, cfg.lambda)?;
            g.add(kd, weighted)
        }
        Objective::ZeroShot { teacher } => kd_term(g, logits, &soft(teacher)?, cfg.tau, cfg.kd_loss),
    }
}

/// Loss value of one batch under `objective`, through the same code path as
/// training.
pub fn batch_loss(
    student: &Network,
    images: &Tensor,
    labels: Option<&[usize]>,
    objective: Objective<'_>,
    cfg: &DistillConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let params = student.bind(&mut g, false);
    let loss = record_batch_loss(&mut g, student, &params, images, labels, objective, cfg)?;
    g.value(loss).item()
}

/// Top-1 accuracy in percent at `tau = 1`.
pub fn evaluate(net: &Network, test: &Dataset) -> Result<f64> {
    evaluate_on(net, test, &test.labels)
}

/// Top-1 accuracy in percent of `net` on any labelled image source.
pub fn evaluate_on(net: &Network, source: &dyn ImageSource, labels: &[usize]) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty test set".into()));
    }
    if labels.len() != source.len() {
        return Err(Error::Dimension(format!("{} labels for {} images", labels.len(), source.len())));
    }
    let predictions = predict(net, source)?;
    Ok(accuracy(&predictions, labels))
}

/// Argmax class per test image at `tau = 1`.
pub fn predict(net: &Network, source: &dyn ImageSource) -> Result<Vec<usize>> {
    let n = source.len();
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(500) {
        let (_, probs) = net.forward(&source.gather(chunk)?, EVAL_TAU)?;
        out.extend(probs.argmax_rows());
    }
    Ok(out)
}

/// Percentage of positions where `predicted` equals `labels`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Optional evaluation data and a per-epoch callback (for checkpoints and
/// progress output).
#[derive(Default)]
pub struct TrainContext<'a> {
    pub test: Option<&'a Dataset>,
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord, &Network) -> Result<()> + 'a>>,
}

impl<'a> TrainContext<'a> {
    pub fn with_test(test: &'a Dataset) -> Self {
        Self {
            test: Some(test),
            on_epoch: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub network: Network,
    /// Parameters at the best evaluated epoch, when a test set was given.
    pub best: Option<Network>,
    pub report: TrainReport,
}

fn train(
    mut net: Network,
    source: &dyn ImageSource,
    labels: Option<&[usize]>,
    objective: Objective<'_>,
    cfg: &DistillConfig,
    name: &str,
    mut ctx: TrainContext<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if let Some(l) = labels {
        if l.len() != source.len() {
            return Err(Error::Dimension(format!("{} labels for {} images", l.len(), source.len())));
        }
    }
    let teacher_hash = objective.teacher().map(Network::fingerprint);
    let started = Instant::now();
    let a = cfg.adam;
    let mut states: Vec<AdamState> = net
        .params()
        .iter()
        .map(|p| AdamState::with_hyperparameters(p.tensor.len(), a.beta1, a.beta2, a.epsilon))
        .collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;
    let mut final_accuracy = None;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (b, batch) in batches(source.len(), cfg.batch_size, cfg.seed, epoch as u64)?
            .iter()
            .enumerate()
        {
            let images = source.gather(batch)?;
            let batch_labels: Option<Vec<usize>> = labels.map(|l| batch.iter().map(|&i| l[i]).collect());
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let diverged = |loss: f64| Error::TrainingDivergence {
                epoch: epoch + 1,
                batch: b,
                loss,
            };
            let loss = record_batch_loss(&mut g, &net, &params, &images, batch_labels.as_deref(), objective, cfg)
                .map_err(|e| if e.is_divergence() { diverged(f64::NAN) } else { e })?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(diverged(value));
            }
            total += value * batch.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .map(|&v| g.take_grad(v).expect("parameters require grad"))
                .collect();
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(diverged(value));
            }
            for ((p, grad), state) in net.params_mut().iter_mut().zip(&grads).zip(&mut states) {
                adam_step(p.tensor.data_mut(), grad, state, cfg.lr)?;
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let test_acc = match ctx.test {
            Some(test) if due || last => Some(evaluate(&net, test)?),
            _ => None,
        };
        if let Some(acc) = test_acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch + 1, net.clone()));
            }
            if last {
                final_accuracy = Some(acc);
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / source.len() as f64,
            test_acc,
        };
        log::info!(
            "{name} epoch {}/{}: loss {:.6}{}",
            record.epoch,
            cfg.epochs,
            record.loss,
            test_acc.map(|a| format!(", test acc {a:.2}%")).unwrap_or_default()
        );
        if let Some(cb) = ctx.on_epoch.as_mut() {
            cb(&record, &net)?;
        }
        records.push(record);
    }
    if let (Some(hash), Some(t)) = (teacher_hash, objective.teacher()) {
        if t.fingerprint() != hash {
            return Err(Error::State("teacher parameters changed during training".into()));
        }
    }
    let (best_accuracy, best_epoch, best_net) = match best {
        Some((a, e, n)) => (Some(a), Some(e), Some(n)),
        None => (None, None, None),
    };
    let report = TrainReport {
        model: net.name().to_string(),
        objective: name.to_string(),
        config: cfg.clone(),
        train_examples: source.len(),
        epochs: records,
        final_accuracy,
        best_accuracy,
        best_epoch,
        final_fingerprint: net.fingerprint(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        network: net,
        best: best_net,
        report,
    })
}

/// Cross-entropy training on labelled data.
pub fn train_teacher(net: Network, train_data: &Dataset, cfg: &DistillConfig, ctx: TrainContext<'_>) -> Result<TrainOutcome> {
    train(net, train_data, Some(&train_data.labels), Objective::Hard, cfg, "teacher-ce", ctx)
}

/// Cross-entropy training of the student on labelled data.
pub fn train_student_ce(net: Network, train_data: &Dataset, cfg: &DistillConfig, ctx: TrainContext<'_>) -> Result<TrainOutcome> {
    train(net, train_data, Some(&train_data.labels), Objective::Hard, cfg, "student-ce", ctx)
}

/// Classical distillation: soft teacher targets at `tau` plus `lambda` times
/// hard-label cross-entropy at `tau = 1`.
pub fn train_student_kd(
    student: Network,
    teacher: &Network,
    train_data: &Dataset,
    cfg: &DistillConfig,
    ctx: TrainContext<'_>,
) -> Result<TrainOutcome> {
    train(
        student,
        train_data,
        Some(&train_data.labels),
        Objective::Classical { teacher },
        cfg,
        "student-kd",
        ctx,
    )
}

fn check_provenance(set: &TransferSet, teacher: &Network, cfg: &DistillConfig) -> Result<()> {
    let hash = teacher.fingerprint();
    if set.provenance.teacher_hash != hash && !cfg.allow_foreign_teacher {
        return Err(Error::Provenance(format!(
            "transfer set was crafted from teacher {}, distilling from {hash}",
            set.provenance.teacher_hash
        )));
    }
    Ok(())
}

/// Zero-shot distillation on a transfer set alone. Stored targets are not
/// used; soft labels come from the teacher on every batch.
pub fn zskd_distill(
    student: Network,
    teacher: &Network,
    transfer: &TransferSet,
    cfg: &DistillConfig,
    ctx: TrainContext<'_>,
) -> Result<TrainOutcome> {
    if transfer.is_empty() {
        return Err(Error::Parameter("transfer set is empty".into()));
    }
    check_provenance(transfer, teacher, cfg)?;
    train(student, transfer, None, Objective::ZeroShot { teacher }, cfg, "zskd", ctx)
}

/// Continues zero-shot distillation on the original impressions together
/// with their augmentations, typically at a reduced learning rate.
pub fn finetune_augmented(
    student: Network,
    teacher: &Network,
    transfer: &TransferSet,
    augmented: &dyn ImageSource,
    cfg: &DistillConfig,
    ctx: TrainContext<'_>,
) -> Result<TrainOutcome> {
    if augmented.is_empty() {
        return Err(Error::Parameter("augmented set is empty; fine-tuning would only repeat the first phase".into()));
    }
    if transfer.is_empty() {
        return Err(Error::Parameter("transfer set is empty".into()));
    }
    check_provenance(transfer, teacher, cfg)?;
    let mixed = Concat::new(vec![transfer as &dyn ImageSource, augmented]);
    train(student, &mixed, None, Objective::ZeroShot { teacher }, cfg, "finetune", ctx)
}
