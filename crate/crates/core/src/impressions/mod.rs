//! Data Impressions and Class Impressions: images optimised in input space
//! against a frozen teacher.
//!
//! A Data Impression starts as uniform noise in `[0, 1]` and is moved by Adam
//! until `softmax(teacher(x) / tau)` matches a Dirichlet-sampled target. Images
//! in a batch are independent; their losses are summed so each image sees
//! only its own gradient. Pixels are clamped to `[0, 1]` after every step.

mod pgm;
mod store;

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::Network;
use crate::prior::{concentration, dirichlet_sample, PriorKind, SimilarityMatrix};
use crate::rng::{derive_seed, rng_from_seed, ZskdRng};
use crate::tensor::{adam_step, ops, AdamState, Graph, Reduction, Tensor};

pub use pgm::{export_impression_images, read_pgm, write_pgm};
pub use store::{load_transfer_set, save_transfer_set, TRANSFER_MAGIC, TRANSFER_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImpressionKind {
    Data,
    Class,
    Augmented,
}

impl ImpressionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImpressionKind::Data => "di",
            ImpressionKind::Class => "ci",
            ImpressionKind::Augmented => "aug",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataImpression {
    /// `[H, W, C]` in `[0, 1]`.
    pub image: Tensor,
    /// The sampled softmax vector (one-hot for class impressions).
    pub target: Vec<f64>,
    /// Class whose concentration row generated `target`.
    pub class_index: usize,
    /// Scaling factor used for the target; 0 for class impressions.
    pub beta: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    /// Seed of the job that produced this impression.
    pub seed: u64,
}

/// Everything needed to decide whether two transfer sets were produced the
/// same way.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub kind: ImpressionKind,
    pub teacher_hash: String,
    pub prior: PriorKind,
    pub betas: Vec<f64>,
    pub tau: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Requested transfer-set size.
    pub n: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    /// Confidence range for class impressions; `(0, 0)` otherwise.
    pub confidence: (f64, f64),
}

impl Provenance {
    /// Describes the first field that differs from `other`.
    pub fn mismatch(&self, other: &Provenance) -> Option<String> {
        if self.teacher_hash != other.teacher_hash {
            return Some(format!(
                "teacher hash {} does not match {}",
                other.teacher_hash, self.teacher_hash
            ));
        }
        (self != other).then(|| format!("stored provenance {other:?} differs from requested {self:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferSet {
    pub provenance: Provenance,
    pub impressions: Vec<DataImpression>,
}

impl TransferSet {
    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    /// Impressions per `(class, beta)` pair, keyed by class then by the index
    /// of beta in the provenance schedule.
    pub fn pair_counts(&self) -> Vec<Vec<usize>> {
        let p = &self.provenance;
        let nb = p.betas.len().max(1);
        let mut counts = vec![vec![0; nb]; p.num_classes];
        for imp in &self.impressions {
            let b = p.betas.iter().position(|&b| b == imp.beta).unwrap_or(0);
            counts[imp.class_index][b] += 1;
        }
        counts
    }

    /// SHA-256 of the encoded container.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(store::encode(self)))
    }

    /// Images `[N, H, W, C]` for the given indices.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let [h, w, c] = self.provenance.image_shape;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            let imp = self.impressions.get(i).ok_or_else(|| {
                Error::Dimension(format!("index {i} out of range for {} impressions", self.len()))
            })?;
            data.extend_from_slice(imp.image.data());
        }
        Tensor::new([indices.len(), h, w, c], data)
    }
}

/// Input-space optimisation settings for one batch of Data Impressions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub tau: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CraftedBatch {
    /// `[B, H, W, C]` in `[0, 1]`.
    pub images: Tensor,
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
}

fn clamp_unit(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn row_losses(teacher: &Network, images: &Tensor, targets: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let (_, probs) = teacher.forward(images, tau)?;
    ops::cross_entropy_rows(targets, &probs)
}

/// Noise images `[count, H, W, C]` drawn uniformly from `[0, 1)`.
pub fn noise_images(count: usize, shape: [usize; 3], rng: &mut ZskdRng) -> Tensor {
    let n = count * shape.iter().product::<usize>();
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::new([count, shape[0], shape[1], shape[2]], data).expect("shape matches length")
}

/// One Adam step on `images` against `targets`. Returns the summed loss
/// before the step and the per-row losses.
fn synthesis_step(
    teacher: &Network,
    images: &mut Tensor,
    targets: &Tensor,
    tau: f64,
    lr: f64,
    state: &mut AdamState,
    step: usize,
) -> Result<Vec<f64>> {
    let diverged = |loss: f64| Error::SynthesisDivergence { step, loss };
    let mut g = Graph::new();
    let params = teacher.bind(&mut g, false);
    let x = g.param(images.clone());
    let logits = teacher
        .logits_on(&mut g, &params, x)
        .map_err(|e| if e.is_divergence() { diverged(f64::NAN) } else { e })?;
    let probs = g.softmax_t(logits, tau)?;
    let per_row = ops::cross_entropy_rows(targets, g.value(probs))?;
    let loss = g.cross_entropy(targets, probs, Reduction::Sum)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(diverged(value));
    }
    g.backward(loss)?;
    let grad = g.take_grad(x).expect("input requires grad");
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(diverged(value));
    }
    adam_step(images.data_mut(), &grad, state, lr)?;
    clamp_unit(images.data_mut());
    Ok(per_row)
}

/// Optimises a batch of images so the teacher's tempered softmax matches
/// `targets` (`[B, K]`), starting from `init` (`[B, H, W, C]`).
pub fn craft_batch(
    teacher: &Network,
    targets: &Tensor,
    init: Tensor,
    cfg: &SynthesisConfig,
) -> Result<CraftedBatch> {
    cfg.validate()?;
    let k = teacher.num_classes();
    let b = init.shape().first().copied().unwrap_or(0);
    if targets.shape() != [b, k] {
        return Err(Error::Dimension(format!(
            "targets {:?} do not match {b} images and {k} classes",
            targets.shape()
        )));
    }
    let mut images = init;
    clamp_unit(images.data_mut());
    let mut state = AdamState::new(images.len());
    let mut initial_loss = Vec::new();
    for step in 0..cfg.iterations {
        let losses = synthesis_step(teacher, &mut images, targets, cfg.tau, cfg.lr, &mut state, step)?;
        if step == 0 {
            initial_loss = losses;
        }
    }
    let final_loss = row_losses(teacher, &images, targets, cfg.tau)?;
    if let Some(bad) = final_loss.iter().find(|v| !v.is_finite()) {
        return Err(Error::SynthesisDivergence {
            step: cfg.iterations,
            loss: *bad,
        });
    }
    Ok(CraftedBatch {
        images,
        initial_loss,
        final_loss,
    })
}

/// Crafts a single impression from seeded noise.
pub fn craft_impression(
    teacher: &Network,
    target: &Tensor,
    class_index: usize,
    beta: f64,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<DataImpression> {
    let k = teacher.num_classes();
    if target.len() != k {
        return Err(Error::Dimension(format!("target has {} entries, teacher {k} classes", target.len())));
    }
    let mut rng = rng_from_seed(seed);
    let init = noise_images(1, teacher.input_shape(), &mut rng);
    let targets = target.clone().reshape([1, k])?;
    let out = craft_batch(teacher, &targets, init, cfg)?;
    Ok(DataImpression {
        image: out.images.reshape(teacher.input_shape().to_vec())?,
        target: target.data().to_vec(),
        class_index,
        beta,
        initial_loss: out.initial_loss[0],
        final_loss: out.final_loss[0],
        iterations: cfg.iterations,
        seed,
    })
}

/// One unit of generation work: `count` impressions of one class (and, for
/// Data Impressions, one beta) produced from a single derived seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub class_index: usize,
    pub beta_index: usize,
    pub beta: f64,
    pub batch_index: usize,
    pub count: usize,
    pub seed: u64,
}

/// The Data Impression schedule: `N / (K * B)` impressions per `(class, beta)`
/// pair, cut into batches of `batch_size`.
pub fn di_schedule(n: usize, k: usize, betas: &[f64], batch_size: usize, seed: u64) -> Result<Vec<Job>> {
    if betas.is_empty() {
        return Err(Error::Parameter("at least one beta is required".into()));
    }
    if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b.is_finite())) {
        return Err(Error::Parameter(format!("beta must be positive, got {b}")));
    }
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    if n < k * betas.len() {
        return Err(Error::Parameter(format!(
            "N = {n} is smaller than K x B = {}",
            k * betas.len()
        )));
    }
    let per_pair = n / (k * betas.len());
    let mut jobs = Vec::new();
    for class_index in 0..k {
        for (beta_index, &beta) in betas.iter().enumerate() {
            for (batch_index, start) in (0..per_pair).step_by(batch_size).enumerate() {
                jobs.push(Job {
                    class_index,
                    beta_index,
                    beta,
                    batch_index,
                    count: batch_size.min(per_pair - start),
                    seed: derive_seed(seed, &[class_index as u64, beta_index as u64, batch_index as u64]),
                });
            }
        }
    }
    Ok(jobs)
}

/// Requested Data Impression transfer set.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSpec {
    pub n: usize,
    pub betas: Vec<f64>,
    pub synthesis: SynthesisConfig,
    pub seed: u64,
}

fn run_di_job(teacher: &Network, prior: &SimilarityMatrix, cfg: &SynthesisConfig, job: &Job) -> Result<Vec<DataImpression>> {
    let k = teacher.num_classes();
    let alpha = concentration(prior, job.class_index, job.beta)?;
    let mut rng = rng_from_seed(job.seed);
    let mut targets = Vec::with_capacity(job.count * k);
    for _ in 0..job.count {
        targets.extend(dirichlet_sample(&alpha, &mut rng).into_data());
    }
    let targets = Tensor::new([job.count, k], targets)?;
    let init = noise_images(job.count, teacher.input_shape(), &mut rng);
    let out = craft_batch(teacher, &targets, init, cfg)?;
    let per = out.images.len() / job.count;
    let shape = teacher.input_shape().to_vec();
    (0..job.count)
        .map(|i| {
            Ok(DataImpression {
                image: Tensor::new(shape.clone(), out.images.data()[i * per..(i + 1) * per].to_vec())?,
                target: targets.data()[i * k..(i + 1) * k].to_vec(),
                class_index: job.class_index,
                beta: job.beta,
                initial_loss: out.initial_loss[i],
                final_loss: out.final_loss[i],
                iterations: cfg.iterations,
                seed: job.seed,
            })
        })
        .collect()
}

/// Crafts a Data Impression transfer set.
///
/// With `store` set, finished batches are appended to that file as they
/// complete, and an existing file with matching provenance is resumed from its
/// last complete batch. Each batch draws from its own derived seed, so a
/// resumed run produces the same set as an uninterrupted one.
pub fn generate_transfer_set(
    teacher: &Network,
    prior: &SimilarityMatrix,
    spec: &TransferSpec,
    store: Option<&Path>,
) -> Result<TransferSet> {
    spec.synthesis.validate()?;
    if prior.k() != teacher.num_classes() {
        return Err(Error::Dimension(format!(
            "prior has {} classes, teacher {}",
            prior.k(),
            teacher.num_classes()
        )));
    }
    let jobs = di_schedule(
        spec.n,
        teacher.num_classes(),
        &spec.betas,
        spec.synthesis.batch_size,
        spec.seed,
    )?;
    let provenance = Provenance {
        kind: ImpressionKind::Data,
        teacher_hash: teacher.fingerprint(),
        prior: prior.kind(),
        betas: spec.betas.clone(),
        tau: spec.synthesis.tau,
        lr: spec.synthesis.lr,
        iterations: spec.synthesis.iterations,
        batch_size: spec.synthesis.batch_size,
        n: spec.n,
        seed: spec.seed,
        num_classes: teacher.num_classes(),
        image_shape: teacher.input_shape(),
        confidence: (0.0, 0.0),
    };
    store::run_jobs(provenance, &jobs, store, |job| {
        run_di_job(teacher, prior, &spec.synthesis, job)
    })
}

/// Class Impression settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassImpressionConfig {
    pub lr: f64,
    pub max_iterations: usize,
    pub confidence: (f64, f64),
}

impl Default for ClassImpressionConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            max_iterations: 5000,
            confidence: (0.55, 0.70),
        }
    }
}

impl ClassImpressionConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.confidence;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Parameter(format!("confidence range ({lo}, {hi}) is not inside (0, 1)")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("iteration cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Stopping threshold drawn uniformly from the confidence range.
    pub fn sample_threshold(&self, rng: &mut ZskdRng) -> f64 {
        let (lo, hi) = self.confidence;
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Optimises seeded noise until the teacher's class-`k` probability at
/// `tau = 1` reaches a threshold drawn from the confidence range.
pub fn craft_class_impression(
    teacher: &Network,
    k: usize,
    cfg: &ClassImpressionConfig,
    seed: u64,
) -> Result<DataImpression> {
    cfg.validate()?;
    let classes = teacher.num_classes();
    if k >= classes {
        return Err(Error::Parameter(format!("class {k} out of range for K = {classes}")));
    }
    let mut rng = rng_from_seed(seed);
    let threshold = cfg.sample_threshold(&mut rng);
    let mut images = noise_images(1, teacher.input_shape(), &mut rng);
    let mut target = vec![0.0; classes];
    target[k] = 1.0;
    let targets = Tensor::new([1, classes], target.clone())?;
    let mut state = AdamState::new(images.len());
    let confidence = |images: &Tensor| -> Result<f64> {
        let (_, p) = teacher.forward(images, 1.0)?;
        Ok(p.data()[k])
    };
    let mut initial_loss = f64::NAN;
    let mut step = 0;
    loop {
        let conf = confidence(&images)?;
        if step == 0 {
            initial_loss = -(conf + crate::tensor::LOG_EPSILON).ln();
        }
        if conf >= threshold {
            return Ok(DataImpression {
                image: images.reshape(teacher.input_shape().to_vec())?,
                target,
                class_index: k,
                beta: 0.0,
                initial_loss,
                final_loss: -(conf + crate::tensor::LOG_EPSILON).ln(),
                iterations: step,
                seed,
            });
        }
        if step == cfg.max_iterations {
            return Err(Error::NonConvergence {
                class: k,
                threshold,
                iterations: step,
                last: conf,
            });
        }
        synthesis_step(teacher, &mut images, &targets, 1.0, cfg.lr, &mut state, step)?;
        step += 1;
    }
}

/// `N / K` class impressions per class, one job each.
pub fn ci_schedule(n: usize, k: usize, seed: u64) -> Result<Vec<Job>> {
    if n < k {
        return Err(Error::Parameter(format!("N = {n} is smaller than K = {k}")));
    }
    let per_class = n / k;
    Ok((0..k)
        .flat_map(|class_index| {
            (0..per_class).map(move |i| Job {
                class_index,
                beta_index: 0,
                beta: 0.0,
                batch_index: i,
                count: 1,
                seed: derive_seed(seed, &[0xc1, class_index as u64, i as u64]),
            })
        })
        .collect())
}

/// Crafts a Class Impression transfer set, with the same resume behaviour as
/// [`generate_transfer_set`].
pub fn generate_class_impressions(
    teacher: &Network,
    n: usize,
    cfg: &ClassImpressionConfig,
    seed: u64,
    store: Option<&Path>,
) -> Result<TransferSet> {
    cfg.validate()?;
    let jobs = ci_schedule(n, teacher.num_classes(), seed)?;
    let provenance = Provenance {
        kind: ImpressionKind::Class,
        teacher_hash: teacher.fingerprint(),
        prior: PriorKind::Uniform,
        betas: Vec::new(),
        tau: 1.0,
        lr: cfg.lr,
        iterations: cfg.max_iterations,
        batch_size: 1,
        n,
        seed,
        num_classes: teacher.num_classes(),
        image_shape: teacher.input_shape(),
        confidence: cfg.confidence,
    };
    store::run_jobs(provenance, &jobs, store, |job| {
        Ok(vec![craft_class_impression(teacher, job.class_index, cfg, job.seed)?])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_lenet5;
    use crate::prior::uniform_prior;
    use crate::tensor::entropy;

    fn cfg(iterations: usize) -> SynthesisConfig {
        SynthesisConfig {
            tau: 20.0,
            lr: 0.1,
            iterations,
            batch_size: 2,
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let t = build_lenet5(1);
        let target = Tensor::from_vec(vec![0.1; 10]);
        assert!(matches!(
            craft_impression(&t, &target, 0, 1.0, &cfg(0), 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn loss_bounded_by_target_entropy() {
        let t = build_lenet5(1);
        let mut target = vec![0.02; 10];
        target[3] = 0.82;
        let target = Tensor::from_vec(target);
        let imp = craft_impression(&t, &target, 3, 1.0, &cfg(5), 9).unwrap();
        assert!(imp.final_loss >= entropy(target.data()) - 1e-6);
        assert!(imp.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(imp.image.shape(), &[32, 32, 1]);
    }

    #[test]
    fn schedule_arithmetic() {
        let jobs = di_schedule(20, 10, &[1.0, 0.1], 10, 0).unwrap();
        assert_eq!(jobs.len(), 20);
        assert!(jobs.iter().all(|j| j.count == 1));
        let jobs = di_schedule(600, 10, &[1.0, 0.1], 10, 0).unwrap();
        assert_eq!(jobs.iter().map(|j| j.count).sum::<usize>(), 600);
        assert_eq!(jobs.len(), 60);
        let jobs = di_schedule(250, 10, &[1.0, 0.1], 10, 0).unwrap();
        assert_eq!(jobs.iter().map(|j| j.count).collect::<Vec<_>>()[..2], [10, 2]);
        assert!(di_schedule(19, 10, &[1.0, 0.1], 10, 0).is_err());
        assert_eq!(ci_schedule(600, 10, 0).unwrap().len(), 600);
    }

    #[test]
    fn tiny_set_is_deterministic_and_leaves_teacher_alone() {
        let t = build_lenet5(2);
        let before = t.fingerprint();
        let spec = TransferSpec {
            n: 20,
            betas: vec![1.0, 0.1],
            synthesis: cfg(2),
            seed: 5,
        };
        let prior = uniform_prior(10).unwrap();
        let a = generate_transfer_set(&t, &prior, &spec, None).unwrap();
        let b = generate_transfer_set(&t, &prior, &spec, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.fingerprint(), before);
        assert_eq!(a.len(), 20);
        assert!(a.pair_counts().iter().flatten().all(|&c| c == 1));
    }

    #[test]
    fn threshold_draws_stay_in_range() {
        let c = ClassImpressionConfig::default();
        let mut rng = rng_from_seed(3);
        for _ in 0..10_000 {
            let x = c.sample_threshold(&mut rng);
            assert!((0.55..=0.70).contains(&x));
        }
    }

    #[test]
    fn class_impression_cap_is_reported() {
        let t = build_lenet5(4);
        let c = ClassImpressionConfig {
            lr: 1e-9,
            max_iterations: 2,
            confidence: (0.55, 0.70),
        };
        assert!(matches!(
            craft_class_impression(&t, 3, &c, 1),
            Err(Error::NonConvergence { class: 3, iterations: 2, .. })
        ));
    }
}
