//! Class-similarity prior over the softmax simplex and Dirichlet sampling.
//!
//! The teacher's final-layer weight columns act as class templates. Their
//! pairwise cosines, min-max normalised per row and floored at
//! [`EPSILON_FLOOR`], give one concentration row per class; scaling a row by
//! β and sampling a Dirichlet yields the soft targets for impression crafting.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::write_atomically;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::rng::ZskdRng;
use crate::tensor::Tensor;

/// Lower bound applied to every normalised similarity so each concentration
/// entry stays strictly positive.
pub const EPSILON_FLOOR: f64 = 1e-2;

/// The two scaling factors used for target sampling.
pub const DEFAULT_BETAS: [f64; 2] = [1.0, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PriorKind {
    ClassSimilarity,
    Uniform,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::ClassSimilarity => "class-similarity",
            PriorKind::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    k: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
    kind: PriorKind,
}

impl SimilarityMatrix {
    /// Builds the prior from a template matrix `[n, K]` whose column `k` is
    /// the template of class `k`.
    pub fn from_templates(weights: &Tensor) -> Result<Self> {
        let &[n, k] = weights.shape() else {
            return Err(Error::Dimension(format!(
                "templates must be [n, K], got {:?}",
                weights.shape()
            )));
        };
        if k < 2 {
            return Err(Error::Dimension(format!("need at least 2 classes, got {k}")));
        }
        let w = weights.data();
        let column = |j: usize| (0..n).map(move |r| w[r * k + j]);
        let norms: Vec<f64> = (0..k)
            .map(|j| column(j).map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(class) = norms.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::DegenerateTemplate { class });
        }
        let mut raw = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let dot: f64 = column(i).zip(column(j)).map(|(a, b)| a * b).sum();
                let c = dot / (norms[i] * norms[j]);
                raw[i * k + j] = c;
                raw[j * k + i] = c;
            }
        }
        Ok(Self {
            k,
            normalized: normalize_rows(&raw, k),
            raw,
            kind: PriorKind::ClassSimilarity,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    /// Row-major `K x K` cosine similarities.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Row-major `K x K` normalised similarities in `[EPSILON_FLOOR, 1]`.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw[i * self.k..(i + 1) * self.k]
    }

    pub fn normalized_row(&self, i: usize) -> &[f64] {
        &self.normalized[i * self.k..(i + 1) * self.k]
    }

    pub fn raw_csv(&self) -> String {
        matrix_csv(&self.raw, self.k)
    }

    pub fn normalized_csv(&self) -> String {
        matrix_csv(&self.normalized, self.k)
    }

    /// Writes `<stem>_raw.csv` and `<stem>_normalized.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomically(&dir.join(format!("{stem}_raw.csv")), self.raw_csv().as_bytes())?;
        write_atomically(
            &dir.join(format!("{stem}_normalized.csv")),
            self.normalized_csv().as_bytes(),
        )
    }
}

fn matrix_csv(m: &[f64], k: usize) -> String {
    let mut out = String::new();
    for row in m.chunks(k) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Row-wise min-max to `[0, 1]`, then floored at [`EPSILON_FLOOR`]. A
/// constant row has no spread to normalise and becomes all ones.
pub fn normalize_rows(raw: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for row in raw.chunks(k) {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        if span > 0.0 {
            out.extend(row.iter().map(|&v| ((v - min) / span).max(EPSILON_FLOOR)));
        } else {
            out.extend(std::iter::repeat_n(1.0, k));
        }
    }
    out
}

/// Similarity prior from the final dense layer of `teacher` (bias excluded).
pub fn class_similarity(teacher: &Network) -> Result<SimilarityMatrix> {
    let w = teacher.final_layer_weights()?;
    if w.shape()[1] != teacher.num_classes() {
        return Err(Error::Dimension(format!(
            "final layer has {} columns, network declares {} classes",
            w.shape()[1],
            teacher.num_classes()
        )));
    }
    SimilarityMatrix::from_templates(w)
}

/// Prior whose every row is all ones, so β alone sets a symmetric Dirichlet.
pub fn uniform_prior(k: usize) -> Result<SimilarityMatrix> {
    if k < 2 {
        return Err(Error::Parameter(format!("uniform prior needs K >= 2, got {k}")));
    }
    Ok(SimilarityMatrix {
        k,
        raw: vec![1.0; k * k],
        normalized: vec![1.0; k * k],
        kind: PriorKind::Uniform,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationVector {
    alpha: Vec<f64>,
    class_index: usize,
    beta: f64,
}

impl ConcentrationVector {
    /// Wraps an explicit concentration vector. Every entry must be finite and
    /// strictly positive.
    pub fn new(alpha: Vec<f64>, class_index: usize, beta: f64) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Parameter("Dirichlet needs at least 2 components".into()));
        }
        if let Some(bad) = alpha.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Parameter(format!("concentration entry {bad} is not positive")));
        }
        if class_index >= alpha.len() {
            return Err(Error::Parameter(format!(
                "class {class_index} out of range for K = {}",
                alpha.len()
            )));
        }
        Ok(Self {
            alpha,
            class_index,
            beta,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// `β` times normalised row `k`.
pub fn concentration(sim: &SimilarityMatrix, k: usize, beta: f64) -> Result<ConcentrationVector> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    if k >= sim.k {
        return Err(Error::Parameter(format!("class {k} out of range for K = {}", sim.k)));
    }
    let alpha = sim.normalized_row(k).iter().map(|&c| beta * c).collect();
    ConcentrationVector::new(alpha, k, beta)
}

/// `ln G` for `G ~ Gamma(shape, 1)`.
///
/// Marsaglia-Tsang squeeze for `shape >= 1`; below 1 the draw is made at
/// `shape + 1` and multiplied by `U^(1/shape)`, added here in log space so
/// tiny shapes underflow gracefully.
pub fn log_gamma_sample(shape: f64, rng: &mut ZskdRng) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return log_gamma_sample(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// One draw from `Dir(alpha)`: independent gamma draws, normalised through a
/// log-sum-exp.
pub fn dirichlet_sample(alpha: &ConcentrationVector, rng: &mut ZskdRng) -> Tensor {
    Tensor::from_vec(dirichlet_from_alpha(&alpha.alpha, rng))
}

pub(crate) fn dirichlet_from_alpha(alpha: &[f64], rng: &mut ZskdRng) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| log_gamma_sample(a, rng)).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Closed-form Dirichlet means and variances.
pub fn dirichlet_moments(alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a0: f64 = alpha.iter().sum();
    let mean = alpha.iter().map(|a| a / a0).collect();
    let var = alpha
        .iter()
        .map(|a| a * (a0 - a) / (a0 * a0 * (a0 + 1.0)))
        .collect();
    (mean, var)
}
