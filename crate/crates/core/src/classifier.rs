//! Expandable stochastic cosine classifier.
//!
//! Each class owns a mean column `μ_c` and a spread column `σ_c`. Training
//! draws `W = μ + ε ⊙ σ` with fresh standard-normal `ε` per step; prediction
//! uses `μ` alone.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("no embeddings supplied")]
    EmptyClass,
    #[error("class {0} has a zero mean embedding")]
    EmptyPrototype(usize),
    #[error("class {0} is already in the classifier")]
    DuplicateClass(usize),
    #[error("classifier has no classes")]
    EmptyClassifier,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{rows} embeddings but {labels} labels")]
    LabelCountMismatch { rows: usize, labels: usize },
}

/// A class's representative direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalised mean embedding per class. `embeddings` is `n × d`.
pub fn class_prototypes(embeddings: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Prototype>, ClassifierError> {
    let n = embeddings.shape()[0];
    if n == 0 || labels.is_empty() {
        return Err(ClassifierError::EmptyClass);
    }
    if n != labels.len() {
        return Err(ClassifierError::LabelCountMismatch {
            rows: n,
            labels: labels.len(),
        });
    }
    let d = embeddings.shape()[1];
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in entry.0.iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(class_id, (sum, count))| {
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let norm = l2_norm(&mean);
            if norm < 1e-12 {
                return Err(ClassifierError::EmptyPrototype(class_id));
            }
            let vector = mean.iter().map(|m| m / norm).collect();
            Ok((class_id, Prototype { class_id, vector }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticClassifier {
    dim: usize,
    /// Per-class mean columns, in class order.
    mu: Vec<Vec<f64>>,
    /// Per-class spread columns; entries kept nonnegative.
    sigma: Vec<Vec<f64>>,
    class_ids: Vec<usize>,
    /// Column offset at which each session's classes begin.
    session_boundaries: Vec<usize>,
}

impl StochasticClassifier {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            mu: Vec::new(),
            sigma: Vec::new(),
            class_ids: Vec::new(),
            session_boundaries: Vec::new(),
        }
    }

    pub fn from_parts(
        dim: usize,
        mu: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        class_ids: Vec<usize>,
        session_boundaries: Vec<usize>,
    ) -> Result<Self, ClassifierError> {
        let mut state = Self::new(dim);
        for col in mu.iter().chain(&sigma) {
            if col.len() != dim {
                return Err(ClassifierError::DimensionMismatch {
                    expected: dim,
                    got: col.len(),
                });
            }
        }
        if mu.len() != class_ids.len() || sigma.len() != class_ids.len() {
            return Err(ClassifierError::DimensionMismatch {
                expected: class_ids.len(),
                got: mu.len().min(sigma.len()),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(ClassifierError::DuplicateClass(c));
            }
        }
        state.mu = mu;
        state.sigma = sigma;
        state.class_ids = class_ids;
        state.session_boundaries = session_boundaries;
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn session_boundaries(&self) -> &[usize] {
        &self.session_boundaries
    }

    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn mu_column(&self, col: usize) -> &[f64] {
        &self.mu[col]
    }

    pub fn sigma_column(&self, col: usize) -> &[f64] {
        &self.sigma[col]
    }

    fn as_matrix(&self, cols: &[Vec<f64>]) -> Result<Tensor, ClassifierError> {
        let c = cols.len();
        if c == 0 {
            return Err(ClassifierError::EmptyClassifier);
        }
        let mut data = vec![0.0; self.dim * c];
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[i * c + j] = *v;
            }
        }
        Ok(Tensor::from_parts(vec![self.dim, c], data))
    }

    /// `μ` as a `d × |C|` matrix.
    pub fn mu_matrix(&self) -> Result<Tensor, ClassifierError> {
        self.as_matrix(&self.mu)
    }

    /// `σ` as a `d × |C|` matrix.
    pub fn sigma_matrix(&self) -> Result<Tensor, ClassifierError> {
        self.as_matrix(&self.sigma)
    }

    /// Overwrite `μ` and `σ` from `d × |C|` matrices, clamping negative
    /// spreads to zero.
    pub fn set_matrices(&mut self, mu: &Tensor, sigma: &Tensor) -> Result<(), ClassifierError> {
        let expected = [self.dim, self.num_classes()];
        for t in [mu, sigma] {
            if t.shape() != expected {
                return Err(ClassifierError::DimensionMismatch {
                    expected: self.num_classes(),
                    got: t.shape().get(1).copied().unwrap_or(0),
                });
            }
        }
        for j in 0..self.num_classes() {
            self.mu[j] = mu.column(j);
            self.sigma[j] = sigma.column(j).into_iter().map(|s| s.max(0.0)).collect();
        }
        Ok(())
    }

    /// Elementwise noise `ε` of shape `d × |C|`, ChaCha8-seeded, drawn with
    /// `rand_distr`'s ziggurat standard normal in row-major order.
    pub fn noise(&self, seed: u64) -> Result<Tensor, ClassifierError> {
        if self.class_ids.is_empty() {
            return Err(ClassifierError::EmptyClassifier);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..self.dim * self.num_classes())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Tensor::from_parts(vec![self.dim, self.num_classes()], data))
    }

    /// `W = μ + ε ⊙ σ`.
    pub fn sample_weights(&self, seed: u64) -> Result<Tensor, ClassifierError> {
        let mut w = self.mu_matrix()?;
        let sigma = self.sigma_matrix()?;
        let eps = self.noise(seed)?;
        for ((wv, s), e) in w.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
            *wv += e * s;
        }
        Ok(w)
    }

    /// Append one session's classes. New `μ` columns are the given
    /// prototypes; new `σ` columns are filled with `sigma_init`.
    pub fn expand(&mut self, new: &[Prototype], sigma_init: f64) -> Result<(), ClassifierError> {
        for (i, p) in new.iter().enumerate() {
            if self.class_ids.contains(&p.class_id) || new[..i].iter().any(|q| q.class_id == p.class_id) {
                return Err(ClassifierError::DuplicateClass(p.class_id));
            }
            if p.vector.len() != self.dim {
                return Err(ClassifierError::DimensionMismatch {
                    expected: self.dim,
                    got: p.vector.len(),
                });
            }
            if l2_norm(&p.vector) == 0.0 {
                return Err(ClassifierError::EmptyPrototype(p.class_id));
            }
        }
        self.session_boundaries.push(self.class_ids.len());
        for p in new {
            self.class_ids.push(p.class_id);
            self.mu.push(p.vector.clone());
            self.sigma.push(vec![sigma_init.max(0.0); self.dim]);
        }
        Ok(())
    }

    /// Cosine score against every `μ` column and the arg-max class; ties go
    /// to the smallest class id.
    pub fn predict(&self, e: &[f64]) -> Result<(usize, Vec<f64>), ClassifierError> {
        if self.class_ids.is_empty() {
            return Err(ClassifierError::EmptyClassifier);
        }
        if e.len() != self.dim {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dim,
                got: e.len(),
            });
        }
        let en = l2_norm(e);
        let scores: Vec<f64> = self
            .mu
            .iter()
            .map(|m| {
                let denom = en * l2_norm(m);
                if denom == 0.0 {
                    0.0
                } else {
                    e.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / denom
                }
            })
            .collect();
        let mut best = 0;
        for j in 1..scores.len() {
            if scores[j] > scores[best] || (scores[j] == scores[best] && self.class_ids[j] < self.class_ids[best]) {
                best = j;
            }
        }
        Ok((self.class_ids[best], scores))
    }

    /// Current `μ` columns as prototypes, keyed by class id.
    pub fn mean_prototypes(&self) -> BTreeMap<usize, Vec<f64>> {
        self.class_ids.iter().copied().zip(self.mu.iter().cloned()).collect()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let cols_eq = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.dim == other.dim
            && self.class_ids == other.class_ids
            && self.session_boundaries == other.session_boundaries
            && cols_eq(&self.mu, &other.mu)
            && cols_eq(&self.sigma, &other.sigma)
    }
}
