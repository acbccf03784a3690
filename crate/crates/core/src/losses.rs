//! Training objectives, built on the autodiff graph.
//!
//! Every loss takes graph variables and returns a scalar variable so the
//! caller can differentiate with respect to whichever inputs were created
//! as parameters. Class labels here are classifier column indices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("zero vector in cosine similarity")]
    ZeroVector,
    #[error("anchor {0} has no positive in the batch")]
    NoPositives(usize),
    #[error("contrastive batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no prototype for class {0}")]
    MissingPrototype(usize),
    #[error("prototype loss needs at least one old class")]
    NoOldClasses,
    #[error("{rows} rows but {labels} labels")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Coefficients of the base and incremental objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of cross-entropy in the base objective.
    pub lambda: f64,
    /// Weight of the contrastive term in the base objective.
    pub beta: f64,
    /// Weight of the prototype loss in the incremental objective.
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Softmax scale applied to cosine logits; 1 gives the unscaled form.
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            beta: 1.0,
            alpha: 0.5,
            tau: 0.07,
            scale: 16.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.scale > 0.0) {
            return Err(format!("scale must be positive, got {}", self.scale));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err("lambda and beta must be nonnegative".into());
        }
        Ok(())
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, LossError> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

const MASKED: f64 = -1e30;

/// `ln Σ_j exp(x[i, j])` for each row, shifted by the row maximum.
fn log_sum_exp_rows(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let shape = g.value(x).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let m = g.max_axis(x, 1)?;
    let m = g.detach(m);
    let m_col = g.reshape(m, &[n, 1])?;
    let m_full = g.broadcast(m_col, &[n, c])?;
    let shifted = g.sub(x, m_full)?;
    let e = g.exp(shifted)?;
    let s = g.sum_axis(e, 1)?;
    let l = g.ln(s)?;
    g.add(l, m)
}

fn check_rows(g: &Graph, x: Var, labels: &[usize]) -> Result<usize, LossError> {
    let rows = g.value(x).shape()[0];
    if rows != labels.len() {
        return Err(LossError::LabelCountMismatch {
            rows,
            labels: labels.len(),
        });
    }
    Ok(rows)
}

fn has_zero_slice(t: &Tensor, axis: usize) -> bool {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    if axis == 1 {
        (0..rows).any(|i| t.row(i).iter().all(|&v| v == 0.0))
    } else {
        (0..cols).any(|j| (0..rows).all(|i| t.at2(i, j) == 0.0))
    }
}

/// Supervised contrastive loss over the rows of `z` (`n × p`):
///
/// `Σ_a −1/|I(a)| Σ_{i∈I(a)} ln( exp(z_a·z_i/τ) / Σ_{n≠a} exp(z_a·z_n/τ) )`,
///
/// summed over anchors, evaluated with a per-row log-sum-exp shift.
pub fn supcon_loss(g: &mut Graph, z: Var, labels: &[usize], tau: f64) -> Result<Var, LossError> {
    let n = check_rows(g, z, labels)?;
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let mut pos_weight = vec![0.0; n * n];
    let mut diag_mask = vec![0.0; n * n];
    for a in 0..n {
        diag_mask[a * n + a] = MASKED;
        let positives: Vec<usize> = (0..n).filter(|&i| i != a && labels[i] == labels[a]).collect();
        if positives.is_empty() {
            return Err(LossError::NoPositives(a));
        }
        for i in &positives {
            pos_weight[a * n + i] = 1.0 / positives.len() as f64;
        }
    }
    let zt = g.transpose(z)?;
    let gram = g.matmul(z, zt)?;
    let sim = g.scale(gram, 1.0 / tau)?;
    let mask = g.input(Tensor::from_parts(vec![n, n], diag_mask));
    let masked = g.add(sim, mask)?;
    let log_den = log_sum_exp_rows(g, masked)?;
    let weights = g.input(Tensor::from_parts(vec![n, n], pos_weight));
    let weighted = g.mul(sim, weights)?;
    let pos = g.sum(weighted)?;
    let den = g.sum(log_den)?;
    Ok(g.sub(den, pos)?)
}

/// Cosine logits `s·cos(row_i(emb), col_j(w))`, shape `n × |C|`.
fn cosine_logits(g: &mut Graph, emb: Var, w: Var, s: f64) -> Result<Var, LossError> {
    if has_zero_slice(g.value(emb), 1) || has_zero_slice(g.value(w), 0) {
        return Err(LossError::ZeroVector);
    }
    let en = g.normalize_axis(emb, 1)?;
    let wn = g.normalize_axis(w, 0)?;
    let cos = g.matmul(en, wn)?;
    Ok(g.scale(cos, s)?)
}

/// Mean over the batch of `−ln softmax_y(s·cos(e, w_h))`.
pub fn cosine_ce_loss(g: &mut Graph, emb: Var, labels: &[usize], w: Var, s: f64) -> Result<Var, LossError> {
    let n = check_rows(g, emb, labels)?;
    let classes = g.value(w).shape()[1];
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    let logits = cosine_logits(g, emb, w, s)?;
    let lse = log_sum_exp_rows(g, logits)?;
    let mut onehot = vec![0.0; n * classes];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * classes + y] = 1.0;
    }
    let onehot = g.input(Tensor::from_parts(vec![n, classes], onehot));
    let picked = g.mul(logits, onehot)?;
    let target = g.sum_axis(picked, 1)?;
    let per_sample = g.sub(lse, target)?;
    Ok(g.mean(per_sample)?)
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var, LossError> {
    let mut acc: Option<Var> = None;
    for &(c, v) in terms {
        let scaled = g.scale(v, c)?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(g.input(Tensor::scalar(0.0))),
    }
}

/// `λ·CE(emb, W) + β·SupCon(proj)`. A zero coefficient drops its term from
/// the graph entirely.
pub fn joint_base_loss(
    g: &mut Graph,
    emb: Var,
    proj: Var,
    labels: &[usize],
    w: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let mut terms = Vec::new();
    if cfg.lambda != 0.0 {
        terms.push((cfg.lambda, cosine_ce_loss(g, emb, labels, w, cfg.scale)?));
    }
    if cfg.beta != 0.0 {
        terms.push((cfg.beta, supcon_loss(g, proj, labels, cfg.tau)?));
    }
    weighted_sum(g, &terms)
}

/// Prototypes for every classifier column, in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    /// `d × |C|`, column `h` is the prototype paired with weight column `h`.
    pub matrix: Tensor,
    /// Columns whose classes belong to earlier sessions.
    pub old_columns: Vec<usize>,
}

impl PrototypeTable {
    /// Assemble the table for classifier columns `class_order`, marking
    /// `old_classes` as the numerator set.
    pub fn build(
        prototypes: &BTreeMap<usize, Vec<f64>>,
        class_order: &[usize],
        old_classes: &[usize],
    ) -> Result<Self, LossError> {
        let mut columns = Vec::with_capacity(class_order.len());
        for c in class_order {
            columns.push(prototypes.get(c).ok_or(LossError::MissingPrototype(*c))?);
        }
        let d = columns.first().map_or(0, |p| p.len());
        if d == 0 {
            return Err(LossError::NoOldClasses);
        }
        let mut data = vec![0.0; d * columns.len()];
        for (j, p) in columns.iter().enumerate() {
            if p.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "prototype_table",
                    node: j,
                    detail: format!("prototype of length {} vs {d}", p.len()),
                }
                .into());
            }
            for (i, v) in p.iter().enumerate() {
                data[i * columns.len() + j] = *v;
            }
        }
        let mut old_columns = Vec::with_capacity(old_classes.len());
        for c in old_classes {
            let col = class_order
                .iter()
                .position(|x| x == c)
                .ok_or(LossError::MissingPrototype(*c))?;
            old_columns.push(col);
        }
        Ok(Self {
            matrix: Tensor::from_parts(vec![d, columns.len()], data),
            old_columns,
        })
    }
}

/// Mean over old classes `c` of
/// `−ln( exp(s·cos(p_c, w_c)) / Σ_h exp(s·cos(p_h, w_h)) )`, where the
/// denominator pairs every column's prototype with its own weight vector.
/// Prototypes are constants; only `w` receives gradient.
pub fn prototype_loss(g: &mut Graph, table: &PrototypeTable, w: Var, s: f64) -> Result<Var, LossError> {
    if table.old_columns.is_empty() {
        return Err(LossError::NoOldClasses);
    }
    let ws = g.value(w).shape().to_vec();
    if ws != table.matrix.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "prototype_loss",
            node: g.len(),
            detail: format!("weights {ws:?} vs prototypes {:?}", table.matrix.shape()),
        }
        .into());
    }
    if has_zero_slice(&table.matrix, 0) || has_zero_slice(g.value(w), 0) {
        return Err(LossError::ZeroVector);
    }
    let classes = ws[1];
    let p = g.input(table.matrix.clone());
    let pn = g.normalize_axis(p, 0)?;
    let wn = g.normalize_axis(w, 0)?;
    let prod = g.mul(pn, wn)?;
    let cos = g.sum_axis(prod, 0)?;
    let logits = g.scale(cos, s)?;
    let row = g.reshape(logits, &[1, classes])?;
    let lse = log_sum_exp_rows(g, row)?;
    let mut pick = vec![0.0; classes];
    for &c in &table.old_columns {
        pick[c] += 1.0 / table.old_columns.len() as f64;
    }
    let pick = g.input(Tensor::vector(&pick));
    let picked = g.mul(logits, pick)?;
    let numer = g.sum(picked)?;
    let lse = g.sum(lse)?;
    Ok(g.sub(lse, numer)?)
}

/// `α·L_p + (1 − α)·CE(support, W)` over all current columns.
pub fn incremental_loss(
    g: &mut Graph,
    support: Var,
    labels: &[usize],
    table: &PrototypeTable,
    w: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let mut terms = Vec::new();
    if cfg.alpha != 0.0 {
        terms.push((cfg.alpha, prototype_loss(g, table, w, cfg.scale)?));
    }
    if cfg.alpha != 1.0 {
        terms.push((1.0 - cfg.alpha, cosine_ce_loss(g, support, labels, w, cfg.scale)?));
    }
    weighted_sum(g, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(build: impl FnOnce(&mut Graph) -> Result<Var, LossError>) -> Result<f64, LossError> {
        let mut g = Graph::new();
        let v = build(&mut g)?;
        Ok(g.value(v).data()[0])
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[3.0, -1.0], &[3.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(LossError::ZeroVector));
    }

    #[test]
    fn supcon_two_identical_samples_is_zero() {
        for tau in [0.07, 0.5, 2.0] {
            let v = eval(|g| {
                let z = g.input(Tensor::matrix(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap());
                supcon_loss(g, z, &[1, 1], tau)
            })
            .unwrap();
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn supcon_errors() {
        let r = eval(|g| {
            let z = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            supcon_loss(g, z, &[0, 1], 0.1)
        });
        assert_eq!(r, Err(LossError::NoPositives(0)));
        let r = eval(|g| {
            let z = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
            supcon_loss(g, z, &[0], 0.1)
        });
        assert_eq!(r, Err(LossError::BatchTooSmall(1)));
    }

    #[test]
    fn supcon_survives_tiny_temperature() {
        let v = eval(|g| {
            let z = g.input(Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap());
            supcon_loss(g, z, &[0, 1, 0, 1], 1e-4)
        })
        .unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn ce_single_class_is_zero() {
        let v = eval(|g| {
            let e = g.input(Tensor::matrix(2, 2, vec![0.3, 0.1, -0.5, 2.0]).unwrap());
            let w = g.input(Tensor::matrix(2, 1, vec![1.0, 0.4]).unwrap());
            cosine_ce_loss(g, e, &[0, 0], w, 1.0)
        })
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn ce_two_orthogonal_classes() {
        let v = eval(|g| {
            let e = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
            let w = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            cosine_ce_loss(g, e, &[0], w, 1.0)
        })
        .unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn ce_errors() {
        let r = eval(|g| {
            let e = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
            let w = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            cosine_ce_loss(g, e, &[2], w, 1.0)
        });
        assert_eq!(r, Err(LossError::LabelOutOfRange { label: 2, classes: 2 }));
        let r = eval(|g| {
            let e = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
            let w = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
            cosine_ce_loss(g, e, &[0], w, 1.0)
        });
        assert_eq!(r, Err(LossError::ZeroVector));
    }

    #[test]
    fn ce_decreases_as_target_cosine_grows() {
        // embedding rotates toward w_0 while staying orthogonal-free of w_1's score
        let w = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let v = eval(|g| {
                let e = g.input(Tensor::matrix(1, 3, vec![t, (1.0 - t * t).sqrt(), 0.3]).unwrap());
                let wv = g.input(w.clone());
                cosine_ce_loss(g, e, &[0], wv, 1.0)
            })
            .unwrap();
            assert!(v < last);
            last = v;
        }
    }

    fn single_class_table() -> PrototypeTable {
        let mut protos = BTreeMap::new();
        protos.insert(7, vec![0.2, -0.4, 0.9]);
        PrototypeTable::build(&protos, &[7], &[7]).unwrap()
    }

    #[test]
    fn prototype_loss_single_class_is_zero() {
        let table = single_class_table();
        let v = eval(|g| {
            let w = g.input(Tensor::matrix(3, 1, vec![1.0, 2.0, -0.5]).unwrap());
            prototype_loss(g, &table, w, 1.0)
        })
        .unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn prototype_loss_aligned_orthogonal_columns() {
        // With every w_h equal to p_h, each paired cosine is 1 and the
        // denominator is |C|·e^s, so the loss is ln|C| at every scale.
        let mut protos = BTreeMap::new();
        protos.insert(0, vec![1.0, 0.0, 0.0]);
        protos.insert(1, vec![0.0, 1.0, 0.0]);
        protos.insert(2, vec![0.0, 0.0, 1.0]);
        let table = PrototypeTable::build(&protos, &[0, 1, 2], &[0, 1]).unwrap();
        for s in [1.0, 4.0, 16.0, 64.0] {
            let v = eval(|g| {
                let w = g.input(table.matrix.clone());
                prototype_loss(g, &table, w, s)
            })
            .unwrap();
            assert!((v - 3f64.ln()).abs() < 1e-12, "s={s}: {v}");
        }
    }

    #[test]
    fn prototype_table_errors() {
        let mut protos = BTreeMap::new();
        protos.insert(0, vec![1.0, 0.0]);
        assert_eq!(
            PrototypeTable::build(&protos, &[0, 1], &[0]),
            Err(LossError::MissingPrototype(1))
        );
        assert_eq!(
            PrototypeTable::build(&protos, &[0], &[3]),
            Err(LossError::MissingPrototype(3))
        );
    }

    #[test]
    fn coefficient_collapse() {
        let e = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.8, 0.3, -0.2, 1.0, 0.1, 0.7]).unwrap();
        let z = Tensor::matrix(4, 2, vec![0.6, 0.8, 0.8, 0.6, -0.6, 0.8, 0.0, 1.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.2, -0.1, 1.0]).unwrap();
        let labels = [0, 0, 1, 1];
        let run = |cfg: LossConfig| {
            eval(|g| {
                let (ev, zv, wv) = (g.input(e.clone()), g.input(z.clone()), g.input(w.clone()));
                joint_base_loss(g, ev, zv, &labels, wv, &cfg)
            })
            .unwrap()
        };
        let ce = eval(|g| {
            let (ev, wv) = (g.input(e.clone()), g.input(w.clone()));
            cosine_ce_loss(g, ev, &labels, wv, 1.0)
        })
        .unwrap();
        let cl = eval(|g| {
            let zv = g.input(z.clone());
            supcon_loss(g, zv, &labels, 0.07)
        })
        .unwrap();
        let base = LossConfig {
            scale: 1.0,
            ..LossConfig::default()
        };
        assert_eq!(run(LossConfig { lambda: 0.0, beta: 1.0, ..base.clone() }), cl);
        assert_eq!(run(LossConfig { lambda: 1.0, beta: 0.0, ..base.clone() }), ce);
        assert!((run(base) - (0.2 * ce + cl)).abs() < 1e-12);
    }
}
