use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Example, ProtocolError};
use crate::classifier::StochasticClassifier;
use crate::diffmath::Tensor;
use crate::dsp::LogMelSpectrogram;
use crate::embedder::{embed_all, EmbedderParams};

/// Accuracy after one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub num_classes: usize,
    /// Accuracy on the base classes' evaluation clips.
    pub acc_base: f64,
    /// Accuracy on every incremental class seen so far; absent at session 0.
    pub acc_incr: Option<f64>,
    /// Accuracy over the pooled evaluation clips.
    pub acc_all: f64,
    pub n_base: usize,
    pub correct_base: usize,
    pub n_incr: usize,
    pub correct_incr: usize,
}

/// Count correct predictions per evaluation set, given embeddings.
pub(crate) fn count_correct(state: &StochasticClassifier, emb: &Tensor, labels: &[usize]) -> Result<usize, ProtocolError> {
    let hits = (0..labels.len())
        .into_par_iter()
        .map(|i| state.predict(emb.row(i)).map(|(c, _)| usize::from(c == labels[i])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.into_iter().sum())
}

/// Metrics from per-set `(clips, correct)` counts; set 0 is the base session.
pub(crate) fn metrics_from_counts(session: usize, num_classes: usize, counts: &[(usize, usize)]) -> SessionMetrics {
    let (n_base, correct_base) = counts[0];
    let (n_incr, correct_incr) = counts[1..]
        .iter()
        .fold((0, 0), |(n, c), (ni, ci)| (n + ni, c + ci));
    SessionMetrics {
        session,
        num_classes,
        acc_base: correct_base as f64 / n_base as f64,
        acc_incr: (session > 0).then(|| correct_incr as f64 / n_incr as f64),
        acc_all: (correct_base + correct_incr) as f64 / (n_base + n_incr) as f64,
        n_base,
        correct_base,
        n_incr,
        correct_incr,
    }
}

/// Evaluate after session `session` on `eval_sets[0..=session]`, predicting
/// with the classifier means over frozen embeddings.
pub fn evaluate(
    session: usize,
    params: &EmbedderParams,
    state: &StochasticClassifier,
    eval_sets: &[&[Example]],
    chunk: usize,
) -> Result<SessionMetrics, ProtocolError> {
    if eval_sets.len() != session + 1 {
        return Err(ProtocolError::UnknownSession(eval_sets.len().saturating_sub(1)));
    }
    let mut counts = Vec::with_capacity(eval_sets.len());
    for (m, set) in eval_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(ProtocolError::EmptyEvalSet(m));
        }
        let specs: Vec<&LogMelSpectrogram> = set.iter().map(|e| &e.features).collect();
        let emb = embed_all(params, &specs, chunk)?;
        let labels: Vec<usize> = set.iter().map(|e| e.label).collect();
        counts.push((set.len(), count_correct(state, &emb, &labels)?));
    }
    Ok(metrics_from_counts(session, state.num_classes(), &counts))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance of each point to its class centroid divided by the mean
/// pairwise distance between centroids. `embeddings` is `n × d`.
pub fn clustering_ratio(embeddings: &Tensor, labels: &[usize]) -> Result<f64, ProtocolError> {
    let degenerate = |m: String| Err(ProtocolError::DegenerateInput(m));
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return degenerate(format!("{:?} embeddings for {} labels", embeddings.shape(), labels.len()));
    }
    let d = embeddings.shape()[1];
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    if groups.len() < 2 {
        return degenerate("need at least 2 classes".into());
    }
    if let Some((c, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return degenerate(format!("class {c} has fewer than 2 samples"));
    }
    let centroids: Vec<Vec<f64>> = groups
        .values()
        .map(|idx| {
            let mut c = vec![0.0; d];
            for &i in idx {
                for (a, v) in c.iter_mut().zip(embeddings.row(i)) {
                    *a += v;
                }
            }
            c.iter().map(|a| a / idx.len() as f64).collect()
        })
        .collect();
    let intra = groups
        .values()
        .zip(&centroids)
        .flat_map(|(idx, c)| idx.iter().map(move |&i| dist(embeddings.row(i), c)))
        .sum::<f64>()
        / labels.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    if !(inter > 0.0) {
        return degenerate("class centroids coincide".into());
    }
    Ok(intra / inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Prototype;

    #[test]
    fn clustering_point_clusters() {
        let e = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(clustering_ratio(&e, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn clustering_identical_points_is_degenerate() {
        let e = Tensor::full(&[4, 3], 0.5);
        assert!(matches!(clustering_ratio(&e, &[0, 0, 1, 1]), Err(ProtocolError::DegenerateInput(_))));
        let e = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(clustering_ratio(&e, &[0, 0, 1]), Err(ProtocolError::DegenerateInput(_))));
    }

    #[test]
    fn clustering_hand_placed() {
        // radius-0.1 clusters at (0,0) and (1,0): every point is 0.1 from
        // its centroid and the centroids are 1 apart
        let r = 0.1;
        let pts = [
            (r, 0.0),
            (-r, 0.0),
            (0.0, r),
            (0.0, -r),
            (1.0 + r, 0.0),
            (1.0 - r, 0.0),
            (1.0, r),
            (1.0, -r),
        ];
        let data = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        let e = Tensor::matrix(8, 2, data).unwrap();
        let ratio = clustering_ratio(&e, &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert!((ratio - 0.1).abs() < 1e-9);
    }

    #[test]
    fn oracle_embeddings_are_perfect() {
        let mut state = StochasticClassifier::new(3);
        let mus = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        state
            .expand(
                &mus.iter()
                    .enumerate()
                    .map(|(c, v)| Prototype { class_id: c, vector: v.to_vec() })
                    .collect::<Vec<_>>(),
                0.1,
            )
            .unwrap();
        let emb = Tensor::matrix(3, 3, mus.concat()).unwrap();
        assert_eq!(count_correct(&state, &emb, &[0, 1, 2]).unwrap(), 3);
    }

    #[test]
    fn hand_counted_fractions() {
        // session 1: base set 2 clips (1 right), incremental set 2 clips (2 right)
        let m = metrics_from_counts(1, 4, &[(2, 1), (2, 2)]);
        assert_eq!(m.acc_base, 0.5);
        assert_eq!(m.acc_incr, Some(1.0));
        assert_eq!(m.acc_all, 0.75);
        let m0 = metrics_from_counts(0, 2, &[(4, 3)]);
        assert_eq!(m0.acc_incr, None);
        assert_eq!(m0.acc_all, m0.acc_base);
    }
}
