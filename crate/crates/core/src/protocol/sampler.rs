use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Example, ProtocolError, SessionDataset};

/// Draw an `N`-way `K`-shot support set from a session's training clips.
/// The result is grouped by ascending class id.
pub fn sample_episode(session: &SessionDataset, ways: usize, shots: usize, seed: u64) -> Result<Vec<Example>, ProtocolError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for e in &session.train {
        by_class.entry(e.label).or_default().push(e);
    }
    let eligible: Vec<usize> = session
        .classes
        .iter()
        .copied()
        .filter(|c| by_class.get(c).is_some_and(|v| v.len() >= shots))
        .collect();
    if eligible.len() < ways {
        let short = session
            .classes
            .iter()
            .copied()
            .find(|c| by_class.get(c).map_or(0, Vec::len) < shots)
            .unwrap_or(0);
        return Err(ProtocolError::InsufficientShots {
            class: short,
            needed: shots,
            available: by_class.get(&short).map_or(0, Vec::len),
        });
    }
    let mut chosen: Vec<usize> = if eligible.len() == ways {
        eligible
    } else {
        eligible.choose_multiple(&mut rng, ways).copied().collect()
    };
    chosen.sort_unstable();
    let mut support = Vec::with_capacity(ways * shots);
    for c in chosen {
        let pool = &by_class[&c];
        let picks = rand::seq::index::sample(&mut rng, pool.len(), shots);
        let mut picks: Vec<usize> = picks.into_iter().collect();
        picks.sort_unstable();
        support.extend(picks.into_iter().map(|i| pool[i].clone()));
    }
    Ok(support)
}

/// Split sample indices into class-balanced batches of at most
/// `batch_size`. Each class contributes groups of two (three when its
/// count is odd), so every class present in a batch appears at least twice.
/// Every index is used exactly once.
pub fn balanced_batches<R: Rng>(labels: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size >= 3, "batch_size must be at least 3");
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (_, mut idx) in by_class {
        idx.shuffle(rng);
        let mut class_groups: Vec<Vec<usize>> = idx.chunks(2).map(<[usize]>::to_vec).collect();
        if class_groups.len() > 1 && class_groups.last().is_some_and(|g| g.len() == 1) {
            let last = class_groups.pop().expect("non-empty");
            class_groups.last_mut().expect("non-empty").extend(last);
        }
        groups.extend(class_groups);
    }
    groups.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    for g in groups {
        if current.len() + g.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(g);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SplitHint;
    use crate::dsp::LogMelSpectrogram;

    fn session(classes: &[usize], per_class: usize) -> SessionDataset {
        let train = classes
            .iter()
            .flat_map(|&c| {
                (0..per_class).map(move |i| Example {
                    features: LogMelSpectrogram {
                        clip_id: format!("{c}-{i}"),
                        n_frames: 1,
                        n_mels: 1,
                        values: vec![i as f64],
                    },
                    label: c,
                    split: SplitHint::Any,
                })
            })
            .collect();
        SessionDataset {
            index: 1,
            classes: classes.to_vec(),
            train,
            eval: Vec::new(),
        }
    }

    #[test]
    fn episode_cardinality_and_determinism() {
        let s = session(&[3, 7], 9);
        let a = sample_episode(&s, 2, 5, 11).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.iter().filter(|e| e.label == 3).count(), 5);
        let ids: std::collections::BTreeSet<_> = a.iter().map(|e| e.features.clip_id.clone()).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(a, sample_episode(&s, 2, 5, 11).unwrap());
        assert_ne!(a, sample_episode(&s, 2, 5, 12).unwrap());
    }

    #[test]
    fn too_many_shots() {
        let s = session(&[3, 7], 4);
        assert!(matches!(
            sample_episode(&s, 2, 5, 0),
            Err(ProtocolError::InsufficientShots { needed: 5, available: 4, .. })
        ));
    }

    #[test]
    fn batches_are_balanced_and_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let labels: Vec<usize> = (0..(20 + trial * 3)).map(|i| (i * 7 + trial) % 6).collect();
            let batches = balanced_batches(&labels, 16, &mut rng);
            let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for b in &batches {
                assert!(b.len() <= 16 && b.len() >= 2);
                for &i in b {
                    assert!(b.iter().filter(|&&j| labels[j] == labels[i]).count() >= 2);
                }
            }
        }
    }
}
