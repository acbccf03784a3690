use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, ProtocolConfig, ProtocolError, SessionDataset};
use crate::datagen::{mix_seed, SplitHint};

/// Assign classes to sessions and clips to train/eval.
///
/// A seeded shuffle of the class ids puts the first `n_base_classes` in
/// session 0 and the next `ways` in each later session; classes beyond
/// that are unused. Clips without a split hint are shuffled per class and
/// `eval_fraction` of them (at least one) go to evaluation.
pub fn split_dataset(examples: Vec<Example>, cfg: &ProtocolConfig) -> Result<Vec<SessionDataset>, ProtocolError> {
    cfg.validate()?;
    let mut by_class: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
    for e in examples {
        by_class.entry(e.label).or_default().push(e);
    }
    let needed = cfg.total_classes();
    if by_class.len() < needed {
        return Err(ProtocolError::InsufficientClasses {
            needed,
            available: by_class.len(),
        });
    }
    let mut order: Vec<usize> = by_class.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5E55])));

    let mut sessions = Vec::with_capacity(cfg.sessions + 1);
    let mut next = 0;
    for m in 0..=cfg.sessions {
        let size = if m == 0 { cfg.n_base_classes } else { cfg.ways };
        let mut classes = order[next..next + size].to_vec();
        next += size;
        classes.sort_unstable();
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for &c in &classes {
            let clips = by_class.remove(&c).expect("class listed");
            let (tr, ev) = split_class(c, clips, cfg);
            let min_train = if m == 0 { 2 } else { cfg.shots };
            if tr.len() < min_train {
                return Err(ProtocolError::InsufficientShots {
                    class: c,
                    needed: min_train,
                    available: tr.len(),
                });
            }
            if ev.is_empty() {
                return Err(ProtocolError::NoEvalData { class: c });
            }
            train.extend(tr);
            eval.extend(ev);
        }
        sessions.push(SessionDataset {
            index: m,
            classes,
            train,
            eval,
        });
    }
    Ok(sessions)
}

fn split_class(class: usize, clips: Vec<Example>, cfg: &ProtocolConfig) -> (Vec<Example>, Vec<Example>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut free = Vec::new();
    for e in clips {
        match e.split {
            SplitHint::Train => train.push(e),
            SplitHint::Eval => eval.push(e),
            SplitHint::Any => free.push(e),
        }
    }
    if !free.is_empty() {
        free.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, class as u64, 0xE7A1])));
        let mut n_eval = (cfg.eval_fraction * free.len() as f64).round() as usize;
        if eval.is_empty() {
            n_eval = n_eval.max(1);
        }
        n_eval = n_eval.min(free.len());
        let rest = free.split_off(n_eval);
        eval.extend(free);
        train.extend(rest);
    }
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::LogMelSpectrogram;

    fn fake_examples(n_classes: usize, per_class: usize) -> Vec<Example> {
        (0..n_classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| Example {
                    features: LogMelSpectrogram {
                        clip_id: format!("{c}-{i}"),
                        n_frames: 1,
                        n_mels: 2,
                        values: vec![c as f64, i as f64],
                    },
                    label: c,
                    split: SplitHint::Any,
                })
            })
            .collect()
    }

    fn cfg(n_base: usize, sessions: usize, ways: usize) -> ProtocolConfig {
        ProtocolConfig {
            n_base_classes: n_base,
            sessions,
            ways,
            shots: 5,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn paper_session_sizes() {
        let s = split_dataset(fake_examples(100, 10), &cfg(60, 8, 5)).unwrap();
        assert_eq!(s.iter().map(|d| d.classes.len()).collect::<Vec<_>>(), vec![60, 5, 5, 5, 5, 5, 5, 5, 5]);
        let s = split_dataset(fake_examples(10, 10), &cfg(6, 2, 2)).unwrap();
        assert_eq!(s.iter().map(|d| d.classes.len()).collect::<Vec<_>>(), vec![6, 2, 2]);
    }

    #[test]
    fn too_few_classes() {
        assert!(matches!(
            split_dataset(fake_examples(10, 10), &cfg(6, 3, 2)),
            Err(ProtocolError::InsufficientClasses { needed: 12, available: 10 })
        ));
    }

    #[test]
    fn sessions_are_disjoint_and_cover_eval() {
        let s = split_dataset(fake_examples(20, 12), &cfg(10, 5, 2)).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for d in &s {
            for c in &d.classes {
                assert!(seen.insert(*c));
                assert!(d.eval.iter().any(|e| e.label == *c));
                assert!(d.train.iter().all(|e| d.classes.contains(&e.label)));
            }
            let ids: std::collections::BTreeSet<_> = d.train.iter().chain(&d.eval).map(|e| &e.features.clip_id).collect();
            assert_eq!(ids.len(), d.train.len() + d.eval.len());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = split_dataset(fake_examples(10, 10), &cfg(6, 2, 2)).unwrap();
        let b = split_dataset(fake_examples(10, 10), &cfg(6, 2, 2)).unwrap();
        assert_eq!(a, b);
        let mut c2 = cfg(6, 2, 2);
        c2.seed = 5;
        let c = split_dataset(fake_examples(10, 10), &c2).unwrap();
        assert_ne!(a.iter().map(|d| d.classes.clone()).collect::<Vec<_>>(), c.iter().map(|d| d.classes.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_shots() {
        // 6 clips: round(0.3·6) = 2 held out, 4 left for a 5-shot novel class
        assert!(matches!(
            split_dataset(fake_examples(10, 6), &cfg(6, 2, 2)),
            Err(ProtocolError::InsufficientShots { needed: 5, available: 4, .. })
        ));
    }

    #[test]
    fn split_hints_are_honoured() {
        let mut ex = fake_examples(10, 10);
        for e in ex.iter_mut() {
            e.split = if e.features.values[1] < 7.0 { SplitHint::Train } else { SplitHint::Eval };
        }
        let s = split_dataset(ex, &cfg(6, 2, 2)).unwrap();
        for d in &s {
            assert!(d.train.iter().all(|e| e.split == SplitHint::Train));
            assert_eq!(d.eval.len(), 3 * d.classes.len());
        }
    }
}
