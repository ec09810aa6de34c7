use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::Target;
use crate::error::{invalid, Result};
use crate::matrix::Matrix;

/// Token id 0 is CLS, ids `1..=classes` are the key tokens, the next
/// `filler_pool` ids are filler and the rest is noise.
///
/// Every sequence holds exactly one key token at a random position and its
/// label is that key's class. Each other position is a filler token with
/// probability `redundancy`, otherwise a uniformly drawn noise token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub redundancy: f64,
    pub filler_pool: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask { vocab: 64, seq_len: 32, classes: 2, redundancy: 0.9, filler_pool: 2, dim: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub tokens: Matrix,
    pub label: usize,
}

impl Example {
    pub fn target(&self) -> Target {
        Target::Class(self.label)
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return invalid("need at least two classes");
        }
        if self.seq_len < 2 {
            return invalid("sequence needs CLS and a key token");
        }
        if self.filler_pool == 0 {
            return invalid("filler pool must be non-empty");
        }
        if self.vocab < self.noise_start() + 1 {
            return invalid(format!("vocab {} leaves no noise tokens", self.vocab));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return invalid(format!("redundancy {} outside [0, 1]", self.redundancy));
        }
        if self.dim == 0 {
            return invalid("embedding width must be positive");
        }
        Ok(())
    }

    fn noise_start(&self) -> usize {
        1 + self.classes + self.filler_pool
    }

    pub fn is_key(&self, id: usize) -> bool {
        (1..=self.classes).contains(&id)
    }

    pub fn is_filler(&self, id: usize) -> bool {
        (1 + self.classes..self.noise_start()).contains(&id)
    }

    /// The label rule: the class of the key token present.
    pub fn label_of(&self, ids: &[usize]) -> Option<usize> {
        let mut keys = ids.iter().filter(|&&t| self.is_key(t));
        match (keys.next(), keys.next()) {
            (Some(&k), None) => Some(k - 1),
            _ => None,
        }
    }

    /// `vocab × dim` standard normal embeddings, fixed by the seed.
    pub fn codebook(&self) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c0de);
        Matrix::from_fn(self.vocab, self.dim, |_, _| StandardNormal.sample(&mut rng))
    }

    pub fn embed(&self, codebook: &Matrix, ids: &[usize]) -> Matrix {
        codebook.gather_rows(ids)
    }
}

/// `n` examples with labels `i mod C` in shuffled order, so classes are
/// balanced to within one example. `stream` separates train and test
/// draws that share one task seed.
pub fn make_dataset(task: &SyntheticTask, n: usize, stream: u64) -> Result<Vec<Example>> {
    task.validate()?;
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    let codebook = task.codebook();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..n).map(|i| i % task.classes).collect();
    labels.shuffle(&mut rng);
    let filler = 1 + task.classes;
    let noise = task.noise_start();
    Ok(labels
        .into_iter()
        .map(|label| {
            let key_pos = rng.random_range(1..task.seq_len);
            let ids: Vec<usize> = (0..task.seq_len)
                .map(|p| {
                    if p == 0 {
                        0
                    } else if p == key_pos {
                        1 + label
                    } else if rng.random::<f64>() < task.redundancy {
                        filler + rng.random_range(0..task.filler_pool)
                    } else {
                        rng.random_range(noise..task.vocab)
                    }
                })
                .collect();
            Example { tokens: task.embed(&codebook, &ids), ids, label }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask { vocab: 40, seq_len: 12, classes: 3, redundancy: 0.5, filler_pool: 2, dim: 8, seed: 7 }
    }

    #[test]
    fn labels_follow_the_key_token() {
        let t = task();
        for e in make_dataset(&t, 60, 0).unwrap() {
            assert_eq!(t.label_of(&e.ids), Some(e.label));
            assert_eq!(e.ids[0], 0);
            assert_eq!(e.tokens, t.embed(&t.codebook(), &e.ids));
        }
    }

    #[test]
    fn label_rule_on_handcrafted_sequences() {
        let t = task();
        // keys are ids 1..=3, filler 4..=5, noise 6..40
        assert_eq!(t.label_of(&[0, 4, 4, 2, 5]), Some(1));
        assert_eq!(t.label_of(&[0, 3, 6, 7, 8]), Some(2));
        assert_eq!(t.label_of(&[0, 9, 9, 9, 1]), Some(0));
        assert_eq!(t.label_of(&[0, 4, 5, 6, 7]), None);
        assert_eq!(t.label_of(&[0, 1, 2, 4, 4]), None);
    }

    #[test]
    fn classes_are_balanced() {
        let t = task();
        let d = make_dataset(&t, 301, 1).unwrap();
        for c in 0..3 {
            let count = d.iter().filter(|e| e.label == c).count() as f64;
            assert!((count / 301.0 - 1.0 / 3.0).abs() < 0.05);
        }
    }

    #[test]
    fn full_redundancy_single_filler() {
        let t = SyntheticTask { redundancy: 1.0, filler_pool: 1, ..task() };
        for e in make_dataset(&t, 20, 0).unwrap() {
            let others: Vec<usize> = e.ids[1..].iter().copied().filter(|&i| !t.is_key(i)).collect();
            assert!(others.iter().all(|&i| i == 4));
            assert_eq!(others.len(), 10);
        }
    }

    #[test]
    fn zero_redundancy_draws_only_noise() {
        let t = SyntheticTask { redundancy: 0.0, ..task() };
        for e in make_dataset(&t, 20, 0).unwrap() {
            assert!(e.ids[1..].iter().all(|&i| !t.is_filler(i)));
        }
    }

    #[test]
    fn deterministic_and_stream_separated() {
        let t = task();
        assert_eq!(make_dataset(&t, 10, 0).unwrap(), make_dataset(&t, 10, 0).unwrap());
        assert_ne!(make_dataset(&t, 10, 0).unwrap(), make_dataset(&t, 10, 1).unwrap());
    }

    #[test]
    fn rejects_bad_tasks() {
        assert!(make_dataset(&task(), 0, 0).is_err());
        assert!(make_dataset(&SyntheticTask { redundancy: 1.5, ..task() }, 5, 0).is_err());
        assert!(make_dataset(&SyntheticTask { vocab: 6, ..task() }, 5, 0).is_err());
    }
}
