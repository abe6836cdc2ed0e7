//! AUC and the held-out evaluation split.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::predict::QueryBatch;
use crate::rng::{substream, Purpose};
use crate::tensor::SparseTensorCOO;

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based) mid-ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub folds: usize,
    /// Fraction of the unlisted (zero) entries drawn into each test set.
    pub zero_fraction: f64,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> EvalProtocol {
        EvalProtocol {
            folds: 5,
            zero_fraction: 0.001,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("at least 2 folds are needed".into()));
        }
        if !(self.zero_fraction > 0.0 && self.zero_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "zero fraction must lie in (0, 1], got {}",
                self.zero_fraction
            )));
        }
        Ok(())
    }
}

/// Distinct offsets of unlisted entries, drawn uniformly.
fn sample_zeros<R: Rng + ?Sized>(
    y: &SparseTensorCOO,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let shape = y.shape();
    let m = shape.size();
    let zeros = m - y.len();
    if count * 2 > zeros {
        // dense regime: enumerate the complement
        let all: Vec<usize> = (0..m).filter(|&o| !y.contains(&shape.unravel(o))).collect();
        return index::sample(rng, all.len(), count)
            .into_iter()
            .map(|i| all[i])
            .collect();
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let o = rng.random_range(0..m);
        if !y.contains(&shape.unravel(o)) && chosen.insert(o) {
            out.push(o);
        }
    }
    out
}

/// Splits the listed entries into folds. For each fold the test batch holds
/// that fold's entries (label `true`) followed by freshly drawn unlisted
/// entries (label `false`); training keeps the other folds.
pub fn split_eval(
    y: &SparseTensorCOO,
    protocol: &EvalProtocol,
) -> Result<Vec<(SparseTensorCOO, QueryBatch)>> {
    protocol.validate()?;
    let listed: Vec<(Vec<usize>, f64)> = y.iter().map(|(i, v)| (i.to_vec(), v)).collect();
    if listed.len() < protocol.folds {
        return Err(Error::Config(format!(
            "{} listed entries cannot fill {} folds",
            listed.len(),
            protocol.folds
        )));
    }
    let zeros_avail = y.shape().size() - listed.len();
    if zeros_avail == 0 {
        return Err(Error::Config("no unlisted entries to use as negatives".into()));
    }
    let n_zeros = ((protocol.zero_fraction * zeros_avail as f64).ceil() as usize)
        .clamp(1, zeros_avail);

    let mut rng = substream(protocol.seed, Purpose::Split, 0);
    let mut order: Vec<usize> = (0..listed.len()).collect();
    order.shuffle(&mut rng);

    (0..protocol.folds)
        .map(|f| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (pos, &i) in order.iter().enumerate() {
                if pos % protocol.folds == f {
                    test.push(listed[i].0.clone());
                } else {
                    train.push(listed[i].clone());
                }
            }
            let n_pos = test.len();
            test.extend(
                sample_zeros(y, n_zeros, &mut rng)
                    .into_iter()
                    .map(|o| y.shape().unravel(o)),
            );
            let labels = (0..test.len()).map(|i| i < n_pos).collect();
            Ok((
                SparseTensorCOO::new(y.shape().clone(), train)?,
                QueryBatch::new(test, Some(labels), y.shape())?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auc_is_rank_based() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l: Vec<bool> = (0..50).map(|_| rng.random_bool(0.4)).collect();
        let base = auc(&s, &l).unwrap();
        let ex: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let aff: Vec<f64> = s.iter().map(|x| 3.0 * x - 7.0).collect();
        assert_eq!(auc(&ex, &l).unwrap(), base);
        assert_eq!(auc(&aff, &l).unwrap(), base);
    }

    fn sparse(dims: &[usize], n: usize, seed: u64) -> SparseTensorCOO {
        let shape = Shape::new(dims.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offs = index::sample(&mut rng, shape.size(), n);
        let entries = offs.into_iter().map(|o| (shape.unravel(o), 1.0)).collect();
        SparseTensorCOO::new(shape, entries).unwrap()
    }

    #[test]
    fn folds_partition_the_nonzeros() {
        let y = sparse(&[5, 4, 3], 10, 2);
        let p = EvalProtocol {
            folds: 5,
            zero_fraction: 0.1,
            seed: 3,
        };
        let splits = split_eval(&y, &p).unwrap();
        assert_eq!(splits.len(), 5);
        let mut held = Vec::new();
        for (train, test) in &splits {
            let labels = test.labels.as_ref().unwrap();
            let pos: Vec<_> = test
                .indices
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l)
                .map(|(i, _)| i.clone())
                .collect();
            assert_eq!(pos.len(), 2);
            assert_eq!(train.nnz(), 8);
            for p in &pos {
                assert!(!train.contains(p));
            }
            // negatives: ceil(0.1 * 50) = 5, never a listed coordinate
            let neg: Vec<_> = test
                .indices
                .iter()
                .zip(labels)
                .filter(|(_, &l)| !l)
                .collect();
            assert_eq!(neg.len(), 5);
            for (i, _) in neg {
                assert!(!y.contains(i));
            }
            held.extend(pos);
        }
        held.sort();
        let mut all: Vec<_> = y.iter().map(|(i, _)| i.to_vec()).collect();
        all.sort();
        assert_eq!(held, all);
    }

    #[test]
    fn zero_sampling_exhaustive_on_small_arrays() {
        for seed in 0..20 {
            let y = sparse(&[3, 3], 4, seed);
            let p = EvalProtocol {
                folds: 2,
                zero_fraction: 1.0,
                seed,
            };
            for (_, test) in split_eval(&y, &p).unwrap() {
                let labels = test.labels.unwrap();
                let mut negs: Vec<_> = test
                    .indices
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| !l)
                    .map(|(i, _)| i.clone())
                    .collect();
                negs.sort();
                // fraction 1 takes every unlisted cell exactly once
                let expect: Vec<Vec<usize>> = (0..9)
                    .map(|o| y.shape().unravel(o))
                    .filter(|i| !y.contains(i))
                    .collect();
                assert_eq!(negs, expect);
            }
        }
    }

    #[test]
    fn protocol_errors() {
        let y = sparse(&[4, 4], 3, 1);
        let mut p = EvalProtocol::default();
        assert!(split_eval(&y, &p).is_err());
        p.folds = 1;
        assert!(p.validate().is_err());
        p.folds = 2;
        p.zero_fraction = 0.0;
        assert!(p.validate().is_err());
    }
}
