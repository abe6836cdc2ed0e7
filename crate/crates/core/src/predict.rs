//! Bagged prediction of unknown entries.
//!
//! Each bag draws a subarray that is forced to contain every query's
//! indices, runs the E-step on the training block with the query
//! positions treated as unobserved, and reads the posterior mean there.
//! The score of a query is the average of `Φ(E[m])` over the bags.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{estep, FactorSet, SubarrayState};
use crate::kernel::KernelSpec;
use crate::probit::normal_cdf;
use crate::tensor::{IndexSets, Shape, SparseTensorCOO};

pub const DEFAULT_BAGS: usize = 10;

/// Entries to score, as 0-based index tuples, with optional labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryBatch {
    pub indices: Vec<Vec<usize>>,
    pub labels: Option<Vec<bool>>,
}

impl QueryBatch {
    pub fn new(
        indices: Vec<Vec<usize>>,
        labels: Option<Vec<bool>>,
        shape: &Shape,
    ) -> Result<QueryBatch> {
        for idx in &indices {
            shape.check_index(idx)?;
        }
        if let Some(l) = &labels {
            if l.len() != indices.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} queries",
                    l.len(),
                    indices.len()
                )));
            }
        }
        Ok(QueryBatch { indices, labels })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagSpec {
    pub bags: usize,
    pub sub_shape: Vec<usize>,
    pub kernel: KernelSpec,
    pub estep_sweeps: usize,
}

impl BagSpec {
    fn validate(&self, shape: &Shape) -> Result<()> {
        if self.bags == 0 {
            return Err(Error::Config("bags must be at least 1".into()));
        }
        if self.estep_sweeps == 0 {
            return Err(Error::Config("estep sweeps must be at least 1".into()));
        }
        if self.sub_shape.len() != shape.ndims() {
            return Err(Error::Config(format!(
                "sub_shape has {} modes, data has {}",
                self.sub_shape.len(),
                shape.ndims()
            )));
        }
        for (k, (&s, &m)) in self.sub_shape.iter().zip(shape.dims()).enumerate() {
            if s == 0 || s > m {
                return Err(Error::Config(format!(
                    "mode {} subarray size {} must lie in 1..={}",
                    k + 1,
                    s,
                    m
                )));
            }
        }
        self.kernel.validate()
    }
}

fn check_factors(u: &FactorSet, shape: &Shape) -> Result<()> {
    if u.ndims() != shape.ndims() {
        return Err(Error::Shape(format!(
            "factors have {} modes, data has {}",
            u.ndims(),
            shape.ndims()
        )));
    }
    for (k, (rows, m)) in u.dims().into_iter().zip(shape.dims()).enumerate() {
        if rows != *m {
            return Err(Error::Shape(format!(
                "mode {}: factor matrix has {} rows, data has size {}",
                k + 1,
                rows,
                m
            )));
        }
    }
    Ok(())
}

/// Per mode, the sorted distinct query indices.
fn forced_indices(queries: &[Vec<usize>], ndims: usize) -> Vec<Vec<usize>> {
    (0..ndims)
        .map(|k| {
            queries
                .iter()
                .map(|q| q[k])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect()
}

/// Forced indices first, then uniformly drawn others up to `sub_shape`.
fn draw_bag<R: Rng + ?Sized>(
    shape: &Shape,
    forced: &[Vec<usize>],
    sub_shape: &[usize],
    rng: &mut R,
) -> Result<IndexSets> {
    let sets = forced
        .iter()
        .zip(shape.dims().iter().zip(sub_shape))
        .map(|(f, (&m, &s))| {
            let others: Vec<usize> = (0..m).filter(|i| f.binary_search(i).is_err()).collect();
            let mut set = f.clone();
            let picks = index::sample(rng, others.len(), s - f.len());
            set.extend(picks.into_iter().map(|i| others[i]));
            set
        })
        .collect();
    IndexSets::new(sets, shape)
}

/// Scores every query from `bags` subarrays that all contain the whole
/// batch. Fails with a configuration error if some mode has more distinct
/// query indices than `sub_shape` allows; [`predict_chunked`] splits large
/// batches instead.
pub fn predict_bagged<R: Rng + ?Sized>(
    u: &FactorSet,
    y_train: &SparseTensorCOO,
    q: &QueryBatch,
    spec: &BagSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let shape = y_train.shape();
    spec.validate(shape)?;
    check_factors(u, shape)?;
    for idx in &q.indices {
        shape.check_index(idx)?;
    }
    if q.is_empty() {
        return Ok(Vec::new());
    }
    let forced = forced_indices(&q.indices, shape.ndims());
    for (k, f) in forced.iter().enumerate() {
        if f.len() > spec.sub_shape[k] {
            return Err(Error::Config(format!(
                "mode {} has {} distinct query indices but the subarray holds {}",
                k + 1,
                f.len(),
                spec.sub_shape[k]
            )));
        }
    }
    let sub = Shape::new(spec.sub_shape.clone())?;
    // forced indices sit at the front of each mode, in sorted order
    let local: Vec<usize> = q
        .indices
        .iter()
        .map(|idx| {
            let pos: Vec<usize> = idx
                .iter()
                .zip(&forced)
                .map(|(i, f)| f.binary_search(i).expect("forced"))
                .collect();
            sub.offset(&pos)
        })
        .collect();
    let seeds: Vec<u64> = (0..spec.bags).map(|_| rng.random()).collect();

    let per_bag: Vec<Result<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut bag_rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = draw_bag(shape, &forced, &spec.sub_shape, &mut bag_rng)?;
            let mut state = SubarrayState::new(y_train, sel)?.with_unobserved(&local);
            estep(&mut state, u, &spec.kernel, spec.estep_sweeps)?;
            let em = state.em.data();
            Ok(local.iter().map(|&o| normal_cdf(em[o])).collect())
        })
        .collect();

    let mut scores = vec![0.0; q.len()];
    for bag in per_bag {
        for (s, p) in scores.iter_mut().zip(bag?) {
            *s += p;
        }
    }
    let b = spec.bags as f64;
    Ok(scores.into_iter().map(|s| s / b).collect())
}

/// Splits the distinct queries, in sorted order, into batches that fit
/// `sub_shape`, then scores each batch with [`predict_bagged`]. Scores come
/// back in query order; duplicates share a score.
pub fn predict_chunked<R: Rng + ?Sized>(
    u: &FactorSet,
    y_train: &SparseTensorCOO,
    q: &QueryBatch,
    spec: &BagSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let shape = y_train.shape();
    spec.validate(shape)?;
    check_factors(u, shape)?;
    for idx in &q.indices {
        shape.check_index(idx)?;
    }
    let distinct: Vec<Vec<usize>> = q
        .indices
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut chunks: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); shape.ndims()];
    for idx in distinct {
        let fits = idx
            .iter()
            .enumerate()
            .all(|(k, i)| seen[k].contains(i) || seen[k].len() < spec.sub_shape[k]);
        if !fits || chunks.is_empty() {
            chunks.push(Vec::new());
            seen.iter_mut().for_each(BTreeSet::clear);
        }
        for (k, &i) in idx.iter().enumerate() {
            seen[k].insert(i);
        }
        chunks.last_mut().expect("pushed").push(idx);
    }

    let mut lookup = std::collections::HashMap::new();
    for chunk in chunks {
        let batch = QueryBatch {
            indices: chunk,
            labels: None,
        };
        let scores = predict_bagged(u, y_train, &batch, spec, rng)?;
        lookup.extend(batch.indices.into_iter().zip(scores));
    }
    Ok(q.indices.iter().map(|idx| lookup[idx]).collect())
}
