//! Subarray generation and assignment of subarrays to worker groups.
//!
//! Three strategies produce equally sized subarrays:
//!
//! * **uniform**: per mode, `m̄_k` distinct indices uniformly without replacement;
//! * **weighted**: per mode, successive draws without replacement with
//!   probability proportional to the slice's nonzero count plus [`WEIGHT_FLOOR`];
//! * **grid**: per mode, a random permutation cut into segments of length
//!   `m̄_k`; the cartesian product of segments tiles the array.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};
use crate::tensor::{IndexSets, Shape, SparseTensorCOO};

/// Added to every slice weight so empty slices stay reachable.
pub const WEIGHT_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Uniform,
    Weighted,
    Grid,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "weighted" => Ok(Strategy::Weighted),
            "grid" => Ok(Strategy::Grid),
            other => Err(Error::Config(format!("unknown sampling strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::Weighted => "weighted",
            Strategy::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerSpec {
    pub strategy: Strategy,
    pub sub_shape: Vec<usize>,
    /// Number of subarrays to generate.
    pub count: usize,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn validate(&self, shape: &Shape) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sampler count must be at least 1".into()));
        }
        check_sub_shape(shape, &self.sub_shape)
    }
}

fn check_sub_shape(shape: &Shape, sub_shape: &[usize]) -> Result<()> {
    if sub_shape.len() != shape.ndims() {
        return Err(Error::Config(format!(
            "sub_shape has {} modes, data has {}",
            sub_shape.len(),
            shape.ndims()
        )));
    }
    for (k, (&s, &m)) in sub_shape.iter().zip(shape.dims()).enumerate() {
        if s == 0 || s > m {
            return Err(Error::Config(format!(
                "mode {} subarray size {} must lie in 1..={}",
                k + 1,
                s,
                m
            )));
        }
    }
    Ok(())
}

/// Uniform index sets: `sub_shape[k]` distinct indices per mode.
pub fn sample_uniform<R: Rng + ?Sized>(
    shape: &Shape,
    sub_shape: &[usize],
    rng: &mut R,
) -> Result<IndexSets> {
    check_sub_shape(shape, sub_shape)?;
    let sets = shape
        .dims()
        .iter()
        .zip(sub_shape)
        .map(|(&m, &s)| index::sample(rng, m, s).into_vec())
        .collect();
    IndexSets::new(sets, shape)
}

/// Successive weighted draws without replacement.
pub fn weighted_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let available = weights.iter().filter(|&&w| w > 0.0).count();
    if available < count {
        return Err(Error::Config(format!(
            "{count} indices requested but only {available} slices carry weight"
        )));
    }
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < wi {
                break;
            }
            u -= wi;
        }
        // rounding can run past the end; the last positive weight absorbs it
        let i = pick.expect("a positive weight remains");
        out.push(i);
        w[i] = 0.0;
    }
    Ok(out)
}

/// Slice weights used by [`sample_weighted`] for mode `k`.
pub fn slice_weights(y: &SparseTensorCOO, k: usize) -> Vec<f64> {
    y.slice_counts(k)
        .into_iter()
        .map(|c| c as f64 + WEIGHT_FLOOR)
        .collect()
}

/// Index sets favouring slices with many nonzeros.
pub fn sample_weighted<R: Rng + ?Sized>(
    y: &SparseTensorCOO,
    sub_shape: &[usize],
    rng: &mut R,
) -> Result<IndexSets> {
    check_sub_shape(y.shape(), sub_shape)?;
    if y.nnz() == 0 {
        return Err(Error::Config(
            "weighted sampling needs at least one nonzero entry".into(),
        ));
    }
    let sets = (0..y.shape().ndims())
        .map(|k| weighted_without_replacement(&slice_weights(y, k), sub_shape[k], rng))
        .collect::<Result<Vec<_>>>()?;
    IndexSets::new(sets, y.shape())
}

fn segments<R: Rng + ?Sized>(m: usize, s: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    let mut out: Vec<Vec<usize>> = perm.chunks(s).map(<[usize]>::to_vec).collect();
    let last = out.last_mut().expect("m >= 1");
    let short = s - last.len();
    // pad the remainder segment with the leading indices of the permutation
    last.extend_from_slice(&perm[..short]);
    out
}

/// One grid tiling: `prod_k ceil(m_k / m̄_k)` subarrays covering every entry.
pub fn sample_grid<R: Rng + ?Sized>(
    shape: &Shape,
    sub_shape: &[usize],
    rng: &mut R,
) -> Result<Vec<IndexSets>> {
    check_sub_shape(shape, sub_shape)?;
    let per_mode: Vec<Vec<Vec<usize>>> = shape
        .dims()
        .iter()
        .zip(sub_shape)
        .map(|(&m, &s)| segments(m, s, rng))
        .collect();
    let mut out = Vec::new();
    let mut cursor = vec![0usize; per_mode.len()];
    loop {
        let sets = cursor
            .iter()
            .zip(&per_mode)
            .map(|(&c, segs)| segs[c].clone())
            .collect();
        out.push(IndexSets::new(sets, shape)?);
        let mut k = per_mode.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            cursor[k] += 1;
            if cursor[k] < per_mode[k].len() {
                break;
            }
            cursor[k] = 0;
        }
    }
}

/// Generates `spec.count` subarrays. Grid sampling repeats whole tilings
/// with fresh permutations and truncates the last one.
pub fn sample_subarrays(y: &SparseTensorCOO, spec: &SamplerSpec) -> Result<Vec<IndexSets>> {
    spec.validate(y.shape())?;
    let mut rng = substream(spec.seed, Purpose::Sampler, 0);
    match spec.strategy {
        Strategy::Uniform => (0..spec.count)
            .map(|_| sample_uniform(y.shape(), &spec.sub_shape, &mut rng))
            .collect(),
        Strategy::Weighted => (0..spec.count)
            .map(|_| sample_weighted(y, &spec.sub_shape, &mut rng))
            .collect(),
        Strategy::Grid => {
            let mut out = Vec::with_capacity(spec.count);
            while out.len() < spec.count {
                let tiling = sample_grid(y.shape(), &spec.sub_shape, &mut rng)?;
                let need = spec.count - out.len();
                out.extend(tiling.into_iter().take(need));
            }
            Ok(out)
        }
    }
}

/// Shuffles, then deals round-robin into `n` groups (sizes differ by at most one).
pub fn partition_groups<T, R: Rng + ?Sized>(
    mut items: Vec<T>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    if n == 0 {
        return Err(Error::Config("group count must be at least 1".into()));
    }
    items.shuffle(rng);
    let mut groups: Vec<Vec<T>> = (0..n).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        groups[i % n].push(item);
    }
    Ok(groups)
}
