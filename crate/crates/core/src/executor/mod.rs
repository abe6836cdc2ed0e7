//! The outer training loop: map (one [`vb_sgd`] pass per group, in
//! parallel), reduce (average of the group factors), repeated for a fixed
//! number of rounds.
//!
//! Workers run in-process on a rayon pool, but the map/reduce boundary is
//! kept honest: every group's factors are serialized and deserialized
//! through the checkpoint codec before they are averaged. Each group owns
//! a random stream derived from the master seed and its id, and results
//! are collected in group order, so the output does not depend on the
//! number of threads.

pub mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{vb_sgd, FactorRole, FactorSet, GroupResult, GroupState, SgdParams};
use crate::kernel::KernelSpec;
use crate::rng::{substream, Purpose, RngState};
use crate::sampler::{partition_groups, sample_subarrays, SamplerSpec};
use crate::tensor::{Shape, SparseTensorCOO};

use self::checkpoint::{decode_factors, encode_factors, Checkpoint};

pub const DEFAULT_ROUNDS: usize = 5;
/// Standard deviation of the initial factor entries.
pub const INIT_SCALE: f64 = 0.1;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Shared rank of every mode's factor matrix.
    pub rank: usize,
    pub lambda: f64,
    pub eta: f64,
    pub kernel: KernelSpec,
    pub sampler: SamplerSpec,
    pub groups: usize,
    pub rounds: usize,
    pub estep_sweeps: usize,
    pub seed: u64,
    /// Where checkpoints and metrics go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
    pub parallelism: usize,
    /// Keep each group's factors across rounds instead of restarting from U.
    pub persist_group_factors: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rank", self.rank),
            ("groups", self.groups),
            ("rounds", self.rounds),
            ("parallelism", self.parallelism),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        self.sgd_params().validate()
    }

    pub fn sgd_params(&self) -> SgdParams {
        SgdParams {
            eta: self.eta,
            lambda: self.lambda,
            kernel: self.kernel,
            estep_sweeps: self.estep_sweeps,
        }
    }

    /// SHA-256 over every setting that influences the numbers. Round count,
    /// parallelism and paths are left out so a run can be extended or
    /// resumed on a different machine.
    pub fn fingerprint(&self) -> [u8; 32] {
        let canonical = format!(
            "rank={}\nlambda={:e}\neta={:e}\nkernel={:?}/{:e}/{:e}/{:e}\nsampler={:?}\n\
             groups={}\nsweeps={}\nseed={}\npersist={}\n",
            self.rank,
            self.lambda,
            self.eta,
            self.kernel.family,
            self.kernel.lengthscale,
            self.kernel.variance,
            self.kernel.effective_jitter(),
            self.sampler,
            self.groups,
            self.estep_sweeps,
            self.seed,
            self.persist_group_factors
        );
        Sha256::digest(canonical.as_bytes()).into()
    }
}

/// Entries i.i.d. `N(0, 0.1²)`, mode by mode in row-major order.
pub fn init_factors(shape: &Shape, rank: usize, seed: u64) -> Result<FactorSet> {
    if rank == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    let mut rng = substream(seed, Purpose::Init, 0);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid scale");
    let mats = shape
        .dims()
        .iter()
        .map(|&m| {
            let data: Vec<f64> = (0..m * rank).map(|_| normal.sample(&mut rng)).collect();
            DMatrix::from_row_slice(m, rank, &data)
        })
        .collect();
    FactorSet::new(mats, FactorRole::Common)
}

/// Runs [`vb_sgd`] on every group with `common` broadcast read-only.
/// Results come back in group order; the first failing group (by order)
/// aborts the round.
pub fn run_round(
    common: &FactorSet,
    groups: &mut [GroupState],
    data: &SparseTensorCOO,
    cfg: &TrainConfig,
) -> Result<Vec<GroupResult>> {
    if groups.is_empty() {
        return Err(Error::Config("no groups to run".into()));
    }
    let params = cfg.sgd_params();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<GroupResult>> = pool.install(|| {
        groups
            .par_iter_mut()
            .map(|g| {
                let id = g.id;
                let mut out = vb_sgd(g, data, common, &params, cfg.persist_group_factors)
                    .map_err(|e| e.in_group(id))?;
                // the map output crosses a serialization boundary
                out.factors = decode_factors(&encode_factors(&out.factors), FactorRole::Group(id))
                    .map_err(|e| e.in_group(id))?;
                Ok(out)
            })
            .collect()
    });
    results.into_iter().collect()
}

fn group_label(f: &FactorSet, position: usize) -> usize {
    match f.role() {
        FactorRole::Group(id) => id,
        FactorRole::Common => position,
    }
}

/// Entrywise mean of the group factors.
///
/// Each entry is summed in sorted order, which makes the result exactly
/// invariant to the order of the inputs.
pub fn reduce_average(tilde: &[FactorSet]) -> Result<FactorSet> {
    let first = tilde
        .first()
        .ok_or_else(|| Error::Config("nothing to average".into()))?;
    for (pos, f) in tilde.iter().enumerate().skip(1) {
        first
            .check_compatible(f)
            .map_err(|e| e.in_group(group_label(f, pos)))?;
    }
    let n = tilde.len() as f64;
    let mut buf = Vec::with_capacity(tilde.len());
    let mats = (0..first.ndims())
        .map(|k| {
            let (rows, cols) = first.mode(k).shape();
            DMatrix::from_fn(rows, cols, |i, j| {
                buf.clear();
                buf.extend(tilde.iter().map(|f| f.mode(k)[(i, j)]));
                buf.sort_by(f64::total_cmp);
                buf.iter().sum::<f64>() / n
            })
        })
        .collect();
    FactorSet::new(mats, FactorRole::Common)
}

/// Per-round summary written to the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub mean_objective: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

impl RoundMetrics {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.round, self.mean_objective, self.grad_norm, self.seconds
        )
    }
}

/// Controls that do not change the numbers.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in `checkpoint_dir` if one exists.
    pub resume: bool,
    /// Stop after this many completed rounds (counting resumed ones).
    pub stop_after: Option<usize>,
    /// Record the common factors after every round.
    pub keep_history: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub factors: FactorSet,
    pub rounds_completed: usize,
    pub metrics: Vec<RoundMetrics>,
    pub history: Vec<FactorSet>,
}

/// Trains for `cfg.rounds` rounds and returns the common factors.
pub fn train(data: &SparseTensorCOO, cfg: &TrainConfig) -> Result<FactorSet> {
    Ok(train_with(data, cfg, &TrainOptions::default())?.factors)
}

fn build_groups(
    data: &SparseTensorCOO,
    cfg: &TrainConfig,
    common: &FactorSet,
) -> Result<Vec<GroupState>> {
    let subarrays = sample_subarrays(data, &cfg.sampler)?;
    let mut rng = substream(cfg.seed, Purpose::Partition, 0);
    let parts = partition_groups(subarrays, cfg.groups, &mut rng)?;
    Ok(parts
        .into_iter()
        .enumerate()
        .map(|(id, subarrays)| GroupState {
            id,
            subarrays,
            factors: common.clone().with_role(FactorRole::Group(id)),
            rng: substream(cfg.seed, Purpose::Group, id as u64),
        })
        .collect())
}

fn restore(
    path: &Path,
    cfg: &TrainConfig,
    common: &mut FactorSet,
    groups: &mut [GroupState],
) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash != cfg.fingerprint() {
        return Err(Error::Checkpoint(
            "checkpoint was written with a different configuration".into(),
        ));
    }
    if ck.rng_states.len() != groups.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} groups, configuration has {}",
            ck.rng_states.len(),
            groups.len()
        )));
    }
    common.check_compatible(&ck.factors)?;
    *common = ck.factors;
    for (g, s) in groups.iter_mut().zip(&ck.rng_states) {
        g.rng = s.restore();
    }
    if let Some(saved) = ck.group_factors {
        for (g, f) in groups.iter_mut().zip(saved) {
            g.factors = f.with_role(FactorRole::Group(g.id));
        }
    }
    Ok(ck.round)
}

fn write_metrics(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for m in metrics {
        writeln!(f, "{}", m.tsv_line())?;
    }
    Ok(())
}

fn read_metrics(path: &Path, keep: usize) -> Vec<RoundMetrics> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter_map(|line| {
            let v: Vec<&str> = line.split('\t').collect();
            Some(RoundMetrics {
                round: v.first()?.parse().ok()?,
                mean_objective: v.get(1)?.parse().ok()?,
                grad_norm: v.get(2)?.parse().ok()?,
                seconds: v.get(3)?.parse().ok()?,
            })
        })
        .take(keep)
        .collect()
}

/// [`train`] with resume, early stop and per-round history.
pub fn train_with(
    data: &SparseTensorCOO,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.nnz() == 0 {
        return Err(Error::Config("training data has no nonzero entries".into()));
    }
    let mut common = init_factors(data.shape(), cfg.rank, cfg.seed)?;
    let mut groups = build_groups(data, cfg, &common)?;

    let dir = cfg.checkpoint_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let ck_path = dir.map(|d| d.join(CHECKPOINT_FILE));
    let metrics_path = dir.map(|d| d.join(METRICS_FILE));

    let mut start = 0;
    if opts.resume {
        if let Some(p) = ck_path.as_deref().filter(|p| p.exists()) {
            start = restore(p, cfg, &mut common, &mut groups)?;
            log::info!("resuming after round {start}");
        }
    }
    let mut metrics = match &metrics_path {
        Some(p) if start > 0 => read_metrics(p, start),
        _ => Vec::new(),
    };
    let mut history = Vec::new();
    let end = opts.stop_after.map_or(cfg.rounds, |s| s.min(cfg.rounds));

    for round in start..end {
        let t0 = Instant::now();
        let results = run_round(&common, &mut groups, data, cfg)?;
        let steps: Vec<_> = results.iter().flat_map(|r| r.steps.iter().copied()).collect();
        let denom = steps.len().max(1) as f64;
        let tilde: Vec<FactorSet> = results.into_iter().map(|r| r.factors).collect();
        common = reduce_average(&tilde)?;
        if !common.is_finite() {
            return Err(Error::Numeric(format!("factors diverged in round {}", round + 1)));
        }
        let m = RoundMetrics {
            round: round + 1,
            mean_objective: steps.iter().map(|s| s.objective).sum::<f64>() / denom,
            grad_norm: steps.iter().map(|s| s.grad_norm).sum::<f64>() / denom,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {}: objective {:.4} grad_norm {:.4e} ({:.2}s)",
            m.round,
            m.mean_objective,
            m.grad_norm,
            m.seconds
        );
        metrics.push(m);
        if opts.keep_history {
            history.push(common.clone());
        }
        if let (Some(ck), Some(mp)) = (&ck_path, &metrics_path) {
            write_metrics(mp, &metrics)?;
            Checkpoint {
                round: round + 1,
                config_hash: cfg.fingerprint(),
                factors: common.clone(),
                rng_states: groups.iter().map(|g| RngState::capture(&g.rng)).collect(),
                group_factors: cfg
                    .persist_group_factors
                    .then(|| groups.iter().map(|g| g.factors.clone()).collect()),
            }
            .save(ck)?;
        }
    }
    Ok(TrainReport {
        factors: common,
        rounds_completed: end.max(start),
        metrics,
        history,
    })
}
