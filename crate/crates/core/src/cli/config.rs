//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional except
//! where a command needs it (`rank` for training, `sampler.sub_shape` for
//! training and prediction, `shape` for synthetic data).

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::executor::{TrainConfig, DEFAULT_ROUNDS};
use crate::kernel::{KernelFamily, KernelSpec, MaternOrder};
use crate::predict::{BagSpec, DEFAULT_BAGS};
use crate::sampler::{SamplerSpec, Strategy};
use crate::tensor::Shape;

pub const KEYS: &[&str] = &[
    "rank",
    "lambda",
    "eta",
    "kernel.family",
    "kernel.lengthscale",
    "kernel.variance",
    "kernel.degree",
    "kernel.bias",
    "kernel.matern_order",
    "kernel.jitter",
    "sampler.strategy",
    "sampler.sub_shape",
    "sampler.count",
    "groups",
    "rounds",
    "seed",
    "bags",
    "parallelism",
    "estep.sweeps",
    "persist_group_factors",
    "shape",
    "eval.folds",
    "eval.zero_fraction",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rank: Option<usize>,
    pub lambda: f64,
    pub eta: f64,
    pub kernel: KernelSpec,
    pub strategy: Strategy,
    pub sub_shape: Option<Vec<usize>>,
    pub count: usize,
    pub groups: usize,
    pub rounds: usize,
    pub seed: u64,
    pub bags: usize,
    pub parallelism: usize,
    pub estep_sweeps: usize,
    pub persist_group_factors: bool,
    /// Array shape for synthetic generation.
    pub shape: Option<Vec<usize>>,
    pub eval_folds: usize,
    pub eval_zero_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let eval = EvalProtocol::default();
        RunConfig {
            rank: None,
            lambda: 1.0,
            eta: 0.01,
            kernel: KernelSpec::rbf(1.0),
            strategy: Strategy::Weighted,
            sub_shape: None,
            count: 100,
            groups: 1,
            rounds: DEFAULT_ROUNDS,
            seed: 0,
            bags: DEFAULT_BAGS,
            parallelism: 1,
            estep_sweeps: 3,
            persist_group_factors: false,
            shape: None,
            eval_folds: eval.folds,
            eval_zero_fraction: eval.zero_fraction,
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid value '{v}' for {key}"),
    })
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(|c: char| c.is_whitespace() || c == 'x' || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("invalid value '{v}' for {key}, expected true or false"),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        // family-specific settings are applied after the family is known
        let mut family = None;
        let mut degree = 2u32;
        let mut bias = 1.0;
        let mut order = MaternOrder::FiveHalves;

        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected 'key = value', got '{content}'"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key '{key}'"),
                });
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("key '{key}' already set at line {first}"),
                });
            }
            seen.push((key.to_string(), line));
            match key {
                "rank" => cfg.rank = Some(parse_num(line, key, v)?),
                "lambda" => cfg.lambda = parse_num(line, key, v)?,
                "eta" => cfg.eta = parse_num(line, key, v)?,
                "kernel.family" => {
                    family = Some(match v {
                        "linear" | "rbf" | "polynomial" | "matern" => v.to_string(),
                        _ => {
                            return Err(Error::Parse {
                                line,
                                msg: format!("unknown kernel family '{v}'"),
                            })
                        }
                    })
                }
                "kernel.lengthscale" => cfg.kernel.lengthscale = parse_num(line, key, v)?,
                "kernel.variance" => cfg.kernel.variance = parse_num(line, key, v)?,
                "kernel.degree" => degree = parse_num(line, key, v)?,
                "kernel.bias" => bias = parse_num(line, key, v)?,
                "kernel.matern_order" => {
                    order = match v {
                        "3/2" | "1.5" => MaternOrder::ThreeHalves,
                        "5/2" | "2.5" => MaternOrder::FiveHalves,
                        _ => {
                            return Err(Error::Parse {
                                line,
                                msg: format!("matern order must be 3/2 or 5/2, got '{v}'"),
                            })
                        }
                    }
                }
                "kernel.jitter" => cfg.kernel.jitter = Some(parse_num(line, key, v)?),
                "sampler.strategy" => {
                    cfg.strategy = v.parse().map_err(|e: Error| Error::Parse {
                        line,
                        msg: e.to_string(),
                    })?
                }
                "sampler.sub_shape" => cfg.sub_shape = Some(parse_list(line, key, v)?),
                "sampler.count" => cfg.count = parse_num(line, key, v)?,
                "groups" => cfg.groups = parse_num(line, key, v)?,
                "rounds" => cfg.rounds = parse_num(line, key, v)?,
                "seed" => cfg.seed = parse_num(line, key, v)?,
                "bags" => cfg.bags = parse_num(line, key, v)?,
                "parallelism" => cfg.parallelism = parse_num(line, key, v)?,
                "estep.sweeps" => cfg.estep_sweeps = parse_num(line, key, v)?,
                "persist_group_factors" => cfg.persist_group_factors = parse_bool(line, key, v)?,
                "shape" => cfg.shape = Some(parse_list(line, key, v)?),
                "eval.folds" => cfg.eval_folds = parse_num(line, key, v)?,
                "eval.zero_fraction" => cfg.eval_zero_fraction = parse_num(line, key, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.kernel.family = match family.as_deref().unwrap_or("rbf") {
            "linear" => KernelFamily::Linear,
            "polynomial" => KernelFamily::Polynomial { degree, bias },
            "matern" => KernelFamily::Matern(order),
            _ => KernelFamily::Rbf,
        };
        cfg.kernel.validate()?;
        Ok(cfg)
    }

    /// Every setting, defaults included, in the input format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let k = &self.kernel;
        if let Some(r) = self.rank {
            let _ = writeln!(s, "rank = {r}");
        }
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "eta = {}", self.eta);
        let family = match k.family {
            KernelFamily::Linear => "linear",
            KernelFamily::Rbf => "rbf",
            KernelFamily::Polynomial { .. } => "polynomial",
            KernelFamily::Matern(_) => "matern",
        };
        let _ = writeln!(s, "kernel.family = {family}");
        let _ = writeln!(s, "kernel.lengthscale = {}", k.lengthscale);
        let _ = writeln!(s, "kernel.variance = {}", k.variance);
        match k.family {
            KernelFamily::Polynomial { degree, bias } => {
                let _ = writeln!(s, "kernel.degree = {degree}");
                let _ = writeln!(s, "kernel.bias = {bias}");
            }
            KernelFamily::Matern(o) => {
                let o = match o {
                    MaternOrder::ThreeHalves => "3/2",
                    MaternOrder::FiveHalves => "5/2",
                };
                let _ = writeln!(s, "kernel.matern_order = {o}");
            }
            _ => {}
        }
        let _ = writeln!(s, "kernel.jitter = {}", k.effective_jitter());
        let _ = writeln!(s, "sampler.strategy = {}", self.strategy);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        if let Some(sub) = &self.sub_shape {
            let _ = writeln!(s, "sampler.sub_shape = {}", list(sub));
        }
        let _ = writeln!(s, "sampler.count = {}", self.count);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "bags = {}", self.bags);
        let _ = writeln!(s, "parallelism = {}", self.parallelism);
        let _ = writeln!(s, "estep.sweeps = {}", self.estep_sweeps);
        let _ = writeln!(s, "persist_group_factors = {}", self.persist_group_factors);
        if let Some(shape) = &self.shape {
            let _ = writeln!(s, "shape = {}", list(shape));
        }
        let _ = writeln!(s, "eval.folds = {}", self.eval_folds);
        let _ = writeln!(s, "eval.zero_fraction = {}", self.eval_zero_fraction);
        s
    }

    fn required<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
        v.clone()
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn rank(&self) -> Result<usize> {
        Self::required(&self.rank, "rank")
    }

    pub fn sub_shape(&self) -> Result<Vec<usize>> {
        Self::required(&self.sub_shape, "sampler.sub_shape")
    }

    pub fn synth_shape(&self) -> Result<Shape> {
        Shape::new(Self::required(&self.shape, "shape")?)
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            rank: self.rank()?,
            lambda: self.lambda,
            eta: self.eta,
            kernel: self.kernel,
            sampler: SamplerSpec {
                strategy: self.strategy,
                sub_shape: self.sub_shape()?,
                count: self.count,
                seed: self.seed,
            },
            groups: self.groups,
            rounds: self.rounds,
            estep_sweeps: self.estep_sweeps,
            seed: self.seed,
            checkpoint_dir,
            parallelism: self.parallelism,
            persist_group_factors: self.persist_group_factors,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bag_spec(&self) -> Result<BagSpec> {
        Ok(BagSpec {
            bags: self.bags,
            sub_shape: self.sub_shape()?,
            kernel: self.kernel,
            estep_sweeps: self.estep_sweeps,
        })
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            folds: self.eval_folds,
            zero_fraction: self.eval_zero_fraction,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "\
# comment
rank = 3
lambda = 0.5   # trailing comment
eta = 0.02
kernel.family = matern
kernel.matern_order = 3/2
kernel.lengthscale = 2
kernel.variance = 1.5
kernel.jitter = 1e-4
sampler.strategy = grid
sampler.sub_shape = 10 10 5
sampler.count = 40
groups = 4
rounds = 7
seed = 11
bags = 3
parallelism = 2
estep.sweeps = 4
persist_group_factors = true
shape = 30x30x20
eval.folds = 4
eval.zero_fraction = 0.01
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.rank, Some(3));
        assert_eq!(c.kernel.family, KernelFamily::Matern(MaternOrder::ThreeHalves));
        assert_eq!(c.kernel.jitter, Some(1e-4));
        assert_eq!(c.strategy, Strategy::Grid);
        assert_eq!(c.sub_shape, Some(vec![10, 10, 5]));
        assert_eq!(c.shape, Some(vec![30, 30, 20]));
        assert!(c.persist_group_factors);
        assert_eq!(c.eval_folds, 4);
        // the materialized form parses back to the same settings
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn defaults_round_trip_with_jitter_materialized() {
        let c = RunConfig::parse("rank = 2\nsampler.sub_shape = 2 2").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back.kernel.jitter, Some(c.kernel.effective_jitter()));
        assert_eq!(
            back.train_config(None).unwrap().fingerprint(),
            c.train_config(None).unwrap().fingerprint()
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = |t: &str| match RunConfig::parse(t) {
            Err(Error::Parse { line, msg }) => (line, msg),
            other => panic!("{other:?}"),
        };
        assert_eq!(err("rank = 2\n\nfoo = 1").0, 3);
        let (line, msg) = err("rank = 2\nrank = 3");
        assert_eq!(line, 2);
        assert!(msg.contains("line 1"));
        assert_eq!(err("rank = two").0, 1);
        assert_eq!(err("# x\nrank").0, 2);
        assert_eq!(err("kernel.family = cubic").0, 1);
    }

    #[test]
    fn missing_rank_is_named() {
        let c = RunConfig::parse("sampler.sub_shape = 2 2").unwrap();
        match c.train_config(None) {
            Err(Error::Config(msg)) => assert!(msg.contains("'rank'")),
            other => panic!("{other:?}"),
        }
    }
}
