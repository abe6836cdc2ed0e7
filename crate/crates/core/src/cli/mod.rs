//! The command-line workflow: `train`, `predict`, `eval`, `synth` and
//! `split`. Each command is a plain function so it can be driven from tests
//! as well as from the binary.

pub mod config;
pub mod io;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{auc, split_eval};
use crate::executor::{train_with, TrainOptions, TrainReport, CHECKPOINT_FILE, METRICS_FILE};
use crate::predict::predict_chunked;
use crate::rng::{substream, Purpose};
use crate::synth::synth_generate;

use self::config::RunConfig;
use self::io::{
    format_queries, format_scores, parse_queries, parse_valued_rows, read_data, read_factors,
    write_data, write_factors,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DATA_FILE: &str = "data.txt";
pub const TRUTH_DIR: &str = "truth";

/// Process exit status for an error: 4 for numerical failures, 3 for
/// everything caused by inputs (2 is left to argument parsing).
pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Resolved configuration plus input digests and output paths. The file is
/// itself a valid configuration: everything but the settings is a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[&Path]) -> Result<RunManifest> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.to_path_buf(), sha256_hex(&fs::read(p)?))))
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            command: command.to_string(),
            config: config.clone(),
            inputs,
            outputs: Vec::new(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# tensorgp {} run manifest\n# command: {}\n",
            env!("CARGO_PKG_VERSION"),
            self.command
        );
        for (p, digest) in &self.inputs {
            let _ = writeln!(s, "# input: {} sha256={digest}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "# output: {}", p.display());
        }
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&fs::read_to_string(path)?)
}

/// Trains on `data` and writes `factor_<k>.txt`, the checkpoint, the
/// metrics and the manifest into `out`.
pub fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let rc = read_config(config)?;
    let y = read_data(data)?;
    let cfg = rc.train_config(Some(out.to_path_buf()))?;
    fs::create_dir_all(out)?;

    let mut manifest = RunManifest::new("train", &rc, &[config, data])?;
    manifest.outputs = (0..y.shape().ndims())
        .map(|k| io::factor_path(out, k))
        .chain([out.join(CHECKPOINT_FILE), out.join(METRICS_FILE)])
        .collect();
    manifest.write(&out.join(MANIFEST_FILE))?;

    let report = train_with(&y, &cfg, opts)?;
    write_factors(out, &report.factors)?;
    Ok(report)
}

/// Scores every query line and writes `i1 .. iK score` lines in query order.
pub fn cmd_predict(
    factors: &Path,
    data: &Path,
    queries: &Path,
    config: &Path,
    out: &Path,
) -> Result<Vec<f64>> {
    let rc = read_config(config)?;
    let u = read_factors(factors)?;
    let y = read_data(data)?;
    let q = parse_queries(&fs::read_to_string(queries)?, y.shape())?;
    let spec = rc.bag_spec()?;
    let mut rng = substream(rc.seed, Purpose::Predict, 0);
    let scores = predict_chunked(&u, &y, &q, &spec, &mut rng)?;
    fs::write(out, format_scores(&q, &scores))?;
    Ok(scores)
}

/// AUC of a scores file against a labels file (`i1 .. iK label`, or just
/// one label per line). Prints nothing; the caller formats the result.
pub fn cmd_eval(scores: &Path, labels: &Path, metrics_out: Option<&Path>) -> Result<f64> {
    let s = parse_valued_rows(&fs::read_to_string(scores)?)?;
    let l = parse_valued_rows(&fs::read_to_string(labels)?)?;
    if s.len() != l.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            s.len(),
            l.len()
        )));
    }
    let mut lab = Vec::with_capacity(l.len());
    for (n, ((si, _), (li, lv))) in s.iter().zip(&l).enumerate() {
        if !li.is_empty() && si != li {
            return Err(Error::Shape(format!(
                "entry {}: scores and labels list different coordinates",
                n + 1
            )));
        }
        lab.push(match *lv {
            1.0 => true,
            0.0 => false,
            v => {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("label {v} is not 0 or 1"),
                })
            }
        });
    }
    let scores: Vec<f64> = s.iter().map(|(_, v)| *v).collect();
    let a = auc(&scores, &lab)?;
    if let Some(p) = metrics_out {
        let pos = lab.iter().filter(|&&b| b).count();
        fs::write(
            p,
            format!("auc={a:.6}\npositives={pos}\nnegatives={}\n", lab.len() - pos),
        )?;
    }
    Ok(a)
}

/// Writes `data.txt` and the generating factors under `truth/`.
pub fn cmd_synth(config: &Path, out: &Path) -> Result<PathBuf> {
    let rc = read_config(config)?;
    let shape = rc.synth_shape()?;
    fs::create_dir_all(out)?;
    let data_path = out.join(DATA_FILE);
    let mut manifest = RunManifest::new("synth", &rc, &[config])?;
    manifest.outputs = vec![data_path.clone(), out.join(TRUTH_DIR)];
    manifest.write(&out.join(MANIFEST_FILE))?;

    let (y, truth) = synth_generate(&shape, rc.rank()?, &rc.kernel, rc.seed)?;
    write_data(&data_path, &y)?;
    write_factors(&out.join(TRUTH_DIR), &truth)?;
    Ok(data_path)
}

/// Writes `train.txt` and `test.txt` (labelled queries) for one fold
/// (1-based) of the held-out protocol.
pub fn cmd_split(config: &Path, data: &Path, fold: usize, out: &Path) -> Result<()> {
    let rc = read_config(config)?;
    let y = read_data(data)?;
    let protocol = rc.eval_protocol();
    if fold == 0 || fold > protocol.folds {
        return Err(Error::Config(format!(
            "fold must lie in 1..={}, got {fold}",
            protocol.folds
        )));
    }
    let (train, test) = split_eval(&y, &protocol)?.swap_remove(fold - 1);
    fs::create_dir_all(out)?;
    write_data(&out.join("train.txt"), &train)?;
    fs::write(out.join("test.txt"), format_queries(&test))?;
    Ok(())
}
