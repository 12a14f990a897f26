//! One module per subcommand. Each `run` returns the human-readable summary
//! printed to stdout; structured output goes to the `--out` path.

use std::path::Path;

use care_core::calibration::{shrunk_whitener, ShrinkageParams, Weighting};
use care_core::Matrix;
use clap::{Args, Subcommand};

use crate::ctf;
use crate::error::{validation, CliError, Result};
use crate::manifest::{parse_lambda, parse_weighting, WhitenerSettings};

pub mod ablate;
pub mod convert;
pub mod cov;
pub mod eval;
pub mod gen;
pub mod kv_report;
pub mod schedule;

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic GQA model and calibration batches.
    Gen(gen::GenArgs),
    /// Accumulate per-layer input covariances from calibration batches.
    Cov(cov::CovArgs),
    /// Allocate per-layer K/V ranks under a budget.
    Schedule(schedule::ScheduleArgs),
    /// Factorize each layer into MLA down/up projections.
    Convert(convert::ConvertArgs),
    /// Compare a converted model against its source.
    Eval(eval::EvalArgs),
    /// Tabulate KV-cache memory for a set of per-token widths.
    KvReport(kv_report::KvReportArgs),
    /// Zero one singular value of a layer's K or V map and measure the effect.
    Ablate(ablate::AblateArgs),
}

pub fn run(command: &Command) -> Result<String> {
    match command {
        Command::Gen(a) => gen::run(a),
        Command::Cov(a) => cov::run(a),
        Command::Schedule(a) => schedule::run(a),
        Command::Convert(a) => convert::run(a),
        Command::Eval(a) => eval::run(a),
        Command::KvReport(a) => kv_report::run(a),
        Command::Ablate(a) => ablate::run(a),
    }
}

/// Shrinkage and weighting flags shared by `schedule` and `convert`.
#[derive(Debug, Clone, Args)]
pub struct WhitenerArgs {
    /// Shrinkage weight α in (0, 1).
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Shrinkage target: "auto" (mean eigenvalue) or a positive number.
    #[arg(long, default_value = "auto")]
    pub lambda: String,
    /// Whitening operator: sqrtC or C.
    #[arg(long, default_value = "sqrtC")]
    pub weighting: String,
}

impl Default for WhitenerArgs {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            lambda: "auto".into(),
            weighting: "sqrtC".into(),
        }
    }
}

impl WhitenerArgs {
    pub fn resolve(&self) -> Result<(Weighting, ShrinkageParams)> {
        let params = ShrinkageParams::new(self.alpha, parse_lambda(&self.lambda)?)?;
        Ok((parse_weighting(&self.weighting)?, params))
    }

    pub fn settings(&self) -> Result<WhitenerSettings> {
        let (w, p) = self.resolve()?;
        Ok(WhitenerSettings::new(w, &p))
    }

    pub fn whitener(&self, c: &Matrix) -> Result<Matrix> {
        let (w, p) = self.resolve()?;
        Ok(shrunk_whitener(c, &p, w)?)
    }
}

pub(crate) fn covariance_path(dir: &Path, layer: usize) -> std::path::PathBuf {
    dir.join(format!("layer{layer}.ctf"))
}

pub(crate) fn load_covariance(dir: &Path, layer: usize, d_model: usize) -> Result<Matrix> {
    let path = covariance_path(dir, layer);
    let c = ctf::read_matrix(&path)?;
    if c.shape() != (d_model, d_model) {
        return Err(CliError::format(
            &path,
            format!(
                "covariance is {:?}, expected {d_model}x{d_model}",
                c.shape()
            ),
        ));
    }
    Ok(c)
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn require_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(validation(format!("--{name} must be positive")));
    }
    Ok(())
}
