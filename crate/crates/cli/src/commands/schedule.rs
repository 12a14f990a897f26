use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use care_core::scheduler::{
    default_min_rank, uniform_profile, waterfill, whitened_spectrum, Kind, RankProfile,
    SpectrumTable,
};
use clap::{Args, ValueEnum};

use super::{load_covariance, WhitenerArgs};
use crate::error::{validation, Result};
use crate::manifest::{write_json, LoadedModel, RankProfileFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Same rank for every layer.
    Uniform,
    /// Water-filling over whitened spectra.
    Adjusted,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Uniform => "uniform",
            Mode::Adjusted => "adjusted",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of layer{l}.ctf covariances.
    #[arg(long)]
    pub cov: PathBuf,
    /// Total K rank across layers.
    #[arg(long)]
    pub budget_k: Option<usize>,
    /// Total V rank across layers.
    #[arg(long)]
    pub budget_v: Option<usize>,
    /// Per-entry floor; defaults to 64 when every entry allows it, else 1.
    #[arg(long)]
    pub min_rank: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Adjusted)]
    pub mode: Mode,
    /// Per-layer rank in uniform mode; defaults to budget / layers.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Set both budgets to Σ_l g_h·d_h, the width of the source KV cache.
    #[arg(long)]
    pub parity: bool,
    #[command(flatten)]
    pub whitener: WhitenerArgs,
    /// Output profile path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Whitened K and V spectra of every layer.
pub fn layer_spectra(
    model: &LoadedModel,
    cov_dir: &Path,
    whitener: &WhitenerArgs,
) -> Result<SpectrumTable> {
    let mut table = SpectrumTable::new();
    for entry in &model.manifest.layers {
        let l = entry.index;
        let layer = model.gqa_layer(l)?;
        let s = whitener.whitener(&load_covariance(cov_dir, l, entry.d_model)?)?;
        table.insert(l, Kind::K, whitened_spectrum(&s, &layer.replicated_k()?)?)?;
        table.insert(l, Kind::V, whitened_spectrum(&s, &layer.replicated_v()?)?)?;
    }
    Ok(table)
}

fn budgets(a: &ScheduleArgs, model: &LoadedModel) -> Result<(Option<usize>, Option<usize>)> {
    if a.parity {
        if a.budget_k.is_some() || a.budget_v.is_some() {
            return Err(validation(
                "--parity sets both budgets; do not combine it with --budget-k/--budget-v",
            ));
        }
        let b: usize = model.manifest.layers.iter().map(|l| l.kv_width()).sum();
        return Ok((Some(b), Some(b)));
    }
    Ok((a.budget_k, a.budget_v))
}

pub fn build_profile(
    a: &ScheduleArgs,
    model: &LoadedModel,
    spectra: &SpectrumTable,
) -> Result<RankProfile> {
    let (bk, bv) = budgets(a, model)?;
    let n = model.manifest.num_layers;
    match a.mode {
        Mode::Uniform => {
            if a.min_rank.is_some() {
                return Err(validation("--min-rank applies to adjusted mode only"));
            }
            let per_layer = |budget: Option<usize>| -> Result<usize> {
                a.rank
                    .or(budget.map(|b| b / n))
                    .ok_or_else(|| validation("uniform mode needs --rank, --parity or budgets"))
            };
            let k = uniform_profile(spectra, Kind::K, per_layer(bk)?)?;
            let v = uniform_profile(spectra, Kind::V, per_layer(bv)?)?;
            Ok(RankProfile::from_allocations(&k, &v)?)
        }
        Mode::Adjusted => {
            if a.rank.is_some() {
                return Err(validation("--rank applies to uniform mode only"));
            }
            let (Some(bk), Some(bv)) = (bk, bv) else {
                return Err(validation(
                    "adjusted mode needs --budget-k and --budget-v, or --parity",
                ));
            };
            let min_rank = a
                .min_rank
                .unwrap_or_else(|| default_min_rank(spectra, bk, bv));
            let k = waterfill(spectra, Kind::K, bk, min_rank)?;
            let v = waterfill(spectra, Kind::V, bv, min_rank)?;
            Ok(RankProfile::from_allocations(&k, &v)?)
        }
    }
}

pub fn run(a: &ScheduleArgs) -> Result<String> {
    let model = LoadedModel::load(&a.manifest)?;
    let spectra = layer_spectra(&model, &a.cov, &a.whitener)?;
    let profile = build_profile(a, &model, &spectra)?;
    let file = RankProfileFile::from_profile(&profile, a.mode.name(), a.whitener.settings()?);
    write_json(&a.out, &file)?;

    let mut s = String::new();
    writeln!(
        s,
        "{} profile, min_rank {}, budgets K={} V={}",
        a.mode.name(),
        profile.min_rank,
        profile.budget_k,
        profile.budget_v
    )
    .unwrap();
    for l in profile.layers() {
        writeln!(
            s,
            "layer {l}: r_k = {}, r_v = {}",
            profile.rank(l, Kind::K).unwrap_or(0),
            profile.rank(l, Kind::V).unwrap_or(0)
        )
        .unwrap();
    }
    write!(s, "profile written to {}", a.out.display()).unwrap();
    Ok(s)
}
