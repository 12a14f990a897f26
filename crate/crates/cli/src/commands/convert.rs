use std::fmt::Write as _;
use std::path::PathBuf;

use care_core::factorizer::{convert_layer, covariance_residual, FactorizationReport};
use care_core::rng::GaussianStream;
use care_core::scheduler::Kind;
use clap::Args;
use serde::Serialize;

use super::{create_dir, load_covariance, WhitenerArgs};
use crate::ctf;
use crate::error::{validation, Result};
use crate::manifest::{
    write_json, LoadedModel, MlaEntry, RankProfileFile, RopeEntry, WhitenerSettings,
};

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub cov: PathBuf,
    /// Rank profile from `schedule`.
    #[arg(long)]
    pub profile: PathBuf,
    #[command(flatten)]
    pub whitener: WhitenerArgs,
    /// Width of seeded rotary adapters to attach; 0 attaches none.
    #[arg(long, default_value_t = 0)]
    pub rope_dim: usize,
    /// Seed for the rotary adapters.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the converted model.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorSummary {
    pub rank: usize,
    pub weight_residual_sq: f64,
    pub whitened_residual_sq: f64,
    pub whitened_energy: f64,
    pub relative_whitened_residual: f64,
    pub activation_residual_sq: Option<f64>,
}

impl From<&FactorizationReport> for FactorSummary {
    fn from(r: &FactorizationReport) -> Self {
        Self {
            rank: r.rank_used,
            weight_residual_sq: r.weight_residual_sq,
            whitened_residual_sq: r.whitened_residual_sq,
            whitened_energy: r.whitened_energy,
            relative_whitened_residual: r.relative_whitened_residual(),
            activation_residual_sq: r.activation_residual_sq,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub k: FactorSummary,
    pub v: FactorSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvertReport {
    pub whitener: WhitenerSettings,
    pub rope_dim: usize,
    pub layers: Vec<LayerReport>,
}

pub const REPORT_FILE: &str = "convert_report.json";

pub fn run(a: &ConvertArgs) -> Result<String> {
    let source = LoadedModel::load(&a.manifest)?;
    let profile = RankProfileFile::load(&a.profile)?;
    if !a.rope_dim.is_multiple_of(2) {
        return Err(validation(format!(
            "--rope-dim {} must be even",
            a.rope_dim
        )));
    }
    let settings = a.whitener.settings()?;
    let mut manifest = source.manifest.clone();
    let mut reports = Vec::with_capacity(manifest.num_layers);
    let mut rng = GaussianStream::new(a.seed);
    create_dir(&a.out)?;

    for entry in &mut manifest.layers {
        let l = entry.index;
        let (Some(r_k), Some(r_v)) = (profile.rank(l, Kind::K), profile.rank(l, Kind::V)) else {
            return Err(validation(format!("profile has no ranks for layer {l}")));
        };
        let layer = source.gqa_layer(l)?;
        let c = load_covariance(&a.cov, l, entry.d_model)?;
        let mut conv = convert_layer(&layer, &a.whitener.whitener(&c)?, r_k, r_v)?;
        conv.report_k.activation_residual_sq = Some(covariance_residual(
            &c,
            &layer.replicated_k()?,
            &conv.factors.k_product()?,
        )?);
        conv.report_v.activation_residual_sq = Some(covariance_residual(
            &c,
            &layer.replicated_v()?,
            &conv.factors.v_product()?,
        )?);

        let path = |name: &str| format!("weights/layer{l}_{name}.ctf");
        entry.w_q = path("w_q");
        entry.w_k_g = path("w_k_g");
        entry.w_v_g = path("w_v_g");
        let f = &conv.factors;
        let mut mla = MlaEntry {
            r_k,
            r_v,
            w_a_k: path("w_a_k"),
            w_b_k: path("w_b_k"),
            w_a_v: path("w_a_v"),
            w_b_v: path("w_b_v"),
            rope: None,
        };
        for (rel, m) in [
            (&entry.w_q, &layer.w_q),
            (&entry.w_k_g, &layer.w_k_g),
            (&entry.w_v_g, &layer.w_v_g),
            (&mla.w_a_k, &f.w_a_k),
            (&mla.w_b_k, &f.w_b_k),
            (&mla.w_a_v, &f.w_a_v),
            (&mla.w_b_v, &f.w_b_v),
        ] {
            ctf::write_matrix(&a.out.join(rel), m)?;
        }
        if a.rope_dim > 0 {
            let d = entry.d_model;
            let std = 1.0 / (d as f64).sqrt();
            let rope = RopeEntry {
                rope_dim: a.rope_dim,
                w_r_q: path("w_r_q"),
                w_r_k: path("w_r_k"),
            };
            ctf::write_matrix(
                &a.out.join(&rope.w_r_q),
                &rng.matrix(d, entry.n_heads * a.rope_dim, std),
            )?;
            ctf::write_matrix(&a.out.join(&rope.w_r_k), &rng.matrix(d, a.rope_dim, std))?;
            mla.rope = Some(rope);
        }
        entry.mla = Some(mla);
        reports.push(LayerReport {
            layer: l,
            k: (&conv.report_k).into(),
            v: (&conv.report_v).into(),
        });
    }
    manifest.conversion = Some(settings.clone());
    write_json(&a.out.join("model.json"), &manifest)?;
    write_json(
        &a.out.join(REPORT_FILE),
        &ConvertReport {
            whitener: settings,
            rope_dim: a.rope_dim,
            layers: reports.clone(),
        },
    )?;

    let mut s = String::new();
    for r in &reports {
        writeln!(
            s,
            "layer {}: r_k = {} (rel. whitened residual {:.3e}), r_v = {} ({:.3e})",
            r.layer,
            r.k.rank,
            r.k.relative_whitened_residual,
            r.v.rank,
            r.v.relative_whitened_residual
        )
        .unwrap();
    }
    write!(s, "converted model: {}", a.out.join("model.json").display()).unwrap();
    Ok(s)
}
