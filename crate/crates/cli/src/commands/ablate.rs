use std::fmt::Write as _;
use std::path::PathBuf;

use care_core::attention::{gqa_forward, logit_drift, output_drift};
use care_core::factorizer::{ablate_singular_value, GqaLayer};
use care_core::linalg::svd;
use care_core::rng::GaussianStream;
use care_core::scheduler::Kind;
use clap::Args;
use serde::Serialize;

use super::require_positive;
use crate::error::{validation, Result};
use crate::manifest::{write_json, LoadedModel};

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub layer: usize,
    /// k or v.
    #[arg(long)]
    pub kind: String,
    /// 1-based singular value index.
    #[arg(long)]
    pub index: usize,
    /// Seed for the probe tokens.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of probe tokens.
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub layer: usize,
    pub kind: String,
    pub index: usize,
    pub sigma: f64,
    pub weight_residual_sq: f64,
    pub logit_drift_max: f64,
    pub logit_drift_frob: f64,
    pub output_drift_max: f64,
    pub seed: u64,
    pub tokens: usize,
}

pub fn ablate(a: &AblateArgs) -> Result<AblationReport> {
    require_positive("tokens", a.tokens)?;
    let kind: Kind = a.kind.parse()?;
    let model = LoadedModel::load(&a.manifest)?;
    let layer = model.gqa_layer(a.layer)?;
    let (wk, wv) = (layer.replicated_k()?, layer.replicated_v()?);
    let target = if kind == Kind::K { &wk } else { &wv };
    let sigma = svd(target)?.singular_values;
    if a.index == 0 || a.index > sigma.len() {
        return Err(validation(format!(
            "--index {} outside 1..={}",
            a.index,
            sigma.len()
        )));
    }
    let ablated = ablate_singular_value(target, a.index)?;
    let weight_residual_sq = target.sub(&ablated)?.frobenius_norm_sq();

    // with replicated K/V every head owns its own group
    let (n_h, d_h) = (layer.n_heads, layer.head_dim);
    let mha = |k, v| GqaLayer::new(n_h, d_h, n_h, layer.w_q.clone(), k, v);
    let reference = mha(wk.clone(), wv.clone())?;
    let modified = match kind {
        Kind::K => mha(ablated, wv.clone())?,
        Kind::V => mha(wk.clone(), ablated)?,
    };
    let x = GaussianStream::new(a.seed).matrix(a.tokens, layer.d_model, 1.0);
    let before = gqa_forward(&reference, &x)?;
    let after = gqa_forward(&modified, &x)?;
    let drift = logit_drift(&before, &after)?;
    Ok(AblationReport {
        layer: a.layer,
        kind: kind.to_string(),
        index: a.index,
        sigma: sigma[a.index - 1],
        weight_residual_sq,
        logit_drift_max: drift.max_abs,
        logit_drift_frob: drift.frob,
        output_drift_max: output_drift(&before, &after)?,
        seed: a.seed,
        tokens: a.tokens,
    })
}

pub fn run(a: &AblateArgs) -> Result<String> {
    let r = ablate(a)?;
    if let Some(out) = &a.out {
        write_json(out, &r)?;
    }
    let mut s = String::new();
    write!(
        s,
        "layer {} {}: sigma_{} = {:.6e}, weight residual {:.6e}, logit drift max {:.3e}, output drift max {:.3e}",
        r.layer, r.kind, r.index, r.sigma, r.weight_residual_sq, r.logit_drift_max, r.output_drift_max
    )
    .unwrap();
    Ok(s)
}
