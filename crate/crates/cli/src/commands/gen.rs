use std::fmt::Write as _;
use std::path::PathBuf;

use care_core::rng::GaussianStream;
use care_core::Matrix;
use clap::Args;

use super::{create_dir, require_positive};
use crate::ctf;
use crate::error::{validation, Result};
use crate::manifest::{
    write_json, BatchEntry, CalibrationIndex, LayerEntry, ModelManifest, CALIBRATION_FORMAT,
    CALIBRATION_INDEX, FORMAT_VERSION, MODEL_FORMAT,
};

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Model width; must equal n_heads · head_dim when given.
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub n_groups: usize,
    /// Tokens per calibration batch.
    #[arg(long, default_value_t = 32)]
    pub tokens: usize,
    /// Calibration batches per layer.
    #[arg(long, default_value_t = 4)]
    pub batches: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-channel scales of layer `l`'s calibration inputs. Later layers decay
/// faster, so covariances are anisotropic with a layer-dependent spectrum.
fn channel_scales(layer: usize, d: usize) -> Vec<f64> {
    let decades = 1.0 + (layer % 3) as f64;
    (0..d)
        .map(|i| 10f64.powf(-decades * i as f64 / d as f64))
        .collect()
}

pub fn run(a: &GenArgs) -> Result<String> {
    for (name, v) in [
        ("layers", a.layers),
        ("n-heads", a.n_heads),
        ("head-dim", a.head_dim),
        ("n-groups", a.n_groups),
        ("tokens", a.tokens),
        ("batches", a.batches),
    ] {
        require_positive(name, v)?;
    }
    let d = a.n_heads * a.head_dim;
    if let Some(dm) = a.d_model {
        if dm != d {
            return Err(validation(format!(
                "--d-model {dm} differs from n_heads·head_dim = {d}"
            )));
        }
    }
    if !a.n_heads.is_multiple_of(a.n_groups) {
        return Err(validation(format!(
            "n_heads {} is not a multiple of n_groups {}",
            a.n_heads, a.n_groups
        )));
    }
    let kv = a.n_groups * a.head_dim;
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = GaussianStream::new(a.seed);
    create_dir(&a.out)?;

    let mut layers = Vec::with_capacity(a.layers);
    for l in 0..a.layers {
        let entry = LayerEntry {
            index: l,
            d_model: d,
            n_heads: a.n_heads,
            head_dim: a.head_dim,
            n_groups: a.n_groups,
            w_q: format!("weights/layer{l}_w_q.ctf"),
            w_k_g: format!("weights/layer{l}_w_k_g.ctf"),
            w_v_g: format!("weights/layer{l}_w_v_g.ctf"),
            mla: None,
        };
        for (rel, cols) in [(&entry.w_q, d), (&entry.w_k_g, kv), (&entry.w_v_g, kv)] {
            ctf::write_matrix(&a.out.join(rel), &rng.matrix(d, cols, std))?;
        }
        layers.push(entry);
    }

    let mut batches = Vec::with_capacity(a.layers * a.batches);
    for l in 0..a.layers {
        let mix = rng.matrix(d, d, std);
        let scales = channel_scales(l, d);
        for b in 0..a.batches {
            let x: Matrix = rng
                .matrix(a.tokens, d, 1.0)
                .scale_columns(&scales)?
                .matmul(&mix)?;
            let rel = format!("layer{l}_b{b}.ctf");
            ctf::write_matrix(&a.out.join("calib").join(&rel), &x)?;
            batches.push(BatchEntry {
                layer: l,
                batch: b,
                path: rel,
            });
        }
    }

    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        num_layers: a.layers,
        layers,
        conversion: None,
    };
    write_json(&a.out.join("model.json"), &manifest)?;
    let index = CalibrationIndex {
        format: CALIBRATION_FORMAT.into(),
        version: FORMAT_VERSION,
        tokens_per_batch: a.tokens,
        batches,
    };
    write_json(&a.out.join("calib").join(CALIBRATION_INDEX), &index)?;

    let mut s = String::new();
    writeln!(
        s,
        "generated {} layers (D={d}, n_h={}, d_h={}, g_h={}) with seed {}",
        a.layers, a.n_heads, a.head_dim, a.n_groups, a.seed
    )
    .unwrap();
    writeln!(
        s,
        "calibration: {} batches of {} tokens per layer",
        a.batches, a.tokens
    )
    .unwrap();
    writeln!(s, "model manifest: {}", a.out.join("model.json").display()).unwrap();
    write!(
        s,
        "calibration index: {}",
        a.out.join("calib").join(CALIBRATION_INDEX).display()
    )
    .unwrap();
    Ok(s)
}
