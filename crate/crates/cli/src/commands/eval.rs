use std::fmt::Write as _;
use std::path::PathBuf;

use care_core::attention::{
    gqa_forward, logit_drift, mla_forward, mla_forward_rope, output_drift, AttentionConfig,
    RopeAdapters,
};
use care_core::factorizer::activation_residual;
use care_core::metrics::{cross_entropy, kd_loss, total_loss, LogitSequence, LossParams};
use care_core::rng::GaussianStream;
use care_core::Matrix;
use clap::Args;
use serde::Serialize;

use super::require_positive;
use crate::error::{validation, Result};
use crate::manifest::{load_calibration, write_json, LoadedModel};

/// Logit drift allowed for a layer converted at KV parity.
pub const PARITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Source (GQA) model manifest.
    #[arg(long)]
    pub source: PathBuf,
    /// Converted model manifest.
    #[arg(long)]
    pub converted: PathBuf,
    /// Calibration directory used as evaluation inputs.
    #[arg(long)]
    pub batches: PathBuf,
    /// Rotary channel width for the student path; 0 evaluates NoPE only.
    #[arg(long, default_value_t = 0)]
    pub rope_dim: usize,
    /// Seed for the unembedding, targets, and any missing rotary adapters.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Synthetic vocabulary size.
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerEval {
    pub layer: usize,
    pub r_k: usize,
    pub r_v: usize,
    pub parity: bool,
    pub activation_residual_k: f64,
    pub activation_residual_v: f64,
    pub relative_activation_residual_k: f64,
    pub relative_activation_residual_v: f64,
    pub logit_drift_max: f64,
    pub logit_drift_frob: f64,
    pub output_drift_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rope_logit_drift_max: Option<f64>,
    pub gqa_cache_width: usize,
    pub mla_cache_width: usize,
    pub parity_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Losses {
    pub positions: usize,
    pub ce_teacher: f64,
    pub ce_student: f64,
    pub kd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheTotals {
    pub gqa_width: usize,
    pub mla_width: usize,
    pub reduction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub rope_dim: usize,
    pub vocab: usize,
    pub tau: f64,
    pub beta: f64,
    pub parity_tolerance: f64,
    pub layers: Vec<LayerEval>,
    pub losses: Losses,
    pub cache: CacheTotals,
    pub parity_passed: bool,
}

fn relative(residual: f64, energy: f64) -> f64 {
    if energy > 0.0 {
        residual / energy
    } else {
        residual
    }
}

pub fn evaluate(a: &EvalArgs) -> Result<EvalReport> {
    require_positive("vocab", a.vocab)?;
    let params = LossParams::new(a.tau, a.beta)?;
    let source = LoadedModel::load(&a.source)?;
    let converted = LoadedModel::load(&a.converted)?;
    if source.manifest.num_layers != converted.manifest.num_layers {
        return Err(validation(
            "source and converted manifests differ in layer count",
        ));
    }
    let calib = load_calibration(&a.batches)?;
    let mut rng = GaussianStream::new(a.seed);

    let mut layers = Vec::new();
    let (mut teacher_rows, mut student_rows, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for src in &source.manifest.layers {
        let l = src.index;
        let dst = converted.layer(l)?;
        if (src.d_model, src.n_heads, src.head_dim, src.n_groups)
            != (dst.d_model, dst.n_heads, dst.head_dim, dst.n_groups)
        {
            return Err(validation(format!(
                "layer {l}: source and converted configs differ"
            )));
        }
        let gqa = source.gqa_layer(l)?;
        let factors = converted.mla_factors(l)?;
        let w_q = converted.gqa_layer(l)?.w_q;
        let batches = calib
            .get(&l)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| validation(format!("layer {l}: no evaluation batches")))?;
        let d = src.d_model;

        let adapters = if a.rope_dim > 0 {
            match converted.rope_adapters(l)? {
                Some((dim, q, k)) if dim == a.rope_dim => Some((q, k)),
                Some((dim, _, _)) => {
                    return Err(validation(format!(
                        "layer {l}: stored rotary adapters have width {dim}, --rope-dim is {}",
                        a.rope_dim
                    )))
                }
                None => {
                    let std = 1.0 / (d as f64).sqrt();
                    Some((
                        rng.matrix(d, src.n_heads * a.rope_dim, std),
                        rng.matrix(d, a.rope_dim, std),
                    ))
                }
            }
        } else {
            None
        };
        let unembed = rng.matrix(d, a.vocab, 1.0 / (d as f64).sqrt());

        let (wk, wv) = (gqa.replicated_k()?, gqa.replicated_v()?);
        let (k_hat, v_hat) = (factors.k_product()?, factors.v_product()?);
        let res_k = activation_residual(batches, &wk, &k_hat)?;
        let res_v = activation_residual(batches, &wv, &v_hat)?;
        let zeros = Matrix::zeros(d, d);
        let energy_k = activation_residual(batches, &wk, &zeros)?;
        let energy_v = activation_residual(batches, &wv, &zeros)?;

        let seq_len = batches[0].x.rows();
        let nope_cfg = AttentionConfig::new(src.n_heads, src.head_dim, src.n_groups, 0, seq_len)?;
        let (mut drift_max, mut drift_sq, mut out_max) = (0.0f64, 0.0, 0.0f64);
        let mut rope_max: Option<f64> = None;
        let mut mla_width = factors.r_k + factors.r_v;
        for b in batches {
            let teacher = gqa_forward(&gqa, &b.x)?;
            let student = mla_forward(&factors, &w_q, &nope_cfg, &b.x)?;
            let drift = logit_drift(&teacher, &student)?;
            drift_max = drift_max.max(drift.max_abs);
            drift_sq += drift.frob * drift.frob;
            out_max = out_max.max(output_drift(&teacher, &student)?);

            let deployed = match &adapters {
                Some((q, k)) => {
                    let cfg = AttentionConfig::new(
                        src.n_heads,
                        src.head_dim,
                        src.n_groups,
                        a.rope_dim,
                        b.x.rows(),
                    )?;
                    let ad = RopeAdapters::new(q.clone(), k.clone(), &cfg)?;
                    let tr = mla_forward_rope(&factors, &w_q, &ad, &cfg, &b.x)?;
                    rope_max = Some(
                        rope_max
                            .unwrap_or(0.0)
                            .max(logit_drift(&teacher, &tr)?.max_abs),
                    );
                    mla_width = tr.cache.total();
                    tr
                }
                None => student,
            };
            let t_logits = teacher.output.matmul(&unembed)?;
            let s_logits = deployed.output.matmul(&unembed)?;
            for i in 0..t_logits.rows() {
                teacher_rows.extend_from_slice(t_logits.row(i));
                student_rows.extend_from_slice(s_logits.row(i));
                targets.push(rng.index(a.vocab));
            }
        }

        let parity = factors.r_k == src.kv_width() && factors.r_v == src.kv_width();
        layers.push(LayerEval {
            layer: l,
            r_k: factors.r_k,
            r_v: factors.r_v,
            parity,
            activation_residual_k: res_k,
            activation_residual_v: res_v,
            relative_activation_residual_k: relative(res_k, energy_k),
            relative_activation_residual_v: relative(res_v, energy_v),
            logit_drift_max: drift_max,
            logit_drift_frob: drift_sq.sqrt(),
            output_drift_max: out_max,
            rope_logit_drift_max: rope_max,
            gqa_cache_width: 2 * src.kv_width(),
            mla_cache_width: mla_width,
            parity_ok: parity.then_some(drift_max <= PARITY_TOLERANCE),
        });
    }

    let positions = targets.len();
    let teacher = LogitSequence::new(
        Matrix::new(positions, a.vocab, teacher_rows)?,
        Some(targets.clone()),
    )?;
    let student = LogitSequence::new(
        Matrix::new(positions, a.vocab, student_rows)?,
        Some(targets),
    )?;
    let ce_student = cross_entropy(&student, a.tau)?;
    let kd = kd_loss(&teacher, &student, a.tau)?;
    let losses = Losses {
        positions,
        ce_teacher: cross_entropy(&teacher, a.tau)?,
        ce_student,
        kd,
        total: total_loss(ce_student, kd, &params),
    };
    let gqa_width: usize = layers.iter().map(|l| l.gqa_cache_width).sum();
    let mla_width: usize = layers.iter().map(|l| l.mla_cache_width).sum();
    let cache = CacheTotals {
        gqa_width,
        mla_width,
        reduction: if gqa_width > 0 {
            1.0 - mla_width as f64 / gqa_width as f64
        } else {
            0.0
        },
    };
    let parity_passed = layers.iter().all(|l| l.parity_ok != Some(false));
    Ok(EvalReport {
        seed: a.seed,
        rope_dim: a.rope_dim,
        vocab: a.vocab,
        tau: a.tau,
        beta: a.beta,
        parity_tolerance: PARITY_TOLERANCE,
        layers,
        losses,
        cache,
        parity_passed,
    })
}

pub fn run(a: &EvalArgs) -> Result<String> {
    let report = evaluate(a)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    let mut s = String::new();
    for l in &report.layers {
        write!(
            s,
            "layer {}: r_k={} r_v={} act. residual K {:.3e} V {:.3e}, logit drift max {:.3e}",
            l.layer,
            l.r_k,
            l.r_v,
            l.relative_activation_residual_k,
            l.relative_activation_residual_v,
            l.logit_drift_max
        )
        .unwrap();
        if let Some(r) = l.rope_logit_drift_max {
            write!(s, ", with rope {r:.3e}").unwrap();
        }
        match l.parity_ok {
            Some(true) => s.push_str(" [parity ok]"),
            Some(false) => s.push_str(" [parity FAILED]"),
            None => {}
        }
        s.push('\n');
    }
    let ls = &report.losses;
    writeln!(
        s,
        "losses over {} positions: CE teacher {:.6} student {:.6}, KD {:.6e}, total {:.6}",
        ls.positions, ls.ce_teacher, ls.ce_student, ls.kd, ls.total
    )
    .unwrap();
    write!(
        s,
        "cache width per token: GQA {} -> MLA {} ({:.2}% smaller)",
        report.cache.gqa_width,
        report.cache.mla_width,
        100.0 * report.cache.reduction
    )
    .unwrap();
    Ok(s)
}
