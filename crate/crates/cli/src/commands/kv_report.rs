use std::fmt::Write as _;
use std::path::PathBuf;

use care_core::attention::{kv_cache_bytes, kv_reduction, round_half_up};
use clap::Args;
use serde::Serialize;

use crate::error::{validation, Result};
use crate::manifest::write_json;

#[derive(Debug, Clone, Args)]
pub struct KvReportArgs {
    #[arg(long)]
    pub layers: u64,
    #[arg(long)]
    pub seq_len: u64,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    /// Per-token cache width as NAME=A+B[+C...]; repeatable. The first entry
    /// is the baseline.
    #[arg(long = "widths", required = true)]
    pub widths: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_elem: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvRow {
    pub name: String,
    pub width: u64,
    pub bytes: u64,
    pub megabytes: f64,
    /// Megabytes rounded half-up to two decimals.
    pub megabytes_2dp: f64,
    pub reduction_percent: f64,
    pub reduction_percent_2dp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvReport {
    pub layers: u64,
    pub seq_len: u64,
    pub batch: u64,
    pub bytes_per_elem: u64,
    pub baseline: String,
    pub rows: Vec<KvRow>,
}

/// Parses `NAME=A+B+...` into a name and the summed width.
pub fn parse_width(spec: &str) -> Result<(String, u64)> {
    let (name, sum) = spec
        .split_once('=')
        .ok_or_else(|| validation(format!("width {spec:?} must look like NAME=K+V")))?;
    if name.is_empty() {
        return Err(validation(format!("width {spec:?} has an empty name")));
    }
    let width = sum
        .split('+')
        .map(|p| p.trim().parse::<u64>())
        .sum::<std::result::Result<u64, _>>()
        .map_err(|_| {
            validation(format!(
                "width {spec:?}: terms must be non-negative integers"
            ))
        })?;
    Ok((name.to_string(), width))
}

pub fn build(a: &KvReportArgs) -> Result<KvReport> {
    for (name, v) in [
        ("layers", a.layers),
        ("seq-len", a.seq_len),
        ("batch", a.batch),
        ("bytes-per-elem", a.bytes_per_elem),
    ] {
        if v == 0 {
            return Err(validation(format!("--{name} must be positive")));
        }
    }
    let entries = a
        .widths
        .iter()
        .map(|w| parse_width(w))
        .collect::<Result<Vec<_>>>()?;
    let Some((baseline_name, baseline_width)) = entries.first().cloned() else {
        return Err(validation("at least one --widths entry is required"));
    };
    let baseline = kv_cache_bytes(
        a.layers,
        a.seq_len,
        a.batch,
        baseline_width,
        a.bytes_per_elem,
    );
    let rows = entries
        .into_iter()
        .map(|(name, width)| {
            let fp = kv_cache_bytes(a.layers, a.seq_len, a.batch, width, a.bytes_per_elem);
            let reduction = 100.0 * kv_reduction(&baseline, &fp);
            KvRow {
                name,
                width,
                bytes: fp.bytes,
                megabytes: fp.megabytes,
                megabytes_2dp: round_half_up(fp.megabytes, 2),
                reduction_percent: reduction,
                reduction_percent_2dp: round_half_up(reduction, 2),
            }
        })
        .collect();
    Ok(KvReport {
        layers: a.layers,
        seq_len: a.seq_len,
        batch: a.batch,
        bytes_per_elem: a.bytes_per_elem,
        baseline: baseline_name,
        rows,
    })
}

pub fn run(a: &KvReportArgs) -> Result<String> {
    let report = build(a)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    let mut s = String::new();
    writeln!(
        s,
        "KV cache: {} layers, {} tokens, batch {}, {} bytes/elem",
        report.layers, report.seq_len, report.batch, report.bytes_per_elem
    )
    .unwrap();
    writeln!(
        s,
        "{:<16} {:>8} {:>16} {:>12} {:>10}",
        "name", "width", "bytes", "MB", "reduction"
    )
    .unwrap();
    for (i, r) in report.rows.iter().enumerate() {
        let red = if i == 0 {
            "-".to_string()
        } else {
            format!("{:.2}%", r.reduction_percent_2dp)
        };
        write!(
            s,
            "{:<16} {:>8} {:>16} {:>12.2} {:>10}",
            r.name, r.width, r.bytes, r.megabytes_2dp, red
        )
        .unwrap();
        if i + 1 < report.rows.len() {
            s.push('\n');
        }
    }
    Ok(s)
}
