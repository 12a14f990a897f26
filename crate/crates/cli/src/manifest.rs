//! JSON documents exchanged between commands. Field order in each struct is
//! the serialized key order, so output bytes are stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use care_core::calibration::{CalibrationBatch, Lambda, ShrinkageParams, Weighting};
use care_core::factorizer::{FactorPair, GqaLayer, MlaFactors};
use care_core::scheduler::{Kind, RankProfile};
use care_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ctf;
use crate::error::{validation, CliError, Result};

pub const MODEL_FORMAT: &str = "care-model";
pub const CALIBRATION_FORMAT: &str = "care-calibration";
pub const PROFILE_FORMAT: &str = "care-rank-profile";
pub const FORMAT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn check_format(path: &Path, format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected || version != FORMAT_VERSION {
        return Err(CliError::format(
            path,
            format!("expected {expected} v{FORMAT_VERSION}, found {format} v{version}"),
        ));
    }
    Ok(())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::SqrtC => "sqrtC",
        Weighting::C => "C",
    }
}

pub fn parse_weighting(s: &str) -> Result<Weighting> {
    match s {
        "sqrtC" => Ok(Weighting::SqrtC),
        "C" => Ok(Weighting::C),
        _ => Err(validation(format!(
            "weighting must be sqrtC or C, got {s:?}"
        ))),
    }
}

pub fn lambda_name(l: Lambda) -> String {
    match l {
        Lambda::Auto => "auto".into(),
        Lambda::Fixed(v) => format!("{v:?}"),
    }
}

pub fn parse_lambda(s: &str) -> Result<Lambda> {
    if s == "auto" {
        return Ok(Lambda::Auto);
    }
    s.parse::<f64>()
        .map(Lambda::Fixed)
        .map_err(|_| validation(format!("lambda must be \"auto\" or a number, got {s:?}")))
}

/// Whitener settings recorded alongside derived artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenerSettings {
    pub weighting: String,
    pub alpha: f64,
    pub lambda: String,
}

impl WhitenerSettings {
    pub fn new(weighting: Weighting, params: &ShrinkageParams) -> Self {
        Self {
            weighting: weighting_name(weighting).into(),
            alpha: params.alpha,
            lambda: lambda_name(params.lambda),
        }
    }

    pub fn resolve(&self) -> Result<(Weighting, ShrinkageParams)> {
        let params = ShrinkageParams::new(self.alpha, parse_lambda(&self.lambda)?)?;
        Ok((parse_weighting(&self.weighting)?, params))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub num_layers: usize,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion: Option<WhitenerSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_groups: usize,
    pub w_q: String,
    pub w_k_g: String,
    pub w_v_g: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mla: Option<MlaEntry>,
}

impl LayerEntry {
    pub fn kv_width(&self) -> usize {
        self.n_groups * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlaEntry {
    pub r_k: usize,
    pub r_v: usize,
    pub w_a_k: String,
    pub w_b_k: String,
    pub w_a_v: String,
    pub w_b_v: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope: Option<RopeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeEntry {
    pub rope_dim: usize,
    pub w_r_q: String,
    pub w_r_k: String,
}

/// A manifest together with the directory its relative paths resolve from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub manifest: ModelManifest,
    pub dir: PathBuf,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: ModelManifest = read_json(path)?;
        check_format(path, &manifest.format, manifest.version, MODEL_FORMAT)?;
        if manifest.num_layers != manifest.layers.len()
            || manifest
                .layers
                .iter()
                .enumerate()
                .any(|(i, l)| l.index != i)
        {
            return Err(CliError::format(
                path,
                "layer list must be indexed 0..num_layers",
            ));
        }
        for l in &manifest.layers {
            if l.n_heads * l.head_dim != l.d_model || l.n_groups == 0 || l.n_heads % l.n_groups != 0
            {
                return Err(CliError::format(
                    path,
                    format!("layer {} has an inconsistent config", l.index),
                ));
            }
        }
        Ok(Self {
            manifest,
            dir: base_dir(path),
        })
    }

    pub fn layer(&self, l: usize) -> Result<&LayerEntry> {
        self.manifest.layers.get(l).ok_or_else(|| {
            validation(format!(
                "layer {l} not in manifest ({} layers)",
                self.manifest.num_layers
            ))
        })
    }

    fn matrix(&self, rel: &str, shape: (usize, usize)) -> Result<Matrix> {
        let path = self.dir.join(rel);
        let m = ctf::read_matrix(&path)?;
        if m.shape() != shape {
            return Err(CliError::format(
                &path,
                format!("shape {:?}, manifest implies {:?}", m.shape(), shape),
            ));
        }
        Ok(m)
    }

    pub fn gqa_layer(&self, l: usize) -> Result<GqaLayer> {
        let e = self.layer(l)?;
        let (d, kv) = (e.d_model, e.kv_width());
        Ok(GqaLayer::new(
            e.n_heads,
            e.head_dim,
            e.n_groups,
            self.matrix(&e.w_q, (d, d))?,
            self.matrix(&e.w_k_g, (d, kv))?,
            self.matrix(&e.w_v_g, (d, kv))?,
        )?)
    }

    pub fn mla_factors(&self, l: usize) -> Result<MlaFactors> {
        let e = self.layer(l)?;
        let m = e.mla.as_ref().ok_or_else(|| {
            validation(format!("layer {l} has no MLA factors; run convert first"))
        })?;
        let d = e.d_model;
        let k = FactorPair {
            a: self.matrix(&m.w_a_k, (d, m.r_k))?,
            b: self.matrix(&m.w_b_k, (m.r_k, d))?,
        };
        let v = FactorPair {
            a: self.matrix(&m.w_a_v, (d, m.r_v))?,
            b: self.matrix(&m.w_b_v, (m.r_v, d))?,
        };
        Ok(MlaFactors::new(k, v)?)
    }

    /// Stored rotary adapters `(rope_dim, W_Q^R, W_K^R)`, if any.
    pub fn rope_adapters(&self, l: usize) -> Result<Option<(usize, Matrix, Matrix)>> {
        let e = self.layer(l)?;
        let Some(r) = e.mla.as_ref().and_then(|m| m.rope.as_ref()) else {
            return Ok(None);
        };
        let d = e.d_model;
        let q = self.matrix(&r.w_r_q, (d, e.n_heads * r.rope_dim))?;
        let k = self.matrix(&r.w_r_k, (d, r.rope_dim))?;
        Ok(Some((r.rope_dim, q, k)))
    }

    /// Loads every referenced tensor once and shape-checks it.
    pub fn check(&self) -> Result<()> {
        for l in 0..self.manifest.num_layers {
            self.gqa_layer(l)?;
            if self.layer(l)?.mla.is_some() {
                self.mla_factors(l)?;
                self.rope_adapters(l)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationIndex {
    pub format: String,
    pub version: u32,
    pub tokens_per_batch: usize,
    pub batches: Vec<BatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub layer: usize,
    pub batch: usize,
    pub path: String,
}

pub const CALIBRATION_INDEX: &str = "calibration.json";

/// Reads `calibration.json` from `dir` and loads every batch, grouped by
/// layer in index order.
pub fn load_calibration(dir: &Path) -> Result<BTreeMap<usize, Vec<CalibrationBatch>>> {
    let path = dir.join(CALIBRATION_INDEX);
    let index: CalibrationIndex = read_json(&path)?;
    check_format(&path, &index.format, index.version, CALIBRATION_FORMAT)?;
    let mut out: BTreeMap<usize, Vec<CalibrationBatch>> = BTreeMap::new();
    for b in &index.batches {
        let p = dir.join(&b.path);
        let x = ctf::read_matrix(&p)?;
        out.entry(b.layer)
            .or_default()
            .push(CalibrationBatch::new(b.layer, x)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfileFile {
    pub format: String,
    pub version: u32,
    pub mode: String,
    pub min_rank: usize,
    pub budget_k: usize,
    pub budget_v: usize,
    pub whitener: WhitenerSettings,
    pub entries: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub layer: usize,
    pub kind: String,
    pub rank: usize,
    pub full_rank: usize,
}

impl RankProfileFile {
    pub fn from_profile(profile: &RankProfile, mode: &str, whitener: WhitenerSettings) -> Self {
        let entries = profile
            .ranks
            .iter()
            .map(|(&(layer, kind), &(rank, full_rank))| ProfileEntry {
                layer,
                kind: kind.to_string(),
                rank,
                full_rank,
            })
            .collect();
        Self {
            format: PROFILE_FORMAT.into(),
            version: FORMAT_VERSION,
            mode: mode.into(),
            min_rank: profile.min_rank,
            budget_k: profile.budget_k,
            budget_v: profile.budget_v,
            whitener,
            entries,
        }
    }

    pub fn load(path: &Path) -> Result<RankProfile> {
        let f: RankProfileFile = read_json(path)?;
        check_format(path, &f.format, f.version, PROFILE_FORMAT)?;
        f.to_profile()
            .map_err(|e| CliError::format(path, e.to_string()))
    }

    pub fn to_profile(&self) -> Result<RankProfile> {
        let mut ranks = BTreeMap::new();
        for e in &self.entries {
            let kind: Kind = e.kind.parse()?;
            if ranks
                .insert((e.layer, kind), (e.rank, e.full_rank))
                .is_some()
            {
                return Err(validation(format!(
                    "duplicate entry for ({}, {})",
                    e.layer, e.kind
                )));
            }
        }
        let profile = RankProfile {
            min_rank: self.min_rank,
            budget_k: self.budget_k,
            budget_v: self.budget_v,
            ranks,
        };
        profile.validate()?;
        Ok(profile)
    }
}
