use std::fmt::Write as _;
use std::path::PathBuf;

use care_core::calibration::covariance_of;
use care_core::CareError;
use clap::Args;

use super::{covariance_path, create_dir};
use crate::ctf;
use crate::error::{validation, CliError, Result};
use crate::manifest::{load_calibration, LoadedModel};

#[derive(Debug, Clone, Args)]
pub struct CovArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding calibration.json and its batch files.
    #[arg(long)]
    pub batches: PathBuf,
    /// Output directory for layer{l}.ctf covariances.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: &CovArgs) -> Result<String> {
    let model = LoadedModel::load(&a.manifest)?;
    let calib = load_calibration(&a.batches)?;
    if let Some(&extra) = calib.keys().find(|&&l| l >= model.manifest.num_layers) {
        return Err(validation(format!(
            "calibration references layer {extra}, model has {}",
            model.manifest.num_layers
        )));
    }
    create_dir(&a.out)?;
    let mut s = String::new();
    for entry in &model.manifest.layers {
        let l = entry.index;
        let batches = calib.get(&l).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(b) = batches.iter().find(|b| b.x.cols() != entry.d_model) {
            return Err(validation(format!(
                "layer {l}: calibration batch has {} columns, model width is {}",
                b.x.cols(),
                entry.d_model
            )));
        }
        let c = covariance_of(batches).map_err(|e| match e {
            CareError::NoCalibrationData => validation(format!("layer {l}: no calibration data")),
            other => CliError::from(other),
        })?;
        ctf::write_matrix(&covariance_path(&a.out, l), &c)?;
        writeln!(
            s,
            "layer {l}: {} batches, trace(C) = {:.6e}",
            batches.len(),
            c.trace()
        )
        .unwrap();
    }
    write!(s, "covariances written to {}", a.out.display()).unwrap();
    Ok(s)
}
