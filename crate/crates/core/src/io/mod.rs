//! File formats: raw tensors, PGM/PPM images and masks, checkpoint
//! directories, JSON configs and CSV logs.

mod checkpoint;
mod config;
mod pnm;
mod tensorfile;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, CHECKPOINT_FORMAT};
pub use config::{load_run_config, parse_run_config};
pub use pnm::{
    decode_pnm, dequantize, encode_pnm, quantize, read_image, read_mask, write_image, write_mask,
};
pub use tensorfile::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Writes training metrics as CSV with columns `step,loss,wall_ms`.
pub fn write_metrics_csv(path: &Path, rows: &[crate::training::MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["step", "loss", "wall_ms"]).map_err(fail)?;
    for r in rows {
        w.write_record([r.step.to_string(), format!("{:.6e}", r.loss), format!("{:.3}", r.wall_ms)]).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}
