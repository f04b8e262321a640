//! Preprocessed dataset files under `output.data_dir`.

use std::path::{Path, PathBuf};

use hmrn_core::datapipe::{DatasetManifest, WindowedDataset};

use crate::fail::{CliResult, Ctx, Failure};

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN: &str = "train.hmrd";
pub const TEST: &str = "test.hmrd";
pub const ALL: &str = "all.hmrd";

pub fn path(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

/// Loads one preprocessed file, pointing at `hmrn preprocess` when absent.
pub fn load(dir: &Path, file: &str) -> CliResult<WindowedDataset> {
    let p = path(dir, file);
    if !p.is_file() {
        return Err(Failure::input(anyhow::anyhow!(
            "{} not found; run `hmrn preprocess` with this config first",
            p.display()
        )));
    }
    WindowedDataset::load(&p).ctx(format!("reading {}", p.display()))
}

pub fn manifest(dir: &Path) -> CliResult<DatasetManifest> {
    let p = path(dir, MANIFEST);
    if !p.is_file() {
        return Err(Failure::input(anyhow::anyhow!(
            "{} not found; run `hmrn preprocess` with this config first",
            p.display()
        )));
    }
    DatasetManifest::load(&p).ctx(format!("reading {}", p.display()))
}

pub fn ensure_parent(p: &Path) -> CliResult {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::input(anyhow::anyhow!("creating {}: {e}", dir.display())))?;
    }
    Ok(())
}
