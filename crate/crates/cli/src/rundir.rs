use std::fs;
use std::path::{Path, PathBuf};

use unitflow::RunConfig;

use crate::error::{CliError, CliResult};

/// Effective config written into every new run directory.
pub const CONFIG_FILE: &str = "config.toml";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(unitflow::Error::Io { path: path.to_path_buf(), source: e })
}

/// Newest `<root>/<digest>-*` directory. Names end in a sortable UTC
/// timestamp.
pub fn find_latest(root: &Path, digest: &str) -> CliResult<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let prefix = format!("{digest}-");
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.file_name().to_string_lossy().starts_with(&prefix))
        .map(|e| e.path())
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

/// Creates `<root>/<digest>-<timestamp>` and records the config in it.
pub fn create(root: &Path, cfg: &RunConfig) -> CliResult<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let dir = root.join(format!("{}-{stamp}", cfg.digest()));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    unitflow::io::write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    log::info!("created run directory {}", dir.display());
    Ok(dir)
}

/// An explicit directory wins; otherwise the newest run for this config,
/// created on demand when `create` is set.
pub fn resolve(explicit: Option<&Path>, cfg: &RunConfig, create_missing: bool) -> CliResult<PathBuf> {
    if let Some(dir) = explicit {
        if create_missing {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let config = dir.join(CONFIG_FILE);
            if !config.exists() {
                unitflow::io::write_atomic(&config, cfg.to_toml().as_bytes())?;
            }
        } else if !dir.is_dir() {
            return Err(CliError::Missing(format!("run directory {} does not exist", dir.display())));
        }
        return Ok(dir.to_path_buf());
    }
    let root = &cfg.paths.run_root;
    match find_latest(root, &cfg.digest())? {
        Some(dir) => Ok(dir),
        None if create_missing => create(root, cfg),
        None => Err(CliError::Missing(format!(
            "no run directory for config digest {} under {}; run `unitflow corpus build` first or pass --run-dir",
            cfg.digest(),
            root.display()
        ))),
    }
}
