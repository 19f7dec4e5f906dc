use std::path::{Path, PathBuf};

use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};

use super::rgbe::{read_rgbe, write_rgbe};

/// `.hdr` files in `dir`, sorted by name.
pub fn list_maps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("hdr")))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_dataset_dir(dir: &Path) -> Result<Vec<EnvironmentMap>> {
    let paths = list_maps(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    paths
        .iter()
        .map(|p| read_rgbe(p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display()))))
        .collect()
}

/// Writes `sky_00000.hdr`, `sky_00001.hdr`, ... into `dir`.
pub fn save_dataset_dir(dir: &Path, maps: &[EnvironmentMap]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    maps.iter()
        .enumerate()
        .map(|(i, m)| {
            let p = dir.join(format!("sky_{i:05}.hdr"));
            write_rgbe(m, &p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            Ok(p)
        })
        .collect()
}
