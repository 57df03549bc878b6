//! Serialization of meshes, reports, binary containers and run
//! configurations.

mod checkpoint;
mod config;
mod container;
mod csv;
mod obj;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use checkpoint::{
    check_network_dims, dataset_from_container, dataset_to_container, fit_from_container, fit_to_container,
    model_from_container, model_to_container, network_from_container, network_to_container,
};
pub use config::RunConfig;
pub use container::{fnv1a64, Container, Data, Tensor, FORMAT_VERSION, MAGIC};
pub use csv::{format_csv, parse_csv, read_csv, ParsedCsv, write_report_csv, write_table, CsvReport, Field, Table};
pub use obj::{format_obj, parse_obj, read_obj, write_obj};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
