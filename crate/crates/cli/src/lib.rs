//! Library side of the `pvudf` command: run configurations, the output
//! directory lock and one module per subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod lock;

pub use error::{CliError, CliResult};

use std::path::Path;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> pvudf::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| pvudf::Error::Io { path: tmp.clone(), source: e })?;
    std::fs::rename(&tmp, path).map_err(|e| pvudf::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
