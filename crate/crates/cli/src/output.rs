use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let tmp = tmp_path(path);
    let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Appends lines to a CSV file as they arrive, then renames it into place.
pub struct CsvStream {
    tmp: PathBuf,
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl CsvStream {
    pub fn create(path: &Path, header: &str) -> Result<Self, CliError> {
        let tmp = tmp_path(path);
        let file = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let mut s = Self {
            tmp,
            path: path.to_path_buf(),
            file: std::io::BufWriter::new(file),
        };
        s.line(header)?;
        Ok(s)
    }

    pub fn line(&mut self, line: &str) -> Result<(), CliError> {
        writeln!(self.file, "{line}").map_err(|e| CliError::io(&self.tmp, e))?;
        self.file.flush().map_err(|e| CliError::io(&self.tmp, e))
    }

    pub fn finish(self) -> Result<(), CliError> {
        let Self { tmp, path, file } = self;
        file.into_inner()
            .map_err(|e| CliError::io(&tmp, e.into_error()))?
            .sync_all()
            .map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }
}
