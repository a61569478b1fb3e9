//! Atomic file output: write to a sibling temp file, then rename over the
//! target, so a failed command never leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{QkanError, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| QkanError::io(&dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| QkanError::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(QkanError::io(path, e));
    }
    Ok(())
}
