//! Small filesystem helpers.

use std::fs::File;
use std::io;
use std::path::Path;

/// Runs `write` against a temporary file next to `path`, then renames it
/// into place. On any error the temporary file is removed and `path` is
/// left untouched.
pub fn write_atomic<E>(path: &Path, write: impl FnOnce(&mut File) -> Result<(), E>) -> Result<(), E>
where
    E: From<io::Error>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    write(tmp.as_file_mut())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
