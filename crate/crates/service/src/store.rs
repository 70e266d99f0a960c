//! One JSON file per session under a directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, ServiceError};
use crate::session::SessionRecord;

#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn load(&self, id: &str) -> Result<Option<SessionRecord>> {
        if !id.chars().all(|c| c.is_ascii_hexdigit()) {
            return Ok(None);
        }
        let text = match fs::read_to_string(self.path(id)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let record: SessionRecord =
            serde_json::from_str(&text).map_err(|e| ServiceError::Corrupt { id: id.into(), reason: e.to_string() })?;
        if record.session_id != id {
            return Err(ServiceError::Corrupt { id: id.into(), reason: "file name and session id differ".into() });
        }
        Ok(Some(record))
    }

    /// Write-then-rename so a crash never leaves a half-written record.
    pub fn save(&self, record: &SessionRecord) -> Result<()> {
        let tmp = self.dir.join(format!(".{}.tmp", record.session_id));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(record).map_err(|e| ServiceError::Internal(e.to_string()))?)?;
        f.sync_all()?;
        fs::rename(&tmp, self.path(&record.session_id))?;
        Ok(())
    }
}
