use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const LOCK_FILE: &str = "run.lock";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Exclusive ownership of an output directory, released on drop.
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run; remove {} if that run is gone",
                root.display(),
                lock.display()
            ),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        fs::write(self.path(RESOLVED_CONFIG), config.to_toml()?)?;
        Ok(())
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Line-delimited JSON records, flushed after every line.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Truncates unless `append`, which resumed runs use.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn record<S: Serialize>(&mut self, value: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Keeps only the records of steps `< step`, so a resumed run continues a clean log.
pub fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let Ok(value) = serde_json::from_str::<serde_json::Value>(line) else {
            break;
        };
        if value
            .get("step")
            .and_then(|s| s.as_u64())
            .is_some_and(|s| s >= step)
        {
            break;
        }
        kept.push_str(line);
        kept.push('\n');
    }
    fs::write(path, kept)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::acquire(dir.path()).unwrap();
        assert!(RunDir::acquire(dir.path()).is_err());
        drop(a);
        assert!(RunDir::acquire(dir.path()).is_ok());
    }

    #[test]
    fn truncation_keeps_earlier_steps_and_drops_partial_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"step\":0}\n{\"epoch\":0,\"sampler\":[1]}\n{\"step\":1}\n{\"step\":2}\n{\"st",
        )
        .unwrap();
        truncate_metrics(&path, 2).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "{\"step\":0}\n{\"epoch\":0,\"sampler\":[1]}\n{\"step\":1}\n"
        );
    }
}
