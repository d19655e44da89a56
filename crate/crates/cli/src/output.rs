//! Output files are built in memory and written only once a command has
//! succeeded, so a failing command leaves nothing behind.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        assert!(
            !self.files.iter().any(|(n, _)| n == name),
            "output {name} added twice"
        );
        self.files.push((name.to_string(), bytes));
    }

    /// Builds one file through a writer callback.
    pub fn add_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> mlgplvm::Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.add(name, buf);
        Ok(())
    }

    #[cfg(test)]
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file to `dir` via temporary names, then renames them
    /// into place. On failure the temporaries are removed.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged = Vec::new();
        let result = (|| -> Result<()> {
            for (name, bytes) in &self.files {
                let tmp = dir.join(format!(".{name}.partial"));
                std::fs::write(&tmp, bytes)
                    .with_context(|| format!("writing {}", tmp.display()))?;
                staged.push((tmp, dir.join(name)));
            }
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &staged {
                let _ = std::fs::remove_file(tmp);
            }
            return Err(e);
        }
        let mut written = Vec::new();
        for (tmp, dest) in staged {
            if dest.is_dir() {
                bail!("{} is a directory", dest.display());
            }
            std::fs::rename(&tmp, &dest)
                .with_context(|| format!("moving {} into place", dest.display()))?;
            written.push(dest);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("nested/out");
        let mut out = Outputs::new();
        out.add("a.txt", b"one".to_vec());
        out.add_with("b.txt", |w| {
            w.extend_from_slice(b"two");
            Ok(())
        })
        .unwrap();
        let written = out.commit(&out_dir).unwrap();
        assert_eq!(written.len(), 2);
        assert_eq!(std::fs::read(out_dir.join("b.txt")).unwrap(), b"two");
        let leftovers: Vec<_> = std::fs::read_dir(&out_dir)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with(".partial")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn failed_render_adds_nothing() {
        let mut out = Outputs::new();
        let r = out.add_with("bad.csv", |_| Err(mlgplvm::Error::EmptySchema));
        assert!(r.is_err());
        assert_eq!(out.names().count(), 0);
    }

    #[test]
    #[should_panic(expected = "added twice")]
    fn duplicate_names_panic() {
        let mut out = Outputs::new();
        out.add("a", vec![]);
        out.add("a", vec![]);
    }
}
