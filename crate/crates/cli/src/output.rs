use std::io::Write;
use std::path::{Path, PathBuf};

use crate::Failure;

/// Data destination: a file, or stdout when no path is given.
pub struct Output<'a> {
    path: Option<&'a Path>,
}

impl<'a> Output<'a> {
    pub fn new(path: Option<&'a Path>) -> Self {
        Output { path }
    }

    pub fn write(&self, bytes: &[u8]) -> Result<(), Failure> {
        let result = match self.path {
            Some(p) => std::fs::write(p, bytes),
            None => std::io::stdout().lock().write_all(bytes),
        };
        result.map_err(|e| match self.path {
            Some(p) => Failure::Config(format!("{}: {e}", p.display())),
            None => Failure::Config(e.to_string()),
        })
    }
}

/// Run metadata, written as `<out>.meta.toml`.
pub struct Meta {
    table: toml::Table,
}

impl Meta {
    pub fn new() -> Self {
        Meta { table: toml::Table::new() }
    }

    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.table.insert(key.to_string(), value.into());
    }

    pub fn write_beside(&self, data: &Path) -> std::io::Result<()> {
        let mut name = data.as_os_str().to_owned();
        name.push(".meta.toml");
        std::fs::write(PathBuf::from(name), self.table.to_string())
    }
}
