//! Output writers. Every artifact starts with the resolved configuration
//! echoed as `#`-prefixed TOML so a file always records how it was
//! produced; CSV columns follow in a fixed, documented order.

use anyhow::{Context, Result};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// Render a config value as a named TOML section, nesting its own tables
/// under the section so the echo parses back as a config file.
pub fn section_toml<T: Serialize>(section: &str, value: &T) -> Result<String> {
    let mut root = toml::Table::new();
    root.insert(
        section.to_string(),
        toml::Value::try_from(value).context("serializing config echo")?,
    );
    toml::to_string_pretty(&root).context("rendering config echo")
}

/// A CSV file under construction: comment header, column names, rows.
pub struct CsvOut {
    w: BufWriter<File>,
    path: PathBuf,
    columns: usize,
}

impl CsvOut {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating output directory {}", dir.display()))?;
            }
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(CsvOut {
            w: BufWriter::new(file),
            path: path.to_path_buf(),
            columns: 0,
        })
    }

    /// Echo a config value as commented TOML.
    pub fn echo_config<T: Serialize>(&mut self, section: &str, value: &T) -> Result<()> {
        for line in section_toml(section, value)?.lines() {
            writeln!(self.w, "# {line}")?;
        }
        Ok(())
    }

    pub fn comment(&mut self, line: &str) -> Result<()> {
        writeln!(self.w, "# {line}")?;
        Ok(())
    }

    pub fn header(&mut self, names: &[String]) -> Result<()> {
        self.columns = names.len();
        writeln!(self.w, "{}", names.join(","))?;
        Ok(())
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        debug_assert_eq!(values.len(), self.columns);
        let mut first = true;
        for v in values {
            if !first {
                self.w.write_all(b",")?;
            }
            write!(self.w, "{v}")?;
            first = false;
        }
        self.w.write_all(b"\n")?;
        Ok(())
    }

    /// Mixed-type row (labels, counts, flags).
    pub fn raw_row(&mut self, values: &[String]) -> Result<()> {
        debug_assert_eq!(values.len(), self.columns);
        writeln!(self.w, "{}", values.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

/// A plain-text report (summary files, comparison tables).
pub struct TextOut {
    w: BufWriter<File>,
    path: PathBuf,
}

impl TextOut {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating output directory {}", dir.display()))?;
            }
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(TextOut {
            w: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.w, "{text}")?;
        Ok(())
    }

    pub fn echo_config<T: Serialize>(&mut self, section: &str, value: &T) -> Result<()> {
        writeln!(self.w, "{}", section_toml(section, value)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

/// `Some(t)` → decimal seconds, `None` → "never".
pub fn show_settle(v: Option<f64>) -> String {
    match v {
        Some(t) => format!("{t}"),
        None => "never".to_string(),
    }
}
