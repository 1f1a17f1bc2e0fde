use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Shortest decimal that round-trips the value rounded to 9 significant digits.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    format!("{rounded}")
}

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        serde_json::to_writer_pretty(&mut f, value)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        write_csv(f, header, rows)
    }

    pub fn text(&self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn write_csv<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for r in rows {
        out.write_record(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.25), "0.25");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(140.60000000000002), "140.6");
        assert_eq!(sig9(123456789012.0), "123456789000");
        assert_eq!(sig9(0.0), "0");
    }
}
