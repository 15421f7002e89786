use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::Format;

/// Writes result tables, each starting with a comment line that identifies
/// the configuration and seed.
pub struct Sink {
    dir: PathBuf,
    header: String,
    csv: bool,
    json: bool,
    gnuplot: bool,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(
        dir: &Path,
        hash: &str,
        seed: u64,
        formats: &[Format],
        gnuplot: bool,
    ) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header: format!("config_sha256={hash} master_seed={seed}"),
            csv: formats.contains(&Format::Csv),
            json: formats.contains(&Format::Json),
            gnuplot,
            written: Vec::new(),
        })
    }

    /// `columns` is the CSV header; each row must have as many cells.
    pub fn table(
        &mut self,
        name: &str,
        columns: &[&str],
        rows: &[Vec<String>],
    ) -> std::io::Result<()> {
        if self.csv {
            let path = self.dir.join(format!("{name}.csv"));
            let mut f = BufWriter::new(fs::File::create(&path)?);
            writeln!(f, "# {}", self.header)?;
            writeln!(f, "{}", columns.join(","))?;
            for r in rows {
                writeln!(f, "{}", r.join(","))?;
            }
            f.flush()?;
            self.written.push(path);
        }
        if self.gnuplot {
            let path = self.dir.join(format!("{name}.dat"));
            let mut f = BufWriter::new(fs::File::create(&path)?);
            writeln!(f, "# {}", self.header)?;
            writeln!(f, "# {}", columns.join(" "))?;
            for r in rows {
                writeln!(f, "{}", r.join(" "))?;
            }
            f.flush()?;
            self.written.push(path);
        }
        Ok(())
    }

    /// JSON has no comments, so the header goes into a `header` field.
    pub fn summary(&mut self, mut body: Value) -> std::io::Result<()> {
        if !self.json {
            return Ok(());
        }
        if let Value::Object(map) = &mut body {
            map.insert("header".into(), Value::String(self.header.clone()));
        }
        let path = self.dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&body).expect("summary serializes");
        text.push('\n');
        fs::write(&path, text)?;
        self.written.push(path);
        Ok(())
    }
}

pub fn num(x: f64) -> String {
    // Adding zero turns −0 into 0.
    format!("{:.12e}", x + 0.0)
}
