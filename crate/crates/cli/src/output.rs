use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use privcnp::serial::float17;

use crate::CliError;

/// A cell of a CSV row.
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => float17(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Headed CSV written to a file or standard output.
pub struct CsvOut {
    sink: Box<dyn Write>,
    path: PathBuf,
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Lib(privcnp::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl CsvOut {
    pub fn create(path: Option<&Path>, header: &[&str]) -> Result<Self, CliError> {
        let (sink, path): (Box<dyn Write>, PathBuf) = match path {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
                }
                let f = File::create(p).map_err(|e| io_err(p, e))?;
                (Box::new(BufWriter::new(f)), p.to_path_buf())
            }
            None => (Box::new(io::stdout()), PathBuf::from("<stdout>")),
        };
        let mut out = Self { sink, path };
        out.line(&header.join(","))?;
        Ok(out)
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.sink, "{s}").map_err(|e| io_err(&self.path, e))
    }

    pub fn row(&mut self, cells: Vec<Cell>) -> Result<(), CliError> {
        let text: Vec<String> = cells.iter().map(Cell::render).collect();
        self.line(&text.join(","))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.sink.flush().map_err(|e| io_err(&self.path, e))
    }
}
