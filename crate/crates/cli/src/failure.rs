use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Data or contract problem: bad records, failed validation, impossible request.
pub const EXIT_CONTRACT: u8 = 1;
/// The filesystem or a stream failed.
pub const EXIT_IO: u8 = 2;
/// Bad command line.
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn contract(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONTRACT,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<rcor::Error> for Failure {
    fn from(e: rcor::Error) -> Self {
        Failure {
            code: if e.is_io() { EXIT_IO } else { EXIT_CONTRACT },
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::io(path, e))
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

pub fn lines(path: &Path) -> CliResult<impl Iterator<Item = CliResult<(usize, String)>>> {
    let reader = open(path)?;
    let path = path.to_owned();
    Ok(reader
        .lines()
        .enumerate()
        .map(move |(i, l)| l.map(|l| (i + 1, l)).map_err(|e| Failure::io(&path, e)))
        .filter(|l| !matches!(l, Ok((_, s)) if s.trim().is_empty())))
}

/// `--out` file, or stdout when absent.
pub fn create(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
            }
            Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::io(p, e))?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn manifest(path: &Path) -> CliResult<rcor::data::DatasetManifest> {
    rcor::data::DatasetManifest::from_json(&read_to_string(path)?)
        .map_err(|e| Failure::contract(format!("{}: {e}", path.display())))
}
