use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

/// Reads a corpus file: one sentence per line, whitespace-separated
/// tokens. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(line).map_err(|_| Error::Utf8 {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        let toks: Sentence = line.split_whitespace().map(str::to_owned).collect();
        if !toks.is_empty() {
            out.push(toks);
        }
    }
    Ok(out)
}

pub fn parse_corpus(text: &str) -> Vec<Sentence> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect::<Sentence>())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in corpus {
        writeln!(f, "{}", s.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
