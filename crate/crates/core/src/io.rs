//! Small helpers shared by every file writer and reader: the `# config_hash=`
//! header line, comment-aware CSV readers, and stable hashing of configs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Prefix of the provenance line written at the top of every CSV output.
pub const HASH_PREFIX: &str = "# config_hash=";

/// SHA-256 of the canonical JSON encoding of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types always serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// CSV reader that skips `#` comment lines and trims surrounding whitespace.
pub fn csv_reader<R: std::io::Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(rdr)
}

/// Writes `body` to `path`, prefixed with the provenance header line.
pub fn write_with_header(path: &Path, hash: &str, body: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Formats a float so that it round-trips exactly; empty string for `None`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&("x", 1));
        assert_eq!(a, config_hash(&("x", 1)));
        assert_ne!(a, config_hash(&("x", 2)));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn reader_skips_comments() {
        let text = "# config_hash=abc\nx,y\n1,2\n";
        let mut rdr = csv_reader(text.as_bytes());
        let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 1);
        assert_eq!(&rows[0][1], "2");
    }
}
