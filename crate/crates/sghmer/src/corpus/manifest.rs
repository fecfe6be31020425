//! Dataset manifest and vocab file formats.
//!
//! Manifest: one sample per line, `relative/image/path<TAB>space-delimited
//! tokens`. Vocab file: three reserved header lines then one token per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::pgm::read_pgm;
use super::{Sample, SampleSource, Vocab, RESERVED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub tokens: Vec<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}\t{}", e.image, e.tokens.join(" "))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (image, toks) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected 'path<TAB>tokens'",
                path.display(),
                lineno + 1
            ))
        })?;
        let tokens: Vec<String> = toks.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::Format(format!(
                "{}:{}: empty token list",
                path.display(),
                lineno + 1
            )));
        }
        entries.push(ManifestEntry {
            image: image.to_string(),
            tokens,
        });
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("{}: empty manifest", path.display())));
    }
    Ok(entries)
}

/// Vocabulary over every token appearing in the manifest.
pub fn vocab_from_manifest(path: &Path) -> Result<Vocab> {
    let entries = read_manifest(path)?;
    Vocab::build(entries.iter().map(|e| e.tokens.iter()))
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for s in vocab.symbols() {
        writeln!(f, "{s}")?;
    }
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < RESERVED.len() {
        return Err(Error::Format(format!("{}: vocab too short", path.display())));
    }
    for (i, want) in RESERVED.iter().enumerate() {
        if lines[i] != *want {
            return Err(Error::Format(format!(
                "{}: header line {} is {:?}, want {want:?}",
                path.display(),
                i + 1,
                lines[i]
            )));
        }
    }
    let mut exprs: Vec<Vec<String>> = Vec::new();
    exprs.push(lines[RESERVED.len()..].iter().map(|s| s.to_string()).collect());
    // rebuild through the sorted constructor and verify order survived
    let vocab = Vocab::build(exprs.iter())?;
    let expected: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    if vocab.symbols() != expected.as_slice() {
        return Err(Error::Format(format!(
            "{}: vocab lines are not in canonical sorted order",
            path.display()
        )));
    }
    Ok(vocab)
}

/// Loads every sample of a manifest, reading images relative to the
/// manifest's directory and encoding tokens with `vocab`.
pub fn load_samples(manifest_path: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest_path)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let image = read_pgm(&dir.join(&e.image))?;
        let ids = vocab.encode(&e.tokens)?;
        samples.push(Sample::new(image, ids, vocab, SampleSource::Manifest)?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn entry(image: &str, toks: &[&str]) -> ManifestEntry {
        ManifestEntry {
            image: image.into(),
            tokens: toks.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let entries = vec![entry("a.pgm", &["x", "^", "{", "2", "}"]), entry("b.pgm", &["1"])];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
    }

    #[test]
    fn manifest_rejects_missing_tab() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "a.pgm x y\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }

    #[test]
    fn vocab_file_round_trip_preserves_order() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let exprs = vec![vec!["b".to_string(), "a".to_string(), "\\frac".to_string()]];
        let v = Vocab::build(exprs.iter()).unwrap();
        save_vocab(&v, &p).unwrap();
        let back = load_vocab(&p).unwrap();
        assert_eq!(v, back);
        // second save must be byte-identical
        let p2 = dir.path().join("vocab2.txt");
        save_vocab(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn vocab_file_rejects_bad_header() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        std::fs::write(&p, "<pad>\n<eos>\n<sos>\na\n").unwrap();
        assert!(load_vocab(&p).is_err());
    }

    #[test]
    fn vocab_size_matches_distinct_token_count() {
        // independent count: distinct tokens + 3 reserved
        let exprs: Vec<Vec<String>> = vec![
            vec!["a".into(), "b".into(), "a".into()],
            vec!["c".into(), "b".into()],
            vec!["\\frac".into(), "{".into(), "a".into(), "}".into()],
        ];
        let mut distinct = std::collections::HashSet::new();
        for e in &exprs {
            for t in e {
                distinct.insert(t.clone());
            }
        }
        let v = Vocab::build(exprs.iter()).unwrap();
        assert_eq!(v.len(), distinct.len() + 3);
    }
}
