//! Random expression generator and synthetic dataset writer. Expressions
//! stay depth <= 2: scripts and fractions appear at the top level with
//! plain-symbol groups inside.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::atlas;
use super::manifest::{write_manifest, ManifestEntry};
use super::pgm::write_pgm;
use super::render::render_tokens;
use crate::error::Result;

pub const DEFAULT_MAX_TOKENS: usize = 20;

fn symbol_pool() -> Vec<&'static str> {
    atlas::GLYPHS.iter().map(|(t, _)| *t).collect()
}

fn push_group(toks: &mut Vec<String>, pool: &[&str], rng: &mut ChaCha8Rng, max_syms: usize) {
    toks.push("{".into());
    let n = rng.gen_range(1..=max_syms);
    for _ in 0..n {
        toks.push(pool[rng.gen_range(0..pool.len())].into());
    }
    toks.push("}".into());
}

/// One random expression of 1..=max_tokens tokens.
pub fn random_expression(rng: &mut ChaCha8Rng, max_tokens: usize) -> Vec<String> {
    let pool = symbol_pool();
    let max_tokens = max_tokens.max(1);
    let target = rng.gen_range(1..=max_tokens);
    let mut toks: Vec<String> = Vec::new();
    while toks.len() < target {
        let remaining = max_tokens - toks.len();
        let roll: f64 = rng.gen();
        if roll < 0.18 && remaining >= 5 {
            // sym ^ { ... } or sym _ { ... }
            toks.push(pool[rng.gen_range(0..pool.len())].into());
            toks.push(if rng.gen_bool(0.6) { "^" } else { "_" }.into());
            let room = ((remaining - 4).min(2)).max(1);
            push_group(&mut toks, &pool, rng, room);
        } else if roll < 0.28 && remaining >= 7 {
            toks.push("\\frac".into());
            push_group(&mut toks, &pool, rng, 1 + (remaining >= 9) as usize);
            push_group(&mut toks, &pool, rng, 1 + (remaining >= 9) as usize);
        } else {
            toks.push(pool[rng.gen_range(0..pool.len())].into());
        }
    }
    toks
}

/// Writes `n` rendered expressions plus a manifest into `dir`. Fully
/// seeded: reruns produce byte-identical images and manifest.
pub fn generate_dataset(dir: &Path, n: usize, seed: u64, max_tokens: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let tokens = random_expression(&mut rng, max_tokens);
        let render_seed: u64 = rng.gen();
        let image = render_tokens(&tokens, render_seed)?;
        let name = format!("img{i:05}.pgm");
        write_pgm(&dir.join(&name), &image)?;
        entries.push(ManifestEntry {
            image: name,
            tokens,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expressions_respect_token_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let e = random_expression(&mut rng, 20);
            assert!(!e.is_empty() && e.len() <= 20, "len {}", e.len());
            // structure must be renderable
            render_tokens(&e, 0).unwrap();
        }
    }

    #[test]
    fn short_budget_stays_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let e = random_expression(&mut rng, 3);
            assert!(e.len() <= 3);
            render_tokens(&e, 1).unwrap();
        }
    }

    #[test]
    fn regenerated_corpus_hash_is_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(dir1.path(), 40, 7, 12).unwrap();
        let m2 = generate_dataset(dir2.path(), 40, 7, 12).unwrap();
        assert_eq!(corpus_hash(&m1), corpus_hash(&m2));
    }

    /// CRC32 over the manifest bytes plus every image's bytes in order.
    pub(crate) fn corpus_hash(manifest: &std::path::Path) -> u32 {
        let dir = manifest.parent().unwrap();
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&std::fs::read(manifest).unwrap());
        for entry in super::super::manifest::read_manifest(manifest).unwrap() {
            hasher.update(&std::fs::read(dir.join(&entry.image)).unwrap());
        }
        hasher.finalize()
    }
}
