//! Semantic graph construction: expression-level co-occurrence counts,
//! the conditional probability matrix R with r[i][j] = P(s_i | s_j), and
//! its symmetrization R' = (R + Rᵀ)/2. The eos symbol counts as present
//! in every expression so its timesteps get regression targets; pad and
//! sos never appear.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::{Vocab, EOS_ID, PAD_ID, RESERVED, SOS_ID};
use crate::error::{Error, Result};

/// Presence counts over a training corpus: `solo[j]` expressions contain
/// symbol j, `pair[i][j]` contain both i and j (i != j).
#[derive(Debug, Clone)]
pub struct CooccurCounts {
    pub n: usize,
    pub expressions: u64,
    pair: Vec<u64>,
    pub solo: Vec<u64>,
}

impl CooccurCounts {
    pub fn pair(&self, i: usize, j: usize) -> u64 {
        self.pair[i * self.n + j]
    }
}

/// Counts per-expression presence. Duplicate symbols within one expression
/// count once; eos is appended to every expression; pad/sos are rejected.
pub fn count_cooccurrence(corpus: &[Vec<u32>], vocab: &Vocab) -> Result<CooccurCounts> {
    if corpus.is_empty() {
        return Err(Error::Invalid("count_cooccurrence: empty corpus".into()));
    }
    let n = vocab.len();
    let mut pair = vec![0u64; n * n];
    let mut solo = vec![0u64; n];
    for (idx, expr) in corpus.iter().enumerate() {
        let mut present: Vec<u32> = Vec::with_capacity(expr.len() + 1);
        for &id in expr {
            if id == PAD_ID || id == SOS_ID {
                return Err(Error::Invalid(format!(
                    "count_cooccurrence: special id {id} in expression {idx}"
                )));
            }
            if id as usize >= n {
                return Err(Error::Invalid(format!(
                    "count_cooccurrence: id {id} out of range (vocab {n}) in expression {idx}"
                )));
            }
            present.push(id);
        }
        present.push(EOS_ID);
        present.sort_unstable();
        present.dedup();
        for (a, &i) in present.iter().enumerate() {
            solo[i as usize] += 1;
            for &j in &present[a + 1..] {
                pair[i as usize * n + j as usize] += 1;
                pair[j as usize * n + i as usize] += 1;
            }
        }
    }
    Ok(CooccurCounts {
        n,
        expressions: corpus.len() as u64,
        pair,
        solo,
    })
}

/// Square matrix of correlation weights in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub n: usize,
    r: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.r
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Raw conditional matrix: r[i][j] = pair(i,j)/solo(j); diagonal 1 for
/// seen symbols; never-seen symbols get all-zero rows and columns.
pub fn conditional_matrix(counts: &CooccurCounts) -> CorrelationMatrix {
    let n = counts.n;
    let mut r = vec![0.0f64; n * n];
    for j in 0..n {
        if counts.solo[j] == 0 {
            continue;
        }
        for i in 0..n {
            if i == j {
                r[i * n + j] = 1.0;
            } else if counts.solo[j] > 0 {
                r[i * n + j] = counts.pair(i, j) as f64 / counts.solo[j] as f64;
            }
        }
    }
    CorrelationMatrix { n, r }
}

/// R' = (R + Rᵀ)/2.
pub fn symmetrize(raw: &CorrelationMatrix) -> CorrelationMatrix {
    let n = raw.n;
    let mut r = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            r[i * n + j] = 0.5 * (raw.get(i, j) + raw.get(j, i));
        }
    }
    CorrelationMatrix { n, r }
}

/// Builds the symmetrized graph straight from a token-id corpus.
pub fn build_graph(corpus: &[Vec<u32>], vocab: &Vocab) -> Result<CorrelationMatrix> {
    let counts = count_cooccurrence(corpus, vocab)?;
    Ok(symmetrize(&conditional_matrix(&counts)))
}

/// Graph file: text header `SEMGRAPH1`, n, the vocab lines, n rows of n
/// space-separated values at 9 significant digits, then a CRC line over
/// everything above it.
pub fn save_graph(matrix: &CorrelationMatrix, vocab: &Vocab, path: &Path) -> Result<()> {
    if matrix.n != vocab.len() {
        return Err(Error::Shape(format!(
            "save_graph: matrix size {} vs vocab size {}",
            matrix.n,
            vocab.len()
        )));
    }
    let mut body = String::new();
    body.push_str("SEMGRAPH1\n");
    body.push_str(&format!("{}\n", matrix.n));
    for s in vocab.symbols() {
        body.push_str(s);
        body.push('\n');
    }
    for i in 0..matrix.n {
        let row: Vec<String> = (0..matrix.n)
            .map(|j| format!("{:.8e}", matrix.get(i, j)))
            .collect();
        body.push_str(&row.join(" "));
        body.push('\n');
    }
    let crc = crc32fast::hash(body.as_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    writeln!(f, "CRC {crc:08x}")?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<(CorrelationMatrix, Vocab)> {
    let text = fs::read_to_string(path)?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));

    let Some(crc_start) = text.rfind("CRC ") else {
        return Err(bad("missing CRC line (truncated?)".into()));
    };
    let body = &text[..crc_start];
    let crc_line = text[crc_start..].trim();
    let stored = u32::from_str_radix(crc_line.trim_start_matches("CRC ").trim(), 16)
        .map_err(|_| bad("malformed CRC line".into()))?;
    if crc32fast::hash(body.as_bytes()) != stored {
        return Err(bad("CRC mismatch (corrupt or truncated)".into()));
    }

    let mut lines = body.lines();
    if lines.next() != Some("SEMGRAPH1") {
        return Err(bad("bad header".into()));
    }
    let n: usize = lines
        .next()
        .ok_or_else(|| bad("missing size".into()))?
        .trim()
        .parse()
        .map_err(|_| bad("bad size".into()))?;
    let mut symbols = Vec::with_capacity(n);
    for _ in 0..n {
        symbols.push(
            lines
                .next()
                .ok_or_else(|| bad("missing vocab line".into()))?
                .to_string(),
        );
    }
    if symbols.len() < RESERVED.len() || symbols[..3] != RESERVED.map(String::from) {
        return Err(bad("vocab header lines are not pad/sos/eos".into()));
    }
    let vocab = Vocab::build([&symbols[3..].to_vec()])?;
    if vocab.symbols() != symbols.as_slice() {
        return Err(bad("vocab lines not in canonical order".into()));
    }
    let mut r = vec![0.0f64; n * n];
    for i in 0..n {
        let line = lines.next().ok_or_else(|| bad(format!("missing row {i}")))?;
        let mut count = 0;
        for (j, tok) in line.split_whitespace().enumerate() {
            if j >= n {
                return Err(bad(format!("row {i} has too many columns")));
            }
            r[i * n + j] = tok.parse().map_err(|_| bad(format!("bad value in row {i}")))?;
            count += 1;
        }
        if count != n {
            return Err(bad(format!("row {i} has {count} columns, want {n}")));
        }
    }
    if lines.next().is_some() {
        return Err(bad("trailing lines after matrix".into()));
    }
    Ok((CorrelationMatrix { n, r }, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_abc() -> Vocab {
        let exprs = vec![vec!["a".to_string(), "b".to_string(), "c".to_string()]];
        Vocab::build(exprs.iter()).unwrap()
    }

    // ids with this vocab: a=3, b=4, c=5

    #[test]
    fn presence_counts_match_hand_enumeration() {
        let vocab = vocab_abc();
        let corpus = vec![vec![3u32, 4], vec![3, 5]];
        let c = count_cooccurrence(&corpus, &vocab).unwrap();
        assert_eq!(c.solo[3], 2);
        assert_eq!(c.solo[4], 1);
        assert_eq!(c.solo[5], 1);
        assert_eq!(c.pair(3, 4), 1);
        assert_eq!(c.pair(4, 3), 1);
        assert_eq!(c.pair(4, 5), 0);
        // eos present in both expressions
        assert_eq!(c.solo[EOS_ID as usize], 2);
        assert_eq!(c.pair(EOS_ID as usize, 3), 2);
    }

    #[test]
    fn duplicates_count_once() {
        let vocab = vocab_abc();
        let corpus = vec![vec![3u32, 3, 4]];
        let c = count_cooccurrence(&corpus, &vocab).unwrap();
        assert_eq!(c.solo[3], 1);
        assert_eq!(c.pair(3, 4), 1);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(count_cooccurrence(&[], &vocab_abc()).is_err());
    }

    #[test]
    fn specials_rejected() {
        let vocab = vocab_abc();
        assert!(count_cooccurrence(&[vec![PAD_ID]], &vocab).is_err());
        assert!(count_cooccurrence(&[vec![SOS_ID]], &vocab).is_err());
        assert!(count_cooccurrence(&[vec![99]], &vocab).is_err());
    }

    #[test]
    fn conditional_probabilities_match_hand_values() {
        let vocab = vocab_abc();
        let corpus = vec![vec![3u32, 4], vec![3, 5]];
        let r = conditional_matrix(&count_cooccurrence(&corpus, &vocab).unwrap());
        // P(b|a) = 1/2, P(a|b) = 1
        assert_eq!(r.get(4, 3), 0.5);
        assert_eq!(r.get(3, 4), 1.0);
        // diagonal of seen symbols
        assert_eq!(r.get(3, 3), 1.0);
        assert_eq!(r.get(EOS_ID as usize, EOS_ID as usize), 1.0);
        // eos conditions to 1 against every seen symbol
        assert_eq!(r.get(EOS_ID as usize, 3), 1.0);
        assert_eq!(r.get(EOS_ID as usize, 4), 1.0);
    }

    #[test]
    fn unseen_symbols_have_zero_rows_and_columns() {
        let vocab = vocab_abc();
        let corpus = vec![vec![3u32]];
        let r = conditional_matrix(&count_cooccurrence(&corpus, &vocab).unwrap());
        let u = 4; // b never appears
        for k in 0..r.n {
            assert_eq!(r.get(u, k), 0.0);
            assert_eq!(r.get(k, u), 0.0);
        }
        assert_eq!(r.get(u, u), 0.0);
        // pad/sos rows are zero too
        assert_eq!(r.get(PAD_ID as usize, PAD_ID as usize), 0.0);
    }

    #[test]
    fn symmetrize_averages_and_is_idempotent() {
        let raw = CorrelationMatrix {
            n: 2,
            r: vec![1.0, 1.0, 0.5, 1.0],
        };
        let s = symmetrize(&raw);
        assert_eq!(s.get(0, 1), 0.75);
        assert_eq!(s.get(1, 0), 0.75);
        let s2 = symmetrize(&s);
        assert_eq!(s.values(), s2.values());
        assert!(s.is_symmetric(0.0));
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let vocab = vocab_abc();
        let corpus1 = vec![vec![3u32, 4], vec![3, 5], vec![4]];
        let corpus2 = vec![vec![4u32], vec![3, 4], vec![3, 5]];
        let a = build_graph(&corpus1, &vocab).unwrap();
        let b = build_graph(&corpus2, &vocab).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn graph_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.graph");
        let vocab = vocab_abc();
        let corpus = vec![vec![3u32, 4], vec![3, 5], vec![4, 5]];
        let g = build_graph(&corpus, &vocab).unwrap();
        save_graph(&g, &vocab, &p).unwrap();
        let (back, back_vocab) = load_graph(&p).unwrap();
        assert_eq!(back_vocab, vocab);
        assert_eq!(back.n, g.n);
        // exact at the stored 9 significant digits
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
        // and exactly stable once quantized: re-save is byte-identical
        let p2 = dir.path().join("g2.graph");
        save_graph(&back, &back_vocab, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_graph_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.graph");
        let vocab = vocab_abc();
        let g = build_graph(&[vec![3u32, 4]], &vocab).unwrap();
        save_graph(&g, &vocab, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(load_graph(&p).is_err());
        std::fs::write(&p, "garbage\n").unwrap();
        assert!(load_graph(&p).is_err());
    }
}
