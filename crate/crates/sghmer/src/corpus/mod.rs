//! Tokenization, vocabulary, synthetic rendering and batching.

pub mod atlas;
pub mod grammar;
pub mod manifest;
pub mod pgm;
pub mod render;
pub mod tokenize;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use tokenize::tokenize;

pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

/// Bidirectional symbol <-> id map. Ids 0/1/2 are pad/sos/eos; real
/// symbols follow in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from a token corpus: unique tokens sorted lexicographically
    /// after the three reserved entries. Deterministic across runs.
    pub fn build<'a, I, T>(expressions: I) -> Result<Vocab>
    where
        I: IntoIterator<Item = T>,
        T: IntoIterator<Item = &'a String>,
    {
        let mut uniq: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut any = false;
        for expr in expressions {
            any = true;
            for tok in expr {
                if RESERVED.contains(&tok.as_str()) {
                    return Err(Error::Invalid(format!(
                        "vocab: reserved token {tok:?} in corpus"
                    )));
                }
                if seen.insert(tok.clone()) {
                    uniq.push(tok.clone());
                }
            }
        }
        if !any {
            return Err(Error::Invalid("vocab: empty corpus".into()));
        }
        uniq.sort();
        Vocab::from_symbols(uniq)
    }

    fn from_symbols(symbols: Vec<String>) -> Result<Vocab> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(symbols);
        let mut index = HashMap::new();
        for (i, s) in all.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("vocab: duplicate symbol {s:?}")));
            }
        }
        Ok(Vocab {
            symbols: all,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Symbol ids for a token sequence; rejects unknown tokens.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Invalid(format!("vocab: unknown token {t:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Grayscale ink image, row-major, values in [0,1] with ink = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub pix: Vec<f32>,
}

impl GrayImage {
    pub fn blank(h: usize, w: usize) -> Self {
        GrayImage {
            h,
            w,
            pix: vec![0.0; h * w],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Synthetic,
    Manifest,
}

/// One labeled image. Token ids are real symbols only (no specials);
/// images below the 32-pixel minimum are padded up with background.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    pub tokens: Vec<u32>,
    pub source: SampleSource,
}

impl Sample {
    pub fn new(image: GrayImage, tokens: Vec<u32>, vocab: &Vocab, source: SampleSource) -> Result<Sample> {
        for &t in &tokens {
            if t < RESERVED.len() as u32 || t >= vocab.len() as u32 {
                return Err(Error::Invalid(format!(
                    "sample: token id {t} out of symbol range 3..{}",
                    vocab.len()
                )));
            }
        }
        let image = pad_to_min(image, render::MIN_EXTENT);
        Ok(Sample {
            image,
            tokens,
            source,
        })
    }
}

fn pad_to_min(img: GrayImage, min: usize) -> GrayImage {
    if img.h >= min && img.w >= min {
        return img;
    }
    let h = img.h.max(min);
    let w = img.w.max(min);
    let mut out = GrayImage::blank(h, w);
    for y in 0..img.h {
        let src = y * img.w;
        let dst = y * w;
        out.pix[dst..dst + img.w].copy_from_slice(&img.pix[src..src + img.w]);
    }
    out
}

/// Renders a token sequence into a labeled sample.
pub fn render_synthetic(tokens: &[String], seed: u64, vocab: &Vocab) -> Result<Sample> {
    let image = render::render_tokens(tokens, seed)?;
    let ids = vocab.encode(tokens)?;
    Sample::new(image, ids, vocab, SampleSource::Synthetic)
}

/// Padded batch: images at common multiple-of-16 extents, targets with a
/// trailing eos and pad fill, masks marking the real content of each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    pub hmax: usize,
    pub wmax: usize,
    /// `b * 1 * hmax * wmax`
    pub images: Vec<f32>,
    /// `b * hmax * wmax`, 1 exactly on original pixels
    pub image_mask: Vec<u8>,
    /// target columns = longest token sequence + 1 (for eos)
    pub tmax: usize,
    /// `b * tmax`: tokens, then eos, then pad
    pub targets: Vec<u32>,
    /// `b * tmax`: 1 on real tokens and the eos position
    pub target_mask: Vec<u8>,
}

fn round_up_16(v: usize) -> usize {
    v.div_ceil(16) * 16
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Invalid("make_batch: empty sample list".into()));
    }
    let b = samples.len();
    let hmax = round_up_16(samples.iter().map(|s| s.image.h).max().unwrap());
    let wmax = round_up_16(samples.iter().map(|s| s.image.w).max().unwrap());
    let tmax = samples.iter().map(|s| s.tokens.len()).max().unwrap() + 1;

    let mut images = vec![0.0f32; b * hmax * wmax];
    let mut image_mask = vec![0u8; b * hmax * wmax];
    let mut targets = vec![PAD_ID; b * tmax];
    let mut target_mask = vec![0u8; b * tmax];

    for (i, s) in samples.iter().enumerate() {
        let base = i * hmax * wmax;
        for y in 0..s.image.h {
            let src = y * s.image.w;
            let dst = base + y * wmax;
            images[dst..dst + s.image.w].copy_from_slice(&s.image.pix[src..src + s.image.w]);
            for m in &mut image_mask[dst..dst + s.image.w] {
                *m = 1;
            }
        }
        let trow = i * tmax;
        for (t, &tok) in s.tokens.iter().enumerate() {
            targets[trow + t] = tok;
            target_mask[trow + t] = 1;
        }
        targets[trow + s.tokens.len()] = EOS_ID;
        target_mask[trow + s.tokens.len()] = 1;
    }

    Ok(Batch {
        b,
        hmax,
        wmax,
        images,
        image_mask,
        tmax,
        targets,
        target_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocab_sorted_after_reserved() {
        let exprs = vec![ts(&["b", "a"]), ts(&["c", "b"])];
        let v = Vocab::build(exprs.iter()).unwrap();
        assert_eq!(
            v.symbols(),
            &["<pad>", "<sos>", "<eos>", "a", "b", "c"]
                .map(String::from)
        );
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.token(0), Some("<pad>"));
    }

    #[test]
    fn vocab_build_deterministic() {
        let exprs = vec![ts(&["x", "y", "\\frac"]), ts(&["1", "x"])];
        let a = Vocab::build(exprs.iter()).unwrap();
        let b = Vocab::build(exprs.iter()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let exprs: Vec<Vec<String>> = vec![];
        assert!(Vocab::build(exprs.iter()).is_err());
    }

    #[test]
    fn single_sample_batch_pads_to_48() {
        let v = Vocab::build([&ts(&["a"])]).unwrap();
        let img = GrayImage::blank(40, 40);
        let s = Sample::new(img, vec![3], &v, SampleSource::Synthetic).unwrap();
        let batch = make_batch(&[&s]).unwrap();
        assert_eq!((batch.hmax, batch.wmax), (48, 48));
        let ones: usize = batch.image_mask.iter().map(|&m| m as usize).sum();
        assert_eq!(ones, 1600);
    }

    #[test]
    fn target_rows_get_eos_and_mask() {
        let v = Vocab::build([&ts(&["a", "b", "c", "d", "e"])]).unwrap();
        let mk = |n: usize| {
            Sample::new(
                GrayImage::blank(32, 32),
                (0..n as u32).map(|i| i + 3).collect(),
                &v,
                SampleSource::Synthetic,
            )
            .unwrap()
        };
        let (s3, s5) = (mk(3), mk(5));
        let batch = make_batch(&[&s3, &s5]).unwrap();
        assert_eq!(batch.tmax, 6);
        let row0: usize = batch.target_mask[0..6].iter().map(|&m| m as usize).sum();
        let row1: usize = batch.target_mask[6..12].iter().map(|&m| m as usize).sum();
        assert_eq!((row0, row1), (4, 6));
        assert_eq!(batch.targets[3], EOS_ID);
        assert_eq!(batch.targets[4], PAD_ID);
        assert_eq!(batch.targets[11], EOS_ID);
    }

    #[test]
    fn identical_samples_identical_mask_rows() {
        let v = Vocab::build([&ts(&["a"])]).unwrap();
        let s = Sample::new(GrayImage::blank(33, 40), vec![3], &v, SampleSource::Synthetic).unwrap();
        let batch = make_batch(&[&s, &s]).unwrap();
        let n = batch.hmax * batch.wmax;
        assert_eq!(&batch.image_mask[0..n], &batch.image_mask[n..2 * n]);
        assert_eq!(&batch.target_mask[0..2], &batch.target_mask[2..4]);
    }

    #[test]
    fn sample_rejects_special_ids() {
        let v = Vocab::build([&ts(&["a"])]).unwrap();
        let img = GrayImage::blank(32, 32);
        assert!(Sample::new(img.clone(), vec![PAD_ID], &v, SampleSource::Synthetic).is_err());
        assert!(Sample::new(img.clone(), vec![EOS_ID], &v, SampleSource::Synthetic).is_err());
        assert!(Sample::new(img, vec![99], &v, SampleSource::Synthetic).is_err());
    }

    #[test]
    fn small_images_padded_to_minimum() {
        let v = Vocab::build([&ts(&["a"])]).unwrap();
        let s = Sample::new(GrayImage::blank(10, 50), vec![3], &v, SampleSource::Manifest).unwrap();
        assert_eq!((s.image.h, s.image.w), (32, 50));
    }
}
