//! Encoder-decoder recognizer: feature extraction, coverage attention and
//! symbol prediction, plus batch-level glue between corpus data and the
//! tensor graph.

pub mod decoder;
pub mod encoder;

pub use decoder::{DecodeContext, Decoder, DecoderConfig, DecoderState, StepOutput};
pub use encoder::{Encoder, EncoderConfig};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::tensor::layers::SeedRng;
use crate::tensor::params::ParamSet;
use crate::tensor::{Mode, Real, Tensor};

/// Encoded features plus the pooled validity mask.
pub struct FeatureMap<R: Real> {
    pub f: Tensor<R>,
    /// `b * hp * wp`, max-pooled from the image mask
    pub mask: Vec<u8>,
    pub b: usize,
    pub c: usize,
    pub hp: usize,
    pub wp: usize,
}

/// Max-pools a `(B,H,W)` binary mask by 16x16 blocks.
pub fn pool_mask_16(mask: &[u8], b: usize, h: usize, w: usize) -> Vec<u8> {
    let (hp, wp) = (h / 16, w / 16);
    let mut out = vec![0u8; b * hp * wp];
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                let mut any = 0u8;
                'scan: for y in i * 16..(i + 1) * 16 {
                    for x in j * 16..(j + 1) * 16 {
                        if mask[(bi * h + y) * w + x] != 0 {
                            any = 1;
                            break 'scan;
                        }
                    }
                }
                out[(bi * hp + i) * wp + j] = any;
            }
        }
    }
    out
}

pub struct Model<R: Real> {
    pub encoder: Encoder<R>,
    pub decoder: Decoder<R>,
}

impl<R: Real> Model<R> {
    pub fn new(enc_cfg: &EncoderConfig, dec_cfg: DecoderConfig, rng: &mut SeedRng) -> Self {
        Model {
            encoder: Encoder::new(enc_cfg, rng),
            decoder: Decoder::new(dec_cfg, rng),
        }
    }

    /// Runs the encoder over a batch and pools its mask.
    pub fn encode(&self, batch: &Batch, mode: Mode) -> Result<FeatureMap<R>> {
        if batch.hmax % 16 != 0 || batch.wmax % 16 != 0 {
            return Err(Error::Invalid(format!(
                "encode: batch extents {}x{} not multiples of 16",
                batch.hmax, batch.wmax
            )));
        }
        let values: Vec<R> = batch
            .images
            .iter()
            .map(|&v| crate::tensor::r::<R>(v as f64))
            .collect();
        let images = Tensor::from_vec(&[batch.b, 1, batch.hmax, batch.wmax], values)?;
        let f = self.encoder.forward(&images, mode)?;
        let s = f.shape();
        Ok(FeatureMap {
            mask: pool_mask_16(&batch.image_mask, batch.b, batch.hmax, batch.wmax),
            b: s[0],
            c: s[1],
            hp: s[2],
            wp: s[3],
            f,
        })
    }

    pub fn register(&self, ps: &mut ParamSet<R>) {
        self.encoder.register(ps, "encoder");
        self.decoder.register(ps, "decoder");
    }

    /// Fresh parameter set holding every model tensor.
    pub fn param_set(&self) -> ParamSet<R> {
        let mut ps = ParamSet::new();
        self.register(&mut ps);
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, GrayImage, Sample, SampleSource, Vocab};
    use crate::tensor::ops;
    use rand::{Rng, SeedableRng};

    fn small_vocab() -> Vocab {
        let exprs = vec![vec!["a".to_string(), "b".to_string()]];
        Vocab::build(exprs.iter()).unwrap()
    }

    fn tiny_model(vocab: &Vocab, seed: u64) -> Model<f64> {
        let mut rng = SeedRng::seed_from_u64(seed);
        let enc = EncoderConfig::tiny();
        let dec = DecoderConfig {
            vocab_size: vocab.len(),
            feat_channels: enc.out_channels,
            hidden: 8,
            embed: 8,
            attn_hidden: 8,
            coverage_kernel: 1,
        };
        Model::new(&enc, dec, &mut rng)
    }

    fn random_sample(vocab: &Vocab, h: usize, w: usize, n_tokens: usize, seed: u64) -> Sample {
        let mut rng = SeedRng::seed_from_u64(seed);
        let mut img = GrayImage::blank(h, w);
        for v in img.pix.iter_mut() {
            *v = if rng.gen_bool(0.2) { 1.0 } else { 0.0 };
        }
        let tokens: Vec<u32> = (0..n_tokens)
            .map(|_| rng.gen_range(3..vocab.len() as u32))
            .collect();
        Sample::new(img, tokens, vocab, SampleSource::Synthetic).unwrap()
    }

    #[test]
    fn pooled_mask_matches_oracle() {
        // half-padded batch: one 32x32 and one 32x64 sample
        let vocab = small_vocab();
        let s1 = random_sample(&vocab, 32, 32, 1, 1);
        let s2 = random_sample(&vocab, 32, 64, 2, 2);
        let batch = make_batch(&[&s1, &s2]).unwrap();
        let pooled = pool_mask_16(&batch.image_mask, batch.b, batch.hmax, batch.wmax);
        // independent oracle: nested max over every block
        let (hp, wp) = (batch.hmax / 16, batch.wmax / 16);
        for bi in 0..batch.b {
            for i in 0..hp {
                for j in 0..wp {
                    let mut expect = 0u8;
                    for y in 0..16 {
                        for x in 0..16 {
                            expect = expect.max(
                                batch.image_mask
                                    [(bi * batch.hmax + i * 16 + y) * batch.wmax + j * 16 + x],
                            );
                        }
                    }
                    assert_eq!(pooled[(bi * hp + i) * wp + j], expect);
                }
            }
        }
        // sample 1 occupies only the left half of the padded width
        assert_eq!(&pooled[0..wp], &[1, 1, 0, 0]);
    }

    #[test]
    fn zero_energy_weights_give_uniform_alpha() {
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 3);
        let s = random_sample(&vocab, 32, 64, 2, 3);
        let batch = make_batch(&[&s]).unwrap();
        let fmap = model.encode(&batch, Mode::Eval).unwrap();
        model.decoder.zero_energy_weights();
        let (ctx, state) = model.decoder.begin(&fmap).unwrap();
        let out = model.decoder.step(&[1], &state, &ctx).unwrap();
        let alpha = out.alpha.to_vec();
        let valid: Vec<f64> = alpha
            .iter()
            .zip(&ctx.mask)
            .filter(|(_, &m)| m != 0)
            .map(|(&a, _)| a)
            .collect();
        let expect = 1.0 / valid.len() as f64;
        for v in valid {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_rows_sum_to_one_for_random_weights() {
        let vocab = small_vocab();
        for seed in 0..10u64 {
            let model = tiny_model(&vocab, seed);
            let s1 = random_sample(&vocab, 32, 48, 2, seed + 100);
            let s2 = random_sample(&vocab, 48, 32, 1, seed + 200);
            let batch = make_batch(&[&s1, &s2]).unwrap();
            let fmap = model.encode(&batch, Mode::Eval).unwrap();
            let (ctx, state) = model.decoder.begin(&fmap).unwrap();
            let out = model.decoder.step(&[1, 1], &state, &ctx).unwrap();
            let alpha = out.alpha.to_vec();
            for bi in 0..ctx.b {
                let row = &alpha[bi * ctx.p..(bi + 1) * ctx.p];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
                for (a, &m) in row.iter().zip(&ctx.mask[bi * ctx.p..(bi + 1) * ctx.p]) {
                    if m == 0 {
                        assert_eq!(*a, 0.0, "masked position must be exactly 0");
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_telescopes_over_steps() {
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 9);
        let s = random_sample(&vocab, 32, 48, 3, 4);
        let batch = make_batch(&[&s]).unwrap();
        let fmap = model.encode(&batch, Mode::Eval).unwrap();
        let (ctx, mut state) = model.decoder.begin(&fmap).unwrap();
        assert!(state.coverage.to_vec().iter().all(|&v| v == 0.0));
        let mut alpha_sum = vec![0.0f64; ctx.p];
        for t in 0..3 {
            let out = model.decoder.step(&[3], &state, &ctx).unwrap();
            for (acc, &a) in alpha_sum.iter_mut().zip(out.alpha.to_vec().iter()) {
                *acc += a;
            }
            state = out.state;
            assert_eq!(state.t, t + 1);
        }
        for (cov, acc) in state.coverage.to_vec().iter().zip(&alpha_sum) {
            assert_eq!(*cov, *acc, "coverage must equal the exact alpha sum");
        }
    }

    #[test]
    fn teacher_forcing_shapes_and_targets() {
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 5);
        let s = random_sample(&vocab, 32, 32, 1, 5);
        let batch = make_batch(&[&s]).unwrap();
        let fmap = model.encode(&batch, Mode::Train).unwrap();
        let out = model.decoder.forward_teacher_forced(&batch, &fmap).unwrap();
        // single symbol + eos -> 2 steps
        assert_eq!(out.steps, 2);
        assert_eq!(out.logits_flat.shape(), vec![2, vocab.len()]);
        assert_eq!(out.targets_flat.len(), 2);
        assert_eq!(out.mask_flat, vec![1, 1]);
    }

    #[test]
    fn permuting_batch_permutes_outputs() {
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 6);
        let s1 = random_sample(&vocab, 32, 48, 2, 7);
        let s2 = random_sample(&vocab, 32, 48, 2, 8);
        let b12 = make_batch(&[&s1, &s2]).unwrap();
        let b21 = make_batch(&[&s2, &s1]).unwrap();
        let (o12, _) = model
            .decoder
            .decode_greedy(&model.encode(&b12, Mode::Eval).unwrap(), 5)
            .unwrap();
        let (o21, _) = model
            .decoder
            .decode_greedy(&model.encode(&b21, Mode::Eval).unwrap(), 5)
            .unwrap();
        assert_eq!(o12[0], o21[1]);
        assert_eq!(o12[1], o21[0]);
    }

    #[test]
    fn greedy_max_len_one_emits_at_most_one_symbol() {
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 7);
        let s = random_sample(&vocab, 32, 32, 1, 9);
        let batch = make_batch(&[&s]).unwrap();
        let fmap = model.encode(&batch, Mode::Eval).unwrap();
        let (outs, _) = model.decoder.decode_greedy(&fmap, 1).unwrap();
        assert!(outs[0].len() <= 1);
    }

    #[test]
    fn greedy_deterministic_across_runs() {
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 8);
        let s = random_sample(&vocab, 32, 48, 2, 10);
        let batch = make_batch(&[&s]).unwrap();
        let a = model
            .decoder
            .decode_greedy(&model.encode(&batch, Mode::Eval).unwrap(), 10)
            .unwrap()
            .0;
        let b = model
            .decoder
            .decode_greedy(&model.encode(&batch, Mode::Eval).unwrap(), 10)
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_tiny_gradcheck() {
        // total cross-entropy wrt every parameter of the tiny model
        let vocab = small_vocab();
        let model = tiny_model(&vocab, 42);
        let s1 = random_sample(&vocab, 32, 32, 2, 11);
        let s2 = random_sample(&vocab, 32, 32, 1, 12);
        let batch = make_batch(&[&s1, &s2]).unwrap();
        let ps = model.param_set();

        let forward = || -> crate::error::Result<Tensor<f64>> {
            let fmap = model.encode(&batch, Mode::Train)?;
            let out = model.decoder.forward_teacher_forced(&batch, &fmap)?;
            ops::masked_cross_entropy(&out.logits_flat, &out.targets_flat, &out.mask_flat)
        };

        let mut worst = 0.0f64;
        let mut worst_name = String::new();
        for (name, p) in ps.trainable() {
            let err = crate::tensor::gradcheck::grad_check(|_| forward(), &p, 1e-5).unwrap();
            if err > worst {
                worst = err;
                worst_name = name;
            }
        }
        assert!(worst < 1e-3, "worst {worst} at {worst_name}");
    }
}
