//! DenseNet-style encoder with exactly x16 spatial downsampling: a
//! stride-2 stem conv plus pool gives x4, and two transitions with 2x2
//! average pooling give the rest. Blocks are bottleneck-free BN-ReLU-3x3
//! layers whose outputs concatenate; a final BN-ReLU-1x1 projection sets
//! the output channel count.

use crate::error::{Error, Result};
use crate::tensor::layers::{BatchNorm, Conv2d, SeedRng};
use crate::tensor::{ops, Mode, Real, Tensor};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub growth: usize,
    pub layers_per_block: [usize; 3],
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_channels: 24,
            growth: 12,
            layers_per_block: [3, 3, 3],
            out_channels: 128,
        }
    }
}

impl EncoderConfig {
    /// The 684-channel profile matching the published feature width.
    pub fn paper_parity() -> Self {
        EncoderConfig {
            stem_channels: 48,
            growth: 24,
            layers_per_block: [16, 16, 16],
            out_channels: 684,
        }
    }

    /// Tiny profile for end-to-end gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            stem_channels: 4,
            growth: 2,
            layers_per_block: [1, 1, 1],
            out_channels: 8,
        }
    }
}

struct DenseLayer<R: Real> {
    bn: BatchNorm<R>,
    conv: Conv2d<R>,
}

struct DenseBlock<R: Real> {
    layers: Vec<DenseLayer<R>>,
}

impl<R: Real> DenseBlock<R> {
    fn new(c_in: usize, growth: usize, n_layers: usize, rng: &mut SeedRng) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        let mut c = c_in;
        for _ in 0..n_layers {
            layers.push(DenseLayer {
                bn: BatchNorm::new(c),
                conv: Conv2d::new(c, growth, 3, 1, 1, rng),
            });
            c += growth;
        }
        DenseBlock { layers }
    }

    fn forward(&self, x: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let mut features = vec![x.clone()];
        for layer in &self.layers {
            let refs: Vec<&Tensor<R>> = features.iter().collect();
            let cat = ops::concat_channels(&refs)?;
            let pre = ops::relu(&layer.bn.forward_nchw(&cat, mode)?);
            features.push(layer.conv.forward(&pre)?);
        }
        let refs: Vec<&Tensor<R>> = features.iter().collect();
        ops::concat_channels(&refs)
    }
}

struct Transition<R: Real> {
    bn: BatchNorm<R>,
    conv: Conv2d<R>,
}

impl<R: Real> Transition<R> {
    fn new(c_in: usize, c_out: usize, rng: &mut SeedRng) -> Self {
        Transition {
            bn: BatchNorm::new(c_in),
            conv: Conv2d::new(c_in, c_out, 1, 1, 0, rng),
        }
    }

    fn forward(&self, x: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let pre = ops::relu(&self.bn.forward_nchw(x, mode)?);
        ops::avg_pool2(&self.conv.forward(&pre)?)
    }
}

pub struct Encoder<R: Real> {
    pub cfg: EncoderConfig,
    stem_conv: Conv2d<R>,
    stem_bn: BatchNorm<R>,
    blocks: Vec<DenseBlock<R>>,
    transitions: Vec<Transition<R>>,
    final_bn: BatchNorm<R>,
    final_conv: Conv2d<R>,
}

impl<R: Real> Encoder<R> {
    pub fn new(cfg: &EncoderConfig, rng: &mut SeedRng) -> Self {
        let [l1, l2, l3] = cfg.layers_per_block;
        let g = cfg.growth;
        let c1 = cfg.stem_channels + l1 * g;
        let t1 = c1 / 2;
        let c2 = t1 + l2 * g;
        let t2 = c2 / 2;
        let c3 = t2 + l3 * g;
        Encoder {
            cfg: cfg.clone(),
            stem_conv: Conv2d::new(1, cfg.stem_channels, 3, 2, 1, rng),
            stem_bn: BatchNorm::new(cfg.stem_channels),
            blocks: vec![
                DenseBlock::new(cfg.stem_channels, g, l1, rng),
                DenseBlock::new(t1, g, l2, rng),
                DenseBlock::new(t2, g, l3, rng),
            ],
            transitions: vec![Transition::new(c1, t1, rng), Transition::new(c2, t2, rng)],
            final_bn: BatchNorm::new(c3),
            final_conv: Conv2d::new(c3, cfg.out_channels, 1, 1, 0, rng),
        }
    }

    /// `(B,1,H,W)` -> `(B,C,H/16,W/16)`; extents must be multiples of 16.
    pub fn forward(&self, images: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("encoder: want (B,1,H,W), got {s:?}")));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::Invalid(format!(
                "encoder: extents must be multiples of 16, got {}x{}",
                s[2], s[3]
            )));
        }
        let mut x = self.stem_conv.forward(images)?; // /2
        x = ops::relu(&self.stem_bn.forward_nchw(&x, mode)?);
        x = ops::avg_pool2(&x)?; // /4
        x = self.blocks[0].forward(&x, mode)?;
        x = self.transitions[0].forward(&x, mode)?; // /8
        x = self.blocks[1].forward(&x, mode)?;
        x = self.transitions[1].forward(&x, mode)?; // /16
        x = self.blocks[2].forward(&x, mode)?;
        x = ops::relu(&self.final_bn.forward_nchw(&x, mode)?);
        self.final_conv.forward(&x)
    }

    pub fn register(&self, ps: &mut crate::tensor::params::ParamSet<R>, prefix: &str) {
        self.stem_conv.register(ps, &format!("{prefix}.stem.conv"));
        self.stem_bn.register(ps, &format!("{prefix}.stem.bn"));
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.layers.iter().enumerate() {
                layer.bn.register(ps, &format!("{prefix}.block{bi}.layer{li}.bn"));
                layer
                    .conv
                    .register(ps, &format!("{prefix}.block{bi}.layer{li}.conv"));
            }
        }
        for (ti, t) in self.transitions.iter().enumerate() {
            t.bn.register(ps, &format!("{prefix}.trans{ti}.bn"));
            t.conv.register(ps, &format!("{prefix}.trans{ti}.conv"));
        }
        self.final_bn.register(ps, &format!("{prefix}.final.bn"));
        self.final_conv.register(ps, &format!("{prefix}.final.conv"));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn downsamples_exactly_sixteenfold() {
        let mut rng = SeedRng::seed_from_u64(1);
        let enc = Encoder::<f32>::new(&EncoderConfig::tiny(), &mut rng);
        let x = Tensor::zeros(&[1, 1, 48, 48]);
        let y = enc.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), vec![1, 8, 3, 3]);
        let x = Tensor::zeros(&[2, 1, 32, 80]);
        let y = enc.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), vec![2, 8, 2, 5]);
    }

    #[test]
    fn rejects_non_multiple_of_16() {
        let mut rng = SeedRng::seed_from_u64(1);
        let enc = Encoder::<f32>::new(&EncoderConfig::tiny(), &mut rng);
        let x = Tensor::zeros(&[1, 1, 40, 48]);
        assert!(enc.forward(&x, Mode::Train).is_err());
    }

    #[test]
    fn zero_image_finite_in_eval_mode() {
        let mut rng = SeedRng::seed_from_u64(2);
        let enc = Encoder::<f32>::new(&EncoderConfig::tiny(), &mut rng);
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        let y = enc.forward(&x, Mode::Eval).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn paper_parity_channel_arithmetic() {
        // 48 + 16*24 = 432 -> 216; 216 + 384 = 600 -> 300; 300 + 384 = 684
        let cfg = EncoderConfig::paper_parity();
        let [l1, l2, l3] = cfg.layers_per_block;
        let c1 = cfg.stem_channels + l1 * cfg.growth;
        let t1 = c1 / 2;
        let c2 = t1 + l2 * cfg.growth;
        let t2 = c2 / 2;
        let c3 = t2 + l3 * cfg.growth;
        assert_eq!(c3, 684);
        assert_eq!(cfg.out_channels, 684);
    }
}
