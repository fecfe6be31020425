//! Coverage-attention GRU decoder. Per step: the first GRU consumes the
//! previous symbol's embedding, attention mixes the feature map using the
//! accumulated coverage, the second GRU consumes the visual context, and
//! the classification vector aggregates embedding, hidden state and
//! visual context before the softmax projection.

use super::FeatureMap;
use crate::corpus::{Batch, EOS_ID, SOS_ID};
use crate::error::{Error, Result};
use crate::tensor::layers::{Embedding, GruCell, Linear, SeedRng};
use crate::tensor::params::ParamSet;
use crate::tensor::{no_grad, ops, Real, Tensor};

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub feat_channels: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attn_hidden: usize,
    /// Spatial extent of the coverage transform; 1 keeps the literal
    /// per-position linear map, odd sizes >1 switch to a convolution.
    pub coverage_kernel: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize, feat_channels: usize) -> Self {
        DecoderConfig {
            vocab_size,
            feat_channels,
            hidden: 256,
            embed: 256,
            attn_hidden: 512,
            coverage_kernel: 1,
        }
    }
}

pub struct Decoder<R: Real> {
    pub cfg: DecoderConfig,
    embedding: Embedding<R>,
    gru1: GruCell<R>,
    gru2: GruCell<R>,
    w_init: Linear<R>,
    w_hidden: Linear<R>,
    w_feat: Linear<R>,
    w_coverage: crate::tensor::layers::Conv2d<R>,
    w_energy: Linear<R>,
    w_embed_cls: Linear<R>,
    w_hidden_cls: Linear<R>,
    w_vis_cls: Linear<R>,
    w_symbol: Linear<R>,
}

/// Per-batch decode context: flattened features, the hoisted feature
/// projection (it never changes across steps), and the pooled mask.
pub struct DecodeContext<R: Real> {
    pub f_flat: Tensor<R>,
    proj_f: Tensor<R>,
    pub mask: Vec<u8>,
    pub b: usize,
    pub c: usize,
    pub p: usize,
    pub hp: usize,
    pub wp: usize,
}

/// Hidden state plus the coverage accumulator (sum of all past alphas).
pub struct DecoderState<R: Real> {
    pub h: Tensor<R>,
    pub coverage: Tensor<R>,
    pub t: usize,
}

pub struct StepOutput<R: Real> {
    pub logits: Tensor<R>,
    pub alpha: Tensor<R>,
    pub v_vis: Tensor<R>,
    pub v_cls: Tensor<R>,
    pub state: DecoderState<R>,
}

impl<R: Real> StepOutput<R> {
    /// Symbol distribution; rows sum to 1.
    pub fn p_symbol(&self) -> Result<Tensor<R>> {
        ops::softmax(&self.logits)
    }
}

/// Everything the losses need from one teacher-forced pass. Step-major
/// flattening: row `t*B + b`.
pub struct TeacherForcedOut<R: Real> {
    pub logits_flat: Tensor<R>,
    pub targets_flat: Vec<usize>,
    pub mask_flat: Vec<u8>,
    pub step_v_vis: Vec<Tensor<R>>,
    pub step_v_cls: Vec<Tensor<R>>,
    pub alphas: Vec<Tensor<R>>,
    pub steps: usize,
}

impl<R: Real> Decoder<R> {
    pub fn new(cfg: DecoderConfig, rng: &mut SeedRng) -> Self {
        let c = cfg.feat_channels;
        let pad = (cfg.coverage_kernel - 1) / 2;
        Decoder {
            embedding: Embedding::new(cfg.vocab_size, cfg.embed, rng),
            gru1: GruCell::new(cfg.embed, cfg.hidden, rng),
            gru2: GruCell::new(c, cfg.hidden, rng),
            w_init: Linear::new(c, cfg.hidden, false, rng),
            w_hidden: Linear::new(cfg.hidden, cfg.attn_hidden, true, rng),
            w_feat: Linear::new(c, cfg.attn_hidden, false, rng),
            w_coverage: crate::tensor::layers::Conv2d::new(
                1,
                cfg.attn_hidden,
                cfg.coverage_kernel,
                1,
                pad,
                rng,
            ),
            w_energy: Linear::new(cfg.attn_hidden, 1, false, rng),
            w_embed_cls: Linear::new(cfg.embed, cfg.hidden, false, rng),
            w_hidden_cls: Linear::new(cfg.hidden, cfg.hidden, false, rng),
            w_vis_cls: Linear::new(c, cfg.hidden, true, rng),
            w_symbol: Linear::new(cfg.hidden, cfg.vocab_size, false, rng),
            cfg,
        }
    }

    /// Prepares the per-batch context and the initial state: coverage all
    /// zeros, h0 = tanh(W_init · masked mean of F).
    pub fn begin(&self, fmap: &FeatureMap<R>) -> Result<(DecodeContext<R>, DecoderState<R>)> {
        let (b, c, hp, wp) = (fmap.b, fmap.c, fmap.hp, fmap.wp);
        let p = hp * wp;
        if fmap.mask.len() != b * p {
            return Err(Error::Shape(format!(
                "decode: mask length {} vs {b}x{p}",
                fmap.mask.len()
            )));
        }
        for bi in 0..b {
            if fmap.mask[bi * p..(bi + 1) * p].iter().all(|&m| m == 0) {
                return Err(Error::Invalid(format!(
                    "decode: sample {bi} has no valid feature positions"
                )));
            }
        }
        let f_flat = ops::reshape(&fmap.f, &[b, c, p])?;
        let rows = ops::reshape(&ops::permute(&f_flat, &[0, 2, 1])?, &[b * p, c])?;
        let proj_f = self.w_feat.forward(&rows)?;

        // masked mean of F as constant attention weights
        let mut weights = vec![R::zero(); b * p];
        for bi in 0..b {
            let row = &fmap.mask[bi * p..(bi + 1) * p];
            let count = row.iter().filter(|&&m| m != 0).count();
            let inv = R::one() / crate::tensor::r::<R>(count as f64);
            for (wv, &m) in weights[bi * p..(bi + 1) * p].iter_mut().zip(row) {
                if m != 0 {
                    *wv = inv;
                }
            }
        }
        let mean = ops::attn_context(&Tensor::from_vec(&[b, p], weights)?, &f_flat)?;
        let h0 = ops::tanh(&self.w_init.forward(&mean)?);

        Ok((
            DecodeContext {
                f_flat,
                proj_f,
                mask: fmap.mask.clone(),
                b,
                c,
                p,
                hp,
                wp,
            },
            DecoderState {
                h: h0,
                coverage: Tensor::zeros(&[b, p]),
                t: 0,
            },
        ))
    }

    /// Eq. 6/7 attention: energies from hidden state, features and the
    /// coverage transform; masked softmax over valid positions.
    pub fn attention(
        &self,
        h_attend: &Tensor<R>,
        ctx: &DecodeContext<R>,
        coverage: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let (b, p) = (ctx.b, ctx.p);
        let proj_h = self.w_hidden.forward(h_attend)?;
        let proj_h_rows = ops::repeat_rows(&proj_h, p)?;
        let cov_img = ops::reshape(coverage, &[b, 1, ctx.hp, ctx.wp])?;
        let cov_proj = self.w_coverage.forward(&cov_img)?;
        let cov_rows = ops::reshape(
            &ops::permute(&cov_proj, &[0, 2, 3, 1])?,
            &[b * p, self.cfg.attn_hidden],
        )?;
        let pre = ops::add(&ops::add(&ctx.proj_f, &proj_h_rows)?, &cov_rows)?;
        let energies = ops::reshape(&self.w_energy.forward(&ops::tanh(&pre))?, &[b, p])?;
        ops::masked_softmax(&energies, &ctx.mask)
    }

    /// One decode step from the previous symbol ids.
    pub fn step(
        &self,
        y_prev: &[u32],
        state: &DecoderState<R>,
        ctx: &DecodeContext<R>,
    ) -> Result<StepOutput<R>> {
        if y_prev.len() != ctx.b {
            return Err(Error::Shape(format!(
                "decode: {} previous symbols for batch {}",
                y_prev.len(),
                ctx.b
            )));
        }
        if let Some(&bad) = y_prev.iter().find(|&&y| y as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!(
                "decode: symbol id {bad} out of vocab range {}",
                self.cfg.vocab_size
            )));
        }
        let ids: Vec<usize> = y_prev.iter().map(|&y| y as usize).collect();
        let emb = self.embedding.forward(&ids)?;
        let h_pre = self.gru1.forward(&emb, &state.h)?;
        let alpha = self.attention(&h_pre, ctx, &state.coverage)?;
        let v_vis = ops::attn_context(&alpha, &ctx.f_flat)?;
        let h_t = self.gru2.forward(&v_vis, &h_pre)?;
        let v_cls = ops::add(
            &ops::add(
                &self.w_embed_cls.forward(&emb)?,
                &self.w_hidden_cls.forward(&h_t)?,
            )?,
            &self.w_vis_cls.forward(&v_vis)?,
        )?;
        let logits = self.w_symbol.forward(&v_cls)?;
        let coverage = ops::add(&state.coverage, &alpha)?;
        Ok(StepOutput {
            logits,
            alpha,
            v_vis,
            v_cls,
            state: DecoderState {
                h: h_t,
                coverage,
                t: state.t + 1,
            },
        })
    }

    /// Teacher-forced pass over a batch: step t consumes the ground-truth
    /// symbol t-1 (sos at t=0) and predicts target t (eos last).
    pub fn forward_teacher_forced(
        &self,
        batch: &Batch,
        fmap: &FeatureMap<R>,
    ) -> Result<TeacherForcedOut<R>> {
        let (ctx, mut state) = self.begin(fmap)?;
        let steps = batch.tmax;
        let b = ctx.b;
        let mut logits_steps = Vec::with_capacity(steps);
        let mut step_v_vis = Vec::with_capacity(steps);
        let mut step_v_cls = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut targets_flat = Vec::with_capacity(steps * b);
        let mut mask_flat = Vec::with_capacity(steps * b);

        let mut y_prev: Vec<u32> = vec![SOS_ID; b];
        for t in 0..steps {
            let out = self.step(&y_prev, &state, &ctx)?;
            state = out.state;
            logits_steps.push(out.logits);
            step_v_vis.push(out.v_vis);
            step_v_cls.push(out.v_cls);
            alphas.push(out.alpha);
            for bi in 0..b {
                targets_flat.push(batch.targets[bi * steps + t] as usize);
                mask_flat.push(batch.target_mask[bi * steps + t]);
            }
            y_prev = (0..b).map(|bi| batch.targets[bi * steps + t]).collect();
        }
        let refs: Vec<&Tensor<R>> = logits_steps.iter().collect();
        Ok(TeacherForcedOut {
            logits_flat: ops::concat_rows(&refs)?,
            targets_flat,
            mask_flat,
            step_v_vis,
            step_v_cls,
            alphas,
            steps,
        })
    }

    /// Greedy decoding: argmax fed back until eos or `max_len`; ties break
    /// toward the lowest id. Also returns per-step alphas for inspection.
    pub fn decode_greedy(
        &self,
        fmap: &FeatureMap<R>,
        max_len: usize,
    ) -> Result<(Vec<Vec<u32>>, Vec<Vec<f32>>)> {
        if max_len < 1 {
            return Err(Error::Invalid("decode_greedy: max_len must be >= 1".into()));
        }
        no_grad(|| {
            let (ctx, mut state) = self.begin(fmap)?;
            let b = ctx.b;
            let mut outs: Vec<Vec<u32>> = vec![Vec::new(); b];
            let mut alphas: Vec<Vec<f32>> = Vec::new();
            let mut done = vec![false; b];
            let mut y_prev: Vec<u32> = vec![SOS_ID; b];
            for _ in 0..max_len {
                let out = self.step(&y_prev, &state, &ctx)?;
                state = out.state;
                alphas.push(
                    out.alpha
                        .values()
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(0.0) as f32)
                        .collect(),
                );
                let logits = out.logits.values();
                let n = self.cfg.vocab_size;
                for bi in 0..b {
                    if done[bi] {
                        y_prev[bi] = EOS_ID;
                        continue;
                    }
                    let row = &logits[bi * n..(bi + 1) * n];
                    let mut best = 0usize;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    let sym = best as u32;
                    if sym == EOS_ID {
                        done[bi] = true;
                    } else {
                        outs[bi].push(sym);
                    }
                    y_prev[bi] = sym;
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            Ok((outs, alphas))
        })
    }

    pub fn register(&self, ps: &mut ParamSet<R>, prefix: &str) {
        self.embedding.register(ps, &format!("{prefix}.embed"));
        self.gru1.register(ps, &format!("{prefix}.gru1"));
        self.gru2.register(ps, &format!("{prefix}.gru2"));
        self.w_init.register(ps, &format!("{prefix}.w_init"));
        self.w_hidden.register(ps, &format!("{prefix}.attn.w_hidden"));
        self.w_feat.register(ps, &format!("{prefix}.attn.w_feat"));
        self.w_coverage.register(ps, &format!("{prefix}.attn.w_coverage"));
        self.w_energy.register(ps, &format!("{prefix}.attn.w_energy"));
        self.w_embed_cls.register(ps, &format!("{prefix}.cls.w_embed"));
        self.w_hidden_cls.register(ps, &format!("{prefix}.cls.w_hidden"));
        self.w_vis_cls.register(ps, &format!("{prefix}.cls.w_vis"));
        self.w_symbol.register(ps, &format!("{prefix}.cls.w_symbol"));
    }

    /// Test hook: zeroes the energy projection so attention goes uniform.
    #[cfg(test)]
    pub(crate) fn zero_energy_weights(&self) {
        let n = self.w_energy.w.numel();
        self.w_energy.w.set_values(&vec![R::zero(); n]).unwrap();
    }
}
