//! Parameter-holding building blocks: linear maps, batch normalization,
//! convolution, embeddings and the GRU cell. Weights initialize uniform in
//! ±sqrt(6/(fan_in+fan_out)), biases zero, batchnorm scale 1 / shift 0.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::params::ParamSet;
use super::{r, Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Deterministic RNG used everywhere seeding matters.
pub type SeedRng = ChaCha8Rng;

pub fn glorot_uniform<R: Real>(
    rng: &mut SeedRng,
    fan_in: usize,
    fan_out: usize,
    n: usize,
) -> Vec<R> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| r(rng.gen_range(-limit..limit))).collect()
}

pub struct Linear<R: Real> {
    pub w: Tensor<R>,
    pub b: Option<Tensor<R>>,
}

impl<R: Real> Linear<R> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut SeedRng) -> Self {
        let w = Tensor::from_vec(
            &[d_out, d_in],
            glorot_uniform(rng, d_in, d_out, d_in * d_out),
        )
        .unwrap()
        .requiring_grad();
        let b = bias.then(|| Tensor::zeros(&[d_out]).requiring_grad());
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        ops::linear(x, &self.w, self.b.as_ref())
    }

    pub fn register(&self, ps: &mut ParamSet<R>, prefix: &str) {
        ps.insert(&format!("{prefix}.w"), self.w.clone());
        if let Some(b) = &self.b {
            ps.insert(&format!("{prefix}.b"), b.clone());
        }
    }
}

/// Batch normalization over rows of a `(rows, feat)` tensor. Running
/// statistics live in non-trainable tensors so they serialize with the
/// parameters; momentum 0.9 exponential moving average.
pub struct BatchNorm<R: Real> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
    pub momentum: f64,
    pub eps: f64,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(feat: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[feat], 1.0).requiring_grad(),
            beta: Tensor::zeros(&[feat]).requiring_grad(),
            running_mean: Tensor::zeros(&[feat]),
            running_var: Tensor::full(&[feat], 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = ops::batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                let m: R = r(self.momentum);
                let one_m = R::one() - m;
                self.running_mean.update_values(|rm| {
                    for (a, &b) in rm.iter_mut().zip(&mean) {
                        *a = m * *a + one_m * b;
                    }
                });
                self.running_var.update_values(|rv| {
                    for (a, &b) in rv.iter_mut().zip(&var) {
                        *a = m * *a + one_m * b;
                    }
                });
                Ok(y)
            }
            Mode::Eval => ops::batchnorm_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.values(),
                &self.running_var.values(),
                self.eps,
            ),
        }
    }

    /// Normalizes a `(B,C,H,W)` map per channel by flattening the batch and
    /// spatial axes into rows.
    pub fn forward_nchw(&self, x: &Tensor<R>, mode: Mode) -> Result<Tensor<R>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("batchnorm nchw: want rank 4, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hwc = ops::permute(x, &[0, 2, 3, 1])?;
        let rows = ops::reshape(&hwc, &[b * h * w, c])?;
        let y = self.forward(&rows, mode)?;
        let back = ops::reshape(&y, &[b, h, w, c])?;
        ops::permute(&back, &[0, 3, 1, 2])
    }

    pub fn register(&self, ps: &mut ParamSet<R>, prefix: &str) {
        ps.insert(&format!("{prefix}.gamma"), self.gamma.clone());
        ps.insert(&format!("{prefix}.beta"), self.beta.clone());
        ps.insert(&format!("{prefix}.running_mean"), self.running_mean.clone());
        ps.insert(&format!("{prefix}.running_var"), self.running_var.clone());
    }
}

pub struct Conv2d<R: Real> {
    pub k: Tensor<R>,
    pub stride: usize,
    pub padding: usize,
}

impl<R: Real> Conv2d<R> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let fan_in = c_in * ksize * ksize;
        let fan_out = c_out * ksize * ksize;
        let k = Tensor::from_vec(
            &[c_out, c_in, ksize, ksize],
            glorot_uniform(rng, fan_in, fan_out, c_out * c_in * ksize * ksize),
        )
        .unwrap()
        .requiring_grad();
        Conv2d { k, stride, padding }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        ops::conv2d(x, &self.k, self.stride, self.padding)
    }

    pub fn register(&self, ps: &mut ParamSet<R>, prefix: &str) {
        ps.insert(&format!("{prefix}.k"), self.k.clone());
    }
}

pub struct Embedding<R: Real> {
    pub table: Tensor<R>,
}

impl<R: Real> Embedding<R> {
    pub fn new(vocab: usize, dim: usize, rng: &mut SeedRng) -> Self {
        Embedding {
            table: Tensor::from_vec(&[vocab, dim], glorot_uniform(rng, vocab, dim, vocab * dim))
                .unwrap()
                .requiring_grad(),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<R>> {
        ops::embedding(&self.table, ids)
    }

    pub fn register(&self, ps: &mut ParamSet<R>, prefix: &str) {
        ps.insert(&format!("{prefix}.table"), self.table.clone());
    }
}

/// GRU cell with the convention
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1−z) ⊙ h + z ⊙ h̃`.
pub struct GruCell<R: Real> {
    pub w_z: Tensor<R>,
    pub u_z: Tensor<R>,
    pub b_z: Tensor<R>,
    pub w_r: Tensor<R>,
    pub u_r: Tensor<R>,
    pub b_r: Tensor<R>,
    pub w_h: Tensor<R>,
    pub u_h: Tensor<R>,
    pub b_h: Tensor<R>,
}

impl<R: Real> GruCell<R> {
    pub fn new(d_in: usize, d_hidden: usize, rng: &mut SeedRng) -> Self {
        let mut w = |fi: usize, fo: usize| {
            Tensor::from_vec(&[fo, fi], glorot_uniform(rng, fi, fo, fi * fo))
                .unwrap()
                .requiring_grad()
        };
        let w_z = w(d_in, d_hidden);
        let w_r = w(d_in, d_hidden);
        let w_h = w(d_in, d_hidden);
        let u_z = w(d_hidden, d_hidden);
        let u_r = w(d_hidden, d_hidden);
        let u_h = w(d_hidden, d_hidden);
        GruCell {
            w_z,
            u_z,
            b_z: Tensor::zeros(&[d_hidden]).requiring_grad(),
            w_r,
            u_r,
            b_r: Tensor::zeros(&[d_hidden]).requiring_grad(),
            w_h,
            u_h,
            b_h: Tensor::zeros(&[d_hidden]).requiring_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<R>, h: &Tensor<R>) -> Result<Tensor<R>> {
        let z = ops::sigmoid(&ops::add(
            &ops::linear(x, &self.w_z, Some(&self.b_z))?,
            &ops::linear(h, &self.u_z, None)?,
        )?);
        let r_gate = ops::sigmoid(&ops::add(
            &ops::linear(x, &self.w_r, Some(&self.b_r))?,
            &ops::linear(h, &self.u_r, None)?,
        )?);
        let h_cand = ops::tanh(&ops::add(
            &ops::linear(x, &self.w_h, Some(&self.b_h))?,
            &ops::linear(&ops::mul(&r_gate, h)?, &self.u_h, None)?,
        )?);
        // h' = h - z*h + z*h_cand
        ops::add(
            &ops::sub(h, &ops::mul(&z, h)?)?,
            &ops::mul(&z, &h_cand)?,
        )
    }

    pub fn register(&self, ps: &mut ParamSet<R>, prefix: &str) {
        ps.insert(&format!("{prefix}.w_z"), self.w_z.clone());
        ps.insert(&format!("{prefix}.u_z"), self.u_z.clone());
        ps.insert(&format!("{prefix}.b_z"), self.b_z.clone());
        ps.insert(&format!("{prefix}.w_r"), self.w_r.clone());
        ps.insert(&format!("{prefix}.u_r"), self.u_r.clone());
        ps.insert(&format!("{prefix}.b_r"), self.b_r.clone());
        ps.insert(&format!("{prefix}.w_h"), self.w_h.clone());
        ps.insert(&format!("{prefix}.u_h"), self.u_h.clone());
        ps.insert(&format!("{prefix}.b_h"), self.b_h.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> SeedRng {
        SeedRng::seed_from_u64(7)
    }

    #[test]
    fn gru_all_zero_params_halves_hidden() {
        // z = r = 0.5, h_cand = 0 -> h' = 0.5 h
        let cell = GruCell::<f64> {
            w_z: Tensor::zeros(&[3, 2]).requiring_grad(),
            u_z: Tensor::zeros(&[3, 3]).requiring_grad(),
            b_z: Tensor::zeros(&[3]).requiring_grad(),
            w_r: Tensor::zeros(&[3, 2]).requiring_grad(),
            u_r: Tensor::zeros(&[3, 3]).requiring_grad(),
            b_r: Tensor::zeros(&[3]).requiring_grad(),
            w_h: Tensor::zeros(&[3, 2]).requiring_grad(),
            u_h: Tensor::zeros(&[3, 3]).requiring_grad(),
            b_h: Tensor::zeros(&[3]).requiring_grad(),
        };
        let x = Tensor::from_vec(&[1, 2], vec![0.3, -0.8]).unwrap();
        let h = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 4.0]).unwrap();
        let out = cell.forward(&x, &h).unwrap();
        let v = out.to_vec();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!((v[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gru_zero_inputs_zero_biases_gives_zero() {
        let mut rng = rng();
        let cell = GruCell::<f64>::new(2, 3, &mut rng);
        let x = Tensor::zeros(&[1, 2]);
        let h = Tensor::zeros(&[1, 3]);
        let out = cell.forward(&x, &h).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    /// Step-by-step scalar oracle, independent of the graph ops.
    fn gru_scalar_oracle(
        cell: &GruCell<f64>,
        x: &[f64],
        h: &[f64],
        d_in: usize,
        d_h: usize,
    ) -> Vec<f64> {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mat = |w: &Tensor<f64>, v: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            let wv = w.to_vec();
            (0..rows)
                .map(|r| (0..cols).map(|c| wv[r * cols + c] * v[c]).sum())
                .collect()
        };
        let wzx = mat(&cell.w_z, x, d_h, d_in);
        let uzh = mat(&cell.u_z, h, d_h, d_h);
        let bz = cell.b_z.to_vec();
        let z: Vec<f64> = (0..d_h).map(|i| sig(wzx[i] + uzh[i] + bz[i])).collect();
        let wrx = mat(&cell.w_r, x, d_h, d_in);
        let urh = mat(&cell.u_r, h, d_h, d_h);
        let br = cell.b_r.to_vec();
        let rg: Vec<f64> = (0..d_h).map(|i| sig(wrx[i] + urh[i] + br[i])).collect();
        let rh: Vec<f64> = (0..d_h).map(|i| rg[i] * h[i]).collect();
        let whx = mat(&cell.w_h, x, d_h, d_in);
        let uhrh = mat(&cell.u_h, &rh, d_h, d_h);
        let bh = cell.b_h.to_vec();
        let cand: Vec<f64> = (0..d_h).map(|i| (whx[i] + uhrh[i] + bh[i]).tanh()).collect();
        (0..d_h)
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i])
            .collect()
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut rng = rng();
        let (d_in, d_h) = (4, 5);
        let cell = GruCell::<f64>::new(d_in, d_h, &mut rng);
        let xv: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, d_in], xv.clone()).unwrap();
        let h = Tensor::from_vec(&[1, d_h], hv.clone()).unwrap();
        let out = cell.forward(&x, &h).unwrap().to_vec();
        let oracle = gru_scalar_oracle(&cell, &xv, &hv, d_in, d_h);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_row() {
        let bn = BatchNorm::<f64>::new(3);
        let x = Tensor::zeros(&[1, 3]);
        assert!(bn.forward(&x, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_normalized_input_passes_through() {
        // per-feature mean 0, var 1 already; scale 1, shift 0
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (a, b) in y.to_vec().iter().zip(x.to_vec().iter()) {
            assert!((a - b).abs() < 1e-2); // eps slightly shrinks the output
        }
    }

    #[test]
    fn batchnorm_constant_column_collapses_to_shift() {
        let bn = BatchNorm::<f64>::new(1);
        bn.beta.set_values(&[5.0]).unwrap();
        let x = Tensor::from_vec(&[4, 1], vec![2.0; 4]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for &v in y.to_vec().iter() {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_running_stats_follow_ema() {
        let bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        // mean 2, var 1; rm = 0.9*0 + 0.1*2, rv = 0.9*1 + 0.1*1
        assert!((bn.running_mean.to_vec()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.to_vec()[0] - 1.0).abs() < 1e-12);
    }
}
