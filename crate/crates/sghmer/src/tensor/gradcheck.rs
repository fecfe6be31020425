//! Central finite-difference verification of every registered primitive.
//! The checks run at 64-bit precision and are the independent oracle for
//! the backward implementations in `ops`.

use rand::Rng;
use rand::SeedableRng;

use super::layers::SeedRng;
use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error as |a-n| / max(|a|, |n|, 1e-8).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar-valued `f` at `x` against
/// central finite differences, returning the max relative error over all
/// coordinates. `x` must require gradients.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !x.requires_grad() {
        return Err(Error::Invalid("grad_check: x must require gradients".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Invalid("grad_check: eps must be positive".into()));
    }
    x.zero_grad();
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check: f must be scalar-valued, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::Invalid("grad_check: f does not depend on x".into()))?;

    let n = x.numel();
    let mut max_err = 0.0f64;
    for i in 0..n {
        let saved = x.values()[i];
        x.update_values(|v| v[i] = saved + eps);
        let plus = f(x)?.item();
        x.update_values(|v| v[i] = saved - eps);
        let minus = f(x)?.item();
        x.update_values(|v| v[i] = saved);
        let numeric = (plus - minus) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

fn rand_tensor(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Random values with |v| in [0.2, 1.0]: keeps relu/masked ops away from
/// their non-differentiable points.
fn rand_tensor_off_zero(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Scalar probe `sum(w ⊙ y)` with a fixed random `w`, so symmetric
/// backward mistakes cannot cancel out.
fn probe_loss(y: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(ops::sum_all(&ops::mul(y, w)?))
}

macro_rules! check_max {
    ($acc:expr, $f:expr, $x:expr) => {
        $acc = $acc.max(grad_check($f, $x, DEFAULT_EPS)?)
    };
}

fn check_add(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let b = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::add(x, &b)?, &w), &a);
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::add(&a, x)?, &w), &b);
    Ok(err)
}

fn check_sub(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let b = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::sub(x, &b)?, &w), &a);
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::sub(&a, x)?, &w), &b);
    Ok(err)
}

fn check_mul(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let b = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::mul(x, &b)?, &w), &a);
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::mul(&a, x)?, &w), &b);
    // both arguments aliased: d(x*x)/dx = 2x
    let c = rand_tensor(rng, &[5], -1.0, 1.0).requiring_grad();
    let w1 = rand_tensor(rng, &[5], -1.0, 1.0);
    check_max!(err, |x: &Tensor<f64>| probe_loss(&ops::mul(x, x)?, &w1), &c);
    Ok(err)
}

fn check_scale(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[6], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[6], -1.0, 1.0);
    grad_check(
        |x: &Tensor<f64>| probe_loss(&ops::scale(x, -1.7), &w),
        &a,
        DEFAULT_EPS,
    )
}

fn check_sum_all(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 3], -1.0, 1.0).requiring_grad();
    grad_check(|x: &Tensor<f64>| Ok(ops::sum_all(x)), &a, DEFAULT_EPS)
}

fn check_relu(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor_off_zero(rng, &[4, 4]).requiring_grad();
    let w = rand_tensor(rng, &[4, 4], -1.0, 1.0);
    grad_check(
        |x: &Tensor<f64>| probe_loss(&ops::relu(x), &w),
        &a,
        DEFAULT_EPS,
    )
}

fn check_sigmoid(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[4, 3], -2.0, 2.0).requiring_grad();
    let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
    grad_check(
        |x: &Tensor<f64>| probe_loss(&ops::sigmoid(x), &w),
        &a,
        DEFAULT_EPS,
    )
}

fn check_tanh(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[4, 3], -2.0, 2.0).requiring_grad();
    let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
    grad_check(
        |x: &Tensor<f64>| probe_loss(&ops::tanh(x), &w),
        &a,
        DEFAULT_EPS,
    )
}

fn check_linear(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[3, 4], -1.0, 1.0).requiring_grad();
    let wt = rand_tensor(rng, &[5, 4], -1.0, 1.0).requiring_grad();
    let b = rand_tensor(rng, &[5], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[3, 5], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::linear(t, &wt, Some(&b))?, &w),
        &x
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::linear(&x, t, Some(&b))?, &w),
        &wt
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::linear(&x, &wt, Some(t))?, &w),
        &b
    );
    Ok(err)
}

fn check_linear_nobias(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[2, 3], -1.0, 1.0).requiring_grad();
    let wt = rand_tensor(rng, &[4, 3], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[2, 4], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::linear(t, &wt, None)?, &w),
        &x
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::linear(&x, t, None)?, &w),
        &wt
    );
    Ok(err)
}

fn check_conv2d(rng: &mut SeedRng, stride: usize) -> Result<f64> {
    let x = rand_tensor(rng, &[1, 2, 5, 5], -1.0, 1.0).requiring_grad();
    let k = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0).requiring_grad();
    let oh = (5 + 2 - 3) / stride + 1;
    let w = rand_tensor(rng, &[1, 3, oh, oh], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::conv2d(t, &k, stride, 1)?, &w),
        &x
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::conv2d(&x, t, stride, 1)?, &w),
        &k
    );
    Ok(err)
}

fn check_avg_pool2(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[2, 3, 4, 6], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[2, 3, 2, 3], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::avg_pool2(t)?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_batchnorm_train(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[4, 3], -1.0, 1.0).requiring_grad();
    let gamma = rand_tensor(rng, &[3], 0.5, 1.5).requiring_grad();
    let beta = rand_tensor(rng, &[3], -0.5, 0.5).requiring_grad();
    let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::batchnorm_train(t, &gamma, &beta, 1e-5)?.0, &w),
        &x
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::batchnorm_train(&x, t, &beta, 1e-5)?.0, &w),
        &gamma
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::batchnorm_train(&x, &gamma, t, 1e-5)?.0, &w),
        &beta
    );
    Ok(err)
}

fn check_batchnorm_eval(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[4, 3], -1.0, 1.0).requiring_grad();
    let gamma = rand_tensor(rng, &[3], 0.5, 1.5).requiring_grad();
    let beta = rand_tensor(rng, &[3], -0.5, 0.5).requiring_grad();
    let rm = vec![0.1, -0.2, 0.05];
    let rv = vec![0.9, 1.1, 1.0];
    let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::batchnorm_eval(t, &gamma, &beta, &rm, &rv, 1e-5)?, &w),
        &x
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::batchnorm_eval(&x, t, &beta, &rm, &rv, 1e-5)?, &w),
        &gamma
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::batchnorm_eval(&x, &gamma, t, &rm, &rv, 1e-5)?, &w),
        &beta
    );
    Ok(err)
}

fn check_softmax(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[3, 5], -2.0, 2.0).requiring_grad();
    let w = rand_tensor(rng, &[3, 5], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::softmax(t)?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_masked_softmax(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[2, 6], -2.0, 2.0).requiring_grad();
    let mask = vec![1u8, 1, 0, 1, 0, 1, 0, 1, 1, 1, 1, 0];
    let w = rand_tensor(rng, &[2, 6], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::masked_softmax(t, &mask)?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_embedding(rng: &mut SeedRng) -> Result<f64> {
    let table = rand_tensor(rng, &[6, 4], -1.0, 1.0).requiring_grad();
    let ids = [2usize, 0, 5, 2];
    let w = rand_tensor(rng, &[4, 4], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::embedding(t, &ids)?, &w),
        &table,
        DEFAULT_EPS,
    )
}

fn check_attn_context(rng: &mut SeedRng) -> Result<f64> {
    let alpha = rand_tensor(rng, &[2, 5], 0.0, 1.0).requiring_grad();
    let f = rand_tensor(rng, &[2, 3, 5], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[2, 3], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::attn_context(t, &f)?, &w),
        &alpha
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::attn_context(&alpha, t)?, &w),
        &f
    );
    Ok(err)
}

fn check_concat_channels(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0).requiring_grad();
    let b = rand_tensor(rng, &[2, 1, 3, 3], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::concat_channels(&[t, &b])?, &w),
        &a
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::concat_channels(&[&a, t])?, &w),
        &b
    );
    Ok(err)
}

fn check_concat_rows(rng: &mut SeedRng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 3], -1.0, 1.0).requiring_grad();
    let b = rand_tensor(rng, &[4, 3], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[6, 3], -1.0, 1.0);
    let mut err = 0.0f64;
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::concat_rows(&[t, &b])?, &w),
        &a
    );
    check_max!(
        err,
        |t: &Tensor<f64>| probe_loss(&ops::concat_rows(&[&a, t])?, &w),
        &b
    );
    Ok(err)
}

fn check_permute(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[4, 2, 3], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::permute(t, &[2, 0, 1])?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_reshape(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[2, 6], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::reshape(t, &[3, 4])?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_repeat_rows(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[3, 2], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[12, 2], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::repeat_rows(t, 4)?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_row_normalize(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor_off_zero(rng, &[3, 4]).requiring_grad();
    let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::row_normalize(t, 1e-8)?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_slice_rows(rng: &mut SeedRng) -> Result<f64> {
    let x = rand_tensor(rng, &[5, 3], -1.0, 1.0).requiring_grad();
    let w = rand_tensor(rng, &[2, 3], -1.0, 1.0);
    grad_check(
        |t: &Tensor<f64>| probe_loss(&ops::slice_rows(t, 1, 2)?, &w),
        &x,
        DEFAULT_EPS,
    )
}

fn check_cross_entropy(rng: &mut SeedRng) -> Result<f64> {
    let logits = rand_tensor(rng, &[4, 5], -2.0, 2.0).requiring_grad();
    let targets = [1usize, 4, 0, 2];
    let mask = [1u8, 1, 0, 1];
    grad_check(
        |t: &Tensor<f64>| ops::masked_cross_entropy(t, &targets, &mask),
        &logits,
        DEFAULT_EPS,
    )
}

/// Runs every registered primitive's finite-difference check with a fixed
/// seed. Returns (name, max relative error) pairs.
pub fn check_all_primitives() -> Result<Vec<(String, f64)>> {
    let mut rng = SeedRng::seed_from_u64(0x5eed);
    let mut results: Vec<(String, f64)> = Vec::new();
    macro_rules! run {
        ($name:expr, $f:expr) => {
            results.push(($name.to_string(), $f(&mut rng)?));
        };
    }
    run!("add", check_add);
    run!("sub", check_sub);
    run!("mul", check_mul);
    run!("scale", check_scale);
    run!("sum_all", check_sum_all);
    run!("relu", check_relu);
    run!("sigmoid", check_sigmoid);
    run!("tanh", check_tanh);
    run!("linear", check_linear);
    run!("linear_nobias", check_linear_nobias);
    run!("conv2d_stride1", |r: &mut SeedRng| check_conv2d(r, 1));
    run!("conv2d_stride2", |r: &mut SeedRng| check_conv2d(r, 2));
    run!("avg_pool2", check_avg_pool2);
    run!("batchnorm_train", check_batchnorm_train);
    run!("batchnorm_eval", check_batchnorm_eval);
    run!("softmax", check_softmax);
    run!("masked_softmax", check_masked_softmax);
    run!("embedding", check_embedding);
    run!("attn_context", check_attn_context);
    run!("concat_channels", check_concat_channels);
    run!("concat_rows", check_concat_rows);
    run!("permute", check_permute);
    run!("reshape", check_reshape);
    run!("repeat_rows", check_repeat_rows);
    run!("row_normalize", check_row_normalize);
    run!("cross_entropy", check_cross_entropy);
    run!("slice_rows", check_slice_rows);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0])
            .unwrap()
            .requiring_grad();
        let err = grad_check(|t| Ok(ops::sum_all(t)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn relu_off_zero_is_piecewise_exact() {
        let x = Tensor::from_vec(&[4], vec![0.7, -0.9, 0.3, -0.4])
            .unwrap()
            .requiring_grad();
        let err = grad_check(|t| Ok(ops::sum_all(&ops::relu(t))), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn every_registered_primitive_passes() {
        for (name, err) in check_all_primitives().unwrap() {
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn composed_graph_passes() {
        // conv -> batchnorm -> relu -> linear -> cross-entropy
        let mut rng = SeedRng::seed_from_u64(11);
        let x = {
            let v: Vec<f64> = (0..2 * 1 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[2, 1, 4, 4], v).unwrap().requiring_grad()
        };
        let k = {
            let v: Vec<f64> = (0..3 * 1 * 3 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Tensor::from_vec(&[3, 1, 3, 3], v).unwrap().requiring_grad()
        };
        let gamma = Tensor::full(&[3], 1.0).requiring_grad();
        let beta = Tensor::zeros(&[3]).requiring_grad();
        let wt = {
            let v: Vec<f64> = (0..5 * 48).map(|_| rng.gen_range(-0.3..0.3)).collect();
            Tensor::from_vec(&[5, 48], v).unwrap().requiring_grad()
        };
        let f = |x: &Tensor<f64>| -> crate::error::Result<Tensor<f64>> {
            let c = ops::conv2d(x, &k, 1, 1)?;
            let flat = ops::reshape(&ops::permute(&c, &[0, 2, 3, 1])?, &[2 * 16, 3])?;
            let (bn, _, _) = ops::batchnorm_train(&flat, &gamma, &beta, 1e-5)?;
            let act = ops::relu(&bn);
            let feats = ops::reshape(&act, &[2, 48])?;
            let logits = ops::linear(&feats, &wt, None)?;
            ops::masked_cross_entropy(&logits, &[1, 3], &[1, 1])
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "composed graph err = {err}");
    }
}
