//! Central-difference verification of backward passes (64-bit only).

use rand::Rng;

use super::{Graph, Mode, Tensor, TensorError, Var};
use crate::rng;

/// Denominator floor for relative errors, so that gradients that are zero
/// up to rounding compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward()` against central differences `(f(x+h) - f(x-h)) / 2h`
/// for every element of every gradient-requiring input and returns the
/// maximum relative error.
///
/// `build` must construct a scalar from the leaves it is handed.
pub fn finite_diff_gradcheck<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t)).collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = graph.grad(vars[k]).expect("leaf gradients are populated").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Outcome of one operation in the verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub points: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches").with_requires_grad(true)
}

fn projection(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn run_case<F>(name: &'static str, threshold: f64, seed: u64, points: usize, mut case: F) -> Result<CheckResult, TensorError>
where
    F: FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<f64, TensorError>,
{
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut r = rng::stream(seed, name, p as u64);
        worst = worst.max(case(&mut r)?);
    }
    Ok(CheckResult { name, max_rel_err: worst, threshold, points })
}

pub fn check_conv2d(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("conv2d", 1e-6, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[2, 3, 5, 4], 1.0), random_tensor(r, &[4, 3, 3, 3], 0.5), random_tensor(r, &[4], 0.5)];
        let proj = projection(r, 2 * 4 * 5 * 4);
        finite_diff_gradcheck(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]))?;
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_linear(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("linear", 1e-7, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[3, 2, 6], 1.0), random_tensor(r, &[4, 6], 0.5), random_tensor(r, &[4], 0.5)];
        let proj = projection(r, 3 * 2 * 4);
        finite_diff_gradcheck(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_batchnorm_train(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("batchnorm2d_train", 1e-5, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[3, 2, 3, 2], 1.0), random_tensor(r, &[2], 1.0), random_tensor(r, &[2], 1.0)];
        let proj = projection(r, 3 * 2 * 3 * 2);
        finite_diff_gradcheck(
            |g, v| {
                let (y, _) = g.batchnorm2d_train(v[0], v[1], v[2])?;
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_bilstm(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    let (b, n, din, h) = (2, 4, 3, 2);
    let lengths = [4, 2];
    run_case("bilstm", 1e-5, seed, points, |r| {
        let mut inputs = vec![random_tensor(r, &[b, n, din], 1.0)];
        for _ in 0..2 {
            inputs.push(random_tensor(r, &[4 * h, din], 0.8));
            inputs.push(random_tensor(r, &[4 * h, h], 0.8));
            inputs.push(random_tensor(r, &[4 * h], 0.5));
        }
        let proj_out = projection(r, b * n * 2 * h);
        let proj_fin = projection(r, b * 2 * h);
        finite_diff_gradcheck(
            |g, v| {
                let out = g.bilstm(v[0], [v[1], v[2], v[3], v[4], v[5], v[6]], &lengths)?;
                let fin = g.final_states(out, &lengths)?;
                let a = g.dot(out, &proj_out)?;
                let c = g.dot(fin, &proj_fin)?;
                g.add(a, c)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_mse(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("mse_loss", 1e-6, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[5], 2.0)];
        let target: Vec<f64> = projection(r, 5).into_iter().map(|v| 3.0 + v).collect();
        finite_diff_gradcheck(|g, v| g.mse_loss(v[0], &target), &inputs, DEFAULT_STEP)
    })
}

pub fn check_relu(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("relu", 1e-6, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[20], 1.0)];
        let proj = projection(r, 20);
        finite_diff_gradcheck(
            |g, v| {
                let y = g.relu(v[0]);
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_maxpool(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("maxpool2d_ceil", 1e-6, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[2, 2, 5, 3], 1.0)];
        let proj = projection(r, 2 * 2 * 3 * 2);
        finite_diff_gradcheck(
            |g, v| {
                let y = g.maxpool2d_ceil(v[0])?;
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_pad_sequences(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("pad_sequences", 1e-7, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[5, 3], 1.0)];
        let proj = projection(r, 2 * 4 * 3);
        finite_diff_gradcheck(
            |g, v| {
                let y = g.pad_sequences(v[0], &[4, 1], 4)?;
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

pub fn check_dropout(seed: u64, points: usize) -> Result<CheckResult, TensorError> {
    run_case("dropout", 1e-6, seed, points, |r| {
        let inputs = vec![random_tensor(r, &[30], 1.0)];
        let proj = projection(r, 30);
        let mask_seed: u64 = r.gen();
        finite_diff_gradcheck(
            |g, v| {
                let mut mask_rng = rng::stream(mask_seed, "gradcheck-dropout", 0);
                let y = g.dropout(v[0], 0.2, Mode::Train, &mut mask_rng)?;
                g.dot(y, &proj)
            },
            &inputs,
            DEFAULT_STEP,
        )
    })
}

/// The operations gated by the acceptance thresholds.
pub fn core_suite(seed: u64, points: usize) -> Result<Vec<CheckResult>, TensorError> {
    Ok(vec![
        check_conv2d(seed, points)?,
        check_linear(seed, points)?,
        check_batchnorm_train(seed, points)?,
        check_bilstm(seed, points)?,
        check_mse(seed, points)?,
    ])
}

/// Core suite plus the piecewise-linear layers.
pub fn full_suite(seed: u64, points: usize) -> Result<Vec<CheckResult>, TensorError> {
    let mut all = core_suite(seed, points)?;
    all.push(check_relu(seed, points)?);
    all.push(check_maxpool(seed, points)?);
    all.push(check_dropout(seed, points)?);
    all.push(check_pad_sequences(seed, points)?);
    Ok(all)
}
