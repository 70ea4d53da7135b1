//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metadata::ModalityMask;
use crate::params::{Bound, ParamStore};
use crate::seg::combined_loss_var;
use crate::tmax::{TmaxBlock, TmaxConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::dim("grad_check", format!("f must return a scalar, got {:?}", t.shape())));
    }
    let s = t.data()[0];
    if s.is_nan() {
        return Err(Error::NumericInstability {
            op: "grad_check".into(),
            detail: "f evaluated to NaN".into(),
        });
    }
    Ok(s)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

/// Max relative error between tape gradients and central differences for
/// every coordinate of every input.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::config("h", format!("step {h} outside [1e-6, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .raw(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for i in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[i];
            probe[which].data_mut()[i] = x0 + h;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[i] = x0 - h;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::NumericInstability {
                    op: "grad_check".into(),
                    detail: format!("NaN gradient at input {which}, coordinate {i}"),
                });
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h)
}

/// Outcome of one gradient check in [`suite`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Tolerance on the relative error used by [`suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;
const SUITE_STEP: f64 = 1e-5;

/// Reduce any output to a scalar with fixed random weights, so every
/// output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = Tensor::uniform(tape.shape(y), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, fn(u64) -> Result<f64>);

fn check_matmul(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
    grad_check_many(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        },
        &[a, b],
        SUITE_STEP,
    )
}

fn check_masked_softmax(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Tensor::uniform(&[5, 4], -3.0, 3.0, &mut rng);
    let bits = rng.random_range(1..16u8);
    let mask = ModalityMask::new(std::array::from_fn(|m| bits >> m & 1 == 1), 5)?.additive();
    grad_check(
        |t, x| {
            let y = t.masked_softmax_rows(x, &mask)?;
            project(t, y, seed)
        },
        &s,
        SUITE_STEP,
    )
}

fn check_layer_norm(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[4, 6], -2.0, 2.0, &mut rng);
    let g = Tensor::uniform(&[6], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(&[6], -0.5, 0.5, &mut rng);
    grad_check_many(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        },
        &[x, g, b],
        SUITE_STEP,
    )
}

fn check_conv3d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[1, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
    let stride = 1 + (seed % 2) as usize;
    grad_check_many(
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, 1)?;
            project(t, y, seed)
        },
        &[x, w, b],
        SUITE_STEP,
    )
}

fn check_conv2d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
    grad_check_many(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, seed)
        },
        &[x, w, b],
        SUITE_STEP,
    )
}

fn check_film(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    grad_check_many(
        |t, v| {
            let y = t.film(v[0], v[1], v[2])?;
            project(t, y, seed)
        },
        &[x, g, b],
        SUITE_STEP,
    )
}

fn check_tmax_block(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TmaxConfig {
        ffn_hidden: 8,
        ..TmaxConfig::with_dim(4)
    };
    let mut store = ParamStore::new();
    let block = TmaxBlock::new(&mut store, "b", &cfg, &mut rng)?;
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    inputs.push(Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng));
    inputs.push(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
    inputs.push(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
    let bits = rng.random_range(1..16u8);
    let mask = ModalityMask::new(std::array::from_fn(|m| bits >> m & 1 == 1), 5)?;
    grad_check_many(
        |t, v| {
            let p = Bound::from_vars(v[..n_params].to_vec());
            let y = block.forward(t, &p, v[n_params], v[n_params + 1], v[n_params + 2], &mask)?;
            project(t, y, seed)
        },
        &inputs,
        SUITE_STEP,
    )
}

fn check_combined_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::uniform(&[12, 3], -2.0, 2.0, &mut rng);
    let aux = Tensor::uniform(&[12, 3], -2.0, 2.0, &mut rng);
    let targets: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
    grad_check_many(
        |t, v| combined_loss_var(t, v[0], &targets, &[v[1]], 0.4),
        &[logits, aux],
        SUITE_STEP,
    )
}

const CASES: [Case; 8] = [
    ("matmul", check_matmul),
    ("masked_softmax", check_masked_softmax),
    ("layer_norm", check_layer_norm),
    ("conv3d", check_conv3d),
    ("conv2d", check_conv2d),
    ("film", check_film),
    ("tmax_block", check_tmax_block),
    ("combined_loss", check_combined_loss),
];

/// Gradient checks of every differentiable building block at each seed.
pub fn suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(CASES.len() * seeds.len());
    for (name, case) in CASES {
        for &seed in seeds {
            let err = case(seed)?;
            out.push(CheckOutcome {
                name,
                seed,
                max_rel_error: err,
                passed: err < SUITE_TOLERANCE,
            });
        }
    }
    Ok(out)
}
