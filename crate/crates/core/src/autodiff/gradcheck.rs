//! Central finite-difference checks of the reverse sweep.
//!
//! The numeric side only ever evaluates the forward function, so it shares
//! nothing with the backward rules it is checking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Perturbation used for central differences on 64-bit values.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward gradients of a scalar function against central
/// differences for every element of every input (or an evenly strided
/// subset of at most `max_per_input` elements).
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], max_per_input: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].numel();
        let analytic = grads.wrt(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = max_per_input.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(stride) {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[which].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[e];
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Weighted sum with fixed random coefficients, so every output element
/// carries a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = uniform(&mut rng, &[1, n], -1.0, 1.0);
    let c = tape.input(c);
    let flat = tape.reshape(y, &[n, 1])?;
    let s = tape.matmul(c, flat)?;
    Ok(tape.sum(s))
}

/// Finite-difference checks for every differentiable operator.
pub fn operator_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    out.push(check("matmul", &[a, b], None, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })?);

    let x = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    out.push(check("transpose", &[x], None, |t, v| {
        let y = t.transpose(v[0])?;
        probe(t, y, 11)
    })?);

    let x = uniform(&mut rng, &[12], -2.0, 2.0);
    out.push(check("tanh", &[x], None, |t, v| {
        let y = t.tanh(v[0]);
        probe(t, y, 12)
    })?);

    // keep samples away from the kink
    let x: Vec<f64> = (0..12)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    out.push(check("relu", &[Tensor::new(&[12], x)?], None, |t, v| {
        let y = t.relu(v[0]);
        probe(t, y, 13)
    })?);

    let table = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(check("embedding_lookup", &[table], None, |t, v| {
        let y = t.embedding(v[0], &[2, 0, 2, 1, 0])?;
        probe(t, y, 14)
    })?);

    let table = uniform(&mut rng, &[3, 3], -1.0, 1.0);
    out.push(check("pair_gather", &[table], None, |t, v| {
        let y = t.pair_gather(v[0], &[2, 0, 2, 1])?;
        probe(t, y, 15)
    })?);

    let x = uniform(&mut rng, &[5, 5], -1.0, 1.0);
    let map: Arc<[usize]> = Arc::from(vec![3, 0, 4, 1, 2]);
    out.push(check("permute_two_sided", &[x], None, move |t, v| {
        let y = t.permute_two_sided(v[0], map.clone())?;
        probe(t, y, 16)
    })?);

    let x = uniform(&mut rng, &[1, 6, 6], -1.0, 1.0);
    let w = uniform(&mut rng, &[2, 1, 4, 4], -0.5, 0.5);
    let b = uniform(&mut rng, &[2], -0.5, 0.5);
    out.push(check("conv2d", &[x, w, b], None, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        probe(t, y, 17)
    })?);

    let x = uniform(&mut rng, &[2, 5, 7], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.5, 0.5);
    out.push(check("conv2d_multichannel", &[x, w, b], None, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        probe(t, y, 18)
    })?);

    // distinct values so no window has a tie
    let mut vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    out.push(check("maxpool2d", &[Tensor::new(&[1, 4, 4], vals)?], None, |t, v| {
        let y = t.maxpool2d(v[0])?;
        probe(t, y, 19)
    })?);

    let x = uniform(&mut rng, &[2, 7, 5], -1.0, 1.0);
    out.push(check("adaptive_avgpool2d", &[x], None, |t, v| {
        let y = t.adaptive_avgpool2d(v[0], 3)?;
        probe(t, y, 20)
    })?);

    let x = uniform(&mut rng, &[6], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let b = uniform(&mut rng, &[4], -1.0, 1.0);
    out.push(check("dense", &[x, w, b], None, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        probe(t, y, 21)
    })?);

    let x = uniform(&mut rng, &[10], -1.0, 1.0);
    let keep: Vec<bool> = (0..10).map(|_| rng.random_bool(0.5)).collect();
    out.push(check("dropout", &[x], None, move |t, v| {
        let mut it = keep.iter().copied();
        let y = t.dropout(v[0], 0.5, true, || it.next().unwrap())?;
        probe(t, y, 22)
    })?);

    let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    out.push(check("row_mean", &[x], None, |t, v| {
        let y = t.row_mean(v[0])?;
        probe(t, y, 23)
    })?);

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[4], -1.0, 1.0);
    out.push(check("concat", &[a, b], None, |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        probe(t, y, 24)
    })?);

    let a = uniform(&mut rng, &[5], -1.0, 1.0);
    let b = uniform(&mut rng, &[5], -1.0, 1.0);
    out.push(check("add", &[a, b], None, |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, 25)
    })?);

    let z = uniform(&mut rng, &[10], -2.0, 2.0);
    out.push(check("softmax_cross_entropy", &[z], None, |t, v| {
        t.softmax_cross_entropy(v[0], 7)
    })?);

    let p = uniform(&mut rng, &[3], -2.0, 2.0);
    out.push(check("mse", &[p], None, |t, v| t.mse(v[0], &[0.5, -1.0, 2.0]))?);

    // f(x) = tanh(W x), reduced by a probe: exercises the chain rule
    let x = uniform(&mut rng, &[5], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    out.push(check("composite_tanh_dense", &[x, w], None, |t, v| {
        let zero = t.input(Tensor::zeros(&[3]));
        let y = t.dense(v[0], v[1], zero)?;
        let y = t.tanh(y);
        probe(t, y, 26)
    })?);

    Ok(out)
}
