//! Finite-difference verification of analytic gradients.
//!
//! The numeric side always runs in 64-bit. The analytic side runs at the requested
//! [`Precision`], so an `F32` check measures the error of the 32-bit backward pass
//! against a 64-bit central-difference oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function of several tensors, evaluable at any precision.
pub trait Differentiable {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub precision: Precision,
    /// Check at most this many randomly chosen coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn f64(tol: f64) -> Self {
        Self {
            h: 1e-4,
            tol,
            precision: Precision::F64,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn f32(tol: f64) -> Self {
        Self {
            precision: Precision::F32,
            ..Self::f64(tol)
        }
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| over all checked coordinates, divided by the largest
    /// gradient magnitude seen on either side.
    pub max_rel_error: f64,
    /// Same numerator restricted to each input, over the shared denominator.
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval_scalar<F: Differentiable, T: Scalar>(
    f: &F,
    inputs: &[Tensor<T>],
    grad: bool,
) -> Result<(Graph<T>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
    let out = f.eval(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

fn analytic<F: Differentiable, T: Scalar>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let cast: Vec<Tensor<T>> = inputs.iter().map(Tensor::cast).collect();
    let (mut g, vars, out) = eval_scalar(f, &cast, true)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| Tensor::zeros(x.shape()), |t| t.cast()))
        .collect())
}

fn value_at<F: Differentiable>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let (g, _, out) = eval_scalar(f, inputs, false)?;
    Ok(g.value(out).data()[0])
}

/// Compares reverse-mode gradients of `f` at `inputs` with central differences.
pub fn grad_check<F: Differentiable>(
    f: &F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let grads = match opts.precision {
        Precision::F32 => analytic::<F, f32>(f, inputs)?,
        Precision::F64 => analytic::<F, f64>(f, inputs)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut diffs = Vec::with_capacity(inputs.len());
    let mut scale = 0.0f64;
    let mut coords_checked = 0;
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(n) if n < x.len() => {
                let mut c = sample(&mut rng, x.len(), n).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..x.len()).collect(),
        };
        let mut worst = 0.0f64;
        for j in coords {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + opts.h;
            let plus = value_at(f, &probe)?;
            probe[i].data_mut()[j] = orig - opts.h;
            let minus = value_at(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grads[i].data()[j];
            worst = worst.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            coords_checked += 1;
        }
        diffs.push(worst);
    }
    let denom = if scale > 0.0 { scale } else { 1.0 };
    let per_input: Vec<f64> = diffs.iter().map(|d| d / denom).collect();
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        coords_checked,
        tol: opts.tol,
        passed: max_rel_error.is_finite() && max_rel_error <= opts.tol,
    })
}
