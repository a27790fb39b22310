//! Central finite-difference checks of analytic gradients.
//!
//! Both sides run the engine at `f64`. The numeric side only ever runs
//! forward passes on constant inputs and projects outputs onto a fixed random
//! direction, so it never touches the backward code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Gradient components smaller than this are compared against the floor
/// instead of their own magnitude.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// One checked scalar coordinate.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.samples.iter().all(|s| s.rel_error < tol)
    }
}

/// Which coordinates of the inputs to probe.
#[derive(Clone, Debug)]
pub enum Coordinates {
    All,
    /// `count` coordinates drawn uniformly over all inputs with `seed`.
    Random { count: usize, seed: u64 },
    Explicit(Vec<(usize, usize)>),
}

/// Compare analytic and central-difference gradients of `f(inputs)`.
///
/// `f` may return any shape; the checked scalar is `Σ r ⊙ f(inputs)` for a
/// fixed random `r` (skipped when `f` already returns a scalar).
pub fn check<F>(inputs: &[Tensor<f64>], f: F, eps: f64, coords: Coordinates, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with(inputs, f, eps, coords, seed, |_, _, g| g)
}

/// Like [`check`], with a hook that may tamper with each analytic value
/// (used to confirm the check detects broken gradients).
pub fn check_with<F, H>(
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
    coords: Coordinates,
    seed: u64,
    tamper: H,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    H: Fn(usize, usize, f64) -> f64,
{
    // Analytic side.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = projection(g.value(out), seed)?;
    let loss = match &proj {
        None => out,
        Some(r) => {
            let r = g.constant(r.clone());
            let prod = g.mul(out, r)?;
            g.sum(prod)
        }
    };
    g.backward(loss)?;
    let grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data();
        Ok(match &proj {
            None => v[0],
            Some(r) => v.iter().zip(r.data()).map(|(&a, &b)| a * b).sum(),
        })
    };

    let coords: Vec<(usize, usize)> = match coords {
        Coordinates::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Coordinates::Random { count, seed } => {
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| locate(inputs, rng.gen_range(0..total)))
                .collect()
        }
        Coordinates::Explicit(c) => c,
    };

    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / ((orig + eps) - (orig - eps));
        let analytic = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
        let analytic = tamper(i, j, analytic);
        report.samples.push(GradSample {
            input: i,
            index: j,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}

fn projection(out: &Tensor<f64>, seed: u64) -> Result<Option<Tensor<f64>>> {
    if out.numel() == 1 {
        return Ok(None);
    }
    Ok(Some(Tensor::randn(out.shape().to_vec(), seed ^ 0x9e37_79b9, 1.0)?.cast()))
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("flat index within total")
}
