//! Finite-difference check of the whole model's loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{collate, Mode, Model};
use crate::error::{Error, Result};
use crate::gradcheck::{check_with, Coordinates, GradReport};
use crate::params::Bound;
use crate::tensor::{Graph, Tensor};
use crate::toytask::ToySample;

/// Report plus the parameter name behind every checked coordinate.
#[derive(Clone, Debug)]
pub struct ModelGradcheck {
    pub report: GradReport,
    pub names: Vec<String>,
}

/// Check `n_params` random scalar parameters of the total loss on `batch`.
/// Parameter tensors are drawn uniformly, then an entry within the tensor, so
/// small tensors such as biases are covered too. Runs in `f64`.
/// With `flip_sign` every analytic value is negated before comparison.
///
/// Reconstruction targets are held at their unperturbed values on the
/// numeric side, matching the detached targets of the analytic gradient.
pub fn model_gradcheck(
    model: &Model,
    batch: &[ToySample],
    n_params: usize,
    eps: f64,
    seed: u64,
    flip_sign: bool,
) -> Result<ModelGradcheck> {
    if n_params == 0 {
        return Err(Error::InvalidArgument("need at least one parameter to check".into()));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs a non-empty batch".into()));
    }
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| Ok(model.params.get(n)?.cast()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = (0..n_params)
        .map(|_| {
            let i = rng.gen_range(0..inputs.len());
            (i, rng.gen_range(0..inputs[i].numel()))
        })
        .collect();
    let picked = coords.iter().map(|&(i, _)| names[i].clone()).collect();

    let (visual, audio, labels) = collate(batch)?;
    let (visual, audio): (Tensor<f64>, Tensor<f64>) = (visual.cast(), audio.cast());
    let targets: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let p = Bound::from_pairs(names.iter().cloned().zip(vars));
        let (v, a) = (g.constant(visual.clone()), g.constant(audio.clone()));
        let out = model.forward(&mut g, &p, v, Some(a), Mode::Joint)?;
        out.audio_levels.iter().map(|&t| g.value(t).clone()).collect()
    };
    let report = check_with(
        &inputs,
        |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let v = g.constant(visual.clone());
            let a = g.constant(audio.clone());
            let (_, total) = model.losses_against(g, &p, v, a, &labels, Some(&targets))?;
            Ok(total)
        },
        eps,
        Coordinates::Explicit(coords),
        seed,
        |_, _, grad| if flip_sign { -grad } else { grad },
    )?;
    Ok(ModelGradcheck { report, names: picked })
}
