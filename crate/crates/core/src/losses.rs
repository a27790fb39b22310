//! Training objectives: feature reconstruction, slot diversity, three
//! classification heads, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtlam::MemoryBank;
use crate::params::ParamStore;
use crate::tensor::{Element, Graph, Tensor, Var, COSINE_EPS};

/// Mean over levels of the mean over frames of `|1 − cos(f̂, f)|`.
///
/// Targets are detached: no gradient reaches whatever produced `f_a`.
pub fn recon_loss<F: Element>(g: &mut Graph<F>, f_hat_a: &[Var], f_a: &[Var]) -> Result<Var> {
    if f_hat_a.is_empty() {
        return Err(Error::InvalidArgument("reconstruction loss needs at least one level".into()));
    }
    if f_hat_a.len() != f_a.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructed levels but {} targets",
            f_hat_a.len(),
            f_a.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&pred, &target) in f_hat_a.iter().zip(f_a) {
        let target = g.detach(target);
        let cos = g.cosine_sim(pred, target, COSINE_EPS)?;
        let gap = g.affine(cos, -1.0, 1.0);
        let gap = g.abs(gap);
        let level = g.mean(gap);
        acc = Some(match acc {
            None => level,
            Some(a) => g.add(a, level)?,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / f_hat_a.len() as f64))
}

/// Mean over levels of the average off-diagonal cosine similarity between
/// value slots, `Σ_{p≠q} cos(M_v[p], M_v[q]) / (N(N−1))`. Each entry of
/// `values` is one level's `[N, D]` value memory. An empty list gives 0.
pub fn contrastive_loss<F: Element>(g: &mut Graph<F>, values: &[Var]) -> Result<Var> {
    if values.is_empty() {
        return Ok(g.constant(Tensor::scalar(F::zero())));
    }
    let mut acc: Option<Var> = None;
    for &m in values {
        let shape = g.shape(m).to_vec();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "value memory must be [N, D] with N >= 2".into(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let rows = g.reshape(m, vec![n, 1, d])?;
        let keys = g.reshape(m, vec![1, n, d])?;
        let sims = g.cosine_scores(rows, keys, COSINE_EPS)?;
        let sims = g.reshape(sims, vec![n, n])?;
        let mut mask = vec![F::one(); n * n];
        for i in 0..n {
            mask[i * n + i] = F::zero();
        }
        let mask = g.constant(Tensor::new(vec![n, n], mask)?);
        let off = g.mul(sims, mask)?;
        let total = g.sum(off);
        let level = g.scale(total, 1.0 / (n * (n - 1)) as f64);
        acc = Some(match acc {
            None => level,
            Some(a) => g.add(a, level)?,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / values.len() as f64))
}

/// Contrastive loss of the banks' current value memories.
pub fn contrastive_loss_of_banks(banks: &[MemoryBank], params: &ParamStore) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let values = banks
        .iter()
        .map(|b| Ok(g.constant(params.get(&b.values_name())?.clone())))
        .collect::<Result<Vec<_>>>()?;
    let l = contrastive_loss(&mut g, &values)?;
    Ok(g.value(l).item()? as f64)
}

/// Cross-entropies of the visual, audio and fused heads against `labels`.
pub fn classification_losses<F: Element>(
    g: &mut Graph<F>,
    logits_v: Var,
    logits_a: Var,
    logits_va: Var,
    labels: &[usize],
) -> Result<(Var, Var, Var)> {
    Ok((
        g.cross_entropy(logits_v, labels)?,
        g.cross_entropy(logits_a, labels)?,
        g.cross_entropy(logits_va, labels)?,
    ))
}

/// Multipliers of the five loss terms. All 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub cont: f64,
    pub cls_v: f64,
    pub cls_a: f64,
    pub cls_va: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            cont: 1.0,
            cls_v: 1.0,
            cls_a: 1.0,
            cls_va: 1.0,
        }
    }
}

/// Graph handles of the five scalar loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub recon: Var,
    pub cont: Var,
    pub cls_v: Var,
    pub cls_a: Var,
    pub cls_va: Var,
}

/// Weighted sum of the parts; with unit weights this is the plain sum.
pub fn total_loss<F: Element>(g: &mut Graph<F>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        (parts.cls_v, w.cls_v),
        (parts.cls_a, w.cls_a),
        (parts.cls_va, w.cls_va),
        (parts.recon, w.recon),
        (parts.cont, w.cont),
    ];
    let mut acc: Option<Var> = None;
    for (v, weight) in terms {
        let term = if weight == 1.0 { v } else { g.scale(v, weight) };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("five terms"))
}

pub const LOSS_CSV_HEADER: &str = "step,recon,cont,cls_v,cls_a,cls_va,total";

/// Scalar values of one batch's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub cont: f64,
    pub cls_v: f64,
    pub cls_a: f64,
    pub cls_va: f64,
    pub total: f64,
}

impl LossReport {
    pub fn read<F: Element>(g: &Graph<F>, parts: &LossParts, total: Var) -> Result<Self> {
        let v = |x: Var| -> Result<f64> { Ok(g.value(x).item()?.f64()) };
        Ok(LossReport {
            recon: v(parts.recon)?,
            cont: v(parts.cont)?,
            cls_v: v(parts.cls_v)?,
            cls_a: v(parts.cls_a)?,
            cls_va: v(parts.cls_va)?,
            total: v(total)?,
        })
    }

    pub fn sum_of_parts(&self) -> f64 {
        self.recon + self.cont + self.cls_v + self.cls_a + self.cls_va
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.recon, self.cont, self.cls_v, self.cls_a, self.cls_va, self.total
        )
    }
}
