//! Per-level key/value memories addressed by visual features.
//!
//! Each level holds `h` key memories `[h, N, D]`, one value memory `[N, D]`
//! shared by all heads, a query projection `D → hD` and an aggregation
//! matrix `hD → D`. A visual frame is projected into `h` queries, each head
//! softmax-addresses its key slots by scaled cosine similarity, recalls a
//! convex combination of value slots, and the heads are concatenated and
//! aggregated back to `D`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{name_seed, Bound, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var, COSINE_EPS};

/// Shape and sharpness of one memory bank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub heads: usize,
    pub slots: usize,
    pub alpha: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { heads: 4, slots: 16, alpha: 8.0 }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("memory.heads", "must be at least 1"));
        }
        if self.slots < 2 {
            return Err(Error::config("memory.slots", "must be at least 2"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("memory.alpha", "must be positive and finite"));
        }
        Ok(())
    }
}

/// One level's memory. Parameters live in a [`ParamStore`] under
/// `mtlam.{level}.{keys,values,query,aggregate}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    level: usize,
    dim: usize,
    cfg: MemoryConfig,
}

impl MemoryBank {
    /// `level` is 1-based: the bank reads the output of temporal layer `level`.
    pub fn new(level: usize, dim: usize, cfg: MemoryConfig) -> Result<Self> {
        cfg.validate()?;
        if level == 0 {
            return Err(Error::config("levels", "memory levels are numbered from 1"));
        }
        if dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        Ok(MemoryBank { level, dim, cfg })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.cfg.heads
    }

    pub fn slots(&self) -> usize {
        self.cfg.slots
    }

    pub fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    pub fn keys_name(&self) -> String {
        format!("mtlam.{}.keys", self.level)
    }

    pub fn values_name(&self) -> String {
        format!("mtlam.{}.values", self.level)
    }

    pub fn query_name(&self) -> String {
        format!("mtlam.{}.query", self.level)
    }

    pub fn aggregate_name(&self) -> String {
        format!("mtlam.{}.aggregate", self.level)
    }

    /// `hND + ND + D·hD + hD·D`.
    pub fn num_params(&self) -> usize {
        let (h, n, d) = (self.cfg.heads, self.cfg.slots, self.dim);
        h * n * d + n * d + d * h * d + h * d * d
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, n, d) = (self.cfg.heads, self.cfg.slots, self.dim);
        vec![
            (self.keys_name(), vec![h, n, d]),
            (self.values_name(), vec![n, d]),
            (self.query_name(), vec![d, h * d]),
            (self.aggregate_name(), vec![h * d, d]),
        ]
    }

    /// Everything normal with standard deviation `1/√D`.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let scale = 1.0 / (self.dim as f32).sqrt();
        for (name, shape) in self.param_shapes() {
            let t = Tensor::randn(shape, name_seed(seed, &name), scale)?;
            store.insert(name, t);
        }
        Ok(())
    }

    /// Addressing scores `[..., h, N]` for visual features `[..., D]`.
    pub fn address<F: Element>(&self, g: &mut Graph<F>, p: &Bound, f_v: Var) -> Result<Var> {
        let shape = g.shape(f_v).to_vec();
        let (h, n, d) = (self.cfg.heads, self.cfg.slots, self.dim);
        if *shape.last().unwrap() != d {
            return Err(Error::ShapeMismatch {
                op: "address",
                lhs: shape,
                rhs: vec![h, n, d],
            });
        }
        let rows = g.value(f_v).numel() / d;
        let flat = g.reshape(f_v, vec![rows, d])?;
        let q = g.linear(flat, p.get(&self.query_name())?, None)?;
        let q = g.reshape(q, vec![rows, h, d])?;
        let cos = g.cosine_scores(q, p.get(&self.keys_name())?, COSINE_EPS)?;
        let logits = g.scale(cos, self.cfg.alpha);
        let a = g.softmax(logits);
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.extend([h, n]);
        g.reshape(a, out_shape)
    }

    /// Recalled values `[..., h, D]` from scores `[..., h, N]`.
    pub fn recall<F: Element>(&self, g: &mut Graph<F>, p: &Bound, a: Var) -> Result<Var> {
        let shape = g.shape(a).to_vec();
        let (h, n, d) = (self.cfg.heads, self.cfg.slots, self.dim);
        if shape.len() < 2 || shape[shape.len() - 2..] != [h, n] {
            return Err(Error::ShapeMismatch {
                op: "recall",
                lhs: shape,
                rhs: vec![h, n],
            });
        }
        let rows = g.value(a).numel() / n;
        let flat = g.reshape(a, vec![rows, n])?;
        let out = g.matmul(flat, p.get(&self.values_name())?)?;
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(d);
        g.reshape(out, out_shape)
    }

    /// Concatenate heads and project: `[..., h, D] → [..., D]`.
    pub fn aggregate<F: Element>(&self, g: &mut Graph<F>, p: &Bound, recalled: Var) -> Result<Var> {
        let shape = g.shape(recalled).to_vec();
        let (h, d) = (self.cfg.heads, self.dim);
        if shape.len() < 2 || shape[shape.len() - 2..] != [h, d] {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                lhs: shape,
                rhs: vec![h, d],
            });
        }
        let rows = g.value(recalled).numel() / (h * d);
        let flat = g.reshape(recalled, vec![rows, h * d])?;
        let out = g.matmul(flat, p.get(&self.aggregate_name())?)?;
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(d);
        g.reshape(out, out_shape)
    }

    /// Address, recall and aggregate in one go. Returns `(scores, f̂_a)`.
    pub fn read<F: Element>(&self, g: &mut Graph<F>, p: &Bound, f_v: Var) -> Result<(Var, Var)> {
        let a = self.address(g, p, f_v)?;
        let r = self.recall(g, p, a)?;
        let out = self.aggregate(g, p, r)?;
        Ok((a, out))
    }

    /// Scores for a single `[T, D]` sequence, outside any training graph.
    pub fn address_sequence(&self, params: &ParamStore, f_v: &Tensor) -> Result<AddressingScore> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(f_v.clone());
        let a = self.address(&mut g, &p, x)?;
        AddressingScore::new(g.value(a).clone())
    }
}

/// Summation fusion of visual features and recalled audio features.
pub fn fuse<F: Element>(g: &mut Graph<F>, f_v: Var, f_hat_a: Var) -> Result<Var> {
    if g.shape(f_v) != g.shape(f_hat_a) {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: g.shape(f_v).to_vec(),
            rhs: g.shape(f_hat_a).to_vec(),
        });
    }
    g.add(f_v, f_hat_a)
}

/// Slot weights `[T, h, N]` of one sequence at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct AddressingScore {
    scores: Tensor,
}

impl AddressingScore {
    /// Checks the shape and that every `(t, head)` row is a distribution.
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.shape().len() != 3 {
            return Err(Error::InvalidShape {
                shape: scores.shape().to_vec(),
                reason: "addressing scores are [T, heads, slots]".into(),
            });
        }
        let n = scores.shape()[2];
        for (i, row) in scores.data().chunks(n).enumerate() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::ContractViolation(format!(
                    "addressing row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(AddressingScore { scores })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scores
    }

    pub fn frames(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn slots(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn get(&self, t: usize, head: usize, slot: usize) -> f32 {
        let (h, n) = (self.heads(), self.slots());
        self.scores.data()[(t * h + head) * n + slot]
    }

    /// Slot with the largest weight for `(t, head)`; lowest index on ties.
    pub fn argmax(&self, t: usize, head: usize) -> usize {
        let n = self.slots();
        let row = &self.scores.data()[(t * self.heads() + head) * n..][..n];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    /// CSV with header `t,head,slot,score`, rows in `(t, head, slot)` order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,head,slot,score")?;
        for t in 0..self.frames() {
            for head in 0..self.heads() {
                for slot in 0..self.slots() {
                    writeln!(w, "{t},{head},{slot},{}", self.get(t, head, slot))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}
