//! Model assembly and the forward pass.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::losses::{
    classification_losses, contrastive_loss, recon_loss, total_loss, LossParts, LossWeights,
};
use crate::mtlam::{fuse, MemoryBank, MemoryConfig};
use crate::params::{name_seed, Bound, ParamStore};
use crate::temporal::{check_alignment, Modality, TemporalStack, TemporalStackConfig};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::toytask::ToySample;

thread_local! {
    static AUDIO_TRACE: Cell<bool> = const { Cell::new(false) };
}

/// Per-thread record of whether the audio temporal model has run.
pub mod audio_trace {
    use super::AUDIO_TRACE;

    pub fn reset() {
        AUDIO_TRACE.with(|c| c.set(false));
    }

    pub fn was_set() -> bool {
        AUDIO_TRACE.with(|c| c.get())
    }

    pub(super) fn mark() {
        AUDIO_TRACE.with(|c| c.set(true));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Everything that determines a model and its training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub dim: usize,
    pub visual_stack: TemporalStackConfig,
    pub audio_stack: TemporalStackConfig,
    /// 1-based temporal layers that get a memory bank; never the last layer.
    pub levels: Vec<usize>,
    pub memory: MemoryConfig,
    /// Frames averaged around the clip center before classification; 0 means
    /// the whole clip.
    pub pool_width: usize,
    pub loss_weights: LossWeights,
    pub train: TrainConfig,
}

impl ModelConfig {
    /// Default stacks and memories for the given input width and class count.
    pub fn with_defaults(input_dim: usize, classes: usize, dim: usize) -> Result<Self> {
        let stack = TemporalStackConfig::default_stack(dim)?;
        Ok(ModelConfig {
            input_dim,
            classes,
            dim,
            visual_stack: stack.clone(),
            audio_stack: stack,
            levels: vec![1, 2, 3],
            memory: MemoryConfig::default(),
            pool_width: 7,
            loss_weights: LossWeights::default(),
            train: TrainConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        for (name, s) in [("visual_stack", &self.visual_stack), ("audio_stack", &self.audio_stack)] {
            if !s.has_constant_width() || s.input_width() != self.dim {
                return Err(Error::config(
                    name,
                    format!("every layer must map {0} channels to {0}", self.dim),
                ));
            }
        }
        check_alignment(&self.visual_stack, &self.audio_stack)?;
        let depth = self.visual_stack.depth();
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.levels {
            return Err(Error::config("levels", "must be strictly increasing"));
        }
        if let Some(&bad) = self.levels.iter().find(|&&l| l == 0 || l >= depth) {
            return Err(Error::config(
                "levels",
                format!("level {bad} outside 1..={}; the last layer has no memory", depth - 1),
            ));
        }
        self.memory.validate()?;
        self.train.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serialises");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which streams a forward pass may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Training or evaluation with both streams.
    Joint,
    /// Inference from the visual stream alone; running the audio model is
    /// a contract violation.
    VisualOnly,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[B, C]` logits of the un-fused visual head.
    pub logits_v: Var,
    /// `[B, C]` logits of the memory-fused visual head.
    pub logits_va: Var,
    /// `[B, C]` logits of the audio head; `None` in visual-only mode.
    pub logits_a: Option<Var>,
    /// Per enabled level: addressing scores `[B, T, h, N]`.
    pub scores: Vec<Var>,
    /// Per enabled level: recalled audio features `[B, T, D]`.
    pub recalled: Vec<Var>,
    /// Per enabled level: audio features `[B, T, D]` (joint mode only).
    pub audio_levels: Vec<Var>,
}

/// A configured model with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    visual: TemporalStack,
    audio: TemporalStack,
    banks: Vec<MemoryBank>,
    pub params: ParamStore,
}

fn linear_init(store: &mut ParamStore, seed: u64, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
    let w = format!("{prefix}.weight");
    let scale = 1.0 / (d_in as f32).sqrt();
    store.insert(w.clone(), Tensor::randn(vec![d_in, d_out], name_seed(seed, &w), scale)?);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d_out])?);
    Ok(())
}

/// Build a model with deterministic parameters drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::skeleton(cfg)?;
    let p = &mut model.params;
    linear_init(p, seed, "visual.proj", cfg.input_dim, cfg.dim)?;
    linear_init(p, seed, "audio.proj", cfg.input_dim, cfg.dim)?;
    model.visual.init_params(p, seed)?;
    model.audio.init_params(p, seed)?;
    for b in &model.banks {
        b.init_params(p, seed)?;
    }
    for head in ["head_v", "head_a", "head_va"] {
        linear_init(p, seed, head, cfg.dim, cfg.classes)?;
    }
    Ok(model)
}

impl Model {
    fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let banks = cfg
            .levels
            .iter()
            .map(|&l| MemoryBank::new(l, cfg.dim, cfg.memory))
            .collect::<Result<_>>()?;
        Ok(Model {
            cfg: cfg.clone(),
            visual: TemporalStack::new(cfg.visual_stack.clone(), Modality::Visual),
            audio: TemporalStack::new(cfg.audio_stack.clone(), Modality::Audio),
            banks,
            params: ParamStore::new(),
        })
    }

    /// Wrap an existing parameter table, checking it has exactly the
    /// parameters and shapes `cfg` calls for.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = build_model(cfg, 0)?;
        let mut model = Model::skeleton(cfg)?;
        if params.len() != reference.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} parameters, found {}", reference.params.len(), params.len()),
            ));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::format("checkpoint", format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn banks(&self) -> &[MemoryBank] {
        &self.banks
    }

    pub fn bank(&self, level: usize) -> Option<&MemoryBank> {
        self.banks.iter().find(|b| b.level() == level)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Mean over the pooling window around the clip center: `[B, T, D] → [B, D]`.
    fn pool<F: Element>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let t = g.shape(x)[1];
        let w = match self.cfg.pool_width {
            0 => t,
            w => w.min(t),
        };
        let windowed = if w == t { x } else { g.narrow(x, 1, (t - w) / 2, w)? };
        g.mean_axis(windowed, 1)
    }

    fn audio_forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        audio: Var,
        mode: Mode,
    ) -> Result<(Vec<Var>, Var)> {
        if mode == Mode::VisualOnly {
            return Err(Error::ContractViolation(
                "the audio temporal model was invoked during visual-only inference".into(),
            ));
        }
        audio_trace::mark();
        let h = g.linear(audio, p.get("audio.proj.weight")?, Some(p.get("audio.proj.bias")?))?;
        let levels = self.audio.forward(g, p, h)?;
        let pooled = self.pool(g, *levels.last().expect("non-empty stack"))?;
        let logits = g.linear(pooled, p.get("head_a.weight")?, Some(p.get("head_a.bias")?))?;
        Ok((levels, logits))
    }

    /// Forward pass over a batch: `visual` and `audio` are `[B, T, D_in]`.
    /// In [`Mode::VisualOnly`] `audio` must be `None`.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        visual: Var,
        audio: Option<Var>,
        mode: Mode,
    ) -> Result<Outputs> {
        let h0 = g.linear(visual, p.get("visual.proj.weight")?, Some(p.get("visual.proj.bias")?))?;
        let plain = self.visual.forward(g, p, h0)?;
        let depth = plain.len();

        // Fused path: layer ℓ+1 reads fuse(f_v_ℓ, f̂_a_ℓ). Layers below the
        // first memory level are identical to the plain path and reused.
        let mut scores = Vec::new();
        let mut recalled = Vec::new();
        let mut z = h0;
        for layer in 0..depth {
            let level = layer + 1;
            let f_v = if scores.is_empty() {
                plain[layer]
            } else {
                self.visual.layer_forward(g, p, layer, z)?
            };
            z = match self.bank(level) {
                Some(bank) => {
                    let (a, f_hat) = bank.read(g, p, f_v)?;
                    scores.push(a);
                    recalled.push(f_hat);
                    fuse(g, f_v, f_hat)?
                }
                None => f_v,
            };
        }

        let pooled_v = self.pool(g, plain[depth - 1])?;
        let logits_v = g.linear(pooled_v, p.get("head_v.weight")?, Some(p.get("head_v.bias")?))?;
        let pooled_va = self.pool(g, z)?;
        let logits_va = g.linear(pooled_va, p.get("head_va.weight")?, Some(p.get("head_va.bias")?))?;

        let (logits_a, audio_levels) = match (mode, audio) {
            (Mode::VisualOnly, None) => (None, Vec::new()),
            (Mode::VisualOnly, Some(_)) => {
                return Err(Error::ContractViolation(
                    "an audio stream was bound during visual-only inference".into(),
                ))
            }
            (Mode::Joint, None) => {
                return Err(Error::InvalidArgument("joint mode needs an audio stream".into()))
            }
            (Mode::Joint, Some(a)) => {
                let (levels, logits) = self.audio_forward(g, p, a, mode)?;
                let picked = self.banks.iter().map(|b| levels[b.level() - 1]).collect();
                (Some(logits), picked)
            }
        };

        Ok(Outputs {
            logits_v,
            logits_va,
            logits_a,
            scores,
            recalled,
            audio_levels,
        })
    }

    /// All five loss terms and the total for a batch with labels.
    pub fn losses<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        visual: Var,
        audio: Var,
        labels: &[usize],
    ) -> Result<(LossParts, Var)> {
        self.losses_against(g, p, visual, audio, labels, None)
    }

    /// Like [`Model::losses`], but with the reconstruction targets supplied as
    /// fixed values instead of computed from the audio stream. Lets a
    /// finite-difference check see the same stop-gradient as the tape.
    pub fn losses_against<F: Element>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        visual: Var,
        audio: Var,
        labels: &[usize],
        targets: Option<&[Tensor<F>]>,
    ) -> Result<(LossParts, Var)> {
        let out = self.forward(g, p, visual, Some(audio), Mode::Joint)?;
        let logits_a = out.logits_a.expect("joint mode");
        let (cls_v, cls_a, cls_va) = classification_losses(g, out.logits_v, logits_a, out.logits_va, labels)?;
        let audio_levels = match targets {
            None => out.audio_levels,
            Some(t) if t.len() == out.audio_levels.len() => t.iter().map(|t| g.constant(t.clone())).collect(),
            Some(t) => {
                return Err(Error::InvalidArgument(format!(
                    "expected {} reconstruction targets, got {}",
                    out.audio_levels.len(),
                    t.len()
                )))
            }
        };
        let recon = if out.recalled.is_empty() {
            g.constant(Tensor::scalar(F::zero()))
        } else {
            recon_loss(g, &out.recalled, &audio_levels)?
        };
        let values = self
            .banks
            .iter()
            .map(|b| p.get(&b.values_name()))
            .collect::<Result<Vec<_>>>()?;
        let cont = contrastive_loss(g, &values)?;
        let parts = LossParts {
            recon,
            cont,
            cls_v,
            cls_a,
            cls_va,
        };
        let total = total_loss(g, &parts, &self.cfg.loss_weights)?;
        Ok((parts, total))
    }
}

/// Stack samples into `[B, T, D_in]` visual and audio tensors plus labels.
pub fn collate<'a>(samples: impl IntoIterator<Item = &'a ToySample>) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let samples: Vec<&ToySample> = samples.into_iter().collect();
    let visual = Tensor::stack(&samples.iter().map(|s| &s.visual).collect::<Vec<_>>())?;
    let audio = Tensor::stack(&samples.iter().map(|s| &s.audio).collect::<Vec<_>>())?;
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((visual, audio, labels))
}
