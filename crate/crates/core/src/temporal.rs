//! Dilated temporal convolution stacks and their receptive fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{name_seed, Bound, ParamStore};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Input span of a single stride-1 layer: `(k - 1)(d - 1) + k`.
pub fn receptive_field(k: usize, d: usize) -> Result<usize> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size and dilation must be positive, got k={k}, d={d}"
        )));
    }
    Ok((k - 1) * (d - 1) + k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalLayerConfig {
    pub kernel_size: usize,
    pub dilation: usize,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl TemporalLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(
                "kernel_size",
                format!("must be odd and positive, got {}", self.kernel_size),
            ));
        }
        if self.dilation == 0 {
            return Err(Error::config("dilation", "must be at least 1"));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        Ok(())
    }

    /// Frames added to the cumulative receptive field by this layer.
    pub fn span(&self) -> usize {
        (self.kernel_size - 1) * self.dilation
    }
}

/// Ordered layer list of one temporal model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TemporalLayerConfig>", into = "Vec<TemporalLayerConfig>")]
pub struct TemporalStackConfig {
    layers: Vec<TemporalLayerConfig>,
}

impl TryFrom<Vec<TemporalLayerConfig>> for TemporalStackConfig {
    type Error = Error;

    fn try_from(layers: Vec<TemporalLayerConfig>) -> Result<Self> {
        TemporalStackConfig::new(layers)
    }
}

impl From<TemporalStackConfig> for Vec<TemporalLayerConfig> {
    fn from(s: TemporalStackConfig) -> Self {
        s.layers
    }
}

impl TemporalStackConfig {
    /// Checks every layer, the layer count (at least 2) and the channel chain.
    pub fn new(layers: Vec<TemporalLayerConfig>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::config(
                "layers",
                format!("a temporal stack needs at least 2 layers, got {}", layers.len()),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::config(format!("layers[{i}]"), e.to_string()))?;
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].channels_out != w[1].channels_in {
                return Err(Error::config(
                    format!("layers[{}].channels_in", i + 1),
                    format!(
                        "expected {} to match the previous layer's output, got {}",
                        w[0].channels_out, w[1].channels_in
                    ),
                ));
            }
        }
        Ok(TemporalStackConfig { layers })
    }

    /// Constant-width stack with one `(k, d)` pair per layer.
    pub fn uniform(width: usize, kernel_sizes: &[usize], dilations: &[usize]) -> Result<Self> {
        if kernel_sizes.len() != dilations.len() {
            return Err(Error::config(
                "dilations",
                format!("{} kernel sizes but {} dilations", kernel_sizes.len(), dilations.len()),
            ));
        }
        let layers = kernel_sizes
            .iter()
            .zip(dilations)
            .map(|(&k, &d)| TemporalLayerConfig {
                kernel_size: k,
                dilation: d,
                channels_in: width,
                channels_out: width,
            })
            .collect();
        Self::new(layers)
    }

    /// Four layers, k = 3, dilations 1, 2, 4, 8.
    pub fn default_stack(width: usize) -> Result<Self> {
        Self::uniform(width, &[3, 3, 3, 3], &[1, 2, 4, 8])
    }

    pub fn layers(&self) -> &[TemporalLayerConfig] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].channels_in
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].channels_out
    }

    /// True when every layer maps `width` channels to `width` channels.
    pub fn has_constant_width(&self) -> bool {
        let w = self.input_width();
        self.layers.iter().all(|l| l.channels_in == w && l.channels_out == w)
    }
}

/// Input window seen by one output frame after layers `1..=upto_layer`.
pub fn cumulative_receptive_field(stack: &TemporalStackConfig, upto_layer: usize) -> Result<usize> {
    if upto_layer == 0 || upto_layer > stack.depth() {
        return Err(Error::InvalidArgument(format!(
            "layer index {upto_layer} outside 1..={}",
            stack.depth()
        )));
    }
    Ok(1 + stack.layers[..upto_layer].iter().map(TemporalLayerConfig::span).sum::<usize>())
}

/// First layer where two stacks' cumulative receptive fields differ.
pub fn check_alignment(visual: &TemporalStackConfig, audio: &TemporalStackConfig) -> Result<()> {
    let depth = visual.depth().max(audio.depth());
    for layer in 1..=depth {
        let v = cumulative_receptive_field(visual, layer).unwrap_or(0);
        let a = cumulative_receptive_field(audio, layer).unwrap_or(0);
        if v != a {
            return Err(Error::Misaligned { layer, visual: v, audio: a });
        }
    }
    Ok(())
}

/// True iff both stacks have equal depth and equal cumulative receptive
/// fields at every layer.
pub fn verify_alignment(visual: &TemporalStackConfig, audio: &TemporalStackConfig) -> bool {
    check_alignment(visual, audio).is_ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

/// Per-layer outputs of one temporal model for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub modality: Modality,
    /// Level `i` (0-based here) is the output of layer `i + 1`, each `[T, D]`.
    pub features: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn levels(&self) -> usize {
        self.features.len()
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.features[i]
    }
}

/// A temporal model: conv → ReLU per layer, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalStack {
    config: TemporalStackConfig,
    modality: Modality,
}

impl TemporalStack {
    pub fn new(config: TemporalStackConfig, modality: Modality) -> Self {
        TemporalStack { config, modality }
    }

    pub fn config(&self) -> &TemporalStackConfig {
        &self.config
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn kernel_name(&self, layer: usize) -> String {
        format!("{}.tcn.{layer}.kernel", self.modality.name())
    }

    /// He-normal kernels, seeded per parameter name.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        for (i, l) in self.config.layers.iter().enumerate() {
            let name = self.kernel_name(i);
            let scale = (2.0 / (l.kernel_size * l.channels_in) as f32).sqrt();
            let k = Tensor::randn(
                vec![l.kernel_size, l.channels_in, l.channels_out],
                name_seed(seed, &name),
                scale,
            )?;
            store.insert(name, k);
        }
        Ok(())
    }

    /// Apply layer `layer` (0-based) to `x` of shape `[T, C]` or `[B, T, C]`.
    pub fn layer_forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        params: &Bound,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let l = &self.config.layers[layer];
        let kernel = params.get(&self.kernel_name(layer))?;
        let y = g.conv1d_dilated(x, kernel, l.dilation)?;
        Ok(g.relu(y))
    }

    /// Every layer's output, in order.
    pub fn forward<F: Element>(&self, g: &mut Graph<F>, params: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.config.depth());
        let mut h = x;
        for layer in 0..self.config.depth() {
            h = self.layer_forward(g, params, layer, h)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Value-level pyramid of a single `[T, C]` sequence.
    pub fn forward_pyramid(&self, params: &ParamStore, input: &Tensor) -> Result<FeaturePyramid> {
        if input.shape().len() != 2 || input.shape()[1] != self.config.input_width() {
            return Err(Error::ShapeMismatch {
                op: "forward_pyramid",
                lhs: input.shape().to_vec(),
                rhs: vec![input.shape()[0], self.config.input_width()],
            });
        }
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let levels = self.forward(&mut g, &bound, x)?;
        Ok(FeaturePyramid {
            modality: self.modality,
            features: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }
}
