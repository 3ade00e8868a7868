//! Plain convolutional feature extractor for both streams.
//!
//! Each stage is a 3x3 convolution (padding 1) followed by a fixed gain and a
//! ReLU. Stream 2 borrows the first `shared_stage_count` stages from the
//! Stream-1 model and owns the rest, so shared weights exist exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<StageSpec>,
    /// `(channels, height, width)` of input images.
    pub input_shape: (usize, usize, usize),
    pub shared_stage_count: usize,
    /// Width of the identity classifier head.
    pub id_count: usize,
    /// Constant applied after each convolution, before the ReLU.
    pub stage_gain: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::new(
            vec![
                StageSpec { out_channels: 16, stride: 2 },
                StageSpec { out_channels: 32, stride: 2 },
                StageSpec { out_channels: 64, stride: 2 },
            ],
            (3, 64, 32),
            10,
            42,
        )
    }
}

impl BackboneConfig {
    /// Config with `shared_stage_count = ceil(stages / 2)` and the default gain.
    pub fn new(stages: Vec<StageSpec>, input_shape: (usize, usize, usize), id_count: usize, seed: u64) -> Self {
        let shared = stages.len().div_ceil(2);
        BackboneConfig {
            stages,
            input_shape,
            shared_stage_count: shared,
            id_count,
            stage_gain: 6f64.sqrt(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if n < 2 {
            return Err(Error::Config("backbone needs at least two stages".into()));
        }
        if self.shared_stage_count < 1 || self.shared_stage_count >= n {
            return Err(Error::Config(format!(
                "shared stage count must lie in [1, {}), got {}",
                n, self.shared_stage_count
            )));
        }
        if !self.channels().is_multiple_of(8) {
            return Err(Error::Config(format!(
                "final channel count {} is not divisible by 8",
                self.channels()
            )));
        }
        if self.stages.iter().any(|s| s.out_channels == 0 || s.stride == 0) {
            return Err(Error::Config("stage widths and strides must be positive".into()));
        }
        if self.id_count < 2 {
            return Err(Error::Config("classifier needs at least two identities".into()));
        }
        if !(self.stage_gain > 0.0 && self.stage_gain.is_finite()) {
            return Err(Error::Config("stage gain must be positive".into()));
        }
        self.output_shape().map(|_| ())
    }

    /// C, the final stage width.
    pub fn channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let (_, mut h, mut w) = self.input_shape;
        for s in &self.stages {
            let g = ConvGeometry::new(s.stride, 1);
            h = g.output_len(h, 3).filter(|&v| v > 0).ok_or_else(|| {
                Error::Config(format!("input {:?} too small for the stages", self.input_shape))
            })?;
            w = g.output_len(w, 3).filter(|&v| v > 0).ok_or_else(|| {
                Error::Config(format!("input {:?} too small for the stages", self.input_shape))
            })?;
        }
        Ok((self.channels(), h, w))
    }

    fn in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_shape.0
        } else {
            self.stages[stage - 1].out_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvStage {
    fn init(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / (cin * 9) as f64).sqrt();
        let n = cout * cin * 9;
        let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        ConvStage {
            weight: Tensor::new(vec![cout, cin, 3, 3], w).unwrap(),
            bias: Tensor::zeros(&[cout]),
            stride,
        }
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, 1)
    }

    pub fn forward(&self, x: &Tensor, gain: f64) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, Some(&self.bias), self.geometry())?;
        Ok(y.map(|v| (v * gain).max(0.0)))
    }

    /// Records the stage on a tape. Returns the output and the
    /// `(weight, bias)` vars, which are params when `trainable`.
    pub fn trace(&self, g: &mut Graph, x: Var, gain: f64, trainable: bool) -> Result<(Var, Var, Var)> {
        let (w, b) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        let y = g.conv2d(x, w, Some(b), self.geometry())?;
        let y = g.scale(y, gain)?;
        Ok((g.relu(y)?, w, b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub source_image_id: String,
}

/// Stream 1: backbone plus identity classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidModel {
    pub config: BackboneConfig,
    pub stages: Vec<ConvStage>,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

fn stage_seed(seed: u64, stream: u64, stage: usize) -> u64 {
    crate::data::splitmix64(seed ^ (stream << 32) ^ stage as u64)
}

impl ReidModel {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, 1, i));
                ConvStage::init(config.in_channels(i), s.out_channels, s.stride, &mut rng)
            })
            .collect();
        let c = config.channels();
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, 1, usize::MAX >> 1));
        let bound = (1.0 / c as f64).sqrt();
        let cw = (0..config.id_count * c).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(ReidModel {
            classifier_weight: Tensor::new(vec![config.id_count, c], cw)?,
            classifier_bias: Tensor::zeros(&[config.id_count]),
            stages,
            config,
        })
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = self.config.input_shape;
        image.expect_shape(&[c, h, w])
    }

    /// Output of the first `count` stages.
    pub fn forward_stages(&self, image: &Tensor, count: usize) -> Result<Tensor> {
        self.check_image(image)?;
        let mut x = image.clone();
        for s in &self.stages[..count] {
            x = s.forward(&x, self.config.stage_gain)?;
        }
        x.ensure_finite("backbone forward")
    }

    pub fn forward_reid(&self, image: &Tensor) -> Result<FeatureMap> {
        Ok(FeatureMap {
            values: self.forward_stages(image, self.stages.len())?,
            source_image_id: String::new(),
        })
    }

    /// Output of the shared trunk consumed by Stream 2.
    pub fn shared_trunk(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_stages(image, self.config.shared_stage_count)
    }

    pub fn embed(&self, image: &Tensor, gem_p: f64) -> Result<Tensor> {
        ops::gem_pool(&self.forward_reid(image)?.values, gem_p)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), &s.weight));
            out.push((format!("stage{i}.bias"), &s.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn set_params(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        assign_params(&names, self.params_mut(), named)
    }

    /// Little-endian bytes of every parameter, for freeze checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.named_params().iter().flat_map(|(_, t)| t.to_le_bytes()).collect()
    }
}

pub(crate) fn assign_params(names: &[String], slots: Vec<&mut Tensor>, named: &[(String, Tensor)]) -> Result<()> {
    if named.len() != names.len() {
        return Err(Error::Format(format!(
            "expected {} parameters, found {}",
            names.len(),
            named.len()
        )));
    }
    for (slot, name) in slots.into_iter().zip(names) {
        let (_, t) = named
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("parameter `{name}` missing")))?;
        t.expect_shape(slot.shape())?;
        *slot = t.clone();
    }
    Ok(())
}

/// Stream-2 stages above the shared trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainableBackbone {
    pub shared_stage_count: usize,
    pub stages: Vec<ConvStage>,
}

impl ExplainableBackbone {
    /// Fresh seeded weights for the unshared stages.
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let s = config.shared_stage_count;
        let stages = (s..config.stages.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, 2, i));
                let spec = config.stages[i];
                ConvStage::init(config.in_channels(i), spec.out_channels, spec.stride, &mut rng)
            })
            .collect();
        Ok(ExplainableBackbone {
            shared_stage_count: s,
            stages,
        })
    }

    /// Unshared stages copied from the Stream-1 model.
    pub fn from_reid(model: &ReidModel) -> Self {
        let s = model.config.shared_stage_count;
        ExplainableBackbone {
            shared_stage_count: s,
            stages: model.stages[s..].to_vec(),
        }
    }

    /// Runs the unshared stages on a precomputed shared-trunk output.
    pub fn forward_from_trunk(&self, trunk: &Tensor, gain: f64) -> Result<Tensor> {
        let mut x = trunk.clone();
        for s in &self.stages {
            x = s.forward(&x, gain)?;
        }
        x.ensure_finite("explainable forward")
    }

    /// Stream-2 feature map: shared stages from `reid`, then the own stages.
    pub fn forward_explainable(&self, reid: &ReidModel, image: &Tensor) -> Result<FeatureMap> {
        if self.shared_stage_count != reid.config.shared_stage_count {
            return Err(Error::Config("shared stage count differs between streams".into()));
        }
        let trunk = reid.shared_trunk(image)?;
        Ok(FeatureMap {
            values: self.forward_from_trunk(&trunk, reid.config.stage_gain)?,
            source_image_id: String::new(),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (j, s) in self.stages.iter().enumerate() {
            let i = j + self.shared_stage_count;
            out.push((format!("stage{i}.weight"), &s.weight));
            out.push((format!("stage{i}.bias"), &s.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages
            .iter_mut()
            .flat_map(|s| [&mut s.weight, &mut s.bias])
            .collect()
    }
}
