//! Attribute decompose head: `conv3x3(C -> C/8) -> ReLU -> conv1x1(C/8 -> M) -> delta`,
//! producing one strictly positive attention map per binary attribute.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSchema;
use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::ops::{self, ActivationParams, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub values: Tensor,
}

impl AttentionMaps {
    pub fn count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn map(&self, k: usize) -> Tensor {
        self.values.slice_first(k)
    }

    /// Spatial mean of each map.
    pub fn mean_activations(&self) -> Vec<f64> {
        let hw: usize = self.values.shape()[1..].iter().product();
        self.values
            .data()
            .chunks_exact(hw)
            .map(|m| m.iter().sum::<f64>() / hw as f64)
            .collect()
    }

    /// `k,attribute_name,mean_activation` summary.
    pub fn summary_csv(&self, schema: &AttributeSchema) -> String {
        let mut s = String::from("k,attribute_name,mean_activation\n");
        for (k, m) in self.mean_activations().iter().enumerate() {
            let _ = writeln!(s, "{k},{},{m}", schema.binary_name(k));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.values.save(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdhConfig {
    /// Input channels C (must be divisible by 8).
    pub channels: usize,
    /// Number of attention maps M.
    pub attributes: usize,
    pub activation: ActivationParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdhParams {
    pub config: AdhConfig,
    pub reduce_weight: Tensor,
    pub reduce_bias: Tensor,
    pub expand_weight: Tensor,
    pub expand_bias: Tensor,
}

impl AdhParams {
    fn check(config: &AdhConfig) -> Result<()> {
        if config.channels == 0 || !config.channels.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "ADH input channels {} not divisible by 8",
                config.channels
            )));
        }
        if config.attributes == 0 {
            return Err(Error::Config("ADH needs at least one attribute".into()));
        }
        Ok(())
    }

    /// Seeded uniform weights. The output bias starts where every map equals
    /// `1/M`, so attention initially partitions the feature map evenly.
    pub fn new(config: AdhConfig) -> Result<Self> {
        Self::check(&config)?;
        let (c, r, m) = (config.channels, config.channels / 8, config.attributes);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::splitmix64(config.seed ^ 0xad4));
        let b1 = (1.0 / (c * 9) as f64).sqrt();
        let w1 = (0..r * c * 9).map(|_| rng.gen_range(-b1..b1)).collect();
        let b2 = (1.0 / r as f64).sqrt();
        let w2 = (0..m * r).map(|_| rng.gen_range(-b2..b2)).collect();
        let neutral = config.activation.inverse_nonpositive(1.0 / m as f64);
        Ok(AdhParams {
            reduce_weight: Tensor::new(vec![r, c, 3, 3], w1)?,
            reduce_bias: Tensor::zeros(&[r]),
            expand_weight: Tensor::new(vec![m, r, 1, 1], w2)?,
            expand_bias: Tensor::full(&[m], neutral),
            config,
        })
    }

    pub fn zeros(config: AdhConfig) -> Result<Self> {
        Self::check(&config)?;
        let (c, r, m) = (config.channels, config.channels / 8, config.attributes);
        Ok(AdhParams {
            reduce_weight: Tensor::zeros(&[r, c, 3, 3]),
            reduce_bias: Tensor::zeros(&[r]),
            expand_weight: Tensor::zeros(&[m, r, 1, 1]),
            expand_bias: Tensor::zeros(&[m]),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("adh.reduce.weight".into(), &self.reduce_weight),
            ("adh.reduce.bias".into(), &self.reduce_bias),
            ("adh.expand.weight".into(), &self.expand_weight),
            ("adh.expand.bias".into(), &self.expand_bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.reduce_weight,
            &mut self.reduce_bias,
            &mut self.expand_weight,
            &mut self.expand_bias,
        ]
    }

    fn check_input(&self, f: &Tensor) -> Result<()> {
        f.expect_rank(3)?;
        if !f.shape()[0].is_multiple_of(8) {
            return Err(Error::Config(format!("feature channels {} not divisible by 8", f.shape()[0])));
        }
        if f.shape()[0] != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "ADH expects {} channels, got {}",
                self.config.channels,
                f.shape()[0]
            )));
        }
        Ok(())
    }

    /// Records the head on a tape; returns the attention var and the four
    /// parameter vars in [`AdhParams::named_params`] order.
    pub fn trace(&self, g: &mut Graph, features: Var) -> Result<(Var, [Var; 4])> {
        self.check_input(g.value(features))?;
        let p = [
            g.param(self.reduce_weight.clone()),
            g.param(self.reduce_bias.clone()),
            g.param(self.expand_weight.clone()),
            g.param(self.expand_bias.clone()),
        ];
        let h = g.conv2d(features, p[0], Some(p[1]), ConvGeometry::new(1, 1))?;
        let h = g.relu(h)?;
        let z = g.conv2d(h, p[2], Some(p[3]), ConvGeometry::new(1, 0))?;
        Ok((g.delta(z, self.config.activation)?, p))
    }
}

pub fn adh_forward(features: &FeatureMap, params: &AdhParams) -> Result<AttentionMaps> {
    let f = &features.values;
    params.check_input(f)?;
    let h = ops::conv2d(f, &params.reduce_weight, Some(&params.reduce_bias), ConvGeometry::new(1, 1))?
        .map(|v| v.max(0.0));
    let z = ops::conv2d(&h, &params.expand_weight, Some(&params.expand_bias), ConvGeometry::new(1, 0))?;
    Ok(AttentionMaps {
        values: ops::delta_activation(&z, &params.config.activation)?,
    })
}

/// `F^k = F ⊗ A^k` for every attribute map.
pub fn attribute_feature_maps(features: &FeatureMap, attention: &AttentionMaps) -> Result<Vec<Tensor>> {
    ops::attribute_feature_maps(&features.values, &attention.values)
}
