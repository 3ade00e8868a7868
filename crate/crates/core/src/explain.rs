//! The Stream-2 model with its checkpoints, cached frozen Stream-1 features
//! and per-pair distance explanations.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adh::{AdhConfig, AdhParams, AttentionMaps};
use crate::attributes::{pairwise_xor, AttributeSchema, AttributeVector, PairwiseAttributeVector};
use crate::autodiff::{Graph, Var};
use crate::backbone::{assign_params, BackboneConfig, ExplainableBackbone, ReidModel};
use crate::checkpoint;
use crate::distances::{pairwise_distance, row_distances, DistanceDecomposition};
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::metric_distillation;
use crate::ops::{self, ActivationParams};
use crate::tensor::Tensor;

pub const STREAM1_KIND: &str = "stream1";
pub const STREAM2_KIND: &str = "stream2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidCheckpointConfig {
    pub backbone: BackboneConfig,
    pub gem_p: f64,
}

pub fn save_reid(dir: &Path, model: &ReidModel, gem_p: f64) -> Result<()> {
    let cfg = ReidCheckpointConfig {
        backbone: model.config.clone(),
        gem_p,
    };
    checkpoint::save(dir, STREAM1_KIND, &cfg, &model.named_params())
}

/// Loads a Stream-1 checkpoint; returns the model and its GeM exponent.
pub fn load_reid(dir: &Path) -> Result<(ReidModel, f64)> {
    let (cfg, params): (ReidCheckpointConfig, _) = checkpoint::load(dir, STREAM1_KIND)?;
    let mut model = ReidModel::new(cfg.backbone)?;
    model.set_params(&params)?;
    Ok((model, cfg.gem_p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainableCheckpointConfig {
    pub adh: AdhConfig,
    pub shared_stage_count: usize,
    pub strides: Vec<usize>,
}

/// Stream 2: the unshared backbone stages plus the attribute head.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainableModel {
    pub backbone: ExplainableBackbone,
    pub adh: AdhParams,
}

impl ExplainableModel {
    /// Unshared stages start from the Stream-1 weights; the head is fresh.
    pub fn new(reid: &ReidModel, attributes: usize, activation: ActivationParams, seed: u64) -> Result<Self> {
        let adh = AdhParams::new(AdhConfig {
            channels: reid.config.channels(),
            attributes,
            activation,
            seed,
        })?;
        Ok(ExplainableModel {
            backbone: ExplainableBackbone::from_reid(reid),
            adh,
        })
    }

    pub fn attributes(&self) -> usize {
        self.adh.config.attributes
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_params();
        out.extend(self.adh.named_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.extend(self.adh.params_mut());
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.named_params().iter().flat_map(|(_, t)| t.to_le_bytes()).collect()
    }

    fn check_reid(&self, reid: &ReidModel) -> Result<()> {
        if self.backbone.shared_stage_count != reid.config.shared_stage_count {
            return Err(Error::Config("shared stage count differs between streams".into()));
        }
        Ok(())
    }

    /// Attention maps from a precomputed shared-trunk output.
    pub fn attention_from_trunk(&self, trunk: &Tensor, gain: f64) -> Result<AttentionMaps> {
        let f = self.backbone.forward_from_trunk(trunk, gain)?;
        crate::adh::adh_forward(
            &crate::backbone::FeatureMap {
                values: f,
                source_image_id: String::new(),
            },
            &self.adh,
        )
    }

    pub fn attention(&self, reid: &ReidModel, image: &Tensor) -> Result<AttentionMaps> {
        self.check_reid(reid)?;
        self.attention_from_trunk(&reid.shared_trunk(image)?, reid.config.stage_gain)
    }

    /// `[M,C]` GeM-pooled attribute-guided features of one image.
    pub fn pooled(&self, trunk: &Tensor, features: &Tensor, gain: f64, gem_p: f64) -> Result<Tensor> {
        let a = self.attention_from_trunk(trunk, gain)?;
        ops::attribute_pool(features, &a.values, gem_p)
    }

    /// Records the pooled attribute features of one image on a tape.
    /// Returns the `[M,C]` var and parameter vars in [`Self::named_params`]
    /// order.
    pub fn trace(&self, g: &mut Graph, trunk: &Tensor, features: &Tensor, gain: f64, gem_p: f64) -> Result<(Var, Vec<Var>)> {
        let mut x = g.constant(trunk.clone());
        let mut params = Vec::new();
        for s in &self.backbone.stages {
            let (y, w, b) = s.trace(g, x, gain, true)?;
            params.push(w);
            params.push(b);
            x = y;
        }
        let (a, head) = self.adh.trace(g, x)?;
        params.extend(head);
        let f = g.constant(features.clone());
        Ok((g.attribute_pool(f, a, gem_p)?, params))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = ExplainableCheckpointConfig {
            adh: self.adh.config,
            shared_stage_count: self.backbone.shared_stage_count,
            strides: self.backbone.stages.iter().map(|s| s.stride).collect(),
        };
        checkpoint::save(dir, STREAM2_KIND, &cfg, &self.named_params())
    }

    pub fn load(dir: &Path, reid: &ReidModel) -> Result<Self> {
        let (cfg, params): (ExplainableCheckpointConfig, Vec<(String, Tensor)>) = checkpoint::load(dir, STREAM2_KIND)?;
        let mut model = ExplainableModel {
            backbone: ExplainableBackbone::from_reid(reid),
            adh: AdhParams::zeros(cfg.adh)?,
        };
        if model.backbone.shared_stage_count != cfg.shared_stage_count {
            return Err(Error::Format("stream-2 checkpoint disagrees with stream-1 shared stages".into()));
        }
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        assign_params(&names, model.params_mut(), &params)?;
        model.check_reid(reid)?;
        Ok(model)
    }
}

/// Stream-1 outputs per image: shared trunk, final feature map and its
/// GeM embedding. Stream 1 is frozen during Stream 2, so these are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    pub trunk: Vec<Tensor>,
    pub features: Vec<Tensor>,
    pub embeddings: Vec<Tensor>,
}

impl FrozenFeatures {
    pub fn compute(reid: &ReidModel, images: &[Tensor], gem_p: f64) -> Result<Self> {
        let s = reid.config.shared_stage_count;
        let gain = reid.config.stage_gain;
        let rows = exec::try_map(images, |img| -> Result<(Tensor, Tensor, Tensor)> {
            let trunk = reid.forward_stages(img, s)?;
            let mut f = trunk.clone();
            for st in &reid.stages[s..] {
                f = st.forward(&f, gain)?;
            }
            let e = ops::gem_pool(&f, gem_p)?;
            Ok((trunk, f, e))
        })?;
        let mut out = FrozenFeatures {
            trunk: Vec::with_capacity(rows.len()),
            features: Vec::with_capacity(rows.len()),
            embeddings: Vec::with_capacity(rows.len()),
        };
        for (t, f, e) in rows {
            out.trunk.push(t);
            out.features.push(f);
            out.embeddings.push(e);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.trunk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trunk.is_empty()
    }

    /// Pooled attribute features of every image under `model`.
    pub fn pooled(&self, model: &ExplainableModel, gain: f64, gem_p: f64) -> Result<Vec<Tensor>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        exec::try_map(&idx, |&i| model.pooled(&self.trunk[i], &self.features[i], gain, gem_p))
    }

    /// Distance decomposition of a pair given pooled attribute features.
    pub fn decompose(&self, pooled: &[Tensor], i: usize, j: usize) -> Result<DistanceDecomposition> {
        let d = pairwise_distance(&self.embeddings[i], &self.embeddings[j])?;
        Ok(DistanceDecomposition::new(d, row_distances(&pooled[i], &pooled[j])?))
    }
}

/// Per-attribute account of one pair's distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub decomposition: DistanceDecomposition,
    pub pair: PairwiseAttributeVector,
    pub attention: [AttentionMaps; 2],
    pub l_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationSummary {
    pub d: f64,
    pub d_hat: f64,
    pub l_d: f64,
    pub exclusive_count: usize,
    pub attribute_count: usize,
    pub exclusive_share: f64,
    pub degenerate: bool,
}

impl Explanation {
    /// True when the decomposed distance is zero and shares are undefined.
    pub fn is_degenerate(&self) -> bool {
        self.decomposition.d_hat <= 0.0
    }

    /// `k,attribute_name,d_k,share,exclusive,degenerate`, one row per
    /// binary attribute. Undefined shares are written as 0.
    pub fn shares_csv(&self, schema: &AttributeSchema) -> String {
        let mut s = String::from("k,attribute_name,d_k,share,exclusive,degenerate\n");
        let shares = self.decomposition.shares();
        let deg = u8::from(self.is_degenerate());
        for (k, (dk, share)) in self.decomposition.d_k.iter().zip(&shares).enumerate() {
            let ex = u8::from(self.pair.is_exclusive(k));
            let _ = writeln!(s, "{k},{},{dk},{share},{ex},{deg}", schema.binary_name(k));
        }
        s
    }

    pub fn summary(&self) -> ExplanationSummary {
        ExplanationSummary {
            d: self.decomposition.d,
            d_hat: self.decomposition.d_hat,
            l_d: self.l_d,
            exclusive_count: self.pair.exclusive_count,
            attribute_count: self.pair.total(),
            exclusive_share: self.decomposition.exclusive_share(),
            degenerate: self.is_degenerate(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn explain_pair(
    reid: &ReidModel,
    model: &ExplainableModel,
    gem_p: f64,
    image_i: &Tensor,
    image_j: &Tensor,
    attrs_i: &AttributeVector,
    attrs_j: &AttributeVector,
) -> Result<Explanation> {
    let pair = pairwise_xor(attrs_i, attrs_j)?;
    if pair.total() != model.attributes() {
        return Err(Error::SchemaMismatch {
            expected: model.attributes(),
            actual: pair.total(),
        });
    }
    let frozen = FrozenFeatures::compute(reid, &[image_i.clone(), image_j.clone()], gem_p)?;
    let gain = reid.config.stage_gain;
    let a_i = model.attention_from_trunk(&frozen.trunk[0], gain)?;
    let a_j = model.attention_from_trunk(&frozen.trunk[1], gain)?;
    let p_i = ops::attribute_pool(&frozen.features[0], &a_i.values, gem_p)?;
    let p_j = ops::attribute_pool(&frozen.features[1], &a_j.values, gem_p)?;
    let decomposition = frozen.decompose(&[p_i, p_j], 0, 1)?.with_pair(&pair)?;
    let l_d = metric_distillation(decomposition.d, &decomposition.d_k);
    Ok(Explanation {
        decomposition,
        pair,
        attention: [a_i, a_j],
        l_d,
    })
}
