//! End-to-end helpers shared by the command line and the acceptance suite:
//! retrieval evaluation of a Stream-1 model and held-out distance
//! decomposition statistics of a Stream-2 model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attributes::{pairwise_xor, AttributeVector, PairwiseAttributeVector};
use crate::backbone::ReidModel;
use crate::data::{DatasetManifest, Platform, Split};
use crate::distances::{distance_matrix, DistanceDecomposition};
use crate::error::Result;
use crate::evaluation::{evaluate, evaluate_oracle, Direction, EvalItem, EvalReport, GalleryMode};
use crate::exec;
use crate::explain::{ExplainableModel, FrozenFeatures};
use crate::tensor::Tensor;

pub fn eval_items(manifest: &DatasetManifest, indices: &[usize]) -> Vec<EvalItem> {
    indices
        .iter()
        .map(|&i| {
            let r = &manifest.records[i];
            EvalItem {
                person_id: r.person_id,
                platform: r.platform,
                camera_id: r.camera_id,
            }
        })
        .collect()
}

/// GeM embeddings of `images` under Stream 1.
pub fn embed_all(reid: &ReidModel, images: &[&Tensor], gem_p: f64) -> Result<Vec<Tensor>> {
    exec::try_map(images, |img| reid.embed(img, gem_p))
}

/// Retrieval report on the split's query and gallery sets. `images` is
/// indexed by manifest record. With `oracle`, the brute-force evaluator
/// is run as well and returned alongside.
#[allow(clippy::too_many_arguments)]
pub fn retrieval_report(
    reid: &ReidModel,
    gem_p: f64,
    manifest: &DatasetManifest,
    split: &Split,
    images: &[Tensor],
    direction: Direction,
    mode: GalleryMode,
    oracle: bool,
) -> Result<(EvalReport, Option<EvalReport>)> {
    let q_imgs: Vec<&Tensor> = split.query_images.iter().map(|&i| &images[i]).collect();
    let g_imgs: Vec<&Tensor> = split.gallery_images.iter().map(|&i| &images[i]).collect();
    let q = embed_all(reid, &q_imgs, gem_p)?;
    let g = embed_all(reid, &g_imgs, gem_p)?;
    let dist = distance_matrix(&q, &g)?;
    let qi = eval_items(manifest, &split.query_images);
    let gi = eval_items(manifest, &split.gallery_images);
    let report = evaluate(&qi, &gi, &dist, direction, mode)?;
    let check = if oracle {
        Some(evaluate_oracle(&qi, &gi, &dist, direction, mode)?)
    } else {
        None
    };
    Ok((report, check))
}

/// One held-out pair measured by Stream 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub i: usize,
    pub j: usize,
    pub cross_platform: bool,
    pub decomposition: DistanceDecomposition,
    pub pair: PairwiseAttributeVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionStats {
    pub pairs: usize,
    /// Mean of `|d - d_hat| / max(d, 1e-9)` over all measured pairs.
    pub mean_relative_gap: f64,
    /// Cross-platform pairs with `0 < M_E < M`.
    pub eligible_pairs: usize,
    /// Fraction of eligible pairs whose exclusive share exceeds `M_E / M`.
    pub exclusive_dominance: f64,
    /// Mean exclusive share and mean `M_E / M` over eligible pairs.
    pub mean_exclusive_share: f64,
    pub mean_exclusive_fraction: f64,
}

/// Decomposes every aerial-ground pair of the given images.
pub fn cross_platform_pairs(
    reid: &ReidModel,
    model: &ExplainableModel,
    gem_p: f64,
    images: &[Tensor],
    platforms: &[Platform],
    attributes: &[AttributeVector],
) -> Result<Vec<PairRecord>> {
    let frozen = FrozenFeatures::compute(reid, images, gem_p)?;
    let pooled = frozen.pooled(model, reid.config.stage_gain, gem_p)?;
    let mut index = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            if platforms[i] != platforms[j] {
                index.push((i, j));
            }
        }
    }
    exec::try_map(&index, |&(i, j)| -> Result<PairRecord> {
        let pair = pairwise_xor(&attributes[i], &attributes[j])?;
        Ok(PairRecord {
            i,
            j,
            cross_platform: true,
            decomposition: frozen.decompose(&pooled, i, j)?.with_pair(&pair)?,
            pair,
        })
    })
}

pub fn decomposition_stats(records: &[PairRecord]) -> DecompositionStats {
    let n = records.len().max(1) as f64;
    let gap = records.iter().map(|r| r.decomposition.relative_gap()).sum::<f64>() / n;
    let eligible: Vec<&PairRecord> = records
        .iter()
        .filter(|r| r.cross_platform && !r.pair.is_degenerate() && r.decomposition.d_hat > 0.0)
        .collect();
    let e = eligible.len().max(1) as f64;
    let frac = |r: &PairRecord| r.pair.exclusive_count as f64 / r.pair.total() as f64;
    let dominant = eligible.iter().filter(|r| r.decomposition.exclusive_share() > frac(r)).count();
    DecompositionStats {
        pairs: records.len(),
        mean_relative_gap: gap,
        eligible_pairs: eligible.len(),
        exclusive_dominance: dominant as f64 / e,
        mean_exclusive_share: eligible.iter().map(|r| r.decomposition.exclusive_share()).sum::<f64>() / e,
        mean_exclusive_fraction: eligible.iter().map(|r| frac(r)).sum::<f64>() / e,
    }
}

impl DecompositionStats {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "held-out pairs: {}", self.pairs);
        let _ = writeln!(s, "mean |d - sum d_k| / d: {:.4}", self.mean_relative_gap);
        let _ = writeln!(s, "pairs with 0 < M_E < M: {}", self.eligible_pairs);
        let _ = writeln!(s, "exclusive share above M_E/M: {:.4}", self.exclusive_dominance);
        let _ = writeln!(
            s,
            "mean exclusive share {:.4} vs mean M_E/M {:.4}",
            self.mean_exclusive_share, self.mean_exclusive_fraction
        );
        s
    }
}
