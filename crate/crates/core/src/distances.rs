//! Stream-1 pairwise distances, per-attribute guided distances and their
//! decomposition.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adh::AttentionMaps;
use crate::attributes::{AttributeSchema, PairwiseAttributeVector};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::exec;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDecomposition {
    /// Stream-1 distance between the pooled feature maps.
    pub d: f64,
    /// Per-attribute guided distances.
    pub d_k: Vec<f64>,
    /// Decomposed distance, the sum of `d_k`.
    pub d_hat: f64,
    pub exclusive_indices: Vec<usize>,
    pub common_indices: Vec<usize>,
}

impl DistanceDecomposition {
    pub fn new(d: f64, d_k: Vec<f64>) -> Self {
        let d_hat = d_k.iter().sum();
        DistanceDecomposition {
            d,
            d_k,
            d_hat,
            exclusive_indices: Vec::new(),
            common_indices: Vec::new(),
        }
    }

    pub fn with_pair(mut self, pair: &PairwiseAttributeVector) -> Result<Self> {
        if pair.total() != self.d_k.len() {
            return Err(Error::SchemaMismatch {
                expected: self.d_k.len(),
                actual: pair.total(),
            });
        }
        self.exclusive_indices = pair.exclusive_indices.clone();
        self.common_indices = pair.common_indices.clone();
        Ok(self)
    }

    pub fn shares(&self) -> Vec<f64> {
        if self.d_hat > 0.0 {
            self.d_k.iter().map(|v| v / self.d_hat).collect()
        } else {
            vec![0.0; self.d_k.len()]
        }
    }

    /// Sum of shares over the exclusive attributes.
    pub fn exclusive_share(&self) -> f64 {
        if self.d_hat > 0.0 {
            self.exclusive_indices.iter().map(|&k| self.d_k[k]).sum::<f64>() / self.d_hat
        } else {
            0.0
        }
    }

    /// `|d - d_hat| / max(d, 1e-9)`.
    pub fn relative_gap(&self) -> f64 {
        (self.d - self.d_hat).abs() / self.d.max(1e-9)
    }

    /// `k,attribute_name,d_k,share[,exclusive]`; the exclusive column is
    /// emitted when `with_exclusive` is set.
    pub fn to_csv(&self, schema: &AttributeSchema, with_exclusive: bool) -> String {
        let mut s = String::from("k,attribute_name,d_k,share");
        if with_exclusive {
            s.push_str(",exclusive");
        }
        s.push('\n');
        let shares = self.shares();
        for (k, (dk, share)) in self.d_k.iter().zip(&shares).enumerate() {
            let _ = write!(s, "{k},{},{dk},{share}", schema.binary_name(k));
            if with_exclusive {
                let ex = self.exclusive_indices.binary_search(&k).is_ok();
                let _ = write!(s, ",{}", u8::from(ex));
            }
            s.push('\n');
        }
        s
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn pairwise_distance(f_i: &Tensor, f_j: &Tensor) -> Result<f64> {
    f_j.expect_shape(f_i.shape())?;
    Ok(euclidean(f_i.data(), f_j.data()))
}

/// Row-wise distances between two `[M,C]` pooled attribute tensors.
pub fn row_distances(p_i: &Tensor, p_j: &Tensor) -> Result<Vec<f64>> {
    p_i.expect_rank(2)?;
    p_j.expect_shape(p_i.shape())?;
    let c = p_i.shape()[1];
    Ok(p_i
        .data()
        .chunks_exact(c)
        .zip(p_j.data().chunks_exact(c))
        .map(|(a, b)| euclidean(a, b))
        .collect())
}

/// Masks each feature map by its own image's attention, pools every
/// attribute-guided map with GeM and measures per-attribute distances.
/// `d` is the distance between the GeM-pooled unmasked feature maps.
pub fn attribute_distances(
    f_i: &FeatureMap,
    f_j: &FeatureMap,
    a_i: &AttentionMaps,
    a_j: &AttentionMaps,
    p: f64,
) -> Result<DistanceDecomposition> {
    f_j.values.expect_shape(f_i.values.shape())?;
    a_j.values.expect_shape(a_i.values.shape())?;
    let pi = ops::attribute_pool(&f_i.values, &a_i.values, p)?;
    let pj = ops::attribute_pool(&f_j.values, &a_j.values, p)?;
    let d = pairwise_distance(&ops::gem_pool(&f_i.values, p)?, &ops::gem_pool(&f_j.values, p)?)?;
    Ok(DistanceDecomposition::new(d, row_distances(&pi, &pj)?))
}

/// Query-by-gallery Euclidean distances, rows computed in parallel.
pub fn distance_matrix(queries: &[Tensor], gallery: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    exec::try_map(queries, |q| {
        gallery.iter().map(|g| pairwise_distance(q, g)).collect::<Result<Vec<_>>>()
    })
}

pub fn distance_matrix_csv(query_ids: &[String], gallery_ids: &[String], dist: &[Vec<f64>]) -> String {
    let mut s = String::from("query_id");
    for g in gallery_ids {
        s.push(',');
        s.push_str(g);
    }
    s.push('\n');
    for (q, row) in query_ids.iter().zip(dist) {
        s.push_str(q);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
