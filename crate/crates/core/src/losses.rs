//! Training objectives.
//!
//! Stream 2 minimises `L = L_d + alpha * L_p1 + beta * L_p2` per image pair,
//! where `L_d = |d - sum_k d_k|` distils the Stream-1 distance into the
//! per-attribute distances and the two prior terms are hinges on the shares
//! `d_k / d_hat` split into exclusive (XOR = 1) and common attributes. With
//! `r = (M_E / M)^v`:
//!
//! ```text
//! L_p1 = max(0, r - sum_e s_e) + max(0, sum_c s_c - 1 + r)
//! L_p2 = sum_e max(0, e^-lambda * r / M_E - s_e)
//!      + sum_c max(0, s_c - e^lambda * (1 - r) / (M - M_E))
//! lambda = 1/2 ln((M - M_E * r) / (M_E * (1 - r)))
//! ```
//!
//! Stream 1 uses identity cross-entropy plus a batch-hard triplet loss.

use serde::{Deserialize, Serialize};

use crate::attributes::PairwiseAttributeVector;
use crate::autodiff::{Graph, Var};
use crate::distances::DistanceDecomposition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaVariant {
    /// `1/2 ln((M - M_E r) / (M_E (1 - r)))`, the printed form.
    #[default]
    AsPrinted,
    /// `1/2 ln((M - M_E) r / (M_E (1 - r)))`: equalises the exclusive lower
    /// bound and the common upper bound of the per-attribute hinges.
    Balanced,
}

impl std::str::FromStr for LambdaVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "as-printed" => Ok(LambdaVariant::AsPrinted),
            "balanced" => Ok(LambdaVariant::Balanced),
            other => Err(format!("unknown lambda variant `{other}` (expected as-printed or balanced)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub v: f64,
    pub margin: f64,
    pub lambda_variant: LambdaVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            v: 0.5,
            margin: 0.3,
            lambda_variant: LambdaVariant::AsPrinted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v > 0.0 && self.v < 1.0) {
            return Err(Error::InvalidParam(format!("v must lie in (0,1), got {}", self.v)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParam("alpha and beta must be finite and >= 0".into()));
        }
        if !self.margin.is_finite() {
            return Err(Error::InvalidParam("margin must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_d: f64,
    pub l_p1: f64,
    pub l_p2: f64,
    pub lambda: Option<f64>,
    /// Prior terms skipped: `M_E` is 0 or `M`, or `d_hat` is 0.
    pub degenerate: bool,
}

pub fn metric_distillation(d: f64, d_k: &[f64]) -> f64 {
    (d - d_k.iter().sum::<f64>()).abs()
}

fn check_split(m: usize, m_e: usize) -> Result<()> {
    if m_e == 0 || m_e >= m {
        return Err(Error::DegeneratePair { exclusive: m_e, total: m });
    }
    Ok(())
}

fn exclusive_ratio(m: usize, m_e: usize, v: f64) -> f64 {
    (m_e as f64 / m as f64).powf(v)
}

pub fn lambda_weight(m: usize, m_e: usize, v: f64) -> Result<f64> {
    lambda_weight_variant(m, m_e, v, LambdaVariant::AsPrinted)
}

pub fn lambda_weight_variant(m: usize, m_e: usize, v: f64, variant: LambdaVariant) -> Result<f64> {
    check_split(m, m_e)?;
    let r = exclusive_ratio(m, m_e, v);
    let (mf, ef) = (m as f64, m_e as f64);
    let num = match variant {
        LambdaVariant::AsPrinted => mf - ef * r,
        LambdaVariant::Balanced => (mf - ef) * r,
    };
    Ok(0.5 * (num / (ef * (1.0 - r))).ln())
}

struct Prior {
    value: f64,
    grad: Vec<f64>,
}

fn check_prior_inputs(decomp: &DistanceDecomposition, m: usize, m_e: usize) -> Result<()> {
    if decomp.d_k.len() != m {
        return Err(Error::SchemaMismatch {
            expected: m,
            actual: decomp.d_k.len(),
        });
    }
    if decomp.exclusive_indices.len() != m_e || decomp.exclusive_indices.len() + decomp.common_indices.len() != m {
        return Err(Error::InvalidParam(format!(
            "decomposition carries {} exclusive / {} common indices for M = {m}, M_E = {m_e}",
            decomp.exclusive_indices.len(),
            decomp.common_indices.len()
        )));
    }
    check_split(m, m_e)?;
    if decomp.d_hat <= 0.0 {
        return Err(Error::ZeroDistance);
    }
    Ok(())
}

/// d(share_j)/d(d_k) = (1[j == k] - share_j) / d_hat, accumulated with `sign`.
fn add_share_grad(grad: &mut [f64], j: usize, share: f64, d_hat: f64, sign: f64) {
    for g in grad.iter_mut() {
        *g -= sign * share / d_hat;
    }
    grad[j] += sign / d_hat;
}

fn prior_p1(decomp: &DistanceDecomposition, m: usize, m_e: usize, v: f64) -> Result<Prior> {
    check_prior_inputs(decomp, m, m_e)?;
    let r = exclusive_ratio(m, m_e, v);
    let dh = decomp.d_hat;
    let s_e: f64 = decomp.exclusive_indices.iter().map(|&k| decomp.d_k[k]).sum::<f64>() / dh;
    let s_c: f64 = decomp.common_indices.iter().map(|&k| decomp.d_k[k]).sum::<f64>() / dh;
    let h1 = r - s_e;
    let h2 = s_c - 1.0 + r;
    let mut grad = vec![0.0; m];
    if h1 > 0.0 {
        for &e in &decomp.exclusive_indices {
            add_share_grad(&mut grad, e, decomp.d_k[e] / dh, dh, -1.0);
        }
    }
    if h2 > 0.0 {
        for &c in &decomp.common_indices {
            add_share_grad(&mut grad, c, decomp.d_k[c] / dh, dh, 1.0);
        }
    }
    Ok(Prior {
        value: h1.max(0.0) + h2.max(0.0),
        grad,
    })
}

fn prior_p2(decomp: &DistanceDecomposition, m: usize, m_e: usize, v: f64, lambda: f64) -> Result<Prior> {
    check_prior_inputs(decomp, m, m_e)?;
    let r = exclusive_ratio(m, m_e, v);
    let dh = decomp.d_hat;
    let lower = (-lambda).exp() * r / m_e as f64;
    let upper = lambda.exp() * (1.0 - r) / (m - m_e) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; m];
    for &e in &decomp.exclusive_indices {
        let s = decomp.d_k[e] / dh;
        if lower - s > 0.0 {
            value += lower - s;
            add_share_grad(&mut grad, e, s, dh, -1.0);
        }
    }
    for &c in &decomp.common_indices {
        let s = decomp.d_k[c] / dh;
        if s - upper > 0.0 {
            value += s - upper;
            add_share_grad(&mut grad, c, s, dh, 1.0);
        }
    }
    Ok(Prior { value, grad })
}

/// First attribute prior term; `decomp` must carry the exclusive/common split.
pub fn prior_loss_p1(decomp: &DistanceDecomposition, m: usize, m_e: usize, v: f64) -> Result<f64> {
    Ok(prior_p1(decomp, m, m_e, v)?.value)
}

/// Second attribute prior term with the as-printed lambda.
pub fn prior_loss_p2(decomp: &DistanceDecomposition, m: usize, m_e: usize, v: f64) -> Result<f64> {
    let lambda = lambda_weight(m, m_e, v)?;
    Ok(prior_p2(decomp, m, m_e, v, lambda)?.value)
}

/// Combined objective and its gradient with respect to every `d_k`.
///
/// Degenerate pairs (`M_E` of 0 or `M`, or zero decomposed distance) keep
/// only the distillation term. Prior terms whose weight is zero are not
/// evaluated and report 0.
pub fn total_loss_with_grad(
    d: f64,
    d_k: &[f64],
    pair: &PairwiseAttributeVector,
    config: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let m = d_k.len();
    if pair.total() != m {
        return Err(Error::SchemaMismatch {
            expected: m,
            actual: pair.total(),
        });
    }
    let decomp = DistanceDecomposition::new(d, d_k.to_vec()).with_pair(pair)?;
    let l_d = metric_distillation(d, d_k);
    let gap = d - decomp.d_hat;
    let sign = if gap > 0.0 {
        -1.0
    } else if gap < 0.0 {
        1.0
    } else {
        0.0
    };
    let mut grad = vec![sign; m];
    let m_e = pair.exclusive_count;
    let degenerate = pair.is_degenerate() || decomp.d_hat <= 0.0;
    let mut out = LossBreakdown {
        total: l_d,
        l_d,
        l_p1: 0.0,
        l_p2: 0.0,
        lambda: None,
        degenerate,
    };
    if degenerate {
        return Ok((out, grad));
    }
    let lambda = lambda_weight_variant(m, m_e, config.v, config.lambda_variant)?;
    out.lambda = Some(lambda);
    if config.alpha != 0.0 {
        let p1 = prior_p1(&decomp, m, m_e, config.v)?;
        out.l_p1 = p1.value;
        for (g, pg) in grad.iter_mut().zip(&p1.grad) {
            *g += config.alpha * pg;
        }
    }
    if config.beta != 0.0 {
        let p2 = prior_p2(&decomp, m, m_e, config.v, lambda)?;
        out.l_p2 = p2.value;
        for (g, pg) in grad.iter_mut().zip(&p2.grad) {
            *g += config.beta * pg;
        }
    }
    out.total = out.l_d + config.alpha * out.l_p1 + config.beta * out.l_p2;
    Ok((out, grad))
}

pub fn total_loss(d: f64, d_k: &[f64], pair: &PairwiseAttributeVector, config: &LossConfig) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(d, d_k, pair, config)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stream1Loss {
    pub total: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
}

pub struct Stream1Trace {
    pub total: Var,
    pub cross_entropy: Var,
    pub triplet: Var,
}

fn check_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let usable = counts.values().filter(|&&c| c >= 2).count();
    if counts.len() < 2 || usable < 2 {
        return Err(Error::BatchTooSmall(format!(
            "need >= 2 identities with >= 2 images each, got counts {:?}",
            counts.values().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Mean identity cross-entropy plus mean batch-hard triplet loss, recorded on
/// the tape so gradients reach embeddings and logits.
pub fn trace_stream1_loss(
    g: &mut Graph,
    embeddings: &[Var],
    logits: &[Var],
    labels: &[usize],
    margin: f64,
) -> Result<Stream1Trace> {
    if embeddings.len() != labels.len() || logits.len() != labels.len() {
        return Err(Error::ShapeMismatch("batch components differ in length".into()));
    }
    check_batch(labels)?;
    let n = labels.len();
    let ce_terms = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| g.cross_entropy(l, y))
        .collect::<Result<Vec<_>>>()?;
    let ce = g.stack(&ce_terms)?;
    let ce = g.sum(ce)?;
    let ce = g.scale(ce, 1.0 / n as f64)?;

    let mut dist = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = g.distance(embeddings[i], embeddings[j])?;
            dist[i][j] = Some(d);
            dist[j][i] = Some(d);
        }
    }
    let mut hinges = Vec::new();
    for a in 0..n {
        let pick = |want_same: bool, hardest_is_max: bool| {
            let mut best: Option<(f64, Var)> = None;
            for b in 0..n {
                if b == a || (labels[b] == labels[a]) != want_same {
                    continue;
                }
                let v = dist[a][b].unwrap();
                let val = g.value(v).item();
                let better = match best {
                    None => true,
                    Some((bv, _)) => {
                        if hardest_is_max {
                            val > bv
                        } else {
                            val < bv
                        }
                    }
                };
                if better {
                    best = Some((val, v));
                }
            }
            best.map(|(_, v)| v)
        };
        let (Some(pos), Some(neg)) = (pick(true, true), pick(false, false)) else {
            continue;
        };
        let h = g.sub(pos, neg)?;
        let h = g.add_scalar(h, margin)?;
        hinges.push(g.relu(h)?);
    }
    let tri = g.stack(&hinges)?;
    let tri = g.sum(tri)?;
    let tri = g.scale(tri, 1.0 / hinges.len() as f64)?;
    let total = g.add(ce, tri)?;
    Ok(Stream1Trace {
        total,
        cross_entropy: ce,
        triplet: tri,
    })
}

pub fn stream1_loss(embeddings: &[Tensor], labels: &[usize], logits: &[Tensor], margin: f64) -> Result<Stream1Loss> {
    let mut g = Graph::new();
    let e: Vec<Var> = embeddings.iter().map(|t| g.constant(t.clone())).collect();
    let l: Vec<Var> = logits.iter().map(|t| g.constant(t.clone())).collect();
    let t = trace_stream1_loss(&mut g, &e, &l, labels, margin)?;
    Ok(Stream1Loss {
        total: g.value(t.total).item(),
        cross_entropy: g.value(t.cross_entropy).item(),
        triplet: g.value(t.triplet).item(),
    })
}
