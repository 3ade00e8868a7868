//! Two-phase training: Stream 1 learns identities, then Stream 2 learns the
//! attribute decomposition of Stream-1 distances with Stream 1 frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{pairwise_xor, AttributeVector};
use crate::autodiff::{Graph, Var};
use crate::backbone::ReidModel;
use crate::data::{splitmix64, DatasetManifest, Platform};
use crate::distances::row_distances;
use crate::error::{Error, Result};
use crate::exec;
use crate::explain::{save_reid, ExplainableModel, FrozenFeatures};
use crate::losses::{total_loss_with_grad, trace_stream1_loss, LossBreakdown, LossConfig, Stream1Loss};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tensor::Tensor;

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const STREAM1_HEADER: &str = "epoch,loss,cross_entropy,triplet";
pub const STREAM2_HEADER: &str = "epoch,L_total,L_d,L_p1,L_p2,degenerate_pair_fraction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stream1,
    Stream2,
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stream1" => Ok(Phase::Stream1),
            "stream2" => Ok(Phase::Stream2),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Images per Stream-1 batch.
    pub batch_size: usize,
    /// Identities sampled per batch in both phases.
    pub ids_per_batch: usize,
    /// Pairs kept per Stream-2 batch; 0 keeps every pair of the batch.
    pub pairs_per_batch: usize,
    pub gem_p: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Stream1,
            optimizer: OptimizerKind::Adam,
            learning_rate: OptimizerKind::Adam.default_learning_rate(),
            epochs: 30,
            batch_size: 16,
            ids_per_batch: 4,
            pairs_per_batch: 0,
            gem_p: crate::ops::DEFAULT_GEM_P,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        OptimizerConfig::new(self.optimizer, self.learning_rate).validate()?;
        crate::ops::check_gem_p(self.gem_p)?;
        self.loss.validate()?;
        if self.ids_per_batch < 2 {
            return Err(Error::InvalidParam("ids_per_batch must be at least 2".into()));
        }
        if self.phase == Phase::Stream1 && (self.batch_size < 4 || self.batch_size / self.ids_per_batch < 2) {
            return Err(Error::BatchTooSmall(format!(
                "stream-1 batches need at least 4 images and 2 per identity, got batch {} over {} ids",
                self.batch_size, self.ids_per_batch
            )));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::new(self.optimizer, self.learning_rate)
    }
}

/// Images of one training subset with dense labels local to the subset.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub person_ids: Vec<u32>,
    pub platforms: Vec<Platform>,
    pub attributes: Vec<AttributeVector>,
}

impl TrainingSet {
    /// `images[n]` must belong to `manifest.records[indices[n]]`.
    pub fn new(manifest: &DatasetManifest, indices: &[usize], images: Vec<Tensor>) -> Result<Self> {
        if indices.len() != images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} records but {} images",
                indices.len(),
                images.len()
            )));
        }
        let mut dense = BTreeMap::new();
        for &i in indices {
            dense.insert(manifest.records[i].person_id, 0);
        }
        for (n, v) in dense.values_mut().enumerate() {
            *v = n;
        }
        let mut set = TrainingSet {
            images,
            labels: Vec::with_capacity(indices.len()),
            person_ids: Vec::with_capacity(indices.len()),
            platforms: Vec::with_capacity(indices.len()),
            attributes: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let r = &manifest.records[i];
            set.labels.push(dense[&r.person_id]);
            set.person_ids.push(r.person_id);
            set.platforms.push(r.platform);
            set.attributes.push(manifest.attribute_vector(r.person_id)?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn identity_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.identity_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Stream1 => 0x5731,
        Phase::Stream2 => 0x5732,
    };
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ tag))
}

/// One epoch of identity-balanced batches: `ids_per_batch` identities with
/// `batch_size / ids_per_batch` images each, repeating images only when an
/// identity has too few.
pub fn pk_batches(set: &TrainingSet, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let groups = set.by_label();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&l| !groups[l].is_empty()).collect();
    if eligible.len() < 2 {
        return Err(Error::BatchTooSmall(format!(
            "need at least 2 identities, got {}",
            eligible.len()
        )));
    }
    let p = config.ids_per_batch.min(eligible.len());
    let k = config.batch_size / config.ids_per_batch;
    let count = set.len().div_ceil(p * k);
    let mut batches = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ids = eligible.clone();
        ids.shuffle(rng);
        let mut batch = Vec::with_capacity(p * k);
        for &l in &ids[..p] {
            let mut imgs = groups[l].clone();
            imgs.shuffle(rng);
            batch.extend((0..k).map(|n| imgs[n % imgs.len()]));
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// One batch of Stream-2 pairs: `images` are training-set indices and
/// `pairs` index into `images`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub images: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn has_same_and_different(&self, set: &TrainingSet) -> (bool, bool) {
        let same = |&(a, b): &(usize, usize)| set.labels[self.images[a]] == set.labels[self.images[b]];
        (self.pairs.iter().any(same), self.pairs.iter().any(|p| !same(p)))
    }
}

/// One epoch of pair batches. Each batch takes `ids_per_batch` identities
/// with two images each, one per platform when both exist, and forms all
/// pairs. When `pairs_per_batch` caps the count, every same-identity pair
/// is kept and the rest is a random subset of the cross-identity pairs.
pub fn pair_batches(set: &TrainingSet, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PairBatch>> {
    let groups = set.by_label();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&l| !groups[l].is_empty()).collect();
    if eligible.len() < 2 {
        return Err(Error::BatchTooSmall(format!(
            "need at least 2 identities, got {}",
            eligible.len()
        )));
    }
    let p = config.ids_per_batch.min(eligible.len());
    let count = set.len().div_ceil(2 * p);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ids = eligible.clone();
        ids.shuffle(rng);
        let mut images = Vec::with_capacity(2 * p);
        for &l in &ids[..p] {
            let g = &groups[l];
            let aerial: Vec<usize> = g.iter().copied().filter(|&i| set.platforms[i] == Platform::Aerial).collect();
            let ground: Vec<usize> = g.iter().copied().filter(|&i| set.platforms[i] == Platform::Ground).collect();
            if !aerial.is_empty() && !ground.is_empty() {
                images.push(aerial[rng.gen_range(0..aerial.len())]);
                images.push(ground[rng.gen_range(0..ground.len())]);
            } else {
                let mut all = g.clone();
                all.shuffle(rng);
                images.push(all[0]);
                images.push(all[1 % all.len()]);
            }
        }
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for a in 0..images.len() {
            for b in a + 1..images.len() {
                if set.labels[images[a]] == set.labels[images[b]] {
                    same.push((a, b));
                } else {
                    cross.push((a, b));
                }
            }
        }
        if config.pairs_per_batch > 0 && same.len() + cross.len() > config.pairs_per_batch {
            cross.shuffle(rng);
            cross.truncate(config.pairs_per_batch.saturating_sub(same.len()).max(1));
            cross.sort_unstable();
        }
        let mut pairs = same;
        pairs.extend(cross);
        pairs.sort_unstable();
        out.push(PairBatch { images, pairs });
    }
    Ok(out)
}

fn sum_grads(parts: Vec<Vec<Tensor>>) -> Result<Vec<Tensor>> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for part in iter {
        for (a, p) in acc.iter_mut().zip(&part) {
            a.add_assign(p)?;
        }
    }
    Ok(acc)
}

fn grads_of(g: &crate::autodiff::Gradients, vars: &[Var], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    vars.iter()
        .zip(shapes)
        .map(|(&v, s)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(s)))
        .collect()
}

/// Loss of one Stream-1 batch and its gradient for every parameter in
/// [`ReidModel::params_mut`] order. Per-image tapes run in parallel and are
/// seeded from the batch-level embedding gradients.
pub fn stream1_batch_gradients(
    model: &ReidModel,
    images: &[&Tensor],
    labels: &[usize],
    gem_p: f64,
    margin: f64,
) -> Result<(Stream1Loss, Vec<Tensor>)> {
    let gain = model.config.stage_gain;
    let tapes = exec::try_map(images, |img| -> Result<(Graph, Var, Vec<Var>)> {
        model.check_image(img)?;
        let mut g = Graph::new();
        let mut x = g.constant((*img).clone());
        let mut params = Vec::with_capacity(2 * model.stages.len());
        for s in &model.stages {
            let (y, w, b) = s.trace(&mut g, x, gain, true)?;
            params.extend([w, b]);
            x = y;
        }
        let e = g.gem(x, gem_p)?;
        Ok((g, e, params))
    })?;
    let mut bg = Graph::new();
    let emb: Vec<Var> = tapes.iter().map(|(g, e, _)| bg.param(g.value(*e).clone())).collect();
    let cw = bg.param(model.classifier_weight.clone());
    let cb = bg.param(model.classifier_bias.clone());
    let logits = emb.iter().map(|&e| bg.linear(e, cw, cb)).collect::<Result<Vec<_>>>()?;
    let tr = trace_stream1_loss(&mut bg, &emb, &logits, labels, margin)?;
    let loss = Stream1Loss {
        total: bg.value(tr.total).item(),
        cross_entropy: bg.value(tr.cross_entropy).item(),
        triplet: bg.value(tr.triplet).item(),
    };
    let bgrads = bg.backward(tr.total, Tensor::scalar(1.0))?;
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let n_stage = 2 * model.stages.len();
    let seeds: Vec<Tensor> = emb
        .iter()
        .map(|&e| bgrads.get(e).cloned().unwrap_or_else(|| Tensor::zeros(bg.value(e).shape())))
        .collect();
    let idx: Vec<usize> = (0..tapes.len()).collect();
    let per_image = exec::try_map(&idx, |&i| -> Result<Vec<Tensor>> {
        let (g, e, params) = &tapes[i];
        let grads = g.backward(*e, seeds[i].clone())?;
        Ok(grads_of(&grads, params, &shapes[..n_stage]))
    })?;
    let mut grads = sum_grads(per_image)?;
    grads.extend(grads_of(&bgrads, &[cw, cb], &shapes[n_stage..]));
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub triplet: f64,
}

impl Stream1Epoch {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.cross_entropy, self.triplet)
    }
}

pub fn stream1_telemetry_csv(history: &[Stream1Epoch]) -> String {
    let mut s = format!("{STREAM1_HEADER}\n");
    for e in history {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

fn start_telemetry(out: Option<&Path>, header: &str) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(TELEMETRY_FILE), format!("{header}\n"))?;
    }
    Ok(())
}

fn append_telemetry(out: Option<&Path>, row: &str) -> Result<()> {
    if let Some(dir) = out {
        let mut f = std::fs::OpenOptions::new().append(true).open(dir.join(TELEMETRY_FILE))?;
        writeln!(f, "{row}")?;
    }
    Ok(())
}

fn non_finite(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { epoch, step },
        other => other,
    }
}

/// Trains Stream 1 in place. With `out`, a checkpoint and the telemetry
/// CSV are written there after every epoch, so on a non-finite loss both
/// the model and the directory hold the last good epoch.
pub fn train_stream1(
    model: &mut ReidModel,
    set: &TrainingSet,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<Stream1Epoch>> {
    config.validate()?;
    if set.identity_count() > model.config.id_count {
        return Err(Error::Config(format!(
            "classifier has {} outputs but the training set has {} identities",
            model.config.id_count,
            set.identity_count()
        )));
    }
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = Optimizer::new(config.optimizer_config(), &shape_refs)?;
    let mut rng = phase_rng(config.seed, Phase::Stream1);
    start_telemetry(out, STREAM1_HEADER)?;
    if let Some(dir) = out {
        save_reid(dir, model, config.gem_p)?;
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = pk_batches(set, config, &mut rng)?;
        let mut sums = [0.0; 3];
        for (step, batch) in batches.iter().enumerate() {
            let imgs: Vec<&Tensor> = batch.iter().map(|&i| &set.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| set.labels[i]).collect();
            let (loss, grads) = stream1_batch_gradients(model, &imgs, &labels, config.gem_p, config.loss.margin)
                .map_err(|e| non_finite(e, epoch, step))?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            opt.step(model.params_mut(), &grads)?;
            sums[0] += loss.total;
            sums[1] += loss.cross_entropy;
            sums[2] += loss.triplet;
        }
        let n = batches.len() as f64;
        let rec = Stream1Epoch {
            epoch,
            loss: sums[0] / n,
            cross_entropy: sums[1] / n,
            triplet: sums[2] / n,
        };
        log::info!("stream1 epoch {epoch}: {}", rec.csv_row());
        append_telemetry(out, &rec.csv_row())?;
        if let Some(dir) = out {
            save_reid(dir, model, config.gem_p)?;
        }
        history.push(rec);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream2Epoch {
    pub epoch: usize,
    pub total: f64,
    pub l_d: f64,
    pub l_p1: f64,
    pub l_p2: f64,
    pub degenerate_pair_fraction: f64,
}

impl Stream2Epoch {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.total, self.l_d, self.l_p1, self.l_p2, self.degenerate_pair_fraction
        )
    }

    fn from_breakdowns(epoch: usize, items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Stream2Epoch {
            epoch,
            total: mean(|b| b.total),
            l_d: mean(|b| b.l_d),
            l_p1: mean(|b| b.l_p1),
            l_p2: mean(|b| b.l_p2),
            degenerate_pair_fraction: items.iter().filter(|b| b.degenerate).count() as f64 / n,
        }
    }
}

pub fn stream2_telemetry_csv(history: &[Stream2Epoch]) -> String {
    let mut s = format!("{STREAM2_HEADER}\n");
    for e in history {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

/// Mean pair loss of one Stream-2 batch and its gradient for every
/// parameter in [`ExplainableModel::params_mut`] order.
pub fn stream2_batch_gradients(
    model: &ExplainableModel,
    frozen: &FrozenFeatures,
    attributes: &[AttributeVector],
    batch: &PairBatch,
    gain: f64,
    gem_p: f64,
    loss: &LossConfig,
) -> Result<(Vec<LossBreakdown>, Vec<Tensor>)> {
    if batch.pairs.is_empty() {
        return Err(Error::BatchTooSmall("pair batch is empty".into()));
    }
    let tapes = exec::try_map(&batch.images, |&i| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let (v, params) = model.trace(&mut g, &frozen.trunk[i], &frozen.features[i], gain, gem_p)?;
        Ok((g, v, params))
    })?;
    let pooled: Vec<&Tensor> = tapes.iter().map(|(g, v, _)| g.value(*v)).collect();
    let scale = 1.0 / batch.pairs.len() as f64;
    let per_pair = exec::try_map(&batch.pairs, |&(a, b)| -> Result<(LossBreakdown, Tensor)> {
        let (i, j) = (batch.images[a], batch.images[b]);
        let d = crate::distances::pairwise_distance(&frozen.embeddings[i], &frozen.embeddings[j])?;
        let d_k = row_distances(pooled[a], pooled[b])?;
        let pair = pairwise_xor(&attributes[i], &attributes[j])?;
        let (br, gk) = total_loss_with_grad(d, &d_k, &pair, loss)?;
        let c = pooled[a].shape()[1];
        let mut grad = Tensor::zeros(pooled[a].shape());
        for (k, ((ga, (ra, rb)), &dk)) in grad
            .data_mut()
            .chunks_exact_mut(c)
            .zip(pooled[a].data().chunks_exact(c).zip(pooled[b].data().chunks_exact(c)))
            .zip(&d_k)
            .enumerate()
        {
            if dk > 0.0 {
                let coef = scale * gk[k] / dk;
                for ((g, x), y) in ga.iter_mut().zip(ra).zip(rb) {
                    *g = coef * (x - y);
                }
            }
        }
        Ok((br, grad))
    })?;
    let mut seeds: Vec<Tensor> = pooled.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut breakdowns = Vec::with_capacity(per_pair.len());
    for (&(a, b), (br, g)) in batch.pairs.iter().zip(per_pair) {
        seeds[a].add_assign(&g)?;
        seeds[b].add_assign(&g.scale(-1.0))?;
        breakdowns.push(br);
    }
    let shapes = model.param_shapes();
    let idx: Vec<usize> = (0..tapes.len()).collect();
    let per_image = exec::try_map(&idx, |&n| -> Result<Vec<Tensor>> {
        let (g, v, params) = &tapes[n];
        let grads = g.backward(*v, seeds[n].clone())?;
        Ok(grads_of(&grads, params, &shapes))
    })?;
    Ok((breakdowns, sum_grads(per_image)?))
}

/// Trains Stream 2 in place against the frozen Stream-1 model, which is
/// only borrowed immutably. Checkpoints and telemetry as in
/// [`train_stream1`].
pub fn train_stream2(
    reid: &ReidModel,
    model: &mut ExplainableModel,
    set: &TrainingSet,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<Stream2Epoch>> {
    config.validate()?;
    if let Some(a) = set.attributes.first() {
        if a.len() != model.attributes() {
            return Err(Error::SchemaMismatch {
                expected: model.attributes(),
                actual: a.len(),
            });
        }
    }
    let frozen = FrozenFeatures::compute(reid, &set.images, config.gem_p)?;
    let gain = reid.config.stage_gain;
    let shapes = model.param_shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = Optimizer::new(config.optimizer_config(), &shape_refs)?;
    let mut rng = phase_rng(config.seed, Phase::Stream2);
    start_telemetry(out, STREAM2_HEADER)?;
    if let Some(dir) = out {
        model.save(dir)?;
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = pair_batches(set, config, &mut rng)?;
        let mut all = Vec::new();
        for (step, batch) in batches.iter().enumerate() {
            let (brs, grads) =
                stream2_batch_gradients(model, &frozen, &set.attributes, batch, gain, config.gem_p, &config.loss)
                    .map_err(|e| non_finite(e, epoch, step))?;
            if brs.iter().any(|b| !b.total.is_finite()) || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            opt.step(model.params_mut(), &grads)?;
            all.extend(brs);
        }
        let rec = Stream2Epoch::from_breakdowns(epoch, &all);
        log::info!("stream2 epoch {epoch}: {}", rec.csv_row());
        append_telemetry(out, &rec.csv_row())?;
        if let Some(dir) = out {
            model.save(dir)?;
        }
        history.push(rec);
    }
    Ok(history)
}
