//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#![allow(clippy::excessive_precision)]

use std::path::Path;
use std::time::Instant;

use attrib_reid::attributes::{pairwise_xor, AttributeSchema};
use attrib_reid::backbone::{BackboneConfig, ReidModel, StageSpec};
use attrib_reid::data::{generate_synthetic, split_protocol, DatasetManifest, ImageRecord, Platform, SplitConfig, SyntheticSpec};
use attrib_reid::distances::DistanceDecomposition;
use attrib_reid::evaluation::{evaluate, evaluate_oracle, reports_agree, Direction, EvalItem, EvalReport, GalleryMode};
use attrib_reid::explain::{ExplainableModel, FrozenFeatures};
use attrib_reid::gradcheck::GradCheck;
use attrib_reid::losses::{
    lambda_weight, metric_distillation, prior_loss_p1, prior_loss_p2, total_loss_with_grad, LossConfig,
};
use attrib_reid::ops::{delta_activation, gem_pool, ActivationParams};
use attrib_reid::pipeline::{cross_platform_pairs, decomposition_stats, retrieval_report, DecompositionStats};
use attrib_reid::training::{
    pair_batches, stream2_batch_gradients, train_stream1, train_stream2, Phase, TrainConfig, TrainingSet,
    TELEMETRY_FILE,
};
use attrib_reid::{AttributeTable, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FORMULA_TOL: f64 = 1e-9;
const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_INSTANCES: usize = 20;
const METRIC_TOL: f64 = 1e-12;
const METRIC_TRIALS: usize = 1000;
const MAX_GALLERY: usize = 20;
const MAX_RELATIVE_GAP: f64 = 0.15;
const MIN_DOMINANT_FRACTION: f64 = 0.70;
const MIN_RANK1: f64 = 0.90;
const MIN_MAP: f64 = 0.80;
const MAX_EPOCHS: usize = 50;

const STREAM1_EPOCHS: usize = 40;
const STREAM1_LR: f64 = 1e-3;
const STREAM2_EPOCHS: usize = 50;
const STREAM2_LR: f64 = 1e-2;
const STREAM2_IDS_PER_BATCH: usize = 2;
const SEED: u64 = 7;

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        let status = if ok { "PASS" } else { "FAIL" };
        println!("criterion {id} [{status}] {name}: {detail}");
        if !ok {
            self.failures += 1;
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FORMULA_TOL
}

fn decomp(d_k: Vec<f64>, exclusive: &[usize]) -> DistanceDecomposition {
    let m = d_k.len();
    let mut d = DistanceDecomposition::new(1.0, d_k);
    d.exclusive_indices = exclusive.to_vec();
    d.common_indices = (0..m).filter(|k| !exclusive.contains(k)).collect();
    d
}

fn formula_fidelity() -> Result<(bool, String)> {
    let act = ActivationParams::default();
    let delta = |x: f64| -> Result<f64> { Ok(delta_activation(&Tensor::from_vec(vec![x]), &act)?.data()[0]) };
    let gem = |v: Vec<f64>| -> Result<f64> { Ok(gem_pool(&Tensor::new(vec![1, v.len()], v)?, 3.0)?.item()) };
    let lower = 0.144_337_567_297_406_441_127_287_195_125;
    let upper = 0.433_012_701_892_219_323_381_861_585_376;
    let checks: Vec<(&str, f64, f64)> = vec![
        ("delta(1)", delta(1.0)?, 1.0),
        ("delta(-ln 2)", delta(-std::f64::consts::LN_2)?, 0.25),
        ("gem([0,2], 3)", gem(vec![0.0, 2.0])?, 1.587_401_051_968_199_474_751_705_639_27),
        ("L_d(10, 10)", metric_distillation(10.0, &[4.0, 6.0]), 0.0),
        ("L_d(10, 7)", metric_distillation(10.0, &[3.0, 4.0]), 3.0),
        ("L_d(7, 10)", metric_distillation(7.0, &[4.0, 6.0]), 3.0),
        ("lambda(4, 2, 1)", lambda_weight(4, 2, 1.0)?, 0.549_306_144_334_054_845_697_622_618_461),
        ("lambda(88, 44, 0.5)", lambda_weight(88, 44, 0.5)?, 0.742_414_844_810_665_181_777_806_534_681),
        ("L_p1 inactive", prior_loss_p1(&decomp(vec![0.3, 0.3, 0.2, 0.2], &[0, 1]), 4, 2, 1.0)?, 0.0),
        ("L_p1 active", prior_loss_p1(&decomp(vec![0.1, 0.1, 0.4, 0.4], &[0, 1]), 4, 2, 1.0)?, 0.6),
        ("L_p1 boundary", prior_loss_p1(&decomp(vec![0.25, 0.25, 0.25, 0.25], &[0, 1]), 4, 2, 1.0)?, 0.0),
        ("L_p2 inactive", prior_loss_p2(&decomp(vec![0.3, 0.3, 0.2, 0.2], &[0, 1]), 4, 2, 1.0)?, 0.0),
        (
            "L_p2 exclusive hinge",
            prior_loss_p2(&decomp(vec![0.05, 0.05, 0.45, 0.45], &[0, 1]), 4, 2, 1.0)?,
            0.188_675_134_594_812_882_254_574_390_251 + 2.0 * (0.45 - upper),
        ),
        ("L_p2 exclusive bound", 2.0 * (lower - 0.05), 0.188_675_134_594_812_882_254_574_390_251),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !close(*got, *want))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    let detail = if failed.is_empty() {
        format!("{} values within {FORMULA_TOL:e}", checks.len())
    } else {
        failed.join("; ")
    };
    Ok((failed.is_empty(), detail))
}

fn tiny_stream2(seed: u64) -> Result<(TrainingSet, ReidModel, ExplainableModel)> {
    let spec = SyntheticSpec {
        identities: 4,
        images_per_platform: 1,
        height: 16,
        width: 8,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, &AttributeSchema::default())?;
    let idx: Vec<usize> = (0..ds.images.len()).collect();
    let set = TrainingSet::new(&ds.manifest, &idx, ds.images.clone())?;
    let cfg = BackboneConfig::new(
        vec![StageSpec { out_channels: 8, stride: 2 }, StageSpec { out_channels: 8, stride: 2 }],
        (3, 16, 8),
        4,
        seed,
    );
    let reid = ReidModel::new(cfg)?;
    let mut model = ExplainableModel::new(&reid, 88, ActivationParams::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    Ok((set, reid, model))
}

fn gradient_suite() -> Result<(bool, String)> {
    let mut worst = [0.0f64; 3];
    let mut checked = [0usize; 3];
    let mut skipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let schema = AttributeSchema::default();
    for _ in 0..GRADIENT_INSTANCES {
        let raw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            schema.attributes().iter().map(|a| rng.gen_range(0..a.cardinality)).collect()
        };
        let pair = pairwise_xor(&schema.encode(&raw(&mut rng))?, &schema.encode(&raw(&mut rng))?)?;
        let d = rng.gen_range(0.5..3.0);
        let x = Tensor::from_vec((0..88).map(|_| rng.gen_range(0.001..0.05)).collect());
        let cfg = LossConfig::default();
        let f = |t: &Tensor| -> Result<(f64, Tensor)> {
            let (b, g) = total_loss_with_grad(d, t.data(), &pair, &cfg)?;
            Ok((b.total, Tensor::from_vec(g)))
        };
        let rep = GradCheck::new(1e-7).run(f, &x)?;
        worst[0] = worst[0].max(rep.max_rel_error);
        checked[0] += rep.checked;
        skipped += rep.skipped;
    }
    for instance in 0..GRADIENT_INSTANCES as u64 {
        let (set, reid, model) = tiny_stream2(100 + instance)?;
        let frozen = FrozenFeatures::compute(&reid, &set.images, 3.0)?;
        let cfg = TrainConfig { ids_per_batch: 2, ..TrainConfig::default() };
        let batch = pair_batches(&set, &cfg, &mut ChaCha8Rng::seed_from_u64(instance))?.remove(0);
        let gain = reid.config.stage_gain;
        let loss = LossConfig::default();
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (which, name) in names.iter().enumerate() {
            let x = model.named_params()[which].1.clone();
            let f = |t: &Tensor| -> Result<(f64, Tensor)> {
                let mut m = model.clone();
                *m.params_mut()[which] = t.clone();
                let (brs, g) = stream2_batch_gradients(&m, &frozen, &set.attributes, &batch, gain, 3.0, &loss)?;
                Ok((brs.iter().map(|b| b.total).sum::<f64>() / brs.len() as f64, g[which].clone()))
            };
            let rep = GradCheck::new(1e-6).run(f, &x)?;
            let slot = if name.starts_with("adh.") { 1 } else { 2 };
            worst[slot] = worst[slot].max(rep.max_rel_error);
            checked[slot] += rep.checked;
            skipped += rep.skipped;
        }
    }
    let ok = worst.iter().all(|&w| w <= GRADIENT_TOL);
    Ok((
        ok,
        format!(
            "max rel err d_k {:.2e} ({} coords), ADH {:.2e} ({}), backbone {:.2e} ({}); {} kink coords skipped; tol {GRADIENT_TOL:e}",
            worst[0], checked[0], worst[1], checked[1], worst[2], checked[2], skipped
        ),
    ))
}

fn metric_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut compared = 0;
    let mut disagreements = 0;
    for _ in 0..METRIC_TRIALS {
        let nq = rng.gen_range(1..8);
        let ng = rng.gen_range(1..=MAX_GALLERY);
        let ids = rng.gen_range(1..6);
        let item = |rng: &mut ChaCha8Rng| {
            let platform = if rng.gen_bool(0.5) { Platform::Aerial } else { Platform::Ground };
            EvalItem {
                person_id: rng.gen_range(0..ids),
                platform,
                camera_id: u32::from(platform == Platform::Ground) * 2 + rng.gen_range(0..2),
            }
        };
        let q: Vec<EvalItem> = (0..nq).map(|_| item(&mut rng)).collect();
        let g: Vec<EvalItem> = (0..ng).map(|_| item(&mut rng)).collect();
        let dist: Vec<Vec<f64>> = (0..nq)
            .map(|_| (0..ng).map(|_| f64::from(rng.gen_range(0..8u8)) * 0.25).collect())
            .collect();
        for dir in [Direction::AerialToGround, Direction::GroundToAerial, Direction::All] {
            match (
                evaluate(&q, &g, &dist, dir, GalleryMode::Cross),
                evaluate_oracle(&q, &g, &dist, dir, GalleryMode::Cross),
            ) {
                (Ok(a), Ok(b)) => {
                    compared += 1;
                    if !reports_agree(&a, &b, METRIC_TOL) {
                        disagreements += 1;
                    }
                }
                (Err(a), Err(b)) if a.to_string() == b.to_string() => {}
                _ => disagreements += 1,
            }
        }
    }
    Ok((
        disagreements == 0,
        format!("{METRIC_TRIALS} instances, {compared} scored evaluations, {disagreements} disagreements at {METRIC_TOL:e}"),
    ))
}

fn protocol_reproduction() -> Result<(bool, String)> {
    let schema = AttributeSchema::new(vec![("a".into(), 2)])?;
    let mut table = AttributeTable::default();
    let mut records = Vec::new();
    for p in 1..=397u32 {
        table.rows.insert(p, vec![(p % 2) as usize]);
        for platform in [Platform::Aerial, Platform::Ground] {
            records.push(ImageRecord {
                image_path: format!("{p}_{platform}.png"),
                person_id: p,
                platform,
                camera_id: u32::from(platform == Platform::Ground),
                frame_index: 0,
                label: 0,
            });
        }
    }
    let excluded = (1..=9).map(|i| i * 37).collect();
    let manifest = DatasetManifest::new(Default::default(), schema, records, table, excluded)?;
    let split = split_protocol(&manifest, &SplitConfig::default())?;
    let (tr, te) = (split.train_ids.len(), split.test_ids.len());
    Ok((tr == 199 && te == 189, format!("{tr} train / {te} test identities (expected 199 / 189)")))
}

struct RunOutput {
    stream1_telemetry: String,
    stream2_telemetry: String,
    report: EvalReport,
    stats: DecompositionStats,
    seconds: f64,
}

fn run_experiment(dir: &Path) -> Result<RunOutput> {
    let start = Instant::now();
    let schema = AttributeSchema::default();
    let spec = SyntheticSpec {
        identities: 20,
        images_per_platform: 8,
        noise: 0.05,
        seed: SEED,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, &schema)?;
    let split = split_protocol(&ds.manifest, &SplitConfig { seed: SEED, ..SplitConfig::default() })?;
    let train_images = split.train_images.iter().map(|&i| ds.images[i].clone()).collect();
    let set = TrainingSet::new(&ds.manifest, &split.train_images, train_images)?;

    let backbone = BackboneConfig {
        input_shape: (3, spec.height, spec.width),
        id_count: set.identity_count(),
        seed: SEED,
        ..BackboneConfig::default()
    };
    let mut reid = ReidModel::new(backbone)?;
    let s1 = TrainConfig {
        phase: Phase::Stream1,
        epochs: STREAM1_EPOCHS,
        learning_rate: STREAM1_LR,
        seed: SEED,
        ..TrainConfig::default()
    };
    train_stream1(&mut reid, &set, &s1, Some(&dir.join("stream1")))?;
    let t1 = start.elapsed().as_secs_f64();
    let (report, _) = retrieval_report(
        &reid,
        s1.gem_p,
        &ds.manifest,
        &split,
        &ds.images,
        Direction::AerialToGround,
        GalleryMode::Cross,
        false,
    )?;

    let mut model = ExplainableModel::new(&reid, schema.total_binary_dims(), ActivationParams::default(), SEED)?;
    let s2 = TrainConfig {
        phase: Phase::Stream2,
        epochs: STREAM2_EPOCHS,
        learning_rate: STREAM2_LR,
        ids_per_batch: STREAM2_IDS_PER_BATCH,
        loss: LossConfig::default(),
        seed: SEED,
        ..TrainConfig::default()
    };
    train_stream2(&reid, &mut model, &set, &s2, Some(&dir.join("stream2")))?;
    let t2 = start.elapsed().as_secs_f64();

    let mut held_out: Vec<usize> = split.query_images.iter().chain(&split.gallery_images).copied().collect();
    held_out.sort_unstable();
    let images: Vec<Tensor> = held_out.iter().map(|&i| ds.images[i].clone()).collect();
    let platforms: Vec<Platform> = held_out.iter().map(|&i| ds.manifest.records[i].platform).collect();
    let attrs = held_out
        .iter()
        .map(|&i| ds.manifest.attribute_vector(ds.manifest.records[i].person_id))
        .collect::<Result<Vec<_>>>()?;
    let records = cross_platform_pairs(&reid, &model, s2.gem_p, &images, &platforms, &attrs)?;
    let stats = decomposition_stats(&records);
    println!("    stream1 {t1:.1}s, stream2 {:.1}s, measurement {:.1}s", t2 - t1, start.elapsed().as_secs_f64() - t2);
    Ok(RunOutput {
        stream1_telemetry: std::fs::read_to_string(dir.join("stream1").join(TELEMETRY_FILE))?,
        stream2_telemetry: std::fs::read_to_string(dir.join("stream2").join(TELEMETRY_FILE))?,
        report,
        stats,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run() -> Result<usize> {
    let mut gate = Gate { failures: 0 };

    let (ok, detail) = formula_fidelity()?;
    gate.check(1, "formula fidelity", ok, detail);

    let t = Instant::now();
    let (ok, detail) = gradient_suite()?;
    gate.check(2, "gradient suite", ok, format!("{detail}; {:.1}s", t.elapsed().as_secs_f64()));

    let (ok, detail) = metric_oracle()?;
    gate.check(3, "metric oracle", ok, detail);

    let first_dir = tempfile::tempdir()?;
    let first = run_experiment(first_dir.path())?;
    let epochs_ok = STREAM1_EPOCHS <= MAX_EPOCHS && STREAM2_EPOCHS <= MAX_EPOCHS;
    gate.check(
        4,
        "distillation convergence",
        epochs_ok && first.stats.mean_relative_gap <= MAX_RELATIVE_GAP,
        format!(
            "mean |d - sum d_k|/d = {:.4} over {} held-out pairs (max {MAX_RELATIVE_GAP}); {:.1}s",
            first.stats.mean_relative_gap, first.stats.pairs, first.seconds
        ),
    );
    gate.check(
        5,
        "exclusive-attribute dominance",
        first.stats.exclusive_dominance >= MIN_DOMINANT_FRACTION,
        format!(
            "{:.3} of {} cross-platform pairs have exclusive share > M_E/M (min {MIN_DOMINANT_FRACTION}); mean share {:.3} vs {:.3}",
            first.stats.exclusive_dominance,
            first.stats.eligible_pairs,
            first.stats.mean_exclusive_share,
            first.stats.mean_exclusive_fraction
        ),
    );
    let rank1 = first.report.cmc_at(1);
    gate.check(
        6,
        "toy re-ID sanity",
        rank1 >= MIN_RANK1 && first.report.map >= MIN_MAP,
        format!(
            "a2g rank-1 {rank1:.3} (min {MIN_RANK1}), mAP {:.3} (min {MIN_MAP}), {} queries",
            first.report.map,
            first.report.rankings.len()
        ),
    );

    let (ok, detail) = protocol_reproduction()?;
    gate.check(7, "protocol reproduction", ok, detail);

    let second_dir = tempfile::tempdir()?;
    let second = run_experiment(second_dir.path())?;
    let same = first.stream1_telemetry == second.stream1_telemetry && first.stream2_telemetry == second.stream2_telemetry;
    gate.check(
        8,
        "determinism",
        same,
        format!(
            "stream1 telemetry {} bytes, stream2 telemetry {} bytes, {}",
            first.stream1_telemetry.len(),
            first.stream2_telemetry.len(),
            if same { "byte-identical" } else { "differ" }
        ),
    );
    Ok(gate.failures)
}

fn main() {
    match run() {
        Ok(0) => println!("acceptance: all criteria passed"),
        Ok(n) => {
            println!("acceptance: {n} criteria failed");
            std::process::exit(1);
        }
        Err(e) => {
            println!("acceptance: aborted: {e}");
            std::process::exit(1);
        }
    }
}
