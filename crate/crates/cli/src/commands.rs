//! Subcommand bodies. Each reads its inputs, writes its outputs under one
//! directory together with the config echo, and returns nothing else.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::bail;
use attrib_reid::data::{generate_synthetic, load_image, load_manifest, split_protocol, DatasetManifest, Split};
use attrib_reid::evaluation::{reports_agree, EvalReport};
use attrib_reid::explain::{explain_pair, load_reid, ExplainableModel};
use attrib_reid::pipeline::retrieval_report;
use attrib_reid::training::{train_stream1, train_stream2, Phase, TrainingSet};
use attrib_reid::{exec, Error, Tensor};

use crate::config::RunConfig;
use crate::UsageError;

pub const SPLIT_FILE: &str = "split.json";
pub const STREAM1_DIR: &str = "stream1";
pub const STREAM2_DIR: &str = "stream2";
pub const EVAL_DIR: &str = "eval";
const ORACLE_TOL: f64 = 1e-12;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, UsageError> {
    value.as_deref().ok_or_else(|| UsageError(format!("--{flag} is required (flag or config file)")))
}

fn load_images(manifest: &DatasetManifest, indices: &[usize], size: (usize, usize)) -> attrib_reid::Result<Vec<Tensor>> {
    exec::try_map(indices, |&i| load_image(manifest, i, size))
}

/// All manifest images, with unused slots left empty.
fn load_subset(manifest: &DatasetManifest, indices: &[usize], size: (usize, usize)) -> attrib_reid::Result<Vec<Tensor>> {
    let loaded = load_images(manifest, indices, size)?;
    let mut all = vec![Tensor::from_vec(Vec::new()); manifest.len()];
    for (&i, img) in indices.iter().zip(loaded) {
        all[i] = img;
    }
    Ok(all)
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = required(&cfg.out, "out")?;
    let mut ds = generate_synthetic(&cfg.synthetic_spec(), &Default::default())?;
    ds.write(out)?;
    cfg.echo(out)?;
    log::info!("wrote {} images of {} identities to {}", ds.images.len(), cfg.ids, out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = required(&cfg.data, "data")?;
    let run = required(&cfg.run, "run")?;
    let manifest = load_manifest(data)?;
    let size = (cfg.height, cfg.width);
    let train_cfg = cfg.train_config();
    match cfg.phase {
        Phase::Stream1 => {
            let split = split_protocol(&manifest, &cfg.split_config())?;
            for w in &split.warnings {
                log::warn!("{w}");
            }
            std::fs::create_dir_all(run)?;
            split.save(run.join(SPLIT_FILE))?;
            let images = load_images(&manifest, &split.train_images, size)?;
            let set = TrainingSet::new(&manifest, &split.train_images, images)?;
            let mut model = attrib_reid::backbone::ReidModel::new(cfg.backbone_config(set.identity_count()))?;
            let dir = run.join(STREAM1_DIR);
            cfg.echo(&dir)?;
            let history = train_stream1(&mut model, &set, &train_cfg, Some(&dir))?;
            if let Some(last) = history.last() {
                println!("stream1 epoch {}: loss {:.6}", last.epoch, last.loss);
            }
        }
        Phase::Stream2 => {
            let (reid, _) = load_reid(&run.join(STREAM1_DIR))?;
            let split = Split::load(run.join(SPLIT_FILE))?;
            let images = load_images(&manifest, &split.train_images, size)?;
            let set = TrainingSet::new(&manifest, &split.train_images, images)?;
            let mut model =
                ExplainableModel::new(&reid, manifest.schema.total_binary_dims(), cfg.activation()?, cfg.seed)?;
            let dir = run.join(STREAM2_DIR);
            cfg.echo(&dir)?;
            let history = train_stream2(&reid, &mut model, &set, &train_cfg, Some(&dir))?;
            if let Some(last) = history.last() {
                println!("stream2 epoch {}: L_total {:.6}, L_d {:.6}", last.epoch, last.total, last.l_d);
            }
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = required(&cfg.data, "data")?;
    let run = required(&cfg.run, "run")?;
    let out = cfg.out.clone().unwrap_or_else(|| run.join(EVAL_DIR));
    let manifest = load_manifest(data)?;
    let (reid, gem_p) = load_reid(&run.join(STREAM1_DIR))?;
    let split = Split::load(run.join(SPLIT_FILE))?;
    let (_, h, w) = reid.config.input_shape;
    let indices: Vec<usize> = split.query_images.iter().chain(&split.gallery_images).copied().collect();
    let images = load_subset(&manifest, &indices, (h, w))?;
    let (report, oracle) =
        retrieval_report(&reid, gem_p, &manifest, &split, &images, cfg.direction, cfg.gallery_mode, cfg.oracle)?;
    if let Some(o) = &oracle {
        if !reports_agree(&report, o, ORACLE_TOL) {
            bail!("metric oracle disagrees with the evaluator (mAP {} vs {})", report.map, o.map);
        }
    }
    std::fs::create_dir_all(&out)?;
    let stem = format!("{}_{}", cfg.direction, cfg.gallery_mode);
    let csv = format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row());
    std::fs::write(out.join(format!("report_{stem}.txt")), report.text())?;
    std::fs::write(out.join(format!("report_{stem}.csv")), csv)?;
    std::fs::write(out.join(format!("per_query_{stem}.csv")), per_query_csv(&report, &manifest, &split))?;
    cfg.echo(&out)?;
    print!("{}", report.text());
    if oracle.is_some() {
        println!("oracle: agrees");
    }
    Ok(())
}

/// Per-query dump keyed by image id rather than query position.
fn per_query_csv(report: &EvalReport, manifest: &DatasetManifest, split: &Split) -> String {
    let mut s = String::from("query_image,person_id,platform,average_precision,first_match_rank\n");
    for r in &report.rankings {
        let rec = &manifest.records[split.query_images[r.query]];
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            rec.image_id(),
            rec.person_id,
            rec.platform,
            r.average_precision,
            r.first_match_rank
        );
    }
    s
}

pub fn explain(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = required(&cfg.data, "data")?;
    let run = required(&cfg.run, "run")?;
    let out = required(&cfg.out, "out")?;
    let query = cfg.query.as_deref().ok_or_else(|| UsageError("--query is required".into()))?;
    let gallery = cfg.gallery.as_deref().ok_or_else(|| UsageError("--gallery is required".into()))?;
    let manifest = load_manifest(data)?;
    let qi = manifest.find_image(query)?;
    let gi = manifest.find_image(gallery)?;
    let (reid, gem_p) = load_reid(&run.join(STREAM1_DIR))?;
    let model = ExplainableModel::load(&run.join(STREAM2_DIR), &reid)?;
    let (_, h, w) = reid.config.input_shape;
    let img_q = load_image(&manifest, qi, (h, w))?;
    let img_g = load_image(&manifest, gi, (h, w))?;
    let attrs = |i: usize| manifest.attribute_vector(manifest.records[i].person_id);
    let ex = explain_pair(&reid, &model, gem_p, &img_q, &img_g, &attrs(qi)?, &attrs(gi)?)?;
    std::fs::create_dir_all(out)?;
    ex.attention[0].values.save(out.join("aam_query.atrt"))?;
    ex.attention[1].values.save(out.join("aam_gallery.atrt"))?;
    std::fs::write(out.join("shares.csv"), ex.shares_csv(&manifest.schema))?;
    let summary = ex.summary();
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(out.join("summary.json"), text)?;
    cfg.echo(out)?;
    println!(
        "d {:.6}, d_hat {:.6}, L_d {:.6}, exclusive {}/{} attributes carry share {:.4}{}",
        summary.d,
        summary.d_hat,
        summary.l_d,
        summary.exclusive_count,
        summary.attribute_count,
        summary.exclusive_share,
        if summary.degenerate { " (degenerate pair)" } else { "" }
    );
    Ok(())
}

/// Missing checkpoints surface with the artifact path in the message.
pub fn describe(err: &anyhow::Error) -> String {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(p)) => format!("missing artifact {}: run the producing step first", p.display()),
        _ => format!("{err:#}"),
    }
}
