use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use weseg_core::cohort::{read_cohort, read_cohort_entries, write_cohort, CohortEntry};
use weseg_core::eval::{annotation_stats, eval_scored, CohortReport};
use weseg_core::nn::{read_checkpoint, write_checkpoint, Checkpoint};
use weseg_core::pnm::{read_pgm, read_ppm, write_f64_map, write_pgm, write_ppm, GrayImage};
use weseg_core::synth::{gen_feature_bags, gen_raster_slide, perturb_cohort, slide_rng, NoiseModel};
use weseg_core::tiler::{stitch_map, tile_slide, SegmentationMap};
use weseg_core::train::{lr_random_search, predict, refine_annotations, run_training, Method, Standardizer};
use weseg_core::SlideBag;

use crate::config::{DataKind, RunConfig};

pub const COHORTS: [&str; 3] = ["train", "val", "test"];
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";

const NOISE_SEED_TAG: u64 = 0x6e6f_6973;

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn manifest_path(data: &Path, cohort: &str) -> PathBuf {
    data.join(format!("{cohort}.csv"))
}

fn generate_raster_entries(config: &RunConfig, out: &Path) -> Result<Vec<CohortEntry>> {
    let spec = config.data.synth_spec(config.seed);
    let raster = &config.data.raster;
    let raster_dir = out.join("rasters");
    create_dir(&raster_dir)?;
    (0..config.data.slides)
        .into_par_iter()
        .map(|i| {
            let id = format!("slide-{i:05}");
            let mut rng = slide_rng(config.seed, i as u64);
            let percent = spec.sample_percent(&mut rng);
            let slide = gen_raster_slide(raster, percent, &mut rng)?;
            let image_path = raster_dir.join(format!("{id}.ppm"));
            let mask_path = raster_dir.join(format!("{id}.mask.pgm"));
            write_ppm(&image_path, &slide.image)?;
            let mask = GrayImage {
                width: raster.width,
                height: raster.height,
                data: slide.truth.iter().map(|&t| t * 255).collect(),
            };
            write_pgm(&mask_path, &mask)?;
            let tiled = tile_slide(&slide.image, Some(&slide.truth), raster.tile_size, raster.overlap, Some(config.seed))?;
            let bag = tiled
                .to_bag(&id, slide.tumor_percent())
                .with_context(|| format!("slide {id} has no tissue tile"))?;
            Ok(CohortEntry {
                bag,
                image: Some(image_path),
                mask: Some(mask_path),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct StatsRow<'a> {
    cohort: &'a str,
    slides: usize,
    nonzero: usize,
    multiple_of_20: f64,
    multiple_of_5: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    percent: usize,
    count: usize,
}

/// Writes train/val/test manifests with their slide files, plus annotation
/// statistics, into `out`.
pub fn generate(config: &RunConfig, out: &Path) -> Result<()> {
    ensure!(config.data.slides > 0, "nothing to generate: the configuration asks for zero slides");
    let sizes = config.data.split_sizes()?;
    create_dir(out)?;
    config.write_copy(out)?;
    let spec = config.data.synth_spec(config.seed);
    let mut entries: Vec<CohortEntry> = match config.data.kind {
        DataKind::Features => gen_feature_bags(&spec, config.data.slides)?
            .into_iter()
            .map(Into::into)
            .collect(),
        DataKind::Raster => generate_raster_entries(config, out)?,
    };
    if config.data.noise {
        let model = NoiseModel::reported(&spec)?;
        log::info!("annotation noise q20 = {:.4}, q5 = {:.4}", model.q20, model.q5);
        let mut bags: Vec<SlideBag> = entries.iter().map(|e| e.bag.clone()).collect();
        perturb_cohort(&mut bags, &model, config.seed ^ NOISE_SEED_TAG);
        for (e, b) in entries.iter_mut().zip(bags) {
            e.bag = b;
        }
    }

    let mut stats = Vec::new();
    let mut start = 0;
    for (name, size) in COHORTS.iter().zip(sizes) {
        let part = &entries[start..start + size];
        start += size;
        let manifest = write_cohort(out, name, part)?;
        log::info!("wrote {} slides to {}", part.len(), manifest.display());
        let s = annotation_stats(&part.iter().map(|e| e.bag.percent).collect::<Vec<_>>());
        stats.push(StatsRow {
            cohort: name,
            slides: s.slides,
            nonzero: s.nonzero,
            multiple_of_20: s.multiple_of_20,
            multiple_of_5: s.multiple_of_5,
        });
    }
    let all = annotation_stats(&entries.iter().map(|e| e.bag.percent).collect::<Vec<_>>());
    stats.push(StatsRow {
        cohort: "all",
        slides: all.slides,
        nonzero: all.nonzero,
        multiple_of_20: all.multiple_of_20,
        multiple_of_5: all.multiple_of_5,
    });
    write_csv(&out.join("annotation_stats.csv"), &stats)?;
    let histogram: Vec<HistogramRow> = all
        .histogram
        .iter()
        .enumerate()
        .map(|(percent, &count)| HistogramRow { percent, count })
        .collect();
    write_csv(&out.join("annotation_histogram.csv"), &histogram)?;
    Ok(())
}

fn load_split(data: &Path, cohort: &str) -> Result<Vec<SlideBag>> {
    let path = manifest_path(data, cohort);
    read_cohort(&path).with_context(|| format!("loading cohort {}", path.display()))
}

/// Trains one method on `data/train.csv`, validating on `data/val.csv`.
/// The checkpoint is rewritten on every validation improvement.
pub fn train(config: &RunConfig, data: &Path, method: Method, out: &Path) -> Result<Checkpoint> {
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    create_dir(out)?;
    config.write_copy(out)?;
    let train_config = config.train_config(method);
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let outcome = run_training(&train, &val, &train_config, |epoch, params, standardizer| {
        log::debug!("{method}: new best at epoch {epoch}");
        let ck = Checkpoint {
            method: method.to_string(),
            params: params.clone(),
            standardizer: Some(standardizer.to_pair()),
        };
        write_checkpoint(&checkpoint_path, &ck)?;
        Ok(())
    })?;
    write_csv(&out.join(HISTORY_FILE), &outcome.history)?;
    log::info!(
        "{method}: best validation loss {:.6} at epoch {} of {}",
        outcome.best_val_loss,
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok(Checkpoint {
        method: method.to_string(),
        params: outcome.params,
        standardizer: Some(outcome.standardizer.to_pair()),
    })
}

pub fn sweep(config: &RunConfig, data: &Path, method: Method, trials: usize, out: &Path) -> Result<f64> {
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    create_dir(out)?;
    config.write_copy(out)?;
    let (best, reports) = lr_random_search(&train, &val, &config.train_config(method), trials)?;
    write_csv(&out.join("sweep.csv"), &reports)?;
    log::info!("{method}: best learning rate {best:.6e} over {trials} trials");
    Ok(best)
}

pub fn load_model(path: &Path) -> Result<(Checkpoint, Standardizer)> {
    let ck = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let pair = ck
        .standardizer
        .clone()
        .with_context(|| format!("checkpoint {} has no standardizer", path.display()))?;
    Ok((ck, Standardizer::from_pair(pair)?))
}

/// Re-tiles a slide's raster and spreads the bag's tile scores over it.
fn slide_map(config: &RunConfig, image: &Path, scores: &[f64]) -> Result<SegmentationMap> {
    let raster = &config.data.raster;
    let img = read_ppm(image)?;
    let tiled = tile_slide(&img, None, raster.tile_size, raster.overlap, None)?;
    ensure!(
        tiled.tissue_tiles() == scores.len(),
        "{} has {} tissue tiles but {} scores",
        image.display(),
        tiled.tissue_tiles(),
        scores.len()
    );
    Ok(stitch_map(&tiled.grid, &tiled.background, scores)?)
}

fn write_map(dir: &Path, stem: &str, map: &SegmentationMap) -> Result<()> {
    write_pgm(&dir.join(format!("{stem}.pgm")), &map.to_gray())?;
    write_f64_map(&dir.join(format!("{stem}.f64")), map.width, map.height, &map.values)?;
    write_pgm(&dir.join(format!("{stem}.background.pgm")), &map.background_mask())?;
    Ok(())
}

#[derive(Serialize)]
struct TileScore<'a> {
    slide_id: &'a str,
    tile: usize,
    score: f64,
}

#[derive(Serialize)]
struct RasterTileScore {
    tile: usize,
    x: usize,
    y: usize,
    background: bool,
    score: Option<f64>,
}

pub enum InferInput<'a> {
    Manifest(&'a Path),
    Image(&'a Path),
}

/// Per-tile scores of a cohort or a single raster, with stitched maps for
/// every slide that has a raster.
pub fn infer(config: &RunConfig, checkpoint: &Path, input: InferInput<'_>, out: &Path) -> Result<()> {
    let (ck, standardizer) = load_model(checkpoint)?;
    create_dir(out)?;
    config.write_copy(out)?;
    match input {
        InferInput::Manifest(manifest) => {
            let entries = read_cohort_entries(manifest)?;
            let scores: Vec<Vec<f64>> = entries
                .iter()
                .map(|e| predict(&ck.params, &standardizer, &e.bag))
                .collect::<weseg_core::Result<_>>()?;
            let rows: Vec<TileScore> = entries
                .iter()
                .zip(&scores)
                .flat_map(|(e, s)| {
                    s.iter().enumerate().map(|(tile, &score)| TileScore {
                        slide_id: &e.bag.id,
                        tile,
                        score,
                    })
                })
                .collect();
            write_csv(&out.join("scores.csv"), &rows)?;
            let maps_dir = out.join("maps");
            for (e, s) in entries.iter().zip(&scores) {
                if let Some(image) = &e.image {
                    create_dir(&maps_dir)?;
                    write_map(&maps_dir, &e.bag.id, &slide_map(config, image, s)?)?;
                }
            }
        }
        InferInput::Image(image) => {
            let raster = &config.data.raster;
            let img = read_ppm(image)?;
            let tiled = tile_slide(&img, None, raster.tile_size, raster.overlap, None)?;
            ensure!(tiled.tissue_tiles() > 0, "{} contains only background", image.display());
            let features = standardizer.apply(&tiled.features)?;
            let scores = weseg_core::nn::tile_scores(&ck.params, &features)?;
            let mut next = scores.iter();
            let rows: Vec<RasterTileScore> = tiled
                .grid
                .positions
                .iter()
                .zip(&tiled.background)
                .enumerate()
                .map(|(tile, (&(x, y), &background))| RasterTileScore {
                    tile,
                    x,
                    y,
                    background,
                    score: if background { None } else { next.next().copied() },
                })
                .collect();
            write_csv(&out.join("tiles.csv"), &rows)?;
            write_map(out, "map", &stitch_map(&tiled.grid, &tiled.background, &scores)?)?;
        }
    }
    Ok(())
}

/// Writes a copy of the cohort whose annotations are replaced by the model's
/// predicted tumor shares.
pub fn refine(config: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<PathBuf> {
    let (ck, standardizer) = load_model(checkpoint)?;
    let entries = read_cohort_entries(manifest)?;
    let bags: Vec<SlideBag> = entries.iter().map(|e| e.bag.clone()).collect();
    let refined = refine_annotations(&ck.params, &standardizer, &bags)?;
    create_dir(out)?;
    config.write_copy(out)?;
    let refined_entries: Vec<CohortEntry> = entries
        .into_iter()
        .zip(refined)
        .map(|(e, bag)| CohortEntry { bag, ..e })
        .collect();
    let name = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .context("manifest path has no file name")?;
    Ok(write_cohort(out, name, &refined_entries)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvaluationRow {
    /// Run directory name inside the results directory.
    pub run: String,
    pub method: String,
    pub cohort: String,
    pub level: String,
    pub pooled_auc: f64,
    pub mean_slide_auc: Option<f64>,
    pub slides: usize,
    pub skipped: usize,
    pub elements: usize,
}

#[derive(Serialize, serde::Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Serialize)]
struct SlideRow<'a> {
    slide_id: &'a str,
    auc: Option<f64>,
}

/// Scores every slide of a cohort. With rasters and masks available the
/// evaluation is per tissue pixel, otherwise per tissue tile.
pub fn evaluate_model(
    config: &RunConfig,
    ck: &Checkpoint,
    standardizer: &Standardizer,
    entries: &[CohortEntry],
    cohort: &str,
) -> Result<(CohortReport, &'static str)> {
    let pixel_level = !entries.is_empty() && entries.iter().all(|e| e.image.is_some() && e.mask.is_some());
    let items = entries
        .par_iter()
        .map(|e| {
            let scores = predict(&ck.params, standardizer, &e.bag)?;
            if !pixel_level {
                let truth = e.bag.truth.clone().with_context(|| format!("slide {} has no ground truth", e.bag.id))?;
                return Ok((e.bag.id.clone(), scores, truth));
            }
            let map = slide_map(config, e.image.as_ref().unwrap(), &scores)?;
            let mask = read_pgm(e.mask.as_ref().unwrap())?;
            ensure!(
                (mask.width, mask.height) == (map.width, map.height),
                "mask of slide {} does not match its image",
                e.bag.id
            );
            let (mut s, mut t) = (Vec::new(), Vec::new());
            for ((&v, &bg), &m) in map.values.iter().zip(&map.background).zip(&mask.data) {
                if !bg {
                    s.push(v);
                    t.push(u8::from(m > 127));
                }
            }
            Ok((e.bag.id.clone(), s, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = eval_scored(&ck.method, cohort, &items)?;
    Ok((report, if pixel_level { "pixel" } else { "tile" }))
}

/// Run directories under `results` that hold a checkpoint, sorted by name.
pub fn run_dirs(results: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(results).with_context(|| format!("listing {}", results.display()))? {
        let path = entry?.path();
        if path.join(CHECKPOINT_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Evaluates every trained run in `results` on one cohort of `data`.
pub fn evaluate(config: &RunConfig, data: &Path, results: &Path, cohort: &str) -> Result<Vec<EvaluationRow>> {
    let entries = read_cohort_entries(&manifest_path(data, cohort))
        .with_context(|| format!("loading cohort {cohort} from {}", data.display()))?;
    let dirs = run_dirs(results)?;
    if dirs.is_empty() {
        bail!("no trained runs (directories with {CHECKPOINT_FILE}) in {}", results.display());
    }
    let mut rows = Vec::new();
    for dir in dirs {
        let (ck, standardizer) = load_model(&dir.join(CHECKPOINT_FILE))?;
        let (report, level) = evaluate_model(config, &ck, &standardizer, &entries, cohort)?;
        let slides: Vec<SlideRow> = report
            .slides
            .iter()
            .map(|s| SlideRow {
                slide_id: &s.slide_id,
                auc: s.auc,
            })
            .collect();
        write_csv(&dir.join(format!("slides_{cohort}.csv")), &slides)?;
        let roc: Vec<RocPoint> = report.roc.iter().map(|&(fpr, tpr)| RocPoint { fpr, tpr }).collect();
        write_csv(&dir.join(format!("roc_{cohort}.csv")), &roc)?;
        log::info!("{} on {cohort}: pooled AUC {:.4}", report.method, report.pooled_auc);
        rows.push(EvaluationRow {
            run: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            method: report.method.clone(),
            cohort: cohort.to_string(),
            level: level.to_string(),
            pooled_auc: report.pooled_auc,
            mean_slide_auc: report.mean_slide_auc(),
            slides: report.slides.len(),
            skipped: report.skipped(),
            elements: report.tiles,
        });
    }
    config.write_copy(results)?;
    write_csv(&results.join(format!("evaluation_{cohort}.csv")), &rows)?;
    Ok(rows)
}
