//! One function per subcommand. Each is deterministic given the config, so
//! rerunning a command rewrites identical files.

use std::fs;
use std::path::{Path, PathBuf};

use objctx::analysis::{mean_distance_loss, sensitivity_map, SensitivityMap};
use objctx::checkpoint::{self, CheckpointInfo};
use objctx::dataset::{write_json, AnnotationRecord, BoxRecord};
use objctx::imaging::{Image, IntRect};
use objctx::network::{ContextNet, Variant};
use objctx::retrieval::{evaluate_recall_at_k, Mode};
use objctx::sampling::normalize_images;
use objctx::synthetic::{detect_all, generate_scene, WorldConfig};
use objctx::tensor::ClassLabel;
use objctx::training::{fixed_pairs, train, EpochReport};

use crate::config::{RunConfig, Split};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, ContextScorer, SceneTruth};
use crate::runs::{ContextSource, RunDir, RunManifest, RUN_VERSION};

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn init_config(preset: &str, out: &Path, force: bool) -> CliResult<()> {
    if out.exists() && !force {
        return Err(CliError::Config(format!(
            "{} exists; pass --force to overwrite",
            out.display()
        )));
    }
    let text = RunConfig::preset(preset)?.to_toml()?;
    fs::write(out, text).map_err(|e| CliError::io(out, e))
}

/// Renders both splits with the oracle detector's output and the full
/// synthetic truth.
pub fn generate_data(cfg: &RunConfig) -> CliResult<()> {
    for split in [Split::Train, Split::Test] {
        let (world, indices) = match split {
            Split::Train => (cfg.world.clone(), 0..cfg.data.train_scenes),
            Split::Test => (
                WorldConfig {
                    off_site_objects: cfg.data.test_off_site_objects,
                    ..cfg.world.clone()
                },
                cfg.data.test_first_index..cfg.data.test_first_index + cfg.data.test_scenes,
            ),
        };
        let dir = cfg.split_dir(split);
        create_dir(&dir)?;
        let mut scenes = Vec::new();
        for i in indices {
            let scene = generate_scene(&world, i)?;
            scene.image.pixels.save_png(&dir.join(&scene.image.id))?;
            scenes.push((i, scene));
        }
        let boxes =
            |v: &[objctx::geometry::Rect]| v.iter().map(BoxRecord::from_rect).collect::<Vec<_>>();
        let annotations: Vec<AnnotationRecord> = scenes
            .iter()
            .map(|(_, s)| AnnotationRecord::of(s.image.id.clone(), &s.image))
            .collect();
        let truth: Vec<SceneTruth> = scenes
            .iter()
            .map(|(i, s)| SceneTruth {
                file: s.image.id.clone(),
                index: *i,
                sites: boxes(&s.sites),
                missing: boxes(&s.image.missing),
                off_site: boxes(&s.off_site),
                decoys: boxes(&s.decoys),
            })
            .collect();
        write_json(&dir.join("annotations.json"), &annotations)?;
        write_json(
            &dir.join("detections.json"),
            &detect_all(&scenes, &cfg.detector),
        )?;
        write_json(&dir.join("truth.json"), &truth)?;
        log::info!(
            "{}: {} scenes in {}",
            split.name(),
            scenes.len(),
            dir.display()
        );
    }
    Ok(())
}

pub fn model_stem(cfg: &RunConfig, name: &str, which: &str) -> PathBuf {
    cfg.paths.model_dir.join(format!("{name}_{which}"))
}

/// Trains on the training split. Writes `<name>_last` after every epoch,
/// `<name>_best` whenever validation improves, and `<name>_history.json`.
pub fn train_model(
    cfg: &RunConfig,
    variant: Variant,
    mine: bool,
    name: &str,
) -> CliResult<Vec<EpochReport>> {
    if !crate::runs::valid_run_id(name) {
        return Err(CliError::Config(format!("bad model name `{name}`")));
    }
    let data = pipeline::load_split(cfg, Split::Train)?;
    let images = pipeline::to_channels(&data.dataset.images, cfg.network.channels)?;
    let mut tc = cfg.training.clone();
    tc.mining.enabled = mine;
    create_dir(&cfg.paths.model_dir)?;
    let net = ContextNet::build(cfg.network.clone(), variant, cfg.seed)?;
    let (last, best) = (model_stem(cfg, name, "last"), model_stem(cfg, name, "best"));
    let outcome = train(net, &images, &tc, |report, net| {
        let info = CheckpointInfo {
            epoch: Some(report.epoch),
            validation_loss: Some(report.validation.loss),
        };
        checkpoint::save(net, &last, info)?;
        if report.improved {
            checkpoint::save(net, &best, info)?;
        }
        Ok(())
    })?;
    write_json(
        &cfg.paths.model_dir.join(format!("{name}_history.json")),
        &outcome.history,
    )?;
    log::info!(
        "{name}: best epoch {} of {}{}",
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    Ok(outcome.history)
}

/// Context map of a single image, as `.hmap` plus a `.pgm` preview.
pub fn heatmap(cfg: &RunConfig, model: &Path, image: &Path, out: &Path) -> CliResult<()> {
    let net = pipeline::load_model(model)?;
    let img = Image::load(image)?;
    let mut map = pipeline::model_map(&net, &img, cfg)?;
    map.source = image
        .file_name()
        .map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    map.write(out)?;
    map.write_pgm(&out.with_extension("pgm"))?;
    Ok(())
}

/// Retrieval over one split into run directory `run`.
pub fn find(
    cfg: &RunConfig,
    mode: Mode,
    context: ContextSource,
    split: Split,
    run: &str,
) -> CliResult<RunDir> {
    let run = RunDir::new(&cfg.paths.run_dir, run)?;
    let data = pipeline::load_split(cfg, split)?;
    let mut scorer = ContextScorer::new(&context, cfg)?;
    let regions = pipeline::retrieve_split(&data, &mut scorer, mode, cfg)?;
    let truth = pipeline::run_truth(&data, mode);
    let mut config = cfg.clone();
    config.pipeline.mode = mode;
    let manifest = RunManifest {
        version: RUN_VERSION,
        run: run.id.clone(),
        mode,
        context,
        split,
        regions: regions.len(),
        config,
    };
    if run.path.join("crops").is_dir() {
        fs::remove_dir_all(run.path.join("crops")).map_err(|e| CliError::io(&run.path, e))?;
    }
    run.write(&manifest, &regions, truth.as_deref())?;
    for r in &regions {
        let img = data
            .dataset
            .images
            .iter()
            .find(|i| i.id == r.image)
            .ok_or_else(|| CliError::Runtime(format!("region in unknown image {}", r.image)))?;
        pipeline::crop(&img.pixels, r)?.save_png(&run.crop_path(r.rank))?;
    }
    log::info!("{}: {} regions", run.id, regions.len());
    Ok(run)
}

/// `(k, recall@k)` for k = 1..=max_k, also written to `recall.tsv`.
pub fn evaluate(cfg: &RunConfig, run: &str, max_k: usize) -> CliResult<Vec<(usize, f64)>> {
    let run = RunDir::new(&cfg.paths.run_dir, run)?;
    run.manifest()?;
    let regions = run.regions()?;
    let truth = run
        .truth()?
        .ok_or_else(|| CliError::Runtime(format!("run {} has no ground truth", run.id)))?;
    let ks: Vec<usize> = (1..=max_k).collect();
    let rows = evaluate_recall_at_k(&regions, &truth, &ks)
        .ok_or_else(|| CliError::Runtime(format!("run {} has an empty ground truth", run.id)))?;
    let mut text = String::from("k\trecall\n");
    for (k, r) in &rows {
        text.push_str(&format!("{k}\t{r:.6}\n"));
    }
    let path = run.path.join("recall.tsv");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

pub struct SensitivityReport {
    pub map: SensitivityMap,
    pub center_surround: f64,
    pub mean_distance: f64,
}

/// Sensitivity summed over `samples` positive raw crops from the test split,
/// plus the mean masked/raw logit distance over `pairs` held-out pairs.
/// Writes `<out>.hmap`, `<out>.pgm` and `<out>.txt`.
pub fn sensitivity(
    cfg: &RunConfig,
    model: &Path,
    samples: usize,
    pairs: usize,
    epsilon: f64,
    step: usize,
    out: &Path,
) -> CliResult<SensitivityReport> {
    let net = pipeline::load_model(model)?;
    let data = pipeline::load_split(cfg, Split::Test)?;
    let images = normalize_images(&pipeline::to_channels(
        &data.dataset.images,
        net.config().channels,
    )?);
    let side = net.config().input_side;
    let held_out = fixed_pairs(
        &images,
        pairs.max(samples * 2),
        side,
        &cfg.training.sampling,
        cfg.seed,
    )?;
    let probes: Vec<_> = held_out
        .iter()
        .filter(|p| p.label == ClassLabel::Positive)
        .take(samples)
        .map(|p| p.raw.clone())
        .collect();
    let map = sensitivity_map(&net, &probes, epsilon, step)?;
    let m = cfg.training.nominal_mask(side);
    let center_surround = map.center_surround_ratio(&IntRect::centered_in(side, m, m));
    let mean_distance = mean_distance_loss(&net, &held_out)?;
    let heat = map.to_heat_map();
    heat.write(&out.with_extension("hmap"))?;
    heat.write_pgm(&out.with_extension("pgm"))?;
    let text = format!(
        "center_surround_ratio\t{center_surround:.6}\nmean_distance_loss\t{mean_distance:.6}\n"
    );
    let txt = out.with_extension("txt");
    fs::write(&txt, text).map_err(|e| CliError::io(&txt, e))?;
    Ok(SensitivityReport {
        map,
        center_surround,
        mean_distance,
    })
}
