//! Implementations behind the CLI commands: load inputs, call into the
//! library, write artifacts. All file names inside `--out` are fixed so the
//! stages compose without extra plumbing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;

use bcond::aggregation::{
    aggregate, classify_patches, read_patch_predictions_csv, read_predictions_csv,
    write_patch_predictions_csv, write_predictions_csv, AggregationMethod, BuildingPrediction,
    PatchPrediction,
};
use bcond::classifier::{load_model, save_model, train, FeatureMode};
use bcond::config::PipelineConfig;
use bcond::dataset::{
    filter_split, parse_manifest, partition, write_manifest, BuildingRecord, ConditionClass,
    SplitRatios,
};
use bcond::descriptor::{describe, read_patch_csv, write_patch_csv, Descriptor, PatchRecord};
use bcond::error::{Error, Result};
use bcond::evaluation::{
    accuracy, confidence_rank, confuse, discount_bars, pearson, write_discount_csv,
    zero_rule, ConfusionMatrix, DiscountSample, MetricsReport, RankedPatch,
};
use bcond::imaging::{compute_gradients, crop, load_gray, GrayImage, PatchSpec, MAX_IMAGE_SIDE};
use bcond::regression::{compare_models, ValuationRow};
use bcond::selection::{
    dump_patches, load_relevance, save_relevance, select_pipeline, train_relevance,
};
use bcond::synth::{generate, SynthSpec};

use crate::{Cli, Command, EvaluateArgs, ExtractArgs, GlobalArgs, PredictArgs, RegressArgs,
    SplitArg, SynthArgs, TrainConditionArgs, TrainRelevanceArgs};

pub fn run(cli: Cli) -> Result<()> {
    if cli.global.workers == 0 {
        return Err(Error::InvalidArgument("workers must be >= 1".into()));
    }
    let cfg = load_config(&cli.global)?;
    std::fs::create_dir_all(&cli.global.out).map_err(|e| io_err(&cli.global.out, e))?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli.global, &cfg, a),
        Command::Extract(a) => cmd_extract(&cli.global, &cfg, a),
        Command::TrainRelevance(a) => cmd_train_relevance(&cli.global, &cfg, a),
        Command::TrainCondition(a) => cmd_train_condition(&cli.global, &cfg, a),
        Command::Predict(a) => cmd_predict(&cli.global, &cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&cli.global, &cfg, a),
        Command::Regress(a) => cmd_regress(&cli.global, &cfg, a),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::parse_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Image paths in manifests are relative to the manifest's directory.
fn image_root(manifest: &Path) -> PathBuf {
    manifest.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn records_for_split(records: &[BuildingRecord], split: SplitArg) -> Result<Vec<BuildingRecord>> {
    let chosen = match split {
        SplitArg::All => records.to_vec(),
        SplitArg::One(label) => filter_split(records, label),
    };
    if chosen.is_empty() {
        return Err(Error::InvalidArgument(match split {
            SplitArg::All => "manifest has no records".to_string(),
            SplitArg::One(label) => format!("no records carry the split label '{label}'"),
        }));
    }
    Ok(chosen)
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))
}

/// house_id -> record index, image path -> record index.
fn manifest_maps(records: &[BuildingRecord]) -> (HashMap<&str, usize>, HashMap<&str, usize>) {
    let mut by_house = HashMap::new();
    let mut by_image = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        by_house.insert(rec.house_id.as_str(), i);
        for img in &rec.images {
            by_image.insert(img.as_str(), i);
        }
    }
    (by_house, by_image)
}

fn cmd_synth(global: &GlobalArgs, cfg: &PipelineConfig, args: &SynthArgs) -> Result<()> {
    let ratios = SplitRatios::new(args.ratios[0], args.ratios[1], args.ratios[2])?;
    let spec = SynthSpec {
        counts: args.counts,
        image_side: args.image_side,
        seed: cfg.seed,
    };
    let mut records = generate(&spec, &global.out)?;
    info!(
        "generated {} houses ({} A, {} B, {} C) at side {}",
        records.len(),
        args.counts[0],
        args.counts[1],
        args.counts[2],
        args.image_side
    );
    let labels = partition(&records, &ratios, cfg.seed)?.label_map();
    for rec in &mut records {
        rec.split = labels.get(&rec.house_id).copied();
    }
    let manifest_path = global.out.join("manifest.json");
    write_manifest(&manifest_path, &records)?;
    let config_path = global.out.join("run_config.txt");
    std::fs::write(&config_path, cfg.run_config_text()).map_err(|e| io_err(&config_path, e))?;
    info!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_extract(global: &GlobalArgs, cfg: &PipelineConfig, args: &ExtractArgs) -> Result<()> {
    let records = parse_manifest(&args.manifest)?;
    let chosen = records_for_split(&records, args.split)?;
    let root = image_root(&args.manifest);
    let keep_pixels = args.dump_dir.is_some();
    let selection = cfg.selection_config(keep_pixels);
    let images: Vec<&str> = chosen
        .iter()
        .flat_map(|r| r.images.iter().map(String::as_str))
        .collect();
    info!(
        "extracting from {} image(s) across {} house(s) with {} worker(s)",
        images.len(),
        chosen.len(),
        global.workers
    );
    let relevance = args
        .relevance_model
        .as_deref()
        .map(load_relevance)
        .transpose()?;
    let pool = worker_pool(global.workers)?;
    let per_image: Vec<Vec<PatchRecord>> = pool.install(|| {
        images
            .par_iter()
            .map(|rel| -> Result<Vec<PatchRecord>> {
                let image = load_gray(&root.join(rel))?;
                let patches = select_pipeline(rel, &image, &selection, relevance.as_ref())?;
                debug!("{rel}: kept {} patches", patches.len());
                Ok(patches)
            })
            .collect::<Result<_>>()
    })?;
    let patches: Vec<PatchRecord> = per_image.into_iter().flatten().collect();
    if let Some(dir) = &args.dump_dir {
        dump_patches(dir, &patches)?;
        info!("dumped {} patch images to {}", patches.len(), dir.display());
    }
    let csv_path = global.out.join("patches.csv");
    write_patch_csv(&csv_path, &patches, Some(&cfg.provenance_line()))?;
    info!("wrote {} patches to {}", patches.len(), csv_path.display());
    Ok(())
}

/// Descriptor of a standalone patch image over its largest centered square.
fn descriptor_of_image(image: &GrayImage) -> Result<Descriptor> {
    let side = image.width().min(image.height());
    let grad = compute_gradients(image)?;
    let spec = PatchSpec {
        image_id: String::new(),
        x: (image.width() - side) / 2,
        y: (image.height() - side) / 2,
        side,
    };
    describe(&grad, &spec)
}

fn sorted_entries(dir: &Path, dirs_only: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_dir() == dirs_only {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_train_relevance(
    global: &GlobalArgs,
    cfg: &PipelineConfig,
    args: &TrainRelevanceArgs,
) -> Result<()> {
    let class_dirs = sorted_entries(&args.patches, true)?;
    if class_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class subdirectories",
            args.patches.display()
        )));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let building_class = class_names
        .iter()
        .position(|n| *n == args.building_class)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "building class '{}' not among {class_names:?}",
                args.building_class
            ))
        })?;
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        for file in sorted_entries(dir, false)? {
            let image = load_gray(&file)?;
            samples.push((descriptor_of_image(&image)?, label));
        }
        debug!("{}: {} patches", class_names[label], samples.len());
    }
    let (mut model, trace) = train_relevance(&samples, &class_names, building_class, &cfg.train)?;
    model.set_config_hash(cfg.hash_u64());
    info!(
        "trained relevance model on {} patches, final loss {:.4}",
        samples.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    let model_path = global.out.join("relevance.model");
    save_relevance(&model, &model_path)?;
    info!("wrote {}", model_path.display());
    Ok(())
}

fn cmd_train_condition(
    global: &GlobalArgs,
    cfg: &PipelineConfig,
    args: &TrainConditionArgs,
) -> Result<()> {
    let records = parse_manifest(&args.manifest)?;
    let chosen = records_for_split(&records, args.split)?;
    let (_, by_image) = manifest_maps(&chosen);
    let root = image_root(&args.manifest);
    let all_patches = read_patch_csv(&args.patches)?;
    let mut patches: Vec<PatchRecord> = all_patches
        .into_iter()
        .filter(|p| by_image.contains_key(p.spec.image_id.as_str()))
        .collect();
    if patches.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no patches from the requested split",
            args.patches.display()
        )));
    }
    if args.feature_mode == FeatureMode::Pixels || args.augment_factor > 1 {
        attach_pixels(&mut patches, &root)?;
    }
    let samples: Vec<(PatchRecord, ConditionClass)> = patches
        .into_iter()
        .map(|p| {
            let idx = by_image[p.spec.image_id.as_str()];
            let class = chosen[idx].class();
            (p, class)
        })
        .collect();
    let outcome = train(&samples, &cfg.train, args.augment_factor.max(1), args.feature_mode)?;
    let mut model = outcome.model;
    model.set_config_hash(cfg.hash_u64());
    info!(
        "trained condition model on {} patches x{} augmentation, final loss {:.4}",
        samples.len(),
        args.augment_factor.max(1),
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    let model_path = global.out.join("condition.model");
    save_model(&model, &model_path)?;
    info!("wrote {}", model_path.display());
    Ok(())
}

/// Re-crops patch pixels from the source images, applying the same downscale
/// the extraction pipeline used so the stored coordinates line up.
fn attach_pixels(patches: &mut [PatchRecord], root: &Path) -> Result<()> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, p) in patches.iter().enumerate() {
        let id = p.spec.image_id.as_str();
        if !groups.contains_key(id) {
            order.push(id);
        }
        groups.entry(id).or_default().push(i);
    }
    let mut crops: HashMap<usize, GrayImage> = HashMap::new();
    for id in order {
        let image = load_gray(&root.join(id))?.downscale_to_max(MAX_IMAGE_SIDE)?;
        for &i in &groups[id] {
            crops.insert(i, crop(&image, &patches[i].spec)?);
        }
    }
    for (i, p) in patches.iter_mut().enumerate() {
        p.pixels = crops.remove(&i);
    }
    Ok(())
}

fn cmd_predict(global: &GlobalArgs, cfg: &PipelineConfig, args: &PredictArgs) -> Result<()> {
    let records = parse_manifest(&args.manifest)?;
    let chosen = records_for_split(&records, args.split)?;
    let root = image_root(&args.manifest);
    let model = load_model(&args.model)?;
    if model.config_hash() != cfg.hash_u64() {
        info!(
            "model was trained under config hash {:016x}, current is {:016x}",
            model.config_hash(),
            cfg.hash_u64()
        );
    }
    let relevance = args
        .relevance_model
        .as_deref()
        .map(load_relevance)
        .transpose()?;
    let mut selection = cfg.selection_config(false);
    if model.mode() == FeatureMode::Pixels {
        selection.keep_pixels = true;
    }
    let methods = args.method.methods();
    info!(
        "predicting {} house(s) with {} worker(s)",
        chosen.len(),
        global.workers
    );
    let pool = worker_pool(global.workers)?;
    type HouseOutput = (Vec<BuildingPrediction>, Vec<PatchPrediction>);
    let per_house: Vec<HouseOutput> = pool.install(|| {
        chosen
            .par_iter()
            .map(|rec| -> Result<HouseOutput> {
                let mut patch_predictions = Vec::new();
                for rel in &rec.images {
                    let image = load_gray(&root.join(rel))?;
                    let patches = select_pipeline(rel, &image, &selection, relevance.as_ref())?;
                    patch_predictions.extend(classify_patches(&patches, &model)?);
                }
                let mut house = Vec::with_capacity(methods.len());
                for &method in &methods {
                    house.push(aggregate(
                        &rec.house_id,
                        &patch_predictions,
                        method,
                        cfg.ambiguity_threshold,
                    )?);
                }
                debug!(
                    "{}: {} patch predictions",
                    rec.house_id,
                    patch_predictions.len()
                );
                Ok((house, patch_predictions))
            })
            .collect::<Result<_>>()
    })?;
    let mut buildings = Vec::new();
    let mut patch_rows = Vec::new();
    for (house, mut patch_predictions) in per_house {
        buildings.extend(house);
        patch_rows.append(&mut patch_predictions);
    }
    let csv_path = global.out.join("predictions.csv");
    write_predictions_csv(&csv_path, &buildings, Some(&cfg.provenance_line()))?;
    info!("wrote {} verdicts to {}", buildings.len(), csv_path.display());
    if let Some(path) = &args.patch_out {
        write_patch_predictions_csv(path, &patch_rows, Some(&cfg.provenance_line()))?;
        info!("wrote {} patch rows to {}", patch_rows.len(), path.display());
    }
    Ok(())
}

/// Building predictions from a CSV grouped per house in first-seen order.
struct GroupedPredictions {
    houses: Vec<String>,
    mv: HashMap<String, BuildingPrediction>,
    lh: HashMap<String, BuildingPrediction>,
}

fn group_predictions(path: &Path) -> Result<GroupedPredictions> {
    let rows = read_predictions_csv(path)?;
    let mut grouped = GroupedPredictions {
        houses: Vec::new(),
        mv: HashMap::new(),
        lh: HashMap::new(),
    };
    for row in rows {
        if !grouped.mv.contains_key(&row.image_id) && !grouped.lh.contains_key(&row.image_id) {
            grouped.houses.push(row.image_id.clone());
        }
        let slot = match row.method {
            AggregationMethod::MajorityVote => &mut grouped.mv,
            AggregationMethod::AverageLikelihood => &mut grouped.lh,
        };
        if slot.insert(row.image_id.clone(), row).is_some() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                reason: "duplicate prediction row for one house and method".into(),
            });
        }
    }
    Ok(grouped)
}

fn cmd_evaluate(global: &GlobalArgs, cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<()> {
    let records = parse_manifest(&args.manifest)?;
    let (by_house, by_image) = manifest_maps(&records);
    let grouped = group_predictions(&args.predictions)?;
    let mut truths = Vec::new();
    let mut mv_pairs: Vec<(ConditionClass, ConditionClass)> = Vec::new();
    let mut lh_pairs: Vec<(ConditionClass, ConditionClass)> = Vec::new();
    let mut ages = Vec::new();
    let mut ordinals = Vec::new();
    let mut n_undecidable = 0u64;
    let mut discounts = Vec::new();
    for house in &grouped.houses {
        let rec = by_house
            .get(house.as_str())
            .map(|&i| &records[i])
            .ok_or_else(|| Error::Stats(format!("prediction for unknown house '{house}'")))?;
        let truth = rec.class();
        truths.push(truth);
        ages.push((args.reference_year - rec.year_built) as f64);
        ordinals.push(truth.ordinal());
        let mv = grouped.mv.get(house);
        let lh = grouped.lh.get(house);
        if let Some(v) = mv.and_then(|p| p.verdict) {
            mv_pairs.push((truth, v));
        }
        if let Some(v) = lh.and_then(|p| p.verdict) {
            lh_pairs.push((truth, v));
        }
        let undecided = |p: Option<&BuildingPrediction>| p.is_some_and(|p| p.verdict.is_none());
        if undecided(mv) || undecided(lh) {
            n_undecidable += 1;
        }
        if let Some(value) = rec.retained_value {
            discounts.push(DiscountSample {
                retained_value: value,
                true_class: truth,
                mv: mv.and_then(|p| p.verdict),
                lh: lh.and_then(|p| p.verdict),
            });
        }
    }
    let matrix_of = |pairs: &[(ConditionClass, ConditionClass)]| -> Result<Option<ConfusionMatrix>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let truth: Vec<ConditionClass> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<ConditionClass> = pairs.iter().map(|p| p.1).collect();
        Ok(Some(confuse(&truth, &pred)?))
    };
    let confusion_mv = matrix_of(&mv_pairs)?;
    let confusion_lh = matrix_of(&lh_pairs)?;
    let accuracy_of =
        |m: &Option<ConfusionMatrix>| -> Result<Option<f64>> { m.as_ref().map(accuracy).transpose() };
    let report = MetricsReport {
        accuracy_mv: accuracy_of(&confusion_mv)?,
        accuracy_lh: accuracy_of(&confusion_lh)?,
        confusion_mv,
        confusion_lh,
        zero_rule: zero_rule(&truths)?,
        n_undecidable,
        pearson_age_condition: pearson(&ages, &ordinals).ok(),
        provenance: Some(cfg.provenance()),
    };
    let metrics_path = global.out.join("metrics.json");
    report.write_json(&metrics_path)?;
    info!("wrote {}", metrics_path.display());
    let bars_path = global.out.join("discount_bars.csv");
    write_discount_csv(&bars_path, &discount_bars(&discounts), Some(&cfg.provenance_line()))?;
    info!(
        "wrote {} ({} house(s) with valuations)",
        bars_path.display(),
        discounts.len()
    );
    if let Some(patch_path) = &args.patch_predictions {
        let ranked: Vec<RankedPatch> = read_patch_predictions_csv(patch_path)?
            .into_iter()
            .map(|p| -> Result<RankedPatch> {
                let idx = by_image.get(p.spec.image_id.as_str()).ok_or_else(|| {
                    Error::Stats(format!(
                        "patch prediction for unknown image '{}'",
                        p.spec.image_id
                    ))
                })?;
                Ok(RankedPatch {
                    spec: p.spec,
                    true_class: records[*idx].class(),
                    likelihoods: p.likelihoods,
                })
            })
            .collect::<Result<_>>()?;
        let exemplars = confidence_rank(&ranked, args.confidence)?;
        let wrapped = serde_json::json!({
            "provenance": cfg.provenance(),
            "report": exemplars,
        });
        let json = serde_json::to_string_pretty(&wrapped)
            .map_err(|e| Error::Stats(format!("exemplar serialization: {e}")))?;
        let path = global.out.join("exemplars.json");
        std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_regress(global: &GlobalArgs, cfg: &PipelineConfig, args: &RegressArgs) -> Result<()> {
    let records = parse_manifest(&args.manifest)?;
    let (by_house, _) = manifest_maps(&records);
    let grouped = group_predictions(&args.predictions)?;
    let mut rows = Vec::new();
    for house in &grouped.houses {
        let rec = by_house
            .get(house.as_str())
            .map(|&i| &records[i])
            .ok_or_else(|| Error::Stats(format!("prediction for unknown house '{house}'")))?;
        rows.push(ValuationRow {
            year_built: rec.year_built,
            retained_value: rec.retained_value,
            true_class: rec.class(),
            mv: grouped.mv.get(house).and_then(|p| p.verdict),
            lh: grouped.lh.get(house).and_then(|p| p.verdict),
        });
    }
    if !rows.iter().any(|r| r.retained_value.is_some()) {
        return Err(Error::Stats("no regression response available".into()));
    }
    let mut report = compare_models(&rows)?;
    report.provenance = Some(cfg.provenance());
    let json_path = global.out.join("regression.json");
    report.write_json(&json_path)?;
    let table = format!("# {}\n\n{}", cfg.provenance_line(), report.to_table());
    let txt_path = global.out.join("regression.txt");
    std::fs::write(&txt_path, table).map_err(|e| io_err(&txt_path, e))?;
    info!("wrote {} and {}", json_path.display(), txt_path.display());
    Ok(())
}
