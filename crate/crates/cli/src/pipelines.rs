use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use concept_atlas::cav::train_cav;
use concept_atlas::factorizer::{mine_ncavs, project};
use concept_atlas::mask::{continuous_masks, BinaryMask, MaskMeta};
use concept_atlas::report::{export_csv, render_heatmap, HeatmapSpec, LabeledMatrix};
use concept_atlas::similarity::{bt_sweep, match_concepts, sfss_matrix, ucs_matrix};
use concept_atlas::synth::planted::{generate_planted_stack, Topology};
use concept_atlas::synth::{crop_superpixels, demo_pool, generate_dataset};
use concept_atlas::tensor_store::{self, load_dump, slice_batch, Role};
use concept_atlas::{
    rng, ConceptDataset, ContinuousMaskSet, LayerConcepts, LayerRef, Manifest, NcavSet,
    PlantedStackSpec, Superpixel, TensorDump, TrainConfig, UcsMatrix,
};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

/// Label marking manifest entries that are negatives for every concept.
pub const NEGATIVE_LABEL: &str = "_negative";

/// Collects artifacts under the output directory.
pub struct Outputs {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Output {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, bytes).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        self.written.push(path);
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        self.write(name, serde_json::to_string_pretty(value).expect("json values serialize") + "\n")
    }

    /// CSV plus SVG heatmap for one matrix.
    pub fn matrix(&mut self, stem: &str, m: &LabeledMatrix, cell_labels: bool) -> Result<(), CliError> {
        let spec = HeatmapSpec {
            cell_labels,
            ..HeatmapSpec::for_kind(m.kind)
        };
        self.write(&format!("{stem}.csv"), export_csv(m))?;
        self.write(&format!("{stem}.svg"), render_heatmap(m, &spec)?)
    }
}

/// Share of degenerate cells must not exceed the configured limit.
pub fn check_degenerate(degenerate: usize, cells: usize, limit: f64) -> Result<f64, CliError> {
    let fraction = if cells == 0 { 0.0 } else { degenerate as f64 / cells as f64 };
    if fraction > limit {
        Err(CliError::Degenerate { fraction, limit })
    } else {
        Ok(fraction)
    }
}

struct Split {
    train: Option<Vec<String>>,
    test: Option<Vec<String>>,
}

fn load_manifest(config: &RunConfig) -> Result<Option<Manifest>, CliError> {
    config.inputs.manifest.as_ref().map(|p| Ok(Manifest::load(p)?)).transpose()
}

fn split_of(manifest: Option<&Manifest>) -> Split {
    let ids = |role| manifest.map(|m| m.ids_with_role(role)).filter(|ids: &Vec<String>| !ids.is_empty());
    Split {
        train: ids(Role::Train),
        test: ids(Role::Test),
    }
}

fn load_layers(paths: &[PathBuf], manifest: Option<&Manifest>) -> Result<Vec<TensorDump>, CliError> {
    paths
        .iter()
        .map(|p| {
            let dump = load_dump(p)?;
            if let Some(m) = manifest {
                m.covers(&dump)?;
            }
            Ok(dump)
        })
        .collect()
}

/// Mined concepts and their continuous test-set masks for one layer.
struct LayerMasks {
    ncavs: NcavSet,
    masks: ContinuousMaskSet,
}

fn layer_masks(dump: &TensorDump, split: &Split, config: &RunConfig) -> Result<LayerMasks, CliError> {
    let select = |ids: &Option<Vec<String>>| match ids {
        Some(ids) => slice_batch(dump, ids),
        None => Ok(dump.to_batch()),
    };
    let ncavs = mine_ncavs(&select(&split.train)?, &config.factorization)?;
    let acts = project(&select(&split.test)?, &ncavs)?;
    let masks = continuous_masks(&acts, config.masks.output_width, config.masks.output_height);
    Ok(LayerMasks { ncavs, masks })
}

/// Computes masks for both sides, sharing work when a path appears on both.
fn masks_for_inputs(config: &RunConfig) -> Result<(Vec<LayerMasks>, Vec<usize>, Vec<usize>), CliError> {
    let manifest = load_manifest(config)?;
    let split = split_of(manifest.as_ref());
    let mut paths: Vec<PathBuf> = Vec::new();
    let index = |p: &PathBuf, paths: &mut Vec<PathBuf>| match paths.iter().position(|q| q == p) {
        Some(i) => i,
        None => {
            paths.push(p.clone());
            paths.len() - 1
        }
    };
    let rows: Vec<usize> = config.inputs.layers_a.iter().map(|p| index(p, &mut paths)).collect();
    let cols: Vec<usize> = config.layers_b().iter().map(|p| index(p, &mut paths)).collect();
    let dumps = load_layers(&paths, manifest.as_ref())?;
    let layers = dumps
        .iter()
        .map(|d| layer_masks(d, &split, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((layers, rows, cols))
}

fn require_layers(config: &RunConfig) -> Result<(), CliError> {
    if config.inputs.layers_a.is_empty() {
        return Err(CliError::Config("inputs.layers_a lists no dumps".into()));
    }
    Ok(())
}

fn ncav_summary(set: &NcavSet) -> Value {
    json!({
        "id": set.id(),
        "layer": set.source.to_string(),
        "iterations_run": set.iterations_run,
        "final_relative_error": set.final_relative_error,
        "dead_rows": set.dead_rows,
    })
}

fn ucs_summary(m: &UcsMatrix) -> Value {
    let matching = match_concepts(m);
    json!({
        "rows": m.row_concepts.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "cols": m.col_concepts.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "n_samples": m.n_samples,
        "excluded_samples": (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.excluded(r, c)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "fully_excluded_cells": m.fully_excluded_cells(),
        "matching": matching.pairs.iter().map(|p| json!({
            "row": m.row_concepts[p.row].to_string(),
            "col": m.col_concepts[p.col].to_string(),
            "score": p.score,
        })).collect::<Vec<_>>(),
        "matching_total": matching.total_score,
    })
}

pub fn ucs(config: &RunConfig, out: &mut Outputs) -> Result<Value, CliError> {
    require_layers(config)?;
    let (layers, rows, cols) = masks_for_inputs(config)?;
    let mut pairs = Vec::new();
    let (mut degenerate, mut cells) = (0, 0);
    for (i, &a) in rows.iter().enumerate() {
        for (j, &b) in cols.iter().enumerate() {
            let ma = layers[a].masks.binarize(config.masks.threshold);
            let mb = layers[b].masks.binarize(config.masks.threshold);
            let m = ucs_matrix(&ma, &mb)?;
            out.matrix(&format!("ucs_{i}_{j}"), &LabeledMatrix::from(&m), config.report.cell_labels)?;
            degenerate += m.fully_excluded_cells();
            cells += m.rows() * m.cols();
            pairs.push(json!({
                "file": format!("ucs_{i}_{j}.csv"),
                "row_layer": m.row_concepts.first().map(|c| c.layer.to_string()),
                "col_layer": m.col_concepts.first().map(|c| c.layer.to_string()),
                "matrix": ucs_summary(&m),
            }));
        }
    }
    let fraction = degenerate as f64 / cells.max(1) as f64;
    let report = json!({
        "pipeline": "ucs",
        "threshold": config.masks.threshold,
        "ncavs": layers.iter().map(|l| ncav_summary(&l.ncavs)).collect::<Vec<_>>(),
        "degenerate_masks": layers.iter().map(|l| json!({
            "layer": l.masks.source.to_string(),
            "count": l.masks.degenerate_count(),
        })).collect::<Vec<_>>(),
        "pairs": pairs,
        "degenerate_fraction": fraction,
    });
    out.json("report.json", &report)?;
    check_degenerate(degenerate, cells, config.report.max_degenerate_fraction)?;
    Ok(report)
}

pub fn btsweep(config: &RunConfig, out: &mut Outputs) -> Result<Value, CliError> {
    require_layers(config)?;
    let (layers, rows, cols) = masks_for_inputs(config)?;
    let mut pairs = Vec::new();
    let (mut degenerate, mut cells) = (0, 0);
    for (i, &a) in rows.iter().enumerate() {
        for (j, &b) in cols.iter().enumerate() {
            let sweep = bt_sweep(&layers[a].masks, &layers[b].masks, &config.report.thresholds)?;
            let mut points = Vec::new();
            for point in &sweep {
                let stem = format!("btsweep_{i}_{j}_bt{}", point.threshold);
                out.matrix(&stem, &LabeledMatrix::from(&point.matrix), config.report.cell_labels)?;
                degenerate += point.matrix.fully_excluded_cells();
                cells += point.matrix.rows() * point.matrix.cols();
                points.push(json!({
                    "threshold": point.threshold,
                    "file": format!("{stem}.csv"),
                    "true_pixels_a": point.true_pixels_a,
                    "true_pixels_b": point.true_pixels_b,
                    "matrix": ucs_summary(&point.matrix),
                }));
            }
            pairs.push(json!({ "row_index": i, "col_index": j, "points": points }));
        }
    }
    let fraction = degenerate as f64 / cells.max(1) as f64;
    let report = json!({
        "pipeline": "btsweep",
        "thresholds": config.report.thresholds,
        "ncavs": layers.iter().map(|l| ncav_summary(&l.ncavs)).collect::<Vec<_>>(),
        "pairs": pairs,
        "degenerate_fraction": fraction,
    });
    out.json("report.json", &report)?;
    check_degenerate(degenerate, cells, config.report.max_degenerate_fraction)?;
    Ok(report)
}

/// Positives per concept label, negatives from the other labels and `_negative`.
fn concept_splits(manifest: &Manifest) -> Vec<(String, Vec<String>, Vec<String>)> {
    let train: Vec<_> = manifest.entries.iter().filter(|e| e.role == Role::Train).collect();
    let labels: BTreeSet<&str> = train
        .iter()
        .filter_map(|e| e.concept_label.as_deref())
        .filter(|l| *l != NEGATIVE_LABEL)
        .collect();
    labels
        .into_iter()
        .map(|label| {
            let (pos, neg): (Vec<_>, Vec<_>) = train
                .iter()
                .filter(|e| e.concept_label.is_some())
                .partition(|e| e.concept_label.as_deref() == Some(label));
            let ids = |v: Vec<&&concept_atlas::tensor_store::ManifestEntry>| v.into_iter().map(|e| e.sample_id.clone()).collect();
            (label.to_string(), ids(pos), ids(neg))
        })
        .collect()
}

fn layer_concepts(
    dump: &TensorDump,
    splits: &[(String, Vec<String>, Vec<String>)],
    test_ids: &[String],
    config: &RunConfig,
) -> Result<LayerConcepts, CliError> {
    let mut cavs = Vec::with_capacity(splits.len());
    for (k, (label, pos, neg)) in splits.iter().enumerate() {
        let ds = ConceptDataset {
            positives: slice_batch(dump, pos)?,
            negatives: slice_batch(dump, neg)?,
            concept_label: label.clone(),
        };
        let train = TrainConfig {
            seed: rng::derive_seed(config.train.seed, k as u64),
            ..config.train.clone()
        };
        cavs.push(train_cav(&ds, &train)?);
    }
    Ok(LayerConcepts {
        layer: dump.layer().clone(),
        cavs,
        test: slice_batch(dump, test_ids)?,
    })
}

pub fn sfss(config: &RunConfig, out: &mut Outputs) -> Result<Value, CliError> {
    require_layers(config)?;
    let manifest = load_manifest(config)?
        .ok_or_else(|| CliError::Config("sfss needs inputs.manifest with train/test roles and concept labels".into()))?;
    let splits = concept_splits(&manifest);
    if splits.is_empty() {
        return Err(CliError::Config("manifest has no labelled training concepts".into()));
    }
    let test_ids = manifest.ids_with_role(Role::Test);
    if test_ids.len() < 2 {
        return Err(CliError::Config("manifest needs at least two test samples".into()));
    }
    let build = |paths: &[PathBuf]| -> Result<Vec<LayerConcepts>, CliError> {
        load_layers(paths, Some(&manifest))?
            .iter()
            .map(|d| layer_concepts(d, &splits, &test_ids, config))
            .collect()
    };
    let a = build(&config.inputs.layers_a)?;
    let b = if config.inputs.layers_b.is_empty() { a.clone() } else { build(&config.inputs.layers_b)? };
    let m = sfss_matrix(&a, &b, config.report.correlation)?;
    out.matrix("sfss", &LabeledMatrix::from(&m), config.report.cell_labels)?;
    for l in a.iter().chain(&b) {
        let layer_dir = format!("cavs/{}_{}", l.layer.model_id, l.layer.layer_id);
        for (k, cav) in l.cavs.iter().enumerate() {
            let dir = out.dir().join(&layer_dir);
            std::fs::create_dir_all(&dir).map_err(|source| CliError::Output { path: dir.clone(), source })?;
            cav.save(&dir, &format!("concept{k:02}"))?;
        }
    }
    let degenerate = m.degenerate_counts().iter().filter(|&&d| d > 0).count();
    let cells = m.rows() * m.cols();
    let report = json!({
        "pipeline": "sfss",
        "correlation": config.report.correlation,
        "concepts": m.concept_labels,
        "n_test_samples": m.n_samples,
        "rows": m.row_layers.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "cols": m.col_layers.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "degenerate_concepts": (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.degenerate(r, c)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "train_accuracy": a.iter().chain(&b).map(|l| json!({
            "layer": l.layer.to_string(),
            "accuracy": l.cavs.iter().map(|c| (c.concept_label.clone(), c.train_accuracy)).collect::<std::collections::BTreeMap<_, _>>(),
        })).collect::<Vec<_>>(),
        "degenerate_fraction": degenerate as f64 / cells.max(1) as f64,
    });
    out.json("report.json", &report)?;
    check_degenerate(degenerate, cells, config.report.max_degenerate_fraction)?;
    Ok(report)
}

fn load_pool(manifest_path: &Path) -> Result<Vec<Superpixel>, CliError> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let source = LayerRef::new("image", "mask")?;
    let mut pool = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let label = e
            .concept_label
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("pool entry {} has no concept_label", e.sample_id)))?;
        let image_path = base.join(&e.source_path);
        let mask_path = image_path.with_extension("mask.pgm");
        for p in [&image_path, &mask_path] {
            if !p.exists() {
                return Err(CliError::MissingInput(p.clone()));
            }
        }
        let image = image::open(&image_path)
            .map_err(|e| CliError::Module {
                module: "synth-forge",
                message: format!("{}: {e}", image_path.display()),
            })?
            .to_rgb8();
        let bytes = std::fs::read(&mask_path).map_err(|_| CliError::MissingInput(mask_path.clone()))?;
        let meta = MaskMeta {
            sample_id: e.sample_id.clone(),
            concept_index: 0,
            source: source.clone(),
        };
        let mask = BinaryMask::from_pgm(&bytes, meta)?;
        pool.push(crop_superpixels(&image, &mask, label, &e.sample_id)?);
    }
    Ok(pool)
}

pub fn synthgen(config: &RunConfig, out: &mut Outputs) -> Result<Value, CliError> {
    let pool = match &config.synth.pool_manifest {
        Some(p) => load_pool(p)?,
        None => demo_pool(),
    };
    let dataset = generate_dataset(&pool, &config.synth.generator, config.synth.n_samples)?;
    dataset.write(out.dir(), config.synth.generator.seed)?;
    for id in &dataset.sample_ids {
        out.written.push(out.dir().join(format!("{id}.png")));
    }
    out.written.push(out.dir().join("provenance.json"));
    out.written.push(out.dir().join("synth.manifest.json"));
    let report = json!({
        "pipeline": "synthgen",
        "n_samples": dataset.samples.len(),
        "pool": pool.iter().map(|s| json!({
            "concept_label": s.concept_label,
            "source_sample_id": s.source_sample_id,
            "width": s.width,
            "height": s.height,
        })).collect::<Vec<_>>(),
        "patches": dataset.samples.iter().map(|s| s.placements.len()).sum::<usize>(),
    });
    out.json("report.json", &report)?;
    Ok(report)
}

/// Planted end-to-end run: 4/4 concept recovery across two layers and a
/// depth-graded SFSS matrix.
pub fn selfcheck(config: &RunConfig, out: &mut Outputs) -> Result<Value, CliError> {
    let spec = &config.selfcheck.planted;
    if spec.channels.len() < 2 {
        return Err(CliError::Config("selfcheck.planted.channels needs at least two layers".into()));
    }
    let stack = generate_planted_stack(spec)?;
    let mut factorization = config.factorization.clone();
    factorization.n_concepts = spec.n_concepts;
    let mut sets = Vec::new();
    let mut ncavs = Vec::new();
    for li in 0..2 {
        let batch = stack.batch(li);
        let set = mine_ncavs(&batch, &factorization)?;
        let acts = project(&batch, &set)?;
        let masks = continuous_masks(&acts, config.masks.output_width, config.masks.output_height);
        sets.push(masks.binarize(config.masks.threshold));
        ncavs.push(set);
    }
    let m = ucs_matrix(&sets[0], &sets[1])?;
    out.matrix("ucs", &LabeledMatrix::from(&m), config.report.cell_labels)?;
    let matching = match_concepts(&m);
    let found: Vec<(usize, usize)> = matching.pairs.iter().map(|p| (p.row, p.col)).collect();
    let expected = stack.expected_correspondence((0, &ncavs[0]), (1, &ncavs[1]));
    let hits = found.iter().filter(|p| expected.contains(p)).count();
    let margin = found
        .iter()
        .map(|&(r, c)| {
            let other = (0..m.cols()).filter(|&j| j != c).map(|j| m.get(r, j)).fold(f64::NEG_INFINITY, f64::max);
            m.get(r, c) - other
        })
        .fold(f64::INFINITY, f64::min);
    let recovered = hits == spec.n_concepts && expected.len() == spec.n_concepts && margin > 0.0;

    let depth_spec = PlantedStackSpec {
        n_samples: 2 * spec.n_samples,
        channels: vec![spec.channels[0]; config.selfcheck.depth_layers],
        noise_sigma: config.selfcheck.depth_noise,
        presence_probability: 0.5,
        topology: Topology::Chained,
        ..spec.clone()
    };
    let depth_stack = generate_planted_stack(&depth_spec)?;
    let ids = depth_stack.sample_ids().to_vec();
    let (train, test) = ids.split_at(ids.len() / 2);
    let layers = depth_stack.layer_concepts(train, test, &config.train)?;
    let s = sfss_matrix(&layers, &layers, config.report.correlation)?;
    out.matrix("sfss_depth", &LabeledMatrix::from(&s), config.report.cell_labels)?;
    let (diag, off) = s.diagonal_contrast();
    let depth_ok = diag - off >= config.selfcheck.min_depth_contrast;

    let report = json!({
        "pipeline": "selfcheck",
        "recovery": {
            "matched": hits,
            "expected": spec.n_concepts,
            "pairs": found,
            "ground_truth": expected,
            "smallest_row_margin": margin,
            "passed": recovered,
            "ucs": ucs_summary(&m),
        },
        "depth": {
            "layers": config.selfcheck.depth_layers,
            "diagonal_mean": diag,
            "off_diagonal_mean": off,
            "contrast": diag - off,
            "required": config.selfcheck.min_depth_contrast,
            "passed": depth_ok,
        },
        "passed": recovered && depth_ok,
    });
    out.json("report.json", &report)?;
    if !recovered {
        return Err(CliError::SelfcheckFailed(format!(
            "recovered {hits}/{} concept matches (row margin {margin:.3})",
            spec.n_concepts
        )));
    }
    if !depth_ok {
        return Err(CliError::SelfcheckFailed(format!(
            "depth contrast {:.3} below {}",
            diag - off,
            config.selfcheck.min_depth_contrast
        )));
    }
    Ok(report)
}

/// Header and value summary of a dump.
pub fn inspect(path: &Path) -> Result<Value, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let dump = tensor_store::load_dump(path)?;
    let data = dump.data();
    let (min, max) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / data.len() as f64;
    Ok(json!({
        "path": path.display().to_string(),
        "model_id": dump.layer().model_id,
        "layer_id": dump.layer().layer_id,
        "dtype": dump.dtype(),
        "shape": dump.shape(),
        "n_samples": dump.sample_ids().len(),
        "first_sample_ids": dump.sample_ids().iter().take(5).collect::<Vec<_>>(),
        "min": min,
        "max": max,
        "mean": mean,
        "negative_fraction": data.iter().filter(|v| **v < 0.0).count() as f64 / data.len() as f64,
    }))
}
