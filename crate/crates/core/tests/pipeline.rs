use concept_atlas::factorizer::{mine_ncavs, project, reconstruction_error};
use concept_atlas::mask::{build_mask_set, continuous_masks, BinaryMask, MaskMeta};
use concept_atlas::report::{export_csv, parse_csv, render_heatmap, HeatmapSpec, LabeledMatrix, MatrixKind};
use concept_atlas::similarity::{bt_sweep, match_concepts, sfss, sfss_matrix, ucs_matrix};
use concept_atlas::synth::planted::{generate_planted_stack, Topology};
use concept_atlas::tensor_store::{load_dump, ManifestEntry, Role};
use concept_atlas::{
    linalg, Cav, CorrelationKind, FactorizationConfig, Manifest, MaskPipelineConfig, NcavSet, PlantedStack,
    PlantedStackSpec, TrainConfig,
};

fn small_stack(seed: u64) -> PlantedStack {
    generate_planted_stack(&PlantedStackSpec {
        n_samples: 24,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn planted_dumps_survive_the_file_system() {
    let dir = tempfile::tempdir().unwrap();
    let stack = small_stack(1);
    stack.write(dir.path()).unwrap();
    let entries = stack
        .sample_ids()
        .iter()
        .map(|id| ManifestEntry {
            sample_id: id.clone(),
            source_path: format!("{id}.png"),
            role: Role::Test,
            concept_label: None,
        })
        .collect();
    let manifest = Manifest::new(entries).unwrap();
    for (i, dump) in stack.layers.iter().enumerate() {
        let loaded = load_dump(dir.path().join(format!("layer{i}.actv"))).unwrap();
        assert_eq!(&loaded, dump);
        manifest.covers(&loaded).unwrap();
    }
    assert!(dir.path().join("truth.json").exists());
}

#[test]
fn permuting_samples_only_reorders_the_basis() {
    let stack = small_stack(2);
    let batch = stack.batch(0);
    let reversed: Vec<String> = batch.sample_ids().iter().rev().cloned().collect();
    let permuted = batch.select(&reversed).unwrap();
    let cfg = FactorizationConfig::new(4, 11);
    let a = mine_ncavs(&batch, &cfg).unwrap();
    let b = mine_ncavs(&permuted, &cfg).unwrap();
    for i in 0..4 {
        let row = a.basis.row(i);
        let best = (0..4)
            .map(|j| {
                row.iter()
                    .zip(b.basis.row(j))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-6, "row {i} has no counterpart (closest {best:e})");
    }
}

#[test]
fn planted_layers_match_their_ground_truth() {
    let stack = generate_planted_stack(&PlantedStackSpec {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = MaskPipelineConfig::default();
    let mut sets = Vec::new();
    let mut ncavs = Vec::new();
    for li in 0..2 {
        let batch = stack.batch(li);
        let set = mine_ncavs(&batch, &FactorizationConfig::new(4, 5)).unwrap();
        assert!(reconstruction_error(&batch, &set).unwrap() < 0.2);
        sets.push(build_mask_set(&project(&batch, &set).unwrap(), &cfg).unwrap());
        ncavs.push(set);
    }
    let m = ucs_matrix(&sets[0], &sets[1]).unwrap();
    let matching = match_concepts(&m);
    let found: Vec<(usize, usize)> = matching.pairs.iter().map(|p| (p.row, p.col)).collect();
    assert_eq!(found, stack.expected_correspondence((0, &ncavs[0]), (1, &ncavs[1])));
    for p in &matching.pairs {
        for c in (0..m.cols()).filter(|&c| c != p.col) {
            assert!(p.score > m.get(p.row, c));
        }
    }
    // reordering columns by the matching puts the matches on the diagonal
    let ordered = m.permute_columns(&matching.column_order(m.cols()));
    for p in &matching.pairs {
        assert_eq!(ordered.get(p.row, p.row), p.score);
    }
}

#[test]
fn sweep_counts_shrink_as_threshold_rises() {
    let stack = small_stack(4);
    let masks: Vec<_> = (0..2)
        .map(|li| {
            let batch = stack.batch(li);
            let set = mine_ncavs(&batch, &FactorizationConfig::new(4, 1)).unwrap();
            continuous_masks(&project(&batch, &set).unwrap(), 32, 32)
        })
        .collect();
    let sweep = bt_sweep(&masks[0], &masks[1], &[0.1, 0.25, 0.5, 0.75, 1.0, 1.5]).unwrap();
    for pair in sweep.windows(2) {
        for k in 0..4 {
            assert!(pair[1].true_pixels_a[k] <= pair[0].true_pixels_a[k]);
            assert!(pair[1].true_pixels_b[k] <= pair[0].true_pixels_b[k]);
        }
    }
    assert!(sweep.last().unwrap().true_pixels_a.iter().all(|&n| n == 0));
}

#[test]
fn mask_archive_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let stack = small_stack(5);
    let batch = stack.batch(0);
    let set = mine_ncavs(&batch, &FactorizationConfig::new(4, 1)).unwrap();
    let masks = build_mask_set(&project(&batch, &set).unwrap(), &MaskPipelineConfig::default()).unwrap();
    masks.write_archive(dir.path()).unwrap();
    let bytes = std::fs::read(dir.path().join("c02_s00003.pgm")).unwrap();
    let meta = MaskMeta {
        sample_id: masks.sample_ids[3].clone(),
        concept_index: 2,
        source: masks.source.clone(),
    };
    let back = BinaryMask::from_pgm(&bytes, meta).unwrap();
    assert_eq!(back.to_bools(), masks.concept(2)[3].to_bools());
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    assert_eq!(index["files"].as_array().unwrap().len(), 4 * 24);
}

#[test]
fn persisted_concepts_reproduce_results() {
    let dir = tempfile::tempdir().unwrap();
    let stack = small_stack(6);
    let batch = stack.batch(1);
    let set = mine_ncavs(&batch, &FactorizationConfig::new(4, 9)).unwrap();
    let sidecar = set.save(dir.path(), "layer1").unwrap();
    let loaded = NcavSet::load(&sidecar).unwrap();
    for (a, b) in set.basis.as_slice().iter().zip(loaded.basis.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }

    let ids = stack.sample_ids().to_vec();
    let layers = stack.layer_concepts(&ids[..12], &ids[12..], &TrainConfig::default()).unwrap();
    let cav = &layers[0].cavs[0];
    cav.save(dir.path(), "c0").unwrap();
    let back = Cav::load(dir.path().join("c0.cav.json")).unwrap();
    assert_eq!(back.concept_label, cav.concept_label);
    assert!(linalg::dot(&back.vector, &cav.vector) > 1.0 - 1e-9);
}

#[test]
fn planted_sfss_self_similarity_and_reports() {
    let stack = generate_planted_stack(&PlantedStackSpec {
        n_samples: 48,
        channels: vec![16, 16, 16],
        presence_probability: 0.5,
        noise_sigma: 1.0,
        topology: Topology::Chained,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let ids = stack.sample_ids().to_vec();
    let layers = stack.layer_concepts(&ids[..24], &ids[24..], &TrainConfig::default()).unwrap();
    for l in &layers {
        assert!((sfss(l, l, CorrelationKind::Spearman).unwrap().value - 1.0).abs() <= 1e-9);
    }
    let m = sfss_matrix(&layers, &layers, CorrelationKind::Pearson).unwrap();
    assert_eq!(m.transpose(), m);

    let labeled = LabeledMatrix::from(&m);
    let back = parse_csv(&export_csv(&labeled), MatrixKind::Sfss).unwrap();
    assert_eq!(back.row_labels, labeled.row_labels);
    for (a, b) in back.values.iter().zip(&labeled.values) {
        assert!((a - b).abs() <= 1e-9);
    }
    let svg = render_heatmap(&labeled, &HeatmapSpec::for_kind(MatrixKind::Sfss)).unwrap();
    assert_eq!(svg.matches(r#"class="cell""#).count(), 9);
    assert!(svg.contains("planted/layer2"));
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_results() {
    let stack = small_stack(8);
    let run = || {
        let batch = stack.batch(0);
        let set = mine_ncavs(&batch, &FactorizationConfig::new(4, 2)).unwrap();
        let masks = build_mask_set(&project(&batch, &set).unwrap(), &MaskPipelineConfig::default()).unwrap();
        (set.basis, ucs_matrix(&masks, &masks).unwrap())
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    let many = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
    assert_eq!(one, many);
}
