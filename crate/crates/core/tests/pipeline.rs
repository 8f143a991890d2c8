use std::collections::BTreeSet;
use std::sync::Mutex;

use csmil::clustering::{assign_local, kmeans_global, KMeansConfig};
use csmil::datamodel::{generate_synthetic, load_dataset, save_dataset, split_folds, Dataset, SynthConfig};
use csmil::evalx::{
    ablate_clusters, cross_validate, cross_validate_with_hook, identify_selected_clusters, sweep_gamma, sweep_k,
    CvConfig, DEFAULT_GAMMA_GRID, DEFAULT_K_GRID,
};
use csmil::model::{CsmilModel, ModelConfig};
use csmil::optim::{predict, train, TrainConfig};
use csmil::GroundTruth;

fn small_data(seed: u64) -> (Dataset, GroundTruth) {
    generate_synthetic(&SynthConfig {
        bags_per_class: 15,
        instances_per_bag: [6, 12],
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick_cfg(epochs: usize) -> CvConfig {
    CvConfig {
        kmeans: KMeansConfig {
            k: 4,
            restarts: 2,
            ..KMeansConfig::default()
        },
        model: ModelConfig {
            hidden: 4,
            shared_attention: false,
        },
        train: TrainConfig {
            epochs,
            lr_smooth: 1e-2,
            lr_beta: 0.05,
            ..TrainConfig::default()
        },
        seed: 3,
    }
}

#[test]
fn cross_validation_shape_and_hygiene() {
    let (ds, _) = small_data(1);
    let folds = split_folds(&ds, 5, 0).unwrap();
    let seen = Mutex::new(Vec::new());
    let report = cross_validate_with_hook(&ds, &folds, &quick_cfg(5), &|fold, ids| {
        seen.lock()
            .unwrap()
            .push((fold, ids.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
    })
    .unwrap();
    assert_eq!(report.folds.len(), 5);
    let seen = seen.into_inner().unwrap();
    assert_eq!(seen.len(), 5);
    for (fold, ids) in seen {
        assert!(!ids.is_empty());
        for id in &ids {
            assert_ne!(
                folds.fold_of_bag[id], fold,
                "test bag {id} used for clustering in fold {fold}"
            );
        }
        let expected: BTreeSet<&String> = folds
            .fold_of_bag
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id)
            .collect();
        assert_eq!(ids.iter().collect::<BTreeSet<_>>(), expected);
    }
    let total: usize = report.folds.iter().map(|f| f.n_test).sum();
    assert_eq!(total, ds.len());
    assert_eq!(report.pooled.confusion.total(), ds.len());
}

#[test]
fn cross_validation_ignores_bag_order() {
    let (ds, _) = small_data(2);
    let folds = split_folds(&ds, 3, 1).unwrap();
    let a = cross_validate(&ds, &folds, &quick_cfg(5)).unwrap();
    let mut shuffled = ds.clone();
    shuffled.bags.reverse();
    shuffled.bags.swap(0, 7);
    let b = cross_validate(&shuffled, &folds, &quick_cfg(5)).unwrap();
    assert!((a.mean.accuracy - b.mean.accuracy).abs() < 1e-9);
    assert!((a.mean.f1 - b.mean.f1).abs() < 1e-9);
    assert!((a.mean.auc.unwrap() - b.mean.auc.unwrap()).abs() < 1e-9);
}

#[test]
fn ablation_baseline_equals_plain_cross_validation() {
    let (ds, truth) = small_data(3);
    let folds = split_folds(&ds, 3, 2).unwrap();
    let cfg = quick_cfg(4);
    let report = ablate_clusters(&ds, &folds, &cfg, false, Some(&truth)).unwrap();
    assert_eq!(report.variants.len(), cfg.kmeans.k);
    let mut plain = cfg.clone();
    plain.train.gamma = 0.0;
    plain.train.freeze_beta = true;
    let direct = cross_validate(&ds, &folds, &plain).unwrap();
    for (a, b) in report.baseline.folds.iter().zip(&direct.folds) {
        assert_eq!(a.metrics, b.metrics);
        assert!(a.beta.iter().all(|&x| x == 1.0));
    }
    assert_eq!(report.baseline.mean, direct.mean);
    for v in &report.variants {
        assert_eq!(v.delta_acc, v.mean.accuracy - report.baseline.mean.accuracy);
        assert!(v.composition.is_some());
    }
    let mut too_few = cfg.clone();
    too_few.kmeans.k = 1;
    assert!(ablate_clusters(&ds, &folds, &too_few, false, None).is_err());
}

#[test]
fn gamma_sweep_covers_grid() {
    let (ds, _) = small_data(4);
    let folds = split_folds(&ds, 3, 0).unwrap();
    let mut grid = DEFAULT_GAMMA_GRID.to_vec();
    grid.push(0.0);
    let report = sweep_gamma(&ds, &folds, &quick_cfg(2), &grid).unwrap();
    assert_eq!(report.entries.len(), 16);
    assert_eq!(
        report.entries[..15].iter().map(|e| e.value).collect::<Vec<_>>(),
        DEFAULT_GAMMA_GRID.to_vec()
    );
    let zero = report.entries.last().unwrap();
    assert!(zero.cv.folds.iter().all(|f| f.final_penalty == 0.0));
    assert!(sweep_gamma(&ds, &folds, &quick_cfg(2), &[]).is_err());
}

#[test]
fn k_sweep_covers_grid() {
    let (ds, _) = small_data(5);
    let folds = split_folds(&ds, 3, 0).unwrap();
    let report = sweep_k(&ds, &folds, &quick_cfg(2), &DEFAULT_K_GRID).unwrap();
    assert_eq!(report.entries.len(), 4);
    let with_one = sweep_k(&ds, &folds, &quick_cfg(2), &[1]).unwrap();
    assert_eq!(with_one.entries[0].cv.folds[0].beta.len(), 1);
}

#[test]
fn separable_data_trains_to_full_accuracy() {
    let (ds, _) = generate_synthetic(&SynthConfig {
        bags_per_class: 20,
        instances_per_bag: [8, 12],
        component_separation: 8.0,
        noise_sigma: 0.1,
        positive_fraction: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let clusters = kmeans_global(ds.stack_instances(&all).view(), &KMeansConfig::default(), 0).unwrap();
    let assignments: Vec<_> = ds.bags.iter().map(|b| assign_local(b, &clusters).unwrap()).collect();
    let items: Vec<_> = ds.bags.iter().zip(&assignments).collect();
    let init = CsmilModel::new(clusters.k, ds.dim, &ModelConfig::default(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        gamma: 0.0,
        ..TrainConfig::default()
    };
    let (model, _) = train(&items, &[], &cfg, init).unwrap();
    let scores = predict(&items, &model).unwrap();
    let correct = scores
        .iter()
        .zip(&ds.bags)
        .filter(|(s, b)| (**s >= 0.5) == b.is_positive())
        .count();
    assert_eq!(correct, ds.len());
}

#[test]
fn identification_edge_cases() {
    let (ds, truth) = small_data(6);
    let all: Vec<usize> = (0..ds.len()).collect();
    let km = KMeansConfig {
        k: 2,
        ..KMeansConfig::default()
    };
    let clusters = kmeans_global(ds.stack_instances(&all).view(), &km, 0).unwrap();
    let assignments: Vec<_> = ds.bags.iter().map(|b| assign_local(b, &clusters).unwrap()).collect();

    let text = format!(
        r#"{{"K":2,"d":{d},"L":1,"beta":[1.04,-1.59],"heads":[{{"V":[{row}],"w":[0.0]}},{{"V":[{row}],"w":[0.0]}}],
        "W":[{row},{row}],"b":[0.0,0.0],"config":{{"hidden":1,"shared_attention":false}},"seed":0}}"#,
        d = ds.dim,
        row = format!("[{}]", vec!["0.0"; ds.dim].join(","))
    );
    let mut model = CsmilModel::from_json_str(&text).unwrap();
    let id = identify_selected_clusters(&model, &ds, &assignments, &truth).unwrap();
    assert_eq!(id.selected, vec![0, 1]);

    model.params.beta.fill(0.0);
    let id = identify_selected_clusters(&model, &ds, &assignments, &truth).unwrap();
    assert!(id.selected.is_empty());
    assert_eq!(id.recall, 0.0);
    assert_eq!(id.precision, None);
}

#[test]
fn dataset_survives_disk_round_trip() {
    let (ds, _) = small_data(7);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.bags.len(), ds.bags.len());
    for (a, b) in back.bags.iter().zip(&ds.bags) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.embeddings, b.embeddings);
    }
}
