//! Subcommand implementations. Every artifact is written through the fixed
//! float formatter so reruns produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use csmil::artifact::{self, fmt_f64};
use csmil::clustering::{assign_local, kmeans_global, write_assignments_csv, ClusterAssignment, ClusterModel};
use csmil::datamodel::{generate_synthetic, load_dataset, save_dataset, split_folds, Dataset, GroundTruth};
use csmil::evalx::cv::{inner_validation_split, write_roc_csv};
use csmil::evalx::plot::{bar_chart, line_chart, Series};
use csmil::evalx::{
    ablate_clusters, compute_metrics, cross_validate, identify_selected_clusters, sweep_gamma, sweep_k, SweepReport,
};
use csmil::model::CsmilModel;
use csmil::optim::{predict, train, BagRef};
use csmil::recovery::{design_diagnostics, fit_error_constant, gen_linear_problem, phase_transition, scaling_law};
use csmil::seed;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{gradcheck, Command, Failure};

pub fn dispatch(command: Command, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Config(format!("cannot create {}: {e}", out.display())))?;
    write_json(&out.join("config.json"), cfg)?;
    log::info!("{command:?}: seed {}, writing to {}", cfg.seed, out.display());
    match command {
        Command::Synth => synth(cfg, out),
        Command::Cluster => cluster(cfg, out),
        Command::Train => train_cmd(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Ablate => ablate(cfg, out),
        Command::SweepGamma => sweep(cfg, out, true),
        Command::SweepK => sweep(cfg, out, false),
        Command::Recover => recover(cfg, out),
        Command::Gradcheck => gradcheck_cmd(cfg, out),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Failure> {
    log::debug!("writing {}", path.display());
    Ok(artifact::write_json(path, value)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    log::debug!("writing {}", path.display());
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn input_error(what: &str, path: &Path, e: csmil::Error) -> Failure {
    Failure::Config(format!("cannot load {what} {}: {e}", path.display()))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| Failure::Config(format!("this command needs `{key}` (use --set {key}=PATH)")))
}

/// The configured dataset with bags in id order.
fn dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let path = required(&cfg.data.manifest, "data.manifest")?;
    let ds = load_dataset(path).map_err(|e| input_error("manifest", path, e))?;
    log::info!("loaded {} bags from {}", ds.len(), path.display());
    Ok(ds.sorted_by_id())
}

fn ground_truth(cfg: &RunConfig) -> Result<Option<GroundTruth>, Failure> {
    cfg.data
        .ground_truth
        .as_deref()
        .map(|p| artifact::read_json(p).map_err(|e| input_error("ground truth", p, e)))
        .transpose()
}

fn fit_clusters(cfg: &RunConfig, ds: &Dataset) -> Result<ClusterModel, Failure> {
    let all: Vec<usize> = (0..ds.len()).collect();
    Ok(kmeans_global(
        ds.stack_instances(&all).view(),
        &cfg.kmeans,
        seed::derive(cfg.seed, "cluster"),
    )?)
}

fn assign_all(ds: &Dataset, clusters: &ClusterModel) -> Result<Vec<ClusterAssignment>, Failure> {
    Ok(ds
        .bags
        .iter()
        .map(|b| assign_local(b, clusters))
        .collect::<csmil::Result<Vec<_>>>()?)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (ds, truth) = generate_synthetic(&cfg.synth)?;
    save_dataset(&ds, out)?;
    write_json(&out.join("ground_truth.json"), &truth)?;
    println!(
        "wrote {} bags ({} instances) to {}",
        ds.len(),
        ds.n_instances(),
        out.display()
    );
    Ok(())
}

fn cluster(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ds = dataset(cfg)?;
    let clusters = fit_clusters(cfg, &ds)?;
    let assignments = assign_all(&ds, &clusters)?;
    clusters.save(&out.join("centers.json"))?;
    write_assignments_csv(&out.join("assignments.csv"), &ds, &assignments)?;
    println!("K = {}, inertia {}", clusters.k, fmt_f64(clusters.inertia));
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ds = dataset(cfg)?;
    let clusters = match &cfg.data.clusters {
        Some(p) => ClusterModel::load(p).map_err(|e| input_error("centers", p, e))?,
        None => fit_clusters(cfg, &ds)?,
    };
    let assignments = assign_all(&ds, &clusters)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let (fit_idx, val_idx) = if cfg.train.early_stop.is_some() {
        inner_validation_split(&ds, &all)
    } else {
        (all, Vec::new())
    };
    let items = |idx: &[usize]| -> Vec<BagRef<'_>> { idx.iter().map(|&i| (&ds.bags[i], &assignments[i])).collect() };
    let init = CsmilModel::new(clusters.k, ds.dim, &cfg.model, seed::derive(cfg.seed, "model"))?;
    let (model, history) = train(&items(&fit_idx), &items(&val_idx), &cfg.train, init)?;
    model.save(&out.join("checkpoint.json"))?;
    clusters.save(&out.join("centers.json"))?;
    history.write_csv(&out.join("history.csv"))?;
    if let Some(last) = history.last() {
        println!(
            "{} epochs, final loss {} (data {}), beta_l0 {}",
            history.len(),
            fmt_f64(last.total),
            fmt_f64(last.data),
            last.beta_l0
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct FoldIdentification {
    fold: usize,
    #[serde(flatten)]
    identification: csmil::evalx::Identification,
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ds = dataset(cfg)?;
    if let Some(ckpt) = &cfg.data.checkpoint {
        let model = CsmilModel::load(ckpt).map_err(|e| input_error("checkpoint", ckpt, e))?;
        let centers = required(&cfg.data.clusters, "data.clusters")?;
        let clusters = ClusterModel::load(centers).map_err(|e| input_error("centers", centers, e))?;
        let assignments = assign_all(&ds, &clusters)?;
        let items: Vec<BagRef<'_>> = ds.bags.iter().zip(&assignments).collect();
        let scores = predict(&items, &model)?;
        let labels: Vec<u8> = ds.bags.iter().map(|b| b.label).collect();
        let report = compute_metrics(&scores, &labels)?;
        write_json(&out.join("metrics.json"), &report)?;
        write_roc_csv(&report, &out.join("roc.csv"))?;
        let rows = ds
            .bags
            .iter()
            .zip(&scores)
            .map(|(b, s)| vec![b.id.clone(), b.label.to_string(), fmt_f64(*s)]);
        artifact::write_csv(&out.join("predictions.csv"), &["bag_id", "label", "score"], rows)?;
        println!(
            "accuracy {:.4} f1 {:.4} auc {:?}",
            report.accuracy, report.f1, report.auc
        );
        return Ok(());
    }
    let folds = split_folds(&ds, cfg.cv.folds, cfg.seed)?;
    let report = cross_validate(&ds, &folds, &cfg.cv_config())?;
    write_json(&out.join("cv.json"), &report)?;
    report.write_roc_csv(&out.join("roc.csv"))?;
    if let Some(truth) = ground_truth(cfg)? {
        let ids = report
            .folds
            .iter()
            .map(|f| {
                let fitted = f.fitted.as_ref().expect("fresh cross-validation keeps fitted folds");
                Ok(FoldIdentification {
                    fold: f.fold,
                    identification: identify_selected_clusters(&fitted.model, &ds, &fitted.assignments, &truth)?,
                })
            })
            .collect::<csmil::Result<Vec<_>>>()?;
        write_json(&out.join("identification.json"), &ids)?;
    }
    println!(
        "mean accuracy {:.4} f1 {:.4} auc {:?} beta_l0 {:.2}",
        report.mean.accuracy, report.mean.f1, report.mean.auc, report.mean.beta_l0
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ds = dataset(cfg)?;
    let truth = ground_truth(cfg)?;
    let folds = split_folds(&ds, cfg.cv.folds, cfg.seed)?;
    let report = ablate_clusters(&ds, &folds, &cfg.cv_config(), cfg.ablation.sparse, truth.as_ref())?;
    write_json(&out.join("ablation.json"), &report)?;
    report.write_csv(&out.join("ablation.csv"))?;
    let bars: Vec<(String, f64)> = report
        .variants
        .iter()
        .map(|v| (v.removed_cluster.to_string(), v.delta_acc))
        .collect();
    write_text(
        &out.join("ablation.svg"),
        &bar_chart(
            "Accuracy change when removing one cluster",
            "removed cluster",
            "delta accuracy",
            &bars,
        ),
    )?;
    println!("baseline accuracy {:.4}", report.baseline.mean.accuracy);
    for v in &report.variants {
        println!(
            "  without cluster {}: delta {:+.4} ({} bags excluded)",
            v.removed_cluster, v.delta_acc, v.excluded_bags
        );
    }
    Ok(())
}

fn sweep_chart(report: &SweepReport, log_x: bool) -> String {
    let series = |name, f: fn(&csmil::evalx::MeanMetrics) -> Option<f64>| Series {
        name,
        points: report
            .entries
            .iter()
            .filter_map(|e| f(&e.cv.mean).map(|y| (e.value, y)))
            .collect(),
    };
    line_chart(
        &format!("Cross-validated metrics across {}", report.param),
        &report.param,
        "mean metric",
        &[
            series("accuracy", |m| Some(m.accuracy)),
            series("F1", |m| Some(m.f1)),
            series("AUC", |m| m.auc),
        ],
        log_x,
    )
}

fn sweep(cfg: &RunConfig, out: &Path, gamma: bool) -> Result<(), Failure> {
    let ds = dataset(cfg)?;
    let folds = split_folds(&ds, cfg.cv.folds, cfg.seed)?;
    let report = if gamma {
        sweep_gamma(&ds, &folds, &cfg.cv_config(), &cfg.sweep.gamma_grid)?
    } else {
        sweep_k(&ds, &folds, &cfg.cv_config(), &cfg.sweep.k_grid)?
    };
    write_json(&out.join("sweep.json"), &report)?;
    report.write_csv(&out.join("sweep.csv"))?;
    write_text(&out.join("sweep.svg"), &sweep_chart(&report, gamma))?;
    for e in &report.entries {
        println!(
            "{} = {}: accuracy {:.4} auc {:?} beta_l0 {:.2}",
            report.param, e.value, e.cv.mean.accuracy, e.cv.mean.auc, e.cv.mean.beta_l0
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RecoverySummary<'a> {
    gamma_rule: &'a str,
    error_constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scaling: Option<csmil::recovery::ScalingReport>,
}

fn recover(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let rc = &cfg.recovery;
    let table = phase_transition(&rc.phase, seed::derive(cfg.seed, "phase"))?;
    table.write_csv(&out.join("phase.csv"))?;

    let diag_s = rc.phase.s.min(rc.diagnostics_k);
    let design = gen_linear_problem(
        rc.diagnostics_k,
        diag_s,
        rc.diagnostics_m,
        rc.phase.sigma,
        rc.phase.beta_min,
        seed::derive(cfg.seed, "diagnostics"),
    )?;
    let diagnostics = design_diagnostics(design.z.view(), &rc.support_sizes)?;
    write_json(&out.join("diagnostics.json"), &diagnostics)?;

    let scaling = if rc.scaling_pairs.is_empty() {
        None
    } else {
        Some(scaling_law(
            &rc.phase,
            &rc.scaling_pairs,
            rc.scaling_target,
            seed::derive(cfg.seed, "scaling"),
        )?)
    };
    let gamma_rule = if rc.phase.gamma.is_some() {
        "fixed"
    } else {
        "2 sigma sqrt(ln K / M)"
    };
    write_json(
        &out.join("recovery.json"),
        &RecoverySummary {
            gamma_rule,
            error_constant: fit_error_constant(&table, 0.9),
            scaling,
        },
    )?;
    let points: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.m as f64, r.success_rate)).collect();
    write_text(
        &out.join("phase.svg"),
        &line_chart(
            &format!("Support recovery, K = {}, s = {}", rc.phase.k, rc.phase.s),
            "M",
            "success rate",
            &[Series {
                name: "sign-consistent",
                points,
            }],
            false,
        ),
    )?;
    for r in &table.rows {
        println!(
            "M = {:4}: success {:.2}, mean l2 error {:.4}",
            r.m, r.success_rate, r.mean_l2_error
        );
    }
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let report = gradcheck::run(&cfg.gradcheck, cfg.seed)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    println!("max_rel_error {:e}", report.max_rel_error);
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed: max relative error {:e} >= {:e}",
            report.max_rel_error, report.tolerance
        )))
    }
}
