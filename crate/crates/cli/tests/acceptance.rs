//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Run a subset with `cargo test --test acceptance -- <name-filter>`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{abmil_forward, brute_force_sse, lasso_cd, pair_counting_auc, sse_to_centers, Stream};
use csmil::clustering::{kmeans_global, ClusterAssignment, KMeansConfig};
use csmil::datamodel::{generate_synthetic, split_folds, SynthConfig};
use csmil::evalx::{ablate_clusters, compute_metrics, cross_validate, identify_selected_clusters, CvConfig, CvReport};
use csmil::model::{bag_forward, CsmilModel, ModelConfig};
use csmil::optim::TrainConfig;
use csmil::recovery::{gen_linear_problem, lasso_ista, phase_transition, scaling_law, LassoOptions, PhaseConfig};
use csmil::{Bag, Dataset, GroundTruth};
use csmil_cli::config::GradcheckSettings;
use csmil_cli::gradcheck;
use ndarray::{Array1, Array2};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

fn gradient_correctness() -> Outcome {
    let settings = GradcheckSettings::default();
    ensure(
        settings.seeds == 20 && settings.k_values == [1, 2, 3] && settings.h == 1e-6,
        || "gradcheck defaults drifted".into(),
    )?;
    let report = gradcheck::run(&settings, 0).map_err(|e| e.to_string())?;
    let with_empty = report.cases.iter().filter(|c| c.empty_clusters > 0).count();
    ensure(with_empty > 0, || "no case exercised an empty cluster".into())?;
    ensure(report.max_rel_error < 1e-4, || {
        format!("max_rel_error {:e}", report.max_rel_error)
    })?;
    Ok(format!(
        "max_rel_error {:.2e} over {} cases ({} with empty clusters)",
        report.max_rel_error,
        report.cases.len(),
        with_empty
    ))
}

fn abmil_reduction() -> Outcome {
    let mut s = Stream::new(21);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let d = 1 + s.below(8);
        let n = 1 + s.below(16);
        let hidden = 1 + s.below(16);
        let model = CsmilModel::new(
            1,
            d,
            &ModelConfig {
                hidden,
                shared_attention: false,
            },
            i,
        )
        .map_err(|e| e.to_string())?;
        let h = s.matrix(n, d, 2.0);
        let bag = Bag::new(format!("b{i}"), (i % 2) as u8, to_array(&h)).map_err(|e| e.to_string())?;
        let cache =
            bag_forward(&bag, &ClusterAssignment::from_labels(1, vec![0; n]), &model).map_err(|e| e.to_string())?;
        let head = &model.params.heads[0];
        let (alpha, logits, probs) = abmil_forward(
            &h,
            &rows(&head.v),
            head.w.as_slice().unwrap(),
            &rows(&model.params.classifier_w),
            model.params.classifier_b.as_slice().unwrap(),
        );
        let pairs = cache.clusters[0]
            .alpha
            .iter()
            .zip(&alpha)
            .chain(cache.logits.iter().zip(&logits))
            .chain(cache.probs.iter().zip(&probs));
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 bags, max deviation {worst:.1e}"))
}

fn kmeans_oracle() -> Outcome {
    let mut s = Stream::new(31);
    for case in 0..50u64 {
        let k = 1 + s.below(3);
        let n = k + s.below(9 - k);
        let d = 1 + s.below(2);
        let points = s.matrix(n, d, 3.0);
        let cfg = KMeansConfig {
            k,
            restarts: 20,
            ..KMeansConfig::default()
        };
        let model = kmeans_global(to_array(&points).view(), &cfg, case).map_err(|e| e.to_string())?;
        let got = sse_to_centers(&points, &rows(&model.centers));
        let best = brute_force_sse(&points, k);
        ensure(got <= best + 1e-9 * (1.0 + best), || {
            format!("case {case} (N={n}, K={k}, d={d}): SSE {got} vs optimum {best}")
        })?;
    }
    Ok("50 instances reach the brute-force optimum".into())
}

fn lasso_oracle() -> Outcome {
    let mut s = Stream::new(41);
    let mut closed_worst = 0.0f64;
    for _ in 0..20 {
        let m = 2 + s.below(10);
        let z = Array2::<f64>::eye(m) * (m as f64).sqrt();
        let y: Array1<f64> = (0..m).map(|_| 2.0 * s.normal()).collect();
        let gamma = s.range(0.0, 1.0);
        for accelerated in [false, true] {
            let sol = lasso_ista(
                z.view(),
                y.view(),
                gamma,
                &LassoOptions {
                    accelerated,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            for i in 0..m {
                let v = y[i] / (m as f64).sqrt();
                let expected = v.signum() * (v.abs() - gamma).max(0.0);
                closed_worst = closed_worst.max((sol.beta_hat[i] - expected).abs());
            }
        }
    }
    ensure(closed_worst <= 1e-8, || {
        format!("closed form deviation {closed_worst:e}")
    })?;

    let mut cd_worst = 0.0f64;
    for trial in 0..20u64 {
        let k = 2 + s.below(14);
        let m = 4 + s.below(40);
        let sp = 1 + s.below(k.min(4));
        let p = gen_linear_problem(k, sp, m, 0.2, 1.0, 1000 + trial).map_err(|e| e.to_string())?;
        let gamma = s.range(0.005, 0.3);
        let reference = lasso_cd(&rows(&p.z), p.y.as_slice().unwrap(), gamma);
        for accelerated in [false, true] {
            let opts = LassoOptions {
                accelerated,
                record_trace: !accelerated,
                ..Default::default()
            };
            let sol = lasso_ista(p.z.view(), p.y.view(), gamma, &opts).map_err(|e| e.to_string())?;
            for (a, b) in sol.beta_hat.iter().zip(&reference) {
                cd_worst = cd_worst.max((a - b).abs());
            }
            if !accelerated {
                for (t, w) in sol.objective_trace.windows(2).enumerate() {
                    ensure(w[1] <= w[0] + 1e-12, || {
                        format!(
                            "ISTA objective rose at iteration {t} of trial {trial}: {} -> {}",
                            w[0], w[1]
                        )
                    })?;
                }
            }
        }
    }
    ensure(cd_worst <= 1e-5, || {
        format!("coordinate-descent deviation {cd_worst:e}")
    })?;
    Ok(format!(
        "closed form within {closed_worst:.1e}, coordinate descent within {cd_worst:.1e}, ISTA monotone"
    ))
}

fn recovery_scaling() -> Outcome {
    let cfg = PhaseConfig {
        k: 64,
        s: 4,
        m_grid: vec![8, 134],
        trials: 50,
        sigma: 0.05,
        beta_min: 1.0,
        ..PhaseConfig::default()
    };
    let table = phase_transition(&cfg, 0).map_err(|e| e.to_string())?;
    let at = |m| table.row(m).map(|r| r.success_rate).unwrap();
    ensure(at(134) >= 0.9, || format!("success at M=134 is {}", at(134)))?;
    ensure(at(8) <= 0.5, || format!("success at M=8 is {}", at(8)))?;

    let base = PhaseConfig {
        m_grid: (8..=160).step_by(4).chain((168..=320).step_by(8)).collect(),
        ..cfg
    };
    let pairs = [(2, 32), (2, 64), (2, 128), (4, 32), (4, 64), (4, 128)];
    let report = scaling_law(&base, &pairs, 0.9, 0).map_err(|e| e.to_string())?;
    ensure(report.points.iter().all(|p| p.min_m.is_some()), || {
        format!("some pair never reached 90%: {:?}", report.points)
    })?;
    let fit = report.fit.ok_or("scaling fit failed")?;
    ensure(fit.slope > 0.0 && fit.r2 > 0.8, || {
        format!("slope {} R^2 {}", fit.slope, fit.r2)
    })?;
    let mins: Vec<String> = report
        .points
        .iter()
        .map(|p| format!("(s={},K={})->{}", p.s, p.k, p.min_m.unwrap()))
        .collect();
    Ok(format!(
        "success {:.2} at M=134, {:.2} at M=8; slope {:.2}, R^2 {:.3}; {}",
        at(134),
        at(8),
        fit.slope,
        fit.r2,
        mins.join(" ")
    ))
}

/// The planted-cluster benchmark and its training setup.
fn benchmark() -> (Dataset, GroundTruth, CvConfig) {
    let (ds, truth) = generate_synthetic(&SynthConfig {
        k_latent: 8,
        s_informative: 2,
        dim: 16,
        bags_per_class: 100,
        seed: 0,
        ..SynthConfig::default()
    })
    .expect("benchmark generates");
    let cfg = CvConfig {
        kmeans: KMeansConfig {
            k: 8,
            ..KMeansConfig::default()
        },
        model: ModelConfig::default(),
        train: TrainConfig {
            epochs: 200,
            lr_smooth: 1e-2,
            lr_beta: 0.1,
            gamma: 0.1,
            ..TrainConfig::default()
        },
        seed: 0,
    };
    (ds, truth, cfg)
}

fn cv_at(ds: &Dataset, cfg: &CvConfig, gamma: f64) -> Result<CvReport, String> {
    let folds = split_folds(ds, 5, 0).map_err(|e| e.to_string())?;
    let mut c = cfg.clone();
    c.train.gamma = gamma;
    cross_validate(ds, &folds, &c).map_err(|e| e.to_string())
}

fn planted_identification() -> Outcome {
    let (ds, truth, cfg) = benchmark();
    let sparse = cv_at(&ds, &cfg, 0.1)?;
    let auc = sparse.mean.auc.ok_or("AUC undefined")?;
    ensure(auc >= 0.95, || format!("mean AUC {auc}"))?;
    let sorted = ds.sorted_by_id();
    let mut zeroed = Vec::new();
    for f in &sparse.folds {
        let fitted = f.fitted.as_ref().ok_or("missing fitted fold")?;
        let id = identify_selected_clusters(&fitted.model, &sorted, &fitted.assignments, &truth)
            .map_err(|e| e.to_string())?;
        ensure(id.recall == 1.0, || format!("fold {} recall {}", f.fold, id.recall))?;
        ensure(!id.zeroed_background.is_empty(), || {
            format!(
                "fold {}: no background cluster has beta exactly 0 ({:?})",
                f.fold, f.beta
            )
        })?;
        zeroed.push(id.zeroed_background.len());
    }
    let dense = cv_at(&ds, &cfg, 0.0001)?;
    ensure(sparse.mean.beta_l0 <= dense.mean.beta_l0, || {
        format!(
            "mean l0 {} at gamma 0.1 vs {} at 0.0001",
            sparse.mean.beta_l0, dense.mean.beta_l0
        )
    })?;
    Ok(format!(
        "mean AUC {auc:.4}, recall 1.0 in every fold, zeroed background clusters per fold {zeroed:?}, mean l0 {:.1} (gamma 0.1) vs {:.1} (gamma 0.0001)",
        sparse.mean.beta_l0, dense.mean.beta_l0
    ))
}

fn cluster_ablation() -> Outcome {
    let (ds, truth, cfg) = benchmark();
    let folds = split_folds(&ds, 5, 0).map_err(|e| e.to_string())?;
    let report = ablate_clusters(&ds, &folds, &cfg, false, Some(&truth)).map_err(|e| e.to_string())?;
    let comp = |v: &csmil::evalx::experiments::AblationVariant| v.composition.clone().expect("ground truth given");
    let informative = report
        .variants
        .iter()
        .max_by_key(|v| comp(v).informative_instances)
        .ok_or("no variants")?;
    ensure(informative.delta_acc <= -0.10, || {
        format!(
            "removing majority-informative cluster {} changed accuracy by {}",
            informative.removed_cluster, informative.delta_acc
        )
    })?;
    let mut background = BTreeMap::new();
    for v in report.variants.iter().filter(|v| comp(v).is_pure_background()) {
        background.insert(v.removed_cluster, v.delta_acc);
        ensure(v.delta_acc >= -0.02, || {
            format!(
                "removing background cluster {} changed accuracy by {}",
                v.removed_cluster, v.delta_acc
            )
        })?;
    }
    ensure(!background.is_empty(), || "no pure background cluster".into())?;
    Ok(format!(
        "baseline accuracy {:.3}; informative cluster {} delta {:+.3}; background deltas {:?}",
        report.baseline.mean.accuracy,
        informative.removed_cluster,
        informative.delta_acc,
        background.values().map(|d| format!("{d:+.3}")).collect::<Vec<_>>()
    ))
}

fn auc_oracle() -> Outcome {
    let r = compute_metrics(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    ensure(r.auc == Some(0.75), || format!("worked example gave {:?}", r.auc))?;
    let mut s = Stream::new(51);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let n = 2 + s.below(199);
        let mut labels: Vec<u8> = (0..n).map(|_| s.below(2) as u8).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        let levels = [3, 10, 1000, usize::MAX][case % 4];
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if levels == usize::MAX {
                    s.uniform()
                } else {
                    s.below(levels) as f64 / levels as f64
                }
            })
            .collect();
        let got = compute_metrics(&scores, &labels)
            .map_err(|e| e.to_string())?
            .auc
            .unwrap();
        worst = worst.max((got - pair_counting_auc(&scores, &labels)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "worked example 0.75; 500 random sets up to 200 points, max deviation {worst:.1e}"
    ))
}

fn csmil(args: &[&str], out: &Path, jobs: usize) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_csmil"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--jobs")
        .arg(jobs.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("csmil {args:?} failed: {}", String::from_utf8_lossy(&status.stderr))
    })
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path).unwrap(),
        );
    }
    files
}

const REPRO_CONFIG: &str = r#"{
  "schema": "csmil-run/1",
  "seed": 7,
  "synth": {"bags_per_class": 12, "instances_per_bag": [4, 9], "seed": 7},
  "kmeans": {"k": 3, "restarts": 3},
  "model": {"hidden": 4},
  "train": {"epochs": 4, "lr_smooth": 0.01, "lr_beta": 0.05, "gamma": 0.05, "seed": 7},
  "cv": {"folds": 3},
  "sweep": {"gamma_grid": [0.001, 0.1], "k_grid": [1, 2, 3]},
  "recovery": {
    "phase": {"k": 16, "s": 2, "m_grid": [8, 24, 48], "trials": 6},
    "diagnostics_k": 8, "diagnostics_m": 40, "support_sizes": [1, 2],
    "scaling_pairs": [[1, 8], [2, 8], [2, 16]]
  },
  "gradcheck": {"seeds": 3}
}"#;

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = root.path().join("run.json");
    std::fs::write(&config, REPRO_CONFIG).map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap();

    let data = root.path().join("data");
    csmil(&["synth", "--config", cfg], &data, 1)?;
    let manifest = format!("data.manifest={}", data.join("manifest.json").display());
    let truth = format!("data.ground_truth={}", data.join("ground_truth.json").display());
    let trained = root.path().join("trained");
    csmil(&["train", "--config", cfg, "--set", &manifest], &trained, 1)?;
    let ckpt = format!("data.checkpoint={}", trained.join("checkpoint.json").display());
    let centers = format!("data.clusters={}", trained.join("centers.json").display());

    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("synth", vec![]),
        ("cluster", vec!["--set", &manifest]),
        ("train", vec!["--set", &manifest]),
        ("eval", vec!["--set", &manifest, "--set", &truth]),
        ("eval", vec!["--set", &manifest, "--set", &ckpt, "--set", &centers]),
        ("ablate", vec!["--set", &manifest, "--set", &truth]),
        ("sweep-gamma", vec!["--set", &manifest]),
        ("sweep-k", vec!["--set", &manifest]),
        ("recover", vec![]),
        ("gradcheck", vec![]),
    ];
    let mut checked = 0;
    for (i, (cmd, extra)) in runs.iter().enumerate() {
        let mut args = vec![*cmd, "--config", cfg];
        args.extend(extra.iter().copied());
        let outs: Vec<PathBuf> = ["serial-a", "serial-b", "jobs4"]
            .iter()
            .map(|tag| root.path().join(format!("{i}-{cmd}-{tag}")))
            .collect();
        csmil(&args, &outs[0], 1)?;
        csmil(&args, &outs[1], 1)?;
        csmil(&args, &outs[2], 4)?;
        let reference = dir_contents(&outs[0]);
        ensure(reference.len() > 1, || format!("{cmd} wrote {:?}", reference.keys()))?;
        for other in &outs[1..] {
            let got = dir_contents(other);
            ensure(got.keys().eq(reference.keys()), || format!("{cmd}: file sets differ"))?;
            for (name, bytes) in &reference {
                ensure(&got[name] == bytes, || {
                    format!("{cmd}: {name} differs in {}", other.display())
                })?;
            }
        }
        checked += reference.len();
    }
    Ok(format!(
        "{} subcommand runs, {checked} artifacts identical across two serial runs and --jobs 4",
        runs.len()
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion {
            name: "gradient-correctness",
            limit: Duration::from_secs(10),
            run: gradient_correctness,
        },
        Criterion {
            name: "abmil-reduction",
            limit: Duration::from_secs(1),
            run: abmil_reduction,
        },
        Criterion {
            name: "kmeans-oracle",
            limit: Duration::from_secs(5),
            run: kmeans_oracle,
        },
        Criterion {
            name: "lasso-oracle",
            limit: Duration::from_secs(10),
            run: lasso_oracle,
        },
        Criterion {
            name: "recovery-scaling",
            limit: Duration::from_secs(300),
            run: recovery_scaling,
        },
        Criterion {
            name: "planted-cluster-identification",
            limit: Duration::from_secs(600),
            run: planted_identification,
        },
        Criterion {
            name: "cluster-ablation",
            limit: Duration::from_secs(600),
            run: cluster_ablation,
        },
        Criterion {
            name: "auc-oracle",
            limit: Duration::from_secs(60),
            run: auc_oracle,
        },
        Criterion {
            name: "cli-reproducibility",
            limit: Duration::from_secs(600),
            run: reproducibility,
        },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
    {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= c.limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, limit {:?}", c.limit))
            }
        });
        match result {
            Ok(detail) => println!("PASS {}: {detail} [{elapsed:.1?}]", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {}: {why} [{elapsed:.1?}]", c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
