//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test -p brainsimsiam --test acceptance -- --nocapture`
//! to see the report.

mod common;

use std::time::{Duration, Instant};

use brainsimsiam::analysis::{
    aggregate_importance, correlate_phenotype, correlation_table, explain, importance_table, max_channel_correlation,
    subject_connectivity, subject_embeddings, ExplainConfig, ExplainMode, ImportanceMap,
};
use brainsimsiam::augment::{apply_roi_mask, roi_aligned_mask, soft_roi_mask, AugmentConfig};
use brainsimsiam::config::ExperimentConfig;
use brainsimsiam::data::{generate_synthetic, make_folds, Dataset, PhenotypeKind, RoiTimeSeries, SynthConfig};
use brainsimsiam::downstream::metrics::{auc, f1_from_counts};
use brainsimsiam::downstream::{run_cv, train_probe, CvModel, DownstreamConfig, OptimConfig, Targets};
use brainsimsiam::graph::{partial_corr_matrix, threshold_edges, BrainGraph, Edge};
use brainsimsiam::nn::gat::GraphEncoder;
use brainsimsiam::nn::gradcheck::GradCheckOptions;
use brainsimsiam::nn::params::flatten_params;
use brainsimsiam::nn::{Encoder, HeadKind, Mode, ModelConfig, Predictor, TaskHead, View};
use brainsimsiam::rng::stream;
use brainsimsiam::ssl::{
    batch_gradients, sample_views, symmetric_cosine_loss, total_loss, train_ssl, Embedded, TargetSnapshot,
    TrainConfig, TrainState,
};
use common::*;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Criteria expected to fail; see the README for the analysis.
const KNOWN_RED: &[usize] = &[7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let a = Array1::from(normal_vec(1, 32));
    let a = &a / a.dot(&a).sqrt();
    let b = Array1::from(normal_vec(2, 32));
    let b = &b / b.dot(&b).sqrt();
    let aligned = symmetric_cosine_loss(&a, &a, &b, &b);
    let e = |k: usize| Array1::from_shape_fn(4, |i| f64::from(u8::from(i == k)));
    let orthogonal = symmetric_cosine_loss(&e(0), &e(1), &e(2), &e(3));
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let v: Vec<Array1<f64>> = (0..6).map(|k| Array1::from(normal_vec(seed * 6 + k, 8))).collect();
        let total = total_loss(
            Embedded { p: &v[0], z: &v[1] },
            Embedded { p: &v[2], z: &v[3] },
            Some(Embedded { p: &v[4], z: &v[5] }),
        );
        let parts = symmetric_cosine_loss(&v[0], &v[3], &v[2], &v[1]) + symmetric_cosine_loss(&v[0], &v[5], &v[4], &v[1]);
        worst = worst.max((total - parts).abs());
    }
    outcome(
        (aligned + 1.0).abs() <= 1e-9 && orthogonal.abs() <= 1e-9 && worst <= 1e-12,
        format!("aligned {aligned:.12}, orthogonal {orthogonal:.1e}, decomposition error {worst:.1e}"),
    )
}

fn toy_data(subjects: usize, seed: u64) -> Dataset<f64> {
    let cfg = SynthConfig {
        n_subjects: subjects,
        n_tasks: 2,
        n_rois: 8,
        n_frames: 24,
        n_communities: 2,
        n_class_rois: 2,
        ..Default::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn criterion_2() -> Outcome {
    let data = toy_data(4, 2);
    let mc = ModelConfig {
        d: 16,
        gat_width: 4,
        cnn_channels: vec![2, 2, 4, 4],
        ..Default::default()
    };
    let enc: Encoder<f64> = Encoder::new(&mc, 8, [16, 16, 16], 2).unwrap();
    let pred = Predictor::new(&mc, 2);
    let config = TrainConfig {
        seed: 2,
        ..Default::default()
    };
    let samples: Vec<_> = (0..8)
        .map(|k| sample_views(&data, k, 0, &AugmentConfig::default(), &config).unwrap())
        .collect();
    let z = |views: Vec<View<f64>>| enc.forward(&views, Mode::Train).unwrap().0;
    let snapshot = TargetSnapshot {
        z1: z(samples.iter().map(|s| View::from(&s.x1)).collect()),
        z2: z(samples.iter().map(|s| View::from(&s.x2)).collect()),
        z_cross: Some(z(samples.iter().map(|s| View::from(&s.cross.as_ref().unwrap().1)).collect())),
    };
    let live = batch_gradients(&enc, &pred, &samples, &config, None).unwrap();
    let frozen = batch_gradients(&enc, &pred, &samples, &config, Some(&snapshot)).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let enc_eq = bits(flatten_params(&live.encoder)) == bits(flatten_params(&frozen.encoder));
    let pred_eq = bits(flatten_params(&live.predictor)) == bits(flatten_params(&frozen.predictor));
    outcome(enc_eq && pred_eq, format!("encoder identical {enc_eq}, predictor identical {pred_eq}"))
}

fn criterion_3() -> Outcome {
    let opts = GradCheckOptions {
        max_per_tensor: Some(25),
        ..GradCheckOptions::default()
    };
    let mut worst = Vec::new();
    let (p, i) = gat_layer_check(1, 5, &opts);
    worst.push(("gat", p.max_rel_error.max(i.max_rel_error)));
    let (p, i) = cnn_check(2, &GradCheckOptions {
        max_per_tensor: Some(8),
        ..opts
    });
    worst.push(("cnn", p.max_rel_error.max(i.max_rel_error)));
    let (p, i) = projection_check(3, &opts);
    worst.push(("projection", p.max_rel_error.max(i.max_rel_error)));
    let (p, i) = predictor_check(4, &opts);
    worst.push(("predictor", p.max_rel_error.max(i.max_rel_error)));
    worst.push(("soft mask", soft_mask_check(5, &opts).max_rel_error));
    let pass = worst.iter().all(|(_, e)| *e < 1e-4);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, detail)
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    for n in 2..=5 {
        let data = normal_matrix(40 + n as u64, 2000, n);
        let mut mixed = data.clone();
        for c in 1..n {
            let prev = mixed.column(c - 1).to_owned();
            mixed.column_mut(c).scaled_add(0.5, &prev);
        }
        let p = partial_corr_matrix(&RoiTimeSeries::new(mixed.clone()).unwrap(), 0.0).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((p[[i, j]] - partial_oracle(&mixed, i, j)).abs());
            }
        }
    }
    let mut mismatched = Vec::new();
    for n in 2..64 {
        let m = random_symmetric(n as u64, n);
        let got: Vec<(usize, usize, f64)> =
            threshold_edges(&m, 0.05).unwrap().iter().map(|e| (e.i, e.j, e.w)).collect();
        if got != brute_force_edges(&m) {
            mismatched.push(n);
        }
    }
    let c268 = threshold_edges(&random_symmetric(268, 268), 0.05).unwrap().len();
    let c84 = threshold_edges(&random_symmetric(84, 84), 0.05).unwrap().len();
    outcome(
        worst <= 1e-8 && mismatched.is_empty() && c268 == 1789 && c84 == 175,
        format!("partial error {worst:.1e}, threshold mismatches {mismatched:?}, n=268 {c268} edges, n=84 {c84} edges"),
    )
}

fn criterion_5() -> Outcome {
    let (side, n) = (12, 6);
    let atlas = slab_atlas(side, n);
    let g = random_graph(5, n, n, 0.6);
    let img = random_image(5, [side; 3]);
    let labels = atlas.labels().as_slice().unwrap().to_vec();
    let mut oracle_ok = true;
    for node in 0..n {
        let (mg, mimg) = apply_roi_mask(&g, &img, &atlas, &[node]).unwrap();
        for (v, (&before, &after)) in img.as_slice().iter().zip(mimg.as_slice()).enumerate() {
            oracle_ok &= if labels[v] == node as i32 + 1 { after == 0.0 } else { after.to_bits() == before.to_bits() };
        }
        for r in 0..n {
            let expected = g.node_features().row(r).mapv(|v| if r == node { 0.0 } else { v });
            oracle_ok &= mg.node_features().row(r) == expected;
        }
    }
    let (mut consistent, mut background) = (true, true);
    for draw in 0..1000 {
        let (hg, himg, sel) = roi_aligned_mask(&g, &img, &atlas, 0.3, &mut stream(draw, &[5])).unwrap();
        let m = Array1::from_shape_fn(n, |r| if sel.contains(&r) { 0.0 } else { 1.0 });
        let (sg, simg) = soft_roi_mask(&g, &img, &atlas, &m).unwrap();
        consistent &= sg == hg && simg.as_slice().iter().zip(himg.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        for (v, &l) in labels.iter().enumerate() {
            if l == 0 {
                background &= himg.as_slice()[v].to_bits() == img.as_slice()[v].to_bits()
                    && simg.as_slice()[v].to_bits() == img.as_slice()[v].to_bits();
            }
        }
    }
    outcome(
        oracle_ok && consistent && background,
        format!("voxel-set oracle {oracle_ok}, hard/soft bit-exact {consistent}, background untouched {background}"),
    )
}

fn criterion_6() -> Outcome {
    let n = 30;
    let g = random_graph(6, n, n, 0.2);
    let enc: GraphEncoder<f64> = GraphEncoder::new(&mut stream(6, &[]), n, 16);
    let (base, _) = enc.forward(g.node_features(), g.edges()).unwrap();
    let mut rng = stream(7, &[]);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut feats = Array2::zeros((n, n));
        for (old, &new) in perm.iter().enumerate() {
            feats.row_mut(new).assign(&g.node_features().row(old));
        }
        let edges = g.edges().iter().map(|e| Edge { i: perm[e.i], j: perm[e.j], w: e.w }).collect();
        let pg = BrainGraph::new(feats, edges).unwrap();
        let (emb, _) = enc.forward(pg.node_features(), pg.edges()).unwrap();
        worst = emb.iter().zip(base.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    outcome(worst <= 1e-6, format!("max deviation {worst:.1e} over 50 relabelings"))
}

fn acceptance_model() -> ModelConfig {
    ModelConfig {
        d: 64,
        gat_width: 32,
        ..Default::default()
    }
}

fn pretrain(data: &Dataset<f32>, seed: u64, stop_gradient: bool, use_predictor: bool) -> TrainState<f32> {
    let mc = acceptance_model();
    let enc = Encoder::new(&mc, data.n_rois(), data.atlas.shape(), seed).unwrap();
    let pred = Predictor::new(&mc, seed);
    let config = TrainConfig {
        epochs: 30,
        batch_size: 32,
        learning_rate: 0.05,
        stop_gradient,
        use_predictor,
        seed,
        ..Default::default()
    };
    train_ssl(data, TrainState::new(enc, pred), &config, &AugmentConfig::default(), None).unwrap()
}

fn criterion_7() -> Outcome {
    let root_d = (acceptance_model().d as f64).sqrt();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let data = generate_synthetic::<f32>(&SynthConfig::default(), 70 + seed).unwrap();
        let last = |s: TrainState<f32>| s.log.epochs.last().unwrap().collapse_stat * root_d;
        with.push(last(pretrain(&data, seed, true, true)));
        without.push(last(pretrain(&data, seed, false, false)));
    }
    let healthy = with.iter().all(|&v| v > 0.5);
    let collapsed = without.iter().all(|&v| v < 0.1);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        healthy && collapsed,
        format!(
            "statistic x sqrt(d): with predictor+stop-gradient {} (> 0.5: {healthy}), without {} (< 0.1: {collapsed})",
            fmt(&with),
            fmt(&without)
        ),
    )
}

fn planted(seed: u64, strength: f64) -> Dataset<f32> {
    let cfg = SynthConfig {
        n_subjects: 60,
        signal_strength: strength,
        ..Default::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn probe_cv(data: &Dataset<f32>, encoder: &Encoder<f32>, phenotype: &str, seed: u64) -> f64 {
    let categorical = data.phenotypes.get(phenotype).unwrap().kind == PhenotypeKind::Categorical;
    let folds = make_folds(data, 5, categorical.then_some(phenotype), seed).unwrap();
    let config = DownstreamConfig {
        phenotype: phenotype.into(),
        probe: probe_optim(),
        seed,
        ..Default::default()
    };
    let model = CvModel {
        encoder,
        head_hidden: vec![64, 64],
    };
    let report = run_cv(data, &folds, &model, &config, None).unwrap();
    report.summary(if categorical { "auc" } else { "r" }).unwrap().0
}

fn probe_optim() -> OptimConfig {
    OptimConfig {
        epochs: 100,
        batch_size: 32,
        learning_rate: 0.01,
        ..Default::default()
    }
}

fn criterion_8(encoders: &[(Dataset<f32>, Encoder<f32>)]) -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for (seed, (data, enc)) in encoders.iter().enumerate() {
        let a = probe_cv(data, enc, "diagnosis", seed as u64);
        let r = probe_cv(data, enc, "score", seed as u64);
        pass &= a >= 0.9 && r >= 0.7;
        detail.push(format!("seed {seed} AUC {a:.3} r {r:.3}"));
    }
    let mut null = Vec::new();
    for seed in 0..3 {
        let data = planted(100 + seed, 0.0);
        let state = pretrain(&data, seed, true, true);
        null.push(probe_cv(&data, &state.encoder, "diagnosis", seed));
    }
    let null_mean = null.iter().sum::<f64>() / null.len() as f64;
    pass &= (0.35..=0.65).contains(&null_mean);
    detail.push(format!(
        "zero-signal AUC {} (mean {null_mean:.3})",
        null.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")
    ));
    outcome(pass, detail.join("; "))
}

fn criterion_9() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let mut x = normal_matrix(900 + seed, 100, 64);
        let y = normal_vec(910 + seed, 100);
        let noise = normal_vec(920 + seed, 100);
        let planted = (seed as usize * 13 + 5) % 64;
        for r in 0..100 {
            x[[r, planted]] = 0.8 * y[r] + 0.6 * noise[r];
        }
        let m = max_channel_correlation(&x, &y).unwrap();
        pass &= m.at == planted && (m.r - 0.8).abs() <= 0.1;
        detail.push(format!("channel {} r {:.3}", m.at, m.r));
    }
    let mut oracle_equal = true;
    for seed in 0..20 {
        let d = 1 + (seed as usize * 7) % 64;
        let x = normal_matrix(950 + seed, 15, d);
        let y = normal_vec(980 + seed, 15);
        let m = max_channel_correlation(&x, &y).unwrap();
        let mut best = (0.0f64, usize::MAX);
        for c in 0..d {
            let r = pearson_oracle(&x.column(c).to_vec(), &y);
            if best.1 == usize::MAX || r.abs() > best.0.abs() {
                best = (r, c);
            }
        }
        oracle_equal &= m.at == best.1 && (m.r - best.0).abs() < 1e-12;
    }
    pass &= oracle_equal;
    detail.push(format!("scan oracle agreement {oracle_equal}"));
    outcome(pass, detail.join("; "))
}

fn criterion_10(encoders: &[(Dataset<f32>, Encoder<f32>)]) -> Outcome {
    let config = ExplainConfig {
        step_size: 10.0,
        sparsity_weight: 1.0,
        ..Default::default()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for (seed, (data, enc)) in encoders.iter().enumerate() {
        let truth = data.ground_truth.clone().unwrap();
        let instances: Vec<_> = data.instances.iter().collect();
        let labels = instances
            .iter()
            .map(|i| data.phenotypes.value("diagnosis", &i.subject_id).unwrap() as usize)
            .collect();
        let kind = HeadKind::Classification { n_classes: 2 };
        let mut head = TaskHead::new(enc.out_dim(), &[64, 64], kind, seed as u64);
        train_probe(enc, &mut head, &instances, &Targets::Classes(labels), &probe_optim(), seed as u64).unwrap();
        let maps: Vec<ImportanceMap> = instances
            .iter()
            .take(20)
            .map(|inst| ImportanceMap {
                values: explain(enc, Some(&head), inst, &data.atlas, &config, ExplainMode::Prediction).unwrap(),
                scope: "diagnosis".into(),
                fold: None,
            })
            .collect();
        let mean = aggregate_importance(&maps).unwrap().values;
        let n = mean.len();
        let inside = truth.class_nodes.iter().map(|&r| mean[r]).sum::<f64>() / truth.class_nodes.len() as f64;
        let outside = (0..n).filter(|r| !truth.class_nodes.contains(r)).map(|r| mean[r]).sum::<f64>()
            / (n - truth.class_nodes.len()) as f64;
        wins += usize::from(inside > outside);
        detail.push(format!("seed {seed} {inside:.3} vs {outside:.3}"));
    }
    outcome(wins == encoders.len(), format!("{wins}/{} ({})", encoders.len(), detail.join(", ")))
}

fn criterion_11() -> Outcome {
    let mut rng = stream(11, &[]);
    let mut mismatches = 0;
    let mut checked = 0;
    while checked < 500 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let Ok(a) = auc(&scores, &labels) else { continue };
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        mismatches += usize::from(a != wins / pairs);
        checked += 1;
    }
    let worked = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let f1 = f1_from_counts(1, 1, 1).0;
    outcome(
        mismatches == 0 && worked == 0.75 && f1 == 0.5,
        format!("{mismatches} mismatches in 500 cases, worked AUC {worked}, F1 {f1}"),
    )
}

/// Synthetic data, pretraining, probing and analysis on the smoke config;
/// returns every emitted table.
fn smoke_pipeline(cfg: &ExperimentConfig) -> Vec<String> {
    let data = generate_synthetic::<f32>(&cfg.dataset.synth, cfg.seed).unwrap();
    let mc = cfg.model_config();
    let enc = Encoder::new(&mc, data.n_rois(), data.atlas.shape(), cfg.seed).unwrap();
    let pred = Predictor::new(&mc, cfg.seed);
    let state = train_ssl(&data, TrainState::new(enc, pred), &cfg.train, &cfg.augment, None).unwrap();
    let mut tables = vec![state.log.to_tsv()];
    let subjects = data.subjects();
    let embeddings = subject_embeddings(&state.encoder, &data, &subjects).unwrap();
    let fc = subject_connectivity(&data, &subjects).unwrap();
    let mut rows = Vec::new();
    for name in &cfg.analysis.phenotypes {
        let categorical = data.phenotypes.get(name).unwrap().kind == PhenotypeKind::Categorical;
        let folds = make_folds(&data, cfg.downstream.folds, categorical.then_some(name.as_str()), cfg.seed).unwrap();
        let dc = DownstreamConfig {
            phenotype: name.clone(),
            ..cfg.downstream.clone()
        };
        let model = CvModel {
            encoder: &state.encoder,
            head_hidden: mc.head_hidden_dims(),
        };
        let report = run_cv(&data, &folds, &model, &dc, None).unwrap();
        tables.push(report.to_tsv());
        tables.push(report.instance_tsv());
        let values: Vec<f64> = subjects.iter().map(|s| data.phenotypes.value(name, s).unwrap()).collect();
        rows.push(correlate_phenotype(name, &subjects, &embeddings, &fc, &values, Some(&folds)).unwrap());
    }
    tables.push(correlation_table(&rows).unwrap());
    let maps: Vec<ImportanceMap> = data
        .instances
        .iter()
        .take(4)
        .map(|inst| ImportanceMap {
            values: explain(&state.encoder, None, inst, &data.atlas, &cfg.analysis.explain, ExplainMode::Embedding)
                .unwrap(),
            scope: "embedding".into(),
            fold: None,
        })
        .collect();
    tables.push(importance_table(&[aggregate_importance(&maps).unwrap()]).unwrap());
    tables
}

fn criterion_12() -> Outcome {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = ExperimentConfig::load(&path).unwrap().resolved();
    let first = smoke_pipeline(&cfg);
    let second = smoke_pipeline(&cfg);
    let identical = first.iter().zip(&second).filter(|(a, b)| a.as_bytes() == b.as_bytes()).count();
    outcome(
        identical == first.len() && first.len() == second.len(),
        format!("{identical}/{} tables byte-identical", first.len()),
    )
}

fn run(n: usize, budget: Duration, f: impl FnOnce() -> Outcome, failed: &mut Vec<usize>) {
    let started = Instant::now();
    let o = f();
    let elapsed = started.elapsed();
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    if !pass {
        failed.push(n);
    }
    println!(
        "criterion {n:>2}: {} | {} | {:.1}s of {}s{}",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { " (over budget)" }
    );
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut failed = Vec::new();
    run(1, secs(1), criterion_1, &mut failed);
    run(2, secs(10), criterion_2, &mut failed);
    run(3, secs(120), criterion_3, &mut failed);
    run(4, secs(60), criterion_4, &mut failed);
    run(5, secs(60), criterion_5, &mut failed);
    run(6, secs(30), criterion_6, &mut failed);
    run(7, secs(15 * 60), criterion_7, &mut failed);
    let started = Instant::now();
    let encoders: Vec<(Dataset<f32>, Encoder<f32>)> = (0..3)
        .map(|seed| {
            let data = planted(seed, 2.0);
            let enc = pretrain(&data, seed, true, true).encoder;
            (data, enc)
        })
        .collect();
    let pretraining = started.elapsed();
    println!("pretrained planted-signal encoders in {:.1}s", pretraining.as_secs_f64());
    run(8, secs(20 * 60) - pretraining, || criterion_8(&encoders), &mut failed);
    run(9, secs(60), criterion_9, &mut failed);
    run(10, secs(10 * 60), || criterion_10(&encoders), &mut failed);
    run(11, secs(30), criterion_11, &mut failed);
    run(12, secs(10 * 60), criterion_12, &mut failed);
    println!("failed: {failed:?}; expected red: {KNOWN_RED:?}");
    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_RED.contains(n)).collect();
    let fixed: Vec<usize> = KNOWN_RED.iter().copied().filter(|n| !failed.contains(n)).collect();
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
    assert!(fixed.is_empty(), "criteria now passing, update KNOWN_RED: {fixed:?}");
}
