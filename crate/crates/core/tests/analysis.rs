mod common;

use brainsimsiam::analysis::{
    aggregate_importance, correlate_phenotype, correlation_table, explain, export_report, importance_table,
    AnalysisResults, max_channel_correlation, max_fc_correlation, ExplainConfig,
    ExplainMode, ImportanceMap, MaxCorrelation,
};
use brainsimsiam::data::{generate_synthetic, make_folds, Dataset, SynthConfig};
use brainsimsiam::downstream::metrics::pearson;
use brainsimsiam::nn::params::{param_hash, zero_all};
use brainsimsiam::nn::{Encoder, HeadKind, ModelConfig, TaskHead};
use brainsimsiam::Error;
use common::{normal_matrix, normal_vec};
use ndarray::Array2;

fn scan_oracle(x: &Array2<f64>, y: &[f64]) -> (f64, usize) {
    let mut best = (0.0f64, usize::MAX);
    for c in 0..x.ncols() {
        let col = x.column(c).to_vec();
        let n = y.len() as f64;
        let (mx, my) = (col.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxx: f64 = col.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        if sxx == 0.0 || syy == 0.0 {
            continue;
        }
        let sxy: f64 = col.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
        if best.1 == usize::MAX || r.abs() > best.0.abs() {
            best = (r, c);
        }
    }
    best
}

#[test]
fn self_correlation() {
    let mut x = normal_matrix(1, 30, 10);
    let y = normal_vec(2, 30);
    x.column_mut(6).assign(&ndarray::Array1::from(y.clone()));
    let m = max_channel_correlation(&x, &y).unwrap();
    assert_eq!(m.at, 6);
    assert!((m.r - 1.0).abs() < 1e-12);
}

#[test]
fn null_channels_stay_small() {
    for seed in 0..5 {
        let x = normal_matrix(100 + seed, 200, 2048);
        let y = normal_vec(200 + seed, 200);
        let m = max_channel_correlation(&x, &y).unwrap();
        assert!(m.r.abs() < 0.3, "seed {seed}: {m:?}");
    }
}

#[test]
fn planted_channel_is_recovered() {
    for seed in 0..5 {
        let mut x = normal_matrix(300 + seed, 200, 64);
        let y = normal_vec(400 + seed, 200);
        let noise = normal_vec(500 + seed, 200);
        for r in 0..200 {
            x[[r, 17]] = 0.8 * y[r] + 0.6 * noise[r];
        }
        let m = max_channel_correlation(&x, &y).unwrap();
        assert_eq!(m.at, 17);
        assert!((m.r - 0.8).abs() <= 0.1, "{m:?}");
    }
}

#[test]
fn channel_scan_matches_oracle_exactly() {
    for seed in 0..20 {
        let d = 1 + (seed as usize * 7) % 64;
        let mut x = normal_matrix(600 + seed, 12, d);
        if d > 2 {
            x.column_mut(1).fill(3.0);
        }
        let y = normal_vec(700 + seed, 12);
        let m = max_channel_correlation(&x, &y).unwrap();
        let (r, c) = scan_oracle(&x, &y);
        assert_eq!((m.r, m.at), (r, c));
    }
}

#[test]
fn degenerate_inputs() {
    let flat = Array2::from_elem((5, 4), 1.0);
    let y = normal_vec(1, 5);
    assert!(matches!(max_channel_correlation(&flat, &y), Err(Error::MetricUndefined(_))));
    let x = normal_matrix(1, 2, 4);
    assert!(max_channel_correlation(&x, &[1.0, 2.0]).is_err());
}

#[test]
fn fc_scan_on_three_nodes() {
    let y = normal_vec(9, 10);
    let noise = normal_vec(10, 30);
    let fc: Vec<Array2<f64>> = (0..10)
        .map(|s| {
            let mut m = Array2::eye(3);
            let set = |m: &mut Array2<f64>, i: usize, j: usize, v: f64| {
                m[[i, j]] = v;
                m[[j, i]] = v;
            };
            set(&mut m, 0, 1, noise[s]);
            set(&mut m, 0, 2, 0.5);
            set(&mut m, 1, 2, y[s] + 0.3 * noise[10 + s]);
            m
        })
        .collect();
    let m = max_fc_correlation(&fc, &y).unwrap();
    let entries = [(0, 1), (0, 2), (1, 2)];
    let mut best: Option<MaxCorrelation<(usize, usize)>> = None;
    for &(i, j) in &entries {
        let e: Vec<f64> = fc.iter().map(|f| f[[i, j]]).collect();
        if let Some(r) = pearson(&e, &y) {
            if best.map_or(true, |b| r.abs() > b.r.abs()) {
                best = Some(MaxCorrelation { r, at: (i, j) });
            }
        }
    }
    assert_eq!(Some(m), best);
    assert_eq!(m.at, (1, 2));
    assert!(m.r.is_finite());
}

#[test]
fn planted_fc_pair_is_recovered() {
    let y = normal_vec(11, 40);
    let fc: Vec<Array2<f64>> = (0..40)
        .map(|s| {
            let mut m = normal_matrix(1000 + s as u64, 8, 8);
            m = &m + &m.t();
            m[[2, 5]] = y[s] + 0.2 * m[[0, 1]];
            m
        })
        .collect();
    assert_eq!(max_fc_correlation(&fc, &y).unwrap().at, (2, 5));
}

fn small_data(seed: u64) -> Dataset<f64> {
    let cfg = SynthConfig {
        n_subjects: 4,
        n_tasks: 2,
        n_rois: 8,
        n_frames: 24,
        n_communities: 2,
        n_class_rois: 2,
        ..Default::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn small_encoder(seed: u64, no_gnn: bool) -> Encoder<f64> {
    let mc = ModelConfig {
        d: 16,
        gat_width: 4,
        cnn_channels: vec![2, 2, 4, 4],
        no_gnn,
        ..Default::default()
    };
    Encoder::new(&mc, 8, [16, 16, 16], seed).unwrap()
}

#[test]
fn sparsity_limit() {
    let data = small_data(1);
    let enc = small_encoder(1, false);
    let config = ExplainConfig {
        sparsity_weight: 1e3,
        ..Default::default()
    };
    let m = explain(&enc, None, &data.instances[0], &data.atlas, &config, ExplainMode::Embedding).unwrap();
    assert!(m.iter().all(|&v| v < 0.1), "{m:?}");
}

#[test]
fn stationary_without_fidelity_gradient() {
    let data = small_data(2);
    let enc = small_encoder(2, false);
    let mut head = TaskHead::new(16, &[8], HeadKind::Classification { n_classes: 2 }, 2);
    zero_all(&mut head);
    let config = ExplainConfig {
        sparsity_weight: 0.0,
        entropy_weight: 0.0,
        step_size: 1.0,
        ..Default::default()
    };
    let m = explain(&enc, Some(&head), &data.instances[0], &data.atlas, &config, ExplainMode::Prediction).unwrap();
    assert!(m.iter().all(|v| (v - 0.9).abs() <= 0.05), "{m:?}");
}

#[test]
fn explain_leaves_model_untouched() {
    let data = small_data(3);
    let enc = small_encoder(3, false);
    let head = TaskHead::new(16, &[8], HeadKind::Regression, 3);
    let (he, hh) = (param_hash(&enc), param_hash(&head));
    let config = ExplainConfig {
        iterations: 5,
        ..Default::default()
    };
    explain(&enc, Some(&head), &data.instances[1], &data.atlas, &config, ExplainMode::Prediction).unwrap();
    assert_eq!((param_hash(&enc), param_hash(&head)), (he, hh));
    assert!(explain(&enc, None, &data.instances[1], &data.atlas, &config, ExplainMode::Prediction).is_err());
}

#[test]
fn image_only_model_still_moves_the_mask() {
    let data = small_data(4);
    let enc = small_encoder(4, true);
    let head = TaskHead::new(16, &[8], HeadKind::Classification { n_classes: 2 }, 4);
    let config = ExplainConfig {
        sparsity_weight: 0.0,
        entropy_weight: 0.0,
        step_size: 1e3,
        iterations: 20,
        ..Default::default()
    };
    let m = explain(&enc, Some(&head), &data.instances[0], &data.atlas, &config, ExplainMode::Prediction).unwrap();
    let moved = m.iter().map(|v| (v - 0.9).abs()).fold(0.0, f64::max);
    assert!(moved > 1e-3, "{m:?}");
}

fn map(values: Vec<f64>, fold: Option<usize>) -> ImportanceMap {
    ImportanceMap {
        values,
        scope: "embedding".into(),
        fold,
    }
}

#[test]
fn aggregation() {
    let single = map(vec![0.1, 0.7], None);
    assert_eq!(aggregate_importance(&[single.clone()]).unwrap().values, single.values);
    let half = aggregate_importance(&[map(vec![0.0; 3], None), map(vec![1.0; 3], None)]).unwrap();
    assert_eq!(half.values, vec![0.5; 3]);

    // fold f, instance i carries f + i / 4 and, for the second ROI, i
    let mut maps = Vec::new();
    for f in 0..3 {
        for i in 0..4 {
            maps.push(map(vec![f as f64 + i as f64 / 4.0, i as f64], Some(f)));
        }
    }
    maps.push(map(vec![10.0, 10.0], Some(2)));
    let fold_means = [
        [0.375, 1.5],
        [1.375, 1.5],
        [(2.0 + 2.25 + 2.5 + 2.75 + 10.0) / 5.0, (0.0 + 1.0 + 2.0 + 3.0 + 10.0) / 5.0],
    ];
    let manual: Vec<f64> = (0..2).map(|r| fold_means.iter().map(|f| f[r]).sum::<f64>() / 3.0).collect();
    let got = aggregate_importance(&maps).unwrap();
    for (a, b) in got.values.iter().zip(&manual) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut shuffled = maps.clone();
    shuffled.reverse();
    shuffled.swap(0, 7);
    assert_eq!(aggregate_importance(&shuffled).unwrap().values, got.values);

    let mut mixed = maps.clone();
    mixed[3].scope = "diagnosis".into();
    assert!(aggregate_importance(&mixed).is_err());
    assert!(aggregate_importance(&[]).is_err());
}

#[test]
fn report_shapes_and_determinism() {
    let empty = AnalysisResults::default();
    assert_eq!(
        correlation_table(&empty.correlations).unwrap(),
        "phenotype\tembedding_max_r\tembedding_channel\tfc_max_r\tfc_pair\n"
    );
    assert_eq!(importance_table(&empty.importance).unwrap(), "roi\n");

    let data = generate_synthetic::<f64>(
        &SynthConfig {
            n_subjects: 20,
            n_tasks: 1,
            n_rois: 8,
            n_frames: 24,
            n_communities: 2,
            n_class_rois: 2,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let subjects = data.subjects();
    let folds = make_folds(&data, 5, None, 5).unwrap();
    let emb = normal_matrix(5, 20, 16);
    let fc = brainsimsiam::analysis::subject_connectivity(&data, &subjects).unwrap();
    let values: Vec<f64> = subjects.iter().map(|s| data.phenotypes.value("score", s).unwrap()).collect();
    let row = correlate_phenotype("score", &subjects, &emb, &fc, &values, Some(&folds)).unwrap();
    assert_eq!(row.folds.len(), 5);
    let results = AnalysisResults {
        correlations: vec![row],
        importance: vec![map(vec![0.2; 8], None)],
    };
    let table = correlation_table(&results.correlations).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    assert_eq!(header.len(), 5 + 5 + 1);
    assert_eq!(header[5..], ["fold_0", "fold_1", "fold_2", "fold_3", "fold_4", "fold_mean_abs"]);

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = export_report(&results, a.path(), true).unwrap();
    assert_eq!(files.len(), 4);
    export_report(&results, b.path(), false).unwrap();
    for name in ["correlation.tsv", "importance.tsv"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    assert!(std::fs::read(a.path().join("importance.pgm")).unwrap().starts_with(b"P5\n"));
}
