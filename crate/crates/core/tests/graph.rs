mod common;

use brainsimsiam::data::{extract_roi_series, AtlasVolume, RoiTimeSeries, VoxelSeries};
use brainsimsiam::graph::{
    build_instance, edge_budget, mean_image, partial_corr_matrix, pearson_matrix, threshold_edges, BrainGraph, Edge,
    GraphConfig,
};
use brainsimsiam::rng::stream;
use common::{brute_force_edges, normal_matrix, partial_oracle, pearson_oracle, random_symmetric};
use ndarray::{array, Array2, Array3, Array4};
use rand::seq::SliceRandom;

fn series(data: Array2<f64>) -> RoiTimeSeries<f64> {
    RoiTimeSeries::new(data).unwrap()
}

#[test]
fn pearson_closed_form() {
    let p = pearson_matrix(&series(array![[1.0, 1.0], [2.0, 2.0], [3.0, 4.0]])).unwrap();
    let expected = pearson_oracle(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]);
    assert!((p[[0, 1]] - expected).abs() < 1e-12);
    assert!((p[[0, 1]] - 0.98198).abs() < 1e-5);
}

#[test]
fn pearson_identical_and_negated_columns() {
    let p = pearson_matrix(&series(array![[1.0, 1.0, -1.0], [3.0, 3.0, -3.0], [2.0, 2.0, -2.0], [5.0, 5.0, -5.0]]))
        .unwrap();
    assert!((p[[0, 1]] - 1.0).abs() < 1e-12);
    assert!((p[[0, 2]] + 1.0).abs() < 1e-12);
}

#[test]
fn pearson_zero_variance_column_is_zeroed() {
    let p = pearson_matrix(&series(array![[1.0, 7.0, 2.0], [2.0, 7.0, 1.0], [4.0, 7.0, 3.0]])).unwrap();
    assert_eq!(p.row(1).to_vec(), vec![0.0; 3]);
    assert_eq!(p.column(1).to_vec(), vec![0.0; 3]);
    assert_eq!(p[[0, 0]], 1.0);
    assert!(p.iter().all(|v| v.is_finite()));
}

#[test]
fn pearson_rejects_single_frame_and_non_finite() {
    assert!(pearson_matrix(&series(array![[1.0, 2.0]])).is_err());
    assert!(RoiTimeSeries::new(array![[1.0, f64::NAN], [1.0, 2.0]]).is_err());
}

#[test]
fn pearson_is_affine_invariant() {
    let a = normal_matrix(3, 50, 6);
    let mut b = a.clone();
    for (c, mut col) in b.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| v * (0.5 + c as f64) + 10.0 - c as f64);
    }
    let (pa, pb) = (pearson_matrix(&series(a)).unwrap(), pearson_matrix(&series(b)).unwrap());
    assert!((&pa - &pb).iter().all(|d| d.abs() < 1e-9));
}

#[test]
fn partial_corr_matches_residual_oracle() {
    for n in 2..=5 {
        let data = normal_matrix(10 + n as u64, 2000, n);
        let mut mixed = data.clone();
        for t in 0..2000 {
            for c in 1..n {
                mixed[[t, c]] += 0.6 * mixed[[t, c - 1]];
            }
        }
        let p = partial_corr_matrix(&series(mixed.clone()), 0.0).unwrap();
        for i in 0..n {
            assert_eq!(p[[i, i]], 1.0);
            for j in i + 1..n {
                let o = partial_oracle(&mixed, i, j);
                assert!((p[[i, j]] - o).abs() < 1e-8, "n={n} ({i},{j}): {} vs {o}", p[[i, j]]);
                assert_eq!(p[[i, j]], p[[j, i]]);
            }
        }
    }
}

#[test]
fn two_column_partial_equals_pearson() {
    let data = normal_matrix(4, 500, 2);
    let mut d = data.clone();
    d.column_mut(1).scaled_add(0.3, &data.column(0));
    let p = partial_corr_matrix(&series(d.clone()), 0.0).unwrap();
    let r = pearson_matrix(&series(d)).unwrap();
    assert!((p[[0, 1]] - r[[0, 1]]).abs() < 1e-8);
}

#[test]
fn chain_has_no_direct_link() {
    let noise = normal_matrix(5, 2000, 3);
    let mut d = Array2::zeros((2000, 3));
    for t in 0..2000 {
        let x = noise[[t, 0]];
        let z = 0.8 * x + 0.6 * noise[[t, 1]];
        let y = 0.8 * z + 0.6 * noise[[t, 2]];
        d[[t, 0]] = x;
        d[[t, 1]] = z;
        d[[t, 2]] = y;
    }
    let p = partial_corr_matrix(&series(d.clone()), 0.0).unwrap();
    assert!(p[[0, 2]].abs() < 0.1);
    assert!((p[[0, 2]] - partial_oracle(&d, 0, 2)).abs() < 1e-8);
    assert!(p[[0, 1]] > 0.5 && p[[1, 2]] > 0.5);
}

#[test]
fn independent_columns_have_small_partials() {
    for seed in 0..5 {
        let p = partial_corr_matrix(&series(normal_matrix(100 + seed, 2000, 4)), 0.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(p[[i, j]].abs() < 0.15);
                }
            }
        }
    }
}

#[test]
fn singular_covariance_asks_for_ridge() {
    let err = partial_corr_matrix(&series(normal_matrix(6, 4, 6)), 0.0).unwrap_err();
    assert!(err.to_string().contains("positive ridge"), "{err}");
    let p = partial_corr_matrix(&series(normal_matrix(6, 4, 6)), 1e-3).unwrap();
    assert!(p.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
}

#[test]
fn threshold_matches_brute_force_for_all_small_n() {
    for n in 2..64 {
        let m = random_symmetric(n as u64, n);
        let got: Vec<(usize, usize, f64)> =
            threshold_edges(&m, 0.05).unwrap().iter().map(|e| (e.i, e.j, e.w)).collect();
        assert_eq!(got, brute_force_edges(&m), "n = {n}");
    }
}

#[test]
fn threshold_worked_cases() {
    let m = array![[1.0, 0.9, -0.5], [0.9, 1.0, 0.1], [-0.5, 0.1, 1.0]];
    let e = threshold_edges(&m, 0.05).unwrap();
    assert_eq!(e, vec![Edge { i: 0, j: 1, w: 0.9 }]);
    assert!(threshold_edges(&Array2::<f64>::zeros((5, 5)), 0.05).unwrap().is_empty());
    let mut asym = m.clone();
    asym[[1, 0]] = 0.8;
    assert!(threshold_edges(&asym, 0.05).is_err());
    assert!(threshold_edges(&m, 0.0).is_err());
}

#[test]
fn atlas_sized_edge_counts() {
    // 268 * 267 / 2 = 35778 pairs; 84 * 83 / 2 = 3486 pairs
    assert_eq!(edge_budget(268, 0.05), (35778 + 19) / 20);
    assert_eq!(threshold_edges(&random_symmetric(1, 268), 0.05).unwrap().len(), 1789);
    assert_eq!(edge_budget(84, 0.05), 175);
}

#[test]
fn threshold_is_order_independent() {
    let n = 20;
    let m = random_symmetric(9, n);
    let reference = threshold_edges(&m, 0.1).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(9, &[8]));
    let permuted = Array2::from_shape_fn((n, n), |(a, b)| m[[perm[a], perm[b]]]);
    let back: std::collections::BTreeSet<(usize, usize)> = threshold_edges(&permuted, 0.1)
        .unwrap()
        .iter()
        .map(|e| {
            let (a, b) = (perm[e.i], perm[e.j]);
            (a.min(b), a.max(b))
        })
        .collect();
    let expected: std::collections::BTreeSet<(usize, usize)> = reference.iter().map(|e| (e.i, e.j)).collect();
    // with ties the lexicographic rule may pick different members; compare magnitudes instead
    let mags = |set: &std::collections::BTreeSet<(usize, usize)>| {
        let mut v: Vec<i64> = set.iter().map(|&(i, j)| (m[[i, j]].abs() * 1e6) as i64).collect();
        v.sort();
        v
    };
    assert_eq!(mags(&back), mags(&expected));
    let column_major = m.t().to_owned().reversed_axes();
    assert_eq!(threshold_edges(&column_major, 0.1).unwrap(), reference);
}

#[test]
fn mean_image_cases() {
    let one = Array4::from_shape_fn((1, 2, 2, 2), |(_, x, y, z)| (x + 2 * y + 4 * z) as f64);
    let img = mean_image(&VoxelSeries::new(one.clone()).unwrap()).unwrap();
    assert_eq!(img.data().as_slice().unwrap(), one.as_slice().unwrap());
    let cancel = Array4::from_shape_fn((2, 2, 2, 2), |(t, x, _, _)| if t == 0 { x as f64 } else { -(x as f64) });
    let img = mean_image(&VoxelSeries::new(cancel).unwrap()).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0));
    let two = Array4::from_shape_fn((2, 1, 1, 1), |(t, ..)| 2.0 * t as f64);
    assert_eq!(mean_image(&VoxelSeries::new(two).unwrap()).unwrap().data()[[0, 0, 0]], 1.0);
}

fn line_atlas(n: usize) -> AtlasVolume {
    AtlasVolume::new(Array3::from_shape_fn((n, 2, 2), |(x, _, _)| x as i32 + 1), n).unwrap()
}

fn random_series(seed: u64, t: usize, shape: [usize; 3]) -> VoxelSeries<f64> {
    let v = normal_matrix(seed, t, shape.iter().product());
    VoxelSeries::new(Array4::from_shape_vec((t, shape[0], shape[1], shape[2]), v.into_raw_vec_and_offset().0).unwrap())
        .unwrap()
}

#[test]
fn build_instance_is_the_composition() {
    let atlas = line_atlas(6);
    let s = random_series(11, 40, [6, 2, 2]);
    let cfg = GraphConfig::default();
    let inst = build_instance("s1", "t1", &s, &atlas, "line", &cfg).unwrap();
    let roi = extract_roi_series(&s, &atlas).unwrap();
    assert_eq!(inst.graph.node_features(), &pearson_matrix(&roi).unwrap());
    let edges = threshold_edges(&partial_corr_matrix(&roi, cfg.ridge).unwrap(), cfg.edge_fraction).unwrap();
    assert_eq!(inst.graph, BrainGraph::new(pearson_matrix(&roi).unwrap(), edges).unwrap());
    assert_eq!(inst.image, mean_image(&s).unwrap());
    assert!(inst.graph.node_features().diag().iter().all(|&v| v == 1.0));
    assert_eq!((inst.subject_id.as_str(), inst.task_id.as_str(), inst.atlas_ref.as_str()), ("s1", "t1", "line"));
}

#[test]
fn atlas_sized_instance_has_expected_edges() {
    let atlas = line_atlas(84);
    let inst = build_instance("s", "t", &random_series(12, 60, [84, 2, 2]), &atlas, "dk", &GraphConfig::default())
        .unwrap();
    assert_eq!(inst.graph.edges().len(), 175);
}

#[test]
fn graph_rejects_bad_edges() {
    let f = Array2::<f64>::eye(3);
    assert!(BrainGraph::new(f.clone(), vec![Edge { i: 0, j: 0, w: 1.0 }]).is_err());
    assert!(BrainGraph::new(f.clone(), vec![Edge { i: 0, j: 3, w: 1.0 }]).is_err());
    assert!(BrainGraph::new(f.clone(), vec![Edge { i: 0, j: 1, w: 0.0 }]).is_err());
    assert!(BrainGraph::new(f.clone(), vec![Edge { i: 0, j: 1, w: 0.5 }, Edge { i: 1, j: 0, w: 0.5 }]).is_err());
    let g = BrainGraph::new(f, vec![Edge { i: 2, j: 1, w: -0.5 }]).unwrap();
    assert_eq!(g.edges()[0], Edge { i: 1, j: 2, w: -0.5 });
}
