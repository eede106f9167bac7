#![allow(dead_code)]

use brainsimsiam::data::AtlasVolume;
use brainsimsiam::graph::{BrainGraph, Edge, MeanImage};
use brainsimsiam::nn::cnn::CnnEncoder;
use brainsimsiam::nn::gat::{GatLayer, Neighbourhoods};
use brainsimsiam::nn::gradcheck::{check_input, check_params, GradCheckOptions, GradCheckReport};
use brainsimsiam::nn::mlp::Mlp;
use brainsimsiam::nn::params::zeros_like;
use brainsimsiam::nn::Mode;
use brainsimsiam::rng::stream;
use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn normal_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = stream(seed, &[1000]);
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vec(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = stream(seed, &[1001]);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random graph with roughly `density` of all pairs connected by signed
/// weights in (-1, 1).
pub fn random_graph(seed: u64, n: usize, feat: usize, density: f64) -> BrainGraph<f64> {
    let mut rng = stream(seed, &[1002]);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < density {
                let mut w: f64 = rng.gen_range(-1.0..1.0);
                if w == 0.0 {
                    w = 0.5;
                }
                edges.push(Edge { i, j, w });
            }
        }
    }
    BrainGraph::new(normal_matrix(seed, n, feat), edges).unwrap()
}

/// Atlas on a cube with `n` ROIs laid out as slabs along the first axis
/// inside a centred ball; everything else is background.
pub fn slab_atlas(side: usize, n: usize) -> AtlasVolume {
    let c = (side as f64 - 1.0) / 2.0;
    let r2 = (side as f64 / 2.0).powi(2);
    let labels = Array3::from_shape_fn((side, side, side), |(x, y, z)| {
        let d = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
        if d <= r2 {
            1 + (x * n / side) as i32
        } else {
            0
        }
    });
    AtlasVolume::new(labels, n).unwrap()
}

pub fn random_image(seed: u64, shape: [usize; 3]) -> MeanImage<f64> {
    let v = normal_vec(seed, shape.iter().product());
    MeanImage::new(Array3::from_shape_vec(shape, v).unwrap())
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

pub fn gat_layer_check(seed: u64, n: usize, opts: &GradCheckOptions) -> (GradCheckReport, GradCheckReport) {
    let g = random_graph(seed, n, 5, 0.5);
    let layer: GatLayer<f64> = GatLayer::new(&mut stream(seed, &[1]), 5, 6);
    let nbrs = Neighbourhoods::build(n, g.edges()).unwrap();
    let c = normal_matrix(seed + 1, n, 6);
    let (_, cache) = layer.forward(g.node_features(), &nbrs);
    let mut grad = zeros_like(&layer);
    let dh = layer.backward(&cache, &nbrs, &c, &mut grad);
    let h = g.node_features().clone();
    let params = check_params(&layer, &grad, |l| dot(&l.forward(&h, &nbrs).0, &c), opts);
    let input = check_input(
        h.as_slice().unwrap(),
        dh.as_slice().unwrap(),
        |x| {
            let x = Array2::from_shape_vec(h.raw_dim(), x.to_vec()).unwrap();
            dot(&layer.forward(&x, &nbrs).0, &c)
        },
        opts,
    );
    (params, input)
}

pub fn cnn_check(seed: u64, opts: &GradCheckOptions) -> (GradCheckReport, GradCheckReport) {
    let shape = [16, 16, 16];
    let cnn: CnnEncoder<f64> = CnnEncoder::new(&mut stream(seed, &[2]), shape, &[8, 16, 32, 64]).unwrap();
    let img = random_image(seed, shape);
    let c = normal_vec(seed + 2, 64);
    let loss = |m: &CnnEncoder<f64>, x: &[f64]| m.forward(x).0.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = cnn.forward(img.as_slice());
    let mut grad = zeros_like(&cnn);
    let dx = cnn.backward(&cache, &c, &mut grad, true).unwrap();
    let params = check_params(&cnn, &grad, |m| loss(m, img.as_slice()), opts);
    let input = check_input(img.as_slice(), &dx, |x| loss(&cnn, x), opts);
    (params, input)
}

/// Gradient check of a batch-standardized MLP in training mode.
pub fn mlp_check(mlp: &Mlp<f64>, batch: usize, seed: u64, opts: &GradCheckOptions) -> (GradCheckReport, GradCheckReport) {
    let x = normal_matrix(seed, batch, mlp.in_dim());
    let c = normal_matrix(seed + 3, batch, mlp.out_dim());
    let (_, cache) = mlp.forward(&x, Mode::Train);
    let mut grad = zeros_like(mlp);
    let dx = mlp.backward(&cache, &c, &mut grad);
    let params = check_params(mlp, &grad, |m| dot(&m.forward(&x, Mode::Train).0, &c), opts);
    let input = check_input(
        x.as_slice().unwrap(),
        dx.as_slice().unwrap(),
        |v| {
            let v = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            dot(&mlp.forward(&v, Mode::Train).0, &c)
        },
        opts,
    );
    (params, input)
}

pub fn projection_check(seed: u64, opts: &GradCheckOptions) -> (GradCheckReport, GradCheckReport) {
    let mlp = Mlp::new(&mut stream(seed, &[3]), &[20, 16, 16], true, Some(false));
    mlp_check(&mlp, 6, seed, opts)
}

pub fn predictor_check(seed: u64, opts: &GradCheckOptions) -> (GradCheckReport, GradCheckReport) {
    let mlp = Mlp::new(&mut stream(seed, &[4]), &[16, 4, 16], true, None);
    mlp_check(&mlp, 6, seed, opts)
}

/// Checks the mask gradient of a random linear functional of the masked
/// graph and image.
pub fn soft_mask_check(seed: u64, opts: &GradCheckOptions) -> GradCheckReport {
    use brainsimsiam::augment::{soft_roi_mask, soft_roi_mask_backward};
    let n = 6;
    let atlas = slab_atlas(8, n);
    let g = random_graph(seed, n, n, 0.5);
    let img = random_image(seed, [8, 8, 8]);
    let cf = normal_matrix(seed + 4, n, n);
    let ci = normal_vec(seed + 5, 512);
    let mut rng = stream(seed, &[5]);
    let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
    let loss = |m: &[f64]| {
        let (g2, i2) = soft_roi_mask(&g, &img, &atlas, &Array1::from_vec(m.to_vec())).unwrap();
        dot(g2.node_features(), &cf) + i2.as_slice().iter().zip(&ci).map(|(a, b)| a * b).sum::<f64>()
    };
    let analytic = soft_roi_mask_backward(&g, &img, &atlas, &cf, &ci);
    check_input(&m, analytic.as_slice().unwrap(), loss, opts)
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Least-squares residual of `y` on the columns `xs` plus an intercept,
/// via normal equations and Gauss-Jordan elimination.
pub fn residual(y: &[f64], xs: &[Vec<f64>]) -> Vec<f64> {
    let t = y.len();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; t]];
    cols.extend(xs.iter().cloned());
    let k = cols.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = (0..t).map(|r| cols[i][r] * cols[j][r]).sum();
        }
        a[i][k] = (0..t).map(|r| cols[i][r] * y[r]).sum();
    }
    for c in 0..k {
        let p = (c..k).max_by(|&x, &z| a[x][c].abs().partial_cmp(&a[z][c].abs()).unwrap()).unwrap();
        a.swap(c, p);
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=k {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..k).map(|i| a[i][k] / a[i][i]).collect();
    (0..t).map(|r| y[r] - (0..k).map(|i| beta[i] * cols[i][r]).sum::<f64>()).collect()
}

pub fn partial_oracle(data: &Array2<f64>, i: usize, j: usize) -> f64 {
    let col = |c: usize| data.column(c).to_vec();
    let rest: Vec<Vec<f64>> = (0..data.ncols()).filter(|&c| c != i && c != j).map(col).collect();
    pearson_oracle(&residual(&col(i), &rest), &residual(&col(j), &rest))
}

pub fn random_symmetric(seed: u64, n: usize) -> Array2<f64> {
    let mut rng = stream(seed, &[7]);
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = 1.0;
        for j in i + 1..n {
            // coarse grid so that ties occur
            let v = (rng.gen_range(-20i32..=20) as f64) / 20.0;
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

pub fn brute_force_edges(m: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let n = m.nrows();
    let pairs = n * (n - 1) / 2;
    let budget = (pairs + 19) / 20;
    let mut all: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if m[[i, j]] != 0.0 {
                all.push((i, j, m[[i, j]]));
            }
        }
    }
    // stable sort keeps lexicographic order among equal magnitudes
    all.sort_by(|a, b| b.2.abs().partial_cmp(&a.2.abs()).unwrap());
    all.truncate(budget);
    all.sort_by_key(|e| (e.0, e.1));
    all
}
