use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpn_core::linalg::Matrix;
use vpn_core::solver::{branch_and_bound, embed_query, propagate_bounds};
use vpn_core::{AffineStage, Budget, Image, Layer, Network, ReducedQuery, SearchBox, Shape, TriggerRegion};

fn random_dense(rng: &mut impl Rng, shape: Shape, hidden: &[usize], labels: usize) -> Network {
    let mut dims = vec![shape.len()];
    dims.extend_from_slice(hidden);
    dims.push(labels);
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let scale = 1.0 / (w[0] as f64).sqrt();
        layers.push(Layer::Dense {
            weights: Matrix::from_vec(
                w[1],
                w[0],
                (0..w[0] * w[1]).map(|_| rng.gen_range(-scale..scale)).collect(),
            ),
            bias: (0..w[1]).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        });
        if i + 2 < dims.len() {
            layers.push(Layer::Relu);
        }
    }
    Network::new(shape, layers, labels).unwrap()
}

fn random_query(rng: &mut impl Rng, d: usize, hidden: usize) -> ReducedQuery {
    let dims = [d, hidden, hidden, 3];
    let stages = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| AffineStage {
            matrix: Matrix::from_vec(w[1], w[0], (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            bias: (0..w[1]).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            relu_after: i < 2,
        })
        .collect();
    ReducedQuery::from_stages(stages, 0, 1e-6).unwrap()
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = Shape::new(28, 28, 1);
    let net = random_dense(&mut rng, shape, &[32, 32], 10);
    let img = Image::new(shape, (0..shape.len()).map(|_| rng.gen()).collect()).unwrap();
    c.bench_function("forward dense 784-32-32-10", |b| b.iter(|| net.forward(&img).unwrap()));
    c.bench_function("lower to affine", |b| b.iter(|| net.lower_to_affine()));
}

fn bench_bounds(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = Shape::new(28, 28, 1);
    let net = random_dense(&mut rng, shape, &[32, 32], 10);
    let affine = Arc::new(net.lower_to_affine());
    let img = Image::new(shape, (0..shape.len()).map(|_| rng.gen()).collect()).unwrap();
    let region = TriggerRegion::new(25, 25, 3, 1);
    c.bench_function("embed 3x3 query", |b| {
        b.iter(|| embed_query(&affine, &img, &region, 7, 1e-6).unwrap())
    });
    let q = embed_query(&affine, &img, &region, 7, 1e-6).unwrap();
    let unit = SearchBox::unit(q.dim());
    c.bench_function("propagate bounds d=9", |b| b.iter(|| propagate_bounds(&q, &unit)));
}

fn bench_bab(c: &mut Criterion) {
    let mut group = c.benchmark_group("branch and bound");
    for d in [2, 4, 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let qs: Vec<ReducedQuery> = (0..8).map(|_| random_query(&mut rng, d, 16)).collect();
        let budget = Budget {
            max_nodes: 20_000,
            ..Budget::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(d), &qs, |b, qs| {
            b.iter(|| {
                for q in qs {
                    branch_and_bound(q, &[], &budget);
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward, bench_bounds, bench_bab);
criterion_main!(benches);
