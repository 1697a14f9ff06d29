use rand::Rng;

use super::{ReducedQuery, SearchBox};
use crate::linalg::Matrix;
use crate::model::AffineStage;

pub fn random_query(rng: &mut impl Rng, d: usize, layers: &[usize], labels: usize) -> ReducedQuery {
    let mut dims = vec![d];
    dims.extend_from_slice(layers);
    dims.push(labels);
    let stages = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| AffineStage {
            matrix: Matrix::from_vec(
                w[1],
                w[0],
                (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ),
            bias: (0..w[1]).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            relu_after: i + 2 < dims.len(),
        })
        .collect();
    ReducedQuery::from_stages(stages, rng.gen_range(0..labels), 1e-6).unwrap()
}

pub fn random_box(rng: &mut impl Rng, d: usize) -> SearchBox {
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for _ in 0..d {
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        lo.push(a.min(b));
        hi.push(a.max(b));
    }
    SearchBox { lo, hi, depth: 0 }
}

pub fn sample(rng: &mut impl Rng, b: &SearchBox) -> Vec<f64> {
    b.lo.iter().zip(&b.hi).map(|(&l, &h)| l + (h - l) * rng.gen::<f64>()).collect()
}

