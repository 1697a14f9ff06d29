//! Forward linear bound propagation over a [`SearchBox`].
//!
//! Every neuron carries a lower and an upper affine function of the free
//! variables. Affine stages combine them by weight sign; a ReLU with
//! pre-activation range `[l, u]` is passed through when `l >= 0`, zeroed
//! when `u <= 0`, and otherwise relaxed to the chord `u (z - l) / (u - l)`
//! above and `α z` below with `α = 1` iff `u >= -l`.

use super::{ReducedQuery, SearchBox};
use crate::linalg::Matrix;
use crate::model::AffineStage;

/// One affine function `coeffs[i] · v + consts[i]` per neuron.
#[derive(Debug, Clone)]
struct Forms {
    coeffs: Matrix,
    consts: Vec<f64>,
}

impl Forms {
    fn identity(d: usize) -> Self {
        Self {
            coeffs: Matrix::identity(d),
            consts: vec![0.0; d],
        }
    }

    fn len(&self) -> usize {
        self.consts.len()
    }
}

#[derive(Debug, Clone)]
struct Symbolic {
    lower: Forms,
    upper: Forms,
}

#[inline]
fn min_over(coeffs: &[f64], c: f64, b: &SearchBox) -> f64 {
    c + coeffs
        .iter()
        .zip(b.lo.iter().zip(&b.hi))
        .map(|(&a, (&l, &h))| if a >= 0.0 { a * l } else { a * h })
        .sum::<f64>()
}

#[inline]
fn max_over(coeffs: &[f64], c: f64, b: &SearchBox) -> f64 {
    c + coeffs
        .iter()
        .zip(b.lo.iter().zip(&b.hi))
        .map(|(&a, (&l, &h))| if a >= 0.0 { a * h } else { a * l })
        .sum::<f64>()
}

/// Lower/upper forms of `w · x + bias` given symbolic bounds on `x`.
fn combine_row(w: &[f64], bias: f64, input: &Symbolic, lo: &mut [f64], hi: &mut [f64]) -> (f64, f64) {
    lo.iter_mut().for_each(|x| *x = 0.0);
    hi.iter_mut().for_each(|x| *x = 0.0);
    let (mut clo, mut chi) = (bias, bias);
    for (j, &wj) in w.iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        let (l, u) = if wj > 0.0 {
            (&input.lower, &input.upper)
        } else {
            (&input.upper, &input.lower)
        };
        for (dst, &a) in lo.iter_mut().zip(l.coeffs.row(j)) {
            *dst += wj * a;
        }
        for (dst, &a) in hi.iter_mut().zip(u.coeffs.row(j)) {
            *dst += wj * a;
        }
        clo += wj * l.consts[j];
        chi += wj * u.consts[j];
    }
    (clo, chi)
}

fn apply_stage(stage: &AffineStage, input: &Symbolic) -> Symbolic {
    let d = input.lower.coeffs.cols();
    let n = stage.out_dim();
    let mut lower = Forms {
        coeffs: Matrix::zeros(n, d),
        consts: vec![0.0; n],
    };
    let mut upper = lower.clone();
    for r in 0..n {
        let (clo, chi) = combine_row(
            stage.matrix.row(r),
            stage.bias[r],
            input,
            lower.coeffs.row_mut(r),
            upper.coeffs.row_mut(r),
        );
        lower.consts[r] = clo;
        upper.consts[r] = chi;
    }
    Symbolic { lower, upper }
}

/// ReLU phase of one neuron on a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Active,
    Inactive,
    /// Unstable, lower slope 1.
    UnstablePass,
    /// Unstable, lower slope 0.
    UnstableZero,
}

fn relax(s: &mut Symbolic, b: &SearchBox, phases: Option<&mut Vec<Phase>>) {
    let mut local = Vec::new();
    let phases = phases.unwrap_or(&mut local);
    for i in 0..s.lower.len() {
        let l = min_over(s.lower.coeffs.row(i), s.lower.consts[i], b);
        let u = max_over(s.upper.coeffs.row(i), s.upper.consts[i], b);
        if l >= 0.0 {
            phases.push(Phase::Active);
        } else if u <= 0.0 {
            phases.push(Phase::Inactive);
            s.lower.coeffs.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            s.upper.coeffs.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            s.lower.consts[i] = 0.0;
            s.upper.consts[i] = 0.0;
        } else {
            let slope = u / (u - l);
            s.upper.coeffs.row_mut(i).iter_mut().for_each(|x| *x *= slope);
            s.upper.consts[i] = slope * (s.upper.consts[i] - l);
            if u >= -l {
                phases.push(Phase::UnstablePass);
            } else {
                phases.push(Phase::UnstableZero);
                s.lower.coeffs.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
                s.lower.consts[i] = 0.0;
            }
        }
    }
}

/// Symbolic bounds on the input of the final (logit) stage.
fn penultimate(q: &ReducedQuery, b: &SearchBox, mut phases: Option<&mut Vec<Phase>>) -> Symbolic {
    let stages: Vec<&AffineStage> = q.stages().collect();
    let hidden = &stages[..stages.len() - 1];
    if hidden.is_empty() {
        let id = Forms::identity(q.dim());
        return Symbolic {
            lower: id.clone(),
            upper: id,
        };
    }
    let head = hidden[0];
    let exact = Forms {
        coeffs: head.matrix.clone(),
        consts: head.bias.clone(),
    };
    let mut cur = Symbolic {
        lower: exact.clone(),
        upper: exact,
    };
    for (i, stage) in hidden.iter().enumerate() {
        if i > 0 {
            cur = apply_stage(stage, &cur);
        }
        if stage.relu_after {
            relax(&mut cur, b, phases.as_deref_mut());
        }
    }
    cur
}

fn last_stage(q: &ReducedQuery) -> &AffineStage {
    q.stages().last().expect("query has stages")
}

/// Sound enclosure `(logit_lo, logit_hi)` of `q(v)` for every `v` in `b`.
pub fn propagate_bounds(q: &ReducedQuery, b: &SearchBox) -> (Vec<f64>, Vec<f64>) {
    let pen = penultimate(q, b, None);
    let out = apply_stage(last_stage(q), &pen);
    let lo = (0..out.lower.len())
        .map(|i| min_over(out.lower.coeffs.row(i), out.lower.consts[i], b))
        .collect();
    let hi = (0..out.upper.len())
        .map(|i| max_over(out.upper.coeffs.row(i), out.upper.consts[i], b))
        .collect();
    (lo, hi)
}

/// Bounds on the target margin `m(v) = z_t(v) - max_{j≠t} z_j(v)` over a box.
#[derive(Debug, Clone)]
pub struct MarginBounds {
    /// `min_j max_b (z_t - z_j)`; never below the true maximum of `m` on the box.
    pub upper: f64,
    /// `min_j min_b (z_t - z_j)`; never above the true minimum of `m`.
    pub lower: f64,
    /// Coefficients of the lower affine form of the binding competitor.
    pub lower_coeffs: Vec<f64>,
    /// Vertex of the box maximizing that form.
    pub vertex: Vec<f64>,
}

pub(crate) fn margin_bounds_traced(
    q: &ReducedQuery,
    b: &SearchBox,
    phases: Option<&mut Vec<Phase>>,
) -> MarginBounds {
    let pen = penultimate(q, b, phases);
    let last = last_stage(q);
    let t = q.target();
    let d = q.dim();
    let wt = last.matrix.row(t);
    let mut diff = vec![0.0; last.in_dim()];
    let mut lo_c = vec![0.0; d];
    let mut hi_c = vec![0.0; d];
    let mut upper = f64::INFINITY;
    let mut lower = f64::INFINITY;
    let mut lower_coeffs = vec![0.0; d];
    for j in 0..last.out_dim() {
        if j == t {
            continue;
        }
        for ((dst, &a), &c) in diff.iter_mut().zip(wt).zip(last.matrix.row(j)) {
            *dst = a - c;
        }
        let bias = last.bias[t] - last.bias[j];
        let (clo, chi) = combine_row(&diff, bias, &pen, &mut lo_c, &mut hi_c);
        upper = upper.min(max_over(&hi_c, chi, b));
        let lj = min_over(&lo_c, clo, b);
        if lj < lower {
            lower = lj;
            lower_coeffs.copy_from_slice(&lo_c);
        }
    }
    let vertex = b.maximizing_vertex(&lower_coeffs);
    MarginBounds {
        upper,
        lower,
        lower_coeffs,
        vertex,
    }
}

pub fn margin_bounds(q: &ReducedQuery, b: &SearchBox) -> MarginBounds {
    margin_bounds_traced(q, b, None)
}

/// Sound upper bound on the target margin over `b`.
pub fn margin_upper_bound(q: &ReducedQuery, b: &SearchBox) -> f64 {
    margin_bounds(q, b).upper
}

#[cfg(test)]
pub(crate) fn relu_phases(q: &ReducedQuery, b: &SearchBox) -> Vec<Phase> {
    let mut phases = Vec::new();
    margin_bounds_traced(q, b, Some(&mut phases));
    phases
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{random_box, random_query, sample};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stage(rows: &[Vec<f64>], bias: &[f64], relu: bool) -> AffineStage {
        AffineStage {
            matrix: Matrix::from_rows(rows).unwrap(),
            bias: bias.to_vec(),
            relu_after: relu,
        }
    }

    #[test]
    fn point_box_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = random_query(&mut rng, 3, &[8, 8], 3);
            let v: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            let (lo, hi) = propagate_bounds(&q, &SearchBox::point(&v));
            for ((l, h), z) in lo.iter().zip(&hi).zip(q.eval(&v)) {
                assert!((l - z).abs() < 1e-6 && (h - z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affine_query_bounds_are_interval_image() {
        let q = ReducedQuery::from_stages(
            vec![stage(&[vec![1.0, -2.0], vec![0.5, 0.5]], &[0.0, 1.0], false)],
            0,
            0.0,
        )
        .unwrap();
        let b = SearchBox {
            lo: vec![0.0, 0.25],
            hi: vec![1.0, 0.5],
            depth: 0,
        };
        let (lo, hi) = propagate_bounds(&q, &b);
        assert!((lo[0] - (0.0 - 1.0)).abs() < 1e-12);
        assert!((hi[0] - (1.0 - 0.5)).abs() < 1e-12);
        assert!((lo[1] - (1.0 + 0.125)).abs() < 1e-12);
        assert!((hi[1] - (1.0 + 0.75)).abs() < 1e-12);
    }

    #[test]
    fn two_class_affine_margin_is_exact() {
        // z = (v, 1 - v), target 0: m = 2v - 1, max 1 at v = 1.
        let q = ReducedQuery::from_stages(
            vec![stage(&[vec![1.0], vec![-1.0]], &[0.0, 1.0], false)],
            0,
            0.0,
        )
        .unwrap();
        let ub = margin_upper_bound(&q, &SearchBox::unit(1));
        assert!((1.0..=1.0 + 1e-9).contains(&ub), "{ub}");
    }

    #[test]
    fn dominated_target_bound() {
        // z_t = z_j - 5 identically, through a hidden ReLU layer.
        let q = ReducedQuery::from_stages(
            vec![
                stage(&[vec![1.0, -1.0], vec![0.3, 2.0]], &[0.1, -0.4], true),
                stage(&[vec![1.0, 1.0], vec![1.0, 1.0]], &[-5.0, 0.0], false),
            ],
            0,
            0.0,
        )
        .unwrap();
        let ub = margin_upper_bound(&q, &SearchBox::unit(2));
        assert!(ub <= -5.0 + 1e-9, "{ub}");
    }

    #[test]
    fn sampled_logits_stay_inside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..50 {
            let d = rng.gen_range(1..=4);
            let layers = [rng.gen_range(2..16), rng.gen_range(2..16)];
            let q = random_query(&mut rng, d, &layers, 3);
            for _ in 0..20 {
                let b = random_box(&mut rng, d);
                let (lo, hi) = propagate_bounds(&q, &b);
                let ub = margin_upper_bound(&q, &b);
                for _ in 0..500 {
                    let v = sample(&mut rng, &b);
                    let z = q.eval(&v);
                    for ((l, h), zi) in lo.iter().zip(&hi).zip(&z) {
                        assert!(*l - 1e-9 <= *zi && *zi <= *h + 1e-9);
                    }
                    assert!(q.margin(&v) <= ub + 1e-9);
                }
            }
        }
    }

    #[test]
    fn margin_bound_dominates_sampled_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let q = random_query(&mut rng, 2, &[10], 4);
            let b = SearchBox::unit(2);
            let mb = margin_bounds(&q, &b);
            let mut best = f64::NEG_INFINITY;
            let mut worst = f64::INFINITY;
            for _ in 0..10_000 {
                let m = q.margin(&sample(&mut rng, &b));
                best = best.max(m);
                worst = worst.min(m);
            }
            assert!(mb.upper >= best - 1e-9);
            assert!(mb.lower <= worst + 1e-9);
        }
    }

    #[test]
    fn child_bound_does_not_exceed_parent_when_phases_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut compared = 0;
        for _ in 0..200 {
            let d = rng.gen_range(1..=3);
            let q = random_query(&mut rng, d, &[6, 6], 3);
            let parent = random_box(&mut rng, d);
            let pp = relu_phases(&q, &parent);
            let ub = margin_upper_bound(&q, &parent);
            let (l, r) = parent.split();
            for child in [l, r] {
                if relu_phases(&q, &child) == pp {
                    compared += 1;
                    assert!(margin_upper_bound(&q, &child) <= ub + 1e-9);
                }
            }
        }
        assert!(compared > 50);
    }
}
